//! Composite identity loss: softmax cross-entropy on BN-ed logits plus a
//! batch-hard triplet hinge on raw features, for the class head and the
//! mean over part heads.

use crate::error::{Error, Result};
use crate::model::HeadOutput;
use crate::tensor::{Element, Var};

/// Added under the square root so the distance is differentiable at zero.
pub const DIST_EPS: f64 = 1e-12;

/// Pairwise Euclidean distances `[B, B]` of `[B, d]` features.
pub fn pairwise_distances<'g, T: Element>(f: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = f.shape();
    let &[b, d] = &s[..] else {
        return Err(Error::dim(format!("features must be [B, d], got {s:?}")));
    };
    let diff = f.reshape(&[b, 1, d])?.sub(f.reshape(&[1, b, d])?)?;
    Ok(diff.square().sum_axis(2)?.add_scalar(DIST_EPS).sqrt())
}

/// Mean over anchors of `max(0, d_p − d_n + margin)`.
pub fn hinge<'g, T: Element>(
    d_pos: Var<'g, T>,
    d_neg: Var<'g, T>,
    margin: f64,
) -> Result<Var<'g, T>> {
    Ok(d_pos.sub(d_neg)?.add_scalar(margin).relu().mean_all())
}

/// Per anchor, the farthest same-label sample (excluding itself) and the
/// nearest other-label sample. Ties go to the lowest index.
pub fn mine_batch_hard(dist: &[f64], labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let b = labels.len();
    let (mut pos, mut neg) = (Vec::with_capacity(b), Vec::with_capacity(b));
    for a in 0..b {
        let row = &dist[a * b..(a + 1) * b];
        let mut hp: Option<usize> = None;
        let mut hn: Option<usize> = None;
        for j in 0..b {
            if labels[j] == labels[a] {
                if j != a && hp.is_none_or(|p| row[j] > row[p]) {
                    hp = Some(j);
                }
            } else if hn.is_none_or(|n| row[j] < row[n]) {
                hn = Some(j);
            }
        }
        let hp = hp.ok_or_else(|| {
            Error::contract(format!(
                "identity {} has a single image in the batch",
                labels[a]
            ))
        })?;
        let hn =
            hn.ok_or_else(|| Error::contract("a triplet batch needs at least two identities"))?;
        pos.push(a * b + hp);
        neg.push(a * b + hn);
    }
    Ok((pos, neg))
}

/// Batch-hard triplet loss over `[B, d]` features.
pub fn batch_hard_triplet<'g, T: Element>(
    features: Var<'g, T>,
    labels: &[usize],
    margin: f64,
) -> Result<Var<'g, T>> {
    let dist = pairwise_distances(features)?;
    let b = dist.shape()[0];
    if labels.len() != b {
        return Err(Error::dim(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let (pos, neg) = mine_batch_hard(&dist.value().to_f64_vec(), labels)?;
    let flat = dist.reshape(&[b * b])?;
    hinge(flat.take(&pos)?, flat.take(&neg)?, margin)
}

/// Loss terms of one step; `total = ce_cls + tri_cls + parts`.
pub struct LossTerms<'g, T: Element> {
    pub total: Var<'g, T>,
    pub ce_cls: Var<'g, T>,
    pub tri_cls: Var<'g, T>,
    /// Mean over part heads of CE + triplet; zero without part heads.
    pub parts: Var<'g, T>,
}

/// `heads[0]` is the class head, the rest are part heads.
pub fn total_loss<'g, T: Element>(
    heads: &[HeadOutput<'g, T>],
    labels: &[usize],
    margin: f64,
) -> Result<LossTerms<'g, T>> {
    let (cls, parts) = heads
        .split_first()
        .ok_or_else(|| Error::contract("total_loss needs a class head"))?;
    let ce_cls = cls.logits.cross_entropy(labels)?;
    let tri_cls = batch_hard_triplet(cls.triplet, labels, margin)?;
    let mut part_sum: Option<Var<'g, T>> = None;
    for h in parts {
        let term = h
            .logits
            .cross_entropy(labels)?
            .add(batch_hard_triplet(h.triplet, labels, margin)?)?;
        part_sum = Some(match part_sum {
            Some(s) => s.add(term)?,
            None => term,
        });
    }
    let parts = match part_sum {
        Some(s) => s.scale(1.0 / parts.len() as f64),
        None => ce_cls.scale(0.0),
    };
    let total = ce_cls.add(tri_cls)?.add(parts)?;
    Ok(LossTerms {
        total,
        ce_cls,
        tri_cls,
        parts,
    })
}
