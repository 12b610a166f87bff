//! Single-query retrieval metrics: CMC and mAP with same-identity,
//! same-camera gallery exclusion.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Embeddings `[N, D]` with identity and camera labels aligned by row.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalSet {
    pub embeddings: Tensor<f64>,
    pub pids: Vec<u32>,
    pub cams: Vec<u32>,
}

impl RetrievalSet {
    pub fn new(embeddings: Tensor<f64>, pids: Vec<u32>, cams: Vec<u32>) -> Result<Self> {
        let s = embeddings.shape();
        if s.len() != 2 || s[0] != pids.len() || pids.len() != cams.len() {
            return Err(Error::dim(format!(
                "{} pids and {} cams for embeddings {s:?}",
                pids.len(),
                cams.len()
            )));
        }
        Ok(RetrievalSet {
            embeddings,
            pids,
            cams,
        })
    }

    pub fn len(&self) -> usize {
        self.pids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }
}

/// Pairwise Euclidean distances `[Nq, Ng]`.
pub fn dist_matrix(q: &Tensor<f64>, g: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (qs, gs) = (q.shape(), g.shape());
    if qs.len() != 2 || gs.len() != 2 || qs[1] != gs[1] {
        return Err(Error::dim(format!(
            "cannot compare embeddings {qs:?} with {gs:?}"
        )));
    }
    let (nq, ng, d) = (qs[0], gs[0], qs[1]);
    let mut out = vec![0.0; nq * ng];
    out.par_chunks_mut(ng).enumerate().for_each(|(i, row)| {
        let a = &q.data()[i * d..(i + 1) * d];
        for (j, r) in row.iter_mut().enumerate() {
            let b = &g.data()[j * d..(j + 1) * d];
            *r = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
    });
    Tensor::new(&[nq, ng], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    /// `cmc[k]` is the fraction of valid queries matched within rank `k + 1`;
    /// one entry per gallery item.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub valid_queries: usize,
    /// Queries without any gallery positive after exclusion.
    pub skipped: usize,
}

impl Retrieval {
    /// Rank-`k` accuracy (1-based); ranks past the gallery size saturate.
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k.clamp(1, self.cmc.len()) - 1]
    }
}

/// Gallery indices by ascending distance, ties broken by index.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

pub fn cmc_map(
    dist: &Tensor<f64>,
    q_pids: &[u32],
    q_cams: &[u32],
    g_pids: &[u32],
    g_cams: &[u32],
) -> Result<Retrieval> {
    let s = dist.shape();
    if s.len() != 2
        || s[0] != q_pids.len()
        || s[0] != q_cams.len()
        || s[1] != g_pids.len()
        || s[1] != g_cams.len()
    {
        return Err(Error::dim(format!(
            "distance matrix {s:?} does not match the label lists"
        )));
    }
    let ng = s[1];
    let mut hits = vec![0usize; ng];
    let (mut ap_sum, mut valid, mut skipped) = (0.0, 0, 0);
    for (i, (&qp, &qc)) in q_pids.iter().zip(q_cams).enumerate() {
        let row = &dist.data()[i * ng..(i + 1) * ng];
        let kept = ranking(row)
            .into_iter()
            .filter(|&j| !(g_pids[j] == qp && g_cams[j] == qc));
        let matches: Vec<bool> = kept.map(|j| g_pids[j] == qp).collect();
        let Some(first) = matches.iter().position(|&m| m) else {
            skipped += 1;
            continue;
        };
        valid += 1;
        hits[first] += 1;
        let (mut found, mut ap) = (0usize, 0.0);
        for (r, _) in matches.iter().enumerate().filter(|(_, &m)| m) {
            found += 1;
            ap += found as f64 / (r + 1) as f64;
        }
        ap_sum += ap / found as f64;
    }
    if valid == 0 {
        return Err(Error::Eval("no query has a valid gallery positive".into()));
    }
    let mut cmc = Vec::with_capacity(ng);
    let mut acc = 0;
    for h in hits {
        acc += h;
        cmc.push(acc as f64 / valid as f64);
    }
    Ok(Retrieval {
        cmc,
        map: ap_sum / valid as f64,
        valid_queries: valid,
        skipped,
    })
}

/// Distances and metrics of `query` against `gallery`.
pub fn evaluate(query: &RetrievalSet, gallery: &RetrievalSet) -> Result<Retrieval> {
    let d = dist_matrix(&query.embeddings, &gallery.embeddings)?;
    cmc_map(&d, &query.pids, &query.cams, &gallery.pids, &gallery.cams)
}
