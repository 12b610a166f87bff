//! Scaled dot-product and multi-head self-attention.
//!
//! Scores are `Q Kᵀ / √d_k` per head with `d_k = d_v = d / h`. Attention
//! weights can be captured into an [`AttentionCapture`] and score
//! multiply-adds tallied in a [`FlopCounter`]; both are per-forward
//! accumulators passed in through a [`Probe`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::{Element, Tensor, Var};

/// One head of one order's attention for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub order: usize,
    pub head: usize,
    /// Index of the sample within its batch.
    pub sample: usize,
    /// Post-softmax `[T', T']`.
    pub weights: Tensor<f64>,
    /// Pre-softmax `[T', T']`.
    pub scores: Tensor<f64>,
}

#[derive(Debug, Default)]
pub struct AttentionCapture {
    records: RefCell<Vec<AttentionRecord>>,
}

impl AttentionCapture {
    pub fn new() -> Self {
        Self::default()
    }

    /// Split `[B, h, T, T]` scores and weights into per-sample, per-head records.
    pub fn record<T: Element>(
        &self,
        layer: usize,
        order: usize,
        scores: &Tensor<T>,
        weights: &Tensor<T>,
    ) {
        let s = weights.shape();
        let (b, h, t, u) = (s[0], s[1], s[2], s[3]);
        let mut out = self.records.borrow_mut();
        for sample in 0..b {
            for head in 0..h {
                let base = (sample * h + head) * t * u;
                let slice = |x: &Tensor<T>| {
                    Tensor::new(
                        &[t, u],
                        x.data()[base..base + t * u]
                            .iter()
                            .map(|v| v.f64())
                            .collect(),
                    )
                    .expect("non-empty block")
                };
                out.push(AttentionRecord {
                    layer,
                    order,
                    head,
                    sample,
                    weights: slice(weights),
                    scores: slice(scores),
                });
            }
        }
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_records(self) -> Vec<AttentionRecord> {
        self.records.into_inner()
    }
}

/// Attention-score multiply-adds per layer.
#[derive(Debug, Default)]
pub struct FlopCounter {
    per_layer: RefCell<BTreeMap<usize, u64>>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, layer: usize, madds: u64) {
        *self.per_layer.borrow_mut().entry(layer).or_default() += madds;
    }

    pub fn layer(&self, layer: usize) -> u64 {
        self.per_layer.borrow().get(&layer).copied().unwrap_or(0)
    }

    pub fn per_layer(&self) -> BTreeMap<usize, u64> {
        self.per_layer.borrow().clone()
    }

    pub fn total(&self) -> u64 {
        self.per_layer.borrow().values().sum()
    }
}

/// Optional per-forward observers plus the index of the layer being run.
#[derive(Clone, Copy, Debug, Default)]
pub struct Probe<'a> {
    pub capture: Option<&'a AttentionCapture>,
    pub flops: Option<&'a FlopCounter>,
    pub layer: usize,
}

impl<'a> Probe<'a> {
    pub fn at_layer(self, layer: usize) -> Self {
        Probe { layer, ..self }
    }

    pub fn count(&self, madds: u64) {
        if let Some(f) = self.flops {
            f.add(self.layer, madds);
        }
    }
}

/// Projection weights of one attention block. Query and key maps are
/// absent for orders that reuse shared scores; with `tie_vk` the key map
/// doubles as the value map.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub dim: usize,
    pub heads: usize,
    pub wq: Option<ParamId>,
    pub wk: Option<ParamId>,
    pub wv: Option<ParamId>,
    pub wo: ParamId,
}

impl ProjectionSet {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        with_qk: bool,
        tie_vk: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        if tie_vk && !with_qk {
            return Err(Error::config(
                "tie_vk needs a key projection, but this order shares its scores",
            ));
        }
        let mut linear = |name: &str, store: &mut ParamStore<T>| {
            store.add(
                format!("{prefix}.{name}"),
                init::xavier(dim, dim, rng),
                ParamKind::Weight,
            )
        };
        let wq = with_qk.then(|| linear("wq", store)).transpose()?;
        let wk = with_qk.then(|| linear("wk", store)).transpose()?;
        let wv = (!tie_vk).then(|| linear("wv", store)).transpose()?;
        let wo = linear("wo", store)?;
        Ok(ProjectionSet {
            dim,
            heads,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn value_weight(&self) -> ParamId {
        self.wv.or(self.wk).expect("a value or tied key projection")
    }
}

fn check_width<T: Element>(x: &Var<'_, T>, proj: &ProjectionSet) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != proj.dim {
        return Err(Error::dim(format!(
            "attention expects [B, T, {}], got {s:?}",
            proj.dim
        )));
    }
    Ok((s[0], s[1]))
}

/// `[B, T, h·dh]` → `[B, h, T, dh]`.
pub fn split_heads<'g, T: Element>(x: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
        return Err(Error::config(format!(
            "cannot split {s:?} into {heads} heads"
        )));
    }
    x.reshape(&[s[0], s[1], heads, s[2] / heads])?
        .permute(&[0, 2, 1, 3])
}

/// `[B, h, T, dh]` → `[B, T, h·dh]`.
pub fn merge_heads<'g, T: Element>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("merge_heads expects rank 4, got {s:?}")));
    }
    x.permute(&[0, 2, 1, 3])?
        .reshape(&[s[0], s[2], s[1] * s[3]])
}

/// Per-head scaled dot-product scores `[B, h, T, T]`.
pub fn scores<'g, T: Element>(
    sess: &Session<'g, T>,
    x: Var<'g, T>,
    proj: &ProjectionSet,
    probe: Probe<'_>,
) -> Result<Var<'g, T>> {
    let (_, t) = check_width(&x, proj)?;
    let (wq, wk) = match (proj.wq, proj.wk) {
        (Some(q), Some(k)) => (q, k),
        _ => {
            return Err(Error::contract(
                "scores requested from a projection set without query/key maps",
            ))
        }
    };
    let q = split_heads(x.matmul(sess.p(wq))?, proj.heads)?;
    let k = split_heads(x.matmul(sess.p(wk))?, proj.heads)?;
    let (t, d) = (t as u64, proj.dim as u64);
    probe.count(2 * t * d * d + t * t * d);
    Ok(q.matmul(k.transpose()?)?
        .scale(1.0 / (proj.head_dim() as f64).sqrt()))
}

/// Per-head values `[B, h, T, dh]`.
pub fn values<'g, T: Element>(
    sess: &Session<'g, T>,
    x: Var<'g, T>,
    proj: &ProjectionSet,
) -> Result<Var<'g, T>> {
    check_width(&x, proj)?;
    split_heads(x.matmul(sess.p(proj.value_weight()))?, proj.heads)
}

/// Softmax over keys, then the weighted sum of value rows.
pub fn apply<'g, T: Element>(scores: Var<'g, T>, v: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(apply_with_weights(scores, v)?.0)
}

/// [`apply`] that also returns the post-softmax weights.
pub fn apply_with_weights<'g, T: Element>(
    scores: Var<'g, T>,
    v: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let (s, vs) = (scores.shape(), v.shape());
    if s.len() != 4 || vs.len() != 4 || s[..2] != vs[..2] || s[3] != vs[2] {
        return Err(Error::dim(format!(
            "attention scores {s:?} do not match values {vs:?}"
        )));
    }
    let weights = scores.softmax();
    Ok((weights.matmul(v)?, weights))
}

/// Attend over `x_values` with precomputed `scores`, merge heads and apply
/// the output projection. Emits records tagged `order` when capturing.
pub fn attend<'g, T: Element>(
    sess: &Session<'g, T>,
    scores: Var<'g, T>,
    x_values: Var<'g, T>,
    proj: &ProjectionSet,
    probe: Probe<'_>,
    order: usize,
) -> Result<Var<'g, T>> {
    let v = values(sess, x_values, proj)?;
    let (heads_out, weights) = apply_with_weights(scores, v)?;
    if let Some(c) = probe.capture {
        c.record(probe.layer, order, &scores.value(), &weights.value());
    }
    merge_heads(heads_out)?.matmul(sess.p(proj.wo))
}

pub struct MhsaOutput<'g, T: Element> {
    /// `[B, T, d]`, without residual.
    pub out: Var<'g, T>,
    /// Pre-softmax `[B, h, T, T]`.
    pub scores: Var<'g, T>,
}

/// Multi-head self-attention; pre-norm and residual are the caller's job.
pub fn mhsa<'g, T: Element>(
    sess: &Session<'g, T>,
    x: Var<'g, T>,
    proj: &ProjectionSet,
    probe: Probe<'_>,
    order: usize,
) -> Result<MhsaOutput<'g, T>> {
    let s = scores(sess, x, proj, probe)?;
    let out = attend(sess, s, x, proj, probe, order)?;
    Ok(MhsaOutput { out, scores: s })
}
