//! The high-order transformer layer.
//!
//! Order 1 is pre-norm multi-head self-attention with a residual. Each
//! further order downsamples the previous order's spatial tokens with
//! [`lrp`], layer-normalizes them and attends over them again, either computing fresh scores
//! (`full`) or reusing the first-order scores block-pooled to the coarse grid
//! and right-multiplied by a learned prior (`shared`). The orders are
//! upsampled back, summed onto order 1 and passed through a pre-norm FFN.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{self, Probe, ProjectionSet};
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::lrp::{self, LrpParams, LrpVariant};
use crate::params::{init, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::kernels::nearest_index_map;
use crate::tensor::{Element, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
pub const MAX_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttnMode {
    #[default]
    Full,
    Shared,
}

impl FromStr for AttnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(AttnMode::Full),
            "shared" => Ok(AttnMode::Shared),
            other => Err(Error::config(format!(
                "attention mode must be full or shared, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for AttnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnMode::Full => "full",
            AttnMode::Shared => "shared",
        })
    }
}

/// Which side of the pooled scores the prior multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PriorAxis {
    /// `S · W`: re-weights attended positions.
    #[default]
    Key,
    /// `W · S`: mixes query rows.
    Query,
}

impl FromStr for PriorAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "key" => Ok(PriorAxis::Key),
            "query" => Ok(PriorAxis::Query),
            other => Err(Error::config(format!(
                "prior axis must be key or query, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for PriorAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorAxis::Key => "key",
            PriorAxis::Query => "query",
        })
    }
}

/// Settings shared by every layer of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOptions {
    pub dim: usize,
    pub heads: usize,
    pub mode: AttnMode,
    pub lrp: LrpVariant,
    pub prior_axis: PriorAxis,
    pub tie_vk: bool,
    pub deform_depthwise: bool,
    pub ffn_ratio: usize,
}

impl Default for LayerOptions {
    fn default() -> Self {
        LayerOptions {
            dim: 64,
            heads: 4,
            mode: AttnMode::Full,
            lrp: LrpVariant::default(),
            prior_axis: PriorAxis::Key,
            tie_vk: false,
            deform_depthwise: false,
            ffn_ratio: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            gamma: store.add(
                format!("{prefix}.g"),
                Tensor::ones(&[dim]),
                ParamKind::NoDecay,
            )?,
            beta: store.add(
                format!("{prefix}.b"),
                Tensor::zeros(&[dim]),
                ParamKind::NoDecay,
            )?,
        })
    }

    pub fn apply<'g, T: Element>(
        &self,
        sess: &Session<'g, T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        x.layer_norm(sess.p(self.gamma), sess.p(self.beta), LN_EPS)
    }
}

/// Pre-norm feed-forward sub-block: `x + W2·gelu(W1·LN(x) + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub norm: Norm,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Ffn {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = dim * ratio;
        if hidden == 0 {
            return Err(Error::config("FFN hidden width must be positive"));
        }
        Ok(Ffn {
            norm: Norm::new(store, &format!("{prefix}.ln2"), dim)?,
            w1: store.add(
                format!("{prefix}.ffn.w1"),
                init::xavier(dim, hidden, rng),
                ParamKind::Weight,
            )?,
            b1: store.add(
                format!("{prefix}.ffn.b1"),
                Tensor::zeros(&[hidden]),
                ParamKind::Weight,
            )?,
            w2: store.add(
                format!("{prefix}.ffn.w2"),
                init::xavier(hidden, dim, rng),
                ParamKind::Weight,
            )?,
            b2: store.add(
                format!("{prefix}.ffn.b2"),
                Tensor::zeros(&[dim]),
                ParamKind::Weight,
            )?,
        })
    }

    pub fn forward<'g, T: Element>(
        &self,
        sess: &Session<'g, T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let h = self
            .norm
            .apply(sess, x)?
            .matmul(sess.p(self.w1))?
            .add(sess.p(self.b1))?
            .gelu();
        let y = h.matmul(sess.p(self.w2))?.add(sess.p(self.b2))?;
        x.add(y)
    }
}

/// Plain pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub norm: Norm,
    pub attn: ProjectionSet,
    pub ffn: Ffn,
}

impl TransformerBlock {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        opts: &LayerOptions,
        rng: &mut R,
    ) -> Result<Self> {
        let norm = Norm::new(store, &format!("{prefix}.ln1"), opts.dim)?;
        let attn = ProjectionSet::new(
            store,
            &format!("{prefix}.attn"),
            opts.dim,
            opts.heads,
            true,
            opts.tie_vk,
            rng,
        )?;
        let ffn = Ffn::new(store, prefix, opts.dim, opts.ffn_ratio, rng)?;
        Ok(TransformerBlock { norm, attn, ffn })
    }

    pub fn forward<'g, T: Element>(
        &self,
        sess: &Session<'g, T>,
        x: &TokenGrid<'g, T>,
        probe: Probe<'_>,
    ) -> Result<TokenGrid<'g, T>> {
        let a = attention::mhsa(sess, self.norm.apply(sess, x.tokens)?, &self.attn, probe, 1)?;
        let y = self.ffn.forward(sess, x.tokens.add(a.out)?)?;
        TokenGrid::new(y, x.h, x.w, x.cls)
    }
}

/// Parameters of order `order ≥ 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct HigherOrder {
    pub order: usize,
    pub lrp: LrpParams,
    /// Applied to the LRP output before it is projected.
    pub norm: Norm,
    /// Q/K/V in full mode; V only in shared mode.
    pub attn: ProjectionSet,
    /// `[n', n']`, shared mode only.
    pub prior: Option<ParamId>,
    /// Spatial grid this order attends over.
    pub grid: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OhLayer {
    pub norm: Norm,
    pub first: ProjectionSet,
    pub orders: Vec<HigherOrder>,
    pub ffn: Ffn,
    pub mode: AttnMode,
    pub prior_axis: PriorAxis,
    /// Spatial grid of the layer input.
    pub grid: (usize, usize),
}

/// Grid of each order 1..=m for an `h × w` input.
pub fn order_grids(
    variant: &LrpVariant,
    h: usize,
    w: usize,
    m: usize,
) -> Result<Vec<(usize, usize)>> {
    let mut grids = vec![(h, w)];
    for order in 2..=m {
        let (ph, pw) = *grids.last().expect("order 1 present");
        if !variant.is_identity() && (ph < 2 || pw < 2) {
            return Err(Error::config(format!(
                "order {order} needs a grid of at least 2x2 to downsample, order {} is {ph}x{pw}",
                order - 1
            )));
        }
        grids.push(variant.out_grid(ph, pw));
    }
    Ok(grids)
}

impl OhLayer {
    /// `order` is the layer's order m; `grid` is the spatial grid of its input.
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        order: usize,
        grid: (usize, usize),
        opts: &LayerOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if order == 0 || order > MAX_ORDER {
            return Err(Error::config(format!(
                "layer order must be in 1..={MAX_ORDER}, got {order}"
            )));
        }
        let grids = order_grids(&opts.lrp, grid.0, grid.1, order)?;
        let norm = Norm::new(store, &format!("{prefix}.ln1"), opts.dim)?;
        let first = ProjectionSet::new(
            store,
            &format!("{prefix}.attn"),
            opts.dim,
            opts.heads,
            true,
            opts.tie_vk,
            rng,
        )?;
        let full = opts.mode == AttnMode::Full;
        let mut orders = Vec::new();
        for (i, &g) in grids.iter().enumerate().skip(1) {
            let o = i + 1;
            let p = format!("{prefix}.o{o}");
            let lrp = LrpParams::new(
                store,
                &format!("{p}.lrp"),
                opts.dim,
                opts.lrp.clone(),
                opts.deform_depthwise,
                rng,
            )?;
            let norm = Norm::new(store, &format!("{p}.ln"), opts.dim)?;
            let attn = ProjectionSet::new(
                store,
                &format!("{p}.attn"),
                opts.dim,
                opts.heads,
                full,
                opts.tie_vk && full,
                rng,
            )?;
            let prior = (!full)
                .then(|| {
                    store.add(
                        format!("{p}.prior"),
                        Tensor::eye(g.0 * g.1),
                        ParamKind::Weight,
                    )
                })
                .transpose()?;
            orders.push(HigherOrder {
                order: o,
                lrp,
                norm,
                attn,
                prior,
                grid: g,
            });
        }
        let ffn = Ffn::new(store, prefix, opts.dim, opts.ffn_ratio, rng)?;
        Ok(OhLayer {
            norm,
            first,
            orders,
            ffn,
            mode: opts.mode,
            prior_axis: opts.prior_axis,
            grid,
        })
    }

    pub fn order(&self) -> usize {
        1 + self.orders.len()
    }
}

/// The output of one order inside a layer invocation.
#[derive(Clone, Copy, Debug)]
pub struct OrderState<'g, T: Element> {
    pub order: usize,
    /// Order 1 keeps the class token; higher orders are spatial only.
    pub a: TokenGrid<'g, T>,
}

pub struct FirstOrder<'g, T: Element> {
    pub state: OrderState<'g, T>,
    /// Pre-softmax scores over spatial tokens only, `[B, h, n, n]`.
    pub spatial_scores: Var<'g, T>,
}

/// `A_1 = x + MHSA(LN(x))`.
pub fn first_order<'g, T: Element>(
    sess: &Session<'g, T>,
    layer: &OhLayer,
    x: &TokenGrid<'g, T>,
    probe: Probe<'_>,
) -> Result<FirstOrder<'g, T>> {
    if !x.cls {
        return Err(Error::contract(
            "first-order attention expects a class token",
        ));
    }
    if (x.h, x.w) != layer.grid {
        return Err(Error::dim(format!(
            "layer built for a {:?} grid, got {}x{}",
            layer.grid, x.h, x.w
        )));
    }
    let a = attention::mhsa(
        sess,
        layer.norm.apply(sess, x.tokens)?,
        &layer.first,
        probe,
        1,
    )?;
    let t = x.len();
    let spatial_scores = a.scores.slice(2, 1, t)?.slice(3, 1, t)?;
    let a1 = TokenGrid::new(x.tokens.add(a.out)?, x.h, x.w, true)?;
    Ok(FirstOrder {
        state: OrderState { order: 1, a: a1 },
        spatial_scores,
    })
}

/// Token `y·w + x` of the fine grid → its coarse token under the nearest map.
pub fn token_block_map(src: (usize, usize), dst: (usize, usize)) -> Vec<usize> {
    let my = nearest_index_map(dst.0, src.0);
    let mx = nearest_index_map(dst.1, src.1);
    let mut map = Vec::with_capacity(src.0 * src.1);
    for &cy in &my {
        for &cx in &mx {
            map.push(cy * dst.1 + cx);
        }
    }
    map
}

fn reachable(src: (usize, usize), dst: (usize, usize)) -> bool {
    let mut g = src;
    loop {
        if g == dst {
            return true;
        }
        if g.0 < dst.0 || g.1 < dst.1 || g == (1, 1) {
            return false;
        }
        g = (g.0.div_ceil(2), g.1.div_ceil(2));
    }
}

/// Block-mean of `[B, h, n, n]` spatial scores over both the query and key
/// axes onto the `dst` grid.
pub fn share_scores<'g, T: Element>(
    s1: Var<'g, T>,
    src: (usize, usize),
    dst: (usize, usize),
) -> Result<Var<'g, T>> {
    let s = s1.shape();
    let n = src.0 * src.1;
    if s.len() != 4 || s[2] != n || s[3] != n {
        return Err(Error::dim(format!(
            "shared scores {s:?} do not match a {}x{} grid",
            src.0, src.1
        )));
    }
    if !reachable(src, dst) {
        return Err(Error::config(format!(
            "grid {dst:?} is not reachable by halving {src:?}"
        )));
    }
    if src == dst {
        return Ok(s1);
    }
    let map = token_block_map(src, dst);
    let m = dst.0 * dst.1;
    s1.segment_mean(3, &map, m)?.segment_mean(2, &map, m)
}

/// Multiply each head's score matrix by the prior on the chosen axis.
pub fn prior_mix<'g, T: Element>(
    s: Var<'g, T>,
    w: Var<'g, T>,
    axis: PriorAxis,
) -> Result<Var<'g, T>> {
    let (ss, ws) = (s.shape(), w.shape());
    let n = *ss.last().unwrap_or(&0);
    if ws != [n, n] || ss.len() < 2 || ss[ss.len() - 2] != n {
        return Err(Error::dim(format!(
            "prior {ws:?} does not match scores {ss:?}"
        )));
    }
    match axis {
        PriorAxis::Key => s.matmul(w),
        PriorAxis::Query => w.matmul(s),
    }
}

/// Multiply-adds spent producing one shared-mode order's scores.
pub fn shared_score_madds(heads: usize, n: usize, n_coarse: usize) -> u64 {
    let (h, n, c) = (heads as u64, n as u64, n_coarse as u64);
    let pool = if n == c { 0 } else { h * n * (n + c) };
    pool + h * c * c * c
}

/// Multiply-adds spent producing one full-mode order's scores (Q/K
/// projections plus `QKᵀ`).
pub fn full_score_madds(dim: usize, n: usize) -> u64 {
    let (d, n) = (dim as u64, n as u64);
    2 * n * d * d + n * n * d
}

/// Compute order `prev.order + 1` from `prev`.
pub fn high_order_step<'g, T: Element>(
    sess: &Session<'g, T>,
    layer: &OhLayer,
    prev: &OrderState<'g, T>,
    s1: Var<'g, T>,
    probe: Probe<'_>,
) -> Result<OrderState<'g, T>> {
    let hp = layer
        .orders
        .get(prev.order - 1)
        .ok_or_else(|| Error::contract(format!("layer has no order {}", prev.order + 1)))?;
    let a = prev.a.strip_cls()?;
    let b = lrp::lrp(sess, &a, &hp.lrp).map_err(|e| match e {
        Error::Config(m) => Error::config(format!("order {}: {m}", hp.order)),
        e => e,
    })?;
    if (b.h, b.w) != hp.grid {
        return Err(Error::contract(format!(
            "order {} expected grid {:?}, got {}x{}",
            hp.order, hp.grid, b.h, b.w
        )));
    }
    let bn = hp.norm.apply(sess, b.tokens)?;
    let scores = match layer.mode {
        AttnMode::Full => attention::scores(sess, bn, &hp.attn, probe)?,
        AttnMode::Shared => {
            let prior = hp
                .prior
                .ok_or_else(|| Error::contract("shared order without a prior"))?;
            probe.count(shared_score_madds(
                layer.first.heads,
                layer.grid.0 * layer.grid.1,
                b.spatial(),
            ));
            let pooled = share_scores(s1, layer.grid, hp.grid)?;
            prior_mix(pooled, sess.p(prior), layer.prior_axis)?
        }
    };
    let out = attention::attend(sess, scores, bn, &hp.attn, probe, hp.order)?;
    Ok(OrderState {
        order: hp.order,
        a: TokenGrid::new(out, b.h, b.w, false)?,
    })
}

/// Upsample every higher order to the first-order grid, add them onto
/// `A_1` (class position gets zero), then apply the pre-norm FFN.
pub fn fuse<'g, T: Element>(
    sess: &Session<'g, T>,
    layer: &OhLayer,
    orders: &[OrderState<'g, T>],
) -> Result<TokenGrid<'g, T>> {
    let first = orders
        .first()
        .ok_or_else(|| Error::contract("fuse needs at least the first order"))?;
    let a1 = first.a;
    if first.order != 1 || !a1.cls {
        return Err(Error::contract(
            "fuse expects order 1 with its class token first",
        ));
    }
    let mut parent = (a1.h, a1.w);
    let mut acc: Option<Var<'g, T>> = None;
    for (i, st) in orders.iter().enumerate().skip(1) {
        let g = (st.a.h, st.a.w);
        let ok = st.order == i + 1
            && !st.a.cls
            && g.0 <= parent.0
            && g.1 <= parent.1
            && reachable(parent, g);
        if !ok {
            return Err(Error::contract(format!(
                "order {} has grid {g:?}, inconsistent with its parent grid {parent:?}",
                st.order
            )));
        }
        parent = g;
        let up = st.a.to_map()?.upsample_nearest(a1.h, a1.w)?;
        acc = Some(match acc {
            Some(s) => s.add(up)?,
            None => up,
        });
    }
    let pre = match acc {
        None => a1.tokens,
        Some(sum) => {
            let spatial = TokenGrid::from_map(sum)?.tokens;
            let zero = sess
                .graph()
                .constant(Tensor::zeros(&[a1.batch(), 1, a1.dim()]));
            a1.tokens.add(Var::concat(&[zero, spatial], 1)?)?
        }
    };
    TokenGrid::new(layer.ffn.forward(sess, pre)?, a1.h, a1.w, true)
}

/// First order, every higher order, then fusion.
pub fn oh_layer<'g, T: Element>(
    sess: &Session<'g, T>,
    layer: &OhLayer,
    x: &TokenGrid<'g, T>,
    probe: Probe<'_>,
) -> Result<TokenGrid<'g, T>> {
    let first = first_order(sess, layer, x, probe)?;
    let mut states = vec![first.state];
    for _ in &layer.orders {
        let next = high_order_step(
            sess,
            layer,
            states.last().expect("non-empty"),
            first.spatial_scores,
            probe,
        )?;
        states.push(next);
    }
    fuse(sess, layer, &states)
}
