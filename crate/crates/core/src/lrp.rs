//! Local relation perception: the stride-2 bridge between attention orders.
//!
//! The default variant sums a deformable 3×3 convolution (learned sampling
//! offsets, zero-initialized) and a depthwise 3×3 convolution. Every branch
//! uses stride 2 and padding 1, so an `h × w` grid becomes
//! `ceil(h/2) × ceil(w/2)`. Other branch kinds are provided for ablation and
//! compose with `+`, e.g. `"DWC+DFC"`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::params::{init, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::{Element, PoolKind, Tensor, Var};

const K: usize = 3;
const TAPS: usize = K * K;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchKind {
    /// Depthwise convolution.
    Dwc,
    /// Normal (full) convolution.
    Nc,
    /// 3×3 average pooling.
    Ap,
    /// 3×3 max pooling.
    Mp,
    /// Deformable convolution.
    Dfc,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Dwc => "DWC",
            BranchKind::Nc => "NC",
            BranchKind::Ap => "AP",
            BranchKind::Mp => "MP",
            BranchKind::Dfc => "DFC",
        }
    }
}

impl FromStr for BranchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "DWC" => BranchKind::Dwc,
            "NC" => BranchKind::Nc,
            "AP" => BranchKind::Ap,
            "MP" => BranchKind::Mp,
            "DFC" => BranchKind::Dfc,
            other => return Err(Error::config(format!("unknown LRP branch {other:?}"))),
        })
    }
}

/// A sum of branches; empty means identity at full resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LrpVariant(Vec<BranchKind>);

impl LrpVariant {
    pub fn new(branches: Vec<BranchKind>) -> Result<Self> {
        for (i, b) in branches.iter().enumerate() {
            if branches[..i].contains(b) {
                return Err(Error::config(format!(
                    "LRP branch {} listed twice",
                    b.name()
                )));
            }
        }
        Ok(LrpVariant(branches))
    }

    pub fn identity() -> Self {
        LrpVariant(Vec::new())
    }

    pub fn branches(&self) -> &[BranchKind] {
        &self.0
    }

    pub fn has(&self, kind: BranchKind) -> bool {
        self.0.contains(&kind)
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_empty()
    }

    /// Output grid for an `h × w` input.
    pub fn out_grid(&self, h: usize, w: usize) -> (usize, usize) {
        if self.is_identity() {
            (h, w)
        } else {
            (h.div_ceil(2), w.div_ceil(2))
        }
    }
}

impl Default for LrpVariant {
    fn default() -> Self {
        LrpVariant(vec![BranchKind::Dwc, BranchKind::Dfc])
    }
}

impl FromStr for LrpVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("none") {
            return Ok(LrpVariant::identity());
        }
        LrpVariant::new(s.split('+').map(str::parse).collect::<Result<_>>()?)
    }
}

impl fmt::Display for LrpVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("None");
        }
        let names: Vec<&str> = self.0.iter().map(|b| b.name()).collect();
        f.write_str(&names.join("+"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformParams {
    /// `[2·9, C, 3, 3]`; channel `2k` is the row offset of tap `k`, `2k+1` the column offset.
    pub offset_w: ParamId,
    pub offset_b: ParamId,
    /// `[C, C, 3, 3]`, or `[C, 1, 3, 3]` when depthwise.
    pub weight: ParamId,
    pub depthwise: bool,
}

impl DeformParams {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        depthwise: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let offset_w = store.add(
            format!("{prefix}.offset_w"),
            Tensor::zeros(&[2 * TAPS, dim, K, K]),
            ParamKind::Weight,
        )?;
        let offset_b = store.add(
            format!("{prefix}.offset_b"),
            Tensor::zeros(&[2 * TAPS]),
            ParamKind::Weight,
        )?;
        let cin = if depthwise { 1 } else { dim };
        let weight = store.add(
            format!("{prefix}.weight"),
            init::conv([dim, cin, K, K], rng),
            ParamKind::Weight,
        )?;
        Ok(DeformParams {
            offset_w,
            offset_b,
            weight,
            depthwise,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrpParams {
    pub variant: LrpVariant,
    pub dim: usize,
    pub deform: Option<DeformParams>,
    /// `[C, 1, 3, 3]`.
    pub dw: Option<ParamId>,
    /// `[C, C, 3, 3]`.
    pub nc: Option<ParamId>,
}

impl LrpParams {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        variant: LrpVariant,
        deform_depthwise: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = LrpParams {
            variant: variant.clone(),
            dim,
            deform: None,
            dw: None,
            nc: None,
        };
        for &b in variant.branches() {
            match b {
                BranchKind::Dfc => {
                    p.deform = Some(DeformParams::new(
                        store,
                        &format!("{prefix}.dfc"),
                        dim,
                        deform_depthwise,
                        rng,
                    )?)
                }
                BranchKind::Dwc => {
                    p.dw = Some(store.add(
                        format!("{prefix}.dwc"),
                        init::conv([dim, 1, K, K], rng),
                        ParamKind::Weight,
                    )?)
                }
                BranchKind::Nc => {
                    p.nc = Some(store.add(
                        format!("{prefix}.nc"),
                        init::conv([dim, dim, K, K], rng),
                        ParamKind::Weight,
                    )?)
                }
                BranchKind::Ap | BranchKind::Mp => {}
            }
        }
        Ok(p)
    }
}

/// Sampling positions of the 3×3 stride-2 pad-1 kernel, `[1, Ho·Wo·9, 2]`
/// ordered by (output row, output column, tap).
fn base_grid<T: Element>(ho: usize, wo: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(ho * wo * TAPS * 2);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..K {
                for kx in 0..K {
                    data.push(T::of((oy * 2 + ky) as f64 - 1.0));
                    data.push(T::of((ox * 2 + kx) as f64 - 1.0));
                }
            }
        }
    }
    Tensor::new(&[1, ho * wo * TAPS, 2], data).expect("non-empty grid")
}

/// Deformable 3×3 stride-2 convolution of `[B, C, H, W]`.
pub fn deform_branch<'g, T: Element>(
    sess: &Session<'g, T>,
    x: Var<'g, T>,
    p: &DeformParams,
) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!(
            "deform_branch expects [B, C, H, W], got {s:?}"
        )));
    }
    let (b, c) = (s[0], s[1]);
    let offsets = x.conv2d(sess.p(p.offset_w), Some(sess.p(p.offset_b)), 2, 1, 1)?;
    let (ho, wo) = (offsets.shape()[2], offsets.shape()[3]);
    let n = ho * wo;
    let offsets = offsets
        .reshape(&[b, TAPS, 2, ho, wo])?
        .permute(&[0, 3, 4, 1, 2])?
        .reshape(&[b, n * TAPS, 2])?;
    let coords = offsets.add(sess.graph().constant(base_grid(ho, wo)))?;
    let taps = x.bilinear_sample(coords)?.reshape(&[b, c, n, TAPS])?;
    let w = sess.p(p.weight);
    let y = if p.depthwise {
        taps.mul(w.reshape(&[1, c, 1, TAPS])?)?.sum_axis(3)?
    } else {
        let cols = taps.permute(&[0, 2, 1, 3])?.reshape(&[b, n, c * TAPS])?;
        let wt = w.reshape(&[c, c * TAPS])?.transpose()?;
        cols.matmul(wt)?.permute(&[0, 2, 1])?
    };
    y.reshape(&[b, c, ho, wo])
}

/// One branch applied to a `[B, C, H, W]` map.
pub fn variant_branch<'g, T: Element>(
    sess: &Session<'g, T>,
    x: Var<'g, T>,
    kind: BranchKind,
    p: &LrpParams,
) -> Result<Var<'g, T>> {
    let missing = || Error::contract(format!("LRP parameters lack the {} branch", kind.name()));
    let c = x.shape().get(1).copied().unwrap_or(0);
    match kind {
        BranchKind::Dwc => x.conv2d(sess.p(p.dw.ok_or_else(missing)?), None, 2, 1, c),
        BranchKind::Nc => x.conv2d(sess.p(p.nc.ok_or_else(missing)?), None, 2, 1, 1),
        BranchKind::Ap => x.pool2d(K, 2, 1, PoolKind::Avg),
        BranchKind::Mp => x.pool2d(K, 2, 1, PoolKind::Max),
        BranchKind::Dfc => deform_branch(sess, x, p.deform.as_ref().ok_or_else(missing)?),
    }
}

/// Sum of the configured branches over a class-free token grid.
pub fn lrp<'g, T: Element>(
    sess: &Session<'g, T>,
    a: &TokenGrid<'g, T>,
    p: &LrpParams,
) -> Result<TokenGrid<'g, T>> {
    if a.cls {
        return Err(Error::contract("LRP input must not carry a class token"));
    }
    if p.variant.is_identity() {
        return Ok(*a);
    }
    if a.h < 2 || a.w < 2 {
        return Err(Error::config(format!(
            "a {}x{} grid is too small to downsample",
            a.h, a.w
        )));
    }
    let x = a.to_map()?;
    let mut acc: Option<Var<'g, T>> = None;
    for &kind in p.variant.branches() {
        let y = variant_branch(sess, x, kind, p)?;
        acc = Some(match acc {
            Some(s) => s.add(y)?,
            None => y,
        });
    }
    TokenGrid::from_map(acc.expect("non-identity variant has a branch"))
}
