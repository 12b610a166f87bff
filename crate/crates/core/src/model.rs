//! The end-to-end network: convolutional stem, class token and position
//! embedding, a stack of plain and high-order layers, part pooling, and one
//! BNNeck head per token stream.
//!
//! Layer orders use the `[H_i^{j,k}]` notation: order `i` at the 0-based
//! layer indices `j, k`; unlisted layers are plain pre-norm blocks and
//! `[None]` is the all-plain baseline.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::attention::Probe;
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::lrp::LrpVariant;
use crate::ohformer::{
    self, AttnMode, LayerOptions, Norm, OhLayer, PriorAxis, TransformerBlock, MAX_ORDER,
};
use crate::params::{init, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{BnMode, Element, RunningStats, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
const STEM1: (usize, usize, usize) = (5, 5, 1);
const STEM2: (usize, usize, usize) = (3, 2, 1);

/// Which layers are high-order, and of what order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackSpec {
    pub layers: usize,
    orders: BTreeMap<usize, usize>,
}

fn perr(pos: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        pos,
        msg: msg.into(),
    }
}

/// Character cursor; positions in errors are character offsets.
struct Cursor {
    chars: Vec<char>,
    at: usize,
}

impl Cursor {
    fn skip_ws(&mut self) {
        while self.chars.get(self.at).is_some_and(|c| c.is_whitespace()) {
            self.at += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.at).copied()
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        self.skip_ws();
        let start = self.at;
        for w in want.chars() {
            match self.chars.get(self.at) {
                Some(&c) if c == w => self.at += 1,
                _ => return Err(perr(start, format!("expected {want:?}"))),
            }
        }
        Ok(())
    }

    fn number(&mut self) -> Result<(usize, usize)> {
        self.skip_ws();
        let start = self.at;
        let mut s = String::new();
        while let Some(&c) = self.chars.get(self.at).filter(|c| c.is_ascii_digit()) {
            s.push(c);
            self.at += 1;
        }
        let n = s.parse().map_err(|_| perr(start, "expected a number"))?;
        Ok((n, start))
    }
}

impl StackSpec {
    pub fn plain(layers: usize) -> Self {
        StackSpec {
            layers,
            orders: BTreeMap::new(),
        }
    }

    pub fn parse(text: &str, layers: usize) -> Result<Self> {
        let mut c = Cursor {
            chars: text.chars().collect(),
            at: 0,
        };
        c.expect("[")?;
        let mut orders = BTreeMap::new();
        if c.peek() == Some('N') {
            c.expect("None")?;
        } else {
            loop {
                c.expect("H_")?;
                let (order, opos) = c.number()?;
                if !(2..=MAX_ORDER).contains(&order) {
                    return Err(perr(
                        opos,
                        format!("order must be in 2..={MAX_ORDER}, got {order}"),
                    ));
                }
                c.expect("^")?;
                let braced = c.peek() == Some('{');
                if braced {
                    c.expect("{")?;
                }
                loop {
                    let (idx, ipos) = c.number()?;
                    if idx >= layers {
                        return Err(perr(
                            ipos,
                            format!("layer index {idx} is out of range for {layers} layers"),
                        ));
                    }
                    if orders.insert(idx, order).is_some() {
                        return Err(perr(
                            ipos,
                            format!("layer {idx} is assigned more than once"),
                        ));
                    }
                    if !braced || c.peek() != Some(',') {
                        break;
                    }
                    c.expect(",")?;
                }
                if braced {
                    c.expect("}")?;
                }
                if c.peek() != Some(',') {
                    break;
                }
                c.expect(",")?;
            }
        }
        c.expect("]")?;
        if c.peek().is_some() {
            return Err(perr(c.at, "trailing characters after the stack"));
        }
        Ok(StackSpec { layers, orders })
    }

    pub fn order(&self, layer: usize) -> usize {
        self.orders.get(&layer).copied().unwrap_or(1)
    }

    /// Layers of order ≥ 2, with their orders.
    pub fn high_order_layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.orders.iter().map(|(&l, &o)| (l, o))
    }

    pub fn max_order(&self) -> usize {
        self.orders.values().copied().max().unwrap_or(1)
    }
}

impl fmt::Display for StackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.orders.is_empty() {
            return f.write_str("[None]");
        }
        let mut by_order: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&l, &o) in &self.orders {
            by_order.entry(o).or_default().push(l);
        }
        let groups: Vec<String> = by_order
            .iter()
            .map(|(o, ls)| {
                let ls: Vec<String> = ls.iter().map(|l| l.to_string()).collect();
                format!("H_{o}^{{{}}}", ls.join(","))
            })
            .collect();
        write!(f, "[{}]", groups.join(","))
    }
}

/// Everything that determines the parameter layout of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stack: StackSpec,
    pub dim: usize,
    pub heads: usize,
    pub parts: usize,
    pub mode: AttnMode,
    pub lrp: LrpVariant,
    pub prior_axis: PriorAxis,
    pub tie_vk: bool,
    pub deform_depthwise: bool,
    pub ffn_ratio: usize,
    /// Input image `(height, width)`.
    pub input: (usize, usize),
    /// Identities the classifiers distinguish.
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stack: StackSpec::parse("[H_2^{1},H_3^{2}]", 4).expect("valid default"),
            dim: 64,
            heads: 4,
            parts: 4,
            mode: AttnMode::Full,
            lrp: LrpVariant::default(),
            prior_axis: PriorAxis::Key,
            tie_vk: false,
            deform_depthwise: false,
            ffn_ratio: 4,
            input: (60, 30),
            classes: 6,
        }
    }
}

impl ModelConfig {
    pub fn layer_options(&self) -> LayerOptions {
        LayerOptions {
            dim: self.dim,
            heads: self.heads,
            mode: self.mode,
            lrp: self.lrp.clone(),
            prior_axis: self.prior_axis,
            tie_vk: self.tie_vk,
            deform_depthwise: self.deform_depthwise,
            ffn_ratio: self.ffn_ratio,
        }
    }

    /// Token grid produced by the stem for the configured input.
    pub fn grid(&self) -> Result<(usize, usize)> {
        stem_grid(self.input.0, self.input.1)
    }

    /// Parse the single-line `key=value ...` form written by `Display`.
    pub fn parse_spec(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for item in text.split_whitespace() {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("malformed spec item {item:?}")))?;
            if kv.insert(k, v).is_some() {
                return Err(Error::config(format!("spec key {k:?} repeated")));
            }
        }
        let mut take = |k: &str| {
            kv.remove(k)
                .ok_or_else(|| Error::config(format!("spec lacks {k:?}")))
        };
        let num = |v: &str, k: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::config(format!("spec {k}={v:?} is not a count")))
        };
        let flag = |v: &str, k: &str| {
            v.parse::<bool>()
                .map_err(|_| Error::config(format!("spec {k}={v:?} is not a boolean")))
        };
        let layers = num(take("layers")?, "layers")?;
        let stack = StackSpec::parse(take("stack")?, layers)?;
        let cfg = ModelConfig {
            stack,
            dim: num(take("dim")?, "dim")?,
            heads: num(take("heads")?, "heads")?,
            parts: num(take("parts")?, "parts")?,
            mode: take("mode")?.parse()?,
            lrp: take("lrp")?.parse()?,
            prior_axis: take("prior_axis")?.parse()?,
            tie_vk: flag(take("tie_vk")?, "tie_vk")?,
            deform_depthwise: flag(take("deform_depthwise")?, "deform_depthwise")?,
            ffn_ratio: num(take("ffn_ratio")?, "ffn_ratio")?,
            input: (
                num(take("height")?, "height")?,
                num(take("width")?, "width")?,
            ),
            classes: num(take("classes")?, "classes")?,
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::config(format!("unknown spec key {k:?}")));
        }
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layers={} stack={} mode={} dim={} heads={} parts={} lrp={} prior_axis={} tie_vk={} \
             deform_depthwise={} ffn_ratio={} height={} width={} classes={}",
            self.stack.layers,
            self.stack,
            self.mode,
            self.dim,
            self.heads,
            self.parts,
            self.lrp,
            self.prior_axis,
            self.tie_vk,
            self.deform_depthwise,
            self.ffn_ratio,
            self.input.0,
            self.input.1,
            self.classes
        )
    }
}

/// Grid after the two stem convolutions.
pub fn stem_grid(h: usize, w: usize) -> Result<(usize, usize)> {
    if h < 10 || w < 10 {
        return Err(Error::config(format!(
            "input {h}x{w} is too small; both sides must be at least 10"
        )));
    }
    let after = |x: usize, (k, s, p): (usize, usize, usize)| ConvGeom::out_extent(x, k, s, p);
    let f = |x| after(x, STEM1).and_then(|x| after(x, STEM2));
    f(h).zip(f(w))
        .ok_or_else(|| Error::config(format!("input {h}x{w} collapses in the stem")))
}

/// Row stripe `[floor(k·h/p), floor((k+1)·h/p))` of each part.
pub fn part_bounds(h: usize, p: usize) -> Vec<(usize, usize)> {
    (0..p).map(|k| (k * h / p, (k + 1) * h / p)).collect()
}

/// Mean of each horizontal stripe of a class-free grid, `[B, p, d]`.
pub fn part_pool<'g, T: Element>(tokens: &TokenGrid<'g, T>, p: usize) -> Result<Var<'g, T>> {
    if tokens.cls {
        return Err(Error::contract("part pooling expects spatial tokens only"));
    }
    if p == 0 || p > tokens.h {
        return Err(Error::config(format!(
            "{p} parts cannot be cut from {} token rows",
            tokens.h
        )));
    }
    let mut stripe = vec![0; tokens.h];
    for (k, (lo, hi)) in part_bounds(tokens.h, p).into_iter().enumerate() {
        stripe[lo..hi].fill(k);
    }
    let map: Vec<usize> = (0..tokens.spatial())
        .map(|t| stripe[t / tokens.w])
        .collect();
    tokens.tokens.segment_mean(1, &map, p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnNeck {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// `[d, classes]`, no bias.
    pub classifier: ParamId,
}

pub struct HeadOutput<'g, T: Element> {
    /// Raw feature, used by the triplet loss.
    pub triplet: Var<'g, T>,
    /// Batch-normalized feature, used for inference.
    pub infer: Var<'g, T>,
    pub logits: Var<'g, T>,
}

impl BnNeck {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::config("classifier needs at least one identity"));
        }
        let std = 0.001;
        Ok(BnNeck {
            gamma: store.add(
                format!("{prefix}.bn.g"),
                Tensor::ones(&[dim]),
                ParamKind::NoDecay,
            )?,
            beta: store.add(
                format!("{prefix}.bn.b"),
                Tensor::zeros(&[dim]),
                ParamKind::NoDecay,
            )?,
            running_mean: store.add(
                format!("{prefix}.bn.mean"),
                Tensor::zeros(&[dim]),
                ParamKind::Buffer,
            )?,
            running_var: store.add(
                format!("{prefix}.bn.var"),
                Tensor::ones(&[dim]),
                ParamKind::Buffer,
            )?,
            classifier: store.add(
                format!("{prefix}.cls"),
                Tensor::trunc_normal(&[dim, classes], std, rng),
                ParamKind::Weight,
            )?,
        })
    }

    /// In train mode the updated running statistics are queued on `sess`.
    pub fn forward<'g, T: Element>(
        &self,
        sess: &Session<'g, T>,
        feature: Var<'g, T>,
    ) -> Result<HeadOutput<'g, T>> {
        let stats = RunningStats {
            mean: sess.buffer(self.running_mean).clone(),
            var: sess.buffer(self.running_var).clone(),
        };
        let (infer, updated) = feature.batch_norm_1d(
            sess.p(self.gamma),
            sess.p(self.beta),
            &stats,
            sess.mode(),
            BN_MOMENTUM,
            BN_EPS,
        )?;
        if let Some(u) = updated {
            sess.push_update(self.running_mean, u.mean);
            sess.push_update(self.running_var, u.var);
        }
        let logits = infer.matmul(sess.p(self.classifier))?;
        Ok(HeadOutput {
            triplet: feature,
            infer,
            logits,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Plain(TransformerBlock),
    High(OhLayer),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub grid: (usize, usize),
    pub stem1_w: ParamId,
    pub stem1_b: ParamId,
    pub stem2_w: ParamId,
    pub stem2_b: ParamId,
    /// `[1, d]`.
    pub cls_token: ParamId,
    /// `[1 + h·w, d]`.
    pub pos_embed: ParamId,
    pub layers: Vec<Layer>,
    pub final_norm: Norm,
    /// Class head first, then one per part.
    pub heads: Vec<BnNeck>,
}

pub struct Features<'g, T: Element> {
    /// `[B, d]`.
    pub cls: Var<'g, T>,
    /// `[B, p, d]`.
    pub parts: Var<'g, T>,
}

impl Model {
    /// Build the parameter layout and initial values.
    pub fn build<T: Element, R: Rng + ?Sized>(
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<(Model, ParamStore<T>)> {
        let grid = config.grid()?;
        let d = config.dim;
        if d == 0 {
            return Err(Error::config("width must be positive"));
        }
        if config.parts == 0 || config.parts > grid.0 {
            return Err(Error::config(format!(
                "{} parts cannot be cut from {} token rows",
                config.parts, grid.0
            )));
        }
        let mut store = ParamStore::new();
        let s = &mut store;
        let stem1_w = s.add(
            "stem.conv1.w",
            init::conv([d, 3, STEM1.0, STEM1.0], rng),
            ParamKind::Weight,
        )?;
        let stem1_b = s.add("stem.conv1.b", Tensor::zeros(&[d]), ParamKind::Weight)?;
        let stem2_w = s.add(
            "stem.conv2.w",
            init::conv([d, d, STEM2.0, STEM2.0], rng),
            ParamKind::Weight,
        )?;
        let stem2_b = s.add("stem.conv2.b", Tensor::zeros(&[d]), ParamKind::Weight)?;
        let cls_token = s.add("cls_token", Tensor::zeros(&[1, d]), ParamKind::NoDecay)?;
        let pos_embed = s.add(
            "pos_embed",
            Tensor::trunc_normal(&[1 + grid.0 * grid.1, d], 0.02, rng),
            ParamKind::Weight,
        )?;
        let opts = config.layer_options();
        let mut layers = Vec::with_capacity(config.stack.layers);
        for i in 0..config.stack.layers {
            let prefix = format!("layer{i}");
            layers.push(match config.stack.order(i) {
                1 => Layer::Plain(TransformerBlock::new(s, &prefix, &opts, rng)?),
                m => Layer::High(OhLayer::new(s, &prefix, m, grid, &opts, rng).map_err(
                    |e| match e {
                        Error::Config(msg) => Error::config(format!("layer {i}: {msg}")),
                        e => e,
                    },
                )?),
            });
        }
        let final_norm = Norm::new(s, "norm", d)?;
        let mut heads = vec![BnNeck::new(s, "head.cls", d, config.classes, rng)?];
        for k in 0..config.parts {
            heads.push(BnNeck::new(
                s,
                &format!("head.part{k}"),
                d,
                config.classes,
                rng,
            )?);
        }
        let model = Model {
            config: config.clone(),
            grid,
            stem1_w,
            stem1_b,
            stem2_w,
            stem2_b,
            cls_token,
            pos_embed,
            layers,
            final_norm,
            heads,
        };
        Ok((model, store))
    }

    pub fn embed_dim(&self) -> usize {
        (1 + self.config.parts) * self.config.dim
    }

    /// `[B, 3, H, W]` images to a token grid with class token and position
    /// embedding added.
    pub fn stem<'g, T: Element>(
        &self,
        sess: &Session<'g, T>,
        images: Var<'g, T>,
    ) -> Result<TokenGrid<'g, T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim(format!(
                "images must be [B, 3, H, W], got {s:?}"
            )));
        }
        if (s[2], s[3]) != self.config.input {
            return Err(Error::dim(format!(
                "model expects {:?} images, got {}x{}",
                self.config.input, s[2], s[3]
            )));
        }
        let x = images
            .conv2d(
                sess.p(self.stem1_w),
                Some(sess.p(self.stem1_b)),
                STEM1.1,
                STEM1.2,
                1,
            )?
            .gelu()
            .conv2d(
                sess.p(self.stem2_w),
                Some(sess.p(self.stem2_b)),
                STEM2.1,
                STEM2.2,
                1,
            )?;
        let grid = TokenGrid::from_map(x)?;
        let (b, d) = (s[0], self.config.dim);
        let cls = sess
            .graph()
            .constant(Tensor::zeros(&[b, 1, d]))
            .add(sess.p(self.cls_token).reshape(&[1, 1, d])?)?;
        let tokens = Var::concat(&[cls, grid.tokens], 1)?.add(sess.p(self.pos_embed))?;
        TokenGrid::new(tokens, grid.h, grid.w, true)
    }

    pub fn forward<'g, T: Element>(
        &self,
        sess: &Session<'g, T>,
        images: Var<'g, T>,
        probe: Probe<'_>,
    ) -> Result<Features<'g, T>> {
        let mut x = self.stem(sess, images)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let p = probe.at_layer(i);
            x = match layer {
                Layer::Plain(block) => block.forward(sess, &x, p)?,
                Layer::High(l) => ohformer::oh_layer(sess, l, &x, p)?,
            };
        }
        let normed = TokenGrid::new(self.final_norm.apply(sess, x.tokens)?, x.h, x.w, true)?;
        let b = normed.batch();
        let cls = normed
            .tokens
            .slice(1, 0, 1)?
            .reshape(&[b, self.config.dim])?;
        let parts = part_pool(&normed.strip_cls()?, self.config.parts)?;
        Ok(Features { cls, parts })
    }

    /// Class head, then each part head.
    pub fn heads<'g, T: Element>(
        &self,
        sess: &Session<'g, T>,
        f: &Features<'g, T>,
    ) -> Result<Vec<HeadOutput<'g, T>>> {
        let (b, d) = (f.cls.shape()[0], self.config.dim);
        let mut out = vec![self.heads[0].forward(sess, f.cls)?];
        for (k, head) in self.heads[1..].iter().enumerate() {
            out.push(head.forward(sess, f.parts.slice(1, k, k + 1)?.reshape(&[b, d])?)?);
        }
        Ok(out)
    }

    /// Retrieval embedding `[B, (1 + p)·d]`: BN-ed class token then BN-ed parts.
    pub fn embed<'g, T: Element>(
        &self,
        sess: &Session<'g, T>,
        images: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        if sess.mode() != BnMode::Eval {
            return Err(Error::contract("embeddings are computed in eval mode"));
        }
        let f = self.forward(sess, images, Probe::default())?;
        let infer: Vec<Var<'g, T>> = self.heads(sess, &f)?.into_iter().map(|h| h.infer).collect();
        Var::concat(&infer, 1)
    }
}
