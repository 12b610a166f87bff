mod common;

use common::{max_diff, rand, rng};
use ohformer::attention::Probe;
use ohformer::grid::TokenGrid;
use ohformer::model::{part_bounds, part_pool, stem_grid, Model, ModelConfig, StackSpec};
use ohformer::ohformer::AttnMode;
use ohformer::params::{check_with_params, ParamStore, Session};
use ohformer::tensor::gradcheck::FdOptions;
use ohformer::tensor::{BnMode, Element, Graph, Tensor};
use proptest::prelude::*;

#[test]
fn stack_notation_examples() {
    let s = StackSpec::parse("[H_2^{2,8},H_3^{4,6}]", 12).unwrap();
    let got: Vec<(usize, usize)> = s.high_order_layers().collect();
    assert_eq!(got, vec![(2, 2), (4, 3), (6, 3), (8, 2)]);
    assert_eq!(s.order(0), 1);
    assert_eq!(s.to_string(), "[H_2^{2,8},H_3^{4,6}]");
    let none = StackSpec::parse("[None]", 12).unwrap();
    assert_eq!(none.high_order_layers().count(), 0);
    assert_eq!(none.to_string(), "[None]");
    assert_eq!(
        StackSpec::parse("[ H_2^1 , H_3^{2} ]", 4)
            .unwrap()
            .to_string(),
        "[H_2^{1},H_3^{2}]"
    );
}

#[test]
fn stack_notation_errors_carry_positions() {
    let pos = |text: &str, layers| match StackSpec::parse(text, layers) {
        Err(ohformer::Error::Parse { pos, .. }) => pos,
        other => panic!("{text}: {other:?}"),
    };
    assert_eq!(pos("[H_9^{1}]", 4), 3);
    assert_eq!(pos("[H_2^{1},H_3^{1}]", 4), 14);
    assert_eq!(pos("[H_2^{4}]", 4), 6);
    assert_eq!(pos("[H_2^{1}", 4), 8);
    assert_eq!(pos("H_2^{1}]", 4), 0);
    assert_eq!(pos("[None]x", 4), 6);
}

#[test]
fn model_config_spec_round_trips() {
    let mut c = ModelConfig::default();
    c.mode = AttnMode::Shared;
    c.tie_vk = true;
    c.classes = 11;
    let back = ModelConfig::parse_spec(&c.to_string()).unwrap();
    assert_eq!(back, c);
    assert!(ModelConfig::parse_spec("layers=4").is_err());
    assert!(ModelConfig::parse_spec(&format!("{c} extra=1")).is_err());
}

#[test]
fn stem_grid_shapes() {
    assert_eq!(stem_grid(368, 128).unwrap(), (37, 13));
    assert_eq!(stem_grid(60, 30).unwrap(), (6, 3));
    assert!(matches!(stem_grid(9, 30), Err(ohformer::Error::Config(_))));
    let (_, w1) = stem_grid(60, 40).unwrap();
    let (_, w2) = stem_grid(60, 80).unwrap();
    assert!((w2 as f64 / w1 as f64 - 2.0).abs() < 0.3);
}

#[test]
fn part_bounds_follow_the_floor_rule() {
    let sizes: Vec<usize> = part_bounds(6, 4).iter().map(|(a, b)| b - a).collect();
    assert_eq!(sizes, vec![1, 2, 1, 2]);
}

#[test]
fn part_pool_examples() {
    let g = Graph::<f64>::new();
    let c = TokenGrid::new(g.constant(Tensor::full(&[2, 12, 3], 0.5)), 6, 2, false).unwrap();
    let p = part_pool(&c, 4).unwrap().value();
    assert_eq!(p.shape(), &[2, 4, 3]);
    assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    let x: Tensor<f64> = rand(&[1, 5, 3], 1);
    let rows = part_pool(
        &TokenGrid::new(g.constant(x.clone()), 5, 1, false).unwrap(),
        5,
    )
    .unwrap();
    assert_eq!(rows.value().data(), x.data());
    assert!(matches!(
        part_pool(&TokenGrid::new(g.constant(x), 5, 1, false).unwrap(), 6),
        Err(ohformer::Error::Config(_))
    ));
}

fn tiny_config(stack: &str, layers: usize) -> ModelConfig {
    ModelConfig {
        stack: StackSpec::parse(stack, layers).unwrap(),
        dim: 8,
        heads: 2,
        parts: 2,
        input: (20, 20),
        classes: 3,
        ..ModelConfig::default()
    }
}

#[test]
fn forward_shapes_and_determinism() {
    for stack in ["[None]", "[H_2^{1}]"] {
        let cfg = ModelConfig {
            parts: 4,
            ..ModelConfig::default()
        };
        let cfg = ModelConfig {
            stack: StackSpec::parse(stack, 2).unwrap(),
            ..cfg
        };
        let (model, store) = Model::build::<f32, _>(&cfg, &mut rng(1)).unwrap();
        let one: Tensor<f32> = rand(&[1, 3, 60, 30], 2);
        let mut two = Tensor::zeros(&[2, 3, 60, 30]);
        two.data_mut()[..one.numel()].copy_from_slice(one.data());
        two.data_mut()[one.numel()..].copy_from_slice(one.data());
        let g = Graph::new();
        let sess = Session::new(&g, &store, BnMode::Eval, false);
        let f = model
            .forward(&sess, g.constant(two.clone()), Probe::default())
            .unwrap();
        assert_eq!(f.cls.shape(), vec![2, 64]);
        assert_eq!(f.parts.shape(), vec![2, 4, 64]);
        let (c, p) = (f.cls.value(), f.parts.value());
        assert_eq!(c.data()[..64], c.data()[64..]);
        assert_eq!(p.data()[..256], p.data()[256..]);
        let emb = model.embed(&sess, g.constant(two)).unwrap().value();
        assert_eq!(emb.shape(), &[2, 320]);
        assert_eq!(emb.data()[..320], emb.data()[320..]);
        let again = model
            .embed(&sess, g.constant(rand::<f32>(&[1, 3, 60, 30], 2)))
            .unwrap()
            .value();
        assert_eq!(again.data(), &emb.data()[..320]);
    }
}

#[test]
fn single_part_is_the_global_mean() {
    let mut cfg = tiny_config("[H_2^{0}]", 1);
    cfg.parts = 1;
    let (model, store) = Model::build::<f64, _>(&cfg, &mut rng(3)).unwrap();
    let g = Graph::new();
    let sess = Session::new(&g, &store, BnMode::Eval, false);
    let x = model
        .stem(&sess, g.constant(rand(&[1, 3, 20, 20], 4)))
        .unwrap();
    let spatial = x.strip_cls().unwrap();
    let pooled = part_pool(&spatial, 1).unwrap().value();
    let mean = spatial.tokens.mean_axis(1).unwrap().value();
    assert!(max_diff(pooled.data(), mean.data()) < 1e-12);
}

#[test]
fn bnneck_examples() {
    let cfg = tiny_config("[None]", 1);
    let (model, mut store) = Model::build::<f64, _>(&cfg, &mut rng(5)).unwrap();
    let head = &model.heads[0];
    let g = Graph::new();
    let feat: Tensor<f64> = rand(&[4, 8], 6);
    {
        let sess = Session::new(&g, &store, BnMode::Eval, false);
        let out = head.forward(&sess, g.constant(feat.clone())).unwrap();
        assert!(out.infer.value().max_abs_diff(&feat) < 1e-5);
        assert_eq!(out.logits.shape(), vec![4, 3]);
    }
    *store.tensor_mut(head.classifier) = Tensor::zeros(&[8, 3]);
    let sess = Session::new(&g, &store, BnMode::Train, false);
    let out = head.forward(&sess, g.constant(feat)).unwrap();
    assert!(out.logits.value().data().iter().all(|&v| v == 0.0));
    let ce = out
        .logits
        .cross_entropy(&[0, 1, 2, 0])
        .unwrap()
        .value()
        .item();
    assert!((ce - 3f64.ln()).abs() < 1e-12);
    assert_eq!(sess.take_updates().len(), 2);
}

// ---------- independent plain-ViT oracle ----------

struct Oracle<'a> {
    store: &'a ParamStore<f64>,
}

impl Oracle<'_> {
    fn w(&self, name: &str) -> Vec<f64> {
        let id = self.store.id(name).unwrap_or_else(|| panic!("{name}"));
        self.store.tensor(id).data().to_vec()
    }

    fn conv(
        x: &[f64],
        c: usize,
        h: usize,
        w: usize,
        k: &[f64],
        b: &[f64],
        o: usize,
        ks: usize,
        st: usize,
        pad: usize,
    ) -> (Vec<f64>, usize, usize) {
        let ho = (h + 2 * pad - ks) / st + 1;
        let wo = (w + 2 * pad - ks) / st + 1;
        let mut y = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * st + ky) as isize - pad as isize;
                                let ix = (ox * st + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(ic * h + iy as usize) * w + ix as usize]
                                        * k[((oc * c + ic) * ks + ky) * ks + kx];
                                }
                            }
                        }
                    }
                    y[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        (y, ho, wo)
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
    }

    fn ln(rows: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len());
        for r in rows.chunks(d) {
            let m = r.iter().sum::<f64>() / d as f64;
            let v = r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d as f64;
            for j in 0..d {
                out.push((r[j] - m) / (v + 1e-6).sqrt() * g[j] + b[j]);
            }
        }
        out
    }

    fn lin(x: &[f64], rows: usize, w: &[f64], din: usize, dout: usize) -> Vec<f64> {
        common::loop_matmul(x, w, rows, din, dout)
    }

    /// Features (cls, parts) of one image.
    fn run(&self, cfg: &ModelConfig, img: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = cfg.dim;
        let (hh, ww) = cfg.input;
        let (a, h1, w1) = Self::conv(
            img,
            3,
            hh,
            ww,
            &self.w("stem.conv1.w"),
            &self.w("stem.conv1.b"),
            d,
            5,
            5,
            1,
        );
        let a: Vec<f64> = a.into_iter().map(Self::gelu).collect();
        let (m, h, w) = Self::conv(
            &a,
            d,
            h1,
            w1,
            &self.w("stem.conv2.w"),
            &self.w("stem.conv2.b"),
            d,
            3,
            2,
            1,
        );
        let t = 1 + h * w;
        let mut x = vec![0.0; t * d];
        let cls = self.w("cls_token");
        let pos = self.w("pos_embed");
        for j in 0..d {
            x[j] = cls[j] + pos[j];
            for s in 0..h * w {
                x[(1 + s) * d + j] = m[j * h * w + s] + pos[(1 + s) * d + j];
            }
        }
        let heads = cfg.heads;
        let dh = d / heads;
        for l in 0..cfg.stack.layers {
            let p = |n: &str| self.w(&format!("layer{l}.{n}"));
            let z = Self::ln(&x, d, &p("ln1.g"), &p("ln1.b"));
            let q = Self::lin(&z, t, &p("attn.wq"), d, d);
            let k = Self::lin(&z, t, &p("attn.wk"), d, d);
            let v = Self::lin(&z, t, &p("attn.wv"), d, d);
            let mut cat = vec![0.0; t * d];
            for hd in 0..heads {
                for i in 0..t {
                    let s: Vec<f64> = (0..t)
                        .map(|j| {
                            (0..dh)
                                .map(|c| q[i * d + hd * dh + c] * k[j * d + hd * dh + c])
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let pr = common::loop_softmax(&s);
                    for c in 0..dh {
                        cat[i * d + hd * dh + c] =
                            (0..t).map(|j| pr[j] * v[j * d + hd * dh + c]).sum();
                    }
                }
            }
            let o = Self::lin(&cat, t, &p("attn.wo"), d, d);
            for i in 0..t * d {
                x[i] += o[i];
            }
            let z = Self::ln(&x, d, &p("ln2.g"), &p("ln2.b"));
            let hid = d * cfg.ffn_ratio;
            let mut u = Self::lin(&z, t, &p("ffn.w1"), d, hid);
            let b1 = p("ffn.b1");
            for (i, v) in u.iter_mut().enumerate() {
                *v = Self::gelu(*v + b1[i % hid]);
            }
            let y = Self::lin(&u, t, &p("ffn.w2"), hid, d);
            let b2 = p("ffn.b2");
            for i in 0..t * d {
                x[i] += y[i] + b2[i % d];
            }
        }
        let x = Self::ln(&x, d, &self.w("norm.g"), &self.w("norm.b"));
        let mut parts = Vec::new();
        for k in 0..cfg.parts {
            let (lo, hi) = (k * h / cfg.parts, (k + 1) * h / cfg.parts);
            for j in 0..d {
                let mut acc = 0.0;
                for r in lo..hi {
                    for c in 0..w {
                        acc += x[(1 + r * w + c) * d + j];
                    }
                }
                parts.push(acc / ((hi - lo) * w) as f64);
            }
        }
        (x[..d].to_vec(), parts)
    }
}

#[test]
fn plain_stack_matches_an_independent_vit_oracle() {
    let mut cfg = tiny_config("[None]", 2);
    cfg.input = (30, 25);
    let (model, store) = Model::build::<f64, _>(&cfg, &mut rng(7)).unwrap();
    let imgs: Tensor<f64> = rand(&[2, 3, 30, 25], 8);
    let g = Graph::new();
    let sess = Session::new(&g, &store, BnMode::Eval, false);
    let f = model
        .forward(&sess, g.constant(imgs.clone()), Probe::default())
        .unwrap();
    let oracle = Oracle { store: &store };
    let per = 3 * 30 * 25;
    let (d, p) = (cfg.dim, cfg.parts);
    for b in 0..2 {
        let (cls, parts) = oracle.run(&cfg, &imgs.data()[b * per..(b + 1) * per]);
        assert!(max_diff(&f.cls.value().data()[b * d..(b + 1) * d], &cls) < 1e-5);
        assert!(max_diff(&f.parts.value().data()[b * p * d..(b + 1) * p * d], &parts) < 1e-5);
    }
}

fn scatter_offsets<T: Element>(model: &Model, store: &mut ParamStore<T>) {
    for layer in &model.layers {
        if let ohformer::model::Layer::High(l) = layer {
            for (i, hp) in l.orders.iter().enumerate() {
                let d = hp.lrp.deform.as_ref().unwrap();
                let shape = store.tensor(d.offset_w).shape().to_vec();
                *store.tensor_mut(d.offset_w) =
                    rand::<T>(&shape, 40 + i as u64).map(|v| T::of(0.02 * v.f64()));
                *store.tensor_mut(d.offset_b) =
                    rand::<T>(&[18], 60 + i as u64).map(|v| T::of(0.3 * v.f64() + 0.37));
            }
        }
    }
}

fn model_loss_check<T: Element>(eps: f64, max_coords: usize, mode: BnMode) -> f64 {
    let cfg = ModelConfig {
        stack: StackSpec::parse("[H_3^{1}]", 2).unwrap(),
        classes: 3,
        ..ModelConfig::default()
    };
    let (model, mut store) = Model::build::<T, _>(&cfg, &mut rng(11)).unwrap();
    scatter_offsets(&model, &mut store);
    let imgs: Tensor<T> = rand(&[2, 3, 60, 30], 12);
    let opts = FdOptions {
        eps,
        max_coords: Some(max_coords),
        seed: 3,
    };
    let report = check_with_params(&store, &[imgs], mode, &opts, |sess, v| {
        let f = model.forward(sess, v[0], Probe::default())?;
        let mut total = None;
        for (k, h) in model.heads(sess, &f)?.into_iter().enumerate() {
            let term = h
                .logits
                .cross_entropy(&[k % 3, (k + 1) % 3])?
                .add(h.triplet.square().mean_all())?;
            total = Some(match total {
                None => term,
                Some(t) => term.add(t)?,
            });
        }
        Ok(total.unwrap())
    })
    .unwrap();
    report.max_rel_error
}

#[test]
fn full_model_gradient_matches_finite_differences_f64() {
    let err = model_loss_check::<f64>(1e-6, 6, BnMode::Train);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn full_model_gradient_matches_finite_differences_f32() {
    // Eval-mode BN: with two images and a shared class token, batch statistics
    // are too ill-conditioned for 32-bit differences.
    let err = model_loss_check::<f32>(1e-3, 4, BnMode::Eval);
    assert!(err < 1e-2, "{err}");
}

proptest! {
    #[test]
    fn stack_spec_round_trips(layers in 1usize..13, picks in proptest::collection::vec((0usize..13, 2usize..5), 0..6)) {
        let mut seen = std::collections::BTreeMap::new();
        for (l, o) in picks {
            if l < layers {
                seen.entry(l).or_insert(o);
            }
        }
        let mut by_order: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (l, o) in &seen {
            by_order.entry(*o).or_default().push(*l);
        }
        let text = if by_order.is_empty() {
            "[None]".to_string()
        } else {
            let g: Vec<String> = by_order.iter().rev().map(|(o, ls)| {
                let ls: Vec<String> = ls.iter().rev().map(|l| l.to_string()).collect();
                format!("H_{o}^{{{}}}", ls.join(","))
            }).collect();
            format!("[{}]", g.join(","))
        };
        let spec = StackSpec::parse(&text, layers).unwrap();
        prop_assert_eq!(StackSpec::parse(&spec.to_string(), layers).unwrap(), spec.clone());
        for l in 0..layers {
            prop_assert_eq!(spec.order(l), seen.get(&l).copied().unwrap_or(1));
        }
    }

    #[test]
    fn part_stripes_partition_the_rows(h in 1usize..40, p in 1usize..40) {
        prop_assume!(p <= h);
        let b = part_bounds(h, p);
        prop_assert_eq!(b[0].0, 0);
        prop_assert_eq!(b[p - 1].1, h);
        for k in 1..p {
            prop_assert_eq!(b[k].0, b[k - 1].1);
        }
        prop_assert!(b.iter().all(|(lo, hi)| hi > lo));
    }
}
