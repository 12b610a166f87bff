//! Named finite-difference checks in f64, run by `ohformer gradcheck`.
//!
//! Every op is reduced to a scalar through a fixed random readout so each
//! output coordinate contributes. Deformable offsets are moved off the
//! integer lattice, where bilinear sampling is only piecewise smooth.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::attention::{mhsa, Probe, ProjectionSet};
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::lrp::{deform_branch, lrp, LrpParams, LrpVariant};
use crate::model::HeadOutput;
use crate::ohformer::{
    oh_layer, prior_mix, share_scores, AttnMode, LayerOptions, OhLayer, PriorAxis,
};
use crate::params::{check_with_params, ParamStore};
use crate::tensor::gradcheck::{finite_diff_check, FdOptions, FdReport};
use crate::tensor::{BnMode, Graph, PoolKind, RunningStats, Tensor, Var};
use crate::training::{batch_hard_triplet, total_loss};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-6;

type G<'g> = &'g Graph<f64>;
type V<'g> = Var<'g, f64>;

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "sqrt",
    "square",
    "relu",
    "gelu",
    "sum_all",
    "mean_all",
    "sum_axis",
    "mean_axis",
    "reshape",
    "permute",
    "transpose",
    "slice",
    "concat",
    "take",
    "matmul",
    "softmax",
    "layer_norm",
    "batch_norm_1d",
    "conv2d",
    "conv2d_depthwise",
    "bilinear_sample",
    "upsample_nearest",
    "pool2d_avg",
    "pool2d_max",
    "segment_mean",
    "cross_entropy",
    "mhsa",
    "deform_branch",
    "lrp",
    "share_scores",
    "prior_mix",
    "triplet_loss",
    "total_loss",
];

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn readout<'g>(g: G<'g>, y: V<'g>, seed: u64) -> Result<V<'g>> {
    let r = g.constant(rand(&y.shape(), seed ^ 0x5eed));
    Ok(y.mul(r)?.sum_all())
}

fn opts(seed: u64) -> FdOptions {
    FdOptions {
        eps: EPS,
        max_coords: None,
        seed,
    }
}

fn check<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<FdReport>
where
    F: for<'g> Fn(G<'g>, &[V<'g>]) -> Result<V<'g>>,
{
    finite_diff_check(|g, v| readout(g, f(g, v)?, seed), inputs, &opts(seed))
}

fn scatter_deform(store: &mut ParamStore<f64>, p: &LrpParams, seed: u64) {
    if let Some(d) = &p.deform {
        let w = rand(store.tensor(d.offset_w).shape(), seed).map(|v| 0.05 * v);
        *store.tensor_mut(d.offset_w) = w;
        *store.tensor_mut(d.offset_b) = rand(&[18], seed + 1).map(|v| 0.3 * v + 0.37);
    }
}

fn perturb_prior(store: &mut ParamStore<f64>, id: crate::params::ParamId, seed: u64) {
    let n = store.tensor(id).shape()[0];
    let mut w = Tensor::eye(n);
    w.add_assign(&rand(&[n, n], seed).map(|v| 0.2 * v));
    *store.tensor_mut(id) = w;
}

/// Run one named check.
pub fn run_op(name: &str, seed: u64) -> Result<FdReport> {
    let s = seed;
    let x = rand(&[2, 3, 4], s + 1);
    let y = rand(&[2, 3, 4], s + 2);
    let pos = rand(&[2, 3, 4], s + 3).map(|v| v.abs() + 0.5);
    match name {
        "add" => check(&[x, y], s, |_, v| v[0].add(v[1])),
        "sub" => check(&[x, rand(&[1, 3, 1], s + 2)], s, |_, v| v[0].sub(v[1])),
        "mul" => check(&[x, y], s, |_, v| v[0].mul(v[1])),
        "div" => check(&[x, pos], s, |_, v| v[0].div(v[1])),
        "scale" => check(&[x], s, |_, v| Ok(v[0].scale(-1.7))),
        "add_scalar" => check(&[x], s, |_, v| Ok(v[0].add_scalar(0.3).square())),
        "sqrt" => check(&[pos], s, |_, v| Ok(v[0].sqrt())),
        "square" => check(&[x], s, |_, v| Ok(v[0].square())),
        "relu" => check(&[x], s, |_, v| Ok(v[0].relu())),
        "gelu" => check(&[x], s, |_, v| Ok(v[0].gelu())),
        "sum_all" => check(&[x], s, |_, v| Ok(v[0].square().sum_all())),
        "mean_all" => check(&[x], s, |_, v| Ok(v[0].square().mean_all())),
        "sum_axis" => check(&[x], s, |_, v| v[0].sum_axis(1)),
        "mean_axis" => check(&[x], s, |_, v| v[0].mean_axis(2)),
        "reshape" => check(&[x], s, |_, v| v[0].reshape(&[6, 4])),
        "permute" => check(&[x], s, |_, v| v[0].permute(&[2, 0, 1])),
        "transpose" => check(&[x], s, |_, v| v[0].transpose()),
        "slice" => check(&[x], s, |_, v| v[0].slice(1, 1, 3)),
        "concat" => check(&[x, rand(&[2, 2, 4], s + 4)], s, |_, v| {
            Var::concat(&[v[0], v[1]], 1)
        }),
        "take" => check(&[x], s, |_, v| v[0].take(&[0, 5, 5, 23])),
        "matmul" => check(&[x, rand(&[4, 5], s + 4)], s, |_, v| v[0].matmul(v[1])),
        "softmax" => check(&[x], s, |_, v| Ok(v[0].softmax())),
        "layer_norm" => check(&[x, rand(&[4], s + 4), rand(&[4], s + 5)], s, |_, v| {
            v[0].layer_norm(v[1], v[2], 1e-6)
        }),
        "batch_norm_1d" => {
            let stats = RunningStats::identity(4);
            check(
                &[rand(&[5, 4], s + 1), rand(&[4], s + 4), rand(&[4], s + 5)],
                s,
                move |_, v| {
                    Ok(v[0]
                        .batch_norm_1d(v[1], v[2], &stats, BnMode::Train, 0.1, 1e-5)?
                        .0)
                },
            )
        }
        "conv2d" => check(
            &[
                rand(&[2, 4, 5, 5], s + 1),
                rand(&[3, 4, 3, 3], s + 2),
                rand(&[3], s + 3),
            ],
            s,
            |_, v| v[0].conv2d(v[1], Some(v[2]), 2, 1, 1),
        ),
        "conv2d_depthwise" => check(
            &[rand(&[2, 4, 5, 5], s + 1), rand(&[4, 1, 3, 3], s + 2)],
            s,
            |_, v| v[0].conv2d(v[1], None, 2, 1, 4),
        ),
        "bilinear_sample" => {
            let mut coords: Tensor<f64> = Tensor::uniform(&[2, 7, 2], -1.7, 5.6, &mut rng(s + 2));
            coords.data_mut().iter_mut().for_each(|c| {
                if (*c - c.round()).abs() < 1e-3 {
                    *c += 0.01;
                }
            });
            check(&[rand(&[2, 3, 5, 5], s + 1), coords], s, |_, v| {
                v[0].bilinear_sample(v[1])
            })
        }
        "upsample_nearest" => check(&[rand(&[2, 3, 3, 2], s + 1)], s, |_, v| {
            v[0].upsample_nearest(7, 5)
        }),
        "pool2d_avg" => check(&[rand(&[2, 3, 5, 5], s + 1)], s, |_, v| {
            v[0].pool2d(3, 2, 1, PoolKind::Avg)
        }),
        "pool2d_max" => check(&[rand(&[2, 3, 5, 5], s + 1)], s, |_, v| {
            v[0].pool2d(3, 2, 1, PoolKind::Max)
        }),
        "segment_mean" => check(&[x], s, |_, v| v[0].segment_mean(1, &[0, 1, 0], 2)),
        "cross_entropy" => finite_diff_check(
            |_, v| v[0].cross_entropy(&[0, 5, 2, 2]),
            &[rand(&[4, 6], s + 1)],
            &opts(s),
        ),
        "mhsa" => {
            let mut store = ParamStore::<f64>::new();
            let proj = ProjectionSet::new(&mut store, "attn", 8, 2, true, false, &mut rng(s + 1))?;
            check_with_params(
                &store,
                &[rand(&[2, 5, 8], s + 2)],
                BnMode::Eval,
                &opts(s),
                |sess, v| {
                    readout(
                        sess.graph(),
                        mhsa(sess, v[0], &proj, Probe::default(), 1)?.out,
                        s,
                    )
                },
            )
        }
        "deform_branch" | "lrp" => {
            let mut store = ParamStore::<f64>::new();
            let variant = if name == "lrp" {
                LrpVariant::default()
            } else {
                "DFC".parse()?
            };
            let p = LrpParams::new(&mut store, "lrp", 3, variant, false, &mut rng(s + 1))?;
            scatter_deform(&mut store, &p, s + 2);
            let whole = name == "lrp";
            check_with_params(
                &store,
                &[rand(&[2, 3, 5, 4], s + 3)],
                BnMode::Eval,
                &opts(s),
                |sess, v| {
                    let y = if whole {
                        lrp(sess, &TokenGrid::from_map(v[0])?, &p)?.tokens
                    } else {
                        deform_branch(sess, v[0], p.deform.as_ref().expect("DFC branch"))?
                    };
                    readout(sess.graph(), y, s)
                },
            )
        }
        "share_scores" => check(&[rand(&[1, 2, 20, 20], s + 1)], s, |_, v| {
            share_scores(v[0], (5, 4), (3, 2))
        }),
        "prior_mix" => {
            let sc = rand(&[1, 2, 6, 6], s + 1);
            let w = rand(&[6, 6], s + 2);
            let key = check(&[sc.clone(), w.clone()], s, |_, v| {
                prior_mix(v[0], v[1], PriorAxis::Key)
            })?;
            let query = check(&[sc, w], s + 1, |_, v| {
                prior_mix(v[0], v[1], PriorAxis::Query)
            })?;
            Ok(worse(key, query))
        }
        "triplet_loss" => {
            let labels = [0, 0, 1, 1, 2, 2];
            finite_diff_check(
                |_, v| batch_hard_triplet(v[0], &labels, 0.3),
                &[rand(&[6, 5], s + 1)],
                &opts(s),
            )
        }
        "total_loss" => {
            let labels = [0, 0, 1, 1];
            let inputs: Vec<Tensor<f64>> = (0..3)
                .flat_map(|k| [rand(&[4, 5], s + 10 * k), rand(&[4, 3], s + 10 * k + 1)])
                .collect();
            finite_diff_check(
                |_, v| {
                    let heads: Vec<HeadOutput<f64>> = v
                        .chunks(2)
                        .map(|c| HeadOutput {
                            triplet: c[0],
                            infer: c[0],
                            logits: c[1],
                        })
                        .collect();
                    Ok(total_loss(&heads, &labels, 0.3)?.total)
                },
                &inputs,
                &opts(s),
            )
        }
        _ => Err(Error::config(format!(
            "unknown gradcheck op {name:?}; known ops: {}",
            OPS.join(", ")
        ))),
    }
}

fn worse(a: FdReport, b: FdReport) -> FdReport {
    if b.max_rel_error > a.max_rel_error {
        b
    } else {
        a
    }
}

/// A 3-order layer on a 4×4 grid with scattered deformable offsets, checked
/// in full mode and in shared mode with a perturbed prior; the worse report
/// is returned.
pub fn run_full_layer(seed: u64) -> Result<FdReport> {
    let mut out: Option<FdReport> = None;
    for mode in [AttnMode::Full, AttnMode::Shared] {
        let o = LayerOptions {
            dim: 8,
            heads: 2,
            mode,
            ffn_ratio: 2,
            ..LayerOptions::default()
        };
        let mut store = ParamStore::<f64>::new();
        let layer = OhLayer::new(&mut store, "layer0", 3, (4, 4), &o, &mut rng(seed + 1))?;
        for (i, hp) in layer.orders.iter().enumerate() {
            scatter_deform(&mut store, &hp.lrp, seed + 10 + i as u64);
            if let Some(p) = hp.prior {
                perturb_prior(&mut store, p, seed + 20 + i as u64);
            }
        }
        let x = rand(&[1, 17, 8], seed + 2);
        let report = check_with_params(&store, &[x], BnMode::Eval, &opts(seed), |sess, v| {
            let x = TokenGrid::new(v[0], 4, 4, true)?;
            readout(
                sess.graph(),
                oh_layer(sess, &layer, &x, Probe::default())?.tokens,
                seed,
            )
        })?;
        out = Some(match out {
            Some(prev) => worse(prev, report),
            None => report,
        });
    }
    Ok(out.expect("two modes checked"))
}
