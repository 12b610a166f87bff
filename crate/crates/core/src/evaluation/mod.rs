//! Retrieval metrics, cross-order attention divergence, score-cost
//! reporting and the synthetic pedestrian dataset.

pub mod divergence;
pub mod retrieval;
pub mod synth;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub use divergence::{attention_similarity_report, js_divergence, Direction, SimilarityReport};
pub use retrieval::{cmc_map, dist_matrix, evaluate, Retrieval, RetrievalSet};
pub use synth::{synth_generate, SynthSpec};

use crate::attention::{AttentionCapture, FlopCounter, Probe};
use crate::data::{stack, ImageSet};
use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::ohformer::{order_grids, AttnMode};
use crate::params::{ParamStore, Session};
use crate::tensor::{BnMode, Graph, Tensor};

/// Images embedded per forward pass.
pub const EMBED_BATCH: usize = 32;

/// Eval-mode retrieval embeddings of every image in `set`.
pub fn embed_set(model: &Model, store: &ParamStore<f32>, set: &ImageSet) -> Result<RetrievalSet> {
    if set.size() != model.config.input {
        return Err(Error::data(format!(
            "images are {:?}, the model expects {:?}",
            set.size(),
            model.config.input
        )));
    }
    let d = model.embed_dim();
    let mut data = Vec::with_capacity(set.len() * d);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EMBED_BATCH) {
        let g = Graph::new();
        let sess = Session::new(&g, store, BnMode::Eval, false);
        let e = model.embed(&sess, g.constant(set.batch(chunk)))?;
        data.extend(e.value().data().iter().map(|&v| f64::from(v)));
    }
    RetrievalSet::new(
        Tensor::new(&[set.len(), d], data)?,
        set.pids.clone(),
        set.cams.clone(),
    )
}

/// Layers of order ≥ 2 as `(layer, order)`.
pub fn high_order_layers(model: &Model) -> Vec<(usize, usize)> {
    model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::High(h) if h.order() >= 2 => Some((i, h.order())),
            _ => None,
        })
        .collect()
}

/// Capture attention for `images` in eval mode and report every high-order
/// layer in each requested direction.
pub fn analyze_attention(
    model: &Model,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
    directions: &[Direction],
) -> Result<Vec<SimilarityReport>> {
    let layers = high_order_layers(model);
    if layers.is_empty() {
        return Err(Error::config("the model has no layer of order 2 or higher"));
    }
    let capture = AttentionCapture::new();
    let g = Graph::new();
    let sess = Session::new(&g, store, BnMode::Eval, false);
    model.forward(
        &sess,
        g.constant(images.clone()),
        Probe {
            capture: Some(&capture),
            ..Probe::default()
        },
    )?;
    let records = capture.into_records();
    let (h, w) = model.grid;
    let mut out = Vec::new();
    for &dir in directions {
        for &(layer, m) in &layers {
            let recs: Vec<_> = records
                .iter()
                .filter(|r| r.layer == layer)
                .cloned()
                .collect();
            let grids = order_grids(&model.config.lrp, h, w, m)?;
            out.push(attention_similarity_report(&recs, &grids, dir)?);
        }
    }
    Ok(out)
}

/// Images `indices` of `set` stacked for analysis.
pub fn analysis_batch(set: &ImageSet, count: usize) -> Tensor<f32> {
    let idx: Vec<usize> = (0..set.len().min(count)).collect();
    stack(idx.iter().map(|&i| &set.images[i]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopRow {
    pub layer: usize,
    pub mode: AttnMode,
    pub score_madds: u64,
}

/// Per-layer attention-score multiply-adds of the model's architecture in
/// both modes, for layers of order ≥ 2; counted on one forward pass.
pub fn flop_report(model: &Model) -> Result<Vec<FlopRow>> {
    let layers = high_order_layers(model);
    let mut rows = Vec::new();
    for mode in [AttnMode::Full, AttnMode::Shared] {
        let cfg = crate::model::ModelConfig {
            mode,
            ..model.config.clone()
        };
        let (m, store) = Model::build::<f32, _>(&cfg, &mut Xoshiro256PlusPlus::seed_from_u64(0))?;
        let flops = FlopCounter::new();
        let g = Graph::new();
        let sess = Session::new(&g, &store, BnMode::Eval, false);
        let (ih, iw) = cfg.input;
        m.forward(
            &sess,
            g.constant(Tensor::zeros(&[1, 3, ih, iw])),
            Probe {
                flops: Some(&flops),
                ..Probe::default()
            },
        )?;
        rows.extend(layers.iter().map(|&(layer, _)| FlopRow {
            layer,
            mode,
            score_madds: flops.layer(layer),
        }));
    }
    rows.sort_by_key(|r| (r.layer, r.mode != AttnMode::Full));
    Ok(rows)
}

pub fn analysis_tsv(reports: &[SimilarityReport]) -> String {
    let mut s = String::from("layer\torder_i\torder_j\tdirection\tmean_js\n");
    for r in reports {
        for i in 0..r.orders() {
            for j in 0..r.orders() {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{:.9}",
                    r.layer,
                    i + 1,
                    j + 1,
                    r.direction,
                    r.mean[i][j]
                );
            }
        }
    }
    s
}

pub fn analysis_heads_tsv(reports: &[SimilarityReport]) -> String {
    let mut s = String::from("layer\thead\torder_i\torder_j\tdirection\tmean_js\n");
    for r in reports {
        for (h, mat) in r.per_head.iter().enumerate() {
            for i in 0..r.orders() {
                for j in 0..r.orders() {
                    let _ = writeln!(
                        s,
                        "{}\t{h}\t{}\t{}\t{}\t{:.9}",
                        r.layer,
                        i + 1,
                        j + 1,
                        r.direction,
                        mat[i][j]
                    );
                }
            }
        }
    }
    s
}

pub fn flops_tsv(rows: &[FlopRow]) -> String {
    let mut s = String::from("layer\tmode\tscore_madds\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}", r.layer, r.mode, r.score_madds);
    }
    s
}

pub fn metrics_tsv(r: &Retrieval) -> String {
    format!(
        "metric\tvalue\nmAP\t{:.6}\nR1\t{:.6}\nR5\t{:.6}\nR10\t{:.6}\nqueries\t{}\nskipped\t{}\n",
        r.map,
        r.rank(1),
        r.rank(5),
        r.rank(10),
        r.valid_queries,
        r.skipped
    )
}

pub fn metrics_line(r: &Retrieval) -> String {
    format!(
        "mAP={:.4} R1={:.4} R5={:.4} R10={:.4}",
        r.map,
        r.rank(1),
        r.rank(5),
        r.rank(10)
    )
}
