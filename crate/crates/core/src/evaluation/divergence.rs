//! Jensen-Shannon comparison of attention weights across orders of one
//! high-order layer.
//!
//! Orders live on different grids. `Down` pools each finer row onto the
//! coarser grid (block means over keys, renormalized) and pairs fine query
//! `q` with coarse query `c(q)`, where `c` is the nearest fine→coarse token
//! map. `Up` replicates the coarse row `c(q)` over the fine keys and
//! renormalizes. Order-1 rows drop the class-token query and key.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionRecord;
use crate::error::{Error, Result};
use crate::ohformer::token_block_map;

const NORM_TOL: f64 = 1e-5;

fn xlogx_ratio(a: f64, m: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * (a / m).ln()
    }
}

/// `½ KL(p‖m) + ½ KL(q‖m)`, `m = (p + q) / 2`, natural log.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::dim(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    for (name, d) in [("p", p), ("q", q)] {
        let total: f64 = d.iter().sum();
        if d.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > NORM_TOL {
            return Err(Error::contract(format!(
                "{name} is not a probability distribution (sum {total})"
            )));
        }
    }
    Ok(js_unchecked(p, q))
}

fn js_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let (mut kp, mut kq) = (0.0, 0.0);
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        kp += xlogx_ratio(a, m);
        kq += xlogx_ratio(b, m);
    }
    (0.5 * kp + 0.5 * kq).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Down,
    Up,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Down, Direction::Up];
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Down => "down",
            Direction::Up => "up",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "down" => Ok(Direction::Down),
            "up" => Ok(Direction::Up),
            _ => Err(Error::config(format!(
                "direction must be down or up, got {s:?}"
            ))),
        }
    }
}

/// Row-stochastic `n × n` attention on an `h × w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridAttention {
    pub grid: (usize, usize),
    pub rows: Vec<f64>,
}

impl GridAttention {
    pub fn n(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn row(&self, q: usize) -> &[f64] {
        let n = self.n();
        &self.rows[q * n..(q + 1) * n]
    }

    /// Accept `weights` on `grid`, or on `grid` plus a leading class token,
    /// which is removed and each row renormalized.
    pub fn from_weights(weights: &[f64], t: usize, grid: (usize, usize)) -> Result<Self> {
        let n = grid.0 * grid.1;
        if t == n {
            return Ok(GridAttention {
                grid,
                rows: weights.to_vec(),
            });
        }
        if t != n + 1 {
            return Err(Error::dim(format!(
                "{t} tokens do not fit a {}x{} grid",
                grid.0, grid.1
            )));
        }
        let mut rows = Vec::with_capacity(n * n);
        for q in 1..t {
            let row = &weights[q * t + 1..(q + 1) * t];
            let total: f64 = row.iter().sum();
            rows.extend(row.iter().map(|v| v / total));
        }
        Ok(GridAttention { grid, rows })
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

fn block_mean(row: &[f64], map: &[usize], nc: usize) -> Vec<f64> {
    let mut sum = vec![0.0; nc];
    let mut count = vec![0usize; nc];
    for (&v, &c) in row.iter().zip(map) {
        sum[c] += v;
        count[c] += 1;
    }
    sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect()
}

/// Mean over the finer grid's queries of the row-wise JS between two orders.
pub fn pair_divergence(a: &GridAttention, b: &GridAttention, dir: Direction) -> f64 {
    let (fine, coarse) = if a.n() >= b.n() { (a, b) } else { (b, a) };
    let (nf, nc) = (fine.n(), coarse.n());
    let map = if fine.grid == coarse.grid {
        (0..nf).collect()
    } else {
        token_block_map(fine.grid, coarse.grid)
    };
    let mut total = 0.0;
    for q in 0..nf {
        let c = coarse.row(map[q]);
        total += match dir {
            Direction::Down => {
                js_unchecked(&normalized(block_mean(fine.row(q), &map, nc)), c)
            }
            Direction::Up => {
                let up = normalized((0..nf).map(|k| c[map[k]]).collect());
                js_unchecked(fine.row(q), &up)
            }
        };
    }
    total / nf as f64
}

/// Uniform attention on `grid`.
pub fn uniform_attention(grid: (usize, usize)) -> GridAttention {
    let n = grid.0 * grid.1;
    GridAttention {
        grid,
        rows: vec![1.0 / n as f64; n * n],
    }
}

/// Mean JS of each row against the uniform distribution on its grid.
pub fn uniform_divergence(a: &GridAttention) -> f64 {
    pair_divergence(a, &uniform_attention(a.grid), Direction::Down)
}

/// Order × order JS matrices of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    pub layer: usize,
    pub direction: Direction,
    /// Orders `1..=m`; entry `[i][j]` compares order `i + 1` with `j + 1`.
    pub mean: Vec<Vec<f64>>,
    /// Same matrix per head, averaged over samples.
    pub per_head: Vec<Vec<Vec<f64>>>,
    /// Mean JS of every order's rows against uniform attention on its grid.
    pub uniform: f64,
    /// Mean over order pairs `i < j` of the same comparison with order `j`
    /// replaced by uniform attention on its grid.
    pub uniform_matched: f64,
}

impl SimilarityReport {
    pub fn orders(&self) -> usize {
        self.mean.len()
    }

    /// Mean of the strictly upper triangle.
    pub fn mean_cross_order(&self) -> f64 {
        let m = self.orders();
        let vals: Vec<f64> = (0..m)
            .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
            .map(|(i, j)| self.mean[i][j])
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn table(&self) -> String {
        let m = self.orders();
        let mut s = format!("layer {} ({})\n", self.layer, self.direction);
        s.push_str("order");
        for j in 1..=m {
            s.push_str(&format!("\t{j}"));
        }
        s.push('\n');
        for i in 0..m {
            s.push_str(&format!("{}", i + 1));
            for j in 0..m {
                s.push_str(&format!("\t{:.4}", self.mean[i][j]));
            }
            s.push('\n');
        }
        s.push_str(&format!(
            "cross-order mean {:.4}, uniform baseline {:.4}, matched uniform baseline {:.4}\n",
            self.mean_cross_order(),
            self.uniform,
            self.uniform_matched
        ));
        s
    }
}

/// Build the report for one layer from its captured records. `grids[k]`
/// is the spatial grid of order `k + 1`.
pub fn attention_similarity_report(
    records: &[AttentionRecord],
    grids: &[(usize, usize)],
    dir: Direction,
) -> Result<SimilarityReport> {
    let first = records
        .first()
        .ok_or_else(|| Error::contract("no attention records"))?;
    let layer = first.layer;
    if records.iter().any(|r| r.layer != layer) {
        return Err(Error::contract(
            "attention records from more than one layer",
        ));
    }
    let m = grids.len();
    let mut by_key: BTreeMap<(usize, usize), Vec<Option<GridAttention>>> = BTreeMap::new();
    for r in records {
        if r.order == 0 || r.order > m {
            return Err(Error::contract(format!(
                "record of order {} outside 1..={m}",
                r.order
            )));
        }
        let s = r.weights.shape();
        let att = GridAttention::from_weights(r.weights.data(), s[0], grids[r.order - 1])?;
        let slot = &mut by_key
            .entry((r.sample, r.head))
            .or_insert_with(|| vec![None; m])[r.order - 1];
        if slot.replace(att).is_some() {
            return Err(Error::contract(format!(
                "duplicate record for order {}, head {}, sample {}",
                r.order, r.head, r.sample
            )));
        }
    }
    let heads = by_key.keys().map(|&(_, h)| h + 1).max().unwrap_or(0);
    let mut per_head = vec![vec![vec![0.0; m]; m]; heads];
    let mut counts = vec![0usize; heads];
    let (mut uniform, mut uniform_n) = (0.0, 0usize);
    let (mut matched, mut matched_n) = (0.0, 0usize);
    for (&(_, head), orders) in &by_key {
        let orders: Vec<&GridAttention> = orders
            .iter()
            .enumerate()
            .map(|(k, o)| {
                o.as_ref().ok_or_else(|| {
                    Error::contract(format!("order {} missing for head {head}", k + 1))
                })
            })
            .collect::<Result<_>>()?;
        for i in 0..m {
            for j in i + 1..m {
                let v = pair_divergence(orders[i], orders[j], dir);
                per_head[head][i][j] += v;
                per_head[head][j][i] += v;
                matched += pair_divergence(orders[i], &uniform_attention(orders[j].grid), dir);
                matched_n += 1;
            }
            uniform += uniform_divergence(orders[i]);
            uniform_n += 1;
        }
        counts[head] += 1;
    }
    for (mat, &c) in per_head.iter_mut().zip(&counts) {
        mat.iter_mut().flatten().for_each(|v| *v /= c.max(1) as f64);
    }
    let mut mean = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            mean[i][j] = per_head.iter().map(|h| h[i][j]).sum::<f64>() / heads as f64;
        }
    }
    Ok(SimilarityReport {
        layer,
        direction: dir,
        mean,
        per_head,
        uniform: uniform / uniform_n as f64,
        uniform_matched: matched / matched_n.max(1) as f64,
    })
}
