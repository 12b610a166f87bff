//! Central-difference gradient oracle.
//!
//! The reported error for one coordinate is
//! `|analytic − numeric| / max(1, |analytic|, |numeric|)`; the check returns
//! the maximum over every checked coordinate of every input.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

impl FdOptions {
    pub fn with_eps(eps: f64) -> Self {
        FdOptions {
            eps,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn eval<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    T: Element,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let g = Graph::new();
    let vars: Vec<Var<T>> = inputs.iter().map(|x| g.constant(x.clone())).collect();
    let out = f(&g, &vars)?;
    let v = out.value();
    if v.numel() != 1 {
        return Err(Error::contract(
            "finite_diff_check needs a scalar-valued function",
        ));
    }
    Ok(v.item().f64())
}

/// Compare reverse-mode gradients of scalar `f` against central differences
/// for every input tensor.
pub fn finite_diff_check<T, F>(f: F, inputs: &[Tensor<T>], opts: &FdOptions) -> Result<FdReport>
where
    T: Element,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let g = Graph::new();
    let vars: Vec<Var<T>> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let loss = f(&g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(opts.seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (which, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < x.numel() => {
                let mut c = sample(&mut rng, x.numel(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..x.numel()).collect(),
        };
        for i in coords {
            let orig = x.data()[i];
            probe[which].data_mut()[i] = T::of(orig.f64() + opts.eps);
            let up = eval(&f, &probe)?;
            probe[which].data_mut()[i] = T::of(orig.f64() - opts.eps);
            let down = eval(&f, &probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let exact = analytic[which].data()[i].f64();
            let err = (exact - numeric).abs() / 1f64.max(exact.abs()).max(numeric.abs());
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some((which, i));
            }
        }
    }
    Ok(report)
}

/// Single-input form: returns the maximum relative error.
pub fn finite_diff_check_one<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Element,
    F: for<'g> Fn(&'g Graph<T>, Var<'g, T>) -> Result<Var<'g, T>>,
{
    let report = finite_diff_check(
        |g, v| f(g, v[0]),
        std::slice::from_ref(x),
        &FdOptions::with_eps(eps),
    )?;
    Ok(report.max_rel_error)
}
