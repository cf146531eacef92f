//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor for the relative error; below it the check is absolute.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
    /// Only check parameters whose name passes this filter.
    pub only: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-4, max_entries: None, only: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub checked: usize,
}

impl GradCheckReport {
    /// Fails with the worst offending parameter entry when `max_rel_err >= tol`.
    pub fn ensure(&self, tol: f64) -> Result<()> {
        match &self.worst {
            Some(w) if self.max_rel_err >= tol => Err(Error::GradCheck {
                param: w.param.clone(),
                index: w.index,
                analytic: w.analytic,
                numeric: w.numeric,
                rel_err: w.rel_err,
            }),
            _ => Ok(()),
        }
    }
}

fn evaluate<F>(params: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    let bound = params.bind(&mut g);
    let loss = f(&mut g, &bound)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::shape("grad_check", "objective must be scalar"));
    }
    Ok(g.data(loss)[0])
}

/// Compares reverse-mode gradients of the scalar `f` with central differences
/// over every (or a sampled subset of) parameter entries, in `f64`.
pub fn grad_check<F>(params: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    let bound = params.bind(&mut g);
    let loss = f(&mut g, &bound)?;
    g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    let names: Vec<String> = params
        .names()
        .filter(|n| opts.only.as_ref().is_none_or(|o| o.iter().any(|x| x == n)))
        .map(str::to_owned)
        .collect();
    for name in names {
        let var = bound[name.as_str()];
        let analytic = g.grad_or_zero(var);
        let n = analytic.numel();
        let indices: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for idx in indices {
            let orig = work.get(&name).expect("param").data()[idx];
            work.get_mut(&name).expect("param").data_mut()[idx] = orig + opts.step;
            let up = evaluate(&work, &f)?;
            work.get_mut(&name).expect("param").data_mut()[idx] = orig - opts.step;
            let down = evaluate(&work, &f)?;
            work.get_mut(&name).expect("param").data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(Mismatch { param: name.clone(), index: idx, analytic: a, numeric, rel_err: rel });
            }
        }
    }
    Ok(report)
}
