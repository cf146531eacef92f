//! Training objective: gated mask and edge losses, budget hinge, entropy
//! regularizer and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::pyramid::NUM_RUNGS;

/// Per-rung cost in GFLOPs, 14x14 through 112x112.
pub const RUNG_COSTS: [f64; NUM_RUNGS] = [0.23, 0.62, 1.01, 1.40];
pub const BCE_EPS: f64 = 1e-7;
/// Clamp for the edge BCE. Soft edges are exactly zero on flat regions, so
/// predictions sit near the clamp where the BCE slope is `1/eps`; a tight
/// clamp there lets a few pixels swamp every other gradient.
pub const EDGE_BCE_EPS: f64 = 1e-3;
const ENTROPY_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub costs: [f64; NUM_RUNGS],
    /// Budget target `C_t`.
    pub target: f64,
    /// Edge-loss weight.
    pub lambda_edge: f64,
    /// Regularizer weight.
    pub lambda_reg: f64,
    /// Multiplier on the entropy term inside the regularizer; 0 disables it.
    pub entropy_weight: f64,
    /// Gumbel temperature at the first and last joint step.
    pub tau_start: f64,
    pub tau_end: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            costs: RUNG_COSTS,
            target: 0.64,
            lambda_edge: 0.1,
            lambda_reg: 0.4,
            entropy_weight: 1.0,
            tau_start: 1.0,
            tau_end: 0.1,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !self.costs.windows(2).all(|w| w[0] < w[1]) || self.costs[0] <= 0.0 {
            return Err(Error::Config(format!("rung costs must be positive and increasing, got {:?}", self.costs)));
        }
        if self.target.is_nan() || self.target <= 0.0 {
            return Err(Error::Config(format!("budget target must be > 0, got {}", self.target)));
        }
        if self.tau_start <= 0.0 || self.tau_end <= 0.0 {
            return Err(Error::Config("temperatures must be > 0".into()));
        }
        Ok(())
    }

    /// Cost of rung `k` (1-based).
    pub fn cost(&self, k: usize) -> f64 {
        self.costs[k - 1]
    }

    /// Linear temperature schedule over `steps` joint steps.
    pub fn tau(&self, step: usize, steps: usize) -> f64 {
        if steps <= 1 {
            return self.tau_start;
        }
        let t = step as f64 / (steps - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * t
    }
}

/// `L_mask + λ1·L_edge + λ2·(L_budget + w·L_entropy)`.
pub fn combine(mask: f64, edge: f64, budget: f64, entropy: f64, cost: &CostModel) -> f64 {
    mask + cost.lambda_edge * edge + cost.lambda_reg * (budget + cost.entropy_weight * entropy)
}

/// One JSON log line per step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mask: f64,
    pub l_edge: f64,
    pub l_budget: f64,
    pub l_entropy: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub expected_cost: f64,
    pub batch_size: usize,
}

/// `(1/N) Σ_i Σ_k y_i^k · BCE(pred_i^k, target_i^k)`.
///
/// `preds[i]` may stop short of four rungs as long as every missing rung
/// carries zero weight; such terms contribute nothing and are never built.
pub fn gated_loss<T: Real>(
    g: &mut Graph<T>,
    ys: &[Var],
    preds: &[Vec<Var>],
    targets: &[Vec<Tensor<T>>],
) -> Result<Var> {
    gated_loss_eps(g, ys, preds, targets, BCE_EPS)
}

fn gated_loss_eps<T: Real>(
    g: &mut Graph<T>,
    ys: &[Var],
    preds: &[Vec<Var>],
    targets: &[Vec<Tensor<T>>],
    eps: f64,
) -> Result<Var> {
    if ys.is_empty() || ys.len() != preds.len() || ys.len() != targets.len() {
        return Err(Error::shape(
            "gated_loss",
            format!("{} selections, {} predictions, {} targets", ys.len(), preds.len(), targets.len()),
        ));
    }
    let mut per_instance = Vec::with_capacity(ys.len());
    for i in 0..ys.len() {
        let k = g.value(ys[i]).numel();
        let mut terms = Vec::with_capacity(k);
        for r in 0..k {
            let weight = g.data(ys[i])[r];
            match (preds[i].get(r), targets[i].get(r)) {
                (Some(&p), Some(t)) => terms.push(g.bce(p, t, eps)?),
                (_, None) => return Err(Error::Data(format!("instance {i}: missing ground truth for rung {}", r + 1))),
                (None, Some(_)) if weight == T::zero() => terms.push(g.constant(Tensor::scalar(T::zero()))),
                (None, Some(_)) => {
                    return Err(Error::InvalidArgument(format!(
                        "instance {i}: rung {} selected but not computed",
                        r + 1
                    )))
                }
            }
        }
        per_instance.push(g.gate(ys[i], &terms)?);
    }
    let stacked = g.stack(&per_instance)?;
    Ok(g.mean(stacked))
}

pub fn mask_loss<T: Real>(g: &mut Graph<T>, ys: &[Var], masks: &[Vec<Var>], gts: &[Vec<Tensor<T>>]) -> Result<Var> {
    gated_loss(g, ys, masks, gts)
}

pub fn edge_loss<T: Real>(
    g: &mut Graph<T>,
    ys: &[Var],
    edges: &[Vec<Var>],
    gt_edges: &[Vec<Tensor<T>>],
) -> Result<Var> {
    gated_loss_eps(g, ys, edges, gt_edges, EDGE_BCE_EPS)
}

/// Returns `(max(E(C)/C_t - 1, 0), E(C))` with `E(C)` the batch mean of `Σ_k p^k C^k`.
pub fn budget_loss<T: Real>(g: &mut Graph<T>, probs: &[Var], cost: &CostModel) -> Result<(Var, Var)> {
    if cost.target.is_nan() || cost.target <= 0.0 {
        return Err(Error::InvalidArgument(format!("budget target must be > 0, got {}", cost.target)));
    }
    if probs.is_empty() {
        return Err(Error::InvalidArgument("budget_loss: empty batch".into()));
    }
    let costs = g.constant(Tensor::new(&[NUM_RUNGS], cost.costs.iter().map(|&c| T::of(c)).collect())?);
    let per: Vec<Var> = probs.iter().map(|&p| g.dot(p, costs)).collect::<Result<_>>()?;
    let stacked = g.stack(&per)?;
    let expected = g.mean(stacked);
    let ratio = g.scale(expected, 1.0 / cost.target);
    let excess = g.add_scalar(ratio, -1.0);
    Ok((g.relu(excess), expected))
}

/// Batch rung frequencies `f^k = (1/N) Σ_i p_i^k`.
pub fn frequencies<T: Real>(g: &mut Graph<T>, probs: &[Var]) -> Result<Var> {
    let (&first, rest) = probs.split_first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut acc = first;
    for &p in rest {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / probs.len() as f64))
}

/// `(1/K) Σ_k f^k ln f^k`, minimal (`-ln K / K`) at uniform frequencies.
pub fn entropy_loss<T: Real>(g: &mut Graph<T>, probs: &[Var]) -> Result<Var> {
    let f = frequencies(g, probs)?;
    let k = g.value(f).numel();
    let safe = g.clamp(f, ENTROPY_EPS, 1.0);
    let lnf = g.ln(safe);
    let flnf = g.mul(f, lnf)?;
    let s = g.sum(flnf);
    Ok(g.scale(s, 1.0 / k as f64))
}

/// Components of one step's objective; the regularizer parts are absent for
/// policies without a switch.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub mask: Var,
    pub edge: Var,
    pub budget: Option<Var>,
    pub entropy: Option<Var>,
    pub expected_cost: Option<Var>,
}

pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    parts: LossParts,
    cost: &CostModel,
    batch: usize,
) -> Result<(Var, LossReport)> {
    let val = |g: &Graph<T>, v: Option<Var>| v.map_or(0.0, |v| g.data(v)[0].as_f64());
    let edge = g.scale(parts.edge, cost.lambda_edge);
    let mut total = g.add(parts.mask, edge)?;
    let mut reg = None;
    if let Some(b) = parts.budget {
        reg = Some(b);
    }
    if let Some(e) = parts.entropy {
        let e = g.scale(e, cost.entropy_weight);
        reg = Some(match reg {
            Some(r) => g.add(r, e)?,
            None => e,
        });
    }
    if let Some(r) = reg {
        let r = g.scale(r, cost.lambda_reg);
        total = g.add(total, r)?;
    }
    let report = LossReport {
        l_mask: val(g, Some(parts.mask)),
        l_edge: val(g, Some(parts.edge)),
        l_budget: val(g, parts.budget),
        l_entropy: val(g, parts.entropy),
        l_reg: val(g, parts.budget) + cost.entropy_weight * val(g, parts.entropy),
        l_total: val(g, Some(total)),
        expected_cost: val(g, parts.expected_cost),
        batch_size: batch,
    };
    Ok((total, report))
}

/// Expected cost of a rung histogram (fractions summing to 1).
pub fn histogram_cost(hist: &[f64; NUM_RUNGS], cost: &CostModel) -> f64 {
    hist.iter().zip(&cost.costs).map(|(h, c)| h * c).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.constant(Tensor::new(&[v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn budget_examples() {
        let cost = CostModel { target: 1.0, ..CostModel::default() };
        let mut g = Graph::<f64>::new();
        let p = vec_var(&mut g, &[1.0, 0.0, 0.0, 0.0]);
        let (l, e) = budget_loss(&mut g, &[p], &cost).unwrap();
        assert_eq!(g.data(l)[0], 0.0);
        assert!((g.data(e)[0] - 0.23).abs() < 1e-12);

        let cost = CostModel { target: 0.4, ..CostModel::default() };
        let p = vec_var(&mut g, &[0.0, 0.0, 0.0, 1.0]);
        let (l, _) = budget_loss(&mut g, &[p], &cost).unwrap();
        assert!((g.data(l)[0] - 2.5).abs() < 1e-12);

        let bad = CostModel { target: 0.0, ..CostModel::default() };
        assert!(budget_loss(&mut g, &[p], &bad).is_err());
    }

    #[test]
    fn entropy_examples() {
        let mut g = Graph::<f64>::new();
        let u = vec_var(&mut g, &[0.25; 4]);
        let l = entropy_loss(&mut g, &[u, u]).unwrap();
        assert!((g.data(l)[0] + 4f64.ln() / 4.0).abs() < 1e-12);
        let one = vec_var(&mut g, &[0.0, 1.0, 0.0, 0.0]);
        let l = entropy_loss(&mut g, &[one]).unwrap();
        assert!(g.data(l)[0].abs() < 1e-9);
        let half = vec_var(&mut g, &[0.5, 0.5]);
        let l = entropy_loss(&mut g, &[half]).unwrap();
        assert!((g.data(l)[0] + 2f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn combine_arithmetic() {
        let cost = CostModel { lambda_edge: 0.1, lambda_reg: 0.4, ..CostModel::default() };
        assert!((combine(1.0, 0.5, 0.2, -0.3, &cost) - 1.01).abs() < 1e-12);
        let zero = CostModel { lambda_edge: 0.0, lambda_reg: 0.0, ..CostModel::default() };
        assert_eq!(combine(0.7, 3.0, 2.0, -0.3, &zero), 0.7);
    }

    #[test]
    fn gated_loss_ignores_unselected_rungs() {
        let run = |other: f64| {
            let mut g = Graph::<f64>::new();
            let y = vec_var(&mut g, &[0.0, 1.0, 0.0, 0.0]);
            let preds: Vec<Var> =
                (0..4).map(|r| g.constant(Tensor::full(&[2, 2], if r == 1 { 1.0 } else { other }))).collect();
            let targets = vec![Tensor::full(&[2, 2], 1.0); 4];
            let l = mask_loss(&mut g, &[y], &[preds], &[targets]).unwrap();
            g.data(l)[0]
        };
        assert!(run(0.3) < 1e-6);
        assert_eq!(run(0.3), run(0.9));
    }

    #[test]
    fn truncated_ladder_is_allowed_only_when_unselected() {
        let mut g = Graph::<f64>::new();
        let y = vec_var(&mut g, &[1.0, 0.0, 0.0, 0.0]);
        let p = g.constant(Tensor::full(&[2, 2], 0.5));
        let targets = vec![Tensor::full(&[2, 2], 1.0); 4];
        let l = mask_loss(&mut g, &[y], &[vec![p]], std::slice::from_ref(&targets)).unwrap();
        assert!((g.data(l)[0] - 2f64.ln()).abs() < 1e-9);
        let y2 = vec_var(&mut g, &[0.0, 0.0, 1.0, 0.0]);
        assert!(mask_loss(&mut g, &[y2], &[vec![p]], &[targets]).is_err());
    }

    #[test]
    fn histogram_costs() {
        let c = CostModel::default();
        let dynamic = histogram_cost(&[0.35, 0.34, 0.21, 0.10], &c);
        let oracle = 0.35 * 0.23 + 0.34 * 0.62 + 0.21 * 1.01 + 0.10 * 1.40;
        assert!((dynamic - oracle).abs() < 1e-15);
        assert_eq!((dynamic * 1e4).round(), 6434.0);
        assert_eq!((dynamic * 1e2).round(), 64.0);
        let size = histogram_cost(&[0.47, 0.32, 0.14, 0.08], &c);
        assert!((size - 0.56).abs() < 0.005);
        assert_eq!(histogram_cost(&[0.0, 0.0, 0.0, 1.0], &c), 1.40);
    }

    #[test]
    fn tau_schedule_endpoints() {
        let c = CostModel::default();
        assert_eq!(c.tau(0, 11), 1.0);
        assert!((c.tau(10, 11) - 0.1).abs() < 1e-12);
        assert!((c.tau(5, 11) - 0.55).abs() < 1e-12);
    }
}
