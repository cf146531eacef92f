//! Two-phase SGD: all-rung pretraining with the switch frozen, then joint
//! training of the gated objective.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::diff::{argmax, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{self, CostModel, LossParts, LossReport};
use crate::mask::{laplacian_edge, EDGE_THRESHOLD, RUNG_SIDES};
use crate::msm::{self, SelectMode};
use crate::policies::{size_based_for, Policy};
use crate::pyramid::{self, PyramidFeatures, NUM_RUNGS};
use crate::synth::{crop_gt, Dataset, InstanceRef, SyntheticInstance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub pretrain_steps: usize,
    pub joint_steps: usize,
    /// Instances per step.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Fractions of the joint phase after which the learning rate drops tenfold.
    pub milestones: Vec<f64>,
    /// Rung assignment used during the joint phase.
    pub policy: Policy,
    /// Pretraining steps over which the learning rate ramps up linearly to `lr`.
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_steps: 300,
            joint_steps: 2000,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            milestones: vec![0.6, 0.9],
            policy: Policy::Dynamic,
            warmup_steps: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_steps == 0 || self.joint_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("step counts and batch size must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !self.milestones.iter().all(|m| *m > 0.0 && *m < 1.0) || !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "milestones must be increasing fractions in (0, 1), got {:?}",
                self.milestones
            )));
        }
        self.policy.validate()
    }

    pub fn pretrain_lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    /// Learning rate at a joint step after milestone decay.
    pub fn joint_lr(&self, step: usize) -> f64 {
        let passed =
            self.milestones.iter().filter(|&&m| step >= (m * self.joint_steps as f64).round() as usize).count();
        self.lr * 0.1f64.powi(passed as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        }
    }
}

/// Parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub momentum: BTreeMap<String, Tensor<f32>>,
    /// Optimizer steps taken so far, both phases included.
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ParamStore<f32>) -> Self {
        Self { params, momentum: BTreeMap::new(), step: 0 }
    }

    /// Heavy-ball SGD: `v = mu v + g; p -= lr v`. Parameters without a
    /// gradient this step are left untouched, buffers included.
    fn sgd(&mut self, grads: &[(String, Vec<f32>)], lr: f64, mu: f64) -> Result<()> {
        let (lr, mu) = (lr as f32, mu as f32);
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
            let v = self.momentum.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Ground-truth mask and edge grids of one instance at every rung.
#[derive(Clone, Debug)]
pub struct Targets {
    pub masks: Vec<Tensor<f32>>,
    pub edges: Vec<Tensor<f32>>,
}

pub fn targets_for(inst: &SyntheticInstance) -> Result<Targets> {
    let mut masks = Vec::with_capacity(NUM_RUNGS);
    let mut edges = Vec::with_capacity(NUM_RUNGS);
    for &r in &RUNG_SIDES {
        let gt = crop_gt(inst, r)?;
        let e = laplacian_edge(&gt, EDGE_THRESHOLD);
        masks.push(Tensor::new(&[r, r], gt.values().to_vec())?);
        edges.push(Tensor::new(&[r, r], e.values().to_vec())?);
    }
    Ok(Targets { masks, edges })
}

/// Instances of one step, sampled without replacement from a stream keyed
/// by `(seed, phase, step)` and sorted so scenes are contiguous.
pub fn batch_refs(data: &Dataset, batch: usize, seed: u64, phase: Phase, step: usize) -> Vec<InstanceRef> {
    let all = data.instance_refs();
    let tag = match phase {
        Phase::Pretrain => 0x5052_4554,
        Phase::Joint => 0x4a4f_494e,
    };
    let mut rng = msm::noise_rng(seed ^ tag, step as u64, u64::MAX);
    let mut idx = sample(&mut rng, all.len(), batch.min(all.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i]).collect()
}

/// One JSON log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub phase: Phase,
    pub step: usize,
    pub lr: f64,
    pub tau: Option<f64>,
    #[serde(flatten)]
    pub loss: LossReport,
    /// Selected-rung counts in the batch.
    pub rung_counts: [usize; NUM_RUNGS],
    /// Batch-mean switch probabilities, when the switch is active.
    pub mean_probs: Option<[f64; NUM_RUNGS]>,
}

struct StepCtx<'a> {
    phase: Phase,
    step: usize,
    lr: f64,
    tau: Option<f64>,
    cfg: &'a TrainConfig,
    cost: &'a CostModel,
}

fn one_hot(g: &mut Graph<f32>, k: usize) -> Var {
    g.constant(Tensor::from_fn(&[NUM_RUNGS], |i| if i + 1 == k { 1.0 } else { 0.0 }))
}

fn run_step(state: &mut TrainState, data: &Dataset, ctx: &StepCtx) -> Result<StepLog> {
    let refs = batch_refs(data, ctx.cfg.batch_size, ctx.cfg.seed, ctx.phase, ctx.step);
    let switch = ctx.phase == Phase::Joint && ctx.cfg.policy.uses_switch();
    if switch && !msm::has_msm(&state.params) {
        return Err(Error::Config("dynamic policy needs switch parameters".into()));
    }
    let mut g = Graph::<f32>::new();
    let bound = state.params.bind_where(&mut g, |n| switch || !n.starts_with("msm."));
    let mut pyramids: BTreeMap<usize, PyramidFeatures> = BTreeMap::new();
    let (mut ys, mut masks, mut edges, mut probs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut mask_targets, mut edge_targets) = (Vec::new(), Vec::new());
    let mut rung_counts = [0usize; NUM_RUNGS];
    for r in &refs {
        let inst = data.instance(*r);
        let pyr = match pyramids.get(&r.scene) {
            Some(p) => *p,
            None => {
                let img = g.constant(data.scenes[r.scene].image.clone());
                let p = pyramid::backbone_ifpn(&mut g, &bound, img)?;
                pyramids.insert(r.scene, p);
                p
            }
        };
        let roi = pyramid::roi_feature(&mut g, &pyr, &inst.bbox)?;
        let (y, depth) = match (ctx.phase, ctx.cfg.policy) {
            (Phase::Pretrain, _) => (g.constant(Tensor::full(&[NUM_RUNGS], 1.0)), NUM_RUNGS),
            (Phase::Joint, Policy::Fixed(k)) => (one_hot(&mut g, k), k),
            (Phase::Joint, Policy::SizeBased) => {
                let k = size_based_for(&inst.bbox);
                (one_hot(&mut g, k), k)
            }
            (Phase::Joint, Policy::Dynamic) => {
                let p = msm::msm_forward(&mut g, &bound, roi)?;
                let mode = SelectMode::TrainSampled {
                    tau: ctx.tau.unwrap_or(1.0),
                    seed: ctx.cfg.seed,
                    instance: inst.id as u64,
                    step: ctx.step as u64,
                };
                let d = msm::select(&mut g, p, mode)?;
                probs.push(p);
                // Every rung is evaluated so the selection sees all loss terms.
                (d.hard, NUM_RUNGS)
            }
        };
        if ctx.phase == Phase::Joint {
            rung_counts[argmax(g.data(y))] += 1;
        }
        let ladder = pyramid::rfpn_from_roi(&mut g, &bound, &pyr, &inst.bbox, roi, depth)?;
        let t = targets_for(inst)?;
        ys.push(y);
        masks.push(ladder.masks);
        edges.push(ladder.edges);
        mask_targets.push(t.masks);
        edge_targets.push(t.edges);
    }
    let n = refs.len();
    let mask = losses::mask_loss(&mut g, &ys, &masks, &mask_targets)?;
    let (total, report) = match ctx.phase {
        Phase::Pretrain => {
            let v = g.data(mask)[0] as f64;
            let report = LossReport { l_mask: v, l_total: v, batch_size: n, ..LossReport::default() };
            (mask, report)
        }
        Phase::Joint => {
            let edge = losses::edge_loss(&mut g, &ys, &edges, &edge_targets)?;
            let mut parts = LossParts { mask, edge, budget: None, entropy: None, expected_cost: None };
            if switch {
                let (b, e) = losses::budget_loss(&mut g, &probs, ctx.cost)?;
                parts.budget = Some(b);
                parts.expected_cost = Some(e);
                parts.entropy = Some(losses::entropy_loss(&mut g, &probs)?);
            }
            losses::total_loss(&mut g, parts, ctx.cost, n)?
        }
    };
    if !report.l_total.is_finite() {
        return Err(Error::NonFinite { phase: ctx.phase.name(), step: ctx.step });
    }
    let mean_probs = if probs.is_empty() {
        None
    } else {
        let mut m = [0.0; NUM_RUNGS];
        for &p in &probs {
            for (acc, &v) in m.iter_mut().zip(g.data(p)) {
                *acc += v as f64 / probs.len() as f64;
            }
        }
        Some(m)
    };
    g.backward(total)?;
    let grads: Vec<(String, Vec<f32>)> =
        bound.iter().filter_map(|(name, v)| g.grad(v).map(|d| (name.to_owned(), d.to_vec()))).collect();
    drop(g);
    if grads.iter().any(|(_, d)| d.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { phase: ctx.phase.name(), step: ctx.step });
    }
    state.sgd(&grads, ctx.lr, ctx.cfg.momentum)?;
    state.step += 1;
    Ok(StepLog { phase: ctx.phase, step: ctx.step, lr: ctx.lr, tau: ctx.tau, loss: report, rung_counts, mean_probs })
}

/// Minimises the summed mask BCE of all four rungs; switch weights stay frozen.
pub fn pretrain(
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    cost: &CostModel,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for step in 0..cfg.pretrain_steps {
        let ctx = StepCtx { phase: Phase::Pretrain, step, lr: cfg.pretrain_lr(step), tau: None, cfg, cost };
        let log = run_step(state, data, &ctx)?;
        if step % 25 == 0 {
            log::info!("pretrain step {step}: mask loss {:.4}", log.loss.l_mask);
        }
        on_step(&log)?;
    }
    Ok(())
}

/// Optimises the full objective under the configured policy, with the
/// temperature annealed and the learning rate decayed at the milestones.
/// Momentum restarts from zero at the beginning of this phase.
pub fn train_joint(
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    cost: &CostModel,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    cost.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    state.momentum.clear();
    for step in 0..cfg.joint_steps {
        let tau = cfg.policy.uses_switch().then(|| cost.tau(step, cfg.joint_steps));
        let ctx = StepCtx { phase: Phase::Joint, step, lr: cfg.joint_lr(step), tau, cfg, cost };
        let log = run_step(state, data, &ctx)?;
        if step % 25 == 0 {
            log::info!(
                "joint step {step}: total {:.4}, E(C) {:.3}, rungs {:?}",
                log.loss.l_total,
                log.loss.expected_cost,
                log.rung_counts
            );
        }
        on_step(&log)?;
    }
    Ok(())
}
