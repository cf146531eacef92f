//! Oracle-detection evaluation: every GT box gets exactly one mask, so AP
//! reduces to the mean over IoU thresholds of the fraction of instances that
//! clear the threshold ("oracle-AP").

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::hex;
use crate::diff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::losses::{CostModel, BCE_EPS, EDGE_BCE_EPS};
use crate::mask::{iou, laplacian_edge, to_resolution, MaskGrid, EDGE_THRESHOLD, RUNG_SIDES};
use crate::msm::{self, SelectMode};
use crate::policies::{size_based_for, Policy};
use crate::pyramid::{self, NUM_RUNGS};
use crate::synth::{crop_gt, Dataset, Difficulty, Family};

/// Side at which every prediction is compared with its ground truth.
pub const EVAL_SIDE: usize = 112;

/// `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Per-threshold accuracy and their mean.
pub fn ap_from_ious(ious: &[f64]) -> (f64, [f64; 10]) {
    let ts = iou_thresholds();
    if ious.is_empty() {
        return (0.0, [0.0; 10]);
    }
    let acc = ts.map(|t| ious.iter().filter(|&&v| v >= t).count() as f64 / ious.len() as f64);
    (acc.iter().sum::<f64>() / acc.len() as f64, acc)
}

pub fn mask_ap(preds: &[MaskGrid], gts: &[MaskGrid]) -> Result<(f64, [f64; 10])> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let ious = preds.iter().zip(gts).map(|(p, g)| iou(p, g)).collect::<Result<Vec<_>>>()?;
    Ok(ap_from_ious(&ious))
}

/// Mean cost of the selected rungs (1-based) and its change in percent
/// against always using the finest rung.
pub fn cost_report(selections: &[usize], cost: &CostModel) -> Result<(f64, f64)> {
    if selections.is_empty() {
        return Err(Error::InvalidArgument("no selections".into()));
    }
    if let Some(k) = selections.iter().find(|k| !(1..=NUM_RUNGS).contains(k)) {
        return Err(Error::InvalidArgument(format!("rung {k} outside 1..={NUM_RUNGS}")));
    }
    // Through the histogram so a single-rung run reproduces its cost exactly.
    let e = crate::losses::histogram_cost(&histogram(selections), cost);
    Ok((e, delta_pct(e, cost)))
}

pub fn delta_pct(e: f64, cost: &CostModel) -> f64 {
    (e / cost.costs[NUM_RUNGS - 1] - 1.0) * 100.0
}

pub fn histogram(selections: &[usize]) -> [f64; NUM_RUNGS] {
    let mut h = [0.0; NUM_RUNGS];
    for &k in selections {
        h[k - 1] += 1.0;
    }
    let n = selections.len().max(1) as f64;
    h.map(|c| c / n)
}

/// Rung histogram per group label.
pub fn distribution_report<L: Ord + Clone>(
    selections: &[usize],
    labels: &[L],
) -> Result<BTreeMap<L, [f64; NUM_RUNGS]>> {
    if selections.len() != labels.len() {
        return Err(Error::InvalidArgument("one label per selection required".into()));
    }
    let mut groups: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (&k, l) in selections.iter().zip(labels) {
        groups.entry(l.clone()).or_default().push(k);
    }
    Ok(groups.into_iter().map(|(l, ks)| (l, histogram(&ks))).collect())
}

pub fn mean_rung(hist: &[f64; NUM_RUNGS]) -> f64 {
    hist.iter().enumerate().map(|(i, h)| (i + 1) as f64 * h).sum()
}

/// Outcome for one evaluated instance.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub id: usize,
    pub family: Family,
    pub difficulty: Difficulty,
    /// Selected rung, 1-based.
    pub rung: usize,
    /// Switch probabilities, when the switch made the choice.
    pub probs: Option<[f64; NUM_RUNGS]>,
    /// Binary prediction at [`EVAL_SIDE`].
    pub mask: MaskGrid,
    pub gt: MaskGrid,
    pub iou: f64,
}

/// Runs the policy over every instance; only the rungs up to the selected
/// one are computed. No gradients are recorded.
pub fn predict(params: &ParamStore<f32>, data: &Dataset, policy: Policy) -> Result<Vec<Prediction>> {
    policy.validate()?;
    if policy.uses_switch() && !msm::has_msm(params) {
        return Err(Error::Config("dynamic policy needs a checkpoint with switch weights".into()));
    }
    let mut out = Vec::with_capacity(data.len());
    for scene in &data.scenes {
        let mut g = Graph::<f32>::new();
        let p = params.bind_where(&mut g, |_| false);
        let img = g.constant(scene.image.clone());
        let pyr = pyramid::backbone_ifpn(&mut g, &p, img)?;
        for inst in &scene.instances {
            let roi = pyramid::roi_feature(&mut g, &pyr, &inst.bbox)?;
            let (k, probs) = match policy {
                Policy::Fixed(k) => (k, None),
                Policy::SizeBased => (size_based_for(&inst.bbox), None),
                Policy::Dynamic => {
                    let pr = msm::msm_forward(&mut g, &p, roi)?;
                    let d = msm::select(&mut g, pr, SelectMode::InferArgmax)?;
                    let v = g.data(pr);
                    (d.k, Some(std::array::from_fn(|i| v[i] as f64)))
                }
            };
            let ladder = pyramid::rfpn_from_roi(&mut g, &p, &pyr, &inst.bbox, roi, k)?;
            let r = RUNG_SIDES[k - 1];
            let soft = MaskGrid::soft(r, g.data(ladder.masks[k - 1]).to_vec())?;
            let mask = to_resolution(&soft, EVAL_SIDE);
            let gt = crop_gt(inst, EVAL_SIDE)?;
            let v = iou(&mask, &gt)?;
            out.push(Prediction {
                id: inst.id,
                family: inst.family,
                difficulty: inst.difficulty,
                rung: k,
                probs,
                mask,
                gt,
                iou: v,
            });
        }
    }
    Ok(out)
}

/// Per-rung mask and edge BCE of one instance, from a forward pass over the
/// full ladder.
#[derive(Clone, Debug, PartialEq)]
pub struct RungLosses {
    pub id: usize,
    pub difficulty: Difficulty,
    pub mask: [f64; NUM_RUNGS],
    pub edge: [f64; NUM_RUNGS],
}

fn bce(pred: &[f32], target: &[f32], eps: f64) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = (p as f64).clamp(eps, 1.0 - eps);
            let t = t as f64;
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    s / pred.len() as f64
}

pub fn rung_losses(params: &ParamStore<f32>, data: &Dataset) -> Result<Vec<RungLosses>> {
    let mut out = Vec::with_capacity(data.len());
    for scene in &data.scenes {
        let mut g = Graph::<f32>::new();
        let p = params.bind_where(&mut g, |_| false);
        let img = g.constant(scene.image.clone());
        let pyr = pyramid::backbone_ifpn(&mut g, &p, img)?;
        for inst in &scene.instances {
            let ladder = pyramid::rfpn_forward(&mut g, &p, &pyr, &inst.bbox, NUM_RUNGS)?;
            let mut row =
                RungLosses { id: inst.id, difficulty: inst.difficulty, mask: [0.0; NUM_RUNGS], edge: [0.0; NUM_RUNGS] };
            for (k, &r) in RUNG_SIDES.iter().enumerate() {
                let gt = crop_gt(inst, r)?;
                let ge = laplacian_edge(&gt, EDGE_THRESHOLD);
                row.mask[k] = bce(g.data(ladder.masks[k]), gt.values(), BCE_EPS);
                row.edge[k] = bce(g.data(ladder.edges[k]), ge.values(), EDGE_BCE_EPS);
            }
            out.push(row);
        }
    }
    Ok(out)
}

/// Coefficient of variation (population std over mean).
pub fn coeff_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub config_hash: String,
    pub n: usize,
    pub oracle_ap: f64,
    pub thresholds: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub mean_iou: f64,
    pub mean_iou_by_difficulty: BTreeMap<String, f64>,
    pub mean_iou_by_rung: BTreeMap<String, f64>,
    pub rung_histogram: [f64; NUM_RUNGS],
    pub rung_histogram_by_class: BTreeMap<String, [f64; NUM_RUNGS]>,
    pub rung_histogram_by_difficulty: BTreeMap<String, [f64; NUM_RUNGS]>,
    pub expected_cost: f64,
    pub delta_pct: f64,
}

fn mean_by<L: Ord>(
    preds: &[Prediction],
    key: impl Fn(&Prediction) -> L,
    name: impl Fn(&L) -> String,
) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<L, (f64, usize)> = BTreeMap::new();
    for p in preds {
        let e = acc.entry(key(p)).or_default();
        e.0 += p.iou;
        e.1 += 1;
    }
    acc.into_iter().map(|(l, (s, n))| (name(&l), s / n as f64)).collect()
}

pub fn report(preds: &[Prediction], policy: Policy, cost: &CostModel, config_hash: &[u8; 32]) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let ious: Vec<f64> = preds.iter().map(|p| p.iou).collect();
    let (ap, acc) = ap_from_ious(&ious);
    let ks: Vec<usize> = preds.iter().map(|p| p.rung).collect();
    let (e, delta) = cost_report(&ks, cost)?;
    let classes: Vec<&str> = preds.iter().map(|p| p.family.name()).collect();
    let diffs: Vec<&str> = preds.iter().map(|p| difficulty_name(p.difficulty)).collect();
    let named = |m: BTreeMap<&str, [f64; NUM_RUNGS]>| m.into_iter().map(|(k, v)| (k.to_owned(), v)).collect();
    Ok(EvalReport {
        policy: policy.to_string(),
        config_hash: hex(config_hash),
        n: preds.len(),
        oracle_ap: ap,
        thresholds: iou_thresholds().to_vec(),
        accuracy: acc.to_vec(),
        mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
        mean_iou_by_difficulty: mean_by(preds, |p| p.difficulty, |d| difficulty_name(*d).to_owned()),
        mean_iou_by_rung: mean_by(preds, |p| p.rung, |k| RUNG_SIDES[k - 1].to_string()),
        rung_histogram: histogram(&ks),
        rung_histogram_by_class: named(distribution_report(&ks, &classes)?),
        rung_histogram_by_difficulty: named(distribution_report(&ks, &diffs)?),
        expected_cost: e,
        delta_pct: delta,
    })
}

pub fn difficulty_name(d: Difficulty) -> &'static str {
    match d {
        Difficulty::Easy => "easy",
        Difficulty::Hard => "hard",
    }
}

pub const CSV_HEADER: &str = "policy,oracle_ap,mean_iou,expected_cost,delta_pct,n,config_hash";

pub fn csv_row(r: &EvalReport) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.3},{},{}",
        r.policy, r.oracle_ap, r.mean_iou, r.expected_cost, r.delta_pct, r.n, r.config_hash
    )
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn write_report(r: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let path = dir.join("report.json");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    let mut csv = format!("{CSV_HEADER},threshold,accuracy\n");
    for (t, a) in r.thresholds.iter().zip(&r.accuracy) {
        writeln!(csv, "{},{t:.2},{a:.6}", csv_row(r)).expect("string write");
    }
    let path = dir.join("report.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

/// Side-by-side table of several reports.
pub fn comparison_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        s.push_str(&csv_row(r));
        s.push('\n');
    }
    s
}

fn contour(m: &MaskGrid) -> Vec<bool> {
    let r = m.side();
    let on = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < r && (x as usize) < r && m.get(y as usize, x as usize) >= 0.5
    };
    (0..r * r)
        .map(|i| {
            let (y, x) = ((i / r) as isize, (i % r) as isize);
            on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1))
        })
        .collect()
}

/// One RGB PNG per instance: ground-truth contour in red, prediction in green.
pub fn write_overlays(preds: &[Prediction], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in preds {
        let (gt, pr) = (contour(&p.gt), contour(&p.mask));
        let mut rgb = Vec::with_capacity(gt.len() * 3);
        for (&a, &b) in gt.iter().zip(&pr) {
            rgb.extend_from_slice(&[if a { 255 } else { 0 }, if b { 255 } else { 0 }, 0]);
        }
        let side = p.gt.side() as u32;
        let path = dir.join(format!("inst_{:05}_k{}.png", p.id, p.rung));
        crate::mask::write_png(&path, side, side, png::ColorType::Rgb, &rgb)?;
    }
    Ok(())
}
