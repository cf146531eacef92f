//! Finite-difference checks over every differentiable primitive and the
//! composite blocks built from them. Shared by the gradcheck and acceptance
//! targets.

use std::time::{Duration, Instant};

use maskswitch::diff::{grad_check, Bound, GradCheckOptions, Graph, Mismatch, ParamStore, Tensor, Var};
use maskswitch::msm::{gumbel_noise, gumbel_sample, init_msm, msm_forward, noise_rng};
use maskswitch::pyramid::{
    backbone_ifpn, fam_fuse, init_backbone, init_rfpn, rfpn_forward, ModelConfig, PyramidFeatures,
};
use maskswitch::synth::{BBox, IMAGE_SIDE};
use maskswitch::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Entries sampled per parameter tensor in the full ladder and the backbone.
const NETWORK_ENTRIES: usize = 3;
/// Soft-edge values below this (|Laplacian| < 4e-4) are treated as sitting
/// on the kink of |.|; one 1e-5 step moves a Laplacian by far less.
const EDGE_KINK_MARGIN: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

pub struct Suite {
    pub cases: Vec<CaseResult>,
    pub elapsed: Duration,
}

impl Suite {
    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !(c.max_rel_err < TOL)).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output entry carries a
/// distinct weight into the scalar objective.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

/// `project` restricted to the entries flagged in `keep`.
fn project_where(g: &mut Graph<f64>, out: Var, seed: u64, keep: &[bool]) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut r = uniform(&mut rng, &shape, -1.0, 1.0);
    r.data_mut().iter_mut().zip(keep).filter(|(_, &k)| !k).for_each(|(v, _)| *v = 0.0);
    let r = g.constant(r);
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

struct Case {
    params: ParamStore<f64>,
    max_entries: Option<usize>,
}

impl Case {
    fn new() -> Self {
        Self { params: ParamStore::new(0), max_entries: None }
    }

    fn with(mut self, name: &str, t: Tensor<f64>) -> Self {
        self.params.insert(name, t).expect("unique name");
        self
    }
}

fn run<F>(out: &mut Vec<CaseResult>, name: &str, seed: u64, case: Case, f: F) -> Result<()>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let opts = GradCheckOptions { max_entries: case.max_entries, seed, ..GradCheckOptions::default() };
    let objective = |g: &mut Graph<f64>, p: &Bound| {
        let y = f(g, p)?;
        if g.value(y).numel() == 1 {
            Ok(y)
        } else {
            project(g, y, seed)
        }
    };
    let report = grad_check(&case.params, objective, &opts)?;
    out.push(CaseResult {
        name: name.to_owned(),
        seed,
        max_rel_err: report.max_rel_err,
        checked: report.checked,
        worst: report.worst,
    });
    Ok(())
}

fn primitives(out: &mut Vec<CaseResult>, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (dim(&mut rng, 1, 3), dim(&mut rng, 3, 8), dim(&mut rng, 3, 8));
    let n = dim(&mut rng, 2, 8);
    let v = |rng: &mut ChaCha8Rng| uniform(rng, &[n], -2.0, 2.0);

    let ab = || Case::new();
    let (a, b) = (v(&mut rng), v(&mut rng));
    run(out, "add", seed, ab().with("a", a.clone()).with("b", b.clone()), |g, p| g.add(p["a"], p["b"]))?;
    run(out, "sub", seed, ab().with("a", a.clone()).with("b", b.clone()), |g, p| g.sub(p["a"], p["b"]))?;
    run(out, "mul", seed, ab().with("a", a.clone()).with("b", b.clone()), |g, p| g.mul(p["a"], p["b"]))?;
    run(out, "dot", seed, ab().with("a", a.clone()).with("b", b.clone()), |g, p| g.dot(p["a"], p["b"]))?;
    run(out, "scale", seed, ab().with("a", a.clone()), |g, p| Ok(g.scale(p["a"], -1.7)))?;
    run(out, "add_scalar", seed, ab().with("a", a.clone()), |g, p| Ok(g.add_scalar(p["a"], 0.3)))?;
    run(out, "relu", seed, ab().with("a", a.clone()), |g, p| Ok(g.relu(p["a"])))?;
    run(out, "sigmoid", seed, ab().with("a", a.clone()), |g, p| Ok(g.sigmoid(p["a"])))?;
    run(out, "exp", seed, ab().with("a", a.clone()), |g, p| Ok(g.exp(p["a"])))?;
    run(out, "abs", seed, ab().with("a", a.clone()), |g, p| Ok(g.abs(p["a"])))?;
    run(out, "clamp", seed, ab().with("a", a.clone()), |g, p| Ok(g.clamp(p["a"], -1.0, 1.0)))?;
    run(out, "ln", seed, ab().with("a", uniform(&mut rng, &[n], 0.1, 3.0)), |g, p| Ok(g.ln(p["a"])))?;
    run(out, "sum", seed, ab().with("a", a.clone()), |g, p| {
        let s = g.sum(p["a"]);
        g.mul(s, s)
    })?;
    run(out, "mean", seed, ab().with("a", a.clone()), |g, p| {
        let s = g.mean(p["a"]);
        g.mul(s, s)
    })?;
    run(out, "softmax", seed, ab().with("a", uniform(&mut rng, &[n], -4.0, 4.0)), |g, p| g.softmax(p["a"]))?;
    run(out, "index_stack", seed, ab().with("a", a.clone()), |g, p| {
        let picks = (0..n).rev().map(|i| g.index(p["a"], i)).collect::<Result<Vec<_>>>()?;
        let sq: Vec<Var> = picks.iter().map(|&x| g.mul(x, x)).collect::<Result<_>>()?;
        g.stack(&sq)
    })?;
    run(out, "reshape", seed, ab().with("a", uniform(&mut rng, &[c, h, w], -1.0, 1.0)), |g, p| {
        let r = g.reshape(p["a"], &[c * h * w])?;
        Ok(g.sigmoid(r))
    })?;
    let terms = uniform(&mut rng, &[4], -1.0, 1.0);
    run(out, "gate", seed, ab().with("w", uniform(&mut rng, &[4], -1.0, 1.0)).with("t", terms), |g, p| {
        let ts = (0..4).map(|i| g.index(p["t"], i)).collect::<Result<Vec<_>>>()?;
        let sq: Vec<Var> = ts.iter().map(|&x| g.mul(x, x)).collect::<Result<_>>()?;
        g.gate(p["w"], &sq)
    })?;
    let target = Tensor::from_fn(&[h, w], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    run(out, "bce", seed, ab().with("z", uniform(&mut rng, &[h, w], -3.0, 3.0)), move |g, p| {
        let s = g.sigmoid(p["z"]);
        g.bce(s, &target, 1e-7)
    })?;
    let (i, o) = (dim(&mut rng, 2, 8), dim(&mut rng, 2, 8));
    run(
        out,
        "linear",
        seed,
        ab().with("x", uniform(&mut rng, &[i], -1.0, 1.0))
            .with("w", uniform(&mut rng, &[o, i], -1.0, 1.0))
            .with("b", uniform(&mut rng, &[o], -1.0, 1.0)),
        |g, p| g.linear(p["x"], p["w"], p["b"]),
    )?;
    let x = uniform(&mut rng, &[c, h, w], -1.0, 1.0);
    run(out, "global_avg_pool", seed, ab().with("x", x.clone()), |g, p| g.global_avg_pool(p["x"]))?;
    run(
        out,
        "channel_scale",
        seed,
        ab().with("x", x.clone()).with("s", uniform(&mut rng, &[c], -1.0, 1.0)),
        |g, p| g.channel_scale(p["x"], p["s"]),
    )?;
    let c2 = dim(&mut rng, 1, 3);
    run(
        out,
        "concat_channels",
        seed,
        ab().with("x", x.clone()).with("y", uniform(&mut rng, &[c2, h, w], -1.0, 1.0)),
        |g, p| g.concat_channels(p["x"], p["y"]),
    )?;
    run(out, "upsample_nearest2x", seed, ab().with("x", x.clone()), |g, p| g.upsample_nearest2x(p["x"]))?;
    run(out, "upsample_bilinear2x", seed, ab().with("x", x.clone()), |g, p| g.upsample_bilinear2x(p["x"]))?;
    run(out, "laplacian", seed, ab().with("x", uniform(&mut rng, &[h, w], -1.0, 1.0)), |g, p| g.laplacian(p["x"]))?;

    // Batched conv on the 2x3x8x8 shape plus a random strided/padded one.
    run(
        out,
        "conv2d",
        seed,
        ab().with("x", uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0))
            .with("w", uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0))
            .with("b", uniform(&mut rng, &[2], -1.0, 1.0)),
        |g, p| g.conv2d(p["x"], p["w"], Some(p["b"]), 1, 1),
    )?;
    let (k, stride, pad) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 2), dim(&mut rng, 0, 1));
    let o = dim(&mut rng, 1, 3);
    run(
        out,
        "conv2d_strided",
        seed,
        ab().with("x", x.clone())
            .with("w", uniform(&mut rng, &[o, c, k, k], -1.0, 1.0))
            .with("b", uniform(&mut rng, &[o], -1.0, 1.0)),
        move |g, p| g.conv2d(p["x"], p["w"], Some(p["b"]), stride, pad),
    )?;

    // Sample points are kept away from integer coordinates, where the
    // bilinear weights have a kink.
    let pn = dim(&mut rng, 2, 8);
    let pts = Tensor::from_fn(&[pn, 2], |j| {
        let side = if j % 2 == 0 { h } else { w };
        rng.random_range(0..side - 1) as f64 + rng.random_range(0.1..0.9)
    });
    run(out, "bilinear_sample", seed, ab().with("f", x.clone()).with("pts", pts), |g, p| {
        g.bilinear_sample(p["f"], p["pts"])
    })?;
    let offsets =
        Tensor::from_fn(&[18, h, w], |_| rng.random_range(0.1..0.9) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
    run(
        out,
        "deform_conv",
        seed,
        ab().with("x", x)
            .with("w", uniform(&mut rng, &[o, c, 3, 3], -1.0, 1.0))
            .with("b", uniform(&mut rng, &[o], -1.0, 1.0))
            .with("off", offsets),
        |g, p| g.deform_conv(p["x"], p["w"], Some(p["b"]), p["off"]),
    )?;
    Ok(())
}

fn small_model() -> ModelConfig {
    ModelConfig { channels: 4, msm_hidden: 2, msm_fc: 6 }
}

/// Overwrites every parameter with uniform noise of the given scale, so zero
/// initialised heads and offset convs carry non-trivial gradients.
fn randomise(s: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in s.iter_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn signed(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let v = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        v
    } else {
        -v
    }
}

/// Draws a point where the full networks are differentiable well beyond the
/// finite-difference step. With ~1e6 ReLUs and deformable sampling
/// locations, a generic random point puts some of them within 1e-5 of a
/// kink, and the central difference then measures the average of two
/// one-sided slopes instead of the gradient. Here every rectified
/// pre-activation stays at least ~0.25 from zero (live and dead channels
/// alike) and every sampling offset keeps its fractional part in [0.3, 0.7].
fn away_from_kinks(s: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in s.iter_mut() {
        let rectified = name.starts_with("rfpn.block")
            || ["stem", "c3", "c4", "c5"].iter().any(|l| name.starts_with(&format!("backbone.{l}.")));
        let offset = name.contains(".off");
        let bias = name.ends_with(".b");
        for v in t.data_mut() {
            *v = match (rectified, offset, bias) {
                (true, _, true) => signed(rng, 0.5, 1.0),
                (true, _, false) => rng.random_range(-0.005..0.005),
                (_, true, true) => signed(rng, 0.3, 0.7),
                (_, true, false) => rng.random_range(-0.002..0.002),
                _ => rng.random_range(-0.3..0.3),
            };
        }
    }
}

fn blocks(out: &mut Vec<CaseResult>, seed: u64) -> Result<()> {
    let cfg = small_model();
    let c = cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);

    // FAM block at an 8x8 rung.
    let mut fam = ParamStore::<f64>::new(seed);
    init_rfpn(&mut fam, &cfg)?;
    let mut only = ParamStore::<f64>::new(seed);
    for (n, t) in fam.iter().filter(|(n, _)| n.starts_with("rfpn.fam2")) {
        only.insert(n, t.clone())?;
    }
    randomise(&mut only, &mut rng, 0.3);
    let mut case = Case { params: only, max_entries: None };
    case = case
        .with("up", uniform(&mut rng, &[c, 8, 8], -1.0, 1.0))
        .with("crop", uniform(&mut rng, &[c, 8, 8], -1.0, 1.0));
    run(out, "fam_block", seed, case, |g, p| fam_fuse(g, p, 2, p["up"], p["crop"]))?;

    // Full ladder to depth 4 from a random pyramid.
    let mut ladder = ParamStore::<f64>::new(seed);
    init_rfpn(&mut ladder, &cfg)?;
    away_from_kinks(&mut ladder, &mut rng);
    let side = IMAGE_SIDE / 4;
    for l in 2..=5 {
        let s = side >> (l - 2);
        ladder.insert(format!("pyr.p{l}"), uniform(&mut rng, &[c, s, s], -1.0, 1.0))?;
    }
    let bbox = BBox {
        x: rng.random_range(10..60),
        y: rng.random_range(10..60),
        w: rng.random_range(40..150),
        h: rng.random_range(40..150),
    };
    let ladder_of = move |g: &mut Graph<f64>, p: &Bound| {
        let pyr = PyramidFeatures { levels: [p["pyr.p2"], p["pyr.p3"], p["pyr.p4"], p["pyr.p5"]] };
        rfpn_forward(g, p, &pyr, &bbox, 4)
    };
    // Edge pixels whose Laplacian sits at the |.| kink at this point get no
    // weight in the objective; every other pixel keeps its random weight.
    let keep: Vec<Vec<bool>> = {
        let mut g = Graph::<f64>::new();
        let bound = ladder.bind(&mut g);
        let lad = ladder_of(&mut g, &bound)?;
        lad.edges.iter().map(|&e| g.data(e).iter().map(|&v| v > EDGE_KINK_MARGIN).collect()).collect()
    };
    let case = Case { params: ladder, max_entries: Some(NETWORK_ENTRIES) };
    run(out, "rfpn_forward", seed, case, move |g, p| {
        let lad = ladder_of(g, p)?;
        let mut total = None;
        for (k, (&m, &e)) in lad.masks.iter().zip(&lad.edges).enumerate() {
            let a = project(g, m, seed + k as u64)?;
            let b = project_where(g, e, seed + 10 + k as u64, &keep[k])?;
            let s = g.add(a, b)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        Ok(total.expect("depth >= 1"))
    })?;

    // Switch module from a 14x14 crop.
    let mut sw = ParamStore::<f64>::new(seed);
    init_msm(&mut sw, &cfg)?;
    randomise(&mut sw, &mut rng, 0.5);
    sw.insert("roi", uniform(&mut rng, &[c, 14, 14], -1.0, 1.0))?;
    let case = Case { params: sw, max_entries: Some(6) };
    run(out, "msm_forward", seed, case, |g, p| msm_forward(g, p, p["roi"]))?;

    // Soft Gumbel path with frozen noise, from logits through the softmax.
    let noise = gumbel_noise(&mut noise_rng(seed, 7, 3), 4);
    let tau = rng.random_range(0.1..1.0);
    let case = Case::new().with("logits", uniform(&mut rng, &[4], -2.0, 2.0));
    run(out, "gumbel_soft", seed, case, move |g, p| {
        let probs = g.softmax(p["logits"])?;
        gumbel_sample(g, probs, tau, &noise)
    })?;
    Ok(())
}

fn backbone(out: &mut Vec<CaseResult>, seed: u64) -> Result<()> {
    let cfg = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbacb);
    let mut s = ParamStore::<f64>::new(seed);
    init_backbone(&mut s, &cfg)?;
    away_from_kinks(&mut s, &mut rng);
    s.insert("image", uniform(&mut rng, &[3, IMAGE_SIDE, IMAGE_SIDE], 0.0, 1.0))?;
    let case = Case { params: s, max_entries: Some(NETWORK_ENTRIES) };
    run(out, "backbone_ifpn", seed, case, move |g, p| {
        let pyr = backbone_ifpn(g, p, p["image"])?;
        let mut total = None;
        for (k, &l) in pyr.levels.iter().enumerate() {
            let v = project(g, l, seed + 20 + k as u64)?;
            total = Some(match total {
                None => v,
                Some(t) => g.add(t, v)?,
            });
        }
        Ok(total.expect("four levels"))
    })
}

/// Primitives over all five seeds; the composite blocks and the backbone at
/// sampled entries over the same seeds.
pub fn run_suite() -> Result<Suite> {
    let start = Instant::now();
    let mut cases = Vec::new();
    for seed in SEEDS {
        blocks(&mut cases, seed)?;
        backbone(&mut cases, seed)?;
    }
    Ok(Suite { cases, elapsed: start.elapsed() })
}
