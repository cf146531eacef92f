//! Mask switch: a small classifier over the 14x14 RoI crop that picks one of
//! the four rungs, trained through a Gumbel-Softmax relaxation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{argmax, Bound, Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::mask::RUNG_SIDES;
use crate::pyramid::{ModelConfig, NUM_RUNGS};

/// Spatial side after the two stride-2 convs (14 -> 7 -> 4).
const POOLED: usize = 4;

fn se_width(c: usize) -> usize {
    (c / 4).max(1)
}

pub fn init_msm<T: Real>(s: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.channels;
    let r = se_width(c);
    let h = cfg.msm_hidden;
    let fc = cfg.msm_fc;
    s.init_fan_in("msm.se.fc1.w", &[r, c], c)?;
    s.init_zeros("msm.se.fc1.b", &[r])?;
    s.init_fan_in_gain("msm.se.fc2.w", &[c, r], r, 1.0)?;
    s.init_zeros("msm.se.fc2.b", &[c])?;
    s.init_fan_in("msm.conv1.w", &[h, c, 3, 3], c * 9)?;
    s.init_zeros("msm.conv1.b", &[h])?;
    s.init_fan_in("msm.conv2.w", &[h, h, 3, 3], h * 9)?;
    s.init_zeros("msm.conv2.b", &[h])?;
    let flat = h * POOLED * POOLED;
    s.init_fan_in("msm.fc1.w", &[fc, flat], flat)?;
    s.init_zeros("msm.fc1.b", &[fc])?;
    s.init_fan_in_gain("msm.fc2.w", &[NUM_RUNGS, fc], fc, 1.0)?;
    s.init_zeros("msm.fc2.b", &[NUM_RUNGS])
}

/// Whether `s` carries switch weights.
pub fn has_msm<T: Real>(s: &ParamStore<T>) -> bool {
    s.names().any(|n| n.starts_with("msm."))
}

/// Squeeze-excite, two stride-2 convs, two fully-connected layers, softmax.
pub fn msm_forward<T: Real>(g: &mut Graph<T>, p: &Bound, roi: Var) -> Result<Var> {
    let side = RUNG_SIDES[0];
    match *g.shape(roi) {
        [_, h, w] if h == side && w == side => {}
        ref s => return Err(Error::shape("msm_forward", format!("RoI feature must be [C,{side},{side}], got {s:?}"))),
    }
    let squeezed = g.global_avg_pool(roi)?;
    let z = g.linear(squeezed, p["msm.se.fc1.w"], p["msm.se.fc1.b"])?;
    let z = g.relu(z);
    let z = g.linear(z, p["msm.se.fc2.w"], p["msm.se.fc2.b"])?;
    let gate = g.sigmoid(z);
    let x = g.channel_scale(roi, gate)?;
    let x = g.conv2d(x, p["msm.conv1.w"], Some(p["msm.conv1.b"]), 2, 1)?;
    let x = g.relu(x);
    let x = g.conv2d(x, p["msm.conv2.w"], Some(p["msm.conv2.b"]), 2, 1)?;
    let x = g.relu(x);
    let n = g.value(x).numel();
    let x = g.reshape(x, &[n])?;
    let x = g.linear(x, p["msm.fc1.w"], p["msm.fc1.b"])?;
    let x = g.relu(x);
    let logits = g.linear(x, p["msm.fc2.w"], p["msm.fc2.b"])?;
    g.softmax(logits)
}

/// Standard Gumbel draws `-ln(-ln u)`, `u ~ U(0,1)`.
pub fn gumbel_noise(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Noise stream for one instance at one step; independent of batch order.
pub fn noise_rng(seed: u64, instance: u64, step: u64) -> ChaCha8Rng {
    let mut z = seed;
    for v in [instance, step] {
        z = splitmix(z ^ splitmix(v));
    }
    ChaCha8Rng::seed_from_u64(z)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Relaxed sample `softmax((ln p + g) / tau)` with the noise held fixed.
pub fn gumbel_sample<T: Real>(g: &mut Graph<T>, probs: Var, tau: f64, noise: &[f64]) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("gumbel_sample: temperature must be > 0, got {tau}")));
    }
    let k = g.value(probs).numel();
    if noise.len() != k {
        return Err(Error::shape("gumbel_sample", format!("{} noise draws for {k} classes", noise.len())));
    }
    let logp = g.ln(probs);
    let noise = g.constant(Tensor::new(&[k], noise.iter().map(|&v| T::of(v)).collect())?);
    let z = g.add(logp, noise)?;
    let z = g.scale(z, 1.0 / tau);
    g.softmax(z)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SelectMode {
    /// `k = argmax P`, lowest index on ties.
    InferArgmax,
    /// Gumbel draw from the per-instance stream, then straight-through.
    TrainSampled { tau: f64, seed: u64, instance: u64, step: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct SwitchDecision {
    pub probs: Var,
    /// Relaxed vector; present only in training mode.
    pub relaxed: Option<Var>,
    /// One-hot selection used to gate the loss terms.
    pub hard: Var,
    /// Chosen rung, 1-based.
    pub k: usize,
}

pub fn select<T: Real>(g: &mut Graph<T>, probs: Var, mode: SelectMode) -> Result<SwitchDecision> {
    match mode {
        SelectMode::InferArgmax => {
            let n = g.value(probs).numel();
            let idx = argmax(g.data(probs));
            let hard = g.constant(Tensor::from_fn(&[n], |i| if i == idx { T::one() } else { T::zero() }));
            Ok(SwitchDecision { probs, relaxed: None, hard, k: idx + 1 })
        }
        SelectMode::TrainSampled { tau, seed, instance, step } => {
            let n = g.value(probs).numel();
            let noise = gumbel_noise(&mut noise_rng(seed, instance, step), n);
            let relaxed = gumbel_sample(g, probs, tau, &noise)?;
            let hard = g.straight_through(relaxed);
            let k = argmax(g.data(hard)) + 1;
            Ok(SwitchDecision { probs, relaxed: Some(relaxed), hard, k })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(g: &mut Graph<f64>, p: &[f64]) -> Var {
        g.constant(Tensor::new(&[p.len()], p.to_vec()).unwrap())
    }

    #[test]
    fn zero_input_gives_uniform_probabilities() {
        let cfg = ModelConfig { channels: 8, ..ModelConfig::default() };
        let mut s = ParamStore::<f32>::new(4);
        init_msm(&mut s, &cfg).unwrap();
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let roi = g.constant(Tensor::zeros(&[8, 14, 14]));
        let out = msm_forward(&mut g, &p, roi).unwrap();
        assert!(g.data(out).iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let bad = g.constant(Tensor::zeros(&[8, 28, 28]));
        assert!(msm_forward(&mut g, &p, bad).is_err());
    }

    #[test]
    fn relaxed_sample_is_a_simplex_point() {
        let mut g = Graph::<f64>::new();
        let p = probs(&mut g, &[0.1, 0.2, 0.3, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let noise = gumbel_noise(&mut rng, 4);
            let y = gumbel_sample(&mut g, p, 0.7, &noise).unwrap();
            assert!((g.data(y).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(gumbel_sample(&mut g, p, 0.0, &[0.0; 4]).is_err());
        assert!(gumbel_sample(&mut g, p, -1.0, &[0.0; 4]).is_err());
    }

    #[test]
    fn relaxed_entropy_falls_with_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<Vec<f64>> = (0..1000).map(|_| gumbel_noise(&mut rng, 4)).collect();
        let mean_entropy = |tau: f64| {
            let mut total = 0.0;
            for noise in &draws {
                let mut g = Graph::<f64>::new();
                let p = probs(&mut g, &[0.35, 0.34, 0.21, 0.10]);
                let y = gumbel_sample(&mut g, p, tau, noise).unwrap();
                total -= g.data(y).iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
            }
            total / draws.len() as f64
        };
        let h: Vec<f64> = [1.0, 0.5, 0.1, 0.01].into_iter().map(mean_entropy).collect();
        assert!(h.windows(2).all(|w| w[0] > w[1]), "{h:?}");
    }

    #[test]
    fn low_temperature_is_nearly_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut total = 0.0;
        for _ in 0..1000 {
            let mut g = Graph::<f64>::new();
            let p = probs(&mut g, &[0.7, 0.1, 0.1, 0.1]);
            let noise = gumbel_noise(&mut rng, 4);
            let y = gumbel_sample(&mut g, p, 0.01, &noise).unwrap();
            total += g.data(y).iter().copied().fold(0.0, f64::max);
        }
        assert!(total / 1000.0 > 0.99);
    }

    #[test]
    fn infer_mode_argmax_and_ties() {
        let mut g = Graph::<f64>::new();
        let p = probs(&mut g, &[0.1, 0.2, 0.3, 0.4]);
        let d = select(&mut g, p, SelectMode::InferArgmax).unwrap();
        assert_eq!(d.k, 4);
        assert_eq!(g.data(d.hard), [0.0, 0.0, 0.0, 1.0]);
        let u = probs(&mut g, &[0.25; 4]);
        assert_eq!(select(&mut g, u, SelectMode::InferArgmax).unwrap().k, 1);
    }

    #[test]
    fn train_mode_is_reproducible() {
        let mode = SelectMode::TrainSampled { tau: 0.5, seed: 9, instance: 17, step: 3 };
        let run = || {
            let mut g = Graph::<f64>::new();
            let p = probs(&mut g, &[0.25; 4]);
            let d = select(&mut g, p, mode).unwrap();
            (d.k, g.data(d.relaxed.unwrap()).to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn noise_streams_differ_by_instance_and_step() {
        let a = gumbel_noise(&mut noise_rng(1, 2, 3), 4);
        assert_ne!(a, gumbel_noise(&mut noise_rng(1, 3, 2), 4));
        assert_ne!(a, gumbel_noise(&mut noise_rng(1, 2, 4), 4));
        assert_eq!(a, gumbel_noise(&mut noise_rng(1, 2, 3), 4));
    }
}
