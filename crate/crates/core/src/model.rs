//! Parameter set of the full model: backbone, ladder and (optionally) switch.

use crate::diff::{ParamStore, Real};
use crate::error::{Error, Result};
use crate::msm;
use crate::pyramid::{self, ModelConfig};

pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64, with_switch: bool) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut s = ParamStore::new(seed);
    pyramid::init_backbone(&mut s, cfg)?;
    pyramid::init_rfpn(&mut s, cfg)?;
    if with_switch {
        msm::init_msm(&mut s, cfg)?;
    }
    Ok(s)
}

/// Recovers the widths a parameter set was built with.
pub fn infer_config<T: Real>(s: &ParamStore<T>) -> Result<ModelConfig> {
    let dim = |name: &str, axis: usize| {
        s.get(name).map(|t| t.shape()[axis]).ok_or_else(|| Error::Data(format!("parameter `{name}` missing")))
    };
    let mut cfg = ModelConfig { channels: dim("backbone.stem.w", 0)?, ..ModelConfig::default() };
    if msm::has_msm(s) {
        cfg.msm_hidden = dim("msm.conv1.w", 0)?;
        cfg.msm_fc = dim("msm.fc1.w", 0)?;
    }
    Ok(cfg)
}

/// Share of all scalars that belong to the switch.
pub fn switch_fraction<T: Real>(s: &ParamStore<T>) -> f64 {
    s.count(Some("msm.")) as f64 / s.count(None) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn switch_is_a_small_share_of_the_default_model() {
        let s = init_params::<f32>(&ModelConfig::default(), 0, true).unwrap();
        let f = switch_fraction(&s);
        assert!(f > 0.0 && f < 0.05, "{f}");
    }

    #[test]
    fn config_round_trips_through_shapes() {
        let cfg = ModelConfig { channels: 12, msm_hidden: 5, msm_fc: 16 };
        let s = init_params::<f32>(&cfg, 1, true).unwrap();
        assert_eq!(infer_config(&s).unwrap(), cfg);
        let no_switch = init_params::<f32>(&cfg, 1, false).unwrap();
        assert_eq!(infer_config(&no_switch).unwrap().channels, 12);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::default();
        let a = init_params::<f32>(&cfg, 42, true).unwrap();
        let b = init_params::<f32>(&cfg, 42, true).unwrap();
        assert_eq!(a, b);
    }
}
