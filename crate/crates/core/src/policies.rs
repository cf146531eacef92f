//! Rung assignment policies: a fixed rung, the box-size rule, or the learned switch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff::{Bound, Graph, Real, Var};
use crate::error::{Error, Result};
use crate::msm::{self, SelectMode, SwitchDecision};
use crate::pyramid::NUM_RUNGS;
use crate::synth::{BBox, IMAGE_SIDE};

/// Index of the finest rung in the size rule.
pub const K0: f64 = 4.0;

/// Serialised as `fixed-K`, `size-based` or `dynamic`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Policy {
    Fixed(usize),
    SizeBased,
    Dynamic,
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        if let Policy::Fixed(k) = *self {
            fixed_select(k)?;
        }
        Ok(())
    }

    pub fn uses_switch(&self) -> bool {
        matches!(self, Policy::Dynamic)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Fixed(k) => write!(f, "fixed-{k}"),
            Policy::SizeBased => f.write_str("size-based"),
            Policy::Dynamic => f.write_str("dynamic"),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    /// Accepts `fixed-K`, `size-based` and `dynamic`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "size-based" | "size_based" => Ok(Policy::SizeBased),
            "dynamic" => Ok(Policy::Dynamic),
            _ => {
                let k = s
                    .strip_prefix("fixed-")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))?;
                Ok(Policy::Fixed(fixed_select(k).map_err(|e| Error::Config(e.to_string()))?))
            }
        }
    }
}

impl TryFrom<String> for Policy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Policy> for String {
    fn from(p: Policy) -> Self {
        p.to_string()
    }
}

/// `floor(k0 + log2(sqrt(wh) / sqrt(w0 h0)))`, clamped to `[1, 4]`.
pub fn size_based_select(w: f64, h: f64, w0: f64, h0: f64) -> usize {
    let raw = K0 + ((w * h).sqrt() / (w0 * h0).sqrt()).log2();
    (raw.floor().max(1.0) as usize).min(NUM_RUNGS)
}

/// Size rule for a box in a 224x224 image.
pub fn size_based_for(bbox: &BBox) -> usize {
    let s = IMAGE_SIDE as f64;
    size_based_select(bbox.w as f64, bbox.h as f64, s, s)
}

pub fn fixed_select(k: usize) -> Result<usize> {
    if (1..=NUM_RUNGS).contains(&k) {
        Ok(k)
    } else {
        Err(Error::InvalidArgument(format!("rung {k} outside 1..={NUM_RUNGS}")))
    }
}

/// Switch decision for one RoI feature.
pub fn dynamic_select<T: Real>(g: &mut Graph<T>, p: &Bound, roi: Var, mode: SelectMode) -> Result<SwitchDecision> {
    let probs = msm::msm_forward(g, p, roi)?;
    msm::select(g, probs, mode)
}
