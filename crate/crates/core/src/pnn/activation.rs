use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A stable activation: 1-Lipschitz, monotone increasing, fixes 0.
///
/// These are exactly the scalar functions that are proximity operators of
/// a convex function minimized at 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "act", rename_all = "lowercase")]
pub enum StableActivation {
    /// `x` for `x > 0`, `alpha (e^x - 1)` otherwise. Requires `0 < alpha <= 1`.
    Elu { alpha: f64 },
    Tanh,
    Identity,
}

impl Default for StableActivation {
    fn default() -> Self {
        StableActivation::Elu { alpha: 1.0 }
    }
}

impl StableActivation {
    pub fn elu(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::invalid(format!(
                "ELU alpha must lie in (0, 1] to stay 1-Lipschitz, got {alpha}"
            )));
        }
        Ok(StableActivation::Elu { alpha })
    }

    pub fn name(&self) -> &'static str {
        match self {
            StableActivation::Elu { .. } => "elu",
            StableActivation::Tanh => "tanh",
            StableActivation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str, alpha: Option<f64>) -> Result<Self> {
        match name {
            "elu" => Self::elu(alpha.unwrap_or(1.0)),
            "tanh" => Ok(StableActivation::Tanh),
            "identity" => Ok(StableActivation::Identity),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            StableActivation::Elu { alpha } => Some(*alpha),
            _ => None,
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            StableActivation::Elu { alpha } => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
            StableActivation::Tanh => x.tanh(),
            StableActivation::Identity => x,
        }
    }

    /// Derivative of the given order (0 is the function itself). Orders up
    /// to 3 are supported, which covers differentiating a Jacobian once more.
    #[inline]
    pub fn derivative(&self, x: f64, order: u8) -> f64 {
        if order == 0 {
            return self.eval(x);
        }
        debug_assert!(order <= 3);
        match *self {
            StableActivation::Elu { alpha } => {
                if x > 0.0 {
                    if order == 1 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    alpha * x.exp()
                }
            }
            StableActivation::Tanh => {
                let t = x.tanh();
                let s = 1.0 - t * t;
                match order {
                    1 => s,
                    2 => -2.0 * t * s,
                    _ => s * (6.0 * t * t - 2.0),
                }
            }
            StableActivation::Identity => {
                if order == 1 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub const MAX_ACTIVATION_ORDER: u8 = 3;
