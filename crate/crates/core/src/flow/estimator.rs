use crate::error::{Error, Result};
use crate::linalg::{Mat, Rng};
use serde::{Deserialize, Serialize};

/// `(1 + γ − γt, γt/(1 + γ − γt))`: the leading factor of `∇L` and the
/// ratio of the Neumann series in `∇R`.
pub fn neumann_coefficients(gamma: f64, t: f64) -> (f64, f64) {
    let lead = 1.0 + gamma - gamma * t;
    (lead, gamma * t / lead)
}

/// Law of the series truncation index `Q ∈ {1, 2, …}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum QLaw {
    /// `P(Q = k) = s (1−s)^{k−1}`.
    Geometric { success: f64 },
}

impl Default for QLaw {
    fn default() -> Self {
        QLaw::Geometric { success: 0.5 }
    }
}

impl QLaw {
    /// `P(Q ≥ k)`; equals 1 for `k ≤ 1`.
    pub fn survival(&self, k: usize) -> f64 {
        match *self {
            QLaw::Geometric { success } => {
                if k <= 1 {
                    1.0
                } else {
                    (1.0 - success).powi(k as i32 - 1)
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        match *self {
            QLaw::Geometric { success } => {
                let mut k = 1;
                while rng.uniform() >= success {
                    k += 1;
                }
                k
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            QLaw::Geometric { success } if success > 0.0 && success < 1.0 => Ok(()),
            QLaw::Geometric { success } => Err(Error::invalid(format!(
                "geometric success probability {success} outside (0, 1)"
            ))),
        }
    }
}

/// Settings for the Russian-roulette log-determinant estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    #[serde(default)]
    pub q_law: QLaw,
    pub probe_count: usize,
    pub rng_seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            q_law: QLaw::default(),
            probe_count: 1,
            rng_seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probe_count == 0 {
            return Err(Error::invalid("estimator needs at least one probe"));
        }
        self.q_law.validate()
    }

    pub fn rng(&self) -> Rng {
        Rng::new(self.rng_seed)
    }
}

/// One probe `v ~ N(0, I)` and truncation index `q` per batch column.
pub(crate) struct ProbeDraw {
    /// `n x b` probe, row-major.
    pub v: Vec<f64>,
    q: Vec<usize>,
    law: QLaw,
}

impl ProbeDraw {
    pub fn sample(cfg: &EstimatorConfig, n: usize, b: usize, rng: &mut Rng) -> Self {
        let v = rng.normal_vec(n * b);
        let q = (0..b).map(|_| cfg.q_law.sample(rng)).collect();
        ProbeDraw { v, q, law: cfg.q_law }
    }

    pub fn q_max(&self) -> usize {
        self.q.iter().copied().max().unwrap_or(0)
    }

    /// `1 x b` weights `(−1)^{k+1} / (k P(Q≥k))` of `vᵀMᵏv`, zero where `q < k`.
    pub fn value_weight(&self, k: usize) -> Mat {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        let w = sign / (k as f64 * self.law.survival(k));
        self.masked(k, w)
    }

    /// `1 x b` weights `(−1)^k / P(Q≥k)` of `vᵀMᵏ (∂M) v`, zero where `q < k`.
    pub fn series_weight(&self, k: usize) -> Mat {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        self.masked(k, sign / self.law.survival(k))
    }

    fn masked(&self, k: usize, w: f64) -> Mat {
        Mat::from_fn(1, self.q.len(), |_, j| if self.q[j] >= k { w } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_survival_closed_form() {
        let law = QLaw::default();
        assert_eq!(law.survival(0), 1.0);
        assert_eq!(law.survival(1), 1.0);
        assert_eq!(law.survival(4), 0.125);
        let mut rng = Rng::new(3);
        let n = 200_000;
        let ge3 = (0..n).filter(|_| law.sample(&mut rng) >= 3).count() as f64 / n as f64;
        assert!((ge3 - 0.25).abs() < 0.005, "{ge3}");
    }

    #[test]
    fn unit_averagedness_reduces_to_plain_series() {
        let (lead, c) = neumann_coefficients(0.7, 1.0);
        assert_eq!(lead, 1.0);
        assert_eq!(c, 0.7);
        let (lead, c) = neumann_coefficients(1.0, 0.75);
        assert_eq!(lead, 1.25);
        assert!((c - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zero_probes_rejected() {
        let cfg = EstimatorConfig {
            probe_count: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let bad = EstimatorConfig {
            q_law: QLaw::Geometric { success: 1.0 },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
