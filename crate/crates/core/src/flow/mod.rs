//! Proximal residual flows: γ-scaled PNN residual blocks with activation
//! normalization, fixed-point inversion and log-determinants.

mod actnorm;
mod block;
mod estimator;

pub use actnorm::ActNorm;
pub use block::{BlockVars, InversionTrace, ResidualBlock, INVERT_MAX_ITER, INVERT_TOL};
pub use estimator::{neumann_coefficients, EstimatorConfig, QLaw};

use crate::diff::{Recorded, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{lu_logabsdet, Mat, Rng};
use crate::pnn::{ParamMode, PolarSettings, Pnn, StableActivation};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Points per work item when batches are split for parallel evaluation.
const CHUNK: usize = 128;

/// Fixed-point solver settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvertSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InvertSettings {
    fn default() -> Self {
        InvertSettings {
            tol: INVERT_TOL,
            max_iter: INVERT_MAX_ITER,
        }
    }
}

/// How block log-determinants are computed during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogDetMode {
    #[default]
    Exact,
    Estimator,
}

/// Shape of a randomly initialized flow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Architecture {
    pub dim: usize,
    pub cond_dim: usize,
    pub blocks: usize,
    pub widen_p: usize,
    pub hidden: usize,
    pub kappa: usize,
    pub gamma: f64,
    pub activation: StableActivation,
}

/// `𝒯 = L_K ∘ … ∘ L_1` with a standard normal base on `R^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxFlow {
    pub blocks: Vec<ResidualBlock>,
    dim: usize,
    cond_dim: usize,
}

/// Recorded log-density of a batch.
#[derive(Clone, Debug)]
pub struct RecordedDensity {
    /// `1 x b` log-densities.
    pub log_density: Var,
    pub latent: Var,
    pub penalty: Option<Var>,
    pub blocks: Vec<BlockVars>,
}

pub fn standard_normal_logpdf(z: &Mat) -> Vec<f64> {
    let c = -0.5 * z.rows() as f64 * (2.0 * std::f64::consts::PI).ln();
    (0..z.cols())
        .map(|k| c - 0.5 * (0..z.rows()).map(|i| z[(i, k)] * z[(i, k)]).sum::<f64>())
        .collect()
}

impl ProxFlow {
    pub fn new(dim: usize, blocks: Vec<ResidualBlock>) -> Result<Self> {
        Self::assemble(dim, 0, blocks)
    }

    pub(crate) fn assemble(dim: usize, cond_dim: usize, blocks: Vec<ResidualBlock>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("flow dimension must be positive"));
        }
        for (k, b) in blocks.iter().enumerate() {
            if b.dim() != dim || b.cond_dim() != cond_dim {
                return Err(Error::shape(
                    "ProxFlow",
                    format!(
                        "block {k} is ({}, {}), flow is ({dim}, {cond_dim})",
                        b.dim(),
                        b.cond_dim()
                    ),
                ));
            }
        }
        Ok(ProxFlow {
            blocks,
            dim,
            cond_dim,
        })
    }

    /// Random blocks per `arch`; actnorms start uninitialized unless
    /// `identity_actnorm` is set.
    pub fn random(arch: &Architecture, identity_actnorm: bool, rng: &mut Rng) -> Result<Self> {
        let blocks = (0..arch.blocks)
            .map(|_| {
                let phi = Pnn::random(
                    arch.dim + arch.cond_dim,
                    arch.widen_p,
                    arch.hidden,
                    arch.kappa,
                    arch.activation,
                    rng,
                )?;
                let an = if identity_actnorm {
                    ActNorm::identity(arch.dim)
                } else {
                    ActNorm::uninitialized(arch.dim)
                };
                ResidualBlock::with_condition(arch.gamma, phi, an, arch.cond_dim)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(arch.dim, arch.cond_dim, blocks)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    fn check(&self, cond: Option<&Mat>, x: &Mat) -> Result<()> {
        if x.rows() != self.dim {
            return Err(Error::shape(
                "flow",
                format!("points have {} rows, flow dimension is {}", x.rows(), self.dim),
            ));
        }
        match (cond, self.cond_dim) {
            (None, 0) => Ok(()),
            (Some(y), d) if d > 0 && y.rows() == d && y.cols() == x.cols() => Ok(()),
            _ => Err(Error::shape(
                "flow",
                format!("condition does not match cond_dim {}", self.cond_dim),
            )),
        }
    }

    pub(crate) fn forward_cond(&self, cond: Option<&Mat>, x: &Mat) -> Result<Mat> {
        self.check(cond, x)?;
        let mut u = x.clone();
        for (k, b) in self.blocks.iter().enumerate() {
            u = b.forward_cond(cond, &u)?;
            if !u.is_finite() {
                return Err(Error::NonFinite { block: k });
            }
        }
        Ok(u)
    }

    fn log_density_chunk(&self, cond: Option<&Mat>, x: &Mat) -> Result<(Mat, Vec<f64>)> {
        let mut u = x.clone();
        let mut total = vec![0.0; x.cols()];
        for (k, b) in self.blocks.iter().enumerate() {
            let ld = b.logdet_exact_cond(cond, &u)?;
            u = b.forward_cond(cond, &u)?;
            if !u.is_finite() || ld.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { block: k });
            }
            for (t, l) in total.iter_mut().zip(ld) {
                *t += l;
            }
        }
        for (t, base) in total.iter_mut().zip(standard_normal_logpdf(&u)) {
            *t += base;
        }
        Ok((u, total))
    }

    /// `(𝒯(x), log p(x))` with exact block log-determinants.
    pub(crate) fn log_density_cond(&self, cond: Option<&Mat>, x: &Mat) -> Result<(Mat, Vec<f64>)> {
        self.check(cond, x)?;
        let b = x.cols();
        if b <= CHUNK {
            return self.log_density_chunk(cond, x);
        }
        let starts: Vec<usize> = (0..b).step_by(CHUNK).collect();
        let parts = starts
            .par_iter()
            .map(|&s| {
                let len = CHUNK.min(b - s);
                let xc = x.col_slice(s, len);
                let yc = cond.map(|y| y.col_slice(s, len));
                self.log_density_chunk(yc.as_ref(), &xc)
            })
            .collect::<Result<Vec<_>>>()?;
        let z = Mat::hstack(&parts.iter().map(|p| &p.0).collect::<Vec<_>>())?;
        Ok((z, parts.into_iter().flat_map(|p| p.1).collect()))
    }

    pub(crate) fn inverse_cond(&self, cond: Option<&Mat>, z: &Mat, s: InvertSettings) -> Result<Mat> {
        self.check(cond, z)?;
        let mut x = z.clone();
        for b in self.blocks.iter().rev() {
            x = b.invert_cond(cond, &x, s.tol, s.max_iter, None)?;
        }
        Ok(x)
    }

    pub(crate) fn jacobians_cond(&self, cond: Option<&Mat>, x: &Mat) -> Result<Vec<Mat>> {
        self.check(cond, x)?;
        let mut tape = Tape::new();
        let yv = cond.map(|y| tape.leaf(y.clone()));
        let xv = tape.leaf(x.clone());
        let mut u = xv;
        for b in &self.blocks {
            let vars = b.record_params(&mut tape, ParamMode::Frozen, PolarSettings::default())?;
            let r = b.record_residual(&mut tape, &vars, yv, u);
            u = b.record_actnorm(&mut tape, &vars, r);
        }
        Recorded::new(tape, xv, u).batch_jacobians()
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        self.forward_cond(None, x)
    }

    /// Latents and per-point log-densities of the columns of `x`.
    pub fn log_density(&self, x: &Mat) -> Result<(Mat, Vec<f64>)> {
        self.log_density_cond(None, x)
    }

    pub fn inverse(&self, z: &Mat, s: InvertSettings) -> Result<Mat> {
        self.inverse_cond(None, z, s)
    }

    /// `count` draws of `𝒯⁻¹(z)`, `z ~ N(0, I)`, as columns.
    pub fn sample(&self, count: usize, rng: &mut Rng, s: InvertSettings) -> Result<Mat> {
        let z = rng.normal_mat(self.dim, count);
        self.inverse(&z, s)
    }

    /// Per-point Jacobians of the whole flow.
    pub fn jacobians(&self, x: &Mat) -> Result<Vec<Mat>> {
        self.jacobians_cond(None, x)
    }

    /// `log|det ∇𝒯|` per point from the whole-flow Jacobian.
    pub fn logdet_whole(&self, x: &Mat) -> Result<Vec<f64>> {
        self.jacobians(x)?
            .iter()
            .map(|j| Ok(lu_logabsdet(j)?.value()))
            .collect()
    }

    /// Fit every uninitialized actnorm to the batch as it passes through.
    pub fn initialize_actnorms(&mut self, cond: Option<&Mat>, x: &Mat) -> Result<()> {
        self.check(cond, x)?;
        let mut u = x.clone();
        for b in &mut self.blocks {
            if !b.actnorm.is_initialized() {
                let r = b.residual(cond, &u)?;
                b.actnorm.initialize_from(&r)?;
            }
            u = b.forward_cond(cond, &u)?;
        }
        Ok(())
    }

    /// Record the batch log-density. `Exact` uses recorded Jacobian
    /// columns; `Estimator` uses the Russian-roulette surrogate, whose
    /// gradient is unbiased for the gradient of the summed log-density.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn record_log_density(
        &self,
        tape: &mut Tape,
        cond: Option<Var>,
        x: Var,
        mode: ParamMode,
        polar: PolarSettings,
        logdet: LogDetMode,
        est: &EstimatorConfig,
        rng: &mut Rng,
    ) -> Result<RecordedDensity> {
        let b = tape.value(x).cols();
        let mut u = x;
        let mut total: Option<Var> = None;
        let mut penalty: Option<Var> = None;
        let mut all = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let vars = blk.record_params(tape, mode, polar)?;
            let r = blk.record_residual(tape, &vars, cond, u);
            let ld = match logdet {
                LogDetMode::Exact => blk.record_residual_logdet(tape, u, r)?,
                LogDetMode::Estimator => {
                    let rm = blk.record_r(tape, &vars, cond, u);
                    blk.record_estimated_logdet(tape, &vars, u, rm, est, rng)?
                }
            };
            let an = blk.record_actnorm_logdet(tape, &vars);
            let ones = tape.leaf(Mat::filled(1, b, 1.0));
            let an = tape.scale_by(ones, an);
            let ld = tape.add(ld, an);
            total = Some(match total {
                Some(t) => tape.add(t, ld),
                None => ld,
            });
            if let Some(p) = blk.phi.record_penalty(tape, &vars.layers) {
                penalty = Some(match penalty {
                    Some(acc) => tape.add(acc, p),
                    None => p,
                });
            }
            u = blk.record_actnorm(tape, &vars, r);
            all.push(vars);
        }
        let sq = tape.col_sum_sq(u);
        let base = tape.scale(sq, -0.5);
        let base = tape.add_scalar(base, -0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln());
        let log_density = match total {
            Some(t) => tape.add(base, t),
            None => base,
        };
        Ok(RecordedDensity {
            log_density,
            latent: u,
            penalty,
            blocks: all,
        })
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ResidualBlock::param_count).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in &self.blocks {
            b.params_flat(&mut out);
        }
        out
    }

    pub fn set_params_flat(&mut self, src: &[f64], polar: PolarSettings) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::shape(
                "set_params_flat",
                format!("{} values for {} parameters", src.len(), self.param_count()),
            ));
        }
        let mut off = 0;
        for b in &mut self.blocks {
            off += b.set_params_flat(&src[off..], polar)?;
        }
        Ok(())
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in &self.blocks {
            b.trainable_mask(&mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests;
