//! Conditional flows `x ↦ 𝒯(y, x)`: each block updates only the state `x`
//! with the last `n` outputs of a PNN over the joint vector `(y, x)`.

use crate::error::{Error, Result};
use crate::flow::{
    ActNorm, Architecture, EstimatorConfig, InvertSettings, InversionTrace, ProxFlow, ResidualBlock,
};
use crate::linalg::{Mat, Rng};
use crate::pnn::{Pnn, ProjectionGrad};

/// `L(y, x) = actnorm(x + γ Ψ₂(y, x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondResidualBlock {
    inner: ResidualBlock,
}

impl CondResidualBlock {
    /// `phi` must act on `cond_dim + actnorm.dim()` coordinates.
    pub fn new(gamma: f64, phi: Pnn, actnorm: ActNorm, cond_dim: usize) -> Result<Self> {
        if cond_dim == 0 {
            return Err(Error::invalid("conditional block needs cond_dim > 0"));
        }
        Ok(CondResidualBlock {
            inner: ResidualBlock::with_condition(gamma, phi, actnorm, cond_dim)?,
        })
    }

    pub fn block(&self) -> &ResidualBlock {
        &self.inner
    }

    pub fn block_mut(&mut self) -> &mut ResidualBlock {
        &mut self.inner
    }

    pub fn state_dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.inner.cond_dim()
    }

    pub fn forward(&self, y: &Mat, x: &Mat) -> Result<Mat> {
        self.inner.forward_cond(Some(y), x)
    }

    pub fn invert(&self, y: &Mat, z: &Mat, tol: f64, max_iter: usize) -> Result<Mat> {
        self.inner.invert_cond(Some(y), z, tol, max_iter, None)
    }

    pub fn invert_traced(&self, y: &Mat, z: &Mat, tol: f64, max_iter: usize) -> Result<(Mat, InversionTrace)> {
        let mut trace = InversionTrace::default();
        let x = self.inner.invert_cond(Some(y), z, tol, max_iter, Some(&mut trace))?;
        Ok((x, trace))
    }

    /// `R₂(y, x)`, nonexpansive in `x` for fixed `y`.
    pub fn r_forward(&self, y: &Mat, x: &Mat) -> Result<Mat> {
        self.inner.r_map(Some(y), x)
    }

    /// Per-point Jacobians in `x` at fixed `y`.
    pub fn jacobians(&self, y: &Mat, x: &Mat) -> Result<Vec<Mat>> {
        self.inner.jacobians_cond(Some(y), x)
    }

    pub fn logdet_exact(&self, y: &Mat, x: &Mat) -> Result<Vec<f64>> {
        self.inner.logdet_exact_cond(Some(y), x)
    }

    pub fn logdet_estimate(&self, y: &Mat, x: &Mat, cfg: &EstimatorConfig, rng: &mut Rng) -> Result<Vec<f64>> {
        self.inner.logdet_estimate_cond(Some(y), x, cfg, rng)
    }

    pub fn logdet_estimate_grad(&self, y: &Mat, x: &Mat, cfg: &EstimatorConfig, rng: &mut Rng) -> Result<Vec<f64>> {
        self.inner
            .logdet_estimate_grad_cond(Some(y), x, cfg, rng, ProjectionGrad::Unrolled)
    }

    pub fn logdet_exact_grad(&self, y: &Mat, x: &Mat) -> Result<Vec<f64>> {
        self.inner
            .logdet_exact_grad_cond(Some(y), x, ProjectionGrad::Unrolled)
    }
}

/// `𝒯(y, ·) = L_K(y, ·) ∘ … ∘ L_1(y, ·)` with a standard normal base on `R^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondProxFlow {
    inner: ProxFlow,
}

/// Repeat a single condition column `count` times.
pub fn broadcast_condition(y: &[f64], count: usize) -> Mat {
    Mat::from_fn(y.len(), count, |i, _| y[i])
}

impl CondProxFlow {
    pub fn new(cond_dim: usize, state_dim: usize, blocks: Vec<CondResidualBlock>) -> Result<Self> {
        if cond_dim == 0 {
            return Err(Error::invalid("conditional flow needs cond_dim > 0"));
        }
        let blocks = blocks.into_iter().map(|b| b.inner).collect();
        Ok(CondProxFlow {
            inner: ProxFlow::assemble(state_dim, cond_dim, blocks)?,
        })
    }

    pub fn random(arch: &Architecture, identity_actnorm: bool, rng: &mut Rng) -> Result<Self> {
        if arch.cond_dim == 0 {
            return Err(Error::invalid("conditional flow needs cond_dim > 0"));
        }
        Ok(CondProxFlow {
            inner: ProxFlow::random(arch, identity_actnorm, rng)?,
        })
    }

    pub(crate) fn from_flow(inner: ProxFlow) -> Result<Self> {
        if inner.cond_dim() == 0 {
            return Err(Error::invalid("conditional flow needs cond_dim > 0"));
        }
        Ok(CondProxFlow { inner })
    }

    /// The underlying block stack; its methods taking no condition fail.
    pub fn flow(&self) -> &ProxFlow {
        &self.inner
    }

    pub fn flow_mut(&mut self) -> &mut ProxFlow {
        &mut self.inner
    }

    pub fn into_flow(self) -> ProxFlow {
        self.inner
    }

    pub fn state_dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.inner.cond_dim()
    }

    pub fn forward(&self, y: &Mat, x: &Mat) -> Result<Mat> {
        self.inner.forward_cond(Some(y), x)
    }

    /// Latents and per-point log-densities of `x` given the matching
    /// columns of `y`; block Jacobians are taken in `x` only.
    pub fn log_density(&self, y: &Mat, x: &Mat) -> Result<(Mat, Vec<f64>)> {
        self.inner.log_density_cond(Some(y), x)
    }

    pub fn inverse(&self, y: &Mat, z: &Mat, s: InvertSettings) -> Result<Mat> {
        self.inner.inverse_cond(Some(y), z, s)
    }

    /// `count` draws from the model posterior at the single condition `y`.
    pub fn sample(&self, y: &[f64], count: usize, rng: &mut Rng, s: InvertSettings) -> Result<Mat> {
        let z = rng.normal_mat(self.state_dim(), count);
        self.inverse(&broadcast_condition(y, count), &z, s)
    }

    pub fn jacobians(&self, y: &Mat, x: &Mat) -> Result<Vec<Mat>> {
        self.inner.jacobians_cond(Some(y), x)
    }

    pub fn blocks(&self) -> Vec<CondResidualBlock> {
        self.inner
            .blocks
            .iter()
            .map(|b| CondResidualBlock { inner: b.clone() })
            .collect()
    }
}
