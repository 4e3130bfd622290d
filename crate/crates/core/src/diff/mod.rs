//! Reverse-mode differentiation sized for proximal residual flows.
//!
//! A [`Tape`] records a fixed vocabulary of matrix primitives. First-order
//! gradients come from a reverse sweep. Gradients of Jacobian functionals
//! (the exact log-determinant) come from recording forward-mode tangents as
//! further tape nodes and sweeping over those, so every Jacobian entry is an
//! ordinary differentiable node.

mod tape;

pub use tape::{Grads, Tape, Var};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Largest dimension for which Jacobians are assembled explicitly.
pub const JACOBIAN_GUARD: usize = 256;

/// A function recorded on a tape, from one input node to one output node.
///
/// Inputs are batches: an `n x b` input holds `b` independent points, and
/// every recorded primitive acts on columns independently except through
/// parameters.
#[derive(Clone, Debug)]
pub struct Recorded {
    pub tape: Tape,
    pub input: Var,
    pub output: Var,
}

impl Recorded {
    pub fn new(tape: Tape, input: Var, output: Var) -> Self {
        Recorded {
            tape,
            input,
            output,
        }
    }

    pub fn output_value(&self) -> &Mat {
        self.tape.value(self.output)
    }

    /// `(vᵀ ∂out/∂in, vᵀ ∂out/∂θ)` for cotangent `v` shaped like the output.
    pub fn vjp(&self, cotangent: &Mat) -> Result<(Mat, Vec<f64>)> {
        let grads = self.tape.backward(self.output, cotangent.clone())?;
        let shape = self.tape.value(self.input).shape();
        Ok((
            grads.get_or_zeros(self.input, shape),
            grads.params_flat(&self.tape),
        ))
    }

    /// Input part of [`Recorded::vjp`] only, skipping parameter paths.
    pub fn input_vjp(&self, cotangent: &Mat) -> Result<Mat> {
        let grads = self
            .tape
            .backward_wrt(self.output, cotangent.clone(), &[self.input])?;
        Ok(grads.get_or_zeros(self.input, self.tape.value(self.input).shape()))
    }

    fn guard(&self) -> Result<(usize, usize, usize)> {
        let (n, b) = self.tape.value(self.input).shape();
        let m = self.tape.value(self.output).rows();
        if n.max(m) > JACOBIAN_GUARD {
            return Err(Error::JacobianGuard {
                dim: n.max(m),
                limit: JACOBIAN_GUARD,
            });
        }
        Ok((n, m, b))
    }

    /// `m x n` Jacobian of a single-point recording, assembled from `m`
    /// reverse sweeps with unit cotangents.
    pub fn jacobian(&self) -> Result<Mat> {
        let (_, _, b) = self.guard()?;
        if b != 1 {
            return Err(Error::shape(
                "jacobian",
                format!("expected a single point, recording holds {b}"),
            ));
        }
        Ok(self.batch_jacobians()?.remove(0))
    }

    /// One Jacobian per input column.
    pub fn batch_jacobians(&self) -> Result<Vec<Mat>> {
        let (n, m, b) = self.guard()?;
        let mut out = vec![Mat::zeros(m, n); b];
        for i in 0..m {
            let mut cot = Mat::zeros(m, b);
            for k in 0..b {
                cot[(i, k)] = 1.0;
            }
            let row = self.input_vjp(&cot)?;
            for (k, jac) in out.iter_mut().enumerate() {
                for j in 0..n {
                    jac[(i, j)] = row[(j, k)];
                }
            }
        }
        Ok(out)
    }

    /// Record the Jacobian as differentiable nodes: one tangent node per
    /// input direction, each `m x b`, column `j` of every per-point
    /// Jacobian living in the `j`-th returned node.
    pub fn record_jacobian_columns(&mut self) -> Result<Vec<Var>> {
        let (n, m, b) = self.guard()?;
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let mut e = Mat::zeros(n, b);
            for k in 0..b {
                e[(j, k)] = 1.0;
            }
            let e = self.tape.leaf(e);
            let col = match self.tape.jvp(self.input, e, self.output)? {
                Some(c) => c,
                None => self.tape.leaf(Mat::zeros(m, b)),
            };
            cols.push(col);
        }
        Ok(cols)
    }

    /// `Σ_b log|det ∇f(x_b)|` and its gradient with respect to every
    /// registered parameter.
    pub fn grad_of_logdet_jacobian(&mut self) -> Result<(f64, Vec<f64>)> {
        let (n, m, _) = self.guard()?;
        if n != m {
            return Err(Error::shape(
                "grad_of_logdet_jacobian",
                format!("Jacobian is {m}x{n}, not square"),
            ));
        }
        let cols = self.record_jacobian_columns()?;
        let ld = self.tape.batch_logdet(&cols)?;
        let total = self.tape.sum(ld);
        let grads = self.tape.backward(total, Mat::filled(1, 1, 1.0))?;
        Ok((self.tape.scalar(total), grads.params_flat(&self.tape)))
    }
}
