//! Proximal neural networks.
//!
//! A prox block is `B(u) = Tᵀ σ(T u + b)` with `T` on the Stiefel manifold
//! and `σ` a stable activation; each block is a proximity operator and so
//! ½-averaged. A chain of `κ` blocks is `κ/(κ+1)`-averaged. The network is
//! used in widened form `Ψ(x) = Aᵀ Φ(A x)` with
//! `A = (1/√p)(I; …; I) ∈ St(pn, n)`, which keeps the averagedness while
//! giving every layer `pn` inputs.

mod activation;

pub use activation::{StableActivation, MAX_ACTIVATION_ORDER};

use crate::diff::{Recorded, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{orth_defect, polar_project, Mat, Orientation, Rng, POLAR_MAX_ITER, POLAR_TOL};

/// Tolerance and iteration cap for the Stiefel projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolarSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PolarSettings {
    fn default() -> Self {
        PolarSettings {
            tol: POLAR_TOL,
            max_iter: POLAR_MAX_ITER,
        }
    }
}

/// How the projection `T = P_St(T̃)` is differentiated on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProjectionGrad {
    /// Backpropagate through the unrolled polar iteration.
    #[default]
    Unrolled,
    /// Treat the projection as the identity in the backward pass.
    StraightThrough,
}

/// How a network's parameters enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    /// Projected matrices as constants; nothing is registered.
    Frozen,
    /// Raw matrices and biases registered as parameters.
    Trainable(ProjectionGrad),
}

/// A raw matrix `T̃` together with its Stiefel projection `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct StiefelParam {
    raw: Mat,
    projected: Mat,
}

impl StiefelParam {
    pub fn new(raw: Mat, polar: PolarSettings) -> Result<Self> {
        let projected = polar_project(&raw, polar.tol, polar.max_iter)?;
        Ok(StiefelParam { raw, projected })
    }

    pub fn raw(&self) -> &Mat {
        &self.raw
    }

    pub fn projected(&self) -> &Mat {
        &self.projected
    }

    pub fn set_raw(&mut self, raw: Mat, polar: PolarSettings) -> Result<()> {
        self.projected = polar_project(&raw, polar.tol, polar.max_iter)?;
        self.raw = raw;
        Ok(())
    }

    /// Distance of the raw matrix to the manifold, `‖T̃ᵀT̃ − I‖_F`.
    pub fn raw_defect(&self) -> f64 {
        orth_defect(&self.raw)
    }
}

/// `u ↦ Tᵀ σ(T u + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxBlock {
    pub t: StiefelParam,
    pub bias: Mat,
    pub act: StableActivation,
}

impl ProxBlock {
    pub fn new(t: StiefelParam, bias: Mat, act: StableActivation) -> Result<Self> {
        let h = t.projected().rows();
        if bias.shape() != (h, 1) {
            return Err(Error::shape(
                "ProxBlock::new",
                format!("bias {:?} for T with {h} rows", bias.shape()),
            ));
        }
        Ok(ProxBlock { t, bias, act })
    }

    pub fn hidden(&self) -> usize {
        self.t.projected().rows()
    }

    pub fn width(&self) -> usize {
        self.t.projected().cols()
    }

    pub fn forward(&self, u: &Mat) -> Mat {
        let t = self.t.projected();
        let act = self.act;
        let z = t.matmul(u).add_col(&self.bias).map(|x| act.eval(x));
        t.t_matmul(&z)
    }

    pub fn param_count(&self) -> usize {
        self.t.raw().as_slice().len() + self.bias.rows()
    }
}

/// Tape handles for one prox block.
#[derive(Clone, Copy, Debug)]
pub struct ProxBlockVars {
    /// Raw matrix when trainable, otherwise the projected constant.
    pub raw: Var,
    pub t: Var,
    pub bias: Var,
}

/// Widened proximal neural network `Ψ(x) = Aᵀ (B_κ ∘ … ∘ B_1)(A x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pnn {
    pub blocks: Vec<ProxBlock>,
    widen_p: usize,
    base_dim: usize,
}

impl Pnn {
    pub fn new(blocks: Vec<ProxBlock>, widen_p: usize, base_dim: usize) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::invalid("a PNN needs at least one prox block"));
        }
        if widen_p == 0 || base_dim == 0 {
            return Err(Error::invalid("widening factor and base dimension must be positive"));
        }
        let width = widen_p * base_dim;
        for (k, b) in blocks.iter().enumerate() {
            if b.width() != width {
                return Err(Error::shape(
                    "Pnn::new",
                    format!("block {k} acts on {} dims, expected {width}", b.width()),
                ));
            }
        }
        Ok(Pnn {
            blocks,
            widen_p,
            base_dim,
        })
    }

    /// `kappa` blocks with `hidden x (p·base_dim)` matrices, each a Gaussian
    /// matrix projected to the manifold, and zero biases.
    pub fn random(
        base_dim: usize,
        widen_p: usize,
        hidden: usize,
        kappa: usize,
        act: StableActivation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let polar = PolarSettings::default();
        let width = widen_p * base_dim;
        let blocks = (0..kappa)
            .map(|_| {
                let proj = polar_project(&rng.normal_mat(hidden, width), polar.tol, polar.max_iter)?;
                ProxBlock::new(
                    StiefelParam::new(proj, polar)?,
                    Mat::zeros(hidden, 1),
                    act,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Pnn::new(blocks, widen_p, base_dim)
    }

    pub fn kappa(&self) -> usize {
        self.blocks.len()
    }

    pub fn widen_p(&self) -> usize {
        self.widen_p
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    /// `t = κ/(κ+1)`.
    pub fn averagedness(&self) -> f64 {
        averagedness(self.kappa())
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ProxBlock::param_count).sum()
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.rows() != self.base_dim {
            return Err(Error::shape(
                "pnn_forward",
                format!("input has {} rows, network expects {}", x.rows(), self.base_dim),
            ));
        }
        Ok(())
    }

    /// `Ψ(x)` for every column of `x`.
    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x)?;
        let p = self.widen_p;
        let n = self.base_dim;
        let s = 1.0 / (p as f64).sqrt();
        let mut u = Mat::from_fn(n * p, x.cols(), |i, j| s * x[(i % n, j)]);
        for b in &self.blocks {
            u = b.forward(&u);
        }
        let mut out = Mat::zeros(n, x.cols());
        for c in 0..p {
            out.add_assign(&u.row_slice(c * n, n));
        }
        Ok(out.scale(s))
    }

    /// `R(x) = Ψ(x)/t − ((1−t)/t) x`, nonexpansive when Ψ is t-averaged.
    pub fn r_forward(&self, x: &Mat) -> Result<Mat> {
        let t = self.averagedness();
        let psi = self.forward(x)?;
        Ok(psi.scale(1.0 / t).sub(&x.scale((1.0 - t) / t)))
    }

    /// `Ψ` recorded on a fresh tape, with the projection of every `T̃`
    /// recorded as well so parameter gradients reach the raw matrices.
    pub fn forward_recorded(&self, x: &Mat) -> Result<Recorded> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let vars = self.record_params(
            &mut tape,
            ParamMode::Trainable(ProjectionGrad::Unrolled),
            PolarSettings::default(),
        )?;
        let out = self.record_apply(&mut tape, &vars, xv);
        Ok(Recorded::new(tape, xv, out))
    }

    /// Put the network's parameters on `tape`; trainable raw matrices and
    /// biases are registered in block order (matrix, then bias).
    pub fn record_params(
        &self,
        tape: &mut Tape,
        mode: ParamMode,
        polar: PolarSettings,
    ) -> Result<Vec<ProxBlockVars>> {
        self.blocks
            .iter()
            .map(|b| match mode {
                ParamMode::Frozen => {
                    let t = tape.leaf(b.t.projected().clone());
                    let bias = tape.leaf(b.bias.clone());
                    Ok(ProxBlockVars { raw: t, t, bias })
                }
                ParamMode::Trainable(grad) => {
                    let raw = tape.param(b.t.raw().clone());
                    let bias = tape.param(b.bias.clone());
                    let t = match grad {
                        ProjectionGrad::Unrolled => record_polar(tape, raw, polar)?,
                        ProjectionGrad::StraightThrough => {
                            tape.straight_through(raw, b.t.projected().clone())
                        }
                    };
                    Ok(ProxBlockVars { raw, t, bias })
                }
            })
            .collect()
    }

    /// Record `Ψ(x)` for a batch node `x` using previously recorded params.
    pub fn record_apply(&self, tape: &mut Tape, vars: &[ProxBlockVars], x: Var) -> Var {
        let p = self.widen_p;
        let mut u = tape.widen(x, p);
        for (b, v) in self.blocks.iter().zip(vars) {
            let z = tape.matmul(v.t, u);
            let z = tape.add_col(z, v.bias);
            let s = tape.act(z, b.act, 0);
            u = tape.matmul_tn(v.t, s);
        }
        tape.narrow(u, p)
    }

    /// `Σ_k ‖T̃_kᵀT̃_k − I‖_F²` (orientation-adjusted) as a `1x1` node.
    pub fn record_penalty(&self, tape: &mut Tape, vars: &[ProxBlockVars]) -> Option<Var> {
        let mut total: Option<Var> = None;
        for v in vars {
            let (r, c) = tape.value(v.raw).shape();
            let gram = match Orientation::of(r, c) {
                Orientation::Columns => tape.matmul_tn(v.raw, v.raw),
                Orientation::Rows => tape.matmul_nt(v.raw, v.raw),
            };
            let d = tape.add_diag(gram, -1.0);
            let sq = tape.sum_sq(d);
            total = Some(match total {
                Some(t) => tape.add(t, sq),
                None => sq,
            });
        }
        total
    }

    /// Raw matrices and biases flattened in registration order.
    pub fn params_flat(&self, out: &mut Vec<f64>) {
        for b in &self.blocks {
            out.extend_from_slice(b.t.raw().as_slice());
            out.extend_from_slice(b.bias.as_slice());
        }
    }

    /// Inverse of [`Pnn::params_flat`]; re-projects every matrix.
    pub fn set_params_flat(&mut self, src: &[f64], polar: PolarSettings) -> Result<usize> {
        let mut off = 0;
        for b in &mut self.blocks {
            let (r, c) = b.t.raw().shape();
            let raw = Mat::from_vec(r, c, src[off..off + r * c].to_vec())?;
            off += r * c;
            b.t.set_raw(raw, polar)?;
            b.bias = Mat::from_vec(r, 1, src[off..off + r].to_vec())?;
            off += r;
        }
        Ok(off)
    }
}

/// `κ/(κ+1)` for a chain of `κ` ½-averaged blocks.
pub fn averagedness(kappa: usize) -> f64 {
    kappa as f64 / (kappa as f64 + 1.0)
}

/// Supremum of admissible residual scales `γ` for a `κ`-block network:
/// `(κ+1)/(κ−1)`, unbounded for `κ = 1`.
pub fn gamma_bound(kappa: usize) -> f64 {
    if kappa <= 1 {
        f64::INFINITY
    } else {
        (kappa as f64 + 1.0) / (kappa as f64 - 1.0)
    }
}

/// Unrolled `Y ← 2Y(I + YᵀY)⁻¹` on the tape, stopping by the same rule as
/// [`polar_project`].
fn record_polar(tape: &mut Tape, raw: Var, polar: PolarSettings) -> Result<Var> {
    let (r, c) = tape.value(raw).shape();
    let transposed = Orientation::of(r, c) == Orientation::Rows;
    let mut y = if transposed { tape.transpose(raw) } else { raw };
    let mut iterations = 0;
    loop {
        let gram = tape.matmul_tn(y, y);
        let defect = tape.value(gram).add_diag(-1.0).frobenius();
        if defect <= polar.tol {
            break;
        }
        if iterations == polar.max_iter || !defect.is_finite() {
            return Err(Error::PolarNotConverged { iterations, defect });
        }
        y = polar_step(tape, y, gram)?;
        iterations += 1;
    }
    // At a converged input the loop may not run at all, which would leave the
    // identity as derivative. One more step supplies the tangent projection
    // while the value stays the converged iterate.
    let gram = tape.matmul_tn(y, y);
    let step = polar_step(tape, y, gram)?;
    let value = tape.value(y).clone();
    let y = tape.straight_through(step, value);
    Ok(if transposed { tape.transpose(y) } else { y })
}

fn polar_step(tape: &mut Tape, y: Var, gram: Var) -> Result<Var> {
    let shifted = tape.add_diag(gram, 1.0);
    let inv = tape.inverse(shifted)?;
    let prod = tape.matmul(y, inv);
    Ok(tape.scale(prod, 2.0))
}
