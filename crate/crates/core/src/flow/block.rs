use super::actnorm::ActNorm;
use super::estimator::{neumann_coefficients, EstimatorConfig, ProbeDraw};
use crate::diff::{Recorded, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{lu_logabsdet, Mat, Orientation, Rng};
use crate::pnn::{gamma_bound, ParamMode, PolarSettings, Pnn, ProjectionGrad, ProxBlockVars};

pub const INVERT_TOL: f64 = 1e-9;
pub const INVERT_MAX_ITER: usize = 10_000;

/// Residual block `L(x) = actnorm(x + γ Ψ₂(y, x))`.
///
/// `Ψ₂` is the last `n` outputs of a widened PNN over `R^{d+n}`; for an
/// unconditional block `d = 0` and `Ψ₂ = Ψ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    gamma: f64,
    pub phi: Pnn,
    pub actnorm: ActNorm,
    cond_dim: usize,
}

/// Tape handles for one residual block.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub gamma: Var,
    pub scale: Var,
    pub shift: Var,
    pub layers: Vec<ProxBlockVars>,
}

/// Per-iteration history of a fixed-point inversion.
#[derive(Clone, Debug, Default)]
pub struct InversionTrace {
    /// Largest `‖x⁽ʳ⁺¹⁾ − x⁽ʳ⁾‖∞` over still-active columns, per iteration.
    pub residuals: Vec<f64>,
}

impl InversionTrace {
    pub fn iterations(&self) -> usize {
        self.residuals.len()
    }
}

impl ResidualBlock {
    /// Unconditional block. Fails when `γ` violates `0 < γ < (κ+1)/(κ−1)`.
    pub fn new(gamma: f64, phi: Pnn, actnorm: ActNorm) -> Result<Self> {
        Self::with_condition(gamma, phi, actnorm, 0)
    }

    pub(crate) fn with_condition(
        gamma: f64,
        phi: Pnn,
        actnorm: ActNorm,
        cond_dim: usize,
    ) -> Result<Self> {
        let bound = gamma_bound(phi.kappa());
        if !(gamma > 0.0 && gamma < bound) {
            return Err(Error::GammaBound {
                gamma,
                bound,
                layers: phi.kappa(),
            });
        }
        if phi.base_dim() != actnorm.dim() + cond_dim {
            return Err(Error::shape(
                "ResidualBlock",
                format!(
                    "network acts on {} dims, block on {} + {cond_dim}",
                    phi.base_dim(),
                    actnorm.dim()
                ),
            ));
        }
        Ok(ResidualBlock {
            gamma,
            phi,
            actnorm,
            cond_dim,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dim(&self) -> usize {
        self.actnorm.dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// Averagedness `t` of the subnetwork.
    pub fn t(&self) -> f64 {
        self.phi.averagedness()
    }

    /// `1 + γ − γt`
    pub fn lead(&self) -> f64 {
        neumann_coefficients(self.gamma, self.t()).0
    }

    /// Contraction factor `γt/(1+γ−γt)` of the inversion iteration.
    pub fn contraction(&self) -> f64 {
        neumann_coefficients(self.gamma, self.t()).1
    }

    fn check(&self, cond: Option<&Mat>, x: &Mat) -> Result<()> {
        if x.rows() != self.dim() {
            return Err(Error::shape(
                "block",
                format!("state has {} rows, block expects {}", x.rows(), self.dim()),
            ));
        }
        match (cond, self.cond_dim) {
            (None, 0) => Ok(()),
            (Some(y), d) if d > 0 && y.rows() == d && y.cols() == x.cols() => Ok(()),
            (Some(y), d) => Err(Error::shape(
                "block",
                format!("condition {:?} for cond_dim {d} and {} points", y.shape(), x.cols()),
            )),
            (None, d) => Err(Error::shape("block", format!("missing {d}-dim condition"))),
        }
    }

    /// `Ψ₂(y, x)`.
    pub(crate) fn psi(&self, cond: Option<&Mat>, x: &Mat) -> Result<Mat> {
        match cond {
            None => self.phi.forward(x),
            Some(y) => {
                let joint = y.vstack(x)?;
                Ok(self.phi.forward(&joint)?.row_slice(self.cond_dim, self.dim()))
            }
        }
    }

    /// `R₂(y, x) = Ψ₂(y, x)/t − ((1−t)/t) x`.
    pub(crate) fn r_map(&self, cond: Option<&Mat>, x: &Mat) -> Result<Mat> {
        let t = self.t();
        Ok(self.psi(cond, x)?.scale(1.0 / t).sub(&x.scale((1.0 - t) / t)))
    }

    /// `x + γ Ψ₂(y, x)`, before activation normalization.
    pub(crate) fn residual(&self, cond: Option<&Mat>, x: &Mat) -> Result<Mat> {
        self.check(cond, x)?;
        let mut u = self.psi(cond, x)?.scale(self.gamma);
        u.add_assign(x);
        Ok(u)
    }

    pub(crate) fn forward_cond(&self, cond: Option<&Mat>, x: &Mat) -> Result<Mat> {
        let u = self.residual(cond, x)?;
        self.actnorm.forward(&u)
    }

    /// Solve `L(y, x) = z` for `x` column by column with
    /// `x⁽ʳ⁺¹⁾ = u/(1+γ−γt) − (γt/(1+γ−γt)) R(x⁽ʳ⁾)`, `u = actnorm⁻¹(z)`.
    /// A column stops once its update is at most `tol` in max-norm.
    pub(crate) fn invert_cond(
        &self,
        cond: Option<&Mat>,
        z: &Mat,
        tol: f64,
        max_iter: usize,
        mut trace: Option<&mut InversionTrace>,
    ) -> Result<Mat> {
        self.check(cond, z)?;
        if tol <= 0.0 {
            return Err(Error::invalid("inversion tolerance must be positive"));
        }
        let u = self.actnorm.inverse(z)?;
        let a = 1.0 / self.lead();
        let c = self.contraction();
        let mut x = u.scale(a);
        let mut active: Vec<usize> = (0..z.cols()).collect();
        let mut iterations = 0;
        while !active.is_empty() {
            if iterations == max_iter {
                let mut worst = (active[0], 0.0);
                let xa = gather(&x, &active);
                let ca = cond.map(|y| gather(y, &active));
                let next = gather(&u, &active)
                    .scale(a)
                    .sub(&self.r_map(ca.as_ref(), &xa)?.scale(c));
                for (k, &col) in active.iter().enumerate() {
                    let d = (0..x.rows())
                        .map(|i| (next[(i, k)] - xa[(i, k)]).abs())
                        .fold(0.0, f64::max);
                    if d > worst.1 {
                        worst = (col, d);
                    }
                }
                return Err(Error::InversionNotConverged {
                    iterations,
                    residual: worst.1,
                }
                .at_sample(worst.0));
            }
            let xa = gather(&x, &active);
            let ca = cond.map(|y| gather(y, &active));
            let ua = gather(&u, &active);
            let next = ua.scale(a).sub(&self.r_map(ca.as_ref(), &xa)?.scale(c));
            let mut still = Vec::with_capacity(active.len());
            let mut worst: f64 = 0.0;
            for (k, &col) in active.iter().enumerate() {
                let mut d: f64 = 0.0;
                for i in 0..x.rows() {
                    d = d.max((next[(i, k)] - xa[(i, k)]).abs());
                    x[(i, col)] = next[(i, k)];
                }
                if !d.is_finite() {
                    return Err(Error::InversionNotConverged {
                        iterations,
                        residual: d,
                    }
                    .at_sample(col));
                }
                worst = worst.max(d);
                if d > tol {
                    still.push(col);
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.residuals.push(worst);
            }
            active = still;
            iterations += 1;
        }
        Ok(x)
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        self.forward_cond(None, x)
    }

    pub fn invert(&self, z: &Mat, tol: f64, max_iter: usize) -> Result<Mat> {
        self.invert_cond(None, z, tol, max_iter, None)
    }

    /// [`ResidualBlock::invert`] that also records the per-iteration updates.
    pub fn invert_traced(&self, z: &Mat, tol: f64, max_iter: usize) -> Result<(Mat, InversionTrace)> {
        let mut trace = InversionTrace::default();
        let x = self.invert_cond(None, z, tol, max_iter, Some(&mut trace))?;
        Ok((x, trace))
    }

    // --- recording -------------------------------------------------------

    /// Registers, in order: `γ`, actnorm scale, actnorm shift, then each
    /// prox layer's raw matrix and bias. Matches [`ResidualBlock::params_flat`].
    pub fn record_params(&self, tape: &mut Tape, mode: ParamMode, polar: PolarSettings) -> Result<BlockVars> {
        let (gamma, scale, shift) = match mode {
            ParamMode::Frozen => (
                tape.leaf(Mat::filled(1, 1, self.gamma)),
                tape.leaf(self.actnorm.scale().clone()),
                tape.leaf(self.actnorm.shift().clone()),
            ),
            ParamMode::Trainable(_) => (
                tape.param(Mat::filled(1, 1, self.gamma)),
                tape.param(self.actnorm.scale().clone()),
                tape.param(self.actnorm.shift().clone()),
            ),
        };
        let layers = self.phi.record_params(tape, mode, polar)?;
        Ok(BlockVars {
            gamma,
            scale,
            shift,
            layers,
        })
    }

    /// `Ψ₂(y, x)` on the tape.
    pub fn record_psi(&self, tape: &mut Tape, vars: &BlockVars, cond: Option<Var>, x: Var) -> Var {
        match cond {
            None => self.phi.record_apply(tape, &vars.layers, x),
            Some(y) => {
                let joint = tape.vstack(y, x);
                let out = self.phi.record_apply(tape, &vars.layers, joint);
                tape.row_slice(out, self.cond_dim, self.dim())
            }
        }
    }

    /// `x + γ Ψ₂(y, x)` on the tape.
    pub fn record_residual(&self, tape: &mut Tape, vars: &BlockVars, cond: Option<Var>, x: Var) -> Var {
        let psi = self.record_psi(tape, vars, cond, x);
        let scaled = tape.scale_by(psi, vars.gamma);
        tape.add(x, scaled)
    }

    pub fn record_actnorm(&self, tape: &mut Tape, vars: &BlockVars, u: Var) -> Var {
        let s = tape.scale_rows(u, vars.scale);
        tape.add_col(s, vars.shift)
    }

    /// `Σ log|s_i|` as a `1x1` node.
    pub fn record_actnorm_logdet(&self, tape: &mut Tape, vars: &BlockVars) -> Var {
        let l = tape.log_abs(vars.scale);
        tape.sum(l)
    }

    /// `R₂(y, x)` on the tape.
    pub fn record_r(&self, tape: &mut Tape, vars: &BlockVars, cond: Option<Var>, x: Var) -> Var {
        let t = self.t();
        let psi = self.record_psi(tape, vars, cond, x);
        let a = tape.scale(psi, 1.0 / t);
        let b = tape.scale(x, (1.0 - t) / t);
        tape.sub(a, b)
    }

    /// Exact per-point `log|det ∂ₓ(x + γΨ₂)|` (`1 x b`) from recorded
    /// Jacobian columns; differentiable.
    pub fn record_residual_logdet(&self, tape: &mut Tape, x: Var, u: Var) -> Result<Var> {
        let (n, b) = tape.value(x).shape();
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let mut e = Mat::zeros(n, b);
            for k in 0..b {
                e[(j, k)] = 1.0;
            }
            let e = tape.leaf(e);
            let col = tape
                .jvp(x, e, u)?
                .ok_or_else(|| Error::invalid("residual output does not depend on its input"))?;
            cols.push(col);
        }
        tape.batch_logdet(&cols)
    }

    /// Surrogate node whose value is the Russian-roulette log-det estimate
    /// (without the actnorm term) per point and whose parameter gradient is
    /// the matching unbiased gradient estimate. `r` must be
    /// [`ResidualBlock::record_r`] at `x`.
    pub fn record_estimated_logdet(
        &self,
        tape: &mut Tape,
        vars: &BlockVars,
        x: Var,
        r: Var,
        cfg: &EstimatorConfig,
        rng: &mut Rng,
    ) -> Result<Var> {
        cfg.validate()?;
        let (n, b) = tape.value(x).shape();
        let t = self.t();
        let c = self.contraction();
        // c(γ) = γt / (1 + γ(1−t)) and log(1 + γ − γt), as nodes in γ.
        let lead = {
            let g = tape.scale(vars.gamma, 1.0 - t);
            tape.add_scalar(g, 1.0)
        };
        let coef = {
            let num = tape.scale(vars.gamma, t);
            let inv = tape.recip(lead);
            tape.mul(num, inv)
        };
        let mut value = Mat::zeros(1, b);
        let mut surrogate: Option<Var> = None;
        for _ in 0..cfg.probe_count {
            let draw = ProbeDraw::sample(cfg, n, b, rng);
            let v = Mat::from_vec(n, b, draw.v.clone())?;
            // Rows of vᵀMᵏ, k = 0..=q_max, via repeated input vjps of R.
            let mut w = v.clone();
            let mut weight = v.scale_cols(&draw.series_weight(0));
            for k in 1..=draw.q_max() {
                let g = tape.backward_wrt(r, w.clone(), &[x])?;
                w = g.get_or_zeros(x, (n, b)).scale(c);
                let vmk_v = w.hadamard(&v).col_sums();
                value.add_assign(&vmk_v.hadamard(&draw.value_weight(k)));
                weight.add_assign(&w.scale_cols(&draw.series_weight(k)));
            }
            // Σ_b weight_bᵀ (M v)_b, with M v = c(γ) ∇R v recorded so it is
            // differentiable in every parameter.
            let vv = tape.leaf(v);
            let rv = tape
                .jvp(x, vv, r)?
                .ok_or_else(|| Error::invalid("R does not depend on its input"))?;
            let mv = tape.scale_by(rv, coef);
            let wv = tape.leaf(weight);
            let prod = tape.mul(wv, mv);
            let s = tape.sum(prod);
            surrogate = Some(match surrogate {
                Some(acc) => tape.add(acc, s),
                None => s,
            });
        }
        let probes = cfg.probe_count as f64;
        let value = value.scale(1.0 / probes).map(|v| v + n as f64 * self.lead().ln());
        // Gradient: mean surrogate plus n·log(1+γ−γt) per point.
        let sur = tape.scale(surrogate.expect("probe_count > 0"), 1.0 / (probes * b as f64));
        let log_lead = tape.log_abs(lead);
        let log_lead = tape.scale(log_lead, n as f64);
        let grad_part = tape.add(sur, log_lead);
        // Broadcast to 1 x b and shift the value to the estimate; the shift
        // is a constant and does not affect gradients.
        let ones = tape.leaf(Mat::filled(1, b, 1.0));
        let per_point = tape.scale_by(ones, grad_part);
        let offset = value.sub(tape.value(per_point));
        let offset = tape.leaf(offset);
        Ok(tape.add(per_point, offset))
    }

    // --- log-determinants -----------------------------------------------

    /// Record the whole block at `x` with frozen parameters.
    fn frozen_recording(&self, cond: Option<&Mat>, x: &Mat, with_actnorm: bool) -> Result<Recorded> {
        self.check(cond, x)?;
        let mut tape = Tape::new();
        let yv = cond.map(|y| tape.leaf(y.clone()));
        let xv = tape.leaf(x.clone());
        let vars = self.record_params(&mut tape, ParamMode::Frozen, PolarSettings::default())?;
        let u = self.record_residual(&mut tape, &vars, yv, xv);
        let out = if with_actnorm {
            self.record_actnorm(&mut tape, &vars, u)
        } else {
            u
        };
        Ok(Recorded::new(tape, xv, out))
    }

    /// Per-point Jacobians `∂ₓL` (actnorm included).
    pub(crate) fn jacobians_cond(&self, cond: Option<&Mat>, x: &Mat) -> Result<Vec<Mat>> {
        self.actnorm_ready()?;
        self.frozen_recording(cond, x, true)?.batch_jacobians()
    }

    fn actnorm_ready(&self) -> Result<()> {
        if self.actnorm.is_initialized() {
            Ok(())
        } else {
            Err(Error::ActNormUninitialized)
        }
    }

    /// Exact `log|det ∂ₓL|` per point from LU of the assembled Jacobian.
    pub(crate) fn logdet_exact_cond(&self, cond: Option<&Mat>, x: &Mat) -> Result<Vec<f64>> {
        self.jacobians_cond(cond, x)?
            .iter()
            .map(|j| Ok(lu_logabsdet(j)?.value()))
            .collect()
    }

    pub fn jacobians(&self, x: &Mat) -> Result<Vec<Mat>> {
        self.jacobians_cond(None, x)
    }

    pub fn logdet_exact(&self, x: &Mat) -> Result<Vec<f64>> {
        self.logdet_exact_cond(None, x)
    }

    /// Closed form `Σᵢ log(1 + γσ′ᵢ(Tx + b)) + Σ log|s|` for a single prox
    /// layer without widening whose `T` has orthonormal rows.
    pub fn logdet_single_layer(&self, x: &Mat) -> Result<Vec<f64>> {
        self.check(None, x)?;
        self.actnorm_ready()?;
        if self.phi.kappa() != 1 || self.phi.widen_p() != 1 || self.cond_dim != 0 {
            return Err(Error::invalid(
                "single-layer log-determinant needs one prox layer, p = 1 and no condition",
            ));
        }
        let layer = &self.phi.blocks[0];
        let t = layer.t.projected();
        if t.rows() != t.cols() && Orientation::of(t.rows(), t.cols()) != Orientation::Rows {
            return Err(Error::invalid(
                "single-layer log-determinant needs T with orthonormal rows (hidden <= n)",
            ));
        }
        let z = t.matmul(x).add_col(&layer.bias);
        let base = self.actnorm.logdet();
        Ok((0..x.cols())
            .map(|k| {
                base + (0..z.rows())
                    .map(|i| (1.0 + self.gamma * layer.act.derivative(z[(i, k)], 1)).ln())
                    .sum::<f64>()
            })
            .collect())
    }

    pub(crate) fn logdet_estimate_cond(
        &self,
        cond: Option<&Mat>,
        x: &Mat,
        cfg: &EstimatorConfig,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        cfg.validate()?;
        self.actnorm_ready()?;
        let rec = {
            self.check(cond, x)?;
            let mut tape = Tape::new();
            let yv = cond.map(|y| tape.leaf(y.clone()));
            let xv = tape.leaf(x.clone());
            let vars = self.record_params(&mut tape, ParamMode::Frozen, PolarSettings::default())?;
            let r = self.record_r(&mut tape, &vars, yv, xv);
            Recorded::new(tape, xv, r)
        };
        let (n, b) = x.shape();
        let c = self.contraction();
        let mut acc = Mat::zeros(1, b);
        for _ in 0..cfg.probe_count {
            let draw = ProbeDraw::sample(cfg, n, b, rng);
            let v = Mat::from_vec(n, b, draw.v.clone())?;
            let mut w = v.clone();
            for k in 1..=draw.q_max() {
                w = rec.input_vjp(&w)?.scale(c);
                acc.add_assign(&w.hadamard(&v).col_sums().hadamard(&draw.value_weight(k)));
            }
        }
        let add = n as f64 * self.lead().ln() + self.actnorm.logdet();
        Ok(acc
            .scale(1.0 / cfg.probe_count as f64)
            .as_slice()
            .iter()
            .map(|v| v + add)
            .collect())
    }

    /// Russian-roulette estimate of `log|det ∂ₓL|` per point, averaged over
    /// `cfg.probe_count` draws of `(v, q)`.
    pub fn logdet_estimate(&self, x: &Mat, cfg: &EstimatorConfig, rng: &mut Rng) -> Result<Vec<f64>> {
        self.logdet_estimate_cond(None, x, cfg, rng)
    }

    pub(crate) fn logdet_estimate_grad_cond(
        &self,
        cond: Option<&Mat>,
        x: &Mat,
        cfg: &EstimatorConfig,
        rng: &mut Rng,
        projection: ProjectionGrad,
    ) -> Result<Vec<f64>> {
        cfg.validate()?;
        self.check(cond, x)?;
        self.actnorm_ready()?;
        let mut tape = Tape::new();
        let yv = cond.map(|y| tape.leaf(y.clone()));
        let xv = tape.leaf(x.clone());
        let vars = self.record_params(&mut tape, ParamMode::Trainable(projection), PolarSettings::default())?;
        let r = self.record_r(&mut tape, &vars, yv, xv);
        let est = self.record_estimated_logdet(&mut tape, &vars, xv, r, cfg, rng)?;
        let an = self.record_actnorm_logdet(&mut tape, &vars);
        let total = tape.sum(est);
        let b = x.cols() as f64;
        let an = tape.scale(an, b);
        let total = tape.add(total, an);
        Ok(tape.backward(total, Mat::filled(1, 1, 1.0))?.params_flat(&tape))
    }

    /// Unbiased estimate of `∂θ Σ_b log|det ∂ₓL(x_b)|` for all block
    /// parameters in [`ResidualBlock::params_flat`] order.
    pub fn logdet_estimate_grad(&self, x: &Mat, cfg: &EstimatorConfig, rng: &mut Rng) -> Result<Vec<f64>> {
        self.logdet_estimate_grad_cond(None, x, cfg, rng, ProjectionGrad::Unrolled)
    }

    /// Exact `∂θ Σ_b log|det ∂ₓL(x_b)|`, same layout as
    /// [`ResidualBlock::logdet_estimate_grad`].
    pub(crate) fn logdet_exact_grad_cond(
        &self,
        cond: Option<&Mat>,
        x: &Mat,
        projection: ProjectionGrad,
    ) -> Result<Vec<f64>> {
        self.check(cond, x)?;
        self.actnorm_ready()?;
        let mut tape = Tape::new();
        let yv = cond.map(|y| tape.leaf(y.clone()));
        let xv = tape.leaf(x.clone());
        let vars = self.record_params(&mut tape, ParamMode::Trainable(projection), PolarSettings::default())?;
        let u = self.record_residual(&mut tape, &vars, yv, xv);
        let out = self.record_actnorm(&mut tape, &vars, u);
        let mut rec = Recorded::new(tape, xv, out);
        Ok(rec.grad_of_logdet_jacobian()?.1)
    }

    pub fn logdet_exact_grad(&self, x: &Mat) -> Result<Vec<f64>> {
        self.logdet_exact_grad_cond(None, x, ProjectionGrad::Unrolled)
    }

    // --- parameters ------------------------------------------------------

    pub fn param_count(&self) -> usize {
        1 + 2 * self.dim() + self.phi.param_count()
    }

    pub fn params_flat(&self, out: &mut Vec<f64>) {
        out.push(self.gamma);
        self.actnorm.params_flat(out);
        self.phi.params_flat(out);
    }

    /// Loads parameters; `γ` is a fixed hyperparameter and must be unchanged.
    pub fn set_params_flat(&mut self, src: &[f64], polar: PolarSettings) -> Result<usize> {
        if src[0] != self.gamma {
            return Err(Error::invalid("gamma is fixed and cannot be updated"));
        }
        let mut off = 1;
        off += self.actnorm.set_params_flat(&src[off..])?;
        off += self.phi.set_params_flat(&src[off..], polar)?;
        Ok(off)
    }

    /// Which entries of [`ResidualBlock::params_flat`] an optimizer may move.
    pub fn trainable_mask(&self, out: &mut Vec<bool>) {
        out.push(false);
        out.extend(std::iter::repeat_n(true, self.param_count() - 1));
    }
}

fn gather(m: &Mat, cols: &[usize]) -> Mat {
    if cols.len() == m.cols() {
        return m.clone();
    }
    Mat::from_fn(m.rows(), cols.len(), |i, j| m[(i, cols[j])])
}
