//! Maximum-likelihood training with Adam and the orthogonality penalty.

use crate::conditional::CondProxFlow;
use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::flow::{Architecture, EstimatorConfig, LogDetMode, ProxFlow};
use crate::linalg::{orth_defect, Mat, Rng};
use crate::pnn::{gamma_bound, ParamMode, PolarSettings, ProjectionGrad, StableActivation};
use crate::problems::{circle_problem, mixture_problem, InverseProblemSpec, Toy};
use serde::{Deserialize, Serialize};

/// Gradient norm above which updates are rescaled.
pub const CLIP_NORM: f64 = 100.0;

fn default_penalty() -> f64 {
    1.0
}
fn default_kappa() -> usize {
    3
}
fn default_activation() -> String {
    "elu".into()
}
fn default_inv_tol() -> f64 {
    crate::flow::INVERT_TOL
}
fn default_inv_max_iter() -> usize {
    crate::flow::INVERT_MAX_ITER
}
fn default_polar_tol() -> f64 {
    crate::linalg::POLAR_TOL
}
fn default_polar_max_iter() -> usize {
    crate::linalg::POLAR_MAX_ITER
}
fn default_probes() -> usize {
    1
}
fn default_components() -> usize {
    5
}

/// Hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// State dimension.
    pub n: usize,
    /// Condition dimension; 0 for density estimation.
    #[serde(default)]
    pub d: usize,
    /// Residual blocks.
    #[serde(rename = "K")]
    pub k: usize,
    /// Widening factor.
    pub p: usize,
    /// Hidden width of every prox layer.
    pub h: usize,
    pub gamma: f64,
    pub batch_b: usize,
    pub epochs_e: usize,
    pub steps_s: usize,
    pub lr_tau: f64,
    #[serde(default = "default_penalty")]
    pub penalty_weight: f64,
    pub seed: u64,
    #[serde(default = "default_inv_tol")]
    pub inv_tol: f64,
    #[serde(default = "default_inv_max_iter")]
    pub inv_max_iter: usize,
    #[serde(default = "default_polar_tol")]
    pub polar_tol: f64,
    #[serde(default = "default_polar_max_iter")]
    pub polar_max_iter: usize,
    #[serde(default)]
    pub logdet_mode: LogDetMode,
    /// Estimator probes per step when `logdet_mode` is `estimator`.
    #[serde(default = "default_probes")]
    pub probe_count: usize,
    /// Prox layers per subnetwork.
    #[serde(default = "default_kappa")]
    pub kappa: usize,
    /// `elu`, `tanh` or `identity`.
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default)]
    pub elu_alpha: Option<f64>,
    /// Training data: a toy density name, `circle` or `mixture`.
    pub problem: String,
    /// Seed of the problem instance (mixture means).
    #[serde(default)]
    pub problem_seed: u64,
    #[serde(default = "default_components")]
    pub mixture_components: usize,
    /// Straight-through projection gradients instead of the unrolled iteration.
    #[serde(default)]
    pub straight_through: bool,
}

/// Named configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Circle,
    Mixture,
}

impl Preset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Preset::Toy),
            "circle" => Ok(Preset::Circle),
            "mixture" => Ok(Preset::Mixture),
            other => Err(Error::invalid(format!("unknown preset {other:?}"))),
        }
    }

    pub fn config(self) -> TrainConfig {
        let base = TrainConfig {
            n: 2,
            d: 0,
            k: 20,
            p: 64,
            h: 64,
            gamma: 1.99,
            batch_b: 200,
            epochs_e: 20,
            steps_s: 2000,
            lr_tau: 1e-3,
            penalty_weight: default_penalty(),
            seed: 0,
            inv_tol: default_inv_tol(),
            inv_max_iter: default_inv_max_iter(),
            polar_tol: default_polar_tol(),
            polar_max_iter: default_polar_max_iter(),
            logdet_mode: LogDetMode::Exact,
            probe_count: default_probes(),
            kappa: default_kappa(),
            activation: default_activation(),
            elu_alpha: None,
            problem: "two_moons".into(),
            problem_seed: 0,
            mixture_components: default_components(),
            straight_through: false,
        };
        match self {
            Preset::Toy => base,
            Preset::Circle => TrainConfig {
                d: 1,
                batch_b: 800,
                problem: "circle".into(),
                ..base
            },
            Preset::Mixture => TrainConfig {
                n: 50,
                d: 50,
                p: 2,
                h: 128,
                lr_tau: 5e-3,
                problem: "mixture".into(),
                ..base
            },
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n", self.n),
            ("p", self.p),
            ("h", self.h),
            ("batch_b", self.batch_b),
            ("epochs_e", self.epochs_e),
            ("steps_s", self.steps_s),
            ("kappa", self.kappa),
            ("inv_max_iter", self.inv_max_iter),
            ("polar_max_iter", self.polar_max_iter),
            ("probe_count", self.probe_count),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        let bound = gamma_bound(self.kappa);
        if !(self.gamma > 0.0 && self.gamma < bound) {
            return Err(Error::GammaBound {
                gamma: self.gamma,
                bound,
                layers: self.kappa,
            });
        }
        if !(self.lr_tau > 0.0) || !(self.penalty_weight >= 0.0) {
            return Err(Error::invalid("lr_tau must be positive and penalty_weight nonnegative"));
        }
        if !(self.inv_tol > 0.0 && self.polar_tol > 0.0) {
            return Err(Error::invalid("solver tolerances must be positive"));
        }
        self.activation()?;
        Ok(())
    }

    pub fn activation(&self) -> Result<StableActivation> {
        StableActivation::from_name(&self.activation, self.elu_alpha)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Ok(Architecture {
            dim: self.n,
            cond_dim: self.d,
            blocks: self.k,
            widen_p: self.p,
            hidden: self.h,
            kappa: self.kappa,
            gamma: self.gamma,
            activation: self.activation()?,
        })
    }

    pub fn polar(&self) -> PolarSettings {
        PolarSettings {
            tol: self.polar_tol,
            max_iter: self.polar_max_iter,
        }
    }

    pub fn invert_settings(&self) -> crate::flow::InvertSettings {
        crate::flow::InvertSettings {
            tol: self.inv_tol,
            max_iter: self.inv_max_iter,
        }
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            penalty_weight: self.penalty_weight,
            polar: self.polar(),
            logdet: self.logdet_mode,
            estimator: EstimatorConfig {
                probe_count: self.probe_count,
                rng_seed: self.seed,
                ..Default::default()
            },
            projection: if self.straight_through {
                ProjectionGrad::StraightThrough
            } else {
                ProjectionGrad::Unrolled
            },
        }
    }

    /// The data source named by `problem`, checked against `n` and `d`.
    pub fn data_source(&self) -> Result<DataSource> {
        let src = match self.problem.as_str() {
            "circle" => DataSource::Inverse(circle_problem()),
            "mixture" => {
                let mut rng = Rng::new(self.problem_seed);
                DataSource::Inverse(mixture_problem(self.n, self.mixture_components, &mut rng)?)
            }
            name => DataSource::Toy(Toy::from_name(name)?),
        };
        let (d, n) = src.dims();
        if (d, n) != (self.d, self.n) {
            return Err(Error::invalid(format!(
                "problem {:?} has (d, n) = ({d}, {n}), config says ({}, {})",
                self.problem, self.d, self.n
            )));
        }
        Ok(src)
    }
}

/// Where training batches come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    Toy(Toy),
    /// `(y, x)` pairs from the joint law of an inverse problem.
    Inverse(InverseProblemSpec),
    /// Resampling with replacement from fixed points (columns).
    Points { cond: Option<Mat>, x: Mat },
}

impl DataSource {
    /// `(d, n)`.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            DataSource::Toy(_) => (0, 2),
            DataSource::Inverse(p) => (p.obs_dim(), p.state_dim()),
            DataSource::Points { cond, x } => (cond.as_ref().map_or(0, Mat::rows), x.rows()),
        }
    }

    pub fn batch(&self, count: usize, rng: &mut Rng) -> Result<(Option<Mat>, Mat)> {
        match self {
            DataSource::Toy(t) => Ok((None, t.sample(count, rng)?)),
            DataSource::Inverse(p) => {
                let (y, x) = p.sample_pairs(count, rng);
                Ok((Some(y), x))
            }
            DataSource::Points { cond, x } => {
                if x.cols() == 0 {
                    return Err(Error::invalid("empty training set"));
                }
                let idx: Vec<usize> = (0..count).map(|_| rng.below(x.cols())).collect();
                let pick = |m: &Mat| Mat::from_fn(m.rows(), count, |i, k| m[(i, idx[k])]);
                Ok((cond.as_ref().map(pick), pick(x)))
            }
        }
    }
}

/// Everything the loss needs besides the model and batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub penalty_weight: f64,
    pub polar: PolarSettings,
    pub logdet: LogDetMode,
    pub estimator: EstimatorConfig,
    pub projection: ProjectionGrad,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            penalty_weight: 1.0,
            polar: PolarSettings::default(),
            logdet: LogDetMode::Exact,
            estimator: EstimatorConfig::default(),
            projection: ProjectionGrad::Unrolled,
        }
    }
}

/// Loss value, its parts and its gradient in [`ProxFlow::params_flat`] order.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub nll: f64,
    pub penalty: f64,
    pub grads: Vec<f64>,
}

/// `−mean log p(x | y) + λ Σ_k ‖T̃_kᵀT̃_k − I‖²` and its gradient.
pub fn nll_loss(
    flow: &ProxFlow,
    cond: Option<&Mat>,
    x: &Mat,
    s: &LossSettings,
    rng: &mut Rng,
) -> Result<LossEval> {
    let b = x.cols();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let mut tape = Tape::new();
    let yv = cond.map(|y| tape.leaf(y.clone()));
    let xv = tape.leaf(x.clone());
    let rec = flow.record_log_density(
        &mut tape,
        yv,
        xv,
        ParamMode::Trainable(s.projection),
        s.polar,
        s.logdet,
        &s.estimator,
        rng,
    )?;
    let total = tape.sum(rec.log_density);
    let nll = tape.scale(total, -1.0 / b as f64);
    let (loss, penalty) = match rec.penalty {
        Some(p) if s.penalty_weight > 0.0 => {
            let w = tape.scale(p, s.penalty_weight);
            (tape.add(nll, w), tape.scalar(p))
        }
        Some(p) => (nll, tape.scalar(p)),
        None => (nll, 0.0),
    };
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { loss: value, batch: b });
    }
    let grads = tape.backward(loss, Mat::filled(1, 1, 1.0))?.params_flat(&tape);
    Ok(LossEval {
        loss: value,
        nll: tape.scalar(nll),
        penalty,
        grads,
    })
}

/// `Σ_k ‖T̃_kᵀT̃_k − I‖²` over every prox layer of every block.
pub fn orthogonality_penalty(flow: &ProxFlow) -> f64 {
    flow.blocks
        .iter()
        .flat_map(|b| b.phi.blocks.iter())
        .map(|l| orth_defect(l.t.raw()).powi(2))
        .sum()
}

/// Loss value with exact log-determinants and no tape.
pub fn nll_value(flow: &ProxFlow, cond: Option<&Mat>, x: &Mat, penalty_weight: f64) -> Result<f64> {
    let (_, ld) = flow.log_density_cond(cond, x)?;
    let nll = -ld.iter().sum::<f64>() / x.cols() as f64;
    Ok(nll + penalty_weight * orthogonality_penalty(flow))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of the entries where `mask` is set (all when `None`).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, mask: Option<&[bool]>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || mask.is_some_and(|m| m.len() != self.m.len()) {
            return Err(Error::shape("adam_step", "parameter, gradient and state lengths differ"));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Rescale `grads` (restricted to `mask`) to norm at most [`CLIP_NORM`];
/// returns the norm before clipping.
pub fn clip_gradient(grads: &mut [f64], mask: &[bool]) -> f64 {
    let norm = grads
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(g, _)| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > CLIP_NORM {
        let s = CLIP_NORM / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub penalty: f64,
}

pub fn write_history<W: std::io::Write>(w: W, history: &[LossRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "loss", "penalty"])?;
    for r in history {
        out.write_record([r.step.to_string(), format!("{:?}", r.loss), format!("{:?}", r.penalty)])?;
    }
    out.flush()?;
    Ok(())
}

/// A trained or initialized model with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: Option<TrainConfig>,
    pub flow: ProxFlow,
}

impl Model {
    pub fn conditional(&self) -> Result<CondProxFlow> {
        CondProxFlow::from_flow(self.flow.clone())
    }
}

/// Result of [`train_loop`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<LossRecord>,
    /// Steps whose gradient was clipped.
    pub clipped: Vec<usize>,
}

/// Run `epochs_e × steps_s` Adam steps on batches from `source`. The
/// actnorms are fitted to the first batch; `on_epoch` sees the model after
/// every epoch.
pub fn train_loop(
    cfg: &TrainConfig,
    source: &DataSource,
    mut on_epoch: impl FnMut(usize, &Model, &[LossRecord]) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.dims() != (cfg.d, cfg.n) {
        return Err(Error::invalid("data source dimensions do not match the config"));
    }
    let root = Rng::new(cfg.seed);
    let mut init_rng = root.derive(1);
    let mut data_rng = root.derive(2);
    let mut est_rng = root.derive(3);
    let mut flow = ProxFlow::random(&cfg.architecture()?, false, &mut init_rng)?;
    let settings = cfg.loss_settings();
    let polar = cfg.polar();
    let mask = flow.trainable_mask();
    let mut params = flow.params_flat();
    let mut adam = AdamState::new(params.len());
    let mut history = Vec::with_capacity(cfg.epochs_e * cfg.steps_s);
    let mut clipped = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs_e {
        for _ in 0..cfg.steps_s {
            let (y, x) = source.batch(cfg.batch_b, &mut data_rng)?;
            if step == 0 {
                flow.initialize_actnorms(y.as_ref(), &x).map_err(|e| e.at_step(step))?;
                params = flow.params_flat();
            }
            let mut eval = nll_loss(&flow, y.as_ref(), &x, &settings, &mut est_rng).map_err(|e| e.at_step(step))?;
            let norm = clip_gradient(&mut eval.grads, &mask);
            if norm > CLIP_NORM {
                log::warn!("step {step}: gradient norm {norm:.3e} clipped to {CLIP_NORM}");
                clipped.push(step);
            }
            adam.step(&mut params, &eval.grads, cfg.lr_tau, Some(&mask))?;
            flow.set_params_flat(&params, polar).map_err(|e| e.at_step(step))?;
            history.push(LossRecord {
                step,
                loss: eval.loss,
                penalty: eval.penalty,
            });
            step += 1;
        }
        let model = Model {
            config: Some(cfg.clone()),
            flow: flow.clone(),
        };
        on_epoch(epoch, &model, &history)?;
    }
    Ok(TrainOutcome {
        model: Model {
            config: Some(cfg.clone()),
            flow,
        },
        history,
        clipped,
    })
}

/// Comparison of tape gradients with fourth-order central differences of
/// [`nll_value`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Relative error `|a − f| / max(|a|, |f|, 1e-6)` over the trainable
/// parameters listed in `indices` (all when `None`), exact log-dets.
pub fn gradient_check(
    flow: &ProxFlow,
    cond: Option<&Mat>,
    x: &Mat,
    penalty_weight: f64,
    step: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheck> {
    let settings = LossSettings {
        penalty_weight,
        ..Default::default()
    };
    let eval = nll_loss(flow, cond, x, &settings, &mut Rng::new(0))?;
    let base = flow.params_flat();
    let mask = flow.trainable_mask();
    let all: Vec<usize> = (0..base.len()).filter(|&i| mask[i]).collect();
    let idx = indices.map_or(all, |v| v.iter().copied().filter(|&i| i < base.len() && mask[i]).collect());
    let mut probe = flow.clone();
    let polar = PolarSettings::default();
    let mut eval_at = |i: usize, delta: f64| -> Result<f64> {
        let mut p = base.clone();
        p[i] += delta;
        probe.set_params_flat(&p, polar)?;
        nll_value(&probe, cond, x, penalty_weight)
    };
    let mut worst = (0.0, 0);
    for &i in &idx {
        let near = eval_at(i, step)? - eval_at(i, -step)?;
        let far = eval_at(i, 2.0 * step)? - eval_at(i, -2.0 * step)?;
        let fd = (8.0 * near - far) / (12.0 * step);
        let a = eval.grads[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheck {
        checked: idx.len(),
        max_rel_error: worst.0,
        worst_index: worst.1,
    })
}
