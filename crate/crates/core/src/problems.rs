//! Data generators and ground-truth oracles.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, inverse, Mat, Rng};
use std::f64::consts::PI;

/// Two-dimensional benchmark densities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Toy {
    /// Equal-weight Gaussians (std 0.15) at eight points on the radius-2 circle.
    EightModes,
    /// Interleaved half circles with Gaussian noise 0.1, centred.
    TwoMoons,
    /// Radii 1 and 2 with radial noise 0.08.
    TwoCircles,
    /// The eight dark cells of a 4x4 board on `[-2, 2]²`.
    Checkerboard,
}

impl Toy {
    pub const ALL: [Toy; 4] = [Toy::EightModes, Toy::TwoMoons, Toy::TwoCircles, Toy::Checkerboard];

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "eight_modes" => Ok(Toy::EightModes),
            "two_moons" => Ok(Toy::TwoMoons),
            "two_circles" => Ok(Toy::TwoCircles),
            "checkerboard" => Ok(Toy::Checkerboard),
            other => Err(Error::invalid(format!("unknown toy density {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Toy::EightModes => "eight_modes",
            Toy::TwoMoons => "two_moons",
            Toy::TwoCircles => "two_circles",
            Toy::Checkerboard => "checkerboard",
        }
    }

    /// `count` i.i.d. samples as columns of a `2 x count` matrix.
    pub fn sample(self, count: usize, rng: &mut Rng) -> Result<Mat> {
        if count == 0 {
            return Err(Error::invalid("sample count must be positive"));
        }
        let mut out = Mat::zeros(2, count);
        for k in 0..count {
            let (a, b) = match self {
                Toy::EightModes => {
                    let m = rng.below(8) as f64 * PI / 4.0;
                    (2.0 * m.cos() + 0.15 * rng.normal(), 2.0 * m.sin() + 0.15 * rng.normal())
                }
                Toy::TwoMoons => {
                    let th = PI * rng.uniform();
                    let (a, b) = if rng.below(2) == 0 {
                        (th.cos(), th.sin())
                    } else {
                        (1.0 - th.cos(), 0.5 - th.sin())
                    };
                    (a - 0.5 + 0.1 * rng.normal(), b - 0.25 + 0.1 * rng.normal())
                }
                Toy::TwoCircles => {
                    let r = if rng.below(2) == 0 { 1.0 } else { 2.0 } + 0.08 * rng.normal();
                    let th = 2.0 * PI * rng.uniform();
                    (r * th.cos(), r * th.sin())
                }
                Toy::Checkerboard => {
                    let cell = rng.below(8);
                    let row = cell / 2;
                    let col = 2 * (cell % 2) + row % 2;
                    (
                        -2.0 + col as f64 + rng.uniform(),
                        -2.0 + row as f64 + rng.uniform(),
                    )
                }
            };
            out[(0, k)] = a;
            out[(1, k)] = b;
        }
        Ok(out)
    }
}

pub fn sample_toy(name: &str, count: usize, rng: &mut Rng) -> Result<Mat> {
    Toy::from_name(name)?.sample(count, rng)
}

/// Finite mixture of Gaussians on `R^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Mat>,
    chols: Vec<Mat>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Mat>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || means.len() != covs.len() {
            return Err(Error::invalid("mixture needs matching, nonempty weights, means and covariances"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mixture weights must be nonnegative and sum to 1 (sum {total})")));
        }
        let n = means[0].len();
        let mut chols = Vec::with_capacity(covs.len());
        for (m, c) in means.iter().zip(&covs) {
            if m.len() != n || c.shape() != (n, n) {
                return Err(Error::shape("GaussianMixture", "component dimensions differ"));
            }
            chols.push(cholesky(c)?);
        }
        Ok(GaussianMixture {
            weights,
            means,
            covs,
            chols,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Mat] {
        &self.covs
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (a, b) in m.iter_mut().zip(mu) {
                *a += w * b;
            }
        }
        m
    }

    /// Component index by inverse CDF, then `m + L ξ`.
    pub fn sample(&self, count: usize, rng: &mut Rng) -> Mat {
        let n = self.dim();
        let mut out = Mat::zeros(n, count);
        for k in 0..count {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut c = self.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    c = i;
                    break;
                }
            }
            let xi = rng.normal_vec(n);
            let l = &self.chols[c];
            for i in 0..n {
                out[(i, k)] = self.means[c][i] + (0..=i).map(|j| l[(i, j)] * xi[j]).sum::<f64>();
            }
        }
        out
    }

    /// Log-density of each column via log-sum-exp over components.
    pub fn logpdf(&self, x: &Mat) -> Result<Vec<f64>> {
        if x.rows() != self.dim() {
            return Err(Error::shape("gmm_logpdf", format!("{} rows for a {}-dim mixture", x.rows(), self.dim())));
        }
        let n = self.dim();
        let terms: Vec<Vec<f64>> = (0..self.len())
            .map(|c| {
                let l = &self.chols[c];
                let logdet: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
                let lw = self.weights[c].ln();
                (0..x.cols())
                    .map(|k| {
                        let r: Vec<f64> = (0..n).map(|i| x[(i, k)] - self.means[c][i]).collect();
                        lw + gaussian_log_kernel(l, &r) - logdet - 0.5 * n as f64 * (2.0 * PI).ln()
                    })
                    .collect()
            })
            .collect();
        Ok((0..x.cols())
            .map(|k| log_sum_exp(terms.iter().map(|t| t[k])))
            .collect())
    }
}

/// `−½ rᵀ (LLᵀ)⁻¹ r` by forward substitution.
fn gaussian_log_kernel(l: &Mat, r: &[f64]) -> f64 {
    let n = r.len();
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|j| l[(i, j)] * z[j]).sum();
        z[i] = (r[i] - s) / l[(i, i)];
    }
    -0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

pub fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn gmm_sample(mix: &GaussianMixture, count: usize, rng: &mut Rng) -> Mat {
    mix.sample(count, rng)
}

pub fn gmm_logpdf(mix: &GaussianMixture, x: &Mat) -> Result<Vec<f64>> {
    mix.logpdf(x)
}

/// Forward operator of an inverse problem.
#[derive(Clone, Debug, PartialEq)]
pub enum ForwardOp {
    /// `F(x) = x₁`.
    FirstCoordinate,
    /// `F(x) = A x`.
    Linear(Mat),
}

impl ForwardOp {
    pub fn apply(&self, x: &Mat) -> Mat {
        match self {
            ForwardOp::FirstCoordinate => x.row_slice(0, 1),
            ForwardOp::Linear(a) => a.matmul(x),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            ForwardOp::FirstCoordinate => 1,
            ForwardOp::Linear(a) => a.rows(),
        }
    }
}

/// Prior law of an inverse problem.
#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    /// Uniform on the unit circle convolved with `N(0, noise² I₂)`.
    NoisyCircle { noise: f64 },
    Mixture(GaussianMixture),
}

/// `Y = F(X) + η`, `η ~ N(0, noise_std² I)`, `X ~ prior`.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseProblemSpec {
    pub forward: ForwardOp,
    pub noise_std: f64,
    pub prior: Prior,
}

pub fn circle_problem() -> InverseProblemSpec {
    InverseProblemSpec {
        forward: ForwardOp::FirstCoordinate,
        noise_std: 0.02,
        prior: Prior::NoisyCircle { noise: 0.1 },
    }
}

/// `A = 0.1·diag(1, 1/2, …, 1/n)`, noise 0.05, equal-weight prior with
/// means drawn from `U[−1, 1]^n` and covariances `0.01² I`.
pub fn mixture_problem(n: usize, components: usize, rng: &mut Rng) -> Result<InverseProblemSpec> {
    if n == 0 || components == 0 {
        return Err(Error::invalid("dimension and component count must be positive"));
    }
    let a = Mat::diag(&(1..=n).map(|i| 0.1 / i as f64).collect::<Vec<_>>());
    let means = (0..components)
        .map(|_| (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
        .collect();
    let covs = vec![Mat::identity(n).scale(0.01 * 0.01); components];
    let weights = vec![1.0 / components as f64; components];
    let mix = GaussianMixture::new(renormalized(weights), means, covs)?;
    Ok(InverseProblemSpec {
        forward: ForwardOp::Linear(a),
        noise_std: 0.05,
        prior: Prior::Mixture(mix),
    })
}

fn renormalized(mut w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

impl InverseProblemSpec {
    pub fn state_dim(&self) -> usize {
        match &self.prior {
            Prior::NoisyCircle { .. } => 2,
            Prior::Mixture(m) => m.dim(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.forward.out_dim()
    }

    pub fn sample_prior(&self, count: usize, rng: &mut Rng) -> Mat {
        match &self.prior {
            Prior::NoisyCircle { noise } => Mat::from_columns(
                &(0..count)
                    .map(|_| {
                        let th = 2.0 * PI * rng.uniform();
                        vec![th.cos() + noise * rng.normal(), th.sin() + noise * rng.normal()]
                    })
                    .collect::<Vec<_>>(),
            )
            .expect("equal-length columns"),
            Prior::Mixture(m) => m.sample(count, rng),
        }
    }

    /// `y = F(x) + η` for each column of `x`.
    pub fn observe(&self, x: &Mat, rng: &mut Rng) -> Mat {
        let f = self.forward.apply(x);
        let noise = rng.normal_mat(f.rows(), f.cols()).scale(self.noise_std);
        f.add(&noise)
    }

    /// `(y, x)` pairs drawn from the joint law.
    pub fn sample_pairs(&self, count: usize, rng: &mut Rng) -> (Mat, Mat) {
        let x = self.sample_prior(count, rng);
        let y = self.observe(&x, rng);
        (y, x)
    }

    /// `count` exact draws from `P(X | Y = y)`: closed form for mixture
    /// priors with linear forward maps, rejection from the prior otherwise.
    pub fn sample_posterior(&self, y: &[f64], count: usize, rng: &mut Rng) -> Result<Mat> {
        if y.len() != self.obs_dim() {
            return Err(Error::shape("sample_posterior", format!("observation of length {}", y.len())));
        }
        match (&self.prior, &self.forward) {
            (Prior::Mixture(m), ForwardOp::Linear(a)) => {
                Ok(mixture_posterior(m, a, self.noise_std, y)?.sample(count, rng))
            }
            _ => self.rejection_posterior(y, count, rng),
        }
    }

    fn rejection_posterior(&self, y: &[f64], count: usize, rng: &mut Rng) -> Result<Mat> {
        let s2 = self.noise_std * self.noise_std;
        let mut cols = Vec::with_capacity(count);
        let mut tried = 0usize;
        while cols.len() < count {
            let x = self.sample_prior(256, rng);
            let f = self.forward.apply(&x);
            for k in 0..x.cols() {
                let r2: f64 = (0..f.rows()).map(|i| (f[(i, k)] - y[i]).powi(2)).sum();
                if rng.uniform() < (-0.5 * r2 / s2).exp() && cols.len() < count {
                    cols.push(x.column(k));
                }
            }
            tried += 256;
            if tried > 1_000_000_000 {
                return Err(Error::invalid("posterior rejection sampler made no progress"));
            }
        }
        Mat::from_columns(&cols)
    }
}

/// Posterior of a Gaussian-mixture prior under `y = A x + N(0, σ² I)`.
pub fn mixture_posterior(prior: &GaussianMixture, a: &Mat, sigma: f64, y: &[f64]) -> Result<GaussianMixture> {
    let n = prior.dim();
    if a.cols() != n || a.rows() != y.len() {
        return Err(Error::shape("mixture_posterior", format!("A is {:?}, y has {}", a.shape(), y.len())));
    }
    let s2 = sigma * sigma;
    let ata = a.t_matmul(a).scale(1.0 / s2);
    let aty = a.t_matmul(&Mat::col_vector(y)).scale(1.0 / s2);
    let yv = Mat::col_vector(y);
    let d = y.len();
    let mut logw = Vec::with_capacity(prior.len());
    let mut means = Vec::with_capacity(prior.len());
    let mut covs = Vec::with_capacity(prior.len());
    for ((w, m), c) in prior.weights.iter().zip(&prior.means).zip(&prior.covs) {
        let cinv = inverse(c)?;
        let post = symmetrize(&inverse(&cinv.add(&ata))?);
        let mv = Mat::col_vector(m);
        let mean = post.matmul(&cinv.matmul(&mv).add(&aty));
        // log N(y; A m, A Σ Aᵀ + σ² I)
        let pred = a.matmul(c).matmul_t(a).add_diag(s2);
        let l = cholesky(&symmetrize(&pred))?;
        let r: Vec<f64> = (0..d).map(|i| yv[(i, 0)] - a.matmul(&mv)[(i, 0)]).collect();
        let logdet: f64 = (0..d).map(|i| l[(i, i)].ln()).sum();
        logw.push(w.ln() + gaussian_log_kernel(&l, &r) - logdet - 0.5 * d as f64 * (2.0 * PI).ln());
        means.push(mean.into_vec());
        covs.push(post);
    }
    let z = log_sum_exp(logw.iter().copied());
    let weights = renormalized(logw.iter().map(|l| (l - z).exp()).collect());
    GaussianMixture::new(weights, means, covs)
}

fn symmetrize(m: &Mat) -> Mat {
    m.add(&m.transpose()).scale(0.5)
}

/// `Σᵢ log q(xᵢ)` with `q = α/(2α+2)` on `[−1, 1]` and
/// `α/(2α+2)·exp(−α·dist(x, [−1, 1]))` outside.
pub fn relaxed_uniform_logpdf(x: &[f64], alpha: f64) -> Result<f64> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::invalid("alpha must be positive"));
    }
    let c = (alpha / (2.0 * alpha + 2.0)).ln();
    Ok(x.iter().map(|v| c - alpha * (v.abs() - 1.0).max(0.0)).sum())
}
