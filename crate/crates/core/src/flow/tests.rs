use super::*;
use crate::pnn::{ProxBlock, StiefelParam};

fn layer(t: Mat, bias: &[f64], act: StableActivation) -> ProxBlock {
    let polar = PolarSettings::default();
    ProxBlock::new(StiefelParam::new(t, polar).unwrap(), Mat::col_vector(bias), act).unwrap()
}

fn single(t: Mat, bias: &[f64], act: StableActivation, p: usize, gamma: f64, an: ActNorm) -> ResidualBlock {
    let n = an.dim();
    let pnn = Pnn::new(vec![layer(t, bias, act)], p, n).unwrap();
    ResidualBlock::new(gamma, pnn, an).unwrap()
}

fn random_block(n: usize, p: usize, h: usize, kappa: usize, gamma: f64, rng: &mut Rng) -> ResidualBlock {
    let mut pnn = Pnn::random(n, p, h, kappa, StableActivation::default(), rng).unwrap();
    for b in &mut pnn.blocks {
        b.bias = rng.normal_mat(h, 1).scale(0.3);
    }
    let scale: Vec<f64> = (0..n).map(|_| 0.5 + rng.uniform()).collect();
    let shift: Vec<f64> = rng.normal_vec(n);
    ResidualBlock::new(gamma, pnn, ActNorm::new(scale, shift).unwrap()).unwrap()
}

fn fd_jacobian(f: impl Fn(&Mat) -> Mat, x: &Mat, h: f64) -> Mat {
    let n = x.rows();
    let m = f(x).rows();
    let mut j = Mat::zeros(m, n);
    for c in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[(c, 0)] += h;
        xm[(c, 0)] -= h;
        let d = f(&xp).sub(&f(&xm)).scale(0.5 / h);
        for r in 0..m {
            j[(r, c)] = d[(r, 0)];
        }
    }
    j
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn identity_network_doubles_input() {
    let blk = single(Mat::identity(2), &[0.0, 0.0], StableActivation::Identity, 1, 1.0, ActNorm::identity(2));
    let x = Mat::col_vector(&[0.3, -1.2]);
    assert!(blk.forward(&x).unwrap().sub(&x.scale(2.0)).max_abs() < 1e-12);
    assert_eq!(blk.forward(&Mat::zeros(2, 1)).unwrap().max_abs(), 0.0);
}

#[test]
fn zero_is_fixed_with_zero_biases() {
    let mut rng = Rng::new(5);
    let pnn = Pnn::random(3, 2, 8, 3, StableActivation::default(), &mut rng).unwrap();
    let blk = ResidualBlock::new(1.5, pnn, ActNorm::identity(3)).unwrap();
    assert_eq!(blk.forward(&Mat::zeros(3, 1)).unwrap().max_abs(), 0.0);
}

#[test]
fn identity_activation_inverse_is_analytic() {
    let mut rng = Rng::new(9);
    let t = crate::linalg::polar_project(&rng.normal_mat(3, 3), 1e-12, 50).unwrap();
    let b = [0.4, -0.2, 0.9];
    let gamma = 0.8;
    let blk = single(t.clone(), &b, StableActivation::Identity, 1, gamma, ActNorm::identity(3));
    let y = rng.normal_mat(3, 4);
    let x = blk.invert(&y, 1e-12, 1000).unwrap();
    let tb = t.t_matmul(&Mat::col_vector(&b)).scale(gamma);
    let want = y.sub(&Mat::from_fn(3, 4, |i, _| tb[(i, 0)])).scale(1.0 / (1.0 + gamma));
    assert!(x.sub(&want).max_abs() < 1e-10);
}

#[test]
fn round_trip_and_iteration_count() {
    let mut rng = Rng::new(11);
    let blk = random_block(2, 1, 6, 3, 1.0, &mut rng);
    assert!((blk.contraction() - 0.6).abs() < 1e-15);
    let x = rng.normal_mat(2, 20);
    let y = blk.forward(&x).unwrap();
    let (back, trace) = blk.invert_traced(&y, 1e-9, 1000).unwrap();
    assert!(back.sub(&x).max_abs() <= 1e-8);
    assert!(trace.iterations() <= 60, "{}", trace.iterations());
}

#[test]
fn observed_contraction_rate_within_bound() {
    let mut rng = Rng::new(12);
    for gamma in [0.5, 1.0, 1.5, 1.9] {
        let blk = random_block(4, 2, 12, 3, gamma, &mut rng);
        let y = blk.forward(&rng.normal_mat(4, 1)).unwrap();
        let (_, tr) = blk.invert_traced(&y, 1e-12, 20_000).unwrap();
        let r = &tr.residuals;
        let (a, b) = (2, r.len() - 1);
        let rate = (r[b] / r[a]).powf(1.0 / (b - a) as f64);
        assert!(rate <= blk.contraction() + 0.01, "gamma {gamma}: {rate} vs {}", blk.contraction());
    }
}

#[test]
fn gamma_bound_enforced_strictly() {
    let mut rng = Rng::new(1);
    let pnn = Pnn::random(2, 1, 4, 3, StableActivation::default(), &mut rng).unwrap();
    for bad in [2.0, 2.5, 0.0, -1.0] {
        assert!(matches!(
            ResidualBlock::new(bad, pnn.clone(), ActNorm::identity(2)),
            Err(Error::GammaBound { .. })
        ));
    }
    assert!(ResidualBlock::new(1.99, pnn, ActNorm::identity(2)).is_ok());
    let one = Pnn::random(2, 1, 4, 1, StableActivation::default(), &mut rng).unwrap();
    assert!(ResidualBlock::new(50.0, one, ActNorm::identity(2)).is_ok());
}

#[test]
fn inversion_failure_reports_sample() {
    let mut rng = Rng::new(2);
    let blk = random_block(3, 1, 5, 3, 1.9, &mut rng);
    let y = blk.forward(&rng.normal_mat(3, 2)).unwrap();
    match blk.invert(&y, 1e-12, 3) {
        Err(Error::AtSample { source, .. }) => {
            assert!(matches!(*source, Error::InversionNotConverged { iterations: 3, .. }))
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn uninitialized_actnorm_is_rejected() {
    let mut rng = Rng::new(2);
    let pnn = Pnn::random(2, 1, 4, 1, StableActivation::default(), &mut rng).unwrap();
    let blk = ResidualBlock::new(1.0, pnn, ActNorm::uninitialized(2)).unwrap();
    assert!(matches!(blk.forward(&Mat::zeros(2, 1)), Err(Error::ActNormUninitialized)));
}

#[test]
fn exact_logdet_closed_forms() {
    let gamma = 0.7;
    let blk = single(Mat::identity(3), &[0.0; 3], StableActivation::Identity, 1, gamma, ActNorm::identity(3));
    let x = Mat::col_vector(&[0.1, 0.2, -0.5]);
    assert!((blk.logdet_exact(&x).unwrap()[0] - 3.0 * (1.0 + gamma).ln()).abs() < 1e-12);
    let an = ActNorm::new(vec![2.0, 2.0], vec![0.0, 1.0]).unwrap();
    let blk = single(Mat::identity(2), &[0.0; 2], StableActivation::Identity, 1, gamma, an);
    let want = 2.0 * (1.0 + gamma).ln() + 2.0 * 2f64.ln();
    assert!((blk.logdet_exact(&Mat::zeros(2, 1)).unwrap()[0] - want).abs() < 1e-12);
}

#[test]
fn exact_logdet_matches_finite_differences() {
    let mut rng = Rng::new(21);
    for n in [2, 3] {
        let blk = random_block(n, 2, 7, 3, 1.3, &mut rng);
        let x = rng.normal_mat(n, 1);
        let fd = fd_jacobian(|u| blk.forward(u).unwrap(), &x, 1e-5);
        let j = &blk.jacobians(&x).unwrap()[0];
        assert!(j.sub(&fd).max_abs() < 1e-8);
        let want = lu_logabsdet(&fd).unwrap().value();
        assert!((blk.logdet_exact(&x).unwrap()[0] - want).abs() < 1e-8);
    }
}

#[test]
fn single_layer_formula() {
    let gamma = 1.3;
    let mut rng = Rng::new(4);
    let t = crate::linalg::polar_project(&rng.normal_mat(2, 3), 1e-12, 50).unwrap();
    let blk = single(t.clone(), &[0.5, -0.1], StableActivation::Identity, 1, gamma, ActNorm::identity(3));
    let x = rng.normal_mat(3, 3);
    for v in blk.logdet_single_layer(&x).unwrap() {
        assert!((v - 2.0 * (1.0 + gamma).ln()).abs() < 1e-12);
    }
    let blk = single(t, &[0.0, 0.0], StableActivation::Tanh, 1, gamma, ActNorm::identity(3));
    let v = blk.logdet_single_layer(&Mat::zeros(3, 1)).unwrap()[0];
    assert!((v - 2.0 * (1.0 + gamma).ln()).abs() < 1e-12);
}

#[test]
fn single_layer_matches_exact() {
    let mut rng = Rng::new(8);
    for (n, h) in [(2, 2), (3, 2), (4, 4), (5, 3)] {
        let blk = random_block(n, 1, h, 1, 3.0, &mut rng);
        let x = rng.normal_mat(n, 10);
        let a = blk.logdet_single_layer(&x).unwrap();
        let b = blk.logdet_exact(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-10, "{u} vs {v}");
        }
    }
}

#[test]
fn single_layer_preconditions() {
    let mut rng = Rng::new(8);
    let x = Mat::zeros(2, 1);
    assert!(random_block(2, 1, 3, 1, 1.0, &mut rng).logdet_single_layer(&x).is_err());
    assert!(random_block(2, 2, 2, 1, 1.0, &mut rng).logdet_single_layer(&x).is_err());
    assert!(random_block(2, 1, 2, 2, 1.0, &mut rng).logdet_single_layer(&x).is_err());
}

/// `Ψ(x) = x/2` via `p = 2`, `T = [I 0]` and identity activation, so
/// `R = 2Ψ − x ≡ 0`.
fn flat_r_block(n: usize, gamma: f64) -> ResidualBlock {
    let t = Mat::from_fn(n, 2 * n, |i, j| if i == j { 1.0 } else { 0.0 });
    single(t, &vec![0.0; n], StableActivation::Identity, 2, gamma, ActNorm::identity(n))
}

#[test]
fn estimator_exact_when_r_is_constant() {
    let gamma = 0.9;
    let blk = flat_r_block(3, gamma);
    let x = Rng::new(1).normal_mat(3, 5);
    let cfg = EstimatorConfig {
        probe_count: 4,
        ..Default::default()
    };
    let want = 3.0 * (1.0 + gamma - gamma * 0.5).ln();
    for v in blk.logdet_estimate(&x, &cfg, &mut Rng::new(2)).unwrap() {
        assert!((v - want).abs() < 1e-14);
    }
    assert!((blk.logdet_exact(&x).unwrap()[0] - want).abs() < 1e-12);
    let g = blk.logdet_estimate_grad(&x.col_slice(0, 1), &cfg, &mut Rng::new(2)).unwrap();
    let want_g = 3.0 * 0.5 / (1.0 + gamma - gamma * 0.5);
    assert!((g[0] - want_g).abs() < 1e-12, "{} vs {want_g}", g[0]);
}

#[test]
fn estimator_rejects_zero_probes() {
    let blk = flat_r_block(2, 1.0);
    let cfg = EstimatorConfig {
        probe_count: 0,
        ..Default::default()
    };
    let x = Mat::zeros(2, 1);
    assert!(blk.logdet_estimate(&x, &cfg, &mut Rng::new(0)).is_err());
    assert!(blk.logdet_estimate_grad(&x, &cfg, &mut Rng::new(0)).is_err());
}

#[test]
fn estimator_is_unbiased() {
    let mut rng = Rng::new(31);
    let blk = random_block(3, 1, 6, 3, 0.5, &mut rng);
    let x = rng.normal_mat(3, 1);
    let exact = blk.logdet_exact(&x).unwrap()[0];
    let reps = Mat::from_fn(3, 10_000, |i, _| x[(i, 0)]);
    let est = blk
        .logdet_estimate(&reps, &EstimatorConfig::default(), &mut Rng::new(32))
        .unwrap();
    let (m, se) = mean_se(&est);
    assert!((m - exact).abs() <= 3.0 * se, "{m} ± {se} vs {exact}");
}

#[test]
fn gradient_estimator_is_unbiased() {
    let mut rng = Rng::new(41);
    let blk = random_block(2, 1, 4, 3, 0.5, &mut rng);
    let x = rng.normal_mat(2, 1);
    let exact = blk.logdet_exact_grad(&x).unwrap();
    let batch = 50;
    let reps = Mat::from_fn(2, batch, |i, _| x[(i, 0)]);
    let mut draws: Vec<Vec<f64>> = Vec::new();
    let mut erng = Rng::new(42);
    for _ in 0..60 {
        let g = blk
            .logdet_estimate_grad(&reps, &EstimatorConfig::default(), &mut erng)
            .unwrap();
        draws.push(g.iter().map(|v| v / batch as f64).collect());
    }
    for (j, &e) in exact.iter().enumerate() {
        let col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
        let (m, se) = mean_se(&col);
        assert!((m - e).abs() <= 3.0 * se + 1e-10, "param {j}: {m} ± {se} vs {e}");
    }
}

#[test]
fn empty_flow_is_standard_normal() {
    let flow = ProxFlow::new(2, vec![]).unwrap();
    let x = Mat::zeros(2, 1);
    let (z, ld) = flow.log_density(&x).unwrap();
    assert_eq!(z, x);
    assert!((ld[0] + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    let mut a = Rng::new(6);
    let s = flow.sample(5, &mut a, InvertSettings::default()).unwrap();
    assert_eq!(s, Rng::new(6).normal_mat(2, 5));
}

fn arch(dim: usize, blocks: usize, gamma: f64) -> Architecture {
    Architecture {
        dim,
        cond_dim: 0,
        blocks,
        widen_p: 2,
        hidden: 10,
        kappa: 3,
        gamma,
        activation: StableActivation::default(),
    }
}

fn randomize(flow: &mut ProxFlow, rng: &mut Rng) {
    for b in &mut flow.blocks {
        for l in &mut b.phi.blocks {
            l.bias = rng.normal_mat(l.hidden(), 1).scale(0.3);
        }
        let n = b.dim();
        b.actnorm = ActNorm::new(
            (0..n).map(|_| 0.5 + rng.uniform()).collect(),
            rng.normal_vec(n),
        )
        .unwrap();
    }
}

#[test]
fn flow_round_trip_and_finite_density() {
    let mut rng = Rng::new(50);
    let mut flow = ProxFlow::random(&arch(3, 3, 1.2), true, &mut rng).unwrap();
    randomize(&mut flow, &mut rng);
    let x = flow.sample(1000, &mut Rng::new(51), InvertSettings::default()).unwrap();
    let z = Rng::new(51).normal_mat(3, 1000);
    assert!(flow.forward(&x).unwrap().sub(&z).max_abs() <= 1e-6);
    let (_, ld) = flow.log_density(&x).unwrap();
    assert!(ld.iter().all(|v| v.is_finite()));
}

#[test]
fn flow_logdet_is_additive() {
    let mut rng = Rng::new(60);
    for n in 2..=4 {
        let mut flow = ProxFlow::random(&arch(n, 3, 1.5), true, &mut rng).unwrap();
        randomize(&mut flow, &mut rng);
        let x = rng.normal_mat(n, 6);
        let (z, ld) = flow.log_density(&x).unwrap();
        let whole = flow.logdet_whole(&x).unwrap();
        let base = standard_normal_logpdf(&z);
        for k in 0..6 {
            assert!((ld[k] - base[k] - whole[k]).abs() < 1e-10);
        }
    }
}

#[test]
fn non_finite_output_names_block() {
    let mut rng = Rng::new(70);
    let mut flow = ProxFlow::random(&arch(2, 2, 1.0), true, &mut rng).unwrap();
    flow.blocks[1].actnorm = ActNorm::new(vec![1e300, 1e300], vec![0.0, 0.0]).unwrap();
    let x = Mat::filled(2, 1, 1e10);
    assert!(matches!(flow.forward(&x), Err(Error::NonFinite { block: 1 })));
}

#[test]
fn params_round_trip() {
    let mut rng = Rng::new(80);
    let mut flow = ProxFlow::random(&arch(2, 2, 1.0), true, &mut rng).unwrap();
    randomize(&mut flow, &mut rng);
    let p = flow.params_flat();
    assert_eq!(p.len(), flow.param_count());
    let mask = flow.trainable_mask();
    assert_eq!(mask.iter().filter(|m| !**m).count(), 2);
    let mut other = ProxFlow::random(&arch(2, 2, 1.0), true, &mut rng).unwrap();
    other.set_params_flat(&p, PolarSettings::default()).unwrap();
    assert_eq!(other.params_flat(), p);
    let x = rng.normal_mat(2, 4);
    assert_eq!(other.log_density(&x).unwrap().1, flow.log_density(&x).unwrap().1);
}

#[test]
fn recorded_density_matches_numeric() {
    let mut rng = Rng::new(90);
    let mut flow = ProxFlow::random(&arch(2, 2, 1.4), true, &mut rng).unwrap();
    randomize(&mut flow, &mut rng);
    let x = rng.normal_mat(2, 7);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let rec = flow
        .record_log_density(
            &mut tape,
            None,
            xv,
            ParamMode::Frozen,
            PolarSettings::default(),
            LogDetMode::Exact,
            &EstimatorConfig::default(),
            &mut rng,
        )
        .unwrap();
    let want = flow.log_density(&x).unwrap().1;
    let got = tape.value(rec.log_density);
    for k in 0..7 {
        assert!((got[(0, k)] - want[k]).abs() < 1e-11);
    }
}
