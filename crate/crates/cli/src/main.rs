use clap::{Args, Parser, Subcommand, ValueEnum};
use proxflow::checkpoint::write_atomic;
use proxflow::conditional::broadcast_condition;
use proxflow::io::{paired_headers, read_points_file, split_paired, state_headers, write_points_file};
use proxflow::linalg::{Mat, Rng};
use proxflow::metrics::{empirical_kl, empirical_w2, GridSpec, MetricReport};
use proxflow::problems::{circle_problem, mixture_problem, InverseProblemSpec, Toy};
use proxflow::train::{gradient_check, train_loop, write_history, Model, Preset, TrainConfig};
use proxflow::{Error, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "proxflow", version, about = "Proximal residual flows: training, sampling and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a flow and write config, checkpoint, loss history and manifest.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Log-density of each input point.
    Density(MapArgs),
    /// Map latent points back to data space (or forward with --forward).
    Invert(InvertArgs),
    /// Samples from a problem's ground truth.
    Oracle(OracleArgs),
    /// Compare two sample sets.
    Eval(EvalArgs),
    /// Compare loss gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["toy", "circle", "mixture"])]
    preset: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(short = 'n', long = "count")]
    count: usize,
    /// Condition as comma-separated values, or a CSV whose y-columns give
    /// one condition per row.
    #[arg(long, allow_hyphen_values = true)]
    cond: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InvertArgs {
    #[command(flatten)]
    io: MapArgs,
    /// Apply the flow instead of its inverse.
    #[arg(long)]
    forward: bool,
}

#[derive(Args)]
struct OracleArgs {
    /// `circle`, `mixture`, or a toy density name.
    #[arg(long)]
    problem: String,
    /// Observation (comma-separated); without it, joint pairs are drawn.
    #[arg(long, allow_hyphen_values = true)]
    y: Option<String>,
    #[arg(short = 'n', long = "count")]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mixture problem dimension.
    #[arg(long, default_value_t = 50)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    components: usize,
    #[arg(long, default_value_t = 0)]
    problem_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Kl,
    W2,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    metric: Metric,
    /// Reference sample; for KL it supplies `h` and the default box.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Check at most this many parameters (evenly spaced).
    #[arg(long)]
    max_params: Option<usize>,
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let numerical = e.is_numerical();
        Failure {
            code: if numerical { 2 } else { 1 },
            kind: if numerical { "numerical" } else { "input" },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        kind: "usage",
        message: message.into(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Ok(t) = std::env::var("PROXFLOW_THREADS") {
        match t.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => return report(usage(format!("PROXFLOW_THREADS must be a positive integer, got {t:?}"))),
        }
    }
    let res = match cli.cmd {
        Cmd::Train(a) => train(a),
        Cmd::Sample(a) => sample(a),
        Cmd::Density(a) => density(a),
        Cmd::Invert(a) => invert(a),
        Cmd::Oracle(a) => oracle(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Gradcheck(a) => gradcheck(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let doc = serde_json::json!({"error": f.kind, "message": f.message, "exit_code": f.code});
    eprintln!("{doc}");
    ExitCode::from(f.code)
}

type CliResult = std::result::Result<(), Failure>;

#[derive(Serialize)]
struct Manifest {
    software: String,
    version: String,
    seed: u64,
    config: TrainConfig,
    artifacts: Artifacts,
    wall_clock_secs: f64,
    steps: usize,
    final_loss: Option<f64>,
    clipped_steps: Vec<usize>,
}

#[derive(Serialize)]
struct Artifacts {
    config: String,
    checkpoint: String,
    loss_history: String,
}

fn train(a: TrainArgs) -> CliResult {
    let cfg = match (&a.config, &a.preset) {
        (Some(path), _) => TrainConfig::from_json(&std::fs::read_to_string(path).map_err(Error::from)?)?,
        (None, Some(name)) => Preset::from_name(name)?.config(),
        (None, None) => return Err(usage("either --config or --preset is required")),
    };
    cfg.validate()?;
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    let out = a.out.clone();
    write_atomic(&out.join("config.json"), serde_json::to_string_pretty(&cfg).map_err(Error::from)?.as_bytes())?;
    let source = cfg.data_source()?;
    let start = Instant::now();
    let ckpt = out.join("checkpoint.json");
    let loss = out.join("loss.csv");
    let result = train_loop(&cfg, &source, |epoch, model, history| {
        model.save(&ckpt)?;
        let mut buf = Vec::new();
        write_history(&mut buf, history)?;
        write_atomic(&loss, &buf)?;
        log::info!("epoch {epoch} done, loss {:?}", history.last().map(|r| r.loss));
        Ok(())
    })?;
    let manifest = Manifest {
        software: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config: cfg,
        artifacts: Artifacts {
            config: "config.json".into(),
            checkpoint: "checkpoint.json".into(),
            loss_history: "loss.csv".into(),
        },
        wall_clock_secs: start.elapsed().as_secs_f64(),
        steps: result.history.len(),
        final_loss: result.history.last().map(|r| r.loss),
        clipped_steps: result.clipped,
    };
    write_atomic(
        &out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(Error::from)?.as_bytes(),
    )?;
    Ok(())
}

fn parse_vector(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("not a number: {s:?}")))
        })
        .collect()
}

fn load(path: &Path) -> Result<Model> {
    Model::load(path)
}

fn sample(a: SampleArgs) -> CliResult {
    let model = load(&a.ckpt)?;
    let settings = model.config.as_ref().map(TrainConfig::invert_settings).unwrap_or_default();
    let mut rng = Rng::new(a.seed);
    let n = model.flow.dim();
    let d = model.flow.cond_dim();
    if d == 0 {
        if a.cond.is_some() {
            return Err(usage("--cond given for an unconditional checkpoint"));
        }
        let x = model.flow.sample(a.count, &mut rng, settings)?;
        write_points_file(&a.out, &state_headers(n), &x)?;
        return Ok(());
    }
    let spec = a.cond.ok_or_else(|| usage("conditional checkpoint needs --cond"))?;
    let conds: Vec<Vec<f64>> = if Path::new(&spec).is_file() {
        let (h, pts) = read_points_file(Path::new(&spec))?;
        let (y, _) = split_paired(&h, &pts)?;
        (0..y.cols()).map(|k| y.column(k)).collect()
    } else {
        vec![parse_vector(&spec)?]
    };
    let flow = model.conditional()?;
    let mut parts = Vec::new();
    for y in &conds {
        if y.len() != d {
            return Err(usage(format!("condition has {} values, checkpoint expects {d}", y.len())));
        }
        let x = flow.sample(y, a.count, &mut rng, settings)?;
        parts.push(broadcast_condition(y, a.count).vstack(&x)?);
    }
    let all = Mat::hstack(&parts.iter().collect::<Vec<_>>())?;
    write_points_file(&a.out, &paired_headers(d, n), &all)?;
    Ok(())
}

/// Split an input CSV into an optional condition and state block.
fn read_input(path: &Path, model: &Model) -> Result<(Vec<String>, Option<Mat>, Mat)> {
    let (h, pts) = read_points_file(path)?;
    let d = model.flow.cond_dim();
    let n = model.flow.dim();
    if pts.rows() != d + n {
        return Err(Error::invalid(format!(
            "input has {} columns, checkpoint expects {}",
            pts.rows(),
            d + n
        )));
    }
    let y = (d > 0).then(|| pts.row_slice(0, d));
    Ok((h, y, pts.row_slice(d, n)))
}

fn density(a: MapArgs) -> CliResult {
    let model = load(&a.ckpt)?;
    let (mut h, y, x) = read_input(&a.input, &model)?;
    let (_, ld) = match &y {
        None => model.flow.log_density(&x)?,
        Some(y) => model.conditional()?.log_density(y, &x)?,
    };
    let (_, pts) = read_points_file(&a.input)?;
    let out = pts.vstack(&Mat::from_vec(1, ld.len(), ld)?)?;
    h.push("log_density".into());
    write_points_file(&a.out, &h, &out)?;
    Ok(())
}

fn invert(a: InvertArgs) -> CliResult {
    let model = load(&a.io.ckpt)?;
    let settings = model.config.as_ref().map(TrainConfig::invert_settings).unwrap_or_default();
    let (_, y, u) = read_input(&a.io.input, &model)?;
    let n = model.flow.dim();
    let d = model.flow.cond_dim();
    let (mapped, prefix) = match (&y, a.forward) {
        (None, false) => (model.flow.inverse(&u, settings)?, 'x'),
        (None, true) => (model.flow.forward(&u)?, 'z'),
        (Some(y), false) => (model.conditional()?.inverse(y, &u, settings)?, 'x'),
        (Some(y), true) => (model.conditional()?.forward(y, &u)?, 'z'),
    };
    let mut headers: Vec<String> = (0..d).map(|i| format!("y{i}")).collect();
    headers.extend((0..n).map(|i| format!("{prefix}{i}")));
    let out = match y {
        Some(y) => y.vstack(&mapped)?,
        None => mapped,
    };
    write_points_file(&a.io.out, &headers, &out)?;
    Ok(())
}

fn oracle(a: OracleArgs) -> CliResult {
    let mut rng = Rng::new(a.seed);
    let problem: InverseProblemSpec = match a.problem.as_str() {
        "circle" => circle_problem(),
        "mixture" => mixture_problem(a.dim, a.components, &mut Rng::new(a.problem_seed))?,
        name => {
            let toy = Toy::from_name(name).map_err(|_| usage(format!("unknown problem {name:?}")))?;
            if a.y.is_some() {
                return Err(usage("--y applies only to inverse problems"));
            }
            write_points_file(&a.out, &state_headers(2), &toy.sample(a.count, &mut rng)?)?;
            return Ok(());
        }
    };
    let (d, n) = (problem.obs_dim(), problem.state_dim());
    let pts = match a.y {
        Some(text) => {
            let y = parse_vector(&text)?;
            if y.len() != d {
                return Err(usage(format!("--y needs {d} values, got {}", y.len())));
            }
            let x = problem.sample_posterior(&y, a.count, &mut rng)?;
            broadcast_condition(&y, a.count).vstack(&x)?
        }
        None => {
            let (y, x) = problem.sample_pairs(a.count, &mut rng);
            y.vstack(&x)?
        }
    };
    write_points_file(&a.out, &paired_headers(d, n), &pts)?;
    Ok(())
}

/// State columns of a sample CSV (condition columns dropped).
fn state_part(path: &Path) -> Result<Mat> {
    let (h, pts) = read_points_file(path)?;
    Ok(split_paired(&h, &pts)?.1)
}

fn eval(a: EvalArgs) -> CliResult {
    let pa = state_part(&a.a)?;
    let pb = state_part(&a.b)?;
    if pa.rows() != pb.rows() {
        return Err(usage(format!("samples have {} and {} columns", pa.rows(), pb.rows())));
    }
    let report = match a.metric {
        Metric::W2 => {
            if a.grid.is_some() {
                return Err(usage("--grid applies only to kl"));
            }
            MetricReport {
                metric: "w2".into(),
                value: empirical_w2(&pa, &pb)?,
                n: pa.cols(),
                grid: vec![],
                out_of_box: 0,
            }
        }
        Metric::Kl => {
            let bins = a.grid.unwrap_or_else(|| vec![64; pa.rows()]);
            if bins.len() != pa.rows() {
                return Err(usage(format!("--grid needs {} bin counts", pa.rows())));
            }
            let grid = GridSpec::around(&pa, bins.clone())?;
            let r = empirical_kl(&pa, &pb, &grid)?;
            MetricReport {
                metric: "kl".into(),
                value: r.value,
                n: pa.cols(),
                grid: bins,
                out_of_box: r.out_of_box,
            }
        }
    };
    let text = serde_json::to_string(&report).map_err(Error::from)?;
    match a.out {
        Some(p) => write_atomic(&p, text.as_bytes())?,
        None => println!("{text}"),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let cfg = TrainConfig::from_json(&std::fs::read_to_string(&a.config).map_err(Error::from)?)?;
    let root = Rng::new(cfg.seed);
    let mut flow = proxflow::flow::ProxFlow::random(&cfg.architecture()?, false, &mut root.derive(1))?;
    let (y, x) = cfg.data_source()?.batch(a.batch, &mut root.derive(2))?;
    flow.initialize_actnorms(y.as_ref(), &x)?;
    let indices: Option<Vec<usize>> = a.max_params.map(|m| {
        let total = flow.param_count();
        let stride = (total / m.max(1)).max(1);
        (0..total).step_by(stride).collect()
    });
    let r = gradient_check(&flow, y.as_ref(), &x, cfg.penalty_weight, a.step, indices.as_deref())?;
    println!("{}", serde_json::to_string(&r).map_err(Error::from)?);
    if r.max_rel_error <= a.tol {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            kind: "numerical",
            message: format!("max relative error {:.3e} exceeds {:.1e}", r.max_rel_error, a.tol),
        })
    }
}
