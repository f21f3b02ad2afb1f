//! `sparse-depth`: data generation, training, evaluation, gradient checks,
//! baselines and scan fusion behind one executable.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sparse_depth::baselines::{self, NWConfig, PoolConfig};
use sparse_depth::data::{
    self, dense_path, sparse_path, DataSource, DatasetSource, DepthMap, SceneConfig, SyntheticSource,
};
use sparse_depth::experiment::{self, EvalSet};
use sparse_depth::fusion::{self, FusionConfig, GhostConfig};
use sparse_depth::gradcheck::{self, GradCheckOptions};
use sparse_depth::metrics::{self, MetricsReport, Unit, CSV_HEADER};
use sparse_depth::network::{self, NetworkSpec, Variant};
use sparse_depth::optim::{self, LossKind, TrainConfig};

const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] sparse_depth::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } | CliError::Core(sparse_depth::Error::Io { .. }) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Serialize)]
#[command(name = "sparse-depth", version, about = "Sparsity-invariant CNNs for depth completion")]
struct Cli {
    /// Base seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving all artifacts and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
enum Command {
    /// Write paired sparse/dense synthetic depth maps.
    GenData(GenDataArgs),
    /// Train a network and write a checkpoint plus a CSV loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint across input densities.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Complete a depth map with a classical baseline.
    Baseline(BaselineArgs),
    /// Accumulate scans and drop points inconsistent with a reference map.
    Fuse(FuseArgs),
    /// Write synthetic multi-scan scenes with moving-object ghosts.
    GenFusion(GenFusionArgs),
    /// Keep each observed pixel of a depth map with a given probability.
    Sparsify(SparsifyArgs),
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Fraction of pixels kept in the sparse map.
    #[arg(long, default_value_t = 0.05)]
    density: f64,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long, default_value = "sparse", value_parser = parse_variant)]
    variant: Variant,
    /// Input density; resamples `--data` inputs when given with it.
    #[arg(long)]
    density: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value = "l2", value_parser = parse_loss)]
    loss: LossKind,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Synthetic scene side when `--data` is absent.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Directory written by `gen-data`; synthetic scenes are streamed otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate on the validation set every N iterations (0 disables).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    /// Directory whose dense maps form the validation set.
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Synthetic validation scenes when `--val-data` is absent.
    #[arg(long, default_value_t = 32)]
    val_count: usize,
    /// Checkpoint file name inside the output directory; the log uses the same stem.
    #[arg(long, default_value = "model.scnn")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory whose dense maps are the ground truth; synthetic scenes otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Comma-separated input densities in percent.
    #[arg(long, default_value = "5,10,20,50,100")]
    density_sweep: String,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum GradSpec {
    /// Kernels 11,7,5,3,3.
    Default,
    /// Kernels 3,3.
    Tiny,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "default")]
    spec: GradSpec,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 12)]
    size: usize,
    #[arg(long, hide = true)]
    zero_weights: bool,
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Method {
    /// Gaussian kernel regression.
    Nw,
    /// Closest-depth pooling.
    Pool,
}

#[derive(Args, Serialize)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    input: PathBuf,
    /// Dense ground truth; metrics are reported when given.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Kernel bandwidth in pixels (nw).
    #[arg(long, default_value_t = 2.0)]
    h: f64,
    /// Neighbourhood radius in pixels; defaults to 3h for nw and 4 for pool.
    #[arg(long)]
    r: Option<f64>,
    #[arg(long, default_value = "baseline.pgm")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct FuseArgs {
    /// Glob matching the scan PGMs.
    #[arg(long)]
    scans: String,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long, default_value_t = fusion::DEFAULT_FOCAL_BASELINE)]
    focal_baseline: f64,
    #[arg(long, default_value = "cleaned.pgm")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct GenFusionArgs {
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 11)]
    n_scans: usize,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    /// Per-scan observation probability.
    #[arg(long, default_value_t = 0.05)]
    scan_density: f64,
}

#[derive(Args, Serialize)]
struct SparsifyArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    density: f64,
    #[arg(long, default_value = "sparse.pgm")]
    out: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: sparse_depth::Error| e.to_string())
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    s.parse().map_err(|e: sparse_depth::Error| e.to_string())
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    /// Flags exactly as given; re-running them reproduces the run.
    argv: &'a [String],
    /// Every flag after defaults are applied.
    config: &'a Cli,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn write_pgm(d: &DepthMap, path: &Path) -> Result<()> {
    write_file(path, data::encode_depth_pgm(d)?)
}

fn write_manifest(cli: &Cli, argv: &[String]) -> Result<()> {
    let m = Manifest {
        tool: "sparse-depth",
        version: env!("CARGO_PKG_VERSION"),
        argv,
        config: cli,
    };
    let mut json = serde_json::to_string_pretty(&m).map_err(|e| CliError::Invalid(e.to_string()))?;
    json.push('\n');
    write_file(&cli.out_dir.join(MANIFEST), json)
}

fn square_scene(size: usize) -> SceneConfig {
    SceneConfig {
        height: size,
        width: size,
        ..SceneConfig::default()
    }
}

fn check_density(p: f64) -> Result<f64> {
    if p > 0.0 && p <= 1.0 {
        Ok(p)
    } else {
        Err(CliError::Invalid(format!("density must lie in (0, 1], got {p}")))
    }
}

/// Parses `"5,10,20"` into fractions.
fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            let pct: f64 = t
                .trim()
                .parse()
                .map_err(|_| CliError::Invalid(format!("bad density percentage {t:?}")))?;
            check_density(pct / 100.0)
        })
        .collect()
}

fn dense_maps(dir: &Path) -> Result<Vec<DepthMap>> {
    Ok(data::load_split(dir)?.into_iter().map(|(_, dense)| dense).collect())
}

fn metrics_table(rows: &[(String, &MetricsReport)], key: &str) -> String {
    let mut out = format!("{key},{CSV_HEADER}\n");
    for (label, r) in rows {
        let _ = writeln!(out, "{label},{}", r.to_csv_row());
    }
    out
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    check_density(a.density)?;
    let source = SyntheticSource::new(square_scene(a.size), a.density, cli.seed)?;
    let (mut kept, mut total) = (0, 0);
    for i in 0..a.count {
        let (sparse, dense) = source.sample(i as u64)?;
        kept += sparse.observed_count();
        total += sparse.depth().len();
        write_pgm(&sparse, &sparse_path(&cli.out_dir, i))?;
        write_pgm(&dense, &dense_path(&cli.out_dir, i))?;
    }
    println!(
        "wrote {} pairs to {} (measured density {:.4})",
        a.count,
        cli.out_dir.display(),
        kept as f64 / total.max(1) as f64
    );
    Ok(())
}

/// Validation inputs are sparsified from `truths` exactly as `eval` does, so
/// the logged MAE at the training density matches an `eval` run.
fn validation_set(cli: &Cli, a: &TrainArgs, density: f64) -> Result<EvalSet> {
    let truths = match &a.val_data {
        Some(dir) => dense_maps(dir)?,
        None => EvalSet::synthetic_truths(&square_scene(a.size), a.val_count, cli.seed)?,
    };
    Ok(EvalSet::from_truths(truths, density, cli.seed)?)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let density = a.density.map(check_density).transpose()?;
    let mut source: Box<dyn DataSource> = match &a.data {
        Some(dir) => Box::new(DatasetSource::new(data::load_split(dir)?, density, cli.seed)?),
        None => Box::new(SyntheticSource::new(
            square_scene(a.size),
            density.unwrap_or(0.1),
            cli.seed,
        )?),
    };
    let cfg = TrainConfig {
        loss: a.loss,
        learning_rate: a.lr,
        iterations: a.iters,
        batch_size: a.batch,
        seed: cli.seed,
        eval_every: a.eval_every,
        ..TrainConfig::default()
    };
    let validation = if a.eval_every > 0 {
        let p = match (density, &a.data) {
            (Some(p), _) => p,
            (None, None) => 0.1,
            (None, Some(_)) => {
                return Err(CliError::Invalid(
                    "--eval-every with --data needs --density for the validation inputs".into(),
                ))
            }
        };
        Some(validation_set(cli, a, p)?)
    } else {
        None
    };
    let spec = NetworkSpec::with_variant(a.variant);
    let (model, log) = optim::train(&spec, source.as_mut(), &cfg, validation.as_ref())?;
    let ckpt = cli.out_dir.join(&a.out);
    write_file(&ckpt, network::to_bytes(&model))?;
    write_file(&ckpt.with_extension("csv"), log.to_csv())?;
    if let Some(last) = log.records.last() {
        println!("iter {} loss {}", last.iter, last.loss);
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let densities = parse_sweep(&a.density_sweep)?;
    let model = network::load(&a.model)?;
    let truths = match &a.data {
        Some(dir) => dense_maps(dir)?,
        None => EvalSet::synthetic_truths(&square_scene(a.size), a.count, cli.seed)?,
    };
    let sweep = experiment::density_sweep(&model, &truths, &densities, cli.seed)?;
    let labelled: Vec<(String, &MetricsReport)> = sweep
        .iter()
        .map(|(p, r)| (format_pct(*p), r))
        .collect();
    let csv = metrics_table(&labelled, "density_pct");
    let json = serde_json::json!({
        "variant": model.variant.name(),
        "rows": sweep.iter().map(|(p, r)| serde_json::json!({
            "density_pct": p * 100.0,
            "metrics": r,
        })).collect::<Vec<_>>(),
    });
    let json = serde_json::to_string_pretty(&json).map_err(|e| CliError::Invalid(e.to_string()))? + "\n";
    write_file(&cli.out_dir.join("eval.csv"), &csv)?;
    write_file(&cli.out_dir.join("eval.json"), &json)?;
    print!("{csv}{json}");
    Ok(())
}

fn format_pct(p: f64) -> String {
    format!("{}", p * 100.0)
}

fn run_gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let opts = GradCheckOptions {
        trials: a.trials,
        seed: cli.seed,
        kernel_sizes: match a.spec {
            GradSpec::Default => vec![11, 7, 5, 3, 3],
            GradSpec::Tiny => vec![3, 3],
        },
        channels: a.channels,
        size: a.size,
        zero_weights: a.zero_weights,
        corrupt: a.corrupt,
        ..GradCheckOptions::default()
    };
    let reports = gradcheck::run_all(&opts)?;
    let mut csv = String::from("check,trials,compared,max_rel_error,passed\n");
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(a.tolerance);
        println!(
            "{:<20} max relative error {:.3e} over {} comparisons {}",
            r.name,
            r.max_rel_error,
            r.compared,
            if ok { "ok" } else { "FAILED" }
        );
        let _ = writeln!(csv, "{},{},{},{},{}", r.name, r.trials, r.compared, r.max_rel_error, ok);
        if !ok {
            failed.push(r.name.clone());
        }
    }
    write_file(&cli.out_dir.join("gradcheck.csv"), csv)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check above tolerance {}: {}",
            a.tolerance,
            failed.join(", ")
        )))
    }
}

fn baseline(cli: &Cli, a: &BaselineArgs) -> Result<()> {
    let input = data::read_depth_pgm(&a.input)?;
    let out = match a.method {
        Method::Nw => {
            let cfg = match a.r {
                Some(r) => NWConfig::with_radius(a.h, r)?,
                None => NWConfig::new(a.h)?,
            };
            baselines::nadaraya_watson(&input, &cfg)?
        }
        Method::Pool => {
            let r = a.r.unwrap_or(4.0);
            if r.fract() != 0.0 || r < 1.0 {
                return Err(CliError::Invalid(format!("pool radius must be a positive integer, got {r}")));
            }
            baselines::closest_depth_pool(&input, &PoolConfig::new(r as usize)?)?
        }
    };
    write_pgm(&out, &cli.out_dir.join(&a.out))?;
    if let Some(truth) = &a.truth {
        let truth = data::read_depth_pgm(truth)?;
        let report = metrics::evaluate(&out.to_tensor(), &truth, Unit::Meters, Some(&input.mask()))?;
        write_file(&cli.out_dir.join("metrics.json"), report.to_json() + "\n")?;
        println!("{report}");
    }
    Ok(())
}

fn fuse(cli: &Cli, a: &FuseArgs) -> Result<()> {
    let mut paths: Vec<PathBuf> = glob::glob(&a.scans)
        .map_err(|e| CliError::Invalid(format!("bad glob {:?}: {e}", a.scans)))?
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| {
            let path = e.path().to_path_buf();
            CliError::Io { path, source: e.into() }
        })?;
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Invalid(format!("no scans match {:?}", a.scans)));
    }
    let scans = paths
        .iter()
        .map(data::read_depth_pgm)
        .collect::<sparse_depth::Result<Vec<_>>>()?;
    let reference = data::read_depth_pgm(&a.reference)?;
    let truth = data::read_depth_pgm(&a.truth)?;
    let cfg = FusionConfig {
        n_scans: scans.len(),
        tau: a.tau,
        focal_baseline: a.focal_baseline,
    };
    let (cleaned, report) = fusion::fuse_pipeline(&scans, &reference, &truth, &cfg)?;
    write_pgm(&cleaned, &cli.out_dir.join(&a.out))?;
    let csv = report.to_csv();
    write_file(&cli.out_dir.join("fusion.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn gen_fusion(cli: &Cli, a: &GenFusionArgs) -> Result<()> {
    let cfg = FusionConfig {
        n_scans: a.n_scans,
        tau: a.tau,
        ..FusionConfig::default()
    };
    let ghost = GhostConfig {
        scan_density: a.scan_density,
        ..GhostConfig::default()
    };
    for i in 0..a.count {
        let seed = data::derive_seed(cli.seed, 13, i as u64);
        let scene = fusion::simulate_ghost_scene(&square_scene(a.size), &cfg, &ghost, seed)?;
        let dir = cli.out_dir.join(format!("{i:05}"));
        for (s, scan) in scene.scans.iter().enumerate() {
            write_pgm(scan, &dir.join(format!("scan_{s:02}.pgm")))?;
        }
        write_pgm(&scene.reference, &dir.join("reference.pgm"))?;
        write_pgm(&scene.truth, &dir.join("truth.pgm"))?;
    }
    println!("wrote {} fusion scenes to {}", a.count, cli.out_dir.display());
    Ok(())
}

fn sparsify(cli: &Cli, a: &SparsifyArgs) -> Result<()> {
    check_density(a.density)?;
    let input = data::read_depth_pgm(&a.input)?;
    let out = data::sparsify(&input, a.density, cli.seed)?;
    write_pgm(&out, &cli.out_dir.join(&a.out))?;
    println!("kept {} of {} observations", out.observed_count(), input.observed_count());
    Ok(())
}

fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    fs::create_dir_all(&cli.out_dir).map_err(io_err(&cli.out_dir))?;
    write_manifest(cli, argv)?;
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Gradcheck(a) => run_gradcheck(cli, a),
        Command::Baseline(a) => baseline(cli, a),
        Command::Fuse(a) => fuse(cli, a),
        Command::GenFusion(a) => gen_fusion(cli, a),
        Command::Sparsify(a) => sparsify(cli, a),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
