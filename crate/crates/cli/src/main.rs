//! `plmetric` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plmetric::config::{RunConfig, SeedStream};
use plmetric::dataio::{generate_synthetic, load_dataset, save_dataset, DatasetFormat, SyntheticSpec};
use plmetric::eval::{diagnose, recall_at_k, DiagnoseConfig, EvalReport, SupervisionReport};
use plmetric::trainer::{checkpoint, run_to_dir, TrainState};
use plmetric::{Error, FeatureDataset, Matrix, Mlp};

#[derive(Parser)]
#[command(name = "plmetric", version, about = "Unsupervised metric learning with piecewise-linear neighborhoods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset of flat class patches.
    Gen(GenArgs),
    /// Train an embedding network and proxies.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare neighborhood and k-means pseudo-supervision on untrained embeddings.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    n_classes: usize,
    #[arg(long, default_value_t = 3)]
    patch_dim: usize,
    #[arg(long, default_value_t = 32)]
    ambient_dim: usize,
    #[arg(long, default_value_t = 100)]
    points_per_class: usize,
    #[arg(long, default_value_t = 0.01)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    half_width: f64,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set similarity.n_alpha=6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl ConfigArgs {
    fn load(&self) -> plmetric::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        for w in cfg.warnings() {
            eprintln!("warning: {w}");
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset path (overrides `paths.dataset`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory (overrides `paths.output_dir`).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Continue from a checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train until this epoch (overrides `epochs`).
    #[arg(long)]
    epochs: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Recall@K values; defaults to the checkpoint's `eval_recall_k`.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// k-means cluster count; defaults to the number of classes.
    #[arg(long)]
    n_clusters: Option<usize>,
}

fn load(path: &Path) -> plmetric::Result<FeatureDataset> {
    load_dataset(path, DatasetFormat::from_path(path))
}

fn dataset_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> plmetric::Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.paths.dataset.clone())
        .ok_or_else(|| Error::Invalid("no dataset given (use --dataset or paths.dataset)".into()))
}

fn cmd_gen(a: &GenArgs) -> plmetric::Result<()> {
    let spec = SyntheticSpec {
        n_classes: a.n_classes,
        patch_dim: a.patch_dim,
        ambient_dim: a.ambient_dim,
        points_per_class: a.points_per_class,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
        half_width: a.half_width,
        separation: a.separation,
    };
    let ds = generate_synthetic(&spec)?;
    save_dataset(&ds, &a.out, DatasetFormat::from_path(&a.out))?;
    println!("wrote {} rows x {} features to {}", ds.len(), ds.dim(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> plmetric::Result<()> {
    let mut state = match &a.resume {
        Some(p) => {
            let mut s = checkpoint::load(p)?;
            for o in &a.config.overrides {
                s.config.apply_override(o)?;
            }
            s
        }
        None => {
            let cfg = a.config.load()?;
            let ds = load(&dataset_path(&a.dataset, &cfg)?)?;
            TrainState::init(&ds, &cfg)?
        }
    };
    if let Some(e) = a.epochs {
        state.config.epochs = e;
    }
    let ds = load(&dataset_path(&a.dataset, &state.config)?)?;
    state.config.validate(ds.dim())?;
    let dir = a
        .output_dir
        .clone()
        .or_else(|| state.config.paths.output_dir.clone())
        .ok_or_else(|| Error::Invalid("no output directory (use --output-dir or paths.output_dir)".into()))?;
    let out = run_to_dir(&mut state, &ds, &dir, a.config.threads)?;
    println!("epochs={} steps={}", state.epoch, state.step);
    println!("checkpoint={}", out.final_checkpoint.display());
    println!("log={}", out.metric_log.display());
    Ok(())
}

fn supervision(
    y: &Matrix,
    labels: &[u32],
    cfg: &RunConfig,
    n_clusters: usize,
    threads: usize,
) -> plmetric::Result<SupervisionReport> {
    diagnose(
        y,
        labels,
        &DiagnoseConfig {
            manifold: &cfg.manifold,
            similarity: &cfg.similarity,
            n_clusters,
            kmeans_seed: cfg.derive_seed(SeedStream::KMeans, 0),
            pair_seed: cfg.derive_seed(SeedStream::CorrelationPairs, 0),
            threads,
        },
    )
}

fn cmd_eval(a: &EvalArgs) -> plmetric::Result<()> {
    let state = checkpoint::load(&a.checkpoint)?;
    let ds = load(&a.dataset)?;
    let z = state.embedder.theta.forward(ds.features())?;
    let Some(labels) = ds.labels() else {
        eprintln!("notice: dataset has no labels; purity and correlation skipped");
        return Err(Error::MissingLabels("recall@K needs class labels"));
    };
    let ks = if a.k.is_empty() {
        state.config.eval_recall_k.clone()
    } else {
        a.k.clone()
    };
    let n_classes = ds.n_classes().unwrap_or(1);
    let report = EvalReport {
        recall_at: recall_at_k(&z, labels, &ks)?,
        supervision: Some(supervision(&z, labels, &state.config, n_classes, a.threads)?),
    };
    print!("{}", report.to_record());
    Ok(())
}

fn cmd_diagnose(a: &DiagnoseArgs) -> plmetric::Result<()> {
    let cfg = a.config.load()?;
    let ds = load(&dataset_path(&a.dataset, &cfg)?)?;
    cfg.validate(ds.dim())?;
    let labels = ds
        .labels()
        .ok_or(Error::MissingLabels("diagnose compares against class labels"))?;
    let net = Mlp::new(
        &cfg.network.layer_sizes(ds.dim()),
        cfg.derive_seed(SeedStream::NetworkInit, 0),
    )?;
    let y = net.forward(ds.features())?;
    let n_clusters = a.n_clusters.unwrap_or_else(|| ds.n_classes().unwrap_or(1));
    let r = supervision(&y, labels, &cfg, n_clusters, a.config.threads)?;
    let rows = [
        ("ours", r.neighborhood_purity, r.similarity_correlation),
        ("kmeans", r.kmeans_purity, r.kmeans_correlation),
    ];
    println!("method,label_purity,correlation");
    for (name, p, c) in &rows {
        println!("{name},{p},{c}");
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = std::panic::catch_unwind(|| match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    });
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(2),
    }
}
