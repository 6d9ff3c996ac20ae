//! `lstd` command-line driver: data generation, source training, low-shot
//! fine-tuning, evaluation, ablation grids and diagnostics.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lstd::evaluation::{evaluate, export_heatmap};
use lstd::gradsuite::{run_suite, TOLERANCE};
use lstd::losses::Mode;
use lstd::model::Lstd;
use lstd::synthdata::{
    decode_ppm, generate, generate_benchmark, load, sample_k_shot, save, write_atomic, BenchmarkSpec, GenSpec,
    SampleRecord, MANIFEST_FILE,
};
use lstd::transfer::{
    finetune_target, pretrain_source, run_ablation, target_config, AblationSpec, Checkpoint, MetricRecord, TrainRun,
};
use lstd::LstdError;
use thiserror::Error;

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] LstdError),
    #[error("gradient check failed for: {}", .0.join(", "))]
    Gradcheck(Vec<String>),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(LstdError::Config(_) | LstdError::InvalidArgument(_)) => 2,
            CliError::Run(_) | CliError::Gradcheck(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "lstd", version, about = "Low-shot transfer detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (or the full benchmark) to disk.
    GenData(GenData),
    /// Train the detector on a large source dataset.
    TrainSource(TrainSource),
    /// Fine-tune a source checkpoint on k images per target class.
    Finetune(Finetune),
    /// Score a checkpoint on a dataset.
    Eval(Eval),
    /// Run the shots × modes × seeds grid.
    Ablate(Ablate),
    /// Compare every gradient against central finite differences.
    Gradcheck(Gradcheck),
    /// Write the channel-mean feature map of one layer as a PGM.
    Heatmap(Heatmap),
}

#[derive(Args)]
struct GenData {
    /// Dataset spec JSON; a benchmark spec with --benchmark.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write source/, target_pool/ and target_test/ instead of one dataset.
    #[arg(long)]
    benchmark: bool,
}

/// Training flags shared by train-source and finetune.
#[derive(Args)]
struct TrainFlags {
    /// RunConfig JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Metrics JSONL; defaults to the checkpoint path with `.metrics.jsonl`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Print every n-th loss record to stderr (0 disables).
    #[arg(long)]
    log_every: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, run: &mut TrainRun) {
        if let Some(v) = self.seed {
            run.seed = v;
        }
        if let Some(v) = self.iterations {
            run.iterations = v;
        }
        if let Some(v) = self.batch_size {
            run.batch_size = v;
        }
        if let Some(v) = self.lr {
            run.lr = v;
        }
    }
}

#[derive(Args)]
struct TrainSource {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct Finetune {
    /// Target pool the k-shot set is sampled from.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    shots: usize,
    /// FT, FT+TK or FT+TK+BD.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda_bd: Option<f64>,
    #[arg(long)]
    lambda_tk: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// RunConfig JSON supplying the detection settings and AP metric.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    source: PathBuf,
    /// Target pool the k-shot sets are sampled from.
    #[arg(long)]
    pool: PathBuf,
    /// Held-out target test set.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,30")]
    shots: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "FT,FT+TK,FT+TK+BD")]
    modes: Vec<Mode>,
    /// Number of seeds; seeds 0..n are used.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    /// Random instances per case.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Heatmap {
    #[arg(long)]
    ckpt: PathBuf,
    /// Binary PPM at the network's input size.
    #[arg(long)]
    image: PathBuf,
    /// Backbone layer, e.g. conv2.
    #[arg(long)]
    layer: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainSource(a) => train_source(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Heatmap(a) => heatmap(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    Ok(write_atomic(path, format!("{text}\n").as_bytes())?)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

/// Writes the resolved config next to `out` and prints it.
fn echo_config(config: &RunConfig, out: &Path) -> Result<()> {
    let text = config.to_json();
    write_atomic(out, text.as_bytes())?;
    eprintln!("resolved config ({}):\n{text}", out.display());
    Ok(())
}

fn logger(every: usize) -> impl FnMut(&MetricRecord) {
    move |r: &MetricRecord| {
        if every > 0 && r.iter.is_multiple_of(every) {
            eprintln!(
                "iter {:>5}  reg {:.4}  obj {:.4}  cls {:.4}  bd {:.4}  tk {:.4}  total {:.4}",
                r.iter, r.l_reg, r.l_obj, r.l_cls, r.l_bd, r.l_tk, r.l_total
            );
        }
    }
}

fn gen_data(a: GenData) -> Result<()> {
    if a.benchmark {
        let spec: BenchmarkSpec = a.spec.as_deref().map(read_json).transpose()?.unwrap_or_default();
        let bench = generate_benchmark(&spec, a.seed)?;
        for (name, data) in [
            ("source", &bench.source),
            ("target_pool", &bench.target_pool),
            ("target_test", &bench.target_test),
        ] {
            let dir = a.out.join(name);
            save(data, &dir)?;
            println!("{}", dir.join(MANIFEST_FILE).display());
        }
        return Ok(());
    }
    let Some(spec_path) = a.spec else {
        return Err(CliError::Usage("--spec is required unless --benchmark is given".into()));
    };
    let spec: GenSpec = read_json(&spec_path)?;
    let data = generate(&spec, a.seed)?;
    save(&data, &a.out)?;
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn train_source(a: TrainSource) -> Result<()> {
    let mut cfg = RunConfig::with_train(TrainRun::source(0)).overlay(a.train.config.as_deref())?;
    a.train.apply(&mut cfg.train);
    ensure_parent(&a.out)?;
    cfg.train.checkpoint_path = Some(a.out.clone());
    cfg.train.metrics_path = Some(a.train.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.jsonl")));
    cfg.train.validate()?;
    echo_config(&cfg, &with_suffix(&a.out, ".config.json"))?;
    let data = load(&a.data)?;
    let trained = pretrain_source(&data, &cfg.train, &mut logger(a.train.log_every.unwrap_or(100)))?;
    println!(
        "wrote {} ({} iterations, final loss {:.4})",
        a.out.display(),
        trained.metrics.len(),
        trained.metrics.last().map_or(f64::NAN, |r| r.l_total)
    );
    Ok(())
}

fn finetune(a: Finetune) -> Result<()> {
    let mut cfg = RunConfig::with_train(TrainRun::target(Mode::FtTkBd, 0)).overlay(a.train.config.as_deref())?;
    a.train.apply(&mut cfg.train);
    if let Some(m) = a.mode {
        cfg.train.mode = m;
    }
    let weights = &mut cfg.train.weights;
    for (flag, value, slot) in [
        ("--lambda-bd", a.lambda_bd, &mut weights.lambda_bd),
        ("--lambda-tk", a.lambda_tk, &mut weights.lambda_tk),
        ("--tau", a.tau, &mut weights.tau),
    ] {
        if let Some(v) = value {
            *slot = v;
            if cfg.train.mode == Mode::Ft {
                eprintln!("warning: {flag} is ignored in FT mode");
            }
        }
    }
    let source = Checkpoint::load(&a.source)?;
    let pool = load(&a.data)?;
    let shots = sample_k_shot(&pool, a.shots, cfg.train.seed)?;
    cfg.train.config = target_config(&source, shots.num_classes());
    ensure_parent(&a.out)?;
    cfg.train.checkpoint_path = Some(a.out.clone());
    cfg.train.metrics_path = Some(a.train.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.jsonl")));
    cfg.train.validate()?;
    echo_config(&cfg, &with_suffix(&a.out, ".config.json"))?;
    let ids: Vec<&str> = shots.samples.iter().map(|s| s.id.as_str()).collect();
    eprintln!("{}-shot set: {}", a.shots, ids.join(" "));
    let trained = finetune_target(&shots, &source, &cfg.train, &mut logger(a.train.log_every.unwrap_or(1)))?;
    println!(
        "wrote {} ({} mode, {} iterations, final loss {:.4})",
        a.out.display(),
        cfg.train.mode,
        trained.metrics.len(),
        trained.metrics.last().map_or(f64::NAN, |r| r.l_total)
    );
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let cfg = RunConfig::with_train(TrainRun::default()).overlay(a.config.as_deref())?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let data = load(&a.data)?;
    let net = Lstd::new(ckpt.config.clone())?;
    let rep = evaluate(&net, &ckpt.params, &data, &cfg.detect, cfg.metric)?;
    ensure_parent(&a.report)?;
    write_json(&a.report, &rep)?;
    for c in &rep.per_class {
        match c.ap {
            Some(ap) => println!("class {:>2}  AP {:6.2}  ({} objects)", c.class_id, ap * 100.0, c.n_gt),
            None => println!("class {:>2}  AP    n/a  (no objects)", c.class_id),
        }
    }
    let e = &rep.error_modes;
    println!("false positives: loc {} cls {} bg {}", e.loc, e.cls, e.bg);
    println!("mAP {:.2}", rep.map * 100.0);
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    let cfg = RunConfig::with_train(TrainRun::target(Mode::Ft, 0)).overlay(a.config.as_deref())?;
    cfg.train.validate()?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Usage(format!("{}: {e}", a.out.display())))?;
    echo_config(&cfg, &a.out.join("run_config.json"))?;
    let source = Checkpoint::load(&a.source)?;
    let pool = load(&a.pool)?;
    let test = load(&a.test)?;
    let spec = AblationSpec {
        shots: a.shots,
        modes: a.modes,
        seeds: (0..a.seeds).collect(),
        run: cfg.train,
        detect: cfg.detect,
        heat_images: cfg.heat_images,
        jobs: a.jobs,
    };
    let table = run_ablation(&source, &pool, &test, &spec, Some(&a.out))?;
    for r in table.records.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "cell k={} {} seed {} failed: {}",
            r.shots,
            r.mode,
            r.seed,
            r.error.as_deref().unwrap_or_default()
        );
    }
    print!("{}", table.render());
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Result<()> {
    if a.instances == 0 {
        return Err(CliError::Usage("--instances must be positive".into()));
    }
    let entries = run_suite(a.instances, a.seed)?;
    let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
    let mut worst: f64 = 0.0;
    for e in &entries {
        worst = worst.max(e.max_rel_error);
        println!(
            "{:<width$}  {:>6} coords  {:>4} kinks  max rel err {:.3e}  {}",
            e.name,
            e.coordinates,
            e.kinks_skipped,
            e.max_rel_error,
            if e.passes() { "ok" } else { "FAIL" }
        );
    }
    println!("max relative error {worst:.3e} (tolerance {TOLERANCE:e})");
    let failing: Vec<String> = entries.iter().filter(|e| !e.passes()).map(|e| e.name.clone()).collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gradcheck(failing))
    }
}

fn heatmap(a: Heatmap) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let net = Lstd::new(ckpt.config.clone())?;
    if !net.config().layer_names().contains(&a.layer) {
        return Err(CliError::Usage(format!(
            "unknown layer `{}`; expected one of {}",
            a.layer,
            net.config().layer_names().join(", ")
        )));
    }
    let bytes = std::fs::read(&a.image).map_err(|e| CliError::Usage(format!("{}: {e}", a.image.display())))?;
    let (width, height, pixels) = decode_ppm(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", a.image.display())))?;
    let size = net.config().input_size;
    if (width, height) != (size, size) {
        return Err(CliError::Usage(format!("image is {width}×{height}, network expects {size}×{size}")));
    }
    let sample = SampleRecord {
        id: String::new(),
        width,
        height,
        pixels,
        boxes: Vec::new(),
    };
    ensure_parent(&a.out)?;
    export_heatmap(&net, &ckpt.params, &sample.to_tensor(), &a.layer, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}
