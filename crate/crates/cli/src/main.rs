//! `mar`: synthesize, train, infer, evaluate and check the pipeline from the
//! command line. Every subcommand writes into its `--out` run directory the
//! resolved `config.json`, a `run.log`, its outputs and a `summary.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mar_core::classical::{run_baseline, BaselineMethod};
use mar_core::evaluation::{self, MethodSpec, ARTIFACT_TABLE, CLEAN_TABLE};
use mar_core::networks::{load_model, GeneratorConfig};
use mar_core::ot;
use mar_core::synthesis::{self, DatasetManifest, MetalMask, SPLIT_TEST_ARTIFACT};
use mar_core::training::{self, TrainingPools};
use mar_core::{io, Error, LossWeights, Preset, RunConfig};

/// Default dataset directory for `train`, `baseline`, `eval`, `infer` and `ablate`.
const DATA_ROOT_ENV: &str = "MAR_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(name = "mar", version, about = "Metal artifact reduction pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration, applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Hyperparameter preset: real, synthetic or toy.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Master seed; overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset directory (containing manifest.json).
    #[arg(long, env = DATA_ROOT_ENV)]
    data: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate phantoms (unless `data.source_dir` is set) and build the dataset.
    Synth,
    /// Train the cycle model on a dataset.
    Train {
        #[command(flatten)]
        data: DataArg,
    },
    /// Apply a trained generator to images.
    Infer {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Array stems to correct; defaults to the artifact test split of `--data`.
        inputs: Vec<PathBuf>,
        #[arg(long, env = DATA_ROOT_ENV)]
        data: Option<PathBuf>,
    },
    /// Run LI and/or NMAR on the artifact test split.
    Baseline {
        #[command(flatten)]
        data: DataArg,
        /// li or nmar; both when omitted.
        #[arg(long)]
        method: Option<String>,
    },
    /// Score the input, LI, NMAR and trained models on both test splits.
    Eval {
        #[command(flatten)]
        data: DataArg,
        /// `name=dir` or `dir`; repeatable.
        #[arg(long)]
        checkpoint: Vec<String>,
    },
    /// Check the transport sandwich on random discrete instances.
    DualityCheck {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Render metric tables from evaluation directories as markdown.
    Report {
        /// Evaluation directories; defaults to `--out`.
        dirs: Vec<PathBuf>,
    },
    /// Train and evaluate the {CBAM on, off} × {β = 10, 1} grid.
    Ablate {
        #[command(flatten)]
        data: DataArg,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Baseline { .. } => "baseline",
            Command::Eval { .. } => "eval",
            Command::DualityCheck { .. } => "duality-check",
            Command::Report { .. } => "report",
            Command::Ablate { .. } => "ablate",
        }
    }
}

/// Raised by checks whose outcome is a failed property rather than an error.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Copies log output to stderr and the run directory's `run.log`.
struct Tee(fs::File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.0.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stderr().flush()?;
        self.0.flush()
    }
}

fn init_logging(out: &Path) -> Result<()> {
    let file = fs::File::create(out.join("run.log")).context("cannot create run.log")?;
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .target(env_logger::Target::Pipe(Box::new(Tee(file))))
        .try_init()?;
    Ok(())
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let preset = common.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path, preset)?,
        None => {
            let cfg = RunConfig::preset(preset.unwrap_or(Preset::Synthetic));
            cfg.validate()?;
            cfg
        }
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn write_summary(out: &Path, command: &str, body: serde_json::Value) -> Result<()> {
    io::write_json(&out.join("summary.json"), &json!({ "command": command, "result": body }))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.common.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("cannot create run directory {}", out.display()))?;
    init_logging(&out)?;
    let cfg = resolve_config(&cli.common)?;
    io::write_json(&out.join("config.json"), &cfg)?;
    log::info!("{} (preset {}, seed {}) -> {}", cli.command.name(), cfg.preset, cfg.seed, out.display());
    let command = cli.command.name();
    let summary = match cli.command {
        Command::Synth => synth(&cfg, &out)?,
        Command::Train { data } => train(&cfg, &data.data, &out)?,
        Command::Infer { checkpoint, inputs, data } => infer(&checkpoint, inputs, data.as_deref(), &out)?,
        Command::Baseline { data, method } => baseline(&cfg, &data.data, method.as_deref(), &out)?,
        Command::Eval { data, checkpoint } => eval(&cfg, &data.data, &checkpoint, &out)?,
        Command::DualityCheck { trials } => duality_check(&cfg, trials, &out)?,
        Command::Report { dirs } => report(&dirs, &out)?,
        Command::Ablate { data } => ablate(&cfg, &data.data, &out)?,
    };
    write_summary(&out, command, summary.body)?;
    if let Some(failure) = summary.failure {
        return Err(CheckFailed(failure).into());
    }
    Ok(())
}

struct Outcome {
    body: serde_json::Value,
    /// Set when the command completed but its check did not hold.
    failure: Option<String>,
}

impl From<serde_json::Value> for Outcome {
    fn from(body: serde_json::Value) -> Self {
        Outcome { body, failure: None }
    }
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let counts = cfg.data.counts;
    let sources = match &cfg.data.source_dir {
        Some(dir) => PathBuf::from(dir),
        None => {
            let dir = out.join("sources");
            synthesis::write_phantoms(
                &dir,
                counts.total(),
                cfg.data.image_size,
                cfg.data.pixel_spacing,
                &cfg.synthesis.spectrum,
                cfg.seed,
            )?;
            dir
        }
    };
    let geom = cfg.data.geometry()?;
    let manifest = synthesis::build_dataset(&sources, out, counts, &cfg.synthesis, &geom, cfg.seed)?;
    log::info!("dataset with {} images written", counts.total());
    Ok(json!({
        "manifest": synthesis::MANIFEST_FILE,
        "manifest_hash": manifest.manifest_hash()?,
        "counts": counts,
    })
    .into())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Outcome> {
    let pools = TrainingPools::load(data)?;
    let outcome = training::train(&pools, cfg.generator, cfg.discriminator.clone(), cfg.weights, &cfg.train, out)?;
    Ok(json!({
        "steps": outcome.steps,
        "checkpoint": training::FINAL_CHECKPOINT,
        "loss_log": training::LOSS_LOG,
        "weights": cfg.weights,
        "final_losses": outcome.last,
    })
    .into())
}

fn infer(checkpoint: &Path, inputs: Vec<PathBuf>, data: Option<&Path>, out: &Path) -> Result<Outcome> {
    let g = load_model(checkpoint, "G")?;
    let jobs: Vec<(PathBuf, String)> = if inputs.is_empty() {
        let Some(data) = data else {
            bail!(Error::InvalidArgument(format!("no inputs given and neither --data nor {DATA_ROOT_ENV} set")));
        };
        let (root, manifest) = DatasetManifest::load(data)?;
        manifest
            .split(SPLIT_TEST_ARTIFACT)
            .iter()
            .enumerate()
            .map(|(i, e)| (root.join(&e.file), format!("{i:05}")))
            .collect()
    } else {
        inputs
            .into_iter()
            .map(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                (p, name)
            })
            .collect()
    };
    let dir = out.join("corrected");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::with_capacity(jobs.len());
    for (input, name) in jobs {
        let image = io::read_image(&input)?;
        let corrected = training::infer_with(&image, &g)?;
        let sha = io::write_image(&dir.join(&name), &corrected, "corrected")?;
        written.push(json!({ "input": input, "output": format!("corrected/{name}"), "header_sha256": sha }));
    }
    log::info!("corrected {} images", written.len());
    Ok(json!({ "checkpoint": checkpoint, "outputs": written }).into())
}

fn baseline(cfg: &RunConfig, data: &Path, method: Option<&str>, out: &Path) -> Result<Outcome> {
    let methods = match method {
        Some(m) => vec![m.parse::<BaselineMethod>()?],
        None => vec![BaselineMethod::Li, BaselineMethod::Nmar],
    };
    let (root, manifest) = DatasetManifest::load(data)?;
    let cases = manifest.split(SPLIT_TEST_ARTIFACT);
    if cases.is_empty() {
        bail!(Error::Dataset("artifact test split is empty".into()));
    }
    let mut results = serde_json::Map::new();
    for m in methods {
        let label = m.to_string();
        let dir = out.join(label.to_lowercase());
        fs::create_dir_all(&dir)?;
        let (mut psnr, mut ssim) = (Vec::new(), Vec::new());
        for (i, e) in cases.iter().enumerate() {
            let (Some(gt), Some(mask)) = (&e.ground_truth, &e.mask) else {
                bail!(Error::Dataset(format!("{} has no ground truth or mask", e.file)));
            };
            let artifact = io::read_image(&root.join(&e.file))?;
            let mask = MetalMask::from_image(&io::read_image(&root.join(mask))?);
            let reference = io::read_image(&root.join(gt))?;
            let corrected = run_baseline(&artifact, &mask, &manifest.geometry, m, &cfg.baseline)?;
            io::write_image(&dir.join(format!("{i:05}")), &corrected, "corrected")?;
            let (p, s) = evaluation::windowed_metrics(&corrected, &reference, &cfg.eval.ssim)?;
            psnr.push(p);
            ssim.push(s);
        }
        let record = evaluation::MetricsRecord::new(&label, SPLIT_TEST_ARTIFACT, vec![String::new(); psnr.len()], psnr, ssim)?;
        log::info!("{label}: PSNR {:.2} dB, SSIM {:.4}", record.psnr_mean, record.ssim_mean);
        results.insert(
            label,
            json!({ "psnr_mean": record.psnr_mean, "ssim_mean": record.ssim_mean, "n": record.psnr.len() }),
        );
    }
    Ok(serde_json::Value::Object(results).into())
}

fn parse_checkpoint(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) => (name.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(arg);
            let name = path
                .components()
                .rev()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .find(|c| c != training::FINAL_CHECKPOINT && c != ".")
                .unwrap_or_else(|| "Model".to_string());
            (name, path)
        }
    }
}

fn record_summaries(records: &[evaluation::MetricsRecord]) -> serde_json::Value {
    records
        .iter()
        .map(|r| {
            json!({
                "method": r.method,
                "split": r.split,
                "n": r.psnr.len(),
                "psnr_mean": r.psnr_mean,
                "psnr_std": r.psnr_std,
                "ssim_mean": r.ssim_mean,
                "ssim_std": r.ssim_std,
            })
        })
        .collect()
}

fn standard_methods() -> Vec<MethodSpec> {
    vec![
        MethodSpec::Input,
        MethodSpec::Baseline(BaselineMethod::Li),
        MethodSpec::Baseline(BaselineMethod::Nmar),
    ]
}

fn eval(cfg: &RunConfig, data: &Path, checkpoints: &[String], out: &Path) -> Result<Outcome> {
    let mut methods = standard_methods();
    for arg in checkpoints {
        let (name, path) = parse_checkpoint(arg);
        methods.push(MethodSpec::model(&name, &path).with_context(|| format!("loading checkpoint {}", path.display()))?);
    }
    let records = evaluation::evaluate_methods(data, &methods, &cfg.baseline, &cfg.eval, out)?;
    for r in &records {
        log::info!("{} / {}: PSNR {:.2} dB, SSIM {:.4}", r.split, r.method, r.psnr_mean, r.ssim_mean);
    }
    Ok(json!({ "tables": [ARTIFACT_TABLE, CLEAN_TABLE], "metrics": record_summaries(&records) }).into())
}

fn duality_check(cfg: &RunConfig, trials: Option<usize>, out: &Path) -> Result<Outcome> {
    let trials = trials.unwrap_or(cfg.duality.trials);
    let reports = ot::run_trials(trials, cfg.seed)?;
    let mut csv = String::from("id,K,half_disc,half_disc_plus_cycle,pass,beta\n");
    for (i, r) in reports.iter().enumerate() {
        csv.push_str(&format!("{i},{},{},{},{},{}\n", r.k, r.lower, r.upper, r.passes(), r.instance.beta));
    }
    fs::write(out.join("duality.csv"), csv)?;
    let passed = reports.iter().filter(|r| r.passes()).count();
    let lower_failures = reports.iter().filter(|r| !r.lower_holds).count();
    let upper_failures = reports.iter().filter(|r| !r.upper_holds).count();
    log::info!("{passed}/{trials} instances satisfy both bounds ({lower_failures} lower, {upper_failures} upper violations)");
    let body = json!({
        "trials": trials,
        "seed": cfg.seed,
        "passed": passed,
        "lower_violations": lower_failures,
        "upper_violations": upper_failures,
        "table": "duality.csv",
    });
    let failure = (passed < trials).then(|| format!("{} of {trials} instances violate the sandwich", trials - passed));
    Ok(Outcome { body, failure })
}

fn report(dirs: &[PathBuf], out: &Path) -> Result<Outcome> {
    let dirs = if dirs.is_empty() { vec![out.to_path_buf()] } else { dirs.to_vec() };
    let mut text = String::from("## Results\n\n");
    let mut tables = Vec::new();
    for dir in &dirs {
        for (file, title) in [(ARTIFACT_TABLE, "Artifact test set"), (CLEAN_TABLE, "Clean test set")] {
            let path = dir.join(file);
            if !path.exists() {
                continue;
            }
            let rows = evaluation::read_table(&path)?;
            let heading = if dirs.len() > 1 { format!("{title} ({})", dir.display()) } else { title.to_string() };
            text.push_str(&evaluation::markdown_table(&heading, &rows));
            text.push('\n');
            tables.push(path);
        }
    }
    if tables.is_empty() {
        bail!(Error::Dataset(format!("no metric tables found in {}", dirs.iter().map(|d| d.display().to_string()).collect::<Vec<_>>().join(", "))));
    }
    fs::write(out.join("report.md"), &text)?;
    print!("{text}");
    Ok(json!({ "report": "report.md", "tables": tables }).into())
}

/// The four arms: (name, CBAM on, β).
const ARMS: [(&str, bool, f64); 4] = [
    ("cbam_beta10", true, 10.0),
    ("cbam_beta1", true, 1.0),
    ("nocbam_beta10", false, 10.0),
    ("nocbam_beta1", false, 1.0),
];

fn ablate(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Outcome> {
    let pools = TrainingPools::load(data)?;
    let mut methods = standard_methods();
    let mut arms = Vec::new();
    for (name, use_cbam, beta) in ARMS {
        let generator = GeneratorConfig { use_cbam, ..cfg.generator };
        let weights = LossWeights { beta, ..cfg.weights };
        let dir = out.join("arms").join(name);
        log::info!("training arm {name}");
        let outcome = training::train(&pools, generator, cfg.discriminator.clone(), weights, &cfg.train, &dir)?;
        methods.push(MethodSpec::Model { name: name.to_string(), generator: outcome.models.g });
        arms.push(json!({ "name": name, "use_cbam": use_cbam, "weights": weights, "steps": outcome.steps }));
    }
    let eval_dir = out.join("eval");
    let records = evaluation::evaluate_methods(data, &methods, &cfg.baseline, &cfg.eval, &eval_dir)?;
    report(&[eval_dir], out)?;
    Ok(json!({ "arms": arms, "metrics": record_summaries(&records) }).into())
}

/// Exit code and label for a failure.
fn category(err: &anyhow::Error) -> (&'static str, u8) {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return ("check", 6);
    }
    if let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) {
        return match e {
            Error::Config { .. } => ("config", 3),
            Error::Dataset(_)
            | Error::Checkpoint(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Png(_)
            | Error::CorruptHeader { .. }
            | Error::LengthMismatch { .. }
            | Error::HashMismatch { .. }
            | Error::Unsupported(_) => ("data", 4),
            Error::Diverged { .. } | Error::NonFinite(_) | Error::Lp(_) => ("numerical", 5),
            _ => ("argument", 1),
        };
    }
    if err.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some()) {
        return ("data", 4);
    }
    ("internal", 1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (label, code) = category(&err);
            log::error!("{label} error: {err:#}");
            eprintln!("mar: {label} error: {err:#}");
            ExitCode::from(code)
        }
    }
}
