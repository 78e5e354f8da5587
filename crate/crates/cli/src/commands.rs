use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tmknet::data::{read_dataset, read_manifest, synth_generate, write_dataset, Dataset, Domain, SynthSpec, Trial};
use tmknet::experiment::{
    ablate, ablation_csv, ablation_table, adapt, centroid_dispersion, evaluate, export_features, features_csv,
    load_checkpoint, saliency, save_checkpoint, train, unlabeled, wilcoxon_signed_rank, AdaptationMode, Checkpoint,
    MetricsReport, RunConfig, Variant,
};
use tmknet::{Error, ErrorClass};

pub const BUILD_ID: &str = env!("TMKNET_BUILD_ID");
pub const SEED_ENV: &str = "TMKNET_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "tmknet",
    version = BUILD_ID,
    about = "Train, adapt and analyse SPD-manifold networks for sEMG gesture decoding",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.\n\
                  Settings are resolved as: command-line flag, then --config file, then defaults.\n\
                  The seed additionally falls back to the TMKNET_SEED environment variable."
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sEMG-like dataset with per-domain drift
    Synth(SynthArgs),
    /// Validate a directory-format dataset and copy it
    Import(ImportArgs),
    /// Train on the source sessions of one subject
    Train(TrainArgs),
    /// Gather target-session statistics from unlabeled trials
    Adapt(AdaptArgs),
    /// Evaluate a checkpoint on one session
    Eval(EvalArgs),
    /// Train and evaluate architecture variants with a shared seed
    Ablate(AblateArgs),
    /// Input-gradient saliency maps
    Saliency(SaliencyArgs),
    /// Export log-mapped features before and after domain-specific batch norm
    ExportFeatures(ExportArgs),
    /// Wilcoxon signed-rank test between two lists of metrics reports
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of gesture classes
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Number of sensors (even, at least 4)
    #[arg(long, default_value_t = 8)]
    pub sensors: usize,
    /// Number of sessions (domains)
    #[arg(long, default_value_t = 4)]
    pub domains: usize,
    /// Trials per (session, class)
    #[arg(long, default_value_t = 50)]
    pub trials_per_cell: usize,
    /// Sampling rate in Hz
    #[arg(long, default_value_t = 500.0)]
    pub fs: f64,
    /// Window length in ms
    #[arg(long, default_value_t = 150.0)]
    pub window_ms: f64,
    /// Window overlap in ms
    #[arg(long, default_value_t = 75.0)]
    pub overlap_ms: f64,
    /// Gain of the class-specific muscle-group source
    #[arg(long, default_value_t = 1.0)]
    pub class_gain: f64,
    /// Largest condition number of the per-session mixing
    #[arg(long, default_value_t = 3.0)]
    pub max_condition: f64,
    /// Random seed [default: $TMKNET_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// Source dataset directory
    #[arg(long = "from")]
    pub source: PathBuf,
    /// Destination directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunFlags {
    /// JSON run configuration; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Subject id [default: 1]
    #[arg(long)]
    pub subject: Option<u32>,
    /// Held-out target session [default: 1]
    #[arg(long)]
    pub target_session: Option<u32>,
    /// Training epochs [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size [default: 50]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Domains per batch [default: 1]
    #[arg(long)]
    pub domains_per_batch: Option<usize>,
    /// Learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight decay for convolution and linear weights [default: 0.0001]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Random seed [default: $TMKNET_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// When target statistics are gathered [default: posthoc]
    #[arg(long, value_enum)]
    pub adaptation: Option<AdaptationArg>,
    /// Architecture variant [default: full]
    #[arg(long)]
    pub variant: Option<String>,
    /// Use one SPD batch norm shared by all domains instead of per-domain statistics
    #[arg(long)]
    pub shared_bn: bool,
    /// Temporal channels n_t [default: 64]
    #[arg(long)]
    pub n_t: Option<usize>,
    /// Spatial channels n_s [default: 40]
    #[arg(long)]
    pub n_s: Option<usize>,
    /// BiMap output size n_b [default: 30]
    #[arg(long)]
    pub n_b: Option<usize>,
    /// Fraction of each source session held out for model selection [default: 0.1]
    #[arg(long)]
    pub holdout: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AdaptationArg {
    Posthoc,
    Interleaved,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Target session [default: the checkpoint's target session]
    #[arg(long)]
    pub target_session: Option<u32>,
    /// Adaptation batch size [default: the checkpoint's batch size]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Session to evaluate [default: the checkpoint's target session]
    #[arg(long)]
    pub session: Option<u32>,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Comma-separated variants besides the full model [default: all]
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    /// Checkpoint (adapted, for target-session trials)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Single trial id; without it, maps are averaged over --class trials of --session
    #[arg(long)]
    pub trial: Option<u64>,
    /// Class whose logit is differentiated [default: the trial's label]
    #[arg(long)]
    pub class: Option<usize>,
    /// Session used for class averaging [default: the checkpoint's target session]
    #[arg(long)]
    pub session: Option<u32>,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Checkpoint (adapted, to include the target session)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Accuracy,
    MacroF1,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Metrics reports of the first method
    #[arg(long = "a", num_args = 1.., required = true)]
    pub a: Vec<PathBuf>,
    /// Metrics reports of the second method, paired with --a in order
    #[arg(long = "b", num_args = 1.., required = true)]
    pub b: Vec<PathBuf>,
    /// Score to compare
    #[arg(long, value_enum, default_value_t = MetricArg::Accuracy)]
    pub metric: MetricArg,
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.class() {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numerical => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

trait Context<T> {
    fn context(self, what: impl std::fmt::Display) -> Result<T, Failure>;
}

impl<T> Context<T> for Result<T, Error> {
    fn context(self, what: impl std::fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| {
            let mut f = Failure::from(e);
            f.message = format!("{what}: {}", f.message);
            f
        })
    }
}

type CliResult<T = ()> = Result<T, Failure>;

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Import(a) => import(a),
        Command::Train(a) => train_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Saliency(a) => saliency_cmd(a),
        Command::ExportFeatures(a) => export_cmd(a),
        Command::Compare(a) => compare_cmd(a),
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn prepare_out(out: &Path) -> CliResult {
    if out.is_file() {
        return Err(Failure::usage(format!("--out {}: exists and is a file", out.display())));
    }
    fs::create_dir_all(out).map_err(|e| Failure::data(format!("--out {}: {e}", out.display())))
}

fn check_dir(flag: &str, dir: &Path) -> CliResult {
    if !dir.is_dir() {
        return Err(Failure::data(format!("{flag} {}: not a directory", dir.display())));
    }
    Ok(())
}

fn check_file(flag: &str, file: &Path) -> CliResult {
    if !file.is_file() {
        return Err(Failure::data(format!("{flag} {}: no such file", file.display())));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    write_text(path, &(text + "\n"))
}

/// Records the command, seed and build id in `run.json`.
fn write_run_record(out: &Path, command: &str, seed: Option<u64>, extra: Value) -> CliResult {
    let mut record = json!({
        "command": command,
        "seed": seed,
        "build": BUILD_ID,
    });
    if let (Value::Object(map), Value::Object(more)) = (&mut record, extra) {
        map.extend(more);
    }
    write_json(&out.join("run.json"), &record)
}

/// Resolves a run configuration: flags, then the config file, then defaults;
/// the seed falls back to the environment before the default.
pub fn resolve_config(flags: &RunFlags) -> CliResult<RunConfig> {
    let mut seed_in_file = false;
    let mut cfg = match &flags.config {
        Some(path) => {
            check_file("--config", path)?;
            let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("--config {}: {e}", path.display())))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| Failure::usage(format!("--config {}: {e}", path.display())))?;
            seed_in_file = value.get("seed").is_some();
            serde_json::from_value::<RunConfig>(value)
                .map_err(|e| Failure::usage(format!("--config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = &flags.data {
        cfg.data = v.clone();
    }
    if let Some(v) = flags.subject {
        cfg.subject = v;
    }
    if let Some(v) = flags.target_session {
        cfg.target_session = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.domains_per_batch {
        cfg.domains_per_batch = v;
    }
    if let Some(v) = flags.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = flags.weight_decay {
        cfg.optim.weight_decay = v;
    }
    match (flags.seed, seed_in_file) {
        (Some(s), _) => cfg.seed = s,
        (None, true) => {}
        (None, false) => {
            if let Some(s) = env_seed()? {
                cfg.seed = s;
            }
        }
    }
    if let Some(v) = flags.adaptation {
        cfg.adaptation = match v {
            AdaptationArg::Posthoc => AdaptationMode::Posthoc,
            AdaptationArg::Interleaved => AdaptationMode::Interleaved,
        };
    }
    if let Some(v) = &flags.variant {
        cfg.variant = Variant::parse(v).context("--variant")?;
    }
    if flags.shared_bn {
        cfg.model.shared_bn = true;
    }
    if let Some(v) = flags.n_t {
        cfg.model.stem.n_t = v;
    }
    if let Some(v) = flags.n_s {
        cfg.model.stem.n_s = v;
    }
    if let Some(v) = flags.n_b {
        cfg.model.backbone.n_b = v;
    }
    if let Some(v) = flags.holdout {
        cfg.holdout_fraction = v;
    }
    if cfg.data.as_os_str().is_empty() {
        return Err(Failure::usage("--data is required (flag or config file)"));
    }
    cfg.validate().context("run configuration")?;
    Ok(cfg)
}

fn load_data(flag: &str, dir: &Path) -> CliResult<Dataset> {
    check_dir(flag, dir)?;
    read_dataset(dir).context(format!("{flag} {}", dir.display()))
}

fn synth(a: SynthArgs) -> CliResult {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let spec = SynthSpec {
        classes: a.classes,
        sensors: a.sensors,
        domains: a.domains,
        trials_per_cell: a.trials_per_cell,
        fs: a.fs,
        window_ms: a.window_ms,
        overlap_ms: a.overlap_ms,
        class_gain: a.class_gain,
        max_condition: a.max_condition,
        seed,
    };
    prepare_out(&a.out)?;
    let ds = synth_generate(&spec).context("synth")?;
    write_dataset(&a.out, &ds).context(format!("--out {}", a.out.display()))?;
    println!(
        "wrote {} trials ({} sessions, {} classes, {}x{} samples) to {}",
        ds.trials.len(),
        ds.manifest.domains.len(),
        ds.manifest.classes(),
        ds.manifest.sensors,
        ds.manifest.samples(),
        a.out.display()
    );
    Ok(())
}

fn import(a: ImportArgs) -> CliResult {
    check_dir("--from", &a.source)?;
    read_manifest(&a.source).context(format!("--from {}", a.source.display()))?;
    let ds = load_data("--from", &a.source)?;
    prepare_out(&a.out)?;
    write_dataset(&a.out, &ds).context(format!("--out {}", a.out.display()))?;
    println!("validated and copied {} trials to {}", ds.trials.len(), a.out.display());
    Ok(())
}

fn target_index(ds: &Dataset, subject: u32, session: u32, flag: &str) -> CliResult<usize> {
    ds.manifest
        .domain_index(Domain { subject, session })
        .context(format!("{flag} {session}"))
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let cfg = resolve_config(&a.run)?;
    let ds = load_data("--data", &cfg.data)?;
    prepare_out(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let outcome = train(&cfg, &ds).context("train")?;
    save_checkpoint(
        &a.out.join("checkpoint.bin"),
        &Checkpoint {
            model: outcome.model,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            run: Some(cfg.clone()),
        },
    )
    .context("--out")?;
    write_json(&a.out.join("metrics.json"), &outcome.report)?;
    write_run_record(
        &a.out,
        "train",
        Some(cfg.seed),
        json!({
            "config_hash": cfg.hash(),
            "selected_epoch": outcome.selected_epoch,
            "train_accuracy": outcome.train_accuracy,
        }),
    )?;
    println!(
        "source validation accuracy {:.4}, macro-F1 {:.4} (epoch {}); run directory {}",
        outcome.report.accuracy,
        outcome.report.macro_f1,
        outcome.selected_epoch,
        a.out.display()
    );
    Ok(())
}

fn load_ck(path: &Path) -> CliResult<Checkpoint> {
    check_file("--checkpoint", path)?;
    load_checkpoint(path).context(format!("--checkpoint {}", path.display()))
}

fn default_session(ck: &Checkpoint, given: Option<u32>, flag: &str) -> CliResult<(u32, u32)> {
    let subject = ck.run.as_ref().map_or(1, |r| r.subject);
    match given.or(ck.run.as_ref().map(|r| r.target_session)) {
        Some(s) => Ok((subject, s)),
        None => Err(Failure::usage(format!("{flag} is required: the checkpoint records no run configuration"))),
    }
}

fn adapt_cmd(a: AdaptArgs) -> CliResult {
    let mut ck = load_ck(&a.checkpoint)?;
    let ds = load_data("--data", &a.data)?;
    let (subject, session) = default_session(&ck, a.target_session, "--target-session")?;
    let batch = a.batch_size.or(ck.run.as_ref().map(|r| r.batch_size)).unwrap_or(50);
    let target = target_index(&ds, subject, session, "--target-session")?;
    prepare_out(&a.out)?;
    let trials: Vec<&Trial> = ds.trials.iter().filter(|t| t.domain == target).collect();
    adapt(&mut ck.model, &unlabeled(&trials), batch).context("adapt")?;
    save_checkpoint(&a.out.join("checkpoint.bin"), &ck).context("--out")?;
    write_run_record(
        &a.out,
        "adapt",
        Some(ck.seed),
        json!({
            "source_checkpoint": a.checkpoint,
            "config_hash": ck.config_hash,
            "target_session": session,
            "target_trials": trials.len(),
            "batch_size": batch,
        }),
    )?;
    println!("adapted session {session} on {} unlabeled trials; wrote {}", trials.len(), a.out.join("checkpoint.bin").display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let ck = load_ck(&a.checkpoint)?;
    let ds = load_data("--data", &a.data)?;
    let (subject, session) = default_session(&ck, a.session, "--session")?;
    let domain = target_index(&ds, subject, session, "--session")?;
    prepare_out(&a.out)?;
    let trials: Vec<&Trial> = ds.trials.iter().filter(|t| t.domain == domain).collect();
    let chunk = ck.run.as_ref().map_or(256, |r| r.eval_batch);
    let mut report = evaluate(&ck.model, &trials, chunk).context("eval")?;
    report.seed = ck.seed;
    report.config_hash = ck.config_hash.clone();
    write_json(&a.out.join("metrics.json"), &report)?;
    write_run_record(
        &a.out,
        "eval",
        Some(ck.seed),
        json!({ "checkpoint": a.checkpoint, "session": session, "trials": trials.len() }),
    )?;
    println!(
        "session {session}: accuracy {:.4}, macro-F1 {:.4} over {} trials",
        report.accuracy,
        report.macro_f1,
        trials.len()
    );
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> CliResult {
    let cfg = resolve_config(&a.run)?;
    let variants: Vec<Variant> = match &a.variants {
        Some(list) => list
            .iter()
            .filter(|s| !s.trim().is_empty())
            .map(|s| Variant::parse(s.trim()).context("--variants"))
            .collect::<CliResult<_>>()?,
        None => Variant::ALL.into_iter().filter(|&v| v != Variant::Full).collect(),
    };
    let ds = load_data("--data", &cfg.data)?;
    prepare_out(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let rows = ablate(&cfg, &ds, &variants).context("ablate")?;
    let table = ablation_table(&rows);
    write_text(&a.out.join("table.txt"), &table)?;
    write_text(&a.out.join("table.csv"), &ablation_csv(&rows))?;
    let dir = a.out.join("variants");
    fs::create_dir_all(&dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    for r in &rows {
        write_json(&dir.join(format!("{}.json", r.variant.key())), &r.target)?;
    }
    write_json(&a.out.join("metrics.json"), &rows)?;
    write_run_record(&a.out, "ablate", Some(cfg.seed), json!({ "config_hash": cfg.hash() }))?;
    print!("{table}");
    Ok(())
}

fn saliency_cmd(a: SaliencyArgs) -> CliResult {
    let ck = load_ck(&a.checkpoint)?;
    let ds = load_data("--data", &a.data)?;
    let classes = ck.model.input.classes;
    let trials: Vec<&Trial> = match a.trial {
        Some(id) => vec![ds
            .trials
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Failure::usage(format!("--trial {id}: no such trial")))?],
        None => {
            let class = a
                .class
                .ok_or_else(|| Failure::usage("either --trial or --class is required"))?;
            let (subject, session) = default_session(&ck, a.session, "--session")?;
            let domain = target_index(&ds, subject, session, "--session")?;
            ds.trials.iter().filter(|t| t.domain == domain && t.label == class).collect()
        }
    };
    if trials.is_empty() {
        return Err(Failure::data("no trials match the selection"));
    }
    if let Some(c) = a.class {
        if c >= classes {
            return Err(Failure::usage(format!("--class {c}: outside 0..{classes}")));
        }
    }
    prepare_out(&a.out)?;
    let (c, t) = (ck.model.input.sensors, ck.model.input.samples);
    let mut map = vec![0.0; c * t];
    let mut per_sensor = vec![0.0; c];
    for trial in &trials {
        let class = a.class.unwrap_or(trial.label);
        let s = saliency(&ck.model, &trial.signal, trial.domain, class).context(format!("trial {}", trial.id))?;
        let k = trials.len() as f64;
        for (acc, v) in map.iter_mut().zip(s.map.data()) {
            *acc += v / k;
        }
        for (acc, v) in per_sensor.iter_mut().zip(&s.per_sensor_max) {
            *acc += v / k;
        }
    }
    let mut csv = String::from("sensor");
    for j in 0..t {
        csv.push_str(&format!(",t{j}"));
    }
    csv.push('\n');
    for i in 0..c {
        csv.push_str(&i.to_string());
        for j in 0..t {
            csv.push_str(&format!(",{}", map[i * t + j]));
        }
        csv.push('\n');
    }
    write_text(&a.out.join("saliency.csv"), &csv)?;
    let mut summary = String::from("sensor,group,max_saliency\n");
    let groups = &ck.model.input.groups;
    for (i, v) in per_sensor.iter().enumerate() {
        let g = if groups.flexor_ids.contains(&i) { "flexor" } else { "extensor" };
        summary.push_str(&format!("{i},{g},{v}\n"));
    }
    write_text(&a.out.join("per_sensor_max.csv"), &summary)?;
    write_run_record(
        &a.out,
        "saliency",
        Some(ck.seed),
        json!({ "checkpoint": a.checkpoint, "trials": trials.len(), "class": a.class }),
    )?;
    println!("saliency over {} trial(s) written to {}", trials.len(), a.out.display());
    Ok(())
}

fn export_cmd(a: ExportArgs) -> CliResult {
    let ck = load_ck(&a.checkpoint)?;
    let ds = load_data("--data", &a.data)?;
    prepare_out(&a.out)?;
    let ready: Vec<usize> = (0..ds.manifest.domains.len())
        .filter(|&d| ck.model.dsbn.role(d).is_ok() && ck.model.dsbn.stats(d).is_some())
        .collect();
    for d in 0..ds.manifest.domains.len() {
        if !ready.contains(&d) {
            log::warn!("skipping session {}: no statistics in the checkpoint", ds.manifest.domains[d].session);
        }
    }
    let trials: Vec<&Trial> = ds.trials.iter().filter(|t| ready.contains(&t.domain)).collect();
    if trials.is_empty() {
        return Err(Failure::data("no session has statistics in this checkpoint"));
    }
    let chunk = ck.run.as_ref().map_or(256, |r| r.eval_batch);
    let rows = export_features(&ck.model, &trials, chunk).context("export-features")?;
    write_text(&a.out.join("features.csv"), &features_csv(&rows))?;
    let pre = centroid_dispersion(&rows, false);
    let post = centroid_dispersion(&rows, true);
    write_json(
        &a.out.join("dispersion.json"),
        &json!({ "pre_dsbn": pre, "post_dsbn": post, "sessions": ready.len(), "trials": rows.len() }),
    )?;
    write_run_record(&a.out, "export-features", Some(ck.seed), json!({ "checkpoint": a.checkpoint }))?;
    println!(
        "{} rows; between-session centroid dispersion {pre:.4} before, {post:.4} after DSBN",
        rows.len()
    );
    Ok(())
}

fn read_report(path: &Path) -> CliResult<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn compare_cmd(a: CompareArgs) -> CliResult {
    if a.a.len() != a.b.len() {
        return Err(Failure::usage(format!(
            "--a has {} reports but --b has {}; reports are paired in order",
            a.a.len(),
            a.b.len()
        )));
    }
    let score = |r: &MetricsReport| match a.metric {
        MetricArg::Accuracy => r.accuracy,
        MetricArg::MacroF1 => r.macro_f1,
    };
    let xs: Vec<f64> = a.a.iter().map(|p| read_report(p).map(|r| score(&r))).collect::<CliResult<_>>()?;
    let ys: Vec<f64> = a.b.iter().map(|p| read_report(p).map(|r| score(&r))).collect::<CliResult<_>>()?;
    let res = wilcoxon_signed_rank(&xs, &ys).context("compare")?;
    println!(
        "W = {}, p = {}, n = {} ({})",
        res.statistic,
        res.p_value,
        res.n,
        if res.exact { "exact" } else { "normal approximation" }
    );
    Ok(())
}
