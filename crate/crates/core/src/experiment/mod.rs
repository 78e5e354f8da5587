//! Training with the unsupervised domain adaptation protocol, evaluation,
//! statistics, saliency, feature export and ablations.

mod checkpoint;
mod metrics;
mod wilcoxon;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use metrics::{ClassMetrics, MetricsReport};
pub use wilcoxon::{midranks, wilcoxon_signed_rank, WilcoxonResult, EXACT_MAX_N};

use crate::autodiff::Tape;
use crate::data::{leave_one_session_out, BatchSampler, Dataset, DatasetManifest, SplitPlan, Trial};
use crate::error::{Error, Result};
use crate::linalg::{batch_sym_fn, SpectralFn};
use crate::model::{vectorize_upper, InputShape, ModelConfig, TmkNet};
use crate::optim::AdamConfig;
use crate::spd::{BnMode, DomainRole};
use crate::stem::MssBranches;
use crate::tensor::Tensor;

type T64 = Tensor<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    /// Target statistics are gathered after training.
    #[default]
    Posthoc,
    /// One unlabeled target batch passes through the network after every optimizer step.
    Interleaved,
}

/// Architecture variants of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    WoMrt,
    WoMss,
    WoGlobal,
    WoFlexorExtensor,
    WoProximalDistal,
    WoDilated,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::WoMrt,
        Variant::WoMss,
        Variant::WoGlobal,
        Variant::WoFlexorExtensor,
        Variant::WoProximalDistal,
        Variant::WoDilated,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoMrt => "wo_mrt",
            Variant::WoMss => "wo_mss",
            Variant::WoGlobal => "wo_global",
            Variant::WoFlexorExtensor => "wo_flexor_extensor",
            Variant::WoProximalDistal => "wo_proximal_distal",
            Variant::WoDilated => "wo_dilated",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "TMKNet",
            Variant::WoMrt => "w/o MRT",
            Variant::WoMss => "w/o MSS",
            Variant::WoGlobal => "w/o Global muscle kernel",
            Variant::WoFlexorExtensor => "w/o Flexor and Extensor muscle kernels",
            Variant::WoProximalDistal => "w/o Proximal-Distal muscle kernel",
            Variant::WoDilated => "w/o Dilated kernel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| {
                let keys: Vec<&str> = Self::ALL.iter().map(|v| v.key()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", keys.join(", ")))
            })
    }

    /// The model configuration with this variant's layers removed.
    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut out = cfg.clone();
        let br = &mut out.stem.branches;
        match self {
            Variant::Full => {}
            Variant::WoMrt => out.stem.r_resolution.truncate(1),
            Variant::WoMss => *br = MssBranches::global_only(),
            Variant::WoGlobal => br.global = false,
            Variant::WoFlexorExtensor => {
                br.flexor = false;
                br.extensor = false;
            }
            Variant::WoProximalDistal => br.proximal_distal = false,
            Variant::WoDilated => br.dilated = false,
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: PathBuf,
    pub subject: u32,
    pub target_session: u32,
    pub model: ModelConfig,
    pub optim: AdamConfig,
    pub batch_size: usize,
    pub domains_per_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adaptation: AdaptationMode,
    pub variant: Variant,
    /// Fraction of each source domain held out for model selection.
    pub holdout_fraction: f64,
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            subject: 1,
            target_session: 1,
            model: ModelConfig::default(),
            optim: AdamConfig::default(),
            batch_size: 50,
            domains_per_batch: 1,
            epochs: 50,
            seed: 0,
            adaptation: AdaptationMode::Posthoc,
            variant: Variant::Full,
            holdout_fraction: 0.1,
            eval_batch: 256,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.batch_size < 2 || self.domains_per_batch == 0 || self.batch_size % self.domains_per_batch != 0 {
            return Err(Error::Config(format!(
                "batch size {} must be ≥ 2 and a multiple of domains per batch {}",
                self.batch_size, self.domains_per_batch
            )));
        }
        if self.batch_size / self.domains_per_batch < 2 {
            return Err(Error::Config("each domain needs at least 2 samples per batch".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!("holdout_fraction {} outside [0, 1)", self.holdout_fraction)));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Model configuration after applying the variant and the dataset's sampling rate.
    pub fn effective_model(&self, manifest: &DatasetManifest) -> ModelConfig {
        let mut m = self.variant.apply(&self.model);
        m.stem.fs = manifest.fs;
        m
    }
}

/// A trial stripped of its label; the only view the adaptation path receives.
#[derive(Debug, Clone, Copy)]
pub struct Unlabeled<'a> {
    pub signal: &'a Tensor<f32>,
    pub domain: usize,
}

pub fn unlabeled<'a>(trials: &[&'a Trial]) -> Vec<Unlabeled<'a>> {
    trials
        .iter()
        .map(|t| Unlabeled {
            signal: &t.signal,
            domain: t.domain,
        })
        .collect()
}

/// Stacks `c × t` signals into a `[b, 1, c, t]` network input.
pub fn batch_input(signals: &[&Tensor<f32>]) -> Result<T64> {
    let Some(first) = signals.first() else {
        return Err(Error::InvalidArgument("empty batch".into()));
    };
    let (c, t) = first.dims2()?;
    let mut data = Vec::with_capacity(signals.len() * c * t);
    for s in signals {
        if s.shape() != [c, t] {
            return Err(Error::Shape(format!("trial shape {:?} in a batch of {c}x{t}", s.shape())));
        }
        data.extend(s.data().iter().map(|&v| v as f64));
    }
    Tensor::new(vec![signals.len(), 1, c, t], data)
}

pub fn input_shape(manifest: &DatasetManifest) -> InputShape {
    InputShape {
        sensors: manifest.sensors,
        samples: manifest.samples(),
        classes: manifest.classes(),
        groups: manifest.groups.clone(),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TmkNet,
    pub split: SplitPlan,
    /// Source-validation metrics of the selected model.
    pub report: MetricsReport,
    /// Epoch of the selected model (0 for a calibration-only run).
    pub selected_epoch: usize,
    /// Source-training accuracy of the selected model.
    pub train_accuracy: f64,
}

/// Per-domain deterministic holdout of source trials.
fn holdout_split(ds: &Dataset, sources: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for &d in sources {
        let mut idx = ds.indices_in(&[d]);
        idx.shuffle(&mut rng);
        let n_val = (fraction * idx.len() as f64).round() as usize;
        let n_val = n_val.min(idx.len().saturating_sub(2));
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn training_step(model: &mut TmkNet, ds: &Dataset, indices: &[usize], domains: &[usize], optim: &AdamConfig, update: bool) -> Result<f64> {
    let trials: Vec<&Trial> = indices.iter().map(|&i| &ds.trials[i]).collect();
    debug_assert!(trials.iter().zip(domains).all(|(t, &d)| t.domain == d));
    train_step(model, &trials, optim, update)
}

/// One supervised step on a labeled batch: forward in train mode, cross-entropy,
/// backward and an optimizer step (skipped when `update` is false), then the
/// running-statistics updates. Returns the batch loss.
pub fn train_step(model: &mut TmkNet, trials: &[&Trial], optim: &AdamConfig, update: bool) -> Result<f64> {
    let signals: Vec<&Tensor<f32>> = trials.iter().map(|t| &t.signal).collect();
    let labels: Vec<usize> = trials.iter().map(|t| t.label).collect();
    let domains: Vec<usize> = trials.iter().map(|t| t.domain).collect();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let x = tape.constant(batch_input(&signals)?);
    let f = model.forward(&mut tape, &p, x, &domains, BnMode::Train)?;
    let loss = tape.cross_entropy(f.logits, &labels)?;
    let value = tape.value(loss)?.item()?;
    if !value.is_finite() {
        return Err(Error::Diverged(format!("loss became {value}")));
    }
    if update {
        let grads = tape.backward(loss)?;
        let g = p.gradients(&grads)?;
        model.params.step(&g, optim)?;
    }
    model.apply_updates(&f.updates)?;
    Ok(value)
}

/// Trains on the source domains of the configured split.
pub fn train(cfg: &RunConfig, ds: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    let split = leave_one_session_out(&ds.manifest, cfg.subject, cfg.target_session)?;
    let model_cfg = cfg.effective_model(&ds.manifest);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TmkNet::new(model_cfg, input_shape(&ds.manifest), &mut rng)?;
    for &d in &split.sources {
        model.register_domain(d, DomainRole::Source);
    }
    model.register_domain(split.target, DomainRole::Target);

    let (train_idx, val_idx) = holdout_split(ds, &split.sources, cfg.holdout_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::Data("no source trials to train on".into()));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &train_idx {
        members.entry(ds.trials[i].domain).or_default().push(i);
    }
    let mut sampler = BatchSampler::new(members, cfg.batch_size, cfg.domains_per_batch, cfg.seed ^ 0x5eed_0002)?;
    let target_trials: Vec<&Trial> = ds.indices_in(&[split.target]).into_iter().map(|i| &ds.trials[i]).collect();
    let target_view = unlabeled(&target_trials);
    let mut target_order: Vec<usize> = (0..target_view.len()).collect();
    let mut target_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0003);
    let mut target_pos = target_order.len();

    let val_trials: Vec<&Trial> = val_idx.iter().map(|&i| &ds.trials[i]).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, TmkNet)> = None;

    if cfg.epochs == 0 {
        for batch in sampler.epoch() {
            training_step(&mut model, ds, &batch.indices, &batch.domains, &cfg.optim, false)?;
        }
    }
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let batches = sampler.epoch();
        for batch in &batches {
            total += training_step(&mut model, ds, &batch.indices, &batch.domains, &cfg.optim, true)?;
            if cfg.adaptation == AdaptationMode::Interleaved && !cfg.model.shared_bn && target_view.len() >= 2 {
                if target_pos + cfg.batch_size > target_order.len() {
                    target_order.shuffle(&mut target_rng);
                    target_pos = 0;
                }
                let end = (target_pos + cfg.batch_size).min(target_order.len());
                let chunk: Vec<Unlabeled> = target_order[target_pos..end].iter().map(|&k| target_view[k]).collect();
                target_pos = end;
                adapt_batches(&mut model, &chunk, cfg.batch_size)?;
            }
        }
        let mean_loss = total / batches.len() as f64;
        loss_curve.push(mean_loss);
        let val_acc = if val_trials.is_empty() {
            0.0
        } else {
            evaluate(&model, &val_trials, cfg.eval_batch)?.accuracy
        };
        log::info!("epoch {epoch}: loss {mean_loss:.4}, source validation accuracy {val_acc:.4}");
        if best.as_ref().map_or(true, |(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, model.clone()));
        }
    }
    let (selected_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    let mut report = if val_trials.is_empty() {
        MetricsReport::from_confusion(vec![vec![0; ds.manifest.classes()]; ds.manifest.classes()])?
    } else {
        evaluate(&model, &val_trials, cfg.eval_batch)?
    };
    report.loss_curve = loss_curve;
    report.seed = cfg.seed;
    report.config_hash = cfg.hash();
    let train_trials: Vec<&Trial> = train_idx.iter().map(|&i| &ds.trials[i]).collect();
    let train_accuracy = evaluate(&model, &train_trials, cfg.eval_batch)?.accuracy;
    Ok(TrainOutcome {
        model,
        split,
        report,
        selected_epoch,
        train_accuracy,
    })
}

fn adapt_batches(model: &mut TmkNet, trials: &[Unlabeled], batch_size: usize) -> Result<()> {
    let mut start = 0;
    while start < trials.len() {
        let mut end = (start + batch_size).min(trials.len());
        // a trailing single trial joins the previous chunk
        if trials.len() - end == 1 {
            end = trials.len();
        }
        let chunk = &trials[start..end];
        if chunk.len() >= 2 {
            let signals: Vec<&Tensor<f32>> = chunk.iter().map(|t| t.signal).collect();
            let domains: Vec<usize> = chunk.iter().map(|t| t.domain).collect();
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let x = tape.constant(batch_input(&signals)?);
            let f = model.forward(&mut tape, &p, x, &domains, BnMode::Adapt)?;
            model.dsbn.apply_all(&f.updates.dsbn)?;
        }
        start = end;
    }
    Ok(())
}

/// Gathers target-domain running statistics from unlabeled trials with the
/// network weights frozen.
pub fn adapt(model: &mut TmkNet, trials: &[Unlabeled], batch_size: usize) -> Result<()> {
    if trials.len() < 2 {
        return Err(Error::Data(format!(
            "adaptation needs at least 2 target trials, got {}",
            trials.len()
        )));
    }
    if batch_size < 2 {
        return Err(Error::Config("adaptation batch size must be at least 2".into()));
    }
    for t in trials {
        if model.dsbn.role(t.domain)? != DomainRole::Target {
            return Err(Error::InvalidArgument(format!(
                "domain {} is not a target domain; adaptation is restricted to target domains",
                t.domain
            )));
        }
    }
    adapt_batches(model, trials, batch_size)
}

/// Logits for `trials` in eval mode.
pub fn predict_logits(model: &TmkNet, signals: &[&Tensor<f32>], domains: &[usize], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(signals.len());
    for (s, d) in signals.chunks(chunk.max(1)).zip(domains.chunks(chunk.max(1))) {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let x = tape.constant(batch_input(s)?);
        let f = model.forward(&mut tape, &p, x, d, BnMode::Eval)?;
        let logits = tape.value(f.logits)?;
        let (_, nc) = logits.dims2()?;
        out.extend(logits.data().chunks(nc).map(|r| r.to_vec()));
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Eval-mode metrics for labeled trials.
pub fn evaluate(model: &TmkNet, trials: &[&Trial], chunk: usize) -> Result<MetricsReport> {
    let signals: Vec<&Tensor<f32>> = trials.iter().map(|t| &t.signal).collect();
    let domains: Vec<usize> = trials.iter().map(|t| t.domain).collect();
    let truth: Vec<usize> = trials.iter().map(|t| t.label).collect();
    let logits = predict_logits(model, &signals, &domains, chunk)?;
    let predicted: Vec<usize> = logits.iter().map(|r| argmax(r)).collect();
    MetricsReport::from_predictions(&predicted, &truth, model.input.classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UdaOutcome {
    pub source_validation: MetricsReport,
    pub target: MetricsReport,
    pub selected_epoch: usize,
    pub train_accuracy: f64,
}

/// train → post-hoc adapt (skipped for a shared batch norm) → target evaluation.
pub fn run_uda(cfg: &RunConfig, ds: &Dataset) -> Result<(TmkNet, UdaOutcome)> {
    let out = train(cfg, ds)?;
    let mut model = out.model;
    let target: Vec<&Trial> = ds.indices_in(&[out.split.target]).into_iter().map(|i| &ds.trials[i]).collect();
    if !model.config.shared_bn {
        adapt(&mut model, &unlabeled(&target), cfg.batch_size)?;
    }
    let mut report = evaluate(&model, &target, cfg.eval_batch)?;
    report.seed = cfg.seed;
    report.config_hash = cfg.hash();
    Ok((
        model,
        UdaOutcome {
            source_validation: out.report,
            target: report,
            selected_epoch: out.selected_epoch,
            train_accuracy: out.train_accuracy,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `|∂ logit / ∂ X|`, sensors × samples.
    pub map: T64,
    pub per_sensor_max: Vec<f64>,
}

/// Input-gradient saliency of one trial for `class`.
pub fn saliency(model: &TmkNet, signal: &Tensor<f32>, domain: usize, class: usize) -> Result<SaliencyMap> {
    if class >= model.input.classes {
        return Err(Error::InvalidArgument(format!(
            "class {class} outside 0..{}",
            model.input.classes
        )));
    }
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let x = tape.param(batch_input(&[signal])?);
    let f = model.forward(&mut tape, &p, x, &[domain], BnMode::Eval)?;
    let picked = tape.gather(f.logits, 1, &[class])?;
    let target = tape.sum(picked)?;
    let grads = tape.backward(target)?;
    let (c, t) = signal.dims2()?;
    let map = grads.get(x)?.into_shape(&[c, t])?.map(f64::abs);
    let per_sensor_max = map
        .data()
        .chunks(t)
        .map(|r| r.iter().cloned().fold(0.0, f64::max))
        .collect();
    Ok(SaliencyMap { map, per_sensor_max })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub trial_id: u64,
    pub label: usize,
    pub domain: usize,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

/// Log-mapped, vectorized SPD features just before and after DSBN.
pub fn export_features(model: &TmkNet, trials: &[&Trial], chunk: usize) -> Result<Vec<FeatureRow>> {
    let n = model.config.backbone.n_b;
    let mut rows = Vec::with_capacity(trials.len());
    for part in trials.chunks(chunk.max(1)) {
        let signals: Vec<&Tensor<f32>> = part.iter().map(|t| &t.signal).collect();
        let domains: Vec<usize> = part.iter().map(|t| t.domain).collect();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let x = tape.constant(batch_input(&signals)?);
        let f = model.forward(&mut tape, &p, x, &domains, BnMode::Eval)?;
        let pre = batch_sym_fn(tape.value(f.pre_dsbn)?, SpectralFn::Log)?;
        let post = batch_sym_fn(tape.value(f.post_dsbn)?, SpectralFn::Log)?;
        for (k, t) in part.iter().enumerate() {
            rows.push(FeatureRow {
                trial_id: t.id,
                label: t.label,
                domain: t.domain,
                pre: vectorize_upper(&pre.data()[k * n * n..(k + 1) * n * n], n),
                post: vectorize_upper(&post.data()[k * n * n..(k + 1) * n * n], n),
            });
        }
    }
    Ok(rows)
}

/// Mean pairwise Euclidean distance between per-domain centroids.
pub fn centroid_dispersion(rows: &[FeatureRow], post: bool) -> f64 {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let v = if post { &r.post } else { &r.pre };
        let e = sums.entry(r.domain).or_insert_with(|| (vec![0.0; v.len()], 0));
        for (a, x) in e.0.iter_mut().zip(v) {
            *a += x;
        }
        e.1 += 1;
    }
    let centroids: Vec<Vec<f64>> = sums
        .into_values()
        .map(|(s, n)| s.into_iter().map(|x| x / n as f64).collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            let d: f64 = centroids[i]
                .iter()
                .zip(&centroids[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            total += d;
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

pub fn features_csv(rows: &[FeatureRow]) -> String {
    let mut out = String::new();
    let (np, nq) = rows.first().map_or((0, 0), |r| (r.pre.len(), r.post.len()));
    out.push_str("trial_id,label,domain");
    for k in 0..np {
        let _ = write!(out, ",pre_{k}");
    }
    for k in 0..nq {
        let _ = write!(out, ",post_{k}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.trial_id, r.label, r.domain);
        for v in r.pre.iter().chain(&r.post) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub target: MetricsReport,
}

/// Trains and evaluates the full model and each listed variant with the shared seed.
pub fn ablate(cfg: &RunConfig, ds: &Dataset, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let mut list = vec![Variant::Full];
    list.extend(variants.iter().copied().filter(|&v| v != Variant::Full));
    list.into_iter()
        .map(|v| {
            let run = RunConfig {
                variant: v,
                ..cfg.clone()
            };
            let (_, out) = run_uda(&run, ds)?;
            Ok(AblationRow {
                variant: v,
                label: v.label().to_string(),
                target: out.target,
            })
        })
        .collect()
}

/// Plain-text table: model, accuracy, F1.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>8}  {:>8}\n", "Model", "Accuracy", "F1");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>8.4}",
            r.label, r.target.accuracy, r.target.macro_f1
        );
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,label,accuracy,macro_f1\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},\"{}\",{},{}",
            r.variant.key(),
            r.label,
            r.target.accuracy,
            r.target.macro_f1
        );
    }
    out
}
