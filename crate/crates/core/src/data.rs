//! Datasets: manifest, trial storage, preprocessing, batch sampling,
//! leave-one-session-out splits and a synthetic domain-shifted generator.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SpdBatch, SpdMatrix};
use crate::linalg::{sym_fn, SpectralFn};
use crate::scalar::Scalar;
use crate::stem::MuscleGroups;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRIALS_FILE: &str = "trials.f32";
pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Domain {
    pub subject: u32,
    pub session: u32,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "subject {} session {}", self.subject, self.session)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub fs: f64,
    pub sensors: usize,
    pub class_names: Vec<String>,
    pub domains: Vec<Domain>,
    #[serde(flatten)]
    pub groups: MuscleGroups,
    pub window_ms: f64,
    pub overlap_ms: f64,
    #[serde(default)]
    pub provenance: String,
}

impl DatasetManifest {
    /// Samples per trial, `round(window_ms · Fs / 1000)`.
    pub fn samples(&self) -> usize {
        ms_to_samples(self.window_ms, self.fs)
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn domain_index(&self, d: Domain) -> Result<usize> {
        self.domains
            .iter()
            .position(|&x| x == d)
            .ok_or_else(|| Error::UnknownDomain(d.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "manifest format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if !(self.fs > 0.0) {
            return Err(Error::Data(format!("sampling rate must be positive, got {}", self.fs)));
        }
        if !(self.window_ms > self.overlap_ms && self.overlap_ms > 0.0) {
            return Err(Error::Data(format!(
                "need window_ms > overlap_ms > 0, got {} and {}",
                self.window_ms, self.overlap_ms
            )));
        }
        if self.class_names.len() < 2 {
            return Err(Error::Data("at least two classes are required".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Data("manifest lists no domains".into()));
        }
        let mut sorted = self.domains.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.domains.len() {
            return Err(Error::Data("manifest lists a domain twice".into()));
        }
        self.groups
            .validate(self.sensors)
            .map_err(|e| Error::Data(format!("muscle groups: {e}")))
    }
}

fn ms_to_samples(ms: f64, fs: f64) -> usize {
    (ms * fs / 1000.0).round() as usize
}

/// One windowed example, `sensors × samples` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub id: u64,
    pub signal: Tensor<f32>,
    pub label: usize,
    /// Index into the manifest's domain list.
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trials: Vec<Trial>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let shape = [self.manifest.sensors, self.manifest.samples()];
        for t in &self.trials {
            if t.signal.shape() != shape {
                return Err(Error::Data(format!(
                    "trial {} has shape {:?}, expected {shape:?}",
                    t.id,
                    t.signal.shape()
                )));
            }
            if t.label >= self.manifest.classes() || t.domain >= self.manifest.domains.len() {
                return Err(Error::Data(format!("trial {} has an out-of-range label or domain", t.id)));
            }
            if !t.signal.is_finite() {
                return Err(Error::Data(format!("trial {} contains non-finite samples", t.id)));
            }
        }
        Ok(())
    }

    /// Indices of trials belonging to `domains`.
    pub fn indices_in(&self, domains: &[usize]) -> Vec<usize> {
        (0..self.trials.len())
            .filter(|&i| domains.contains(&self.trials[i].domain))
            .collect()
    }
}

// ----- preprocessing --------------------------------------------------------

/// Splits a `c × T` stream into overlapping `c × w` windows.
pub fn window<T: Scalar>(signal: &Tensor<T>, fs: f64, window_ms: f64, overlap_ms: f64) -> Result<Vec<Tensor<T>>> {
    let (c, total) = signal.dims2()?;
    let w = ms_to_samples(window_ms, fs);
    let overlap = ms_to_samples(overlap_ms, fs);
    if w == 0 || overlap >= w {
        return Err(Error::InvalidArgument(format!(
            "window of {w} samples with overlap {overlap} samples"
        )));
    }
    if total < w {
        return Err(Error::Data(format!("stream of {total} samples is shorter than one window ({w})")));
    }
    let hop = w - overlap;
    let count = (total - w) / hop + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * hop;
        let mut data = Vec::with_capacity(c * w);
        for ch in 0..c {
            data.extend_from_slice(&signal.data()[ch * total + start..ch * total + start + w]);
        }
        out.push(Tensor::new(vec![c, w], data)?);
    }
    Ok(out)
}

fn median<T: Scalar>(buf: &mut [T]) -> T {
    buf.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = buf.len();
    if n % 2 == 1 {
        buf[n / 2]
    } else {
        (buf[n / 2 - 1] + buf[n / 2]) * T::lit(0.5)
    }
}

/// Sliding median/MAD outlier replacement over `[i − hw, i + hw]`, clipped at the edges.
pub fn hampel<T: Scalar>(x: &[T], half_window: usize, n_sigma: f64) -> Vec<T> {
    let hw = half_window.max(1);
    let k = T::lit(1.4826);
    let thr = T::lit(n_sigma);
    let mut out = x.to_vec();
    let mut buf = Vec::with_capacity(2 * hw + 1);
    for i in 0..x.len() {
        let lo = i.saturating_sub(hw);
        let hi = (i + hw + 1).min(x.len());
        buf.clear();
        buf.extend_from_slice(&x[lo..hi]);
        let m = median(&mut buf);
        for v in buf.iter_mut() {
            *v = (*v - m).abs();
        }
        let sigma = k * median(&mut buf);
        if (x[i] - m).abs() > thr * sigma {
            out[i] = m;
        }
    }
    out
}

/// Default Hampel half-window, about 10 ms.
pub fn hampel_half_window(fs: f64) -> usize {
    ((fs / 100.0).round() as usize).max(1)
}

/// Per-channel standardization with divisor `n` and variance floor `1e-8`.
pub fn zscore<T: Scalar>(trial: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, t) = trial.dims2()?;
    let mut out = trial.clone();
    if t == 0 {
        return Ok(out);
    }
    let n = T::from_usize_lossy(t);
    for row in out.data_mut().chunks_mut(t) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let sd = var.max(T::lit(1e-8)).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    Ok(out)
}

/// window → Hampel (per channel) → z-score.
pub fn preprocess<T: Scalar>(stream: &Tensor<T>, fs: f64, window_ms: f64, overlap_ms: f64) -> Result<Vec<Tensor<T>>> {
    let hw = hampel_half_window(fs);
    window(stream, fs, window_ms, overlap_ms)?
        .into_iter()
        .map(|w| {
            let (c, t) = w.dims2()?;
            let mut data = Vec::with_capacity(c * t);
            for row in w.data().chunks(t) {
                data.extend(hampel(row, hw, 3.0));
            }
            zscore(&Tensor::new(vec![c, t], data)?)
        })
        .collect()
}

// ----- splits and sampling --------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub subject: u32,
    /// Held-out domain index.
    pub target: usize,
    pub sources: Vec<usize>,
}

/// Every other session of `subject` becomes a source domain.
pub fn leave_one_session_out(m: &DatasetManifest, subject: u32, target_session: u32) -> Result<SplitPlan> {
    let target = m.domain_index(Domain {
        subject,
        session: target_session,
    })?;
    let sources: Vec<usize> = m
        .domains
        .iter()
        .enumerate()
        .filter(|&(i, d)| d.subject == subject && i != target)
        .map(|(i, _)| i)
        .collect();
    if sources.is_empty() {
        return Err(Error::Data(format!("subject {subject} has no session besides {target_session}")));
    }
    Ok(SplitPlan {
        subject,
        target,
        sources,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Indices into the trial list handed to the sampler.
    pub indices: Vec<usize>,
    pub domains: Vec<usize>,
}

/// Domain-balanced batches: `d` distinct domains per batch with `b/d` trials each.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pools: BTreeMap<usize, Vec<usize>>,
    cursors: BTreeMap<usize, Vec<usize>>,
    queue: Vec<usize>,
    batch_size: usize,
    per_domain: usize,
    domains_per_batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    /// `members` maps a domain id to the trial indices it owns.
    pub fn new(members: BTreeMap<usize, Vec<usize>>, batch_size: usize, domains_per_batch: usize, seed: u64) -> Result<Self> {
        if domains_per_batch == 0 || batch_size == 0 || batch_size % domains_per_batch != 0 {
            return Err(Error::Config(format!(
                "batch size {batch_size} must be a positive multiple of domains per batch {domains_per_batch}"
            )));
        }
        let members: BTreeMap<usize, Vec<usize>> = members.into_iter().filter(|(_, v)| !v.is_empty()).collect();
        if domains_per_batch > members.len() {
            return Err(Error::Config(format!(
                "{domains_per_batch} domains per batch but only {} non-empty domains",
                members.len()
            )));
        }
        Ok(Self {
            cursors: members.keys().map(|&k| (k, Vec::new())).collect(),
            pools: members,
            queue: Vec::new(),
            batch_size,
            per_domain: batch_size / domains_per_batch,
            domains_per_batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn total_trials(&self) -> usize {
        self.pools.values().map(Vec::len).sum()
    }

    /// Batches in one pass over the pooled trials, and at least enough for
    /// every domain to appear once.
    pub fn batches_per_epoch(&self) -> usize {
        self.total_trials()
            .div_ceil(self.batch_size)
            .max(self.pools.len().div_ceil(self.domains_per_batch))
    }

    fn pick_domains(&mut self) -> Vec<usize> {
        let mut chosen = Vec::with_capacity(self.domains_per_batch);
        while chosen.len() < self.domains_per_batch {
            if self.queue.is_empty() {
                let mut fresh: Vec<usize> = self.pools.keys().copied().filter(|d| !chosen.contains(d)).collect();
                fresh.shuffle(&mut self.rng);
                self.queue = fresh;
            }
            let d = self.queue.pop().expect("refilled");
            if !chosen.contains(&d) {
                chosen.push(d);
            }
        }
        chosen
    }

    pub fn next_batch(&mut self) -> Batch {
        let domains = self.pick_domains();
        let mut batch = Batch {
            indices: Vec::with_capacity(self.batch_size),
            domains: Vec::with_capacity(self.batch_size),
        };
        for d in domains {
            for _ in 0..self.per_domain {
                let cursor = self.cursors.get_mut(&d).expect("known domain");
                if cursor.is_empty() {
                    let mut fresh = self.pools[&d].clone();
                    fresh.shuffle(&mut self.rng);
                    *cursor = fresh;
                }
                batch.indices.push(cursor.pop().expect("refilled"));
                batch.domains.push(d);
            }
        }
        batch
    }

    pub fn epoch(&mut self) -> Vec<Batch> {
        (0..self.batches_per_epoch()).map(|_| self.next_batch()).collect()
    }
}

// ----- synthetic data -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub sensors: usize,
    pub domains: usize,
    pub trials_per_cell: usize,
    pub fs: f64,
    pub window_ms: f64,
    pub overlap_ms: f64,
    /// Gain of the class-specific shared source on its muscle group.
    pub class_gain: f64,
    /// Upper bound on the condition number of each domain's mixing matrix.
    pub max_condition: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            sensors: 8,
            domains: 4,
            trials_per_cell: 50,
            fs: 500.0,
            window_ms: 150.0,
            overlap_ms: 75.0,
            class_gain: 1.0,
            max_condition: 3.0,
            seed: 0,
        }
    }
}

/// Electrode layout used by the generator: flexors on the first half,
/// proximal sensors on the first half of each muscle group.
pub fn synth_groups(c: usize) -> MuscleGroups {
    let half = c / 2;
    let quarter = half / 2;
    let proximal: Vec<usize> = (0..quarter).chain(half..half + quarter).collect();
    let distal: Vec<usize> = (quarter..half).chain(half + quarter..c).collect();
    MuscleGroups {
        flexor_ids: (0..half).collect(),
        extensor_ids: (half..c).collect(),
        proximal_ids: proximal,
        distal_ids: distal,
    }
}

/// Band-pass biquad (constant peak gain) applied in place.
fn bandpass(x: &mut [f64], fs: f64, centre: f64, q: f64) {
    let w0 = 2.0 * std::f64::consts::PI * centre / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let y = b0 * *v + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = *v;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let raw = Tensor::from_fn(&[n, n], |_| rng.sample::<f64, _>(StandardNormal));
    crate::linalg::orthonormalize_rows(&raw)
}

/// Class-specific spatial covariance: identity plus a rank-one block on the
/// class's muscle group with random positive loadings.
fn class_covariances(spec: &SynthSpec, groups: &MuscleGroups, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    let c = spec.sensors;
    let blocks = [&groups.flexor_ids, &groups.extensor_ids, &groups.proximal_ids, &groups.distal_ids];
    (0..spec.classes)
        .map(|k| {
            let mut sigma = Tensor::eye(c);
            let mut active = vec![k % 4];
            if k >= 4 {
                active.push((k + 1 + k / 4) % 4);
            }
            for a in active {
                let mut v = vec![0.0; c];
                for &i in blocks[a] {
                    v[i] = rng.gen_range(0.7..1.3);
                }
                for i in 0..c {
                    for j in 0..c {
                        let cur = sigma.at2(i, j);
                        sigma.set2(i, j, cur + spec.class_gain * v[i] * v[j]);
                    }
                }
            }
            Ok(sigma)
        })
        .collect()
}

/// Deterministic synthetic sEMG-like dataset with congruence drift across domains.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.sensors < 4 || spec.sensors % 2 != 0 {
        return Err(Error::Config(format!("synthetic data needs an even sensor count ≥ 4, got {}", spec.sensors)));
    }
    if spec.classes < 2 || spec.domains == 0 || spec.trials_per_cell == 0 {
        return Err(Error::Config("synthetic data needs ≥ 2 classes, ≥ 1 domain, ≥ 1 trial per cell".into()));
    }
    if !(spec.max_condition >= 1.0) || !(spec.class_gain >= 0.0) {
        return Err(Error::Config("max_condition must be ≥ 1 and class_gain ≥ 0".into()));
    }
    let c = spec.sensors;
    let groups = synth_groups(c);
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        name: format!("synthetic-{}", spec.seed),
        fs: spec.fs,
        sensors: c,
        class_names: (0..spec.classes).map(|k| format!("class{k}")).collect(),
        domains: (0..spec.domains as u32).map(|s| Domain { subject: 1, session: s + 1 }).collect(),
        groups: groups.clone(),
        window_ms: spec.window_ms,
        overlap_ms: spec.overlap_ms,
        provenance: format!("synthetic generator, {spec:?}"),
    };
    manifest.validate()?;
    let w = manifest.samples();
    let hop = w - ms_to_samples(spec.overlap_ms, spec.fs);
    let total = w + (spec.trials_per_cell - 1) * hop;
    let warmup = w;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigmas = class_covariances(spec, &groups, &mut rng)?;
    let roots: Vec<Tensor<f64>> = sigmas.iter().map(|s| sym_fn(s, SpectralFn::Sqrt)).collect::<Result<_>>()?;
    let centre = (0.12 * spec.fs).min(150.0);
    let mut trials = Vec::new();
    for d in 0..spec.domains {
        let q = random_orthogonal(c, &mut rng)?;
        let eig: Vec<f64> = (0..c).map(|_| rng.gen_range(1.0..=spec.max_condition)).collect();
        let mixing = q.transpose()?.matmul(&Tensor::diag(&eig))?.matmul(&q)?;
        let gain: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        let offset: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (k, root) in roots.iter().enumerate() {
            let mut noise = vec![0.0; c * (total + warmup)];
            for row in noise.chunks_mut(total + warmup) {
                row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                bandpass(row, spec.fs, centre, 0.8);
            }
            let noise = Tensor::new(vec![c, total + warmup], noise)?;
            let colored = mixing.matmul(root)?.matmul(&noise)?;
            let mut stream = Vec::with_capacity(c * total);
            for ch in 0..c {
                let row = &colored.data()[ch * (total + warmup) + warmup..(ch + 1) * (total + warmup)];
                stream.extend(row.iter().map(|v| gain[ch] * v + offset[ch]));
            }
            let stream = Tensor::new(vec![c, total], stream)?;
            for seg in preprocess(&stream, spec.fs, spec.window_ms, spec.overlap_ms)? {
                trials.push(Trial {
                    id: 0,
                    signal: seg.cast::<f32>(),
                    label: k,
                    domain: d,
                });
            }
        }
    }
    for (i, t) in trials.iter_mut().enumerate() {
        t.id = i as u64;
    }
    let ds = Dataset { manifest, trials };
    ds.validate()?;
    Ok(ds)
}

/// Shrunk sample covariance of each trial, for inspection and oracles.
pub fn trial_covariances(trials: &[&Trial]) -> Result<SpdBatch<f64>> {
    trials
        .iter()
        .map(|t| {
            let s = t.signal.cast::<f64>();
            let (c, n) = s.dims2()?;
            let mean: Vec<f64> = s.data().chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
            let centred = Tensor::from_fn(&[c, n], |k| s.data()[k] - mean[k / n]);
            let mut cov = centred.matmul(&centred.transpose()?)?.scale(1.0 / (n as f64 - 1.0));
            let lambda = 1e-4 * cov.trace()? / c as f64 + 1e-6;
            for i in 0..c {
                let v = cov.at2(i, i);
                cov.set2(i, i, v + lambda);
            }
            SpdMatrix::from_symmetrized(cov)
        })
        .collect::<Result<Vec<_>>>()
        .and_then(SpdBatch::new)
}

// ----- storage --------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    trial_id: u64,
    byte_offset: u64,
    label_id: usize,
    subject: u32,
    session: u32,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::io(path, source)
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&ds.manifest).map_err(|source| Error::Json {
        path: mpath.clone(),
        source,
    })?;
    fs::write(&mpath, json).map_err(io_err(&mpath))?;

    let tpath = dir.join(TRIALS_FILE);
    let mut out = BufWriter::new(File::create(&tpath).map_err(io_err(&tpath))?);
    let ipath = dir.join(INDEX_FILE);
    let mut index = csv::Writer::from_path(&ipath).map_err(|source| Error::Csv {
        path: ipath.clone(),
        source,
    })?;
    let mut offset = 0u64;
    for t in &ds.trials {
        let d = ds.manifest.domains[t.domain];
        index
            .serialize(IndexRow {
                trial_id: t.id,
                byte_offset: offset,
                label_id: t.label,
                subject: d.subject,
                session: d.session,
            })
            .map_err(|source| Error::Csv {
                path: ipath.clone(),
                source,
            })?;
        for v in t.signal.data() {
            out.write_all(&v.to_le_bytes()).map_err(io_err(&tpath))?;
        }
        offset += 4 * t.signal.numel() as u64;
    }
    out.flush().map_err(io_err(&tpath))?;
    index.flush().map_err(io_err(&ipath))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: mpath.clone(),
        source,
    })?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                path: mpath,
                found: v as u32,
                expected: FORMAT_VERSION,
            })
        }
        None => {
            return Err(Error::CorruptHeader {
                path: mpath,
                detail: "missing format_version".into(),
            })
        }
    }
    let manifest: DatasetManifest = serde_json::from_value(value).map_err(|source| Error::Json {
        path: mpath.clone(),
        source,
    })?;
    manifest.validate().map_err(|e| Error::CorruptHeader {
        path: mpath,
        detail: e.to_string(),
    })?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let ipath = dir.join(INDEX_FILE);
    let mut reader = csv::Reader::from_path(&ipath).map_err(|source| Error::Csv {
        path: ipath.clone(),
        source,
    })?;
    let rows: Vec<IndexRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|source| Error::Csv {
            path: ipath.clone(),
            source,
        })?;
    let tpath = dir.join(TRIALS_FILE);
    let mut bytes = Vec::new();
    File::open(&tpath)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(&tpath))?;
    let (c, t) = (manifest.sensors, manifest.samples());
    let trial_bytes = 4 * c * t;
    let expected = rows.len() * trial_bytes;
    if bytes.len() != expected {
        return Err(Error::LengthMismatch {
            path: tpath,
            detail: format!("{} bytes for {} trials of {c}x{t} (expected {expected})", bytes.len(), rows.len()),
        });
    }
    let mut trials = Vec::with_capacity(rows.len());
    for (k, row) in rows.iter().enumerate() {
        let start = row.byte_offset as usize;
        if start != k * trial_bytes {
            return Err(Error::LengthMismatch {
                path: ipath,
                detail: format!("trial {} starts at byte {start}, expected {}", row.trial_id, k * trial_bytes),
            });
        }
        if row.label_id >= manifest.classes() {
            return Err(Error::Data(format!(
                "{}: trial {} has label {} but only {} classes",
                ipath.display(),
                row.trial_id,
                row.label_id,
                manifest.classes()
            )));
        }
        let domain = manifest
            .domain_index(Domain {
                subject: row.subject,
                session: row.session,
            })
            .map_err(|_| {
                Error::Data(format!(
                    "{}: trial {} refers to subject {} session {}, absent from the manifest",
                    ipath.display(),
                    row.trial_id,
                    row.subject,
                    row.session
                ))
            })?;
        let data: Vec<f32> = bytes[start..start + trial_bytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        trials.push(Trial {
            id: row.trial_id,
            signal: Tensor::new(vec![c, t], data)?,
            label: row.label_id,
            domain,
        });
    }
    let ds = Dataset { manifest, trials };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        let s = Tensor::<f64>::from_fn(&[1, 1000], |k| k as f64);
        let w = window(&s, 2000.0, 200.0, 100.0).unwrap();
        assert_eq!(w.len(), 4);
        let starts: Vec<f64> = w.iter().map(|x| x.data()[0]).collect();
        assert_eq!(starts, vec![0.0, 200.0, 400.0, 600.0]);
        let exact = Tensor::<f64>::zeros(&[2, 400]);
        assert_eq!(window(&exact, 2000.0, 200.0, 100.0).unwrap().len(), 1);
        let short = Tensor::<f64>::zeros(&[2, 399]);
        assert!(window(&short, 2000.0, 200.0, 100.0).is_err());
    }

    #[test]
    fn hampel_examples() {
        assert_eq!(hampel(&[2.0f64; 9], 3, 3.0), vec![2.0; 9]);
        let mut spike = vec![0.0f64; 11];
        spike[5] = 100.0;
        assert_eq!(hampel(&spike, 3, 3.0), vec![0.0; 11]);
        let ramp: Vec<f64> = (0..10).map(|v| v as f64).collect();
        assert_eq!(hampel(&ramp, 3, 3.0), ramp);
    }

    #[test]
    fn zscore_examples() {
        let t = Tensor::<f64>::new(vec![2, 2], vec![0.0, 2.0, 5.0, 5.0]).unwrap();
        let z = zscore(&t).unwrap();
        assert_eq!(z.data(), &[-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn sampler_balance_and_errors() {
        let members: BTreeMap<usize, Vec<usize>> = (0..5).map(|d| (d, (d * 20..d * 20 + 20).collect())).collect();
        let mut s = BatchSampler::new(members.clone(), 50, 5, 1).unwrap();
        let b = s.next_batch();
        for d in 0..5 {
            assert_eq!(b.domains.iter().filter(|&&x| x == d).count(), 10);
        }
        assert!(BatchSampler::new(members.clone(), 50, 6, 1).is_err());
        assert!(BatchSampler::new(members, 50, 3, 1).is_err());
    }
}
