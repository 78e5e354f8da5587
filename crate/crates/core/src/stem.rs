//! Euclidean stem: multi-resolution temporal convolutions (MRT) followed by
//! the anatomy-informed multi-scale spatial convolutions (MSS).

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::Bound;

/// Sensor index lists describing the electrode layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuscleGroups {
    pub flexor_ids: Vec<usize>,
    pub extensor_ids: Vec<usize>,
    pub proximal_ids: Vec<usize>,
    pub distal_ids: Vec<usize>,
}

impl MuscleGroups {
    /// First half flexor and proximal, second half extensor and distal.
    pub fn contiguous(c: usize) -> Self {
        let half = c / 2;
        Self {
            flexor_ids: (0..half).collect(),
            extensor_ids: (half..c).collect(),
            proximal_ids: (0..half).collect(),
            distal_ids: (half..c).collect(),
        }
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        if c == 0 || c % 2 != 0 {
            return Err(Error::Config(format!("sensor count must be even and positive, got {c}")));
        }
        let half = c / 2;
        let lists = [
            ("flexor_ids", &self.flexor_ids),
            ("extensor_ids", &self.extensor_ids),
            ("proximal_ids", &self.proximal_ids),
            ("distal_ids", &self.distal_ids),
        ];
        for (name, ids) in lists {
            if let Some(bad) = ids.iter().find(|&&i| i >= c) {
                return Err(Error::Config(format!("{name} contains {bad}, outside 0..{c}")));
            }
        }
        if self.flexor_ids.len() != half || self.extensor_ids.len() != half {
            return Err(Error::Config(format!(
                "flexor_ids and extensor_ids must each list {half} sensors (got {} and {})",
                self.flexor_ids.len(),
                self.extensor_ids.len()
            )));
        }
        if self.proximal_ids.len() != half || self.distal_ids.len() != half {
            return Err(Error::Config(format!(
                "proximal_ids and distal_ids must each list {half} sensors (got {} and {})",
                self.proximal_ids.len(),
                self.distal_ids.len()
            )));
        }
        let mut seen = vec![false; c];
        for &i in self.proximal_ids.iter().chain(&self.distal_ids) {
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("proximal_ids and distal_ids must together cover every sensor".into()));
        }
        Ok(())
    }

    /// Proximal sensors followed by distal sensors.
    pub fn proximal_distal_order(&self) -> Vec<usize> {
        self.proximal_ids.iter().chain(&self.distal_ids).copied().collect()
    }
}

/// Which MSS branches are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MssBranches {
    pub global: bool,
    pub flexor: bool,
    pub extensor: bool,
    pub proximal_distal: bool,
    pub dilated: bool,
}

impl Default for MssBranches {
    fn default() -> Self {
        Self {
            global: true,
            flexor: true,
            extensor: true,
            proximal_distal: true,
            dilated: true,
        }
    }
}

impl MssBranches {
    pub fn global_only() -> Self {
        Self {
            global: true,
            flexor: false,
            extensor: false,
            proximal_distal: false,
            dilated: false,
        }
    }

    /// Spatial size of the concatenated branch outputs.
    pub fn spatial_size(&self, c: usize) -> usize {
        let half = c / 2;
        self.global as usize
            + self.flexor as usize
            + self.extensor as usize
            + 2 * self.proximal_distal as usize
            + half * self.dilated as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StemConfig {
    pub fs: f64,
    pub r_data: f64,
    pub r_resolution: Vec<f64>,
    pub n_t: usize,
    pub n_s: usize,
    pub pool_size: usize,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub branches: MssBranches,
}

impl Default for StemConfig {
    fn default() -> Self {
        Self {
            fs: 2000.0,
            r_data: 0.2,
            r_resolution: vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0],
            n_t: 64,
            n_s: 40,
            pool_size: 4,
            leaky_slope: 0.01,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            branches: MssBranches::default(),
        }
    }
}

/// `floor(r_data · r · Fs)`, at least 1.
pub fn temporal_kernel_size(fs: f64, r_data: f64, r_resolution: f64) -> Result<usize> {
    if !(fs > 0.0) || !(r_data > 0.0 && r_data <= 1.0) || !(r_resolution > 0.0 && r_resolution <= 1.0) {
        return Err(Error::Config(format!(
            "kernel size needs Fs > 0 and ratios in (0, 1], got Fs={fs}, r_data={r_data}, r={r_resolution}"
        )));
    }
    Ok(((r_data * r_resolution * fs).floor() as usize).max(1))
}

impl StemConfig {
    pub fn kernel_sizes(&self) -> Result<Vec<usize>> {
        self.r_resolution
            .iter()
            .map(|&r| temporal_kernel_size(self.fs, self.r_data, r))
            .collect()
    }

    /// Time length after MRT for an input of `t` samples.
    pub fn mrt_time(&self, t: usize) -> Result<usize> {
        let mut total = 0;
        for k in self.kernel_sizes()? {
            if k > t {
                return Err(Error::Config(format!("temporal kernel {k} exceeds window length {t}")));
            }
            let len = (t - k + 1) / self.pool_size;
            if len == 0 {
                return Err(Error::Config(format!(
                    "pool size {} leaves no output for kernel {k} on {t} samples",
                    self.pool_size
                )));
            }
            total += len;
        }
        Ok(total)
    }

    pub fn validate(&self, c: usize, t: usize) -> Result<()> {
        if self.r_resolution.is_empty() {
            return Err(Error::Config("at least one temporal resolution is required".into()));
        }
        if self.n_t == 0 || self.n_s == 0 || self.pool_size == 0 {
            return Err(Error::Config("n_t, n_s and pool_size must be positive".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be positive and bn_momentum in [0, 1]".into()));
        }
        if self.branches.spatial_size(c) == 0 {
            return Err(Error::Config("at least one MSS branch is required".into()));
        }
        self.mrt_time(t).map(|_| ())
    }
}

/// Running statistics of a Euclidean batch norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EuclidBnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub updates: u64,
}

impl EuclidBnState {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            updates: 0,
        }
    }

    /// `r ← (1 − μ) r + μ · batch`.
    pub fn update(&mut self, stats: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        self.updates += 1;
    }
}

/// Euclidean batch norm over axis 1: batch statistics when `train`, running
/// statistics otherwise.
pub fn euclid_batchnorm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &EuclidBnState,
    train: bool,
    eps: f64,
    name: &str,
) -> Result<(Var, Option<BatchStats>)> {
    if train {
        let (out, stats) = tape.batch_norm_train(x, gamma, beta, eps)?;
        Ok((out, Some(stats)))
    } else {
        if state.updates == 0 {
            return Err(Error::Uninitialized(format!("{name} running statistics")));
        }
        let out = tape.batch_norm_eval(x, gamma, beta, &state.mean, &state.var, eps)?;
        Ok((out, None))
    }
}

/// MRT without its batch norm: per kernel, conv → LeakyReLU → max-pool, then
/// concatenation along time. `x` is `[b, 1, c, t]`.
pub fn mrt_branches(tape: &mut Tape, p: &Bound, x: Var, cfg: &StemConfig) -> Result<Var> {
    let mut outs = Vec::with_capacity(cfg.r_resolution.len());
    for i in 0..cfg.r_resolution.len() {
        let w = p.get(&format!("mrt.conv{i}.weight"))?;
        let b = p.get(&format!("mrt.conv{i}.bias"))?;
        let y = tape.conv2d(x, w, Some(b), Conv2dSpec::default())?;
        let y = tape.leaky_relu(y, cfg.leaky_slope)?;
        outs.push(tape.max_pool_time(y, cfg.pool_size)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 3)
    }
}

/// MSS without its batch norm. `z` is `[b, n_t, c, t_t]`.
pub fn mss_branches(tape: &mut Tape, p: &Bound, z: Var, cfg: &StemConfig, groups: &MuscleGroups) -> Result<Var> {
    let c = tape.shape(z)?[2];
    let half = c / 2;
    let br = cfg.branches;
    let mut outs = Vec::new();
    let mut branch = |tape: &mut Tape, name: &str, input: Var, spec: Conv2dSpec| -> Result<()> {
        let w = p.get(&format!("mss.{name}.weight"))?;
        let b = p.get(&format!("mss.{name}.bias"))?;
        let y = tape.conv2d(input, w, Some(b), spec)?;
        outs.push(tape.leaky_relu(y, cfg.leaky_slope)?);
        Ok(())
    };
    let unit = Conv2dSpec::default();
    if br.global {
        branch(tape, "global", z, unit)?;
    }
    if br.flexor {
        let g = tape.gather(z, 2, &groups.flexor_ids)?;
        branch(tape, "flexor", g, unit)?;
    }
    if br.extensor {
        let g = tape.gather(z, 2, &groups.extensor_ids)?;
        branch(tape, "extensor", g, unit)?;
    }
    if br.proximal_distal {
        let g = tape.gather(z, 2, &groups.proximal_distal_order())?;
        let spec = Conv2dSpec {
            stride: (half, 1),
            dilation: (1, 1),
        };
        branch(tape, "proximal_distal", g, spec)?;
    }
    if br.dilated {
        let spec = Conv2dSpec {
            stride: (1, 1),
            dilation: (half, 1),
        };
        branch(tape, "dilated", z, spec)?;
    }
    match outs.len() {
        0 => Err(Error::Config("no MSS branch enabled".into())),
        1 => Ok(outs[0]),
        _ => tape.concat(&outs, 2),
    }
}

/// Kernel heights of the enabled MSS branches, by parameter name.
pub fn mss_kernels(branches: MssBranches, c: usize) -> Vec<(&'static str, usize)> {
    let half = c / 2;
    let mut out = Vec::new();
    if branches.global {
        out.push(("global", c));
    }
    if branches.flexor {
        out.push(("flexor", half));
    }
    if branches.extensor {
        out.push(("extensor", half));
    }
    if branches.proximal_distal {
        out.push(("proximal_distal", half));
    }
    if branches.dilated {
        out.push(("dilated", 2));
    }
    out
}
