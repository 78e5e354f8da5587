//! The full network: MRT → MSS → covariance pooling → BiMap → ReEig → DSBN →
//! LogEig → linear head.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_rows, SpectralFn};
use crate::optim::{Bound, Manifold, ParamRole, ParamStore};
use crate::spd::{dsbn_forward, BackboneConfig, BnMode, DomainRole, DsbnParams, DsbnState, DsbnUpdate};
use crate::stem::{
    euclid_batchnorm, mrt_branches, mss_branches, mss_kernels, EuclidBnState, MuscleGroups, StemConfig,
};
use crate::tensor::Tensor;

type T64 = Tensor<f64>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stem: StemConfig,
    pub backbone: BackboneConfig,
    /// Use one SPD batch norm for every domain instead of per-domain statistics.
    pub shared_bn: bool,
}

/// Data-dependent dimensions of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub sensors: usize,
    pub samples: usize,
    pub classes: usize,
    pub groups: MuscleGroups,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TmkNet {
    pub config: ModelConfig,
    pub input: InputShape,
    pub params: ParamStore,
    pub mrt_bn: EuclidBnState,
    pub mss_bn: EuclidBnState,
    pub dsbn: DsbnState,
}

/// Out-of-band state changes produced by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct StateUpdates {
    pub mrt: Option<BatchStats>,
    pub mss: Option<BatchStats>,
    pub dsbn: Vec<DsbnUpdate>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// ReEig output, the DSBN input.
    pub pre_dsbn: Var,
    pub post_dsbn: Var,
    pub updates: StateUpdates,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> T64 {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl TmkNet {
    pub fn new(config: ModelConfig, input: InputShape, rng: &mut impl Rng) -> Result<Self> {
        let c = input.sensors;
        input.groups.validate(c)?;
        config.stem.validate(c, input.samples)?;
        config.backbone.validate()?;
        if input.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", input.classes)));
        }
        let stem = &config.stem;
        let (n_t, n_s, n_b) = (stem.n_t, stem.n_s, config.backbone.n_b);
        if n_b > n_s {
            return Err(Error::Config(format!("n_b ({n_b}) must not exceed n_s ({n_s})")));
        }
        let mut params = ParamStore::new();
        for (i, k) in stem.kernel_sizes()?.into_iter().enumerate() {
            let w = uniform(&[n_t, 1, 1, k], (3.0 / k as f64).sqrt(), rng);
            params.insert(&format!("mrt.conv{i}.weight"), w, Manifold::Euclidean, ParamRole::Weight)?;
            params.insert(&format!("mrt.conv{i}.bias"), Tensor::zeros(&[n_t]), Manifold::Euclidean, ParamRole::Bias)?;
        }
        params.insert("mrt.bn.gamma", Tensor::full(&[n_t], 1.0), Manifold::Euclidean, ParamRole::NormAffine)?;
        params.insert("mrt.bn.beta", Tensor::zeros(&[n_t]), Manifold::Euclidean, ParamRole::NormAffine)?;
        for (name, kh) in mss_kernels(stem.branches, c) {
            let fan_in = n_t * kh;
            let w = uniform(&[n_s, n_t, kh, 1], (3.0 / fan_in as f64).sqrt(), rng);
            params.insert(&format!("mss.{name}.weight"), w, Manifold::Euclidean, ParamRole::Weight)?;
            params.insert(&format!("mss.{name}.bias"), Tensor::zeros(&[n_s]), Manifold::Euclidean, ParamRole::Bias)?;
        }
        params.insert("mss.bn.gamma", Tensor::full(&[n_s], 1.0), Manifold::Euclidean, ParamRole::NormAffine)?;
        params.insert("mss.bn.beta", Tensor::zeros(&[n_s]), Manifold::Euclidean, ParamRole::NormAffine)?;
        let raw = Tensor::from_fn(&[n_b, n_s], |_| rng.sample::<f64, _>(StandardNormal));
        params.insert("bimap.weight", orthonormalize_rows(&raw)?, Manifold::Stiefel, ParamRole::Geometric)?;
        params.insert("dsbn.g_phi", Tensor::eye(n_b), Manifold::Spd, ParamRole::Geometric)?;
        params.insert("dsbn.log_v_phi", Tensor::scalar(0.0), Manifold::LogScalar, ParamRole::Geometric)?;
        let feat = n_b * n_b;
        let head = uniform(&[input.classes, feat], 1.0 / (feat as f64).sqrt(), rng);
        params.insert("head.weight", head, Manifold::Euclidean, ParamRole::Weight)?;
        params.insert("head.bias", Tensor::zeros(&[input.classes]), Manifold::Euclidean, ParamRole::Bias)?;
        let dsbn = DsbnState::new(config.backbone.momentum, config.shared_bn);
        Ok(Self {
            mrt_bn: EuclidBnState::new(n_t),
            mss_bn: EuclidBnState::new(n_s),
            dsbn,
            config,
            input,
            params,
        })
    }

    pub fn register_domain(&mut self, domain: usize, role: DomainRole) {
        self.dsbn.register(domain, role);
    }

    /// Forward pass. `x` holds `[b, 1, c, t]` trials; `domains` gives each
    /// sample's domain id. Train mode uses batch statistics everywhere; adapt
    /// mode freezes the Euclidean norms and gathers target SPD statistics;
    /// eval mode uses stored statistics only.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, domains: &[usize], mode: BnMode) -> Result<Forward> {
        let shape = tape.shape(x)?.to_vec();
        let expected = [shape.first().copied().unwrap_or(0), 1, self.input.sensors, self.input.samples];
        if shape != expected {
            return Err(Error::Shape(format!("model input {shape:?}, expected {expected:?}")));
        }
        let b = shape[0];
        let stem = &self.config.stem;
        let bb = &self.config.backbone;
        let train = mode == BnMode::Train;
        let mut updates = StateUpdates::default();

        let zt = mrt_branches(tape, p, x, stem)?;
        let (zt, s) = euclid_batchnorm(
            tape,
            zt,
            p.get("mrt.bn.gamma")?,
            p.get("mrt.bn.beta")?,
            &self.mrt_bn,
            train,
            stem.bn_eps,
            "mrt.bn",
        )?;
        updates.mrt = s;
        let zs = mss_branches(tape, p, zt, stem, &self.input.groups)?;
        let (zs, s) = euclid_batchnorm(
            tape,
            zs,
            p.get("mss.bn.gamma")?,
            p.get("mss.bn.beta")?,
            &self.mss_bn,
            train,
            stem.bn_eps,
            "mss.bn",
        )?;
        updates.mss = s;

        let zs_shape = tape.shape(zs)?.to_vec();
        let flat = tape.reshape(zs, &[b, zs_shape[1], zs_shape[2] * zs_shape[3]])?;
        let cov = tape.covariance(flat)?;
        let cov = tape.trace_shrink(cov, bb.shrinkage.rel, bb.shrinkage.floor)?;
        let h = tape.congruence(p.get("bimap.weight")?, cov)?;
        let h = tape.sym_fn(h, SpectralFn::ClampMin(bb.eps_reeig))?;
        let dsbn_params = DsbnParams {
            g_phi: p.get("dsbn.g_phi")?,
            log_v_phi: p.get("dsbn.log_v_phi")?,
        };
        let (post, dsbn_updates) = dsbn_forward(tape, h, domains, &self.dsbn, dsbn_params, mode, bb.eps_var)?;
        updates.dsbn = dsbn_updates;
        let l = tape.sym_fn(post, SpectralFn::Log)?;
        let n_b = bb.n_b;
        let l = tape.reshape(l, &[b, n_b * n_b])?;
        let logits = tape.linear(l, p.get("head.weight")?, Some(p.get("head.bias")?))?;
        Ok(Forward {
            logits,
            pre_dsbn: h,
            post_dsbn: post,
            updates,
        })
    }

    /// Applies the running-statistics updates from a forward pass.
    pub fn apply_updates(&mut self, u: &StateUpdates) -> Result<()> {
        let momentum = self.config.stem.bn_momentum;
        if let Some(s) = &u.mrt {
            self.mrt_bn.update(s, momentum);
        }
        if let Some(s) = &u.mss {
            self.mss_bn.update(s, momentum);
        }
        self.dsbn.apply_all(&u.dsbn)
    }
}

/// Upper-triangular vectorization with `√2` off-diagonal scaling, so that
/// the Euclidean norm of the vector equals the Frobenius norm of the matrix.
pub fn vectorize_upper(m: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        out.push(m[i * n + i]);
        for j in i + 1..n {
            out.push(m[i * n + j] * std::f64::consts::SQRT_2);
        }
    }
    out
}
