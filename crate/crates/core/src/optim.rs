//! Adam over a heterogeneous parameter store: Euclidean tensors, row-orthonormal
//! (Stiefel) matrices, SPD matrices and log-encoded positive scalars.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{congruence, exp_map, parallel_transport, SpdMatrix, TangentVector};
use crate::linalg::orthonormalize_rows;
use crate::tensor::Tensor;

type T64 = Tensor<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manifold {
    Euclidean,
    Stiefel,
    Spd,
    LogScalar,
}

/// What a parameter is used for; drives the weight-decay policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// Convolution or linear weight.
    Weight,
    Bias,
    /// Batch-norm scale or shift.
    NormAffine,
    /// Constrained geometric parameter (BiMap weight, DSBN bias/dispersion).
    Geometric,
}

/// Weight-decay multiplier for a parameter: `base` for Euclidean weights, 0 otherwise.
pub fn decay_policy(manifold: Manifold, role: ParamRole, base: f64) -> f64 {
    match (manifold, role) {
        (Manifold::Euclidean, ParamRole::Weight) => base,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: T64,
    /// Elementwise second moment; a single element for SPD parameters.
    v: T64,
    step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: T64,
    pub manifold: Manifold,
    pub role: ParamRole,
    moments: Moments,
}

impl Param {
    pub fn step_count(&self) -> u64 {
        self.moments.step
    }
}

/// Ordered collection of named parameters with optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

/// Parameters recorded as leaves on a tape, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    /// Gradients for every bound parameter, in store order.
    pub fn gradients(&self, grads: &Gradients) -> Result<Vec<T64>> {
        self.vars.iter().map(|&v| grads.get(v)).collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: T64, manifold: Manifold, role: ParamRole) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        check_feasible(name, &value, manifold)?;
        let v_shape: Vec<usize> = if manifold == Manifold::Spd { vec![] } else { value.shape().to_vec() };
        let moments = Moments {
            m: Tensor::zeros(value.shape()),
            v: Tensor::zeros(&v_shape),
            step: 0,
        };
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            manifold,
            role,
            moments,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&T64> {
        Ok(&self.get(name)?.value)
    }

    /// Replaces a value (e.g. when loading a checkpoint); optimizer state is reset.
    pub fn set_value(&mut self, name: &str, value: T64) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: shape {:?} vs stored {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        check_feasible(name, &value, p.manifold)?;
        p.value = value;
        p.moments.m = Tensor::zeros(p.value.shape());
        p.moments.v = Tensor::zeros(p.moments.v.shape());
        p.moments.step = 0;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Wraps already-recorded variables (one per parameter, in store order)
    /// as a binding, e.g. to evaluate the model at perturbed values.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(Bound {
            vars,
            index: self.index.clone(),
        })
    }

    /// One Adam step. `grads` are Euclidean gradients in store order. Nothing
    /// is modified when any gradient is non-finite or misshapen.
    pub fn step(&mut self, grads: &[T64], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {} has shape {:?}, expected {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        let mut next = Vec::with_capacity(self.params.len());
        for (p, g) in self.params.iter().zip(grads) {
            let decay = decay_policy(p.manifold, p.role, cfg.weight_decay);
            let updated = match p.manifold {
                Manifold::Euclidean | Manifold::LogScalar => euclidean_step(p, g, cfg, decay)?,
                Manifold::Stiefel => stiefel_step(p, g, cfg)?,
                Manifold::Spd => spd_step(p, g, cfg)?,
            };
            next.push(updated);
        }
        for (p, (value, moments)) in self.params.iter_mut().zip(next) {
            p.value = value;
            p.moments = moments;
        }
        Ok(())
    }
}

fn check_feasible(name: &str, value: &T64, manifold: Manifold) -> Result<()> {
    value.check_finite(name)?;
    match manifold {
        Manifold::Stiefel => {
            let (p, _) = value.dims2()?;
            let gram = value.matmul(&value.transpose()?)?;
            let err = gram.sub(&Tensor::eye(p))?.frobenius_norm();
            if err > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "{name}: rows are not orthonormal (error {err:.3e})"
                )));
            }
        }
        Manifold::Spd => {
            SpdMatrix::new(value.clone())?;
        }
        Manifold::LogScalar => {
            if value.numel() != 1 {
                return Err(Error::Shape(format!("{name}: log-scalar parameter has shape {:?}", value.shape())));
            }
        }
        Manifold::Euclidean => {}
    }
    Ok(())
}

fn bias_corrections(cfg: &AdamConfig, step: u64) -> (f64, f64) {
    let t = step as i32;
    (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t))
}

/// Elementwise Adam moments update; returns the preconditioned direction.
fn adam_direction(mo: &Moments, g: &T64, cfg: &AdamConfig) -> Result<(Moments, T64)> {
    let step = mo.step + 1;
    let m = mo.m.zip_map(g, |m, g| cfg.beta1 * m + (1.0 - cfg.beta1) * g)?;
    let v = mo.v.zip_map(g, |v, g| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g)?;
    let (c1, c2) = bias_corrections(cfg, step);
    let dir = m.zip_map(&v, |m, v| (m / c1) / ((v / c2).sqrt() + cfg.eps))?;
    Ok((Moments { m, v, step }, dir))
}

fn euclidean_step(p: &Param, g: &T64, cfg: &AdamConfig, decay: f64) -> Result<(T64, Moments)> {
    let (moments, dir) = adam_direction(&p.moments, g, cfg)?;
    let shrink = 1.0 - cfg.lr * decay;
    let value = p.value.zip_map(&dir, |w, d| w * shrink - cfg.lr * d)?;
    Ok((value, moments))
}

/// Tangent projection at a row-orthonormal `W`: `G − ½(G Wᵀ + W Gᵀ) W`.
pub fn stiefel_project(w: &T64, g: &T64) -> Result<T64> {
    let gwt = g.matmul(&w.transpose()?)?;
    let sym = gwt.add(&gwt.transpose()?)?.scale(0.5);
    g.sub(&sym.matmul(w)?)
}

fn stiefel_step(p: &Param, g: &T64, cfg: &AdamConfig) -> Result<(T64, Moments)> {
    let rg = stiefel_project(&p.value, g)?;
    let (mut moments, dir) = adam_direction(&p.moments, &rg, cfg)?;
    let dir = stiefel_project(&p.value, &dir)?;
    let moved = p.value.sub(&dir.scale(cfg.lr))?;
    let value = orthonormalize_rows(&moved).map_err(|e| Error::Retraction(format!("{}: {e}", p.name)))?;
    // carry the first moment to the new tangent space by projection
    moments.m = stiefel_project(&value, &moments.m)?;
    Ok((value, moments))
}

/// Riemannian Adam on the SPD manifold with the affine-invariant metric.
fn spd_step(p: &Param, g: &T64, cfg: &AdamConfig) -> Result<(T64, Moments)> {
    let base = SpdMatrix::from_symmetrized(p.value.clone())?;
    let egrad = g.sym()?;
    // Riemannian gradient G·sym(∇)·G
    let rgrad = congruence(base.as_tensor(), &egrad)?;
    let norm_sq = TangentVector::new(base.clone(), rgrad.clone())?.norm_squared()?;
    let mo = &p.moments;
    let step = mo.step + 1;
    let m = mo.m.scale(cfg.beta1).add(&rgrad.scale(1.0 - cfg.beta1))?;
    let v = cfg.beta2 * mo.v.data()[0] + (1.0 - cfg.beta2) * norm_sq;
    let (c1, c2) = bias_corrections(cfg, step);
    let scale = -cfg.lr / c1 / ((v / c2).sqrt() + cfg.eps);
    let xi = TangentVector::new(base.clone(), m.scale(scale))?;
    let next = exp_map(&xi)?;
    let m_next = parallel_transport(&TangentVector::new(base, m)?, &next)?;
    Ok((
        next.into_tensor(),
        Moments {
            m: m_next.vector,
            v: Tensor::scalar(v),
            step,
        },
    ))
}
