//! Riemannian backbone: covariance pooling, BiMap, ReEig, domain-specific
//! SPD batch normalization and LogEig, plus the linear classification head.
//!
//! The free functions operating on [`SpdBatch`] are direct, tape-free forms
//! used for inspection and as references. [`dsbn_forward`] records onto a tape.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{congruence, frechet_variance, geo_mean, log_euclidean_mean, SpdBatch, SpdMatrix};
use crate::linalg::{batch_sym_fn, sym_fn, SpectralFn};
use crate::tensor::Tensor;

type T64 = Tensor<f64>;

/// Covariance regularization `C + (rel · tr(C)/n + floor) · I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shrinkage {
    pub rel: f64,
    pub floor: f64,
}

impl Default for Shrinkage {
    fn default() -> Self {
        Self {
            rel: 1e-4,
            floor: 1e-6,
        }
    }
}

impl Shrinkage {
    pub fn fixed(lambda: f64) -> Self {
        Self {
            rel: 0.0,
            floor: lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub n_b: usize,
    pub shrinkage: Shrinkage,
    pub eps_reeig: f64,
    pub eps_var: f64,
    pub momentum: MomentumSchedule,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_b: 30,
            shrinkage: Shrinkage::default(),
            eps_reeig: 1e-4,
            eps_var: 1e-5,
            momentum: MomentumSchedule::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_b > 0
            && self.shrinkage.rel >= 0.0
            && self.shrinkage.floor >= 0.0
            && self.shrinkage.rel + self.shrinkage.floor > 0.0
            && self.eps_reeig > 0.0
            && self.eps_var > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid backbone settings {self:?}")));
        }
        self.momentum.validate()
    }
}

/// Covariance pooling of `[b, n_s, c_s, t_t]` features.
pub fn cov_pool(z: &T64, shrink: Shrinkage) -> Result<SpdBatch<f64>> {
    let &[b, n, cs, tt] = z.shape() else {
        return Err(Error::Shape(format!("cov_pool expects 4 axes, got {:?}", z.shape())));
    };
    let m = cs * tt;
    if m < 2 {
        return Err(Error::Shape(format!("cov_pool needs at least 2 observations, got {m}")));
    }
    let mut items = Vec::with_capacity(b);
    for k in 0..b {
        let rows = &z.data()[k * n * m..(k + 1) * n * m];
        let mut f = Tensor::new(vec![n, m], rows.to_vec())?;
        for row in f.data_mut().chunks_mut(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        let mut c = f.matmul(&f.transpose()?)?.scale(1.0 / (m - 1) as f64);
        let lambda = shrink.rel * c.trace()? / n as f64 + shrink.floor;
        for i in 0..n {
            let v = c.at2(i, i);
            c.set2(i, i, v + lambda);
        }
        items.push(SpdMatrix::from_symmetrized(c)?);
    }
    SpdBatch::new(items)
}

/// `W C Wᵀ` per sample.
pub fn bimap(c: &SpdBatch<f64>, w: &T64) -> Result<SpdBatch<f64>> {
    let (p, n) = w.dims2()?;
    if c.dim().is_some_and(|d| d != n) {
        return Err(Error::Shape(format!("bimap weight {p}x{n} for {:?}-dim input", c.dim())));
    }
    c.items()
        .iter()
        .map(|z| SpdMatrix::new(congruence(w, z.as_tensor())?))
        .collect::<Result<Vec<_>>>()
        .and_then(SpdBatch::new)
}

/// Eigenvalue rectification `U max(εI, S) Uᵀ`.
pub fn reeig(h: &SpdBatch<f64>, eps: f64) -> Result<SpdBatch<f64>> {
    let t = batch_sym_fn(&h.to_tensor()?, SpectralFn::ClampMin(eps))?;
    SpdBatch::from_tensor(&t)
}

/// Matrix logarithm per sample.
pub fn logeig(h: &SpdBatch<f64>) -> Result<T64> {
    batch_sym_fn(&h.to_tensor()?, SpectralFn::Log)
}

/// Flattens `[b, n, n]` row-major and applies `x Wᵀ + β`.
pub fn classify(h_log: &T64, weight: &T64, bias: &T64) -> Result<T64> {
    let (b, n) = match h_log.shape() {
        &[b, n, m] if n == m => (b, n),
        s => return Err(Error::Shape(format!("classify expects [b, n, n], got {s:?}"))),
    };
    let (nc, fin) = weight.dims2()?;
    if fin != n * n || bias.shape() != [nc] {
        return Err(Error::Shape(format!(
            "head {:?}/{:?} for {n}x{n} inputs",
            weight.shape(),
            bias.shape()
        )));
    }
    let x = h_log.reshape(&[b, n * n])?;
    let mut out = x.matmul(&weight.transpose()?)?;
    for row in out.data_mut().chunks_mut(nc) {
        for (o, &bv) in row.iter_mut().zip(bias.data()) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Batch statistics: one-step Karcher mean from the identity and the
/// dispersion `sqrt(V²)` about it.
pub fn batch_statistics(z: &SpdBatch<f64>) -> Result<(SpdMatrix<f64>, f64)> {
    let g = log_euclidean_mean(z)?;
    let v = frechet_variance(z, &g)?.sqrt();
    Ok((g, v))
}

/// `G_φ^{1/2} (G_ref^{-1/2} Z G_ref^{-1/2})^p G_φ^{1/2}` with `p = V_φ / (V_ref + ε)`.
pub fn spdbn_normalize(
    z: &SpdBatch<f64>,
    g_ref: &SpdMatrix<f64>,
    v_ref: f64,
    g_phi: &SpdMatrix<f64>,
    v_phi: f64,
    eps_var: f64,
) -> Result<SpdBatch<f64>> {
    let p = v_phi / (v_ref + eps_var);
    let (_, ref_inv_sqrt) = g_ref.sqrt_pair()?;
    let (phi_sqrt, _) = g_phi.sqrt_pair()?;
    z.items()
        .iter()
        .map(|zj| {
            let centred = congruence(&ref_inv_sqrt, zj.as_tensor())?;
            let powered = sym_fn(&centred, SpectralFn::Pow(p))?;
            SpdMatrix::from_symmetrized(congruence(&phi_sqrt, &powered)?)
        })
        .collect::<Result<Vec<_>>>()
        .and_then(SpdBatch::new)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Adapt,
    Eval,
}

/// Momentum `γ = max(floor, 1/(s + 1))` where `s` counts previous updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentumSchedule {
    pub source_floor: f64,
    pub target_floor: f64,
}

impl Default for MomentumSchedule {
    fn default() -> Self {
        Self {
            source_floor: 0.1,
            target_floor: 0.05,
        }
    }
}

impl MomentumSchedule {
    pub fn gamma(&self, role: DomainRole, previous_updates: u64) -> f64 {
        let floor = match role {
            DomainRole::Source => self.source_floor,
            DomainRole::Target => self.target_floor,
        };
        floor.max(1.0 / (previous_updates as f64 + 1.0))
    }

    fn validate(&self) -> Result<()> {
        let ok = |g: f64| (0.0..=1.0).contains(&g);
        if ok(self.source_floor) && ok(self.target_floor) {
            Ok(())
        } else {
            Err(Error::Config(format!("momentum floors must lie in [0, 1]: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub g_run: T64,
    /// Running dispersion (square root of the Fréchet variance).
    pub v_run: f64,
    pub steps: u64,
}

/// Per-domain running Fréchet statistics. In shared mode every domain maps to
/// a single slot, which gives an ordinary (non domain-specific) SPD batch norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsbnState {
    pub shared: bool,
    pub schedule: MomentumSchedule,
    roles: BTreeMap<usize, DomainRole>,
    stats: BTreeMap<usize, RunningStats>,
}

/// A pending running-statistics update produced by a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DsbnUpdate {
    pub slot: usize,
    pub role: DomainRole,
    pub g_batch: SpdMatrix<f64>,
    pub v_batch: f64,
}

impl DsbnState {
    pub fn new(schedule: MomentumSchedule, shared: bool) -> Self {
        Self {
            shared,
            schedule,
            roles: BTreeMap::new(),
            stats: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, domain: usize, role: DomainRole) {
        self.roles.insert(domain, role);
    }

    pub fn role(&self, domain: usize) -> Result<DomainRole> {
        self.roles
            .get(&domain)
            .copied()
            .ok_or_else(|| Error::UnknownDomain(domain.to_string()))
    }

    pub fn domains(&self) -> impl Iterator<Item = (usize, DomainRole)> + '_ {
        self.roles.iter().map(|(&d, &r)| (d, r))
    }

    pub fn slot(&self, domain: usize) -> usize {
        if self.shared {
            0
        } else {
            domain
        }
    }

    pub fn stats(&self, domain: usize) -> Option<&RunningStats> {
        self.stats.get(&self.slot(domain))
    }

    pub fn apply(&mut self, update: &DsbnUpdate) -> Result<()> {
        let gamma_for = |steps| self.schedule.gamma(update.role, steps);
        let next = match self.stats.get(&update.slot) {
            None => RunningStats {
                g_run: update.g_batch.as_tensor().clone(),
                v_run: update.v_batch,
                steps: 1,
            },
            Some(s) => {
                let gamma = gamma_for(s.steps);
                let g_old = SpdMatrix::from_symmetrized(s.g_run.clone())?;
                RunningStats {
                    g_run: geo_mean(&g_old, &update.g_batch, gamma)?.into_tensor(),
                    v_run: (1.0 - gamma) * s.v_run + gamma * update.v_batch,
                    steps: s.steps + 1,
                }
            }
        };
        self.stats.insert(update.slot, next);
        Ok(())
    }

    pub fn apply_all(&mut self, updates: &[DsbnUpdate]) -> Result<()> {
        updates.iter().try_for_each(|u| self.apply(u))
    }

    /// Stored statistics by slot.
    pub fn slots(&self) -> impl Iterator<Item = (usize, &RunningStats)> + '_ {
        self.stats.iter().map(|(&s, r)| (s, r))
    }

    pub fn set_slot(&mut self, slot: usize, stats: RunningStats) {
        self.stats.insert(slot, stats);
    }

    pub fn clear_stats(&mut self, domain: usize) {
        let slot = self.slot(domain);
        self.stats.remove(&slot);
    }
}

/// Learnable DSBN parameters bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DsbnParams {
    pub g_phi: Var,
    /// Log of the target dispersion `V_φ`.
    pub log_v_phi: Var,
}

struct Group {
    slot: usize,
    role: DomainRole,
    rows: Vec<usize>,
}

fn group_rows(domains: &[usize], state: &DsbnState, mode: BnMode) -> Result<Vec<Group>> {
    let mut groups: BTreeMap<usize, Group> = BTreeMap::new();
    for (row, &d) in domains.iter().enumerate() {
        let role = state.role(d)?;
        match (mode, role) {
            (BnMode::Train, DomainRole::Target) => {
                return Err(Error::InvalidArgument(format!(
                    "domain {d} is a target domain; training batches take source domains only"
                )))
            }
            (BnMode::Adapt, DomainRole::Source) => {
                return Err(Error::InvalidArgument(format!(
                    "domain {d} is a source domain; adaptation takes target domains only"
                )))
            }
            _ => {}
        }
        let slot = state.slot(d);
        groups
            .entry(slot)
            .or_insert_with(|| Group {
                slot,
                role,
                rows: Vec::new(),
            })
            .rows
            .push(row);
    }
    Ok(groups.into_values().collect())
}

/// Domain-specific SPD batch normalization of `h` (`[b, n, n]`).
///
/// Train and adapt modes normalize each domain group with its own batch
/// statistics (differentiated through) and return updates for the running
/// statistics. Eval mode uses the stored running statistics as constants.
pub fn dsbn_forward(
    tape: &mut Tape,
    h: Var,
    domains: &[usize],
    state: &DsbnState,
    params: DsbnParams,
    mode: BnMode,
    eps_var: f64,
) -> Result<(Var, Vec<DsbnUpdate>)> {
    let (b, n, _) = tape.value(h)?.dims3()?;
    if domains.len() != b {
        return Err(Error::Shape(format!("{} domain ids for a batch of {b}", domains.len())));
    }
    let groups = group_rows(domains, state, mode)?;
    let phi_sqrt = tape.sym_fn(params.g_phi, SpectralFn::Sqrt)?;
    let v_phi = tape.exp(params.log_v_phi)?;
    let mut outputs = Vec::with_capacity(groups.len());
    let mut updates = Vec::new();
    for g in &groups {
        let zg = if groups.len() == 1 { h } else { tape.gather(h, 0, &g.rows)? };
        let (l, v) = match mode {
            BnMode::Train | BnMode::Adapt => {
                if g.rows.len() < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "batch statistics need at least 2 samples per domain, got {}",
                        g.rows.len()
                    )));
                }
                let k = g.rows.len() as f64;
                let logs = tape.sym_fn(zg, SpectralFn::Log)?;
                let mean_log = tape.mean_axis0(logs)?;
                let half = tape.scale(mean_log, -0.5)?;
                let whiten = tape.sym_fn(half, SpectralFn::Exp)?;
                let centred = tape.congruence(whiten, zg)?;
                let l = tape.sym_fn(centred, SpectralFn::Log)?;
                let sq = tape.mul(l, l)?;
                let total = tape.sum(sq)?;
                let var = tape.scale(total, 1.0 / k)?;
                let v = tape.sqrt(var)?;
                let g_batch = SpdMatrix::from_symmetrized(sym_fn(tape.value(mean_log)?, SpectralFn::Exp)?)?;
                updates.push(DsbnUpdate {
                    slot: g.slot,
                    role: g.role,
                    g_batch,
                    v_batch: tape.value(v)?.item()?,
                });
                (l, v)
            }
            BnMode::Eval => {
                let stats = state
                    .stats
                    .get(&g.slot)
                    .ok_or_else(|| Error::Uninitialized(format!("domain slot {}", g.slot)))?;
                let g_run = SpdMatrix::from_symmetrized(stats.g_run.clone())?;
                if g_run.dim() != n {
                    return Err(Error::Shape(format!("running mean {0}x{0} for {n}x{n} inputs", g_run.dim())));
                }
                let (_, inv_sqrt) = g_run.sqrt_pair()?;
                let whiten = tape.constant(inv_sqrt);
                let centred = tape.congruence(whiten, zg)?;
                let l = tape.sym_fn(centred, SpectralFn::Log)?;
                let v = tape.constant(Tensor::scalar(stats.v_run));
                (l, v)
            }
        };
        let denom = tape.add_const(v, eps_var)?;
        let p = tape.div(v_phi, denom)?;
        let scaled = tape.mul(l, p)?;
        let e = tape.sym_fn(scaled, SpectralFn::Exp)?;
        outputs.push(tape.congruence(phi_sqrt, e)?);
    }
    let out = if groups.len() == 1 {
        outputs[0]
    } else {
        let stacked = tape.concat(&outputs, 0)?;
        let mut inverse = vec![0; b];
        for (pos, row) in groups.iter().flat_map(|g| g.rows.iter()).enumerate() {
            inverse[*row] = pos;
        }
        tape.gather(stacked, 0, &inverse)?
    };
    Ok((out, updates))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> SpdMatrix<f64> {
        SpdMatrix::from_diagonal(v).unwrap()
    }

    #[test]
    fn cov_pool_hand_case() {
        let z = Tensor::new(vec![1, 2, 1, 2], vec![1.0, -1.0, 1.0, 1.0]).unwrap();
        let c = cov_pool(&z, Shrinkage::fixed(0.01)).unwrap();
        let t = c.items()[0].as_tensor();
        assert!((t.at2(0, 0) - 2.01).abs() < 1e-15);
        assert!((t.at2(1, 1) - 0.01).abs() < 1e-15);
        assert_eq!(t.at2(0, 1), 0.0);
    }

    #[test]
    fn reeig_clamps() {
        let h = SpdBatch::new(vec![diag(&[1e-8, 1.0])]).unwrap();
        let r = reeig(&h, 1e-4).unwrap();
        let t = r.items()[0].as_tensor();
        assert!((t.at2(0, 0) - 1e-4).abs() < 1e-15);
        assert!((t.at2(1, 1) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn normalize_commuting_batch() {
        let e2 = 2f64.exp();
        let e4 = 4f64.exp();
        let z = SpdBatch::new(vec![diag(&[1.0, 1.0]), diag(&[e4, e4])]).unwrap();
        let (g, _) = batch_statistics(&z).unwrap();
        assert!((g.as_tensor().at2(0, 0) - e2).abs() < 1e-10 * e2);
        let out = spdbn_normalize(&z, &g, 0.0, &SpdMatrix::identity(2), 1e-5, 1e-5).unwrap();
        assert!((out.items()[0].as_tensor().at2(0, 0) - (-2f64).exp()).abs() < 1e-12);
        assert!((out.items()[1].as_tensor().at2(1, 1) - e2).abs() < 1e-10 * e2);
    }

    #[test]
    fn gamma_schedule() {
        let s = MomentumSchedule::default();
        assert_eq!(s.gamma(DomainRole::Source, 0), 1.0);
        assert_eq!(s.gamma(DomainRole::Source, 3), 0.25);
        assert_eq!(s.gamma(DomainRole::Source, 100), 0.1);
        assert_eq!(s.gamma(DomainRole::Target, 100), 0.05);
    }

    #[test]
    fn first_update_copies_batch_statistics() {
        let mut state = DsbnState::new(MomentumSchedule::default(), false);
        state.register(3, DomainRole::Target);
        let g = diag(&[2.0, 5.0]);
        state
            .apply(&DsbnUpdate {
                slot: 3,
                role: DomainRole::Target,
                g_batch: g.clone(),
                v_batch: 0.7,
            })
            .unwrap();
        let s = state.stats(3).unwrap();
        assert_eq!(&s.g_run, g.as_tensor());
        assert_eq!(s.v_run, 0.7);
        assert_eq!(s.steps, 1);
    }
}
