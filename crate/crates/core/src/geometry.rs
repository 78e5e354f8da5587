//! Affine-invariant Riemannian geometry on symmetric positive definite matrices.

use crate::error::{Error, Result};
use crate::linalg::{sym_eig, sym_fn_from_eig, SpectralFn, SymEig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative asymmetry tolerated by [`SpdMatrix::new`].
pub const SPD_SYMMETRY_TOL: f64 = 1e-10;

/// A symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix<T> {
    inner: Tensor<T>,
}

impl<T: Scalar> SpdMatrix<T> {
    /// Validates symmetry (to `1e-10` relative) and positive definiteness.
    pub fn new(m: Tensor<T>) -> Result<Self> {
        let asym = m.asymmetry()?;
        if asym > T::lit(SPD_SYMMETRY_TOL) {
            return Err(Error::NotSymmetric(asym.as_f64()));
        }
        Self::from_symmetrized(m)
    }

    /// Symmetrizes `m` before checking positive definiteness.
    pub fn from_symmetrized(m: Tensor<T>) -> Result<Self> {
        let inner = m.sym()?;
        let eig = sym_eig(&inner)?;
        if !(eig.min_eigenvalue() > T::zero()) {
            return Err(Error::NotPositiveDefinite(eig.min_eigenvalue().as_f64()));
        }
        Ok(Self { inner })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            inner: Tensor::eye(n),
        }
    }

    pub fn from_diagonal(values: &[T]) -> Result<Self> {
        Self::new(Tensor::diag(values))
    }

    pub fn dim(&self) -> usize {
        self.inner.shape()[0]
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.inner
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.inner
    }

    pub fn eig(&self) -> Result<SymEig<T>> {
        sym_eig(&self.inner)
    }

    pub fn apply(&self, f: SpectralFn) -> Result<Tensor<T>> {
        sym_fn_from_eig(&self.eig()?, f)
    }

    /// `(sqrt, inv_sqrt)` from a single decomposition.
    pub fn sqrt_pair(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let eig = self.eig()?;
        Ok((
            sym_fn_from_eig(&eig, SpectralFn::Sqrt)?,
            sym_fn_from_eig(&eig, SpectralFn::InvSqrt)?,
        ))
    }

    pub fn min_eigenvalue(&self) -> Result<T> {
        Ok(self.eig()?.min_eigenvalue())
    }
}

/// Stack of SPD matrices of a common size.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdBatch<T> {
    items: Vec<SpdMatrix<T>>,
}

impl<T: Scalar> SpdBatch<T> {
    pub fn new(items: Vec<SpdMatrix<T>>) -> Result<Self> {
        if let Some(first) = items.first() {
            let n = first.dim();
            if items.iter().any(|m| m.dim() != n) {
                return Err(Error::Shape("SPD batch with mixed sizes".into()));
            }
        }
        Ok(Self { items })
    }

    /// Splits a `[K, n, n]` tensor, validating every slice.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        t.dims3()?;
        let items = t
            .unstack()?
            .into_iter()
            .map(SpdMatrix::from_symmetrized)
            .collect::<Result<_>>()?;
        Ok(Self { items })
    }

    pub fn to_tensor(&self) -> Result<Tensor<T>> {
        let mats: Vec<_> = self.items.iter().map(|m| m.as_tensor().clone()).collect();
        Tensor::stack(&mats)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[SpdMatrix<T>] {
        &self.items
    }

    pub fn dim(&self) -> Option<usize> {
        self.items.first().map(SpdMatrix::dim)
    }
}

/// Symmetric matrix anchored at an SPD base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector<T> {
    pub base: SpdMatrix<T>,
    pub vector: Tensor<T>,
}

impl<T: Scalar> TangentVector<T> {
    pub fn new(base: SpdMatrix<T>, vector: Tensor<T>) -> Result<Self> {
        let n = vector.square_dim()?;
        if n != base.dim() {
            return Err(Error::Shape(format!(
                "tangent vector {n}x{n} at a {0}x{0} base point",
                base.dim()
            )));
        }
        Ok(Self {
            vector: vector.sym()?,
            base,
        })
    }

    /// AIRM inner product `tr(P⁻¹ S P⁻¹ S)`.
    pub fn norm_squared(&self) -> Result<T> {
        let (_, inv_sqrt) = self.base.sqrt_pair()?;
        let w = congruence(&inv_sqrt, &self.vector)?;
        Ok(w.dot(&w)?)
    }
}

fn check_same_dim<T: Scalar>(a: &SpdMatrix<T>, b: &SpdMatrix<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "SPD matrices of size {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `A · M · Aᵀ`, symmetrized.
pub fn congruence<T: Scalar>(a: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    a.matmul(m)?.matmul(&a.transpose()?)?.sym()
}

/// `log(P^{-1/2} Z P^{-1/2})`, the whitened logarithm of `z` seen from `p`.
fn whitened_log<T: Scalar>(p_inv_sqrt: &Tensor<T>, z: &SpdMatrix<T>) -> Result<Tensor<T>> {
    let inner = congruence(p_inv_sqrt, z.as_tensor())?;
    sym_fn_from_eig(&sym_eig(&inner)?, SpectralFn::Log)
}

/// Affine-invariant distance `‖log(Z₁^{-1/2} Z₂ Z₁^{-1/2})‖_F`.
pub fn airm_dist<T: Scalar>(z1: &SpdMatrix<T>, z2: &SpdMatrix<T>) -> Result<T> {
    check_same_dim(z1, z2)?;
    let (_, inv_sqrt) = z1.sqrt_pair()?;
    let inner = congruence(&inv_sqrt, z2.as_tensor())?;
    let eig = sym_eig(&inner)?;
    if !(eig.min_eigenvalue() > T::zero()) {
        return Err(Error::NotPositiveDefinite(eig.min_eigenvalue().as_f64()));
    }
    Ok(eig
        .eigenvalues
        .iter()
        .map(|&l| {
            let v = l.ln();
            v * v
        })
        .sum::<T>()
        .sqrt())
}

/// Weighted geometric mean `Z₁^{1/2} (Z₁^{-1/2} Z₂ Z₁^{-1/2})^w Z₁^{1/2}`.
pub fn geo_mean<T: Scalar>(z1: &SpdMatrix<T>, z2: &SpdMatrix<T>, w: T) -> Result<SpdMatrix<T>> {
    check_same_dim(z1, z2)?;
    if !(w >= T::zero() && w <= T::one()) {
        return Err(Error::InvalidArgument(format!("geodesic weight {w} outside [0, 1]")));
    }
    let (sqrt, inv_sqrt) = z1.sqrt_pair()?;
    let inner = congruence(&inv_sqrt, z2.as_tensor())?;
    let powered = sym_fn_from_eig(&sym_eig(&inner)?, SpectralFn::Pow(w.as_f64()))?;
    SpdMatrix::from_symmetrized(congruence(&sqrt, &powered)?)
}

/// Riemannian exponential `P^{1/2} exp(P^{-1/2} S P^{-1/2}) P^{1/2}`.
pub fn exp_map<T: Scalar>(tangent: &TangentVector<T>) -> Result<SpdMatrix<T>> {
    let (sqrt, inv_sqrt) = tangent.base.sqrt_pair()?;
    let inner = congruence(&inv_sqrt, &tangent.vector)?;
    let e = sym_fn_from_eig(&sym_eig(&inner)?, SpectralFn::Exp)?;
    SpdMatrix::from_symmetrized(congruence(&sqrt, &e)?)
}

/// Riemannian logarithm `P^{1/2} log(P^{-1/2} Z P^{-1/2}) P^{1/2}`.
pub fn log_map<T: Scalar>(base: &SpdMatrix<T>, z: &SpdMatrix<T>) -> Result<TangentVector<T>> {
    check_same_dim(base, z)?;
    let (sqrt, inv_sqrt) = base.sqrt_pair()?;
    let l = whitened_log(&inv_sqrt, z)?;
    TangentVector::new(base.clone(), congruence(&sqrt, &l)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KarcherOptions {
    pub iters: usize,
    /// Stop once the Riemannian gradient norm falls below this value.
    pub tol: f64,
}

impl KarcherOptions {
    /// One step, no early stop: the batch-normalization approximation.
    pub const ONE_STEP: KarcherOptions = KarcherOptions { iters: 1, tol: 0.0 };
    /// Accurate standalone mean.
    pub const ACCURATE: KarcherOptions = KarcherOptions { iters: 20, tol: 1e-8 };
}

impl Default for KarcherOptions {
    fn default() -> Self {
        Self::ACCURATE
    }
}

#[derive(Debug, Clone)]
pub struct KarcherResult<T> {
    pub mean: SpdMatrix<T>,
    /// Gradient norm of the Fréchet objective at each visited iterate,
    /// including the returned one.
    pub grad_norms: Vec<T>,
}

/// Karcher flow: `G ← G^{1/2} exp(mean_j log(G^{-1/2} Z_j G^{-1/2})) G^{1/2}`.
pub fn karcher_mean<T: Scalar>(
    batch: &SpdBatch<T>,
    opts: KarcherOptions,
    init: &SpdMatrix<T>,
) -> Result<KarcherResult<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("Karcher mean of an empty batch".into()));
    }
    if opts.iters == 0 {
        return Err(Error::InvalidArgument("Karcher flow needs at least one iteration".into()));
    }
    check_same_dim(&batch.items()[0], init)?;
    let k = T::from_usize_lossy(batch.len());
    let mut g = init.clone();
    let mut grad_norms = Vec::with_capacity(opts.iters + 1);
    for _ in 0..opts.iters {
        let (sqrt, inv_sqrt) = g.sqrt_pair()?;
        let mut mean_log = Tensor::zeros(&[g.dim(), g.dim()]);
        for z in batch.items() {
            mean_log.add_assign(&whitened_log(&inv_sqrt, z)?)?;
        }
        let mean_log = mean_log.scale(T::one() / k);
        let norm = mean_log.frobenius_norm() * T::lit(2.0);
        grad_norms.push(norm);
        if norm.as_f64() < opts.tol {
            return Ok(KarcherResult { mean: g, grad_norms });
        }
        let step = sym_fn_from_eig(&sym_eig(&mean_log)?, SpectralFn::Exp)?;
        g = SpdMatrix::from_symmetrized(congruence(&sqrt, &step)?)?;
    }
    grad_norms.push(frechet_gradient_norm(batch, &g)?);
    Ok(KarcherResult { mean: g, grad_norms })
}

/// AIRM norm of the Riemannian gradient of the Fréchet objective at `g`.
pub fn frechet_gradient_norm<T: Scalar>(batch: &SpdBatch<T>, g: &SpdMatrix<T>) -> Result<T> {
    let (_, inv_sqrt) = g.sqrt_pair()?;
    let mut mean_log = Tensor::zeros(&[g.dim(), g.dim()]);
    for z in batch.items() {
        mean_log.add_assign(&whitened_log(&inv_sqrt, z)?)?;
    }
    Ok(mean_log.frobenius_norm() * T::lit(2.0) / T::from_usize_lossy(batch.len()))
}

/// One Karcher step from the identity, `exp(mean_j log Z_j)`.
pub fn log_euclidean_mean<T: Scalar>(batch: &SpdBatch<T>) -> Result<SpdMatrix<T>> {
    let n = batch
        .dim()
        .ok_or_else(|| Error::InvalidArgument("mean of an empty batch".into()))?;
    Ok(karcher_mean(batch, KarcherOptions::ONE_STEP, &SpdMatrix::identity(n))?.mean)
}

/// Fréchet variance `(1/K) Σ_j δ²(G, Z_j)`.
pub fn frechet_variance<T: Scalar>(batch: &SpdBatch<T>, g: &SpdMatrix<T>) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("variance of an empty batch".into()));
    }
    let mut acc = T::zero();
    for z in batch.items() {
        let d = airm_dist(g, z)?;
        acc += d * d;
    }
    Ok(acc / T::from_usize_lossy(batch.len()))
}

/// Parallel transport of `s` from its base point to `z2`: `E S Eᵀ` with
/// `E = (Z₂ Z₁⁻¹)^{1/2} = Z₁^{1/2} (Z₁^{-1/2} Z₂ Z₁^{-1/2})^{1/2} Z₁^{-1/2}`.
pub fn parallel_transport<T: Scalar>(
    s: &TangentVector<T>,
    z2: &SpdMatrix<T>,
) -> Result<TangentVector<T>> {
    check_same_dim(&s.base, z2)?;
    let e = transport_factor(&s.base, z2)?;
    TangentVector::new(z2.clone(), congruence(&e, &s.vector)?)
}

/// `E = (Z₂ Z₁⁻¹)^{1/2}` via symmetric eigendecompositions only.
pub fn transport_factor<T: Scalar>(z1: &SpdMatrix<T>, z2: &SpdMatrix<T>) -> Result<Tensor<T>> {
    let (sqrt, inv_sqrt) = z1.sqrt_pair()?;
    let inner = congruence(&inv_sqrt, z2.as_tensor())?;
    let mid = sym_fn_from_eig(&sym_eig(&inner)?, SpectralFn::Sqrt)?;
    sqrt.matmul(&mid)?.matmul(&inv_sqrt)
}
