//! Symmetric eigendecomposition and spectral matrix functions.
//!
//! Small matrices (n <= 32) use cyclic Jacobi rotations, which keeps the
//! eigenvectors orthogonal to working precision. Larger matrices are reduced
//! to tridiagonal form with Householder reflections and diagonalized by the
//! implicit QL algorithm.
//!
//! The derivative of a spectral function `F(M) = U f(Λ) Uᵀ` is given by the
//! Daleckii–Krein formula: for an upstream gradient `Ḡ`,
//! `∂L/∂M = U (K ∘ (Uᵀ sym(Ḡ) U)) Uᵀ` with the Loewner matrix
//! `K_ij = (f(λ_i) − f(λ_j)) / (λ_i − λ_j)`, falling back to `f'(λ_i)` when
//! the two eigenvalues are closer than `1e-10 · max|λ|`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const JACOBI_MAX_N: usize = 32;
const MAX_SWEEPS: usize = 100;
const QL_MAX_ITER: usize = 60;
/// Relative eigenvalue gap below which the Loewner quotient is replaced by `f'`.
pub const LOEWNER_GAP: f64 = 1e-10;
/// Relative asymmetry accepted before an input is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Batches at least this long are decomposed on the rayon pool.
const PARALLEL_BATCH: usize = 64;

/// Eigenpairs of a symmetric matrix, eigenvalues ascending, eigenvectors as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig<T> {
    pub eigenvalues: Vec<T>,
    pub eigenvectors: Tensor<T>,
}

impl<T: Scalar> SymEig<T> {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `U · diag(g(λ)) · Uᵀ`.
    pub fn reconstruct_with(&self, g: impl Fn(T) -> T) -> Tensor<T> {
        let n = self.dim();
        let u = self.eigenvectors.data();
        let fl: Vec<T> = self.eigenvalues.iter().map(|&l| g(l)).collect();
        let mut out = Tensor::zeros(&[n, n]);
        {
            let o = out.data_mut();
            for i in 0..n {
                for j in i..n {
                    let mut acc = T::zero();
                    for k in 0..n {
                        acc += u[i * n + k] * fl[k] * u[j * n + k];
                    }
                    o[i * n + j] = acc;
                    o[j * n + i] = acc;
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Tensor<T> {
        self.reconstruct_with(|l| l)
    }

    pub fn min_eigenvalue(&self) -> T {
        self.eigenvalues[0]
    }

    pub fn max_eigenvalue(&self) -> T {
        self.eigenvalues[self.dim() - 1]
    }
}

/// Eigendecomposition of `(m + mᵀ)/2`.
pub fn sym_eig<T: Scalar>(m: &Tensor<T>) -> Result<SymEig<T>> {
    let n = m.square_dim()?;
    m.check_finite("sym_eig input")?;
    let asym = m.asymmetry()?;
    if asym > T::lit(SYMMETRY_TOL) {
        return Err(Error::NotSymmetric(asym.as_f64()));
    }
    let a = m.sym()?;
    if n == 0 {
        return Ok(SymEig {
            eigenvalues: vec![],
            eigenvectors: a,
        });
    }
    let (vals, vecs) = if n <= JACOBI_MAX_N {
        jacobi(a.into_data(), n)?
    } else {
        tridiagonal_ql(a.into_data(), n)?
    };
    Ok(sort_ascending(vals, vecs, n))
}

fn sort_ascending<T: Scalar>(vals: Vec<T>, vecs: Vec<T>, n: usize) -> SymEig<T> {
    let mut order: Vec<usize> = (0..n).collect();
    // stable: ties keep solver order
    order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).expect("finite eigenvalues"));
    let eigenvalues = order.iter().map(|&k| vals[k]).collect();
    let mut u = vec![T::zero(); n * n];
    for (new, &old) in order.iter().enumerate() {
        for r in 0..n {
            u[r * n + new] = vecs[r * n + old];
        }
    }
    SymEig {
        eigenvalues,
        eigenvectors: Tensor::new(vec![n, n], u).expect("square"),
    }
}

fn jacobi<T: Scalar>(mut a: Vec<T>, n: usize) -> Result<(Vec<T>, Vec<T>)> {
    let mut v = Tensor::<T>::eye(n).into_data();
    let fro = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let eps = T::epsilon();
    let hundred = T::lit(100.0);
    for sweep in 0..MAX_SWEEPS {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= eps * fro * T::lit(0.01) || off == T::zero() {
            let vals = (0..n).map(|i| a[i * n + i]).collect();
            return Ok((vals, v));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                let g = hundred * apq.abs();
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // after a few sweeps, drop elements that no longer affect the diagonal
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[p * n + q] = T::zero();
                    a[q * n + p] = T::zero();
                    continue;
                }
                if apq == T::zero() {
                    continue;
                }
                let theta = (aqq - app) / (apq + apq);
                let t = {
                    let t = T::one() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    if theta < T::zero() {
                        -t
                    } else {
                        t
                    }
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = T::zero();
                a[q * n + p] = T::zero();
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::EigNoConvergence(MAX_SWEEPS))
}

/// Householder tridiagonalization followed by implicit QL (EISPACK tred2/tql2).
fn tridiagonal_ql<T: Scalar>(a: Vec<T>, n: usize) -> Result<(Vec<T>, Vec<T>)> {
    let mut v = a;
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    let idx = |i: usize, j: usize| i * n + j;

    for j in 0..n {
        d[j] = v[idx(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = T::zero();
        let mut h = T::zero();
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == T::zero() {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[idx(i - 1, j)];
                v[idx(i, j)] = T::zero();
                v[idx(j, i)] = T::zero();
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > T::zero() {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = T::zero();
            }
            for j in 0..i {
                f = d[j];
                v[idx(j, i)] = f;
                g = e[j] + v[idx(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[idx(k, j)] * d[k];
                    e[k] += v[idx(k, j)] * f;
                }
                e[j] = g;
            }
            f = T::zero();
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[idx(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[idx(i - 1, j)];
                v[idx(i, j)] = T::zero();
            }
        }
        d[i] = h;
    }
    for i in 0..(n - 1) {
        v[idx(n - 1, i)] = v[idx(i, i)];
        v[idx(i, i)] = T::one();
        let h = d[i + 1];
        if h != T::zero() {
            for k in 0..=i {
                d[k] = v[idx(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = T::zero();
                for k in 0..=i {
                    g += v[idx(k, i + 1)] * v[idx(k, j)];
                }
                for k in 0..=i {
                    v[idx(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[idx(k, i + 1)] = T::zero();
        }
    }
    for j in 0..n {
        d[j] = v[idx(n - 1, j)];
        v[idx(n - 1, j)] = T::zero();
    }
    v[idx(n - 1, n - 1)] = T::one();
    e[0] = T::zero();

    // tql2
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = T::zero();
    let mut f = T::zero();
    let mut tst1 = T::zero();
    let eps = T::epsilon();
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > QL_MAX_ITER {
                    return Err(Error::EigNoConvergence(QL_MAX_ITER));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (e[l] + e[l]);
                let mut r = p.hypot(T::one());
                if p < T::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = T::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = T::zero();
                let mut s2 = T::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[idx(k, i + 1)];
                        v[idx(k, i + 1)] = s * v[idx(k, i)] + c * h;
                        v[idx(k, i)] = c * v[idx(k, i)] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = T::zero();
    }
    Ok((d, v))
}

/// Scalar function applied to the spectrum of a symmetric matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralFn {
    Log,
    Exp,
    Pow(f64),
    Sqrt,
    InvSqrt,
    ClampMin(f64),
}

impl SpectralFn {
    pub fn requires_positive(self) -> bool {
        matches!(
            self,
            SpectralFn::Log | SpectralFn::Pow(_) | SpectralFn::Sqrt | SpectralFn::InvSqrt
        )
    }

    #[inline]
    pub fn value<T: Scalar>(self, x: T) -> T {
        match self {
            SpectralFn::Log => x.ln(),
            SpectralFn::Exp => x.exp(),
            SpectralFn::Pow(w) => x.powf(T::lit(w)),
            SpectralFn::Sqrt => x.sqrt(),
            SpectralFn::InvSqrt => T::one() / x.sqrt(),
            SpectralFn::ClampMin(eps) => x.max(T::lit(eps)),
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            SpectralFn::Log => T::one() / x,
            SpectralFn::Exp => x.exp(),
            SpectralFn::Pow(w) => T::lit(w) * x.powf(T::lit(w - 1.0)),
            SpectralFn::Sqrt => T::lit(0.5) / x.sqrt(),
            SpectralFn::InvSqrt => T::lit(-0.5) * x.powf(T::lit(-1.5)),
            SpectralFn::ClampMin(eps) => {
                if x > T::lit(eps) {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    fn check_domain<T: Scalar>(self, eig: &SymEig<T>) -> Result<()> {
        if self.requires_positive() && eig.min_eigenvalue() <= T::zero() {
            return Err(Error::NotPositiveDefinite(eig.min_eigenvalue().as_f64()));
        }
        Ok(())
    }
}

/// `U · diag(f(λ)) · Uᵀ`.
pub fn sym_fn<T: Scalar>(m: &Tensor<T>, f: SpectralFn) -> Result<Tensor<T>> {
    let eig = sym_eig(m)?;
    sym_fn_from_eig(&eig, f)
}

pub fn sym_fn_from_eig<T: Scalar>(eig: &SymEig<T>, f: SpectralFn) -> Result<Tensor<T>> {
    f.check_domain(eig)?;
    let out = eig.reconstruct_with(|l| f.value(l));
    out.check_finite("sym_fn")?;
    Ok(out)
}

/// Loewner matrix of first divided differences of `f` on the spectrum.
pub fn loewner<T: Scalar>(eigenvalues: &[T], f: SpectralFn) -> Vec<T> {
    let n = eigenvalues.len();
    let scale = eigenvalues.iter().fold(T::zero(), |m, l| m.max(l.abs()));
    let tau = T::lit(LOEWNER_GAP) * scale;
    let fl: Vec<T> = eigenvalues.iter().map(|&l| f.value(l)).collect();
    let mut k = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let gap = eigenvalues[i] - eigenvalues[j];
            k[i * n + j] = if gap.abs() > tau {
                (fl[i] - fl[j]) / gap
            } else {
                f.derivative(eigenvalues[i])
            };
        }
    }
    k
}

/// Vector-Jacobian product of [`sym_fn`] given a precomputed decomposition.
pub fn sym_fn_vjp_from_eig<T: Scalar>(
    eig: &SymEig<T>,
    f: SpectralFn,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    f.check_domain(eig)?;
    let n = eig.dim();
    if upstream.shape() != [n, n] {
        return Err(Error::Shape(format!(
            "upstream {:?} for a {n}x{n} spectral function",
            upstream.shape()
        )));
    }
    let u = &eig.eigenvectors;
    let ut = u.transpose()?;
    let inner = ut.matmul(&upstream.sym()?)?.matmul(u)?;
    let k = loewner(&eig.eigenvalues, f);
    let hadamard = Tensor::new(
        vec![n, n],
        inner.data().iter().zip(&k).map(|(&a, &b)| a * b).collect(),
    )?;
    u.matmul(&hadamard)?.matmul(&ut)?.sym()
}

pub fn sym_fn_vjp<T: Scalar>(m: &Tensor<T>, f: SpectralFn, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let eig = sym_eig(m)?;
    sym_fn_vjp_from_eig(&eig, f, upstream)
}

/// Applies `op` to every item, in parallel for long batches. Results are in
/// input order and identical to a serial loop.
pub fn batched_apply<T, U, F>(items: &[T], op: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    if items.len() >= PARALLEL_BATCH {
        items.par_iter().map(&op).collect()
    } else {
        items.iter().map(op).collect()
    }
}

/// Decomposes every matrix of a `[b, n, n]` batch.
pub fn batch_sym_eig<T: Scalar>(batch: &Tensor<T>) -> Result<Vec<SymEig<T>>> {
    batch.dims3()?;
    let items = batch.unstack()?;
    batched_apply(&items, sym_eig)
}

/// [`sym_fn`] over a `[b, n, n]` batch.
pub fn batch_sym_fn<T: Scalar>(batch: &Tensor<T>, f: SpectralFn) -> Result<Tensor<T>> {
    let (b, n, _) = batch.dims3()?;
    if b == 0 {
        return Tensor::new(vec![0, n, n], vec![]);
    }
    let items = batch.unstack()?;
    let out = batched_apply(&items, |m| sym_fn(m, f))?;
    Tensor::stack(&out)
}

/// Orthonormalizes the rows of a `p x n` matrix (p <= n) with the Q factor of a
/// QR decomposition of its transpose, signs fixed so that `diag(R) > 0`.
pub fn orthonormalize_rows<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, n) = w.dims2()?;
    if p > n {
        return Err(Error::Shape(format!("{p} rows cannot be orthonormal in R^{n}")));
    }
    let mut rows: Vec<Vec<T>> = (0..p).map(|i| w.data()[i * n..(i + 1) * n].to_vec()).collect();
    let scale = w.max_abs();
    let tol = T::lit(1e-12) * scale.max(T::min_positive_value());
    for i in 0..p {
        // two passes of modified Gram-Schmidt keep the basis orthogonal to
        // working precision
        for _ in 0..2 {
            for j in 0..i {
                let proj: T = rows[i].iter().zip(&rows[j]).map(|(&a, &b)| a * b).sum();
                let (head, tail) = rows.split_at_mut(i);
                for (x, &q) in tail[0].iter_mut().zip(&head[j]) {
                    *x -= proj * q;
                }
            }
        }
        let norm = rows[i].iter().map(|&x| x * x).sum::<T>().sqrt();
        if !(norm > tol) {
            return Err(Error::Retraction(format!("row {i} is linearly dependent")));
        }
        for x in rows[i].iter_mut() {
            *x /= norm;
        }
    }
    Tensor::new(vec![p, n], rows.into_iter().flatten().collect())
}
