#![allow(dead_code)]

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tmknet::autodiff::{Tape, Var};
use tmknet::linalg::orthonormalize_rows;
use tmknet::tensor::Tensor;
use tmknet::Result;

pub type T64 = Tensor<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize]) -> T64 {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> T64 {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn random_orthogonal(rng: &mut impl Rng, n: usize) -> T64 {
    orthonormalize_rows(&normal(rng, &[n, n])).unwrap()
}

pub fn random_stiefel(rng: &mut impl Rng, p: usize, n: usize) -> T64 {
    orthonormalize_rows(&normal(rng, &[p, n])).unwrap()
}

/// `Q diag(λ) Qᵀ` with the given eigenvalues.
pub fn spd_with_spectrum(rng: &mut impl Rng, eigenvalues: &[f64]) -> T64 {
    let n = eigenvalues.len();
    let q = random_orthogonal(rng, n);
    q.transpose()
        .unwrap()
        .matmul(&Tensor::diag(eigenvalues))
        .unwrap()
        .matmul(&q)
        .unwrap()
        .sym()
        .unwrap()
}

/// Random SPD matrix with log-eigenvalues uniform in `[-spread, spread]`.
pub fn random_spd(rng: &mut impl Rng, n: usize, spread: f64) -> T64 {
    let eig: Vec<f64> = (0..n).map(|_| rng.gen_range(-spread..spread).exp()).collect();
    spd_with_spectrum(rng, &eig)
}

pub fn random_spd_batch(rng: &mut impl Rng, b: usize, n: usize, spread: f64) -> T64 {
    let items: Vec<T64> = (0..b).map(|_| random_spd(rng, n, spread)).collect();
    Tensor::stack(&items).unwrap()
}

/// A gradient-check input. Symmetric inputs are perturbed along symmetric
/// directions only, since the SPD ops reject asymmetric matrices.
pub struct GradInput {
    pub value: T64,
    pub symmetric: bool,
}

impl GradInput {
    pub fn free(value: T64) -> Self {
        Self { value, symmetric: false }
    }

    pub fn sym(value: T64) -> Self {
        Self { value, symmetric: true }
    }
}

fn directions(input: &GradInput) -> Vec<Vec<usize>> {
    if !input.symmetric {
        return (0..input.value.numel()).map(|i| vec![i]).collect();
    }
    let shape = input.value.shape();
    let n = shape[shape.len() - 1];
    let mats = input.value.numel() / (n * n);
    let mut out = Vec::new();
    for m in 0..mats {
        for i in 0..n {
            for j in i..n {
                let a = m * n * n + i * n + j;
                let b = m * n * n + j * n + i;
                out.push(if i == j { vec![a] } else { vec![a, b] });
            }
        }
    }
    out
}

/// Largest relative error, over inputs, between reverse-mode gradients and
/// central finite differences of `sum(R ∘ f(inputs))` for a fixed random `R`.
/// At most `max_coords` directions per input are checked. The error is
/// `‖ad − fd‖ / max(‖ad‖, ‖fd‖, 1e-4·max(1, |f|))`.
pub fn grad_check<F>(inputs: &[GradInput], max_coords: usize, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed);
    let eval = |values: &[T64], weights: Option<&T64>| -> Result<(f64, Tape, Vec<Var>, Var, T64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let y = f(&mut tape, &vars)?;
        let shape = tape.value(y)?.shape().to_vec();
        let w = match weights {
            Some(w) => w.clone(),
            None => Tensor::from_fn(&shape, |k| ((k as f64) * 0.7548776662).fract() * 2.0 - 1.0 + 0.1),
        };
        let wc = tape.constant(w.clone());
        let prod = tape.mul(y, wc)?;
        let loss = tape.sum(prod)?;
        let value = tape.value(loss)?.item()?;
        Ok((value, tape, vars, loss, w))
    };
    let base: Vec<T64> = inputs.iter().map(|i| i.value.clone()).collect();
    let (f0, mut tape, vars, loss, weights) = eval(&base, None)?;
    // central differences through eigendecompositions carry roundoff of
    // order 1e-9·|f|; vanishing gradients are compared in absolute terms
    let floor = 1e-4 * f0.abs().max(1.0);
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.get(vars[k])?;
        let mut dirs = directions(input);
        if dirs.len() > max_coords {
            let picked = sample(&mut r, dirs.len(), max_coords).into_vec();
            dirs = picked.into_iter().map(|i| dirs[i].clone()).collect();
        }
        let mut ad = Vec::with_capacity(dirs.len());
        let mut fd = Vec::with_capacity(dirs.len());
        for dir in &dirs {
            let x0 = input.value.data()[dir[0]];
            let h = 1e-6 * x0.abs().max(1.0);
            let shifted = |sign: f64| -> Result<f64> {
                let mut vals = base.clone();
                for &c in dir {
                    vals[k].data_mut()[c] += sign * h;
                }
                Ok(eval(&vals, Some(&weights))?.0)
            };
            let plus = shifted(1.0)?;
            let minus = shifted(-1.0)?;
            fd.push((plus - minus) / (2.0 * h));
            ad.push(dir.iter().map(|&c| g.data()[c]).sum::<f64>());
        }
        let diff: f64 = ad.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let na: f64 = ad.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nf: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nf).max(floor));
    }
    Ok(worst)
}

pub fn frob_diff(a: &T64, b: &T64) -> f64 {
    a.sub(b).unwrap().frobenius_norm()
}
