mod common;

use common::*;
use proptest::prelude::*;
use tmknet::geometry::{
    airm_dist, exp_map, frechet_gradient_norm, geo_mean, karcher_mean, log_map, parallel_transport, KarcherOptions,
    SpdBatch, SpdMatrix, TangentVector,
};
use tmknet::linalg::{sym_eig, sym_fn, SpectralFn};
use tmknet::tensor::Tensor;

fn spd(seed: u64, n: usize, spread: f64) -> SpdMatrix<f64> {
    SpdMatrix::new(random_spd(&mut rng(seed), n, spread)).unwrap()
}

fn symmetric(seed: u64, n: usize, scale: f64) -> T64 {
    normal(&mut rng(seed), &[n, n]).sym().unwrap().scale(scale)
}

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(48)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn eigendecomposition_reconstructs(seed in any::<u64>(), n in 1usize..12) {
        let m = symmetric(seed, n, 1.0);
        let eig = sym_eig(&m).unwrap();
        prop_assert!(frob_diff(&eig.reconstruct(), &m) < 1e-10 * m.frobenius_norm().max(1.0));
        prop_assert!(eig.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        let u = &eig.eigenvectors;
        let utu = u.transpose().unwrap().matmul(u).unwrap();
        prop_assert!(frob_diff(&utu, &Tensor::eye(n)) < 1e-10);
    }

    #[test]
    fn log_and_exp_are_inverse(seed in any::<u64>(), n in 2usize..8, spread in 0.1f64..2.0) {
        let z = random_spd(&mut rng(seed), n, spread);
        let back = sym_fn(&sym_fn(&z, SpectralFn::Log).unwrap(), SpectralFn::Exp).unwrap();
        prop_assert!(frob_diff(&back, &z) < 1e-9 * z.frobenius_norm());
        let root = sym_fn(&z, SpectralFn::Sqrt).unwrap();
        prop_assert!(frob_diff(&root.matmul(&root).unwrap(), &z) < 1e-9 * z.frobenius_norm());
    }

    #[test]
    fn distance_is_a_symmetric_affine_invariant(seed in any::<u64>(), n in 2usize..7) {
        let a = spd(seed, n, 1.0);
        let b = spd(seed ^ 1, n, 1.0);
        let d_ab = airm_dist(&a, &b).unwrap();
        prop_assert!((d_ab - airm_dist(&b, &a).unwrap()).abs() < 1e-9 * d_ab.max(1.0));
        prop_assert!(airm_dist(&a, &a).unwrap() < 1e-7);
        let w = normal(&mut rng(seed ^ 2), &[n, n]).add(&Tensor::eye(n).scale(3.0)).unwrap();
        let move_ = |z: &SpdMatrix<f64>| {
            SpdMatrix::from_symmetrized(w.matmul(z.as_tensor()).unwrap().matmul(&w.transpose().unwrap()).unwrap()).unwrap()
        };
        let moved = airm_dist(&move_(&a), &move_(&b)).unwrap();
        prop_assert!((moved - d_ab).abs() < 1e-7 * d_ab.max(1.0));
    }

    #[test]
    fn triangle_inequality(seed in any::<u64>(), n in 2usize..6) {
        let a = spd(seed, n, 1.5);
        let b = spd(seed ^ 5, n, 1.5);
        let c = spd(seed ^ 9, n, 1.5);
        let ab = airm_dist(&a, &b).unwrap();
        let bc = airm_dist(&b, &c).unwrap();
        let ac = airm_dist(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn geodesic_splits_distance(seed in any::<u64>(), n in 2usize..6, w in 0.0f64..1.0) {
        let a = spd(seed, n, 1.0);
        let b = spd(seed ^ 3, n, 1.0);
        let m = geo_mean(&a, &b, w).unwrap();
        let d = airm_dist(&a, &b).unwrap();
        prop_assert!((airm_dist(&a, &m).unwrap() - w * d).abs() < 1e-7);
        prop_assert!((airm_dist(&m, &b).unwrap() - (1.0 - w) * d).abs() < 1e-7);
    }

    #[test]
    fn exp_inverts_log(seed in any::<u64>(), n in 2usize..7) {
        let p = spd(seed, n, 1.0);
        let z = spd(seed ^ 4, n, 1.0);
        let back = exp_map(&log_map(&p, &z).unwrap()).unwrap();
        prop_assert!(frob_diff(back.as_tensor(), z.as_tensor()) < 1e-8 * z.as_tensor().frobenius_norm());
        let v = log_map(&p, &z).unwrap();
        let d = airm_dist(&p, &z).unwrap();
        prop_assert!((v.norm_squared().unwrap().sqrt() - d).abs() < 1e-8 * d.max(1.0));
    }

    #[test]
    fn transport_is_an_isometry(seed in any::<u64>(), n in 2usize..7) {
        let p = spd(seed, n, 1.0);
        let q = spd(seed ^ 6, n, 1.0);
        let s = TangentVector::new(p.clone(), symmetric(seed ^ 7, n, 0.5)).unwrap();
        let moved = parallel_transport(&s, &q).unwrap();
        let before = s.norm_squared().unwrap();
        prop_assert!((moved.norm_squared().unwrap() - before).abs() < 1e-8 * before.max(1.0));
        let back = parallel_transport(&moved, &p).unwrap();
        prop_assert!(frob_diff(&back.vector, &s.vector) < 1e-8 * s.vector.frobenius_norm().max(1.0));
    }

    #[test]
    fn karcher_mean_of_congruent_batch_moves_with_it(seed in any::<u64>(), n in 2usize..5, k in 2usize..6) {
        let mut r = rng(seed);
        let items: Vec<SpdMatrix<f64>> = (0..k).map(|_| SpdMatrix::new(random_spd(&mut r, n, 0.8)).unwrap()).collect();
        let batch = SpdBatch::new(items.clone()).unwrap();
        let res = karcher_mean(&batch, KarcherOptions::ACCURATE, &SpdMatrix::identity(n)).unwrap();
        prop_assert!(frechet_gradient_norm(&batch, &res.mean).unwrap() < 1e-7);
        let w = random_orthogonal(&mut r, n).scale(1.7);
        let congr = |z: &T64| w.matmul(z).unwrap().matmul(&w.transpose().unwrap()).unwrap().sym().unwrap();
        let moved = SpdBatch::new(items.iter().map(|z| SpdMatrix::new(congr(z.as_tensor())).unwrap()).collect()).unwrap();
        let res2 = karcher_mean(&moved, KarcherOptions::ACCURATE, &SpdMatrix::identity(n)).unwrap();
        let expect = congr(res.mean.as_tensor());
        prop_assert!(frob_diff(res2.mean.as_tensor(), &expect) < 1e-6 * expect.frobenius_norm());
    }
}

#[test]
fn single_matrix_is_its_own_mean() {
    let z = spd(1, 5, 1.0);
    let batch = SpdBatch::new(vec![z.clone()]).unwrap();
    let res = karcher_mean(&batch, KarcherOptions::ACCURATE, &SpdMatrix::identity(5)).unwrap();
    assert!(airm_dist(&res.mean, &z).unwrap() < 1e-8);
}

#[test]
fn asymmetric_input_is_rejected() {
    let mut m = Tensor::eye(3);
    m.set2(0, 1, 0.5);
    assert!(sym_eig(&m).is_err());
    assert!(SpdMatrix::new(m).is_err());
}

#[test]
fn indefinite_matrix_is_not_spd() {
    let m = Tensor::diag(&[1.0, -0.5, 2.0]);
    assert!(SpdMatrix::new(m.clone()).is_err());
    assert!(sym_fn(&m, SpectralFn::Log).is_err());
}
