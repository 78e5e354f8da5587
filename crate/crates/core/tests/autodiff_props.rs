mod common;

use common::*;
use proptest::prelude::*;
use tmknet::autodiff::{Tape, Var};
use tmknet::linalg::SpectralFn;
use tmknet::Result;

/// `sum(R ∘ log(W C Wᵀ))`, a scalar through the SPD path.
fn spd_path(tape: &mut Tape, w: Var, c: Var, seed: u64) -> Result<Var> {
    let h = tape.congruence(w, c)?;
    let l = tape.sym_fn(h, SpectralFn::Log)?;
    let shape = tape.shape(l)?.to_vec();
    let r = tape.constant(normal(&mut rng(seed), &shape));
    let p = tape.mul(l, r)?;
    tape.sum(p)
}

fn euclid_path(tape: &mut Tape, w: Var, c: Var) -> Result<Var> {
    let m = tape.matmul(w, c)?;
    let e = tape.exp(m)?;
    tape.sum(e)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradients_are_linear_in_the_loss(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let w0 = random_stiefel(&mut r, 3, 5);
        let c0 = random_spd(&mut r, 5, 0.7);
        let grads = |alpha: f64, beta: f64| {
            let mut tape = Tape::new();
            let w = tape.param(w0.clone());
            let c = tape.param(c0.clone());
            let f = spd_path(&mut tape, w, c, seed).unwrap();
            let g = euclid_path(&mut tape, w, c).unwrap();
            let fa = tape.scale(f, alpha).unwrap();
            let gb = tape.scale(g, beta).unwrap();
            let loss = tape.add(fa, gb).unwrap();
            let gr = tape.backward(loss).unwrap();
            (gr.get(w).unwrap(), gr.get(c).unwrap())
        };
        let (wf, cf) = grads(1.0, 0.0);
        let (wg, cg) = grads(0.0, 1.0);
        let (wc, cc) = grads(a, b);
        let expect_w = wf.scale(a).add(&wg.scale(b)).unwrap();
        let expect_c = cf.scale(a).add(&cg.scale(b)).unwrap();
        prop_assert!(frob_diff(&wc, &expect_w) < 1e-9 * expect_w.frobenius_norm().max(1.0));
        prop_assert!(frob_diff(&cc, &expect_c) < 1e-9 * expect_c.frobenius_norm().max(1.0));
    }

    #[test]
    fn unrelated_and_constant_leaves_get_zero_gradient(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut tape = Tape::new();
        let x = tape.param(normal(&mut r, &[4, 3]));
        let unused = tape.param(normal(&mut r, &[2, 2]));
        let k = tape.constant(normal(&mut r, &[4, 3]));
        let y = tape.mul(x, k).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        prop_assert_eq!(g.get(unused).unwrap().frobenius_norm(), 0.0);
        prop_assert_eq!(g.get(k).unwrap().frobenius_norm(), 0.0);
        // d/dx sum(x ∘ k) = k
        prop_assert!(frob_diff(&g.get(x).unwrap(), tape.value(k).unwrap()) == 0.0);
    }

    #[test]
    fn log_of_exp_has_identity_gradient(seed in any::<u64>(), n in 2usize..6) {
        let s0 = normal(&mut rng(seed), &[n, n]).sym().unwrap().scale(0.5);
        let weights = normal(&mut rng(seed ^ 1), &[n, n]).sym().unwrap();
        let mut tape = Tape::new();
        let s = tape.param(s0);
        let e = tape.sym_fn(s, SpectralFn::Exp).unwrap();
        let l = tape.sym_fn(e, SpectralFn::Log).unwrap();
        let wc = tape.constant(weights.clone());
        let p = tape.mul(l, wc).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap().get(s).unwrap();
        prop_assert!(frob_diff(&g, &weights) < 1e-8 * weights.frobenius_norm().max(1.0));
    }
}

#[test]
fn vars_from_another_tape_are_rejected() {
    let mut a = Tape::new();
    let mut b = Tape::new();
    let x = a.param(normal(&mut rng(0), &[2, 2]));
    let y = b.param(normal(&mut rng(1), &[2, 2]));
    assert!(a.add(x, y).is_err());
    let loss = b.sum(y).unwrap();
    let g = b.backward(loss).unwrap();
    assert!(g.get(x).is_err());
}

#[test]
fn spd_path_matches_finite_differences() {
    let mut r = rng(42);
    let inputs = [
        GradInput::free(random_stiefel(&mut r, 3, 6)),
        GradInput::sym(random_spd(&mut r, 6, 0.8)),
    ];
    let err = grad_check(&inputs, 64, 7, |tape, v| {
        let h = tape.congruence(v[0], v[1])?;
        tape.sym_fn(h, SpectralFn::Log)
    })
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}
