//! Duhamel solutions on matrix semigroups against adaptive Runge–Kutta.

mod common;

use hyperbolic_aap::mild::{duhamel_solve, random_forcing, SolveOptions};
use hyperbolic_aap::semigroup::{DispersiveSemigroup, MatrixSemigroup};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random rotated matrix problem: returns the instance, forcing and `u₀`.
pub fn random_problem(
    rng: &mut ChaCha8Rng,
) -> (MatrixSemigroup, hyperbolic_aap::aap::AAPFunction, Vec<f64>) {
    let n = rng.gen_range(2..6);
    let eigs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..6.0)).collect();
    let b = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            rng.gen_range(-0.3..0.3)
        }
    });
    let basis_seed = rng.gen();
    let s = MatrixSemigroup::rotated(eigs, basis_seed, Some(b)).unwrap();
    let (modes, scale) = (rng.gen_range(1..4), rng.gen_range(0.1..2.0));
    let f = random_forcing(&s, rng, modes, scale).unwrap();
    let u0 = s.random_state(rng);
    (s, f, u0)
}

#[test]
fn duhamel_matches_runge_kutta_on_random_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let times: Vec<f64> = (0..=16).map(|i| 0.5 * i as f64).collect();
    for _ in 0..10 {
        let (s, f, u0) = random_problem(&mut rng);
        let duh = duhamel_solve(&s, &f, &u0, &times, &SolveOptions::default()).unwrap();
        let (a, b) = (s.generator(), s.b_matrix());
        let ode = common::rk45(
            common::linear_rhs(&a, &b, |t| f.eval(t)),
            &u0,
            &times,
            1e-13,
            1e-15,
        );
        for (x, y) in duh.states().iter().zip(&ode) {
            let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
            assert!(s.norm_y(&d) < 1e-9, "difference {:e}", s.norm_y(&d));
        }
    }
}

#[test]
fn runge_kutta_oracle_reproduces_scalar_closed_form() {
    let a = DMatrix::from_element(1, 1, 2.0);
    let b = DMatrix::identity(1, 1);
    let out = common::rk45(
        common::linear_rhs(&a, &b, |t| vec![t.sin()]),
        &[1.0],
        &[3.0],
        1e-13,
        1e-15,
    );
    let exact = (-6.0f64).exp() + common::damped_mode_integral(2.0, 1.0, 0.0, 1.0, 3.0);
    assert!((out[0][0] - exact).abs() < 1e-12);
}
