//! Invariants on random inputs that cross module boundaries.

use std::sync::OnceLock;

use hyperbolic_aap::aap::AAPFunction;
use hyperbolic_aap::applications::{lipschitz_quotient, HeatNonlinearity, HeatParameters};
use hyperbolic_aap::fixed_point::{picard_solve, Nonlinearity, PicardOptions};
use hyperbolic_aap::mild::{duhamel_solve, random_forcing, SolveOptions};
use hyperbolic_aap::semigroup::{
    DispersiveSemigroup, HyperbolicSemigroup, MatrixSemigroup, NormKind,
};
use hyperbolic_aap::Execution;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn hyperbolic() -> &'static HyperbolicSemigroup {
    static H: OnceLock<HyperbolicSemigroup> = OnceLock::new();
    H.get_or_init(|| HyperbolicSemigroup::with_grid(24.0, 0.15, NormKind::L1Linf).unwrap())
}

fn scaled(s: &dyn DispersiveSemigroup, v: Vec<f64>, size: f64) -> Vec<f64> {
    let n = s.norm_y(&v);
    v.into_iter().map(|x| x * size / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Inside the Y-ball of radius ρ the quotient never exceeds `kρ^{k−1}`.
    #[test]
    fn heat_lipschitz_on_hyperbolic_ball(seed in any::<u64>(), k in 2u32..5, rho in 0.05f64..1.0,
                                         f1 in 0.01f64..1.0, f2 in 0.01f64..1.0) {
        let h = hyperbolic();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u1 = scaled(h, h.random_state(&mut rng), f1 * rho);
        let u2 = scaled(h, h.random_state(&mut rng), f2 * rho);
        let g = HeatNonlinearity::new(HeatParameters { k }, AAPFunction::zero(h.dim()), rho, &|x| h.norm_x(x)).unwrap();
        let q = lipschitz_quotient(&g, &u1, &u2, 0.0, &|x| h.norm_x(x), &|y| h.norm_y(y));
        prop_assert!(q <= g.lipschitz() * (1.0 + 1e-12), "quotient {q} above {}", g.lipschitz());
    }

    /// The mild solution is linear in `(u₀, f)`.
    #[test]
    fn duhamel_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = MatrixSemigroup::rotated(vec![0.5, 1.5, 4.0], seed, None).unwrap();
        let (f, g) = (random_forcing(&s, &mut rng, 2, 1.0).unwrap(), random_forcing(&s, &mut rng, 2, 1.0).unwrap());
        let (u, v) = (s.random_state(&mut rng), s.random_state(&mut rng));
        let times: Vec<f64> = (0..=12).map(|i| 0.5 * i as f64).collect();
        let opts = SolveOptions::default();
        let combo_f = f.scaled(a).add(&g.scaled(b)).unwrap();
        let combo_u: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let lhs = duhamel_solve(&s, &combo_f, &combo_u, &times, &opts).unwrap();
        let uf = duhamel_solve(&s, &f, &u, &times, &opts).unwrap();
        let vg = duhamel_solve(&s, &g, &v, &times, &opts).unwrap();
        for ((l, x), y) in lhs.states().iter().zip(uf.states()).zip(vg.states()) {
            let r: Vec<f64> = l.iter().zip(x).zip(y).map(|((l, x), y)| l - a * x - b * y).collect();
            prop_assert!(s.norm_y(&r) <= 1e-12 * (1.0 + s.norm_y(l)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// Execution mode changes scheduling only, never results.
    #[test]
    fn execution_modes_agree_bitwise(seed in any::<u64>()) {
        let h = hyperbolic();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_forcing(h, &mut rng, 2, 0.005).unwrap();
        let u0 = scaled(h, h.random_state(&mut rng), 0.02);
        let times: Vec<f64> = (0..=16).map(|i| 0.25 * i as f64).collect();
        let solve = |execution| {
            let opts = SolveOptions { execution, tolerance: None, ..SolveOptions::default() };
            duhamel_solve(h, &f, &u0, &times, &opts).unwrap()
        };
        prop_assert_eq!(solve(Execution::Sequential), solve(Execution::Parallel));

        let g = HeatNonlinearity::new(HeatParameters { k: 3 }, f.clone(), 0.2, &|x| h.norm_x(x)).unwrap();
        let picard = |execution| {
            let opts = PicardOptions { execution, tol: 1e-8, ..PicardOptions::default() };
            picard_solve(h, &g, &u0, &times, None, &opts).unwrap().trajectory
        };
        prop_assert_eq!(picard(Execution::Sequential), picard(Execution::Parallel));
    }
}
