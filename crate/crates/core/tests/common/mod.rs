//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Dormand–Prince 5(4) for `u' = F(t, u)` with mixed error control
/// `|err_i| ≤ atol + rtol·|u_i|`; returns `u` at each of `times`.
pub fn rk45<F>(f: F, u0: &[f64], times: &[f64], rtol: f64, atol: f64) -> Vec<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const B5: [f64; 7] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let n = u0.len();
    let mut t = 0.0;
    let mut u = u0.to_vec();
    let mut h: f64 = 1e-3;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        while t < target {
            let step = h.min(target - t);
            let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
            for s in 0..7 {
                let mut y = u.clone();
                for (j, kj) in k.iter().enumerate() {
                    for i in 0..n {
                        y[i] += step * A[s][j] * kj[i];
                    }
                }
                k.push(f(t + C[s] * step, &y));
            }
            let mut err = 0.0f64;
            let mut next = u.clone();
            for i in 0..n {
                let hi: f64 = (0..7).map(|s| B5[s] * k[s][i]).sum();
                let lo: f64 = (0..7).map(|s| B4[s] * k[s][i]).sum();
                next[i] += step * hi;
                let scale = atol + rtol * next[i].abs().max(u[i].abs());
                err = err.max((step * (hi - lo)).abs() / scale);
            }
            if err <= 1.0 {
                t += step;
                u = next;
            }
            h = step * (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
        }
        out.push(u.clone());
    }
    out
}

/// `u' = −Au + B f(t)` as an ODE right-hand side.
pub fn linear_rhs<'a>(
    a: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
    f: impl Fn(f64) -> Vec<f64> + 'a,
) -> impl Fn(f64, &[f64]) -> Vec<f64> + 'a {
    move |t, u| {
        let du = -(a * DVector::from_column_slice(u)) + b * DVector::from_vec(f(t));
        du.iter().copied().collect()
    }
}

/// `∫_0^t e^{−λ(t−τ)} (a cos ωτ + b sin ωτ) dτ`.
pub fn damped_mode_integral(lambda: f64, omega: f64, a: f64, b: f64, t: f64) -> f64 {
    let d = lambda * lambda + omega * omega;
    let (c, s) = ((omega * t).cos(), (omega * t).sin());
    let e = (-lambda * t).exp();
    let cos_part = (lambda * (c - e) + omega * s) / d;
    let sin_part = (lambda * s - omega * (c - e)) / d;
    a * cos_part + b * sin_part
}

/// `∫_0^t e^{−λ(t−τ)} c e^{−μτ} dτ`.
pub fn damped_exponential_integral(lambda: f64, mu: f64, c: f64, t: f64) -> f64 {
    if (lambda - mu).abs() < 1e-12 {
        c * t * (-lambda * t).exp()
    } else {
        c * ((-mu * t).exp() - (-lambda * t).exp()) / (lambda - mu)
    }
}

/// `Γ(x)` for `x > 0` by upward recurrence to `x ≥ 20` and Stirling's series.
pub fn stirling_gamma(x: f64) -> f64 {
    let mut shift = 1.0;
    let mut y = x;
    while y < 20.0 {
        shift *= y;
        y += 1.0;
    }
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0)))));
    let ln = (y - 0.5) * y.ln() - y + 0.5 * (2.0 * std::f64::consts::PI).ln() + series;
    ln.exp() / shift
}
