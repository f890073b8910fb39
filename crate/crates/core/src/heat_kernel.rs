//! Heat kernels of ℍ^d and the shifted heat semigroup `e^{-tA}`,
//! `A = -(Δ - (d-1))`, acting on radial fields.
//!
//! Kernel formulas (`p_d` is the kernel of `e^{tΔ}`, `k_d = e^{-(d-1)t} p_d`):
//!
//! * `d = 3`: `p_3(t, ρ) = (4πt)^{-3/2} (ρ / sinh ρ) exp(-t - ρ²/4t)`.
//! * `d = 2`: `p_2(t, ρ) = √2 (4πt)^{-3/2} e^{-t/4} ∫_ρ^∞ s e^{-s²/4t} (cosh s - cosh ρ)^{-1/2} ds`,
//!   integrated in `x` with `s = ρ + x²`, which removes the endpoint singularity.
//! * higher `d` by the Millson recursion
//!   `p_{d+2} = -e^{-dt} (2π sinh ρ)^{-1} ∂_ρ p_d = -(e^{-dt}/2π) ∂_z p_d`, `z = cosh ρ`.
//!   Odd dimensions start from the one-dimensional Gauss–Weierstrass kernel
//!   `(4πt)^{-1/2} exp(-q(z)/4t)` with `q(z) = arccosh(z)²`; even dimensions
//!   differentiate under the `d = 2` integral. The `z`-derivatives are exact
//!   Taylor jets of `q`, obtained from its series at `z = 1` for `ρ < 1` and
//!   from the ODE `(z² - 1) q'' + z q' = 2` otherwise.
//!
//! Two propagators are provided. [`SpectralPropagator`] is the fast path on
//! ℍ³: with `v = sinh ρ · u` the radial heat equation becomes the shifted
//! one-dimensional heat equation `v_t = v'' - v` on the half-line with
//! `v(0) = 0`, so the odd extension of `v` is convolved with the
//! Gauss–Weierstrass kernel. It does so exactly in a sine basis (Dirichlet
//! condition at the cutoff). [`apply_direct`] integrates against the
//! spherically averaged kernel in any dimension and serves as the oracle.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::exec::{try_map_range, Execution};
use crate::geometry::{lp_norm_values, RadialField, RadialGrid};
use crate::quadrature::{adaptive, AdaptiveOptions, Integral};
use crate::semigroup::{dispersion_h, gamma_pq};
use crate::special::sphere_area;
use crate::{invalid, Result};

const KERNEL_QUAD: AdaptiveOptions = AdaptiveOptions {
    abs_tol: 1e-300,
    rel_tol: 1e-12,
    max_panels: 4000,
    initial_panels: 8,
};

fn check_args(d: usize, t: f64, rho: f64) -> Result<()> {
    if d < 2 {
        return Err(invalid(format!("heat kernel needs d ≥ 2, got {d}")));
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(invalid(format!("heat kernel needs t > 0, got {t}")));
    }
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(invalid(format!(
            "geodesic radius must be non-negative, got {rho}"
        )));
    }
    Ok(())
}

fn ln_sinh(x: f64) -> f64 {
    if x > 20.0 {
        x - std::f64::consts::LN_2 + (-(-2.0 * x).exp()).ln_1p()
    } else {
        x.sinh().ln()
    }
}

/// Heat kernel `p_d(t, ρ)` of the Laplace–Beltrami operator `Δ` on ℍ^d.
pub fn laplacian_kernel(d: usize, t: f64, rho: f64) -> Result<f64> {
    check_args(d, t, rho)?;
    match d {
        3 => Ok(p3(t, rho)),
        _ if d % 2 == 1 => Ok(p_odd((d - 1) / 2, t, rho)),
        _ => p_even((d - 2) / 2, t, rho),
    }
}

/// `k_d(t, ρ) = e^{-(d-1)t} p_d(t, ρ)`, the kernel of `e^{-tA}`.
pub fn eval_kernel(d: usize, t: f64, rho: f64) -> Result<f64> {
    Ok((-((d - 1) as f64) * t).exp() * laplacian_kernel(d, t, rho)?)
}

/// The kernel `k_d(t, ·)` at a fixed dimension and time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeatKernel {
    dim: usize,
    t: f64,
}

impl HeatKernel {
    pub fn new(dim: usize, t: f64) -> Result<Self> {
        check_args(dim, t, 0.0)?;
        Ok(Self { dim, t })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn eval(&self, rho: f64) -> Result<f64> {
        eval_kernel(self.dim, self.t, rho)
    }
}

fn p3(t: f64, rho: f64) -> f64 {
    let ratio_ln = if rho < 1e-8 {
        -rho * rho / 6.0
    } else {
        rho.ln() - ln_sinh(rho)
    };
    (-1.5 * (4.0 * PI * t).ln() + ratio_ln - t - rho * rho / (4.0 * t)).exp()
}

/// Taylor coefficients `a_0..=a_n` of `q(z) = arccosh(z)²` at `z = cosh ρ`.
fn q_jet(rho: f64, n: usize) -> Vec<f64> {
    let mut a = vec![0.0; n + 1];
    a[0] = rho * rho;
    if n == 0 {
        return a;
    }
    if rho < 1.0 {
        // q(1 + y) = Σ b_k y^k, radius of convergence 2.
        const TERMS: usize = 90;
        let mut b = [0.0; TERMS + 1];
        b[1] = 2.0;
        for k in 1..TERMS {
            let kf = k as f64;
            b[k + 1] = -kf * kf * b[k] / ((kf + 1.0) * (2.0 * kf + 1.0));
        }
        let y0 = 2.0 * (0.5 * rho).sinh().powi(2);
        for (j, aj) in a.iter_mut().enumerate().skip(1) {
            let (mut s, mut binom, mut pow) = (0.0, 1.0, 1.0);
            for (k, &bk) in b.iter().enumerate().skip(j) {
                s += binom * bk * pow;
                binom *= (k + 1) as f64 / (k + 1 - j) as f64;
                pow *= y0;
            }
            *aj = s;
        }
    } else {
        let z0 = rho.cosh();
        let s2 = rho.sinh().powi(2);
        a[1] = 2.0 * rho / rho.sinh();
        for k in 0..n - 1 {
            let kf = k as f64;
            let rhs = if k == 0 { 2.0 } else { 0.0 };
            a[k + 2] = (rhs - (kf + 1.0) * (2.0 * kf + 1.0) * z0 * a[k + 1] - kf * kf * a[k])
                / (s2 * (kf + 2.0) * (kf + 1.0));
        }
    }
    a
}

/// Taylor coefficients of `exp(g)` from those of `g`.
fn exp_jet(g: &[f64]) -> Vec<f64> {
    let mut f = vec![0.0; g.len()];
    f[0] = g[0].exp();
    for k in 1..g.len() {
        let s: f64 = (1..=k).map(|j| j as f64 * g[j] * f[k - j]).sum();
        f[k] = s / k as f64;
    }
    f
}

/// Taylor coefficients of `exp(-q/4t)` at `z = cosh ρ`.
fn gauss_jet(rho: f64, t: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let a = q_jet(rho, n);
    let g: Vec<f64> = a.iter().map(|ak| -ak / (4.0 * t)).collect();
    (a, exp_jet(&g))
}

fn factorial(m: usize) -> f64 {
    (1..=m).map(|k| k as f64).product()
}

/// `d = 2m + 1`.
fn p_odd(m: usize, t: f64, rho: f64) -> f64 {
    let (_, f) = gauss_jet(rho, t, m);
    let mf = m as f64;
    (-1.0 / (2.0 * PI)).powi(m as i32)
        * (-mf * mf * t).exp()
        * (4.0 * PI * t).powf(-0.5)
        * factorial(m)
        * f[m]
}

/// `m!`-scaled `m`-th Taylor coefficient of `g(z) = (q'(z)/2) exp(-q(z)/4t)`.
fn g_derivative(m: usize, t: f64, s: f64) -> f64 {
    let (a, f) = gauss_jet(s, t, m + 1);
    let gm: f64 = (0..=m)
        .map(|j| 0.5 * (j + 1) as f64 * a[j + 1] * f[m - j])
        .sum();
    factorial(m) * gm
}

/// `d = 2m + 2`.
fn p_even(m: usize, t: f64, rho: f64) -> Result<f64> {
    let s_max = rho + 14.0 * t.sqrt() + 1.0;
    let x_max = (s_max - rho).sqrt();
    let integrand = |x: f64| {
        let x2 = x * x;
        let s = rho + x2;
        let numer = if m == 0 {
            s * (-s * s / (4.0 * t)).exp()
        } else {
            g_derivative(m, t, s) * s.sinh()
        };
        let denom = (2.0 * (0.5 * (s + rho)).sinh() * (0.5 * x2).sinh()).sqrt();
        if denom == 0.0 {
            return 0.0;
        }
        numer * 2.0 * x / denom
    };
    let integral = adaptive(integrand, 0.0, x_max, KERNEL_QUAD)?.value;
    let mf = m as f64;
    Ok((-1.0 / (2.0 * PI)).powi(m as i32)
        * (-mf * (mf + 1.0) * t).exp()
        * 2f64.sqrt()
        * (4.0 * PI * t).powf(-1.5)
        * (-t / 4.0).exp()
        * integral)
}

/// Radius beyond which `k_d(t, ·)` carries no mass at double precision.
pub fn kernel_reach(d: usize, t: f64) -> f64 {
    (d - 1) as f64 * t + 13.0 * t.sqrt() + 1.0
}

/// `∫_{ℍ^d} k_d(t, ρ) dVol`, which equals `e^{-(d-1)t}`.
pub fn kernel_mass(d: usize, t: f64) -> Result<Integral> {
    check_args(d, t, 0.0)?;
    let omega = sphere_area(d - 1);
    let shift = (-((d - 1) as f64) * t).exp();
    let end = kernel_reach(d, t) + 2.0 * t.sqrt();
    let opts = AdaptiveOptions {
        abs_tol: 1e-300,
        rel_tol: 1e-11,
        max_panels: 4000,
        initial_panels: 16,
    };
    let mut failure = None;
    let integral = adaptive(
        |r| match laplacian_kernel(d, t, r) {
            Ok(p) => p * omega * r.sinh().powi(d as i32 - 1),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        0.0,
        end,
        opts,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let integral = integral?;
    Ok(Integral {
        value: shift * integral.value,
        error: shift * integral.error,
    })
}

/// `e^{-tA}` on ℍ³ in the sine basis `sin(κ_k ρ)/sinh ρ`, `κ_k = kπ/ρmax`.
///
/// Nodal values are projected onto the basis by weighted least squares in
/// `v = sinh ρ · u`, each coefficient is damped by `e^{-(3 + κ_k²)t}`, and the
/// result is read back on the grid. Projection followed by read-back is exact
/// on the basis, so the semigroup law holds to rounding.
/// Multiple of `ε Σ|c_k|` below which a sine sum is indistinguishable from 0.
const ROUNDING_FLOOR: f64 = 16.0;

#[derive(Clone, Debug)]
pub struct SpectralPropagator {
    grid: Arc<RadialGrid>,
    rates: Vec<f64>,
    forward: DMatrix<f64>,
    sines: DMatrix<f64>,
    inv_sinh: Vec<f64>,
}

impl SpectralPropagator {
    /// Default bandwidth `κ_max = 3/h` for panel width `h`.
    pub fn new(grid: Arc<RadialGrid>) -> Result<Self> {
        let h = grid.rho_max() * 8.0 / grid.len() as f64;
        Self::with_bandwidth(grid, 3.0 / h)
    }

    pub fn with_bandwidth(grid: Arc<RadialGrid>, kappa_max: f64) -> Result<Self> {
        if grid.dim() != 3 {
            return Err(invalid("the spectral propagator is specific to d = 3"));
        }
        let r_max = grid.rho_max();
        let modes = (kappa_max * r_max / PI).floor() as usize;
        if modes == 0 || modes > grid.len() {
            return Err(invalid(format!(
                "bandwidth {kappa_max} gives {modes} modes for {} nodes",
                grid.len()
            )));
        }
        let kappa: Vec<f64> = (1..=modes).map(|k| k as f64 * PI / r_max).collect();
        let nodes = grid.nodes();
        let lw = grid.line_weights();
        let n = nodes.len();
        let basis = DMatrix::from_fn(n, modes, |i, k| (kappa[k] * nodes[i]).sin());
        let weighted = DMatrix::from_fn(modes, n, |k, i| basis[(i, k)] * lw[i]);
        let gram = &weighted * &basis;
        let chol = gram
            .cholesky()
            .ok_or_else(|| invalid("sine basis Gram matrix is not positive definite"))?;
        let mut forward = chol.solve(&weighted);
        for (i, &r) in nodes.iter().enumerate() {
            let sh = r.sinh();
            forward.column_mut(i).scale_mut(sh);
        }
        let inv_sinh = nodes.iter().map(|r| 1.0 / r.sinh()).collect();
        let rates = kappa.iter().map(|k| 3.0 + k * k).collect();
        Ok(Self {
            grid,
            rates,
            forward,
            sines: basis,
            inv_sinh,
        })
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }

    /// Decay rates `3 + κ_k²` of the basis functions under `e^{-tA}`.
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn mode_count(&self) -> usize {
        self.rates.len()
    }

    /// Basis coefficients of a nodal field.
    pub fn encode(&self, u: &[f64]) -> Vec<f64> {
        (&self.forward * DVector::from_column_slice(u)).data.into()
    }

    /// Basis coefficients of several nodal fields at once.
    pub fn encode_many(&self, fields: &[Vec<f64>]) -> Vec<Vec<f64>> {
        if fields.is_empty() {
            return Vec::new();
        }
        let n = self.grid.len();
        let mat = DMatrix::from_fn(n, fields.len(), |i, j| fields[j][i]);
        let coeffs = &self.forward * mat;
        coeffs
            .column_iter()
            .map(|c| c.iter().copied().collect())
            .collect()
    }

    /// Nodal values of a coefficient vector.
    ///
    /// Values of `v = sinh ρ · u` below the rounding floor of the sine sum are
    /// set to zero. Without this, rounding noise of relative size `ε` in `v`
    /// would be amplified by `sinh ρ` in every `L^p` norm with `p < 2`.
    pub fn decode(&self, c: &[f64]) -> Vec<f64> {
        let floor = ROUNDING_FLOOR * f64::EPSILON * c.iter().map(|x| x.abs()).sum::<f64>();
        let v = &self.sines * DVector::from_column_slice(c);
        v.iter()
            .zip(&self.inv_sinh)
            .map(|(&vi, &is)| if vi.abs() <= floor { 0.0 } else { vi * is })
            .collect()
    }

    /// `e^{-tA} u` for `t ≥ 0`; `t = 0` returns `u` unchanged.
    pub fn apply(&self, t: f64, u: &[f64]) -> Vec<f64> {
        if t == 0.0 {
            return u.to_vec();
        }
        let mut c = self.encode(u);
        for (ck, &lam) in c.iter_mut().zip(&self.rates) {
            *ck *= (-lam * t).exp();
        }
        self.decode(&c)
    }
}

/// `e^{-tA} u` on ℍ^d: the spectral fast path when `d = 3`, direct
/// quadrature otherwise.
pub fn apply_semigroup(t: f64, u: &RadialField) -> Result<RadialField> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(invalid(format!("semigroup time must be positive, got {t}")));
    }
    u.check_cutoff()?;
    if u.grid().dim() == 3 {
        let prop = SpectralPropagator::new(u.grid().clone())?;
        RadialField::new(u.grid().clone(), prop.apply(t, u.values()))
    } else {
        apply_direct(t, u, Execution::default())
    }
}

/// Kernel evaluator for the direct path: closed forms for odd `d`, a
/// log-space interpolation table for even `d`.
struct KernelSource {
    d: usize,
    t: f64,
    reach: f64,
    table: Option<(f64, Vec<f64>)>,
}

const TABLE_STEP: f64 = 0.005;
const TABLE_HALF_STENCIL: usize = 3;

impl KernelSource {
    fn new(d: usize, t: f64, exec: Execution) -> Result<Self> {
        check_args(d, t, 0.0)?;
        let reach = kernel_reach(d, t);
        let table = if d.is_multiple_of(2) {
            let n = (reach / TABLE_STEP).ceil() as usize + 2 * TABLE_HALF_STENCIL + 1;
            let vals = try_map_range(exec, n, |i| {
                eval_kernel(d, t, i as f64 * TABLE_STEP).map(f64::ln)
            })?;
            Some((TABLE_STEP, vals))
        } else {
            None
        };
        Ok(Self { d, t, reach, table })
    }

    fn value(&self, rho: f64) -> f64 {
        match &self.table {
            None => {
                let shift = (-((self.d - 1) as f64) * self.t).exp();
                if self.d == 3 {
                    shift * p3(self.t, rho)
                } else {
                    shift * p_odd((self.d - 1) / 2, self.t, rho)
                }
            }
            Some((h, vals)) => {
                let x = rho / h;
                let i0 = (x.floor() as usize).saturating_sub(TABLE_HALF_STENCIL - 1);
                let i0 = i0.min(vals.len() - 2 * TABLE_HALF_STENCIL);
                let mut acc = 0.0;
                for j in 0..2 * TABLE_HALF_STENCIL {
                    let mut l = 1.0;
                    for k in 0..2 * TABLE_HALF_STENCIL {
                        if k != j {
                            l *= (x - (i0 + k) as f64) / (j as f64 - k as f64);
                        }
                    }
                    acc += l * vals[i0 + j];
                }
                acc.exp()
            }
        }
    }

    /// Average of `k_d(t, dist(x, y))` over the sphere `|y| = s`, `|x| = r`.
    fn spherical_average(&self, r: f64, s: f64) -> Result<f64> {
        let a = (r - s).abs();
        let b = r + s;
        if a >= self.reach || b <= a {
            return Ok(0.0);
        }
        let span = b - a;
        let phi_max = if b <= self.reach {
            PI
        } else {
            (1.0 - 2.0 * (self.reach - a) / span)
                .clamp(-1.0, 1.0)
                .acos()
        };
        let (shr, shs) = (r.sinh(), s.sinh());
        let expo = (self.d as f64 - 3.0) / 2.0;
        let integrand = |phi: f64| {
            let (sh, ch) = (0.5 * phi).sin_cos();
            let lo = 0.5 * span * sh * sh;
            let hi = 0.5 * span * ch * ch;
            let dist = a + 2.0 * lo;
            let mut f = self.value(dist) * dist.sinh() * 0.5 * span * phi.sin();
            if expo != 0.0 {
                let sin2 = 4.0
                    * (0.5 * (dist + a)).sinh()
                    * lo.sinh()
                    * (0.5 * (b + dist)).sinh()
                    * hi.sinh()
                    / (shr * shs).powi(2);
                f *= sin2.powf(expo);
            }
            f
        };
        let opts = AdaptiveOptions {
            abs_tol: 1e-300,
            rel_tol: 1e-12,
            max_panels: 400,
            initial_panels: 2,
        };
        let integral = adaptive(integrand, 0.0, phi_max, opts)?;
        Ok(sphere_area(self.d - 2) / sphere_area(self.d - 1) / (shr * shs) * integral.value)
    }
}

/// `e^{-tA} u` at the grid nodes by direct quadrature against the spherically
/// averaged kernel.
pub fn apply_direct(t: f64, u: &RadialField, exec: Execution) -> Result<RadialField> {
    let values = apply_direct_at(t, u, u.grid().nodes(), exec)?;
    RadialField::new(u.grid().clone(), values)
}

/// `(e^{-tA} u)(r)` for each requested radius `r`.
pub fn apply_direct_at(
    t: f64,
    u: &RadialField,
    radii: &[f64],
    exec: Execution,
) -> Result<Vec<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(invalid(format!("semigroup time must be positive, got {t}")));
    }
    u.check_cutoff()?;
    let grid = u.grid();
    let src = KernelSource::new(grid.dim(), t, exec)?;
    let (nodes, weights, vals) = (grid.nodes(), grid.weights(), u.values());
    try_map_range(exec, radii.len(), |i| {
        let r = radii[i];
        if r <= 0.0 {
            // At the origin the spherical average is the kernel itself.
            let mut acc = 0.0;
            for j in 0..nodes.len() {
                acc += weights[j] * vals[j] * src.value(nodes[j]);
            }
            return Ok(acc);
        }
        let mut acc = 0.0;
        for j in 0..nodes.len() {
            if vals[j] != 0.0 && (nodes[j] - r).abs() < src.reach {
                acc += weights[j] * vals[j] * src.spherical_average(r, nodes[j])?;
            }
        }
        Ok(acc)
    })
}

/// Inputs of [`verify_dispersive_decay`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersiveSettings {
    /// Constant `C` of `h_d`; rescaled by calibration anyway.
    pub c: f64,
    /// The dimensional constant `δ_d` in `γ_{p,q}`.
    pub delta: f64,
    /// Window used for the long-time rate fit.
    pub fit_window: (f64, f64),
}

impl Default for DispersiveSettings {
    fn default() -> Self {
        Self {
            c: 1.0,
            delta: 1.0,
            fit_window: (2.0, 6.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersiveRow {
    pub t: f64,
    pub norm_q: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersiveReport {
    pub dim: usize,
    pub p: f64,
    pub q: f64,
    pub rows: Vec<DispersiveRow>,
    /// Least-squares slope of `-ln ‖u(t)‖_q` over the fit window.
    pub fitted_rate: f64,
    /// `(d-1) + (d-1)²/4`.
    pub spectral_rate: f64,
    /// Factor that makes the bound exact at the first sample.
    pub calibration: f64,
    /// `min_t bound(t)/‖u(t)‖_q` after calibration.
    pub min_bound_ratio: f64,
    pub shape_ok: bool,
}

/// Measures `‖e^{-tA}u₀‖_q` and compares it against the profile
/// `[h_d(t)]^{1/p-1/q} e^{-t(d-1+γ_{p,q})} ‖u₀‖_p`, calibrated at the first
/// sample.
pub fn verify_dispersive_decay(
    u0: &RadialField,
    p: f64,
    q: f64,
    times: &[f64],
    settings: &DispersiveSettings,
) -> Result<DispersiveReport> {
    if !(1.0 <= p && p <= q) {
        return Err(invalid(format!("need 1 ≤ p ≤ q, got p = {p}, q = {q}")));
    }
    if times.is_empty()
        || times.iter().any(|&t| !(t > 0.0))
        || times.windows(2).any(|w| !(w[0] < w[1]))
    {
        return Err(invalid("sample times must be positive and increasing"));
    }
    u0.check_cutoff()?;
    let grid = u0.grid();
    let d = grid.dim();
    let gamma = gamma_pq(p, q, d, settings.delta)?;
    let norm_p = u0.lp_norm(p)?;
    let exponent = if q.is_infinite() {
        1.0 / p
    } else {
        1.0 / p - 1.0 / q
    };
    let profile = |t: f64| -> Result<f64> {
        Ok(dispersion_h(t, settings.c, d)?.powf(exponent)
            * (-t * ((d - 1) as f64 + gamma)).exp()
            * norm_p)
    };

    let evolved: Vec<Vec<f64>> = if d == 3 {
        let prop = SpectralPropagator::new(grid.clone())?;
        times.iter().map(|&t| prop.apply(t, u0.values())).collect()
    } else {
        times
            .iter()
            .map(|&t| apply_direct(t, u0, Execution::default()).map(RadialField::into_values))
            .collect::<Result<_>>()?
    };
    let norms: Vec<f64> = evolved
        .iter()
        .map(|v| lp_norm_values(grid, v, q))
        .collect::<Result<_>>()?;
    let calibration = norms[0] / profile(times[0])?;
    let mut rows = Vec::with_capacity(times.len());
    let mut min_ratio = f64::INFINITY;
    for (&t, &n) in times.iter().zip(&norms) {
        let bound = calibration * profile(t)?;
        if n > 0.0 {
            min_ratio = min_ratio.min(bound / n);
        }
        rows.push(DispersiveRow {
            t,
            norm_q: n,
            bound,
        });
    }

    let (lo, hi) = settings.fit_window;
    let fit: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.t >= lo && r.t <= hi && r.norm_q > 0.0)
        .map(|r| (r.t, r.norm_q.ln()))
        .collect();
    if fit.len() < 2 {
        return Err(invalid(format!(
            "rate fit needs at least two samples in [{lo}, {hi}], got {}",
            fit.len()
        )));
    }
    let fitted_rate = -least_squares_slope(&fit);
    let dm1 = (d - 1) as f64;
    Ok(DispersiveReport {
        dim: d,
        p,
        q,
        rows,
        fitted_rate,
        spectral_rate: dm1 + dm1 * dm1 / 4.0,
        calibration,
        min_bound_ratio: min_ratio,
        shape_ok: min_ratio >= 1.0 - 1e-9,
    })
}

/// Slope of the least-squares line through `(x, y)` pairs.
pub fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::HyperbolicModel;
    use crate::quadrature::integrate;

    #[test]
    fn p3_origin_limit() {
        for t in [0.1, 1.0, 3.0] {
            let expect = (4.0 * PI * t).powf(-1.5) * (-t).exp() * (-2.0 * t).exp();
            let got = eval_kernel(3, t, 0.0).unwrap();
            assert!((got - expect).abs() <= 1e-14 * expect);
            let near = eval_kernel(3, t, 1e-9).unwrap();
            assert!((near - expect).abs() <= 1e-12 * expect);
        }
    }

    #[test]
    fn odd_jet_formula_reproduces_p3() {
        for &t in &[0.05, 0.4, 2.0] {
            for &r in &[0.0, 0.3, 0.99, 1.0, 2.5, 7.0] {
                let a = p3(t, r);
                let b = p_odd(1, t, r);
                assert!((a - b).abs() <= 1e-12 * a, "t={t} r={r}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn q_jet_branches_agree_at_switch() {
        let lo = q_jet(1.0 - 1e-12, 6);
        let hi = q_jet(1.0, 6);
        for (a, b) in lo.iter().zip(&hi) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn q_jet_matches_finite_differences() {
        let q = |z: f64| z.acosh().powi(2);
        for rho in [0.5, 1.5] {
            let z0 = f64::cosh(rho);
            let a = q_jet(rho, 2);
            let h = 1e-4;
            let d1 = (q(z0 + h) - q(z0 - h)) / (2.0 * h);
            let d2 = (q(z0 + h) - 2.0 * q(z0) + q(z0 - h)) / (h * h);
            assert!((a[1] - d1).abs() < 1e-7);
            assert!((2.0 * a[2] - d2).abs() < 1e-5);
        }
    }

    #[test]
    fn positivity_and_monotonicity() {
        for d in [2, 3, 4, 5] {
            for t in [0.1, 1.0, 4.0] {
                let mut prev = f64::INFINITY;
                for i in 0..40 {
                    let r = 0.25 * i as f64;
                    let k = eval_kernel(d, t, r).unwrap();
                    assert!(k > 0.0, "d={d} t={t} r={r}");
                    assert!(k <= prev * (1.0 + 1e-12), "d={d} t={t} r={r}");
                    prev = k;
                }
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(eval_kernel(3, 0.0, 1.0).is_err());
        assert!(eval_kernel(3, -1.0, 1.0).is_err());
        assert!(eval_kernel(1, 1.0, 1.0).is_err());
        assert!(kernel_mass(3, 0.0).is_err());
    }

    #[test]
    fn d2_matches_direct_integral() {
        // The integral in its original variable, split at the singular point.
        let (t, rho): (f64, f64) = (0.7, 1.3);
        let inner = |s: f64| s * (-s * s / (4.0 * t)).exp() / (s.cosh() - rho.cosh()).sqrt();
        let opts = AdaptiveOptions {
            abs_tol: 1e-15,
            rel_tol: 1e-10,
            max_panels: 20000,
            initial_panels: 1,
        };
        // Peel the inverse square root analytically on [ρ, ρ+ε].
        let eps = 1e-6;
        let head = rho * (-rho * rho / (4.0 * t)).exp() * 2.0 * (eps / rho.sinh()).sqrt();
        let tail = adaptive(inner, rho + eps, 30.0, opts).unwrap().value;
        let expect = 2f64.sqrt() * (4.0 * PI * t).powf(-1.5) * (-t / 4.0).exp() * (head + tail);
        let got = laplacian_kernel(2, t, rho).unwrap();
        assert!((got - expect).abs() < 1e-5 * expect, "{got} vs {expect}");
    }

    #[test]
    fn mass_small_time_is_one() {
        for d in [2, 3, 5] {
            let m = kernel_mass(d, 1e-3).unwrap().value;
            assert!((m - 1.0).abs() < 1e-2, "d={d}: {m}");
        }
    }

    #[test]
    fn mass_spot_values() {
        let m3 = kernel_mass(3, 1.0).unwrap().value;
        assert!((m3 - (-2f64).exp()).abs() < 1e-6);
        assert!((m3 - 0.135335).abs() < 1e-6);
        let m2 = kernel_mass(2, 0.5).unwrap().value;
        assert!((m2 - (-0.5f64).exp()).abs() < 1e-6);
        assert!((m2 - 0.606531).abs() < 1e-6);
    }

    #[test]
    fn mass_even_recursion_d4() {
        for t in [0.2, 1.0] {
            let m = kernel_mass(4, t).unwrap().value;
            assert!((m - (-3.0 * t).exp()).abs() < 1e-6, "t={t}: {m}");
        }
    }

    fn bump_grid(rho_max: f64, width: f64) -> Arc<RadialGrid> {
        Arc::new(
            RadialGrid::with_panel_width(HyperbolicModel::new(3).unwrap(), rho_max, width).unwrap(),
        )
    }

    /// Exact evolution of `exp(-ρ²/2w²)` under `e^{-tA}` on ℍ³.
    fn exact_bump(w: f64, t: f64, r: f64) -> f64 {
        let var = w * w + 2.0 * t;
        let v = 0.5
            * (w * w / 2.0).exp()
            * (w / var.sqrt())
            * ((-(r - w * w).powi(2) / (2.0 * var)).exp()
                - (-(r + w * w).powi(2) / (2.0 * var)).exp());
        (-3.0 * t).exp() * v / r.sinh()
    }

    #[test]
    fn spectral_matches_exact_bump() {
        let g = bump_grid(24.0, 0.15);
        let prop = SpectralPropagator::new(g.clone()).unwrap();
        let w = 0.5;
        let u0: Vec<f64> = g
            .nodes()
            .iter()
            .map(|&r| (-r * r / (2.0 * w * w)).exp())
            .collect();
        for t in [0.01, 0.3, 1.0, 3.0] {
            let u = prop.apply(t, &u0);
            let exact: Vec<f64> = g.nodes().iter().map(|&r| exact_bump(w, t, r)).collect();
            let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = u
                .iter()
                .zip(&exact)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-11 * scale, "t={t}: {err:e}");
        }
    }

    #[test]
    fn spectral_agrees_with_direct() {
        let g = bump_grid(10.0, 0.25);
        let w = 0.6;
        let u0 = RadialField::from_fn(g.clone(), |r| (-r * r / (2.0 * w * w)).exp()).unwrap();
        let fast = apply_semigroup(0.5, &u0).unwrap();
        let picks: Vec<usize> = (0..g.len()).step_by(23).collect();
        let radii: Vec<f64> = picks.iter().map(|&i| g.nodes()[i]).collect();
        let slow = apply_direct_at(0.5, &u0, &radii, Execution::default()).unwrap();
        for (&i, s) in picks.iter().zip(&slow) {
            let f = fast.values()[i];
            assert!((s - f).abs() < 1e-8, "r={}: {s} vs {f}", g.nodes()[i]);
        }
    }

    #[test]
    fn chapman_kolmogorov_spot_value() {
        // p_t(ρ) = ∫ p_{t/2}(dist(x, y)) p_{t/2}(|y|) dy with |x| = ρ.
        let (t, rho): (f64, f64) = (1.0, 1.0);
        let h = 0.5 * t;
        let outer = |s: f64| {
            if s == 0.0 {
                return 0.0;
            }
            let inner = integrate(|dd| p3(h, dd) * dd.sinh(), (rho - s).abs(), rho + s).unwrap();
            2.0 * PI / (rho.sinh() * s.sinh()) * inner * p3(h, s) * s.sinh().powi(2)
        };
        let opts = AdaptiveOptions {
            abs_tol: 1e-16,
            rel_tol: 1e-12,
            max_panels: 4000,
            initial_panels: 8,
        };
        let value = adaptive(outer, 0.0, 25.0, opts).unwrap().value;
        let closed = p3(t, rho);
        assert!((value - closed).abs() < 1e-8, "{value} vs {closed}");
    }

    #[test]
    fn dispersive_p_equals_q_is_purely_exponential() {
        let g = bump_grid(20.0, 0.2);
        let u0 = RadialField::from_fn(g, |r| (-r * r / 0.5).exp()).unwrap();
        let times = [0.5, 1.0, 2.0, 3.0];
        let rep =
            verify_dispersive_decay(&u0, 2.0, 2.0, &times, &DispersiveSettings::default()).unwrap();
        // γ_{2,2} = δ/2 · 2 = 1, so the profile is e^{-3t} exactly.
        let r0 = rep.rows[0].bound / (-1.5f64).exp();
        for row in &rep.rows {
            assert!((row.bound - r0 * (-3.0 * row.t).exp()).abs() <= 1e-12 * row.bound.max(1e-300));
        }
    }

    #[test]
    fn dispersive_rejects_too_few_samples() {
        let g = bump_grid(20.0, 0.2);
        let u0 = RadialField::from_fn(g, |r| (-r * r / 0.5).exp()).unwrap();
        assert!(verify_dispersive_decay(
            &u0,
            2.0,
            2.0,
            &[0.5, 1.0],
            &DispersiveSettings::default()
        )
        .is_err());
        assert!(verify_dispersive_decay(
            &u0,
            3.0,
            2.0,
            &[2.0, 3.0],
            &DispersiveSettings::default()
        )
        .is_err());
    }
}
