//! Mild solutions of `u' + Au = BF(t)` and the Volterra comparison equation.
//!
//! Every output time is evaluated directly,
//! `u(t) = e^{-tA}u₀ + ∫_0^t e^{-rA}B f(t − r) dr`, so the singular factor
//! `r^{-θ}` of the `e^{-rA}B` estimate always sits at the left end of the
//! quadrature interval. Near `r = 0` the rule works in `s = r^{1-θ}`, which
//! turns `r^{-θ} dr` into a smooth measure, on geometrically shrinking panels.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use rand::{Rng, RngCore};

use crate::aap::{AAPFunction, APPart, ApMode, C0Part, Envelope};
use crate::exec::map_range;
use crate::quadrature::{
    barycentric_weights, geometric_breakpoints, lagrange_basis, uniform_breakpoints, GaussLegendre,
};
use crate::semigroup::{Combination, DispersiveSemigroup, SemigroupConstants, SourceBatch};
use crate::special::gamma;
use crate::{invalid, Error, Execution, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub instance: String,
    pub method: String,
}

/// States `u(t_i)` at strictly increasing times.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    meta: TrajectoryMeta,
}

/// At most this many state components are written to trajectory CSV files.
pub const CSV_COMPONENTS: usize = 16;

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>, meta: TrajectoryMeta) -> Result<Self> {
        if times.len() != states.len() {
            return Err(invalid(format!(
                "{} times but {} states",
                times.len(),
                states.len()
            )));
        }
        validate_times(&times)?;
        if let Some(first) = states.first() {
            if states.iter().any(|s| s.len() != first.len()) {
                return Err(invalid("trajectory states differ in length"));
            }
        }
        Ok(Self {
            times,
            states,
            meta,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn meta(&self) -> &TrajectoryMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn last(&self) -> Option<(f64, &[f64])> {
        Some((*self.times.last()?, self.states.last()?.as_slice()))
    }

    pub fn norms(&self, norm: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
        self.states.iter().map(|s| norm(s)).collect()
    }

    pub fn sup_norm(&self, norm: &dyn Fn(&[f64]) -> f64) -> f64 {
        self.norms(norm).into_iter().fold(0.0, f64::max)
    }

    /// `max_i ‖u(t_i) − v(t_i)‖`; the trajectories must share their times.
    pub fn sup_distance(&self, other: &Trajectory, norm: &dyn Fn(&[f64]) -> f64) -> Result<f64> {
        if self.times != other.times {
            return Err(invalid("trajectories have different time grids"));
        }
        Ok(self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| norm(&sub(a, b)))
            .fold(0.0, f64::max))
    }

    /// CSV with columns `t`, `norm_y` and `u_<k>` for up to [`CSV_COMPONENTS`]
    /// evenly spaced component indices `k`.
    pub fn write_csv<W: Write>(&self, out: W, norm: &dyn Fn(&[f64]) -> f64) -> Result<()> {
        let dim = self.dim();
        let picks: Vec<usize> = if dim <= CSV_COMPONENTS {
            (0..dim).collect()
        } else {
            (0..CSV_COMPONENTS)
                .map(|i| i * (dim - 1) / (CSV_COMPONENTS - 1))
                .collect()
        };
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string(), "norm_y".to_string()];
        header.extend(picks.iter().map(|k| format!("u_{k}")));
        w.write_record(&header)?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let mut row = vec![fmt(*t), fmt(norm(s))];
            row.extend(picks.iter().map(|&k| fmt(s[k])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.17e}")
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn validate_times(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(invalid("times must be finite"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("times must be strictly increasing"));
    }
    Ok(())
}

/// Composite Gauss–Legendre rule for `∫_0^L e^{-rA}B g(r) dr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuhamelQuadrature {
    /// Gauss–Legendre points per panel.
    pub order: usize,
    /// Largest panel width (in `s` on the near field, in `r` beyond it).
    pub step: f64,
    /// Length of the near field `[0, near]` handled in `s = r^{1-θ}`.
    pub near: f64,
    /// Number of geometric refinements towards `r = 0`.
    pub levels: usize,
    /// Ratio between consecutive geometric panels.
    pub ratio: f64,
}

impl Default for DuhamelQuadrature {
    fn default() -> Self {
        Self {
            order: 8,
            step: 0.5,
            near: 0.5,
            levels: 16,
            ratio: 0.5,
        }
    }
}

impl DuhamelQuadrature {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 || self.order > 64 {
            return Err(invalid(format!(
                "quadrature order must lie in 1..=64, got {}",
                self.order
            )));
        }
        if !(self.step > 0.0) || !(self.near >= 0.0) || !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(invalid(format!("invalid quadrature settings {self:?}")));
        }
        Ok(())
    }

    /// Half the panel width and four more geometric levels.
    pub fn refined(&self) -> Self {
        Self {
            step: 0.5 * self.step,
            levels: self.levels + 4,
            ..*self
        }
    }

    /// Nodes `r_k ∈ (0, L)` and weights for integrands with an `r^{-θ}` factor.
    pub fn rule(&self, theta: f64, length: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        if !(length > 0.0) {
            return out;
        }
        let gl = GaussLegendre::new(self.order);
        let near = self.near.min(length);
        if near > 0.0 {
            let e = 1.0 - theta;
            let s_len = near.powf(e);
            let coarse = geometric_breakpoints(s_len, self.ratio, self.levels);
            for w in coarse.windows(2) {
                for p in uniform_breakpoints(w[0], w[1], self.step).windows(2) {
                    for (s, ws) in gl.mapped(p[0], p[1]) {
                        let r = s.powf(1.0 / e);
                        out.push((r, ws * s.powf(theta / e) / e));
                    }
                }
            }
        }
        if length > near {
            for p in uniform_breakpoints(near, length, self.step).windows(2) {
                out.extend(gl.mapped(p[0], p[1]));
            }
        }
        out
    }
}

/// A forcing term given as time-dependent combinations of fixed states.
pub trait Forcing: Sync {
    fn dim(&self) -> usize;

    fn sources(&self) -> Vec<Vec<f64>>;

    /// Pushes `(source, w·coefficient)` pairs describing the forcing at `t`.
    fn coefficients(&self, t: f64, w: f64, out: &mut Vec<(usize, f64)>);
}

impl Forcing for AAPFunction {
    fn dim(&self) -> usize {
        AAPFunction::dim(self)
    }

    fn sources(&self) -> Vec<Vec<f64>> {
        AAPFunction::sources(self)
    }

    fn coefficients(&self, t: f64, w: f64, out: &mut Vec<(usize, f64)>) {
        AAPFunction::coefficients(self, t, w, out)
    }
}

impl Forcing for APPart {
    fn dim(&self) -> usize {
        APPart::dim(self)
    }

    fn sources(&self) -> Vec<Vec<f64>> {
        self.modes()
            .iter()
            .flat_map(|m| [m.cos.clone(), m.sin.clone()])
            .collect()
    }

    fn coefficients(&self, t: f64, w: f64, out: &mut Vec<(usize, f64)>) {
        for (j, m) in self.modes().iter().enumerate() {
            let (s, c) = (m.freq * t).sin_cos();
            out.push((2 * j, w * c));
            out.push((2 * j + 1, w * s));
        }
    }
}

/// Values at nodes, interpolated by local Lagrange polynomials on the
/// `degree + 1` nearest nodes.
#[derive(Clone, Debug)]
pub struct NodalForcing {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    width: usize,
    bary: Vec<Vec<f64>>,
}

impl NodalForcing {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>, degree: usize) -> Result<Self> {
        validate_times(&times)?;
        if times.is_empty() || times.len() != values.len() {
            return Err(invalid("nodal forcing needs one value per node"));
        }
        let width = (degree + 1).min(times.len());
        let bary = (0..=times.len() - width)
            .map(|s| barycentric_weights(&times[s..s + width]))
            .collect();
        Ok(Self {
            times,
            values,
            width,
            bary,
        })
    }

    fn stencil(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&x| x <= t);
        k.saturating_sub(self.width / 2)
            .min(self.times.len() - self.width)
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut coeffs = Vec::new();
        self.coefficients(t, 1.0, &mut coeffs);
        let mut out = vec![0.0; self.dim()];
        for (i, c) in coeffs {
            out.iter_mut()
                .zip(&self.values[i])
                .for_each(|(o, v)| *o += c * v);
        }
        out
    }
}

impl Forcing for NodalForcing {
    fn dim(&self) -> usize {
        self.values[0].len()
    }

    fn sources(&self) -> Vec<Vec<f64>> {
        self.values.clone()
    }

    fn coefficients(&self, t: f64, w: f64, out: &mut Vec<(usize, f64)>) {
        let s = self.stencil(t);
        let basis = lagrange_basis(&self.times[s..s + self.width], &self.bary[s], t);
        out.extend(basis.into_iter().enumerate().map(|(j, b)| (s + j, w * b)));
    }
}

/// `∫_0^L e^{-rA}B f(t − r) dr`.
pub fn duhamel_integral(
    s: &dyn DispersiveSemigroup,
    batch: &SourceBatch,
    forcing: &dyn Forcing,
    t: f64,
    length: f64,
    quad: &DuhamelQuadrature,
) -> Vec<f64> {
    let rule = quad.rule(s.constants().theta, length);
    let coeffs: Vec<Vec<(usize, f64)>> = rule
        .iter()
        .map(|&(r, w)| {
            let mut c = Vec::new();
            forcing.coefficients(t - r, w, &mut c);
            c
        })
        .collect();
    let terms: Vec<Combination<'_>> = rule
        .iter()
        .zip(&coeffs)
        .map(|(&(r, _), c)| Combination {
            time: r,
            sources: c,
        })
        .collect();
    s.accumulate_after_b(batch, &terms)
}

/// Settings shared by the linear solvers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub quadrature: DuhamelQuadrature,
    /// When set, up to four output times are recomputed with the refined rule
    /// and a larger relative difference is an error.
    pub tolerance: Option<f64>,
    pub execution: Execution,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            quadrature: DuhamelQuadrature::default(),
            tolerance: Some(1e-8),
            execution: Execution::Parallel,
        }
    }
}

fn check_forcing(s: &dyn DispersiveSemigroup, f: &dyn Forcing) -> Result<()> {
    if f.dim() != s.dim() {
        return Err(invalid(format!(
            "forcing has state length {}, instance {} expects {}",
            f.dim(),
            s.name(),
            s.dim()
        )));
    }
    Ok(())
}

/// Solves `u' + Au = Bf`, `u(0) = u₀` at the given times.
pub fn duhamel_solve(
    s: &dyn DispersiveSemigroup,
    f: &dyn Forcing,
    u0: &[f64],
    times: &[f64],
    opts: &SolveOptions,
) -> Result<Trajectory> {
    s.validate_state(u0)?;
    check_forcing(s, f)?;
    opts.quadrature.validate()?;
    validate_times(times)?;
    if times.first().is_some_and(|&t| t < 0.0) {
        return Err(invalid("Duhamel output times must be non-negative"));
    }
    let batch = s.prepare(f.sources());
    let eval = |t: f64, q: &DuhamelQuadrature| {
        let mut u = s.apply(t, u0);
        if t > 0.0 {
            let d = duhamel_integral(s, &batch, f, t, t, q);
            u.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        u
    };
    let states = map_range(opts.execution, times.len(), |i| {
        eval(times[i], &opts.quadrature)
    });
    if let Some(tol) = opts.tolerance {
        check_quadrature(s, times, &states, tol, opts.execution, |t| {
            eval(t, &opts.quadrature.refined())
        })?;
    }
    let meta = TrajectoryMeta {
        instance: s.name().into(),
        method: "duhamel".into(),
    };
    Trajectory::new(times.to_vec(), states, meta)
}

fn check_quadrature(
    s: &dyn DispersiveSemigroup,
    times: &[f64],
    states: &[Vec<f64>],
    tol: f64,
    exec: Execution,
    fine: impl Fn(f64) -> Vec<f64> + Sync + Send,
) -> Result<()> {
    let n = times.len();
    let mut picks: Vec<usize> = (1..=4)
        .map(|k| (k * n).div_ceil(4).saturating_sub(1))
        .collect();
    picks.dedup();
    let errs = map_range(exec, picks.len(), |k| {
        let i = picks[k];
        let u = fine(times[i]);
        s.norm_y(&sub(&u, &states[i])) / s.norm_y(&u).max(1.0)
    });
    let achieved = errs.into_iter().fold(0.0, f64::max);
    if achieved > tol {
        return Err(Error::Quadrature {
            achieved,
            requested: tol,
        });
    }
    Ok(())
}

/// `M = α(β^{θ-1}Γ(1-θ) + 1/β)`, the bound `sup_t ∫_0^t ‖e^{-(t-τ)A}B‖ dτ ≤ M`.
pub fn linear_bound_m(c: &SemigroupConstants) -> f64 {
    c.alpha * (c.beta.powf(c.theta - 1.0) * gamma(1.0 - c.theta) + 1.0 / c.beta)
}

/// Comparison of `sup_t ‖u(t)‖_Y` with `‖u₀‖_Y + M‖f‖_AAP`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBoundReport {
    pub m: f64,
    pub u0_norm: f64,
    pub forcing_norm: f64,
    pub measured_sup: f64,
    pub bound: f64,
    pub pass: bool,
}

pub fn linear_bound_check(
    s: &dyn DispersiveSemigroup,
    f: &AAPFunction,
    u0: &[f64],
    traj: &Trajectory,
) -> LinearBoundReport {
    let m = linear_bound_m(&s.constants());
    let u0_norm = s.norm_y(u0);
    let forcing_norm = f.norm(&|x| s.norm_x(x));
    let measured_sup = traj.sup_norm(&|y| s.norm_y(y));
    let bound = u0_norm + m * forcing_norm;
    LinearBoundReport {
        m,
        u0_norm,
        forcing_norm,
        measured_sup,
        bound,
        pass: measured_sup <= bound * (1.0 + 1e-6),
    }
}

/// Truncation `s_max = max(1, ln(2α‖H‖/(β·10⁻¹⁰))/β)` of the whole-line
/// integral; the discarded tail is below `10⁻¹⁰`.
pub fn whole_line_horizon(c: &SemigroupConstants, h_norm: f64) -> f64 {
    if h_norm <= 0.0 {
        return 1.0;
    }
    ((2.0 * c.alpha * h_norm / (c.beta * 1e-10)).ln() / c.beta).max(1.0)
}

/// `Ŝ(H)(t) = ∫_{-∞}^t e^{-(t-τ)A}B H(τ) dτ` at the given (arbitrary real) times.
pub fn whole_line_solve(
    s: &dyn DispersiveSemigroup,
    h: &APPart,
    times: &[f64],
    opts: &SolveOptions,
) -> Result<Trajectory> {
    check_forcing(s, h)?;
    opts.quadrature.validate()?;
    validate_times(times)?;
    let horizon = whole_line_horizon(&s.constants(), h.norm_bound(&|x| s.norm_x(x)));
    let batch = s.prepare(Forcing::sources(h));
    let eval = |t: f64, q: &DuhamelQuadrature| {
        if h.is_empty() {
            vec![0.0; s.dim()]
        } else {
            duhamel_integral(s, &batch, h, t, horizon, q)
        }
    };
    let states = map_range(opts.execution, times.len(), |i| {
        eval(times[i], &opts.quadrature)
    });
    if let Some(tol) = opts.tolerance {
        check_quadrature(s, times, &states, tol, opts.execution, |t| {
            eval(t, &opts.quadrature.refined())
        })?;
    }
    let meta = TrajectoryMeta {
        instance: s.name().into(),
        method: "whole_line".into(),
    };
    Trajectory::new(times.to_vec(), states, meta)
}

/// Outcome of [`split_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    /// `max_t ‖S(f)(t) − [e^{-tA}(u₀ − Ŝ(H)(0)) + Ŝ(H)(t) + S̃(Φ)(t)]‖_Y`.
    pub identity_residual: f64,
    pub tolerance: f64,
    pub t_end: f64,
    /// `‖S̃(Φ)(t_end)‖_Y` and its envelope.
    pub c0_tail: f64,
    pub c0_envelope: f64,
    /// `‖e^{-t_end A}(u₀ − Ŝ(H)(0))‖_Y` and `e^{-σ t_end}‖u₀ − Ŝ(H)(0)‖_Y`.
    pub transient_tail: f64,
    pub transient_envelope: f64,
    pub pass: bool,
}

/// Envelope of `‖S̃(Φ)(t)‖`: the integral over `[0, t/2]` is bounded with
/// `sup‖Φ‖`, the one over `[t/2, t]` with `M sup_{τ≥t/2}‖Φ(τ)‖`.
pub fn c0_envelope(c: &SemigroupConstants, phi_sup: f64, phi_tail_sup: f64, t: f64) -> f64 {
    let head = c.alpha
        * ((2.0 / t).powf(c.theta) + 1.0)
        * ((-0.5 * c.beta * t).exp() - (-c.beta * t).exp())
        / c.beta
        * phi_sup;
    head + linear_bound_m(c) * phi_tail_sup
}

/// Verifies the AP/C₀ splitting of the mild solution with AAP forcing.
pub fn split_check(
    s: &dyn DispersiveSemigroup,
    f: &AAPFunction,
    u0: &[f64],
    times: &[f64],
    opts: &SolveOptions,
    tolerance: f64,
) -> Result<SplitReport> {
    if !s.is_consistent() {
        return Err(Error::Hypothesis(format!(
            "{} does not compose e^(-tA) with e^(-sA)B, so the splitting identity does not apply",
            s.name()
        )));
    }
    let t_end = *times
        .last()
        .ok_or_else(|| invalid("split check needs output times"))?;
    if !(t_end > 0.0) {
        return Err(invalid("split check needs a positive final time"));
    }
    let full = duhamel_solve(s, f, u0, times, opts)?;
    let ap = whole_line_solve(s, &f.ap, times, opts)?;
    let ap0 = whole_line_solve(s, &f.ap, &[0.0], opts)?;
    let zero = vec![0.0; s.dim()];
    let c0 = duhamel_solve(s, &f.c0_only(), &zero, times, opts)?;
    let y0 = sub(u0, &ap0.states()[0]);
    let residuals = map_range(opts.execution, times.len(), |i| {
        let mut rhs = s.apply(times[i], &y0);
        for (r, (a, b)) in rhs
            .iter_mut()
            .zip(ap.states()[i].iter().zip(&c0.states()[i]))
        {
            *r += a + b;
        }
        s.norm_y(&sub(&full.states()[i], &rhs))
    });
    let identity_residual = residuals.into_iter().fold(0.0, f64::max);
    let c = s.constants();
    let nx = |x: &[f64]| s.norm_x(x);
    let c0_tail = s.norm_y(c0.states().last().expect("non-empty"));
    let c0_env = c0_envelope(&c, f.c0_norm(&nx), f.c0_tail_bound(0.5 * t_end, &nx), t_end);
    let transient_tail = s.norm_y(&s.apply(t_end, &y0));
    let transient_env = (-c.sigma * t_end).exp() * s.norm_y(&y0);
    let slack = |b: f64| b * (1.0 + 1e-9) + 1e-14;
    let pass = identity_residual <= tolerance
        && c0_tail <= slack(c0_env)
        && transient_tail <= slack(transient_env);
    Ok(SplitReport {
        identity_residual,
        tolerance,
        t_end,
        c0_tail,
        c0_envelope: c0_env,
        transient_tail,
        transient_envelope: transient_env,
        pass,
    })
}

/// Random AAP forcing with `modes` frequencies in `[0.1, 3]`, each part
/// scaled to `X`-norm at most `scale`, and an exponential vanishing part.
pub fn random_forcing(
    s: &dyn DispersiveSemigroup,
    rng: &mut dyn RngCore,
    modes: usize,
    scale: f64,
) -> Result<AAPFunction> {
    let profile = |rng: &mut dyn RngCore| {
        let p = s.random_state(rng);
        let n = s.norm_x(&p);
        p.into_iter().map(|v| v * scale / n).collect::<Vec<f64>>()
    };
    let mut list = Vec::with_capacity(modes);
    for _ in 0..modes {
        let freq = rng.gen_range(0.1..3.0);
        let (a, b) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        list.push(ApMode::separable(freq, a, b, &profile(rng)));
    }
    let ap = APPart::new(s.dim(), list)?;
    let envelope = Envelope::Exponential {
        c: rng.gen_range(-1.0..1.0),
        mu: rng.gen_range(0.2..2.0),
    };
    let c0 = vec![C0Part::new(envelope, profile(rng))?];
    AAPFunction::new(ap, c0)
}

/// `T (i/n)^exponent`, `i = 0..=n`; exponents above one cluster nodes at 0.
pub fn graded_time_grid(t_end: f64, n: usize, exponent: f64) -> Result<Vec<f64>> {
    if !(t_end > 0.0) || n == 0 || !(exponent >= 1.0) {
        return Err(invalid(format!(
            "invalid graded grid T = {t_end}, n = {n}, exponent = {exponent}"
        )));
    }
    Ok((0..=n)
        .map(|i| t_end * (i as f64 / n as f64).powf(exponent))
        .collect())
}

/// Polynomial degree of the Volterra product integration.
const VOLTERRA_DEGREE: usize = 4;
/// Gauss–Legendre points per sub-interval of a Volterra weight.
const VOLTERRA_POINTS: usize = 30;

/// Solves `ψ(t) = z(t) + L ∫_0^t α((t−τ)^{-θ} + 1) e^{-σ(t−τ)} ψ(τ) dτ`
/// on `grid` (starting at 0), given `z` at the grid nodes.
///
/// Block product integration: on each block of four steps `ψ` is replaced
/// by its interpolating polynomial (in `τ^{1-θ}` on the first block, where
/// `ψ` has a `τ^{1-θ}` singularity) and the kernel moments are integrated
/// exactly up to rounding; each block is an implicit 4×4 solve.
pub fn volterra_solve(
    z: &[f64],
    lip: f64,
    c: &SemigroupConstants,
    grid: &[f64],
) -> Result<Vec<f64>> {
    c.validate()?;
    validate_times(grid)?;
    if grid.first() != Some(&0.0) || grid.len() < 2 {
        return Err(invalid(
            "the Volterra grid must start at 0 and have at least two nodes",
        ));
    }
    if z.len() != grid.len() {
        return Err(invalid(format!(
            "{} forcing values for {} nodes",
            z.len(),
            grid.len()
        )));
    }
    if !(lip >= 0.0) {
        return Err(invalid(format!(
            "Lipschitz constant must be non-negative, got {lip}"
        )));
    }
    let resolvent =
        lip * c.alpha * (c.sigma.powf(c.theta - 1.0) * gamma(1.0 - c.theta) + 1.0 / c.sigma);
    if resolvent >= 1.0 {
        return Err(Error::Hypothesis(format!(
            "Lα(σ^(θ-1)Γ(1-θ) + 1/σ) = {resolvent:.6} ≥ 1: the Volterra operator is not a contraction"
        )));
    }
    let n = grid.len() - 1;
    let gl = GaussLegendre::new(VOLTERRA_POINTS);
    // Completed blocks: (own segment start, end, stencil start, stencil width, χ basis).
    let mut blocks: Vec<Block> = Vec::new();
    let mut psi = vec![0.0; n + 1];
    psi[0] = z[0];
    let mut start = 0;
    while start < n {
        let end = (start + VOLTERRA_DEGREE).min(n);
        let width = VOLTERRA_DEGREE.min(n) + 1;
        let stencil = end + 1 - width;
        let block = Block::new(grid, start, end, stencil, width, c.theta);
        let unknowns: Vec<usize> = (start + 1..=end).collect();
        let m = unknowns.len();
        let mut a = DMatrix::<f64>::identity(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        for (row, &i) in unknowns.iter().enumerate() {
            let ti = grid[i];
            let mut acc = z[i];
            for b in &blocks {
                let w = b.moments(grid, ti, grid[b.start], grid[b.end], c, &gl);
                acc += lip
                    * w.iter()
                        .enumerate()
                        .map(|(j, wj)| wj * psi[b.stencil + j])
                        .sum::<f64>();
            }
            let w = block.moments(grid, ti, grid[start], ti, c, &gl);
            for (j, wj) in w.iter().enumerate() {
                let k = stencil + j;
                if k <= start {
                    acc += lip * wj * psi[k];
                } else {
                    a[(row, k - start - 1)] -= lip * wj;
                }
            }
            rhs[row] = acc;
        }
        let sol = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| invalid("singular Volterra block system"))?;
        for (row, &i) in unknowns.iter().enumerate() {
            psi[i] = sol[row];
        }
        blocks.push(block);
        start = end;
    }
    Ok(psi)
}

struct Block {
    start: usize,
    end: usize,
    stencil: usize,
    /// Interpolation abscissae (`τ` or `τ^{1-θ}`).
    xs: Vec<f64>,
    bary: Vec<f64>,
    chi: bool,
    theta: f64,
}

impl Block {
    fn new(
        grid: &[f64],
        start: usize,
        end: usize,
        stencil: usize,
        width: usize,
        theta: f64,
    ) -> Self {
        let chi = theta > 0.0;
        let e = 1.0 - theta;
        let xs: Vec<f64> = grid[stencil..stencil + width]
            .iter()
            .map(|&t| if chi { t.powf(e) } else { t })
            .collect();
        let bary = barycentric_weights(&xs);
        Self {
            start,
            end,
            stencil,
            xs,
            bary,
            chi,
            theta,
        }
    }

    fn basis(&self, tau: f64) -> Vec<f64> {
        let x = if self.chi {
            tau.powf(1.0 - self.theta)
        } else {
            tau
        };
        lagrange_basis(&self.xs, &self.bary, x)
    }

    /// `∫_a^b K(t − τ) ℓ_j(τ) dτ` for each basis polynomial, `b ≤ t`.
    fn moments(
        &self,
        _grid: &[f64],
        t: f64,
        a: f64,
        b: f64,
        c: &SemigroupConstants,
        gl: &GaussLegendre,
    ) -> Vec<f64> {
        let mut out = vec![0.0; self.xs.len()];
        if b <= a {
            return out;
        }
        let e = 1.0 - c.theta;
        let kernel = |u: f64| c.alpha * (u.powf(-c.theta) + 1.0) * (-c.sigma * u).exp();
        let mut add = |tau: f64, w: f64| {
            for (o, l) in out.iter_mut().zip(self.basis(tau)) {
                *o += w * l;
            }
        };
        let singular_right = b >= t;
        let singular_left = self.chi && a == 0.0;
        let mid = 0.5 * (a + b);
        let (lo, hi) = match (singular_left, singular_right) {
            (true, true) => (mid, mid),
            (true, false) => (b, b),
            (false, true) => (a, a),
            (false, false) => (a, a),
        };
        // Left piece [a, lo] in χ = τ^{1-θ}.
        if singular_left {
            for (x, w) in gl.mapped(0.0, lo.powf(e)) {
                let tau = x.powf(1.0 / e);
                add(tau, w * kernel(t - tau) * x.powf(c.theta / e) / e);
            }
        }
        // Right piece [hi, b] in s = (t − τ)^{1-θ}; the kernel's u^{-θ} cancels.
        if singular_right {
            for (s, w) in gl.mapped(0.0, (t - hi).powf(e)) {
                let u = s.powf(1.0 / e);
                let weight = c.alpha * (1.0 + s.powf(c.theta / e)) * (-c.sigma * u).exp() / e;
                add(t - u, w * weight);
            }
        }
        // Regular middle piece.
        if !singular_left && !singular_right {
            for (tau, w) in gl.mapped(a, b) {
                add(tau, w * kernel(t - tau));
            }
        }
        out
    }
}

/// `γ_max = min{σ/2, σ − (αLσΓ(1−θ)/(σ − 2αL))^{1/(1−θ)}}`; requires
/// `σ > 2αL` and a positive result.
pub fn gamma_max(c: &SemigroupConstants, lip: f64) -> Result<f64> {
    c.validate()?;
    let gap = c.sigma - 2.0 * c.alpha * lip;
    if !(gap > 0.0) {
        return Err(Error::Hypothesis(format!(
            "σ − 2αL = {gap:.6} must be positive"
        )));
    }
    let inner = (c.alpha * lip * c.sigma * gamma(1.0 - c.theta) / gap).powf(1.0 / (1.0 - c.theta));
    let g = (0.5 * c.sigma).min(c.sigma - inner);
    if !(g > 0.0) {
        return Err(Error::Hypothesis(format!(
            "no admissible decay rate: γ_max = {g:.6}"
        )));
    }
    Ok(g)
}

/// `C_γ = 1/(1 − αL((σ−γ)^{θ−1}Γ(1−θ) + 2/σ))` for `0 < γ < γ_max`.
pub fn c_gamma(c: &SemigroupConstants, lip: f64, g: f64) -> Result<f64> {
    let gmax = gamma_max(c, lip)?;
    if !(g > 0.0 && g < gmax) {
        return Err(Error::Hypothesis(format!(
            "γ = {g} must lie in (0, γ_max = {gmax:.6})"
        )));
    }
    let d =
        c.alpha * lip * ((c.sigma - g).powf(c.theta - 1.0) * gamma(1.0 - c.theta) + 2.0 / c.sigma);
    if d >= 1.0 {
        return Err(Error::Hypothesis(format!(
            "αL((σ−γ)^(θ−1)Γ(1−θ) + 2/σ) = {d:.6} ≥ 1"
        )));
    }
    Ok(1.0 / (1.0 - d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semigroup::{MatrixSemigroup, SingularToySemigroup};

    fn consts(sigma: f64, beta: f64, alpha: f64, theta: f64) -> SemigroupConstants {
        SemigroupConstants::new(sigma, beta, alpha, theta).unwrap()
    }

    #[test]
    fn m_examples() {
        assert!((linear_bound_m(&consts(1.0, 1.0, 1.0, 0.0)) - 2.0).abs() < 1e-15);
        let m = linear_bound_m(&consts(1.0, 4.0, 1.0, 0.5));
        assert!((m - (0.5 * std::f64::consts::PI.sqrt() + 0.25)).abs() < 1e-14);
    }

    #[test]
    fn gamma_max_and_c_gamma_examples() {
        assert!((gamma_max(&consts(2.0, 2.0, 1.0, 0.0), 0.5).unwrap() - 1.0).abs() < 1e-14);
        assert!((c_gamma(&consts(2.0, 2.0, 1.0, 0.0), 0.1, 0.5).unwrap() - 1.2).abs() < 1e-14);
        assert!(gamma_max(&consts(2.0, 2.0, 1.0, 0.0), 1.0).is_err());
        assert!(c_gamma(&consts(2.0, 2.0, 1.0, 0.0), 0.1, 1.5).is_err());
    }

    #[test]
    fn rule_integrates_weakly_singular_moments() {
        let q = DuhamelQuadrature::default();
        for theta in [0.0, 0.3, 0.5, 0.8] {
            for len in [0.1, 1.0, 7.3] {
                let rule = q.rule(theta, len);
                let sum: f64 = rule
                    .iter()
                    .map(|&(r, w)| w * r.powf(-theta) * (-r).exp())
                    .sum();
                // ∫_0^L r^{-θ}e^{-r} dr via its series.
                let exact = lower_gamma(1.0 - theta, len);
                assert!(
                    (sum - exact).abs() < 1e-12 * exact.max(1.0),
                    "θ={theta} L={len}: {sum} vs {exact}"
                );
            }
        }
    }

    /// `γ(a, x) = x^a e^{-x} Σ x^n / (a(a+1)…(a+n))`.
    fn lower_gamma(a: f64, x: f64) -> f64 {
        let mut term = 1.0 / a;
        let mut sum = term;
        for n in 1..400 {
            term *= x / (a + n as f64);
            sum += term;
            if term < 1e-18 * sum {
                break;
            }
        }
        x.powf(a) * (-x).exp() * sum
    }

    fn toy_exact(c: &SemigroupConstants, u0: f64, f: f64, t: f64) -> f64 {
        let (a, b, th) = (c.alpha, c.beta, c.theta);
        (-c.sigma * t).exp() * u0
            + f * a * (b.powf(th - 1.0) * lower_gamma(1.0 - th, b * t) + (1.0 - (-b * t).exp()) / b)
    }

    fn constant(dim: usize, v: &[f64]) -> AAPFunction {
        AAPFunction::new(
            APPart::new(dim, vec![ApMode::separable(0.0, 1.0, 0.0, v)]).unwrap(),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn toy_with_constant_forcing_matches_closed_form() {
        let c = consts(1.0, 1.5, 1.0, 0.5);
        let s = SingularToySemigroup::new(c).unwrap();
        let times: Vec<f64> = (0..=40).map(|i| 0.25 * i as f64).collect();
        let traj = duhamel_solve(
            &s,
            &constant(1, &[0.3]),
            &[1.0],
            &times,
            &SolveOptions::default(),
        )
        .unwrap();
        for (t, u) in traj.times().iter().zip(traj.states()) {
            assert!((u[0] - toy_exact(&c, 1.0, 0.3, *t)).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn duhamel_convergence_order() {
        // Two-point rule entirely in s = r^{1/2}: error O(h^4).
        let c = consts(1.0, 1.5, 1.0, 0.5);
        let s = SingularToySemigroup::new(c).unwrap();
        let f = constant(1, &[1.0]);
        let t = 4.0;
        let exact = toy_exact(&c, 0.0, 1.0, t);
        let err = |step: f64| {
            let opts = SolveOptions {
                quadrature: DuhamelQuadrature {
                    order: 2,
                    step,
                    near: 10.0,
                    levels: 0,
                    ratio: 0.5,
                },
                tolerance: None,
                execution: Execution::Sequential,
            };
            (duhamel_solve(&s, &f, &[0.0], &[t], &opts).unwrap().states()[0][0] - exact).abs()
        };
        let (e1, e2) = (err(0.25), err(0.125));
        let order = (e1 / e2).log2();
        assert!((order - 4.0).abs() < 0.3, "observed order {order}");
    }

    #[test]
    fn matrix_duhamel_matches_closed_form_for_periodic_forcing() {
        // u' + λu = a cos(ωt): u = e^{-λt}(u₀ − P(0)) + P(t), P the periodic solution.
        let s = MatrixSemigroup::diagonal(vec![1.0, 3.0]).unwrap();
        let (w, a) = (1.3, [0.7, -0.2]);
        let f = AAPFunction::new(
            APPart::new(2, vec![ApMode::separable(w, 1.0, 0.0, &a)]).unwrap(),
            vec![],
        )
        .unwrap();
        let u0 = [0.5, 0.25];
        let times: Vec<f64> = (0..=20).map(|i| 0.5 * i as f64).collect();
        let traj = duhamel_solve(&s, &f, &u0, &times, &SolveOptions::default()).unwrap();
        let periodic = |lam: f64, amp: f64, t: f64| {
            amp * (lam * (w * t).cos() + w * (w * t).sin()) / (lam * lam + w * w)
        };
        for (t, u) in traj.times().iter().zip(traj.states()) {
            for (k, lam) in [1.0, 3.0].into_iter().enumerate() {
                let exact =
                    (-lam * t).exp() * (u0[k] - periodic(lam, a[k], 0.0)) + periodic(lam, a[k], *t);
                assert!((u[k] - exact).abs() < 1e-12, "t={t} k={k}");
            }
        }
        let wl = whole_line_solve(&s, &f.ap, &times, &SolveOptions::default()).unwrap();
        for (t, u) in wl.times().iter().zip(wl.states()) {
            for (k, lam) in [1.0, 3.0].into_iter().enumerate() {
                assert!((u[k] - periodic(lam, a[k], *t)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_data_gives_zero() {
        let s = MatrixSemigroup::diagonal(vec![1.0, 2.0]).unwrap();
        let traj = duhamel_solve(
            &s,
            &AAPFunction::zero(2),
            &[0.0, 0.0],
            &[0.0, 1.0, 2.0],
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(traj.states().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn unmet_tolerance_is_reported() {
        let s = MatrixSemigroup::diagonal(vec![50.0]).unwrap();
        let f = AAPFunction::new(
            APPart::new(1, vec![ApMode::separable(20.0, 1.0, 0.0, &[1.0])]).unwrap(),
            vec![],
        )
        .unwrap();
        let opts = SolveOptions {
            quadrature: DuhamelQuadrature {
                order: 2,
                step: 2.0,
                near: 0.0,
                levels: 0,
                ratio: 0.5,
            },
            tolerance: Some(1e-8),
            execution: Execution::Sequential,
        };
        match duhamel_solve(&s, &f, &[0.0], &[4.0], &opts) {
            Err(Error::Quadrature {
                achieved,
                requested,
            }) => assert!(achieved > requested),
            other => panic!("expected a quadrature error, got {other:?}"),
        }
    }

    #[test]
    fn split_identity_on_matrix_instance() {
        let s = MatrixSemigroup::rotated(vec![1.0, 2.0, 5.0], 7, None).unwrap();
        let ap = APPart::new(
            3,
            vec![
                ApMode::separable(1.0, 0.0, 1.0, &[1.0, 0.5, -0.3]),
                ApMode::separable(2f64.sqrt(), 0.4, 0.0, &[0.2, -1.0, 0.1]),
            ],
        )
        .unwrap();
        let c0 = vec![C0Part::new(
            Envelope::Exponential { c: 1.0, mu: 1.0 },
            vec![0.3, 0.3, 1.0],
        )
        .unwrap()];
        let f = AAPFunction::new(ap, c0).unwrap();
        let times: Vec<f64> = (0..=40).map(|i| 0.5 * i as f64).collect();
        let r = split_check(
            &s,
            &f,
            &[0.1, -0.2, 0.4],
            &times,
            &SolveOptions::default(),
            1e-9,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.c0_tail < 1e-6);
    }

    #[test]
    fn split_check_refuses_toy() {
        let s = SingularToySemigroup::new(consts(1.0, 1.0, 1.0, 0.5)).unwrap();
        assert!(matches!(
            split_check(
                &s,
                &AAPFunction::zero(1),
                &[1.0],
                &[1.0],
                &SolveOptions::default(),
                1e-8
            ),
            Err(Error::Hypothesis(_))
        ));
    }

    fn binomial(n: usize, k: usize) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    /// Neumann series of the Volterra equation with `z = c e^{-σt}`.
    fn volterra_series(c: &SemigroupConstants, lip: f64, z0: f64, t: f64) -> f64 {
        let a = lip * c.alpha * gamma(1.0 - c.theta);
        let b = lip * c.alpha;
        let mut w = 0.0;
        for j in 0..80 {
            for k in 0..80 {
                let mu = j as f64 * (1.0 - c.theta) + k as f64;
                let lg = ln_gamma(1.0 + mu);
                let term = binomial(j + k, j)
                    * a.powi(j as i32)
                    * b.powi(k as i32)
                    * (mu * t.ln() - lg).exp();
                w += if mu == 0.0 { 1.0 } else { term };
            }
        }
        z0 * (-c.sigma * t).exp() * w
    }

    fn ln_gamma(x: f64) -> f64 {
        if x < 100.0 {
            gamma(x).ln()
        } else {
            (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * x)
        }
    }

    #[test]
    fn volterra_matches_neumann_series() {
        let c = consts(2.0, 2.0, 1.0, 0.5);
        let lip = 0.3;
        let grid = graded_time_grid(5.0, 200, 2.0).unwrap();
        let z: Vec<f64> = grid.iter().map(|t| (-2.0 * t).exp()).collect();
        let psi = volterra_solve(&z, lip, &c, &grid).unwrap();
        for (i, &t) in grid.iter().enumerate().skip(1) {
            let exact = volterra_series(&c, lip, 1.0, t);
            assert!(
                (psi[i] - exact).abs() < 1e-8,
                "t={t}: {} vs {exact}",
                psi[i]
            );
        }
    }

    #[test]
    fn volterra_theta_zero_closed_form() {
        let c = consts(2.0, 2.0, 1.0, 0.0);
        let lip = 0.12;
        let grid: Vec<f64> = (0..=160).map(|i| 0.0625 * i as f64).collect();
        let z: Vec<f64> = grid.iter().map(|t| 0.01 * (-2.0 * t).exp()).collect();
        let psi = volterra_solve(&z, lip, &c, &grid).unwrap();
        let err = psi
            .iter()
            .zip(&grid)
            .map(|(p, t)| (p - 0.01 * (-(2.0 - 2.0 * lip) * t).exp()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "max error {err:e}");
    }

    #[test]
    fn volterra_rejects_large_lipschitz() {
        let c = consts(1.0, 1.0, 1.0, 0.0);
        assert!(matches!(
            volterra_solve(&[1.0, 1.0], 0.6, &c, &[0.0, 1.0]),
            Err(Error::Hypothesis(_))
        ));
    }

    #[test]
    fn nodal_forcing_reproduces_polynomials() {
        let times: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).powf(1.2)).collect();
        let values: Vec<Vec<f64>> = times
            .iter()
            .map(|t| vec![t.powi(7) - 2.0 * t + 1.0])
            .collect();
        let f = NodalForcing::new(times, values, 7).unwrap();
        for t in [0.0f64, 0.05, 1.7, 3.3, 5.9] {
            let exact = t.powi(7) - 2.0 * t + 1.0;
            assert!(
                (f.eval(t)[0] - exact).abs() < 1e-9 * exact.abs().max(1.0),
                "t={t}"
            );
        }
    }

    #[test]
    fn trajectory_csv_layout() {
        let tr = Trajectory::new(
            vec![0.0, 1.0],
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            TrajectoryMeta::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf, &|v| v.iter().map(|x| x.abs()).sum())
            .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,norm_y,u_0,u_1");
        assert_eq!(text.lines().count(), 3);
        assert!(Trajectory::new(
            vec![1.0, 0.0],
            vec![vec![], vec![]],
            TrajectoryMeta::default()
        )
        .is_err());
    }
}
