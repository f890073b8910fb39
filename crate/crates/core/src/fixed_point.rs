//! Semilinear problems `u' + Au = B G(u, t)` by Picard iteration on the
//! closed ball of radius `ρ` in `C_b([0, T]; Y)`, and the exponential
//! stability experiment.
//!
//! The iterate lives on a fixed time grid starting at 0; `G(v(τ), τ)` between
//! nodes is the local degree-7 Lagrange interpolant of its nodal values, and
//! each output time is a direct Duhamel quadrature.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::exec::{map_range, try_map_range};
use crate::heat_kernel::least_squares_slope;
use crate::mild::{
    c_gamma, duhamel_integral, gamma_max, linear_bound_m, sub, volterra_solve, DuhamelQuadrature,
    NodalForcing, Trajectory, TrajectoryMeta,
};
use crate::semigroup::{DispersiveSemigroup, SemigroupConstants};
use crate::{invalid, Error, Execution, Result};

/// `G : B_ρ ⊂ Y × ℝ₊ → X`, Lipschitz in `u` on the ball.
pub trait Nonlinearity: Send + Sync {
    fn name(&self) -> &str;

    fn evaluate(&self, u: &[f64], t: f64) -> Vec<f64>;

    /// `L` with `‖G(u,t) − G(v,t)‖_X ≤ L‖u − v‖_Y` for `‖u‖_Y, ‖v‖_Y ≤ ρ`.
    fn lipschitz(&self) -> f64;

    /// `ρ`.
    fn radius(&self) -> f64;

    /// `sup_t ‖G(0, t)‖_X`.
    fn g0_sup(&self) -> f64;
}

/// `G(u, t) = λu + c`, the model case for scalar and matrix instances.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineNonlinearity {
    pub lambda: f64,
    pub constant: Vec<f64>,
    pub radius: f64,
    pub constant_norm: f64,
}

impl Nonlinearity for AffineNonlinearity {
    fn name(&self) -> &str {
        "affine"
    }

    fn evaluate(&self, u: &[f64], _t: f64) -> Vec<f64> {
        u.iter()
            .zip(&self.constant)
            .map(|(x, c)| self.lambda * x + c)
            .collect()
    }

    fn lipschitz(&self) -> f64 {
        self.lambda.abs()
    }

    fn radius(&self) -> f64 {
        self.radius
    }

    fn g0_sup(&self) -> f64 {
        self.constant_norm
    }
}

/// Outcome of [`smallness_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallnessReport {
    pub m: f64,
    pub lipschitz: f64,
    pub radius: f64,
    pub u0_norm: f64,
    pub g0_sup: f64,
    /// `‖u₀‖_Y + M(Lρ + sup‖G(0,·)‖_X)`, which must not exceed `ρ`.
    pub invariance: f64,
    /// `ML`, which must stay below one.
    pub contraction: f64,
    pub pass: bool,
}

/// The ball is invariant and the Picard map contracts on it.
pub fn smallness_check(
    c: &SemigroupConstants,
    g: &dyn Nonlinearity,
    u0_norm: f64,
) -> SmallnessReport {
    let m = linear_bound_m(c);
    let lip = g.lipschitz();
    let radius = g.radius();
    let invariance = u0_norm + m * (lip * radius + g.g0_sup());
    let contraction = m * lip;
    SmallnessReport {
        m,
        lipschitz: lip,
        radius,
        u0_norm,
        g0_sup: g.g0_sup(),
        invariance,
        contraction,
        pass: invariance <= radius && contraction < 1.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicardOptions {
    /// Stop once `max_i ‖v_{n+1}(t_i) − v_n(t_i)‖_Y` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub quadrature: DuhamelQuadrature,
    /// Degree of the local interpolant of `G(v(τ), τ)` in time.
    pub interpolation_degree: usize,
    pub execution: Execution,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 60,
            quadrature: DuhamelQuadrature::default(),
            interpolation_degree: 7,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `max_i ‖v_n(t_i) − v_{n-1}(t_i)‖_Y`.
    pub distance: f64,
    /// Ratio of consecutive distances; absent for the first step.
    pub ratio: Option<f64>,
    /// `max_i ‖v_n(t_i)‖_Y`.
    pub sup_norm: f64,
}

/// Writes the iteration log as CSV with columns `iter,sup_distance,ratio,sup_norm`;
/// `ratio` is empty on the first row.
pub fn write_iteration_log<W: Write>(log: &[IterationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "sup_distance", "ratio", "sup_norm"])?;
    for r in log {
        w.write_record([
            r.iteration.to_string(),
            format!("{:.17e}", r.distance),
            r.ratio.map(|x| format!("{x:.17e}")).unwrap_or_default(),
            format!("{:.17e}", r.sup_norm),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PicardOutcome {
    pub trajectory: Trajectory,
    pub log: Vec<IterationRecord>,
    pub smallness: SmallnessReport,
}

/// Largest contraction ratio whose distance was still above the tolerance
/// floor, or `None` when fewer than two steps were taken.
pub fn max_ratio(log: &[IterationRecord], floor: f64) -> Option<f64> {
    log.iter()
        .filter(|r| r.distance > floor)
        .filter_map(|r| r.ratio)
        .fold(None, |m, r| Some(m.map_or(r, |m: f64| m.max(r))))
}

struct PicardMap<'a> {
    s: &'a dyn DispersiveSemigroup,
    g: &'a dyn Nonlinearity,
    times: &'a [f64],
    homogeneous: Vec<Vec<f64>>,
    degree: usize,
    exec: Execution,
}

impl<'a> PicardMap<'a> {
    fn new(
        s: &'a dyn DispersiveSemigroup,
        g: &'a dyn Nonlinearity,
        u0: &[f64],
        times: &'a [f64],
        degree: usize,
        exec: Execution,
    ) -> Self {
        let homogeneous = map_range(exec, times.len(), |i| s.apply(times[i], u0));
        Self {
            s,
            g,
            times,
            homogeneous,
            degree,
            exec,
        }
    }

    /// `Φ(v)(t_i) = e^{-t_i A}u₀ + ∫_0^{t_i} e^{-rA}B G(v(t_i − r), t_i − r) dr`.
    fn apply(&self, v: &[Vec<f64>], quad: &DuhamelQuadrature) -> Result<Vec<Vec<f64>>> {
        let values: Vec<Vec<f64>> = map_range(self.exec, v.len(), |i| {
            self.g.evaluate(&v[i], self.times[i])
        });
        let forcing = NodalForcing::new(self.times.to_vec(), values.clone(), self.degree)?;
        let batch = self.s.prepare(values);
        Ok(map_range(self.exec, self.times.len(), |i| {
            let t = self.times[i];
            let mut u = self.homogeneous[i].clone();
            if t > 0.0 {
                let d = duhamel_integral(self.s, &batch, &forcing, t, t, quad);
                u.iter_mut().zip(d).for_each(|(a, b)| *a += b);
            }
            u
        }))
    }

    fn check_ball(&self, v: &[Vec<f64>]) -> Result<f64> {
        let radius = self.g.radius();
        let norms = map_range(self.exec, v.len(), |i| self.s.norm_y(&v[i]));
        let mut sup = 0.0f64;
        for (i, n) in norms.into_iter().enumerate() {
            if n > radius * (1.0 + 1e-12) {
                return Err(Error::BallExit {
                    time: self.times[i],
                    norm: n,
                    radius,
                });
            }
            sup = sup.max(n);
        }
        Ok(sup)
    }

    fn distance(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        map_range(self.exec, a.len(), |i| self.s.norm_y(&sub(&a[i], &b[i])))
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn check_grid(times: &[f64]) -> Result<()> {
    if times.first() != Some(&0.0) || times.len() < 2 {
        return Err(invalid(
            "the Picard time grid must start at 0 and have at least two nodes",
        ));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
        return Err(invalid(
            "Picard times must be finite and strictly increasing",
        ));
    }
    Ok(())
}

/// Picard iteration `v_{n+1} = Φ(v_n)` from `start` (the homogeneous
/// solution when absent).
///
/// Fails with [`Error::Hypothesis`] when the smallness conditions do not
/// hold, [`Error::BallExit`] when an iterate leaves the ball,
/// [`Error::NonContraction`] when a step above the tolerance grows, and
/// [`Error::NotConverged`] after `max_iter` steps.
pub fn picard_solve(
    s: &dyn DispersiveSemigroup,
    g: &dyn Nonlinearity,
    u0: &[f64],
    times: &[f64],
    start: Option<&Trajectory>,
    opts: &PicardOptions,
) -> Result<PicardOutcome> {
    s.validate_state(u0)?;
    check_grid(times)?;
    opts.quadrature.validate()?;
    let smallness = smallness_check(&s.constants(), g, s.norm_y(u0));
    if !smallness.pass {
        return Err(Error::Hypothesis(format!(
            "smallness fails: ‖u0‖ + M(Lρ + sup‖G(0,·)‖) = {:.6e} vs ρ = {:.6e}, ML = {:.6e}",
            smallness.invariance, smallness.radius, smallness.contraction
        )));
    }
    let map = PicardMap::new(s, g, u0, times, opts.interpolation_degree, opts.execution);
    let mut v = match start {
        Some(tr) => {
            if tr.times() != times {
                return Err(invalid("starting iterate is on a different time grid"));
            }
            tr.states().to_vec()
        }
        None => map.homogeneous.clone(),
    };
    map.check_ball(&v)?;
    let mut log = Vec::new();
    let mut prev: Option<f64> = None;
    for iteration in 1..=opts.max_iter {
        let next = map.apply(&v, &opts.quadrature)?;
        let sup_norm = map.check_ball(&next)?;
        let distance = map.distance(&next, &v);
        let ratio = prev.filter(|&p| p > 0.0).map(|p| distance / p);
        log.push(IterationRecord {
            iteration,
            distance,
            ratio,
            sup_norm,
        });
        v = next;
        if distance < opts.tol {
            let meta = TrajectoryMeta {
                instance: s.name().into(),
                method: format!("picard:{}", g.name()),
            };
            return Ok(PicardOutcome {
                trajectory: Trajectory::new(times.to_vec(), v, meta)?,
                log,
                smallness,
            });
        }
        if let Some(r) = ratio {
            if r >= 1.0 {
                return Err(Error::NonContraction {
                    iteration,
                    ratio: r,
                });
            }
        }
        prev = Some(distance);
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        distance: prev.unwrap_or(f64::INFINITY),
    })
}

/// `max_i ‖u(t_i) − Φ(u)(t_i)‖_Y` with `Φ` evaluated by `quadrature`; pass
/// `opts.quadrature.refined()` for an independent self-consistency check.
pub fn fixed_point_residual(
    s: &dyn DispersiveSemigroup,
    g: &dyn Nonlinearity,
    u0: &[f64],
    traj: &Trajectory,
    opts: &PicardOptions,
    quadrature: &DuhamelQuadrature,
) -> Result<f64> {
    let map = PicardMap::new(
        s,
        g,
        u0,
        traj.times(),
        opts.interpolation_degree,
        opts.execution,
    );
    let image = map.apply(traj.states(), quadrature)?;
    Ok(map.distance(&image, traj.states()))
}

/// Rates and constants of the stability estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityConstants {
    pub m: f64,
    pub lipschitz: f64,
    pub gamma_max: f64,
    pub gamma: f64,
    pub c_gamma: f64,
}

/// Fraction of `γ_max` used when no rate is requested.
pub const DEFAULT_GAMMA_FRACTION: f64 = 0.9;

impl StabilityConstants {
    pub fn new(c: &SemigroupConstants, lip: f64, gamma: Option<f64>) -> Result<Self> {
        let gmax = gamma_max(c, lip)?;
        let g = gamma.unwrap_or(DEFAULT_GAMMA_FRACTION * gmax);
        Ok(Self {
            m: linear_bound_m(c),
            lipschitz: lip,
            gamma_max: gmax,
            gamma: g,
            c_gamma: c_gamma(c, lip, g)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub t: f64,
    /// `‖u(t) − ũ(t)‖_Y`.
    pub distance: f64,
    /// `C_γ e^{-γt}‖u₀ − ũ₀‖_Y`.
    pub exponential_bound: f64,
    /// Solution of the Volterra comparison equation.
    pub volterra_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub constants: StabilityConstants,
    pub delta0_norm: f64,
    /// Allowance for the iteration error of both solutions.
    pub floor: f64,
    pub rows: Vec<StabilityRow>,
    pub exponential_violations: usize,
    pub volterra_violations: usize,
    /// `−slope` of `ln‖u − ũ‖` over the fit window; absent when fewer than
    /// two distances are resolvable (e.g. `δ₀ = 0`), which passes vacuously.
    pub fitted_rate: Option<f64>,
    pub fit_window: (f64, f64),
    pub pass: bool,
}

impl StabilityReport {
    /// CSV with columns `t,distance,exponential_bound,volterra_bound`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "distance", "exponential_bound", "volterra_bound"])?;
        for r in &self.rows {
            w.write_record(
                [r.t, r.distance, r.exponential_bound, r.volterra_bound]
                    .map(|x| format!("{x:.17e}")),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Perturbs `u₀` by `δ₀`, solves both problems and compares their distance
/// with `C_γ e^{-γt}‖δ₀‖` and with the Volterra solution driven by
/// `e^{-σt}‖δ₀‖`.
///
/// Bound checks allow `floor = tol`, the accuracy to which both fixed points
/// are resolved; the decay rate is fitted where the distance exceeds
/// `10³·floor`.
pub fn stability_experiment(
    s: &dyn DispersiveSemigroup,
    g: &dyn Nonlinearity,
    u0: &[f64],
    delta0: &[f64],
    times: &[f64],
    base: Option<&PicardOutcome>,
    opts: &PicardOptions,
) -> Result<StabilityReport> {
    let c = s.constants();
    let constants = StabilityConstants::new(&c, g.lipschitz(), None)?;
    let perturbed0: Vec<f64> = u0.iter().zip(delta0).map(|(a, b)| a + b).collect();
    let computed;
    let base = match base {
        Some(b) => b,
        None => {
            computed = picard_solve(s, g, u0, times, None, opts)?;
            &computed
        }
    };
    if base.trajectory.times() != times {
        return Err(invalid("base solution is on a different time grid"));
    }
    let pert = picard_solve(s, g, &perturbed0, times, None, opts)?;
    let delta0_norm = s.norm_y(delta0);
    let distances = base
        .trajectory
        .states()
        .iter()
        .zip(pert.trajectory.states())
        .map(|(a, b)| s.norm_y(&sub(a, b)));
    let z: Vec<f64> = times
        .iter()
        .map(|t| (-c.sigma * t).exp() * delta0_norm)
        .collect();
    let psi = volterra_solve(&z, g.lipschitz(), &c, times)?;
    let floor = opts.tol;
    let rows: Vec<StabilityRow> = times
        .iter()
        .zip(distances)
        .zip(&psi)
        .map(|((&t, distance), &v)| StabilityRow {
            t,
            distance,
            exponential_bound: constants.c_gamma * (-constants.gamma * t).exp() * delta0_norm,
            volterra_bound: v,
        })
        .collect();
    let exceeds = |d: f64, b: f64| d > b * (1.0 + 1e-9) + floor;
    let exponential_violations = rows
        .iter()
        .filter(|r| exceeds(r.distance, r.exponential_bound))
        .count();
    let volterra_violations = rows
        .iter()
        .filter(|r| exceeds(r.distance, r.volterra_bound))
        .count();
    let t_end = *times.last().expect("grid checked");
    let fit_window = (0.25 * t_end, t_end);
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.t >= fit_window.0 && r.distance > 1e3 * floor)
        .map(|r| (r.t, r.distance.ln()))
        .collect();
    let fitted_rate = (pts.len() >= 2).then(|| -least_squares_slope(&pts));
    let pass = exponential_violations == 0
        && volterra_violations == 0
        && fitted_rate.is_none_or(|r| r >= constants.gamma);
    Ok(StabilityReport {
        constants,
        delta0_norm,
        floor,
        rows,
        exponential_violations,
        volterra_violations,
        fitted_rate,
        fit_window,
        pass,
    })
}

/// Solves from the homogeneous solution and from zero; returns the sup
/// distance between the two fixed points.
pub fn uniqueness_gap(
    s: &dyn DispersiveSemigroup,
    g: &dyn Nonlinearity,
    u0: &[f64],
    times: &[f64],
    opts: &PicardOptions,
) -> Result<f64> {
    let a = picard_solve(s, g, u0, times, None, opts)?;
    let zero = Trajectory::new(
        times.to_vec(),
        vec![vec![0.0; s.dim()]; times.len()],
        TrajectoryMeta::default(),
    )?;
    let b = picard_solve(s, g, u0, times, Some(&zero), opts)?;
    a.trajectory.sup_distance(&b.trajectory, &|y| s.norm_y(y))
}

/// Stability experiments for several perturbations, evaluated independently.
pub fn stability_sweep(
    s: &dyn DispersiveSemigroup,
    g: &dyn Nonlinearity,
    u0: &[f64],
    perturbations: &[Vec<f64>],
    times: &[f64],
    opts: &PicardOptions,
) -> Result<Vec<StabilityReport>> {
    let base = picard_solve(s, g, u0, times, None, opts)?;
    let inner = PicardOptions {
        execution: Execution::Sequential,
        ..*opts
    };
    try_map_range(opts.execution, perturbations.len(), |k| {
        stability_experiment(s, g, u0, &perturbations[k], times, Some(&base), &inner)
    })
}
