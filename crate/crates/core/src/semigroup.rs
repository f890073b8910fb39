//! The dispersive-semigroup contract and its instances.
//!
//! An instance supplies `e^{-tA}` on a state space `Y`, the composition
//! `e^{-tA}B` from a forcing space `X` into `Y`, and decay constants such that
//!
//! ```text
//! ‖e^{-tA} u‖_Y   ≤ e^{-σt} ‖u‖_Y
//! ‖e^{-tA} B x‖_Y ≤ α (t^{-θ} + 1) e^{-βt} ‖x‖_X
//! ```
//!
//! for every `t > 0`. States of both spaces are flat `Vec<f64>` of length
//! [`DispersiveSemigroup::dim`]: one entry for scalar instances, one per
//! component for matrix instances, one per grid node for radial fields.
//! Everything in [`crate::mild`] and [`crate::fixed_point`] is written
//! against this trait only.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{check_cutoff_values, lp_unchecked, HyperbolicModel, RadialGrid};
use crate::heat_kernel::SpectralPropagator;
use crate::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemigroupConstants {
    pub sigma: f64,
    pub beta: f64,
    pub alpha: f64,
    pub theta: f64,
}

impl SemigroupConstants {
    pub fn new(sigma: f64, beta: f64, alpha: f64, theta: f64) -> Result<Self> {
        let c = Self {
            sigma,
            beta,
            alpha,
            theta,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(invalid(format!("σ must be positive, got {}", self.sigma)));
        }
        if !(self.beta >= self.sigma) || !self.beta.is_finite() {
            return Err(invalid(format!(
                "β must satisfy β ≥ σ, got β = {}, σ = {}",
                self.beta, self.sigma
            )));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("α must be positive, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.theta) {
            return Err(invalid(format!("θ must lie in [0, 1), got {}", self.theta)));
        }
        Ok(())
    }

    /// Right-hand side of the `e^{-tA}B` estimate per unit `‖x‖_X`.
    pub fn after_b_envelope(&self, t: f64) -> f64 {
        self.alpha * (t.powf(-self.theta) + 1.0) * (-self.beta * t).exp()
    }
}

/// A batch of `X`-states shared by many Duhamel terms, possibly pre-encoded
/// by the instance.
#[derive(Clone, Debug)]
pub struct SourceBatch {
    pub raw: Vec<Vec<f64>>,
    pub encoded: Option<Vec<Vec<f64>>>,
}

impl SourceBatch {
    pub fn raw(raw: Vec<Vec<f64>>) -> Self {
        Self { raw, encoded: None }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// `e^{-time·A} B (Σ_i c_i x_i)` with `(i, c_i)` pairs indexing a [`SourceBatch`].
#[derive(Clone, Copy, Debug)]
pub struct Combination<'a> {
    pub time: f64,
    pub sources: &'a [(usize, f64)],
}

/// Linear combination `Σ c_i x_i` of batch entries.
pub fn combine_sources(batch: &SourceBatch, coeffs: &[(usize, f64)], dim: usize) -> Vec<f64> {
    let mut x = vec![0.0; dim];
    for &(i, c) in coeffs {
        if c != 0.0 {
            for (xk, sk) in x.iter_mut().zip(&batch.raw[i]) {
                *xk += c * sk;
            }
        }
    }
    x
}

pub trait DispersiveSemigroup: Send + Sync {
    fn name(&self) -> &str;

    fn constants(&self) -> SemigroupConstants;

    /// Length of state vectors.
    fn dim(&self) -> usize;

    /// `e^{-tA} y` for `t ≥ 0`; `t = 0` is the identity.
    fn apply(&self, t: f64, y: &[f64]) -> Vec<f64>;

    /// `e^{-tA} B x` for `t > 0`.
    fn apply_after_b(&self, t: f64, x: &[f64]) -> Vec<f64>;

    fn norm_y(&self, y: &[f64]) -> f64;

    fn norm_x(&self, x: &[f64]) -> f64;

    /// True when `X = Y` and `B` is the identity.
    fn same_spaces(&self) -> bool;

    /// Whether `apply` and `apply_after_b` come from one generator, so that
    /// `e^{-tA}` composes with `e^{-sA}B` to `e^{-(t+s)A}B`.
    fn is_consistent(&self) -> bool {
        true
    }

    /// Rejects states the instance cannot represent faithfully.
    fn validate_state(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim() {
            return Err(invalid(format!(
                "{}: state has length {}, expected {}",
                self.name(),
                y.len(),
                self.dim()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "{}: state has non-finite entries",
                self.name()
            )));
        }
        Ok(())
    }

    /// A random state for contract verification.
    fn random_state(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Radial grid nodes when states are radial fields on ℍ^d.
    fn radial_nodes(&self) -> Option<&[f64]> {
        None
    }

    fn prepare(&self, sources: Vec<Vec<f64>>) -> SourceBatch {
        SourceBatch::raw(sources)
    }

    /// `Σ_j e^{-t_j A} B x_j` over a list of combinations of batch entries.
    fn accumulate_after_b(&self, batch: &SourceBatch, terms: &[Combination<'_>]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        for term in terms {
            let x = combine_sources(batch, term.sources, self.dim());
            for (a, v) in acc.iter_mut().zip(self.apply_after_b(term.time, &x)) {
                *a += v;
            }
        }
        acc
    }
}

fn euclidean(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `u' = -A u + B f` on ℝⁿ with `A = Q diag(λ) Qᵀ`, `Q` orthogonal, `λ > 0`.
///
/// Norms are Euclidean on both sides. Declared constants default to
/// `σ = β = min λ`, `θ = 0`, `α = ‖B‖₂` (`α = 1` when `B = I`).
#[derive(Clone, Debug)]
pub struct MatrixSemigroup {
    eigenvalues: Vec<f64>,
    q: DMatrix<f64>,
    b: Option<DMatrix<f64>>,
    constants: SemigroupConstants,
}

impl MatrixSemigroup {
    pub fn diagonal(eigenvalues: Vec<f64>) -> Result<Self> {
        let n = eigenvalues.len();
        Self::new(eigenvalues, DMatrix::identity(n, n), None)
    }

    /// Random orthogonal eigenbasis from a seed.
    pub fn rotated(eigenvalues: Vec<f64>, seed: u64, b: Option<DMatrix<f64>>) -> Result<Self> {
        let n = eigenvalues.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q = m.qr().q();
        Self::new(eigenvalues, q, b)
    }

    pub fn new(eigenvalues: Vec<f64>, q: DMatrix<f64>, b: Option<DMatrix<f64>>) -> Result<Self> {
        let n = eigenvalues.len();
        if n == 0 {
            return Err(invalid("matrix semigroup needs at least one eigenvalue"));
        }
        if eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(invalid("generator eigenvalues must be positive and finite"));
        }
        if q.shape() != (n, n) {
            return Err(invalid("eigenbasis has the wrong shape"));
        }
        let defect = (q.transpose() * &q - DMatrix::<f64>::identity(n, n))
            .abs()
            .max();
        if defect > 1e-12 {
            return Err(invalid(format!(
                "eigenbasis is not orthogonal (defect {defect:.2e})"
            )));
        }
        let alpha = match &b {
            Some(b) => {
                if b.shape() != (n, n) {
                    return Err(invalid("B has the wrong shape"));
                }
                let s = b.singular_values().max();
                if !(s > 0.0) {
                    return Err(invalid("B must be nonzero"));
                }
                s
            }
            None => 1.0,
        };
        let lmin = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let constants = SemigroupConstants::new(lmin, lmin, alpha, 0.0)?;
        Ok(Self {
            eigenvalues,
            q,
            b,
            constants,
        })
    }

    /// Replace the declared constants (used to test mis-declared instances).
    pub fn with_declared(mut self, c: SemigroupConstants) -> Result<Self> {
        c.validate()?;
        self.constants = c;
        Ok(self)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Generator `A = Q diag(λ) Qᵀ`.
    pub fn generator(&self) -> DMatrix<f64> {
        &self.q
            * DMatrix::from_diagonal(&DVector::from_column_slice(&self.eigenvalues))
            * self.q.transpose()
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        let n = self.eigenvalues.len();
        self.b.clone().unwrap_or_else(|| DMatrix::identity(n, n))
    }

    fn propagate(&self, t: f64, y: &DVector<f64>) -> Vec<f64> {
        let mut c = self.q.tr_mul(y);
        for (ck, &l) in c.iter_mut().zip(&self.eigenvalues) {
            *ck *= (-l * t).exp();
        }
        (&self.q * c).data.into()
    }
}

impl DispersiveSemigroup for MatrixSemigroup {
    fn name(&self) -> &str {
        "matrix"
    }

    fn constants(&self) -> SemigroupConstants {
        self.constants
    }

    fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    fn apply(&self, t: f64, y: &[f64]) -> Vec<f64> {
        if t == 0.0 {
            return y.to_vec();
        }
        self.propagate(t, &DVector::from_column_slice(y))
    }

    fn apply_after_b(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(x);
        match &self.b {
            Some(b) => self.propagate(t, &(b * x)),
            None => self.propagate(t, &x),
        }
    }

    fn norm_y(&self, y: &[f64]) -> f64 {
        euclidean(y)
    }

    fn norm_x(&self, x: &[f64]) -> f64 {
        euclidean(x)
    }

    fn same_spaces(&self) -> bool {
        self.b.is_none()
    }
}

/// Scalar instance that meets the `e^{-tA}B` estimate with equality:
/// `apply(t, u) = e^{-σt} u`, `apply_after_b(t, x) = α (t^{-θ} + 1) e^{-βt} x`.
///
/// The two maps do not come from a single generator, so only direct
/// per-time Duhamel quadrature is meaningful for it.
#[derive(Clone, Debug)]
pub struct SingularToySemigroup {
    constants: SemigroupConstants,
}

impl SingularToySemigroup {
    pub fn new(constants: SemigroupConstants) -> Result<Self> {
        constants.validate()?;
        Ok(Self { constants })
    }
}

impl DispersiveSemigroup for SingularToySemigroup {
    fn name(&self) -> &str {
        "singular_toy"
    }

    fn constants(&self) -> SemigroupConstants {
        self.constants
    }

    fn dim(&self) -> usize {
        1
    }

    fn apply(&self, t: f64, y: &[f64]) -> Vec<f64> {
        vec![(-self.constants.sigma * t).exp() * y[0]]
    }

    fn apply_after_b(&self, t: f64, x: &[f64]) -> Vec<f64> {
        vec![self.constants.after_b_envelope(t) * x[0]]
    }

    fn norm_y(&self, y: &[f64]) -> f64 {
        y[0].abs()
    }

    fn norm_x(&self, x: &[f64]) -> f64 {
        x[0].abs()
    }

    fn same_spaces(&self) -> bool {
        false
    }

    fn is_consistent(&self) -> bool {
        false
    }
}

/// Norm used on radial fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// `‖·‖_{L^p}`, `p ∈ [1, ∞]`.
    Lp(f64),
    /// `max(‖·‖_{L¹}, ‖·‖_{L^∞})`, the norm of `L¹ ∩ L^∞`.
    L1Linf,
}

impl NormKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NormKind::Lp(p) if !(p >= 1.0) => {
                Err(invalid(format!("L^p exponent must be at least 1, got {p}")))
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, grid: &RadialGrid, values: &[f64]) -> f64 {
        match *self {
            NormKind::Lp(p) => lp_unchecked(grid.weights(), values, p),
            NormKind::L1Linf => lp_unchecked(grid.weights(), values, 1.0).max(lp_unchecked(
                grid.weights(),
                values,
                f64::INFINITY,
            )),
        }
    }
}

/// `e^{-tA}` on radial fields of ℍ³ with `B = I`, `X = Y`.
///
/// Declared constants are `σ = β = 2`, `α = 1`, `θ = 0`: the heat semigroup
/// is sub-Markovian, so every `L^p` norm contracts by `e^{-(d-1)t}`. Fields
/// must vanish at the cutoff, where the propagator imposes a Dirichlet
/// condition.
#[derive(Clone, Debug)]
pub struct HyperbolicSemigroup {
    prop: SpectralPropagator,
    norm: NormKind,
    constants: SemigroupConstants,
}

impl HyperbolicSemigroup {
    pub fn new(grid: Arc<RadialGrid>, norm: NormKind) -> Result<Self> {
        norm.validate()?;
        let prop = SpectralPropagator::new(grid)?;
        let d = 3.0;
        let constants = SemigroupConstants::new(d - 1.0, d - 1.0, 1.0, 0.0)?;
        Ok(Self {
            prop,
            norm,
            constants,
        })
    }

    /// Uniform panels of width `panel_width` on `[0, rho_max]`.
    pub fn with_grid(rho_max: f64, panel_width: f64, norm: NormKind) -> Result<Self> {
        let grid = RadialGrid::with_panel_width(HyperbolicModel::new(3)?, rho_max, panel_width)?;
        Self::new(Arc::new(grid), norm)
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        self.prop.grid()
    }

    pub fn propagator(&self) -> &SpectralPropagator {
        &self.prop
    }

    pub fn norm_kind(&self) -> NormKind {
        self.norm
    }

    /// Samples `f` at the grid nodes.
    pub fn sample<F: Fn(f64) -> f64>(&self, f: F) -> Vec<f64> {
        self.grid().nodes().iter().map(|&r| f(r)).collect()
    }
}

impl DispersiveSemigroup for HyperbolicSemigroup {
    fn name(&self) -> &str {
        "hyperbolic"
    }

    fn constants(&self) -> SemigroupConstants {
        self.constants
    }

    fn dim(&self) -> usize {
        self.grid().len()
    }

    fn apply(&self, t: f64, y: &[f64]) -> Vec<f64> {
        self.prop.apply(t, y)
    }

    fn apply_after_b(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.prop.apply(t, x)
    }

    fn norm_y(&self, y: &[f64]) -> f64 {
        self.norm.eval(self.grid(), y)
    }

    fn norm_x(&self, x: &[f64]) -> f64 {
        self.norm.eval(self.grid(), x)
    }

    fn same_spaces(&self) -> bool {
        true
    }

    fn validate_state(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim() {
            return Err(invalid(format!(
                "hyperbolic: state has length {}, expected {}",
                y.len(),
                self.dim()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("hyperbolic: state has non-finite entries"));
        }
        check_cutoff_values(self.grid(), y)
    }

    /// Two symmetrised Gaussian shells with random amplitudes, radii and
    /// widths; symmetrisation keeps the profile smooth at the origin.
    fn random_state(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let bumps: Vec<(f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.5..1.2),
                )
            })
            .collect();
        self.sample(|r| bumps.iter().map(|&(a, c, w)| a * shell(r, c, w)).sum())
    }

    fn radial_nodes(&self) -> Option<&[f64]> {
        Some(self.grid().nodes())
    }

    fn prepare(&self, sources: Vec<Vec<f64>>) -> SourceBatch {
        let encoded = self.prop.encode_many(&sources);
        SourceBatch {
            raw: sources,
            encoded: Some(encoded),
        }
    }

    fn accumulate_after_b(&self, batch: &SourceBatch, terms: &[Combination<'_>]) -> Vec<f64> {
        let Some(enc) = &batch.encoded else {
            let batch = self.prepare(batch.raw.clone());
            return self.accumulate_after_b(&batch, terms);
        };
        let rates = self.prop.rates();
        let mut acc = vec![0.0; rates.len()];
        let mut mix = vec![0.0; rates.len()];
        for term in terms {
            mix.iter_mut().for_each(|m| *m = 0.0);
            for &(i, c) in term.sources {
                if c != 0.0 {
                    for (m, e) in mix.iter_mut().zip(&enc[i]) {
                        *m += c * e;
                    }
                }
            }
            for ((a, m), &lam) in acc.iter_mut().zip(&mix).zip(rates) {
                *a += (-lam * term.time).exp() * m;
            }
        }
        self.prop.decode(&acc)
    }
}

/// `e^{-(ρ-c)²/2w²} + e^{-(ρ+c)²/2w²}`, an even (hence smooth radial) bump.
pub fn shell(rho: f64, c: f64, w: f64) -> f64 {
    let s = 2.0 * w * w;
    (-(rho - c).powi(2) / s).exp() + (-(rho + c).powi(2) / s).exp()
}

/// `γ_{p,q} = (δ/2)[(1/p − 1/q) + (8/q)(1 − 1/p)]`, with `1/∞ = 0`.
pub fn gamma_pq(p: f64, q: f64, d: usize, delta: f64) -> Result<f64> {
    if d < 2 {
        return Err(invalid(format!("dimension must be at least 2, got {d}")));
    }
    if !(p >= 1.0) || p > q {
        return Err(invalid(format!("need 1 ≤ p ≤ q ≤ ∞, got p = {p}, q = {q}")));
    }
    if !(delta > 0.0) {
        return Err(invalid(format!("δ must be positive, got {delta}")));
    }
    let ip = 1.0 / p;
    let iq = 1.0 / q;
    Ok(0.5 * delta * ((ip - iq) + 8.0 * iq * (1.0 - ip)))
}

/// `h_d(t) = C max(t^{-d/2}, 1)`.
pub fn dispersion_h(t: f64, c: f64, d: usize) -> Result<f64> {
    if !(t > 0.0) {
        return Err(invalid(format!("h_d needs t > 0, got {t}")));
    }
    if !(c > 0.0) {
        return Err(invalid(format!("h_d needs C > 0, got {c}")));
    }
    Ok(c * t.powf(-(d as f64) / 2.0).max(1.0))
}

/// `‖e^{-tA}e^{-sA}u − e^{-(t+s)A}u‖_Y / ‖e^{-(t+s)A}u‖_Y`.
pub fn semigroup_law_defect(s: &dyn DispersiveSemigroup, u: &[f64], t: f64, t2: f64) -> f64 {
    let lhs = s.apply(t2, &s.apply(t, u));
    let rhs = s.apply(t + t2, u);
    let d: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    s.norm_y(&d) / s.norm_y(&rhs)
}

/// Outcome of [`verify_contract`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractReport {
    pub instance: String,
    pub trials: usize,
    pub violations: usize,
    /// `min (1 − measured/bound)` for the `e^{-tA}` estimate.
    pub min_slack_semigroup: f64,
    /// `min (1 − measured/bound)` for the `e^{-tA}B` estimate.
    pub min_slack_after_b: f64,
    /// `max ‖e^{-tA}e^{-sA}u − e^{-(t+s)A}u‖_Y / ‖u‖_Y`, when defined.
    pub semigroup_law_defect: Option<f64>,
    pub identity_defect: f64,
    pub pass: bool,
}

/// Relative tolerance for contract violations.
pub const CONTRACT_TOLERANCE: f64 = 1e-10;

/// Checks both decay estimates on random states and times in `time_range`.
pub fn verify_contract(
    s: &dyn DispersiveSemigroup,
    trials: usize,
    time_range: (f64, f64),
    seed: u64,
) -> Result<ContractReport> {
    if trials == 0 {
        return Err(invalid("contract verification needs at least one trial"));
    }
    let (t0, t1) = time_range;
    if !(t0 > 0.0 && t1 > t0 && t1.is_finite()) {
        return Err(invalid(format!(
            "time range must satisfy 0 < t0 < t1, got [{t0}, {t1}]"
        )));
    }
    let c = s.constants();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut slack_a = f64::INFINITY;
    let mut slack_b = f64::INFINITY;
    let mut law = 0.0f64;
    let mut ident = 0.0f64;
    for _ in 0..trials {
        let t = rng.gen_range(t0..t1);
        let u = s.random_state(&mut rng);
        let x = s.random_state(&mut rng);
        let nu = s.norm_y(&u);
        let nx = s.norm_x(&x);

        let bound_a = (-c.sigma * t).exp() * nu;
        let meas_a = s.norm_y(&s.apply(t, &u));
        if meas_a > bound_a * (1.0 + CONTRACT_TOLERANCE) {
            violations += 1;
        }
        if bound_a > 0.0 {
            slack_a = slack_a.min(1.0 - meas_a / bound_a);
        }

        let bound_b = c.after_b_envelope(t) * nx;
        let meas_b = s.norm_y(&s.apply_after_b(t, &x));
        if meas_b > bound_b * (1.0 + CONTRACT_TOLERANCE) {
            violations += 1;
        }
        if bound_b > 0.0 {
            slack_b = slack_b.min(1.0 - meas_b / bound_b);
        }

        let id = s.apply(0.0, &u);
        let diff: Vec<f64> = id.iter().zip(&u).map(|(a, b)| a - b).collect();
        if nu > 0.0 {
            ident = ident.max(s.norm_y(&diff) / nu);
        }

        if s.is_consistent() && nu > 0.0 {
            let t2 = rng.gen_range(t0..t1);
            let lhs = s.apply(t2, &s.apply(t, &u));
            let rhs = s.apply(t + t2, &u);
            let d: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
            law = law.max(s.norm_y(&d) / nu);
        }
    }
    Ok(ContractReport {
        instance: s.name().to_string(),
        trials,
        violations,
        min_slack_semigroup: slack_a,
        min_slack_after_b: slack_b,
        semigroup_law_defect: s.is_consistent().then_some(law),
        identity_defect: ident,
        pass: violations == 0 && ident == 0.0,
    })
}

/// JSON description of an instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceConfig {
    Matrix {
        eigenvalues: Vec<f64>,
        /// Row-major `B`; identity when absent.
        #[serde(default)]
        b: Option<Vec<Vec<f64>>>,
        /// Seed of the random orthogonal eigenbasis; diagonal when absent.
        #[serde(default)]
        basis_seed: Option<u64>,
        #[serde(default)]
        constants: Option<SemigroupConstants>,
    },
    SingularToy {
        constants: SemigroupConstants,
    },
    Hyperbolic {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_rho_max")]
        rho_max: f64,
        #[serde(default = "default_panel_width")]
        panel_width: f64,
        #[serde(default = "default_norm")]
        norm: NormKind,
    },
}

fn default_dim() -> usize {
    3
}
fn default_rho_max() -> f64 {
    24.0
}
fn default_panel_width() -> f64 {
    0.15
}
fn default_norm() -> NormKind {
    NormKind::L1Linf
}

impl InstanceConfig {
    pub fn build(&self) -> Result<Arc<dyn DispersiveSemigroup>> {
        Ok(match self {
            InstanceConfig::Matrix {
                eigenvalues,
                b,
                basis_seed,
                constants,
            } => {
                let n = eigenvalues.len();
                let b = match b {
                    Some(rows) => {
                        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                            return Err(Error::Config(format!("matrix B must be {n}×{n}")));
                        }
                        Some(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
                    }
                    None => None,
                };
                let m = match basis_seed {
                    Some(seed) => MatrixSemigroup::rotated(eigenvalues.clone(), *seed, b)?,
                    None => MatrixSemigroup::new(eigenvalues.clone(), DMatrix::identity(n, n), b)?,
                };
                let m = match constants {
                    Some(c) => m.with_declared(*c)?,
                    None => m,
                };
                Arc::new(m)
            }
            InstanceConfig::SingularToy { constants } => {
                Arc::new(SingularToySemigroup::new(*constants)?)
            }
            InstanceConfig::Hyperbolic {
                dim,
                rho_max,
                panel_width,
                norm,
            } => {
                if *dim != 3 {
                    return Err(Error::Config(format!(
                        "the hyperbolic instance supports d = 3 only, got {dim}"
                    )));
                }
                Arc::new(HyperbolicSemigroup::with_grid(
                    *rho_max,
                    *panel_width,
                    *norm,
                )?)
            }
        })
    }
}
