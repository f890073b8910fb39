//! Almost periodic (AP), vanishing (C₀) and asymptotically almost periodic
//! (AAP) forcing terms.
//!
//! Forcing is separable: each AP mode is `cos(λt)·C + sin(λt)·S` with fixed
//! states `C, S`, and each vanishing part is a scalar envelope times a fixed
//! profile. Norms of `f(t)` are therefore computable at any `t`, and a
//! forcing term can be handed to a solver as a short list of fixed sources
//! with time-dependent scalar coefficients.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::mild::Trajectory;
use crate::{invalid, Error, Result};

/// Two frequencies closer than this are the same mode.
pub const FREQUENCY_RESOLUTION: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApMode {
    pub freq: f64,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl ApMode {
    /// `(a cos λt + b sin λt)·profile`.
    pub fn separable(freq: f64, a: f64, b: f64, profile: &[f64]) -> Self {
        Self {
            freq,
            cos: profile.iter().map(|p| a * p).collect(),
            sin: profile.iter().map(|p| b * p).collect(),
        }
    }

    /// `‖C‖ + ‖S‖`, an upper bound for the mode's sup norm.
    pub fn weight(&self, norm: &dyn Fn(&[f64]) -> f64) -> f64 {
        norm(&self.cos) + norm(&self.sin)
    }
}

/// `h(t) = Σ_j cos(λ_j t) C_j + sin(λ_j t) S_j` with distinct `λ_j ≥ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct APPart {
    dim: usize,
    modes: Vec<ApMode>,
}

impl APPart {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            modes: Vec::new(),
        }
    }

    /// Modes sharing a frequency are summed; modes are kept sorted by frequency.
    pub fn new(dim: usize, modes: Vec<ApMode>) -> Result<Self> {
        let mut part = Self::empty(dim);
        for m in modes {
            part.push(m)?;
        }
        Ok(part)
    }

    fn push(&mut self, m: ApMode) -> Result<()> {
        if !(m.freq >= 0.0) || !m.freq.is_finite() {
            return Err(invalid(format!(
                "AP frequencies must be finite and non-negative, got {}",
                m.freq
            )));
        }
        if m.cos.len() != self.dim || m.sin.len() != self.dim {
            return Err(invalid(format!(
                "AP mode has state length {}, expected {}",
                m.cos.len(),
                self.dim
            )));
        }
        if m.cos.iter().chain(&m.sin).any(|v| !v.is_finite()) {
            return Err(invalid("AP mode has non-finite entries"));
        }
        let mut m = m;
        if m.freq == 0.0 {
            m.sin.iter_mut().for_each(|v| *v = 0.0);
        }
        match self
            .modes
            .iter_mut()
            .find(|e| (e.freq - m.freq).abs() <= FREQUENCY_RESOLUTION)
        {
            Some(e) => {
                e.cos.iter_mut().zip(&m.cos).for_each(|(a, b)| *a += b);
                e.sin.iter_mut().zip(&m.sin).for_each(|(a, b)| *a += b);
            }
            None => {
                self.modes.push(m);
                self.modes.sort_by(|a, b| a.freq.total_cmp(&b.freq));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> &[ApMode] {
        &self.modes
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.freq).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.add_into(t, 1.0, &mut out);
        out
    }

    fn add_into(&self, t: f64, scale: f64, out: &mut [f64]) {
        for m in &self.modes {
            let (s, c) = (m.freq * t).sin_cos();
            for ((o, a), b) in out.iter_mut().zip(&m.cos).zip(&m.sin) {
                *o += scale * (c * a + s * b);
            }
        }
    }

    /// `Σ_j (‖C_j‖ + ‖S_j‖) ≥ sup_t ‖h(t)‖`.
    pub fn norm_bound(&self, norm: &dyn Fn(&[f64]) -> f64) -> f64 {
        self.modes.iter().map(|m| m.weight(norm)).sum()
    }

    /// Estimate of `sup_t ‖h(t)‖` over `[0, window]`: dense sampling followed
    /// by golden-section refinement of the largest samples.
    pub fn sup_norm(&self, norm: &dyn Fn(&[f64]) -> f64, window: f64) -> f64 {
        if self.modes.iter().all(|m| m.freq == 0.0) {
            return norm(&self.eval(0.0));
        }
        let fmax = self.modes.iter().map(|m| m.freq).fold(0.0, f64::max);
        sampled_sup(|t| norm(&self.eval(t)), 0.0, window, PI / (8.0 * fmax))
    }

    pub fn scaled(&self, c: f64) -> Self {
        let modes = self
            .modes
            .iter()
            .map(|m| ApMode {
                freq: m.freq,
                cos: m.cos.iter().map(|v| c * v).collect(),
                sin: m.sin.iter().map(|v| c * v).collect(),
            })
            .collect();
        Self {
            dim: self.dim,
            modes,
        }
    }

    /// Sum of two AP parts; modes with equal frequency merge.
    pub fn add(&self, other: &APPart) -> Result<Self> {
        let mut out = self.clone();
        if other.dim != self.dim {
            return Err(invalid("cannot add AP parts of different state length"));
        }
        for m in &other.modes {
            out.push(m.clone())?;
        }
        Ok(out)
    }

    /// `t`-independent bound `B(T) = Σ_j 2|sin(λ_j T/2)| (‖C_j‖ + ‖S_j‖)` on
    /// `sup_t ‖h(t + T) − h(t)‖`.
    pub fn translation_bound(&self, weights: &[f64], big_t: f64) -> f64 {
        self.modes
            .iter()
            .zip(weights)
            .map(|(m, w)| 2.0 * (0.5 * m.freq * big_t).sin().abs() * w)
            .sum()
    }
}

/// `max f` over `[a, b]` sampled at spacing `h`, each local maximum polished
/// by golden-section search.
pub fn sampled_sup<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, h: f64) -> f64 {
    let n = ((b - a) / h).ceil().max(1.0) as usize;
    let xs: Vec<f64> = (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let mut best = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for i in 1..n {
        if ys[i] >= ys[i - 1] && ys[i] >= ys[i + 1] && ys[i] >= 0.5 * best {
            let (_, y) = golden_max(&f, xs[i - 1], xs[i + 1]);
            best = best.max(y);
        }
    }
    best
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;

fn golden_max<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64) -> (f64, f64) {
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if (b - a).abs() <= 1e-13 * (1.0 + a.abs()) {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
    }
    if fc > fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

fn golden_min<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let (x, y) = golden_max(&|x| -f(x), a, b);
    (x, -y)
}

/// Envelope of a vanishing part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Envelope {
    /// `c e^{-μt}`, `μ > 0`.
    Exponential { c: f64, mu: f64 },
    /// `c (1 + t)^{-m}`, `m ≥ 1`.
    Rational { c: f64, m: f64 },
}

impl Envelope {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Envelope::Exponential { c, mu } if c.is_finite() && mu > 0.0 && mu.is_finite() => {
                Ok(())
            }
            Envelope::Rational { c, m } if c.is_finite() && m >= 1.0 && m.is_finite() => Ok(()),
            e => Err(invalid(format!("invalid envelope {e:?}"))),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Envelope::Exponential { c, mu } => c * (-mu * t).exp(),
            Envelope::Rational { c, m } => c * (1.0 + t).powf(-m),
        }
    }

    /// Smallest `T` with `|envelope(t)| < tol` for all `t ≥ T`.
    pub fn horizon(&self, tol: f64) -> f64 {
        match *self {
            Envelope::Exponential { c, mu } => ((c.abs() / tol).ln() / mu).max(0.0),
            Envelope::Rational { c, m } => ((c.abs() / tol).powf(1.0 / m) - 1.0).max(0.0),
        }
    }
}

/// `φ(t) = envelope(t)·profile`.
#[derive(Clone, Debug, PartialEq)]
pub struct C0Part {
    pub envelope: Envelope,
    pub profile: Vec<f64>,
}

impl C0Part {
    pub fn new(envelope: Envelope, profile: Vec<f64>) -> Result<Self> {
        envelope.validate()?;
        if profile.iter().any(|v| !v.is_finite()) {
            return Err(invalid("C₀ profile has non-finite entries"));
        }
        Ok(Self { envelope, profile })
    }
}

/// `f = h + φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AAPFunction {
    pub ap: APPart,
    pub c0: Vec<C0Part>,
}

/// Window over which AP sup norms are sampled.
pub const AP_NORM_WINDOW: f64 = 200.0;

impl AAPFunction {
    pub fn new(ap: APPart, c0: Vec<C0Part>) -> Result<Self> {
        if c0.iter().any(|p| p.profile.len() != ap.dim()) {
            return Err(invalid(
                "C₀ profile length differs from the AP state length",
            ));
        }
        Ok(Self { ap, c0 })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            ap: APPart::empty(dim),
            c0: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.ap.dim()
    }

    pub fn is_zero(&self) -> bool {
        self.ap.is_empty() && self.c0.is_empty()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = self.ap.eval(t);
        for p in &self.c0 {
            let e = p.envelope.eval(t);
            out.iter_mut()
                .zip(&p.profile)
                .for_each(|(o, v)| *o += e * v);
        }
        out
    }

    pub fn ap_only(&self) -> Self {
        Self {
            ap: self.ap.clone(),
            c0: Vec::new(),
        }
    }

    pub fn c0_only(&self) -> Self {
        Self {
            ap: APPart::empty(self.dim()),
            c0: self.c0.clone(),
        }
    }

    pub fn add(&self, other: &AAPFunction) -> Result<Self> {
        let ap = self.ap.add(&other.ap)?;
        let mut c0 = self.c0.clone();
        c0.extend(other.c0.iter().cloned());
        Self::new(ap, c0)
    }

    pub fn scaled(&self, c: f64) -> Self {
        let c0 = self
            .c0
            .iter()
            .map(|p| C0Part {
                envelope: p.envelope,
                profile: p.profile.iter().map(|v| c * v).collect(),
            })
            .collect();
        Self {
            ap: self.ap.scaled(c),
            c0,
        }
    }

    /// `sup_{t ≥ 0} ‖φ(t)‖`.
    pub fn c0_norm(&self, norm: &dyn Fn(&[f64]) -> f64) -> f64 {
        match self.c0.as_slice() {
            [] => 0.0,
            [p] => p.envelope.eval(0.0).abs() * norm(&p.profile),
            parts => {
                let horizon = parts
                    .iter()
                    .map(|p| p.envelope.horizon(1e-14))
                    .fold(1.0, f64::max);
                let phi = |t: f64| {
                    let mut out = vec![0.0; self.dim()];
                    for p in parts {
                        let e = p.envelope.eval(t);
                        out.iter_mut()
                            .zip(&p.profile)
                            .for_each(|(o, v)| *o += e * v);
                    }
                    norm(&out)
                };
                sampled_sup(phi, 0.0, horizon, horizon / 4000.0)
            }
        }
    }

    /// `sup_{τ ≥ t} ‖φ(τ)‖`, bounded through the monotone envelopes.
    pub fn c0_tail_bound(&self, t: f64, norm: &dyn Fn(&[f64]) -> f64) -> f64 {
        self.c0
            .iter()
            .map(|p| p.envelope.eval(t).abs() * norm(&p.profile))
            .sum()
    }

    /// `‖f‖_AAP = ‖h‖_AP + ‖φ‖_C₀`, with the AP sup sampled over [`AP_NORM_WINDOW`].
    pub fn norm(&self, norm: &dyn Fn(&[f64]) -> f64) -> f64 {
        self.ap.sup_norm(norm, AP_NORM_WINDOW) + self.c0_norm(norm)
    }

    /// Upper bound `Σ(‖C_j‖ + ‖S_j‖) + Σ|envelope(0)|‖profile‖`.
    pub fn norm_bound(&self, norm: &dyn Fn(&[f64]) -> f64) -> f64 {
        self.ap.norm_bound(norm) + self.c0_tail_bound(0.0, norm)
    }

    /// The fixed states of the separable representation, in the order used
    /// by [`AAPFunction::coefficients`].
    pub fn sources(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(2 * self.ap.modes.len() + self.c0.len());
        for m in &self.ap.modes {
            out.push(m.cos.clone());
            out.push(m.sin.clone());
        }
        for p in &self.c0 {
            out.push(p.profile.clone());
        }
        out
    }

    /// Scalar coefficients of [`AAPFunction::sources`] at time `t`, scaled by `w`.
    pub fn coefficients(&self, t: f64, w: f64, out: &mut Vec<(usize, f64)>) {
        let mut idx = 0;
        for m in &self.ap.modes {
            let (s, c) = (m.freq * t).sin_cos();
            out.push((idx, w * c));
            out.push((idx + 1, w * s));
            idx += 2;
        }
        for p in &self.c0 {
            out.push((idx, w * p.envelope.eval(t)));
            idx += 1;
        }
    }
}

/// Result of [`find_almost_period`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlmostPeriod {
    pub period: f64,
    /// Sampled `sup_{t∈[0,Tmax]} ‖h(t+T) − h(t)‖`.
    pub defect: f64,
    /// Rigorous bound `B(T)` on the defect over all `t`.
    pub bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlmostPeriodSearch {
    /// Window `[0, Tmax]` over which the defect is measured.
    pub t_max: f64,
}

impl Default for AlmostPeriodSearch {
    fn default() -> Self {
        Self { t_max: 200.0 }
    }
}

/// Searches `[a, a + l]` for an ε-almost period of `h`.
///
/// The bound `B(T)` is scanned at a step fine enough that no excursion
/// below `ε/2` is missed (its Lipschitz constant is `Σ λ_j w_j`); local
/// minima under `ε` are polished by golden section, and the first candidate
/// whose sampled defect on `[0, Tmax]` is below `ε` is returned. `None` means
/// no candidate passed at this resolution, not that none exists.
pub fn find_almost_period(
    h: &APPart,
    eps: f64,
    interval: (f64, f64),
    norm: &dyn Fn(&[f64]) -> f64,
    search: &AlmostPeriodSearch,
) -> Result<Option<AlmostPeriod>> {
    let (a, l) = interval;
    if !(eps > 0.0) {
        return Err(invalid(format!("ε must be positive, got {eps}")));
    }
    if !(l > 0.0) || !l.is_finite() || !a.is_finite() {
        return Err(invalid(format!(
            "degenerate search interval [{a}, {a} + {l}]"
        )));
    }
    let weights: Vec<f64> = h.modes.iter().map(|m| m.weight(norm)).collect();
    let lip: f64 = h.modes.iter().zip(&weights).map(|(m, w)| m.freq * w).sum();
    if lip == 0.0 {
        return Ok(Some(AlmostPeriod {
            period: a,
            defect: 0.0,
            bound: 0.0,
        }));
    }
    let bound = |t: f64| h.translation_bound(&weights, t);
    let step = eps / (2.0 * lip);
    let n = (l / step).ceil() as usize;
    let xs = |i: usize| a + l * i as f64 / n as f64;
    let mut prev = (bound(xs(0)), bound(xs(1).min(a + l)));
    let mut candidates = Vec::new();
    if prev.0 < eps && prev.0 <= prev.1 {
        candidates.push(golden_min(&bound, xs(0), xs(1)));
    }
    for i in 1..n {
        let next = bound(xs(i + 1));
        let cur = prev.1;
        if cur < eps && cur <= prev.0 && cur <= next {
            candidates.push(golden_min(&bound, xs(i - 1), xs(i + 1)));
        }
        prev = (cur, next);
    }
    if prev.1 < eps && prev.1 <= prev.0 {
        candidates.push(golden_min(&bound, xs(n - 1), xs(n)));
    }
    for (t, b) in candidates {
        if b >= eps {
            continue;
        }
        let defect = translation_defect(h, t, norm, search.t_max);
        if defect < eps {
            return Ok(Some(AlmostPeriod {
                period: t,
                defect,
                bound: b,
            }));
        }
    }
    Ok(None)
}

/// Sampled `sup_{t∈[0,Tmax]} ‖h(t+T) − h(t)‖`.
pub fn translation_defect(h: &APPart, big_t: f64, norm: &dyn Fn(&[f64]) -> f64, t_max: f64) -> f64 {
    if h.modes.iter().all(|m| m.freq == 0.0) {
        return 0.0;
    }
    let fmax = h.modes.iter().map(|m| m.freq).fold(0.0, f64::max);
    let diff = |t: f64| {
        let mut d = h.eval(t + big_t);
        h.add_into(t, -1.0, &mut d);
        norm(&d)
    };
    sampled_sup(diff, 0.0, t_max, PI / (8.0 * fmax))
}

/// Condition number above which [`fit_ap_residual`] refuses to fit.
pub const MAX_FIT_CONDITION: f64 = 1e10;

/// Least-squares fit of `Σ_j cos(λ_j t) C_j + sin(λ_j t) S_j` to the samples
/// on `[tail_start, T_end]`; returns the fit and the residual trajectory over
/// all sample times.
pub fn fit_ap_residual(
    samples: &Trajectory,
    frequencies: &[f64],
    tail_start: f64,
) -> Result<(APPart, Trajectory)> {
    let dim = samples.dim();
    let t_end = *samples
        .times()
        .last()
        .ok_or_else(|| invalid("empty trajectory"))?;
    if !(t_end > tail_start) {
        return Err(invalid(format!(
            "trajectory ends at {t_end}, before the fit window starts at {tail_start}"
        )));
    }
    if frequencies.is_empty() {
        return Ok((APPart::empty(dim), samples.clone()));
    }
    if frequencies.iter().any(|&f| !(f >= 0.0) || !f.is_finite()) {
        return Err(invalid("fit frequencies must be finite and non-negative"));
    }
    // One column per cosine, one per sine of a nonzero frequency.
    let mut columns: Vec<(f64, bool)> = Vec::new();
    for &f in frequencies {
        columns.push((f, true));
        if f != 0.0 {
            columns.push((f, false));
        }
    }
    let rows: Vec<usize> = (0..samples.len())
        .filter(|&i| samples.times()[i] >= tail_start)
        .collect();
    if rows.len() < columns.len() {
        return Err(invalid(format!(
            "{} samples cannot determine {} amplitudes",
            rows.len(),
            columns.len()
        )));
    }
    let basis =
        |t: f64, (f, is_cos): (f64, bool)| if is_cos { (f * t).cos() } else { (f * t).sin() };
    let design = DMatrix::from_fn(rows.len(), columns.len(), |i, j| {
        basis(samples.times()[rows[i]], columns[j])
    });
    let rhs = DMatrix::from_fn(rows.len(), dim, |i, k| samples.states()[rows[i]][k]);
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !(condition <= MAX_FIT_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    let coeffs = svd.solve(&rhs, 0.0).map_err(|e| invalid(e.to_string()))?;
    let mut modes = Vec::new();
    let mut j = 0;
    for &f in frequencies {
        let cos: Vec<f64> = (0..dim).map(|k| coeffs[(j, k)]).collect();
        j += 1;
        let sin: Vec<f64> = if f != 0.0 {
            let s = (0..dim).map(|k| coeffs[(j, k)]).collect();
            j += 1;
            s
        } else {
            vec![0.0; dim]
        };
        modes.push(ApMode { freq: f, cos, sin });
    }
    let fit = APPart::new(dim, modes)?;
    let residual_states = samples
        .times()
        .iter()
        .zip(samples.states())
        .map(|(&t, s)| {
            let h = fit.eval(t);
            s.iter().zip(&h).map(|(a, b)| a - b).collect()
        })
        .collect();
    let residual = Trajectory::new(
        samples.times().to_vec(),
        residual_states,
        samples.meta().clone(),
    )?;
    Ok((fit, residual))
}

/// Spatial profile in a configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    /// The same value in every component.
    Constant(f64),
    /// Explicit component values.
    Values(Vec<f64>),
    /// A radial shape evaluated at the grid nodes.
    Shape(Shape),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// `amplitude·exp(-ρ²/2w²)`.
    Gaussian { amplitude: f64, width: f64 },
    /// `amplitude·(exp(-(ρ-c)²/2w²) + exp(-(ρ+c)²/2w²))`.
    Shell {
        amplitude: f64,
        center: f64,
        width: f64,
    },
}

impl ProfileSpec {
    /// `nodes` are the radial grid nodes when the state is a radial field.
    pub fn resolve(&self, dim: usize, nodes: Option<&[f64]>) -> Result<Vec<f64>> {
        match self {
            ProfileSpec::Constant(c) => Ok(vec![*c; dim]),
            ProfileSpec::Values(v) if v.len() == dim => Ok(v.clone()),
            ProfileSpec::Values(v) => Err(Error::Config(format!(
                "profile has {} values, expected {dim}",
                v.len()
            ))),
            ProfileSpec::Shape(shape) => {
                let nodes = nodes
                    .ok_or_else(|| Error::Config("radial shapes need a radial instance".into()))?;
                Ok(nodes.iter().map(|&r| shape.eval(r)).collect())
            }
        }
    }
}

impl Shape {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            Shape::Gaussian { amplitude, width } => {
                amplitude * (-r * r / (2.0 * width * width)).exp()
            }
            Shape::Shell {
                amplitude,
                center,
                width,
            } => amplitude * crate::semigroup::shell(r, center, width),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub freq: f64,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub b: f64,
    pub profile: ProfileSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct C0Spec {
    #[serde(flatten)]
    pub envelope: Envelope,
    pub profile: ProfileSpec,
}

/// JSON form `{modes: [{freq, a, b, profile}], c0: {kind, c, mu|m, profile}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingSpec {
    #[serde(default)]
    pub modes: Vec<ModeSpec>,
    #[serde(default)]
    pub c0: Option<C0Spec>,
}

impl ForcingSpec {
    pub fn build(&self, dim: usize, nodes: Option<&[f64]>) -> Result<AAPFunction> {
        let modes = self
            .modes
            .iter()
            .map(|m| {
                Ok(ApMode::separable(
                    m.freq,
                    m.a,
                    m.b,
                    &m.profile.resolve(dim, nodes)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let ap = APPart::new(dim, modes)?;
        let c0 = match &self.c0 {
            Some(spec) => vec![C0Part::new(
                spec.envelope,
                spec.profile.resolve(dim, nodes)?,
            )?],
            None => Vec::new(),
        };
        AAPFunction::new(ap, c0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mild::TrajectoryMeta;

    fn abs(v: &[f64]) -> f64 {
        v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    fn scalar(modes: &[(f64, f64, f64)], c0: Option<Envelope>) -> AAPFunction {
        let ap = APPart::new(
            1,
            modes
                .iter()
                .map(|&(f, a, b)| ApMode::separable(f, a, b, &[1.0]))
                .collect(),
        )
        .unwrap();
        let c0 = c0
            .map(|e| vec![C0Part::new(e, vec![1.0]).unwrap()])
            .unwrap_or_default();
        AAPFunction::new(ap, c0).unwrap()
    }

    #[test]
    fn eval_examples() {
        let f = scalar(
            &[(1.0, 0.0, 1.0)],
            Some(Envelope::Exponential { c: 1.0, mu: 1.0 }),
        );
        assert_eq!(f.eval(0.0), vec![1.0]);
        let g = scalar(&[(1.0, 0.0, 1.0), (2f64.sqrt(), 0.3, 0.0)], None);
        assert_eq!(g.eval(1.3), g.ap.eval(1.3));
        let c = scalar(&[(1.0, 1.0, 0.0)], None);
        assert!((c.eval(PI)[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn equal_frequencies_merge() {
        let ap = APPart::new(
            1,
            vec![
                ApMode::separable(1.0, 1.0, 0.0, &[1.0]),
                ApMode::separable(1.0, 0.5, 2.0, &[1.0]),
            ],
        )
        .unwrap();
        assert_eq!(ap.modes().len(), 1);
        assert_eq!(ap.modes()[0].cos, vec![1.5]);
        assert!(APPart::new(1, vec![ApMode::separable(-1.0, 1.0, 0.0, &[1.0])]).is_err());
    }

    #[test]
    fn sup_norm_below_bound() {
        let f = scalar(&[(1.0, 0.3, -0.4), (2f64.sqrt(), 0.2, 0.1)], None);
        let s = f.ap.sup_norm(&abs, 200.0);
        assert!(s <= f.ap.norm_bound(&abs));
        assert!(s > 0.5);
    }

    #[test]
    fn exact_period_of_sine() {
        let h = scalar(&[(1.0, 0.0, 1.0)], None).ap;
        let found = find_almost_period(&h, 1e-6, (6.0, 1.0), &abs, &AlmostPeriodSearch::default())
            .unwrap()
            .unwrap();
        assert!((found.period - 2.0 * PI).abs() < 1e-6);
        assert!(found.defect < 1e-6);
    }

    #[test]
    fn two_frequency_almost_periods() {
        let h = scalar(&[(1.0, 0.0, 1.0), (2f64.sqrt(), 0.0, 1.0)], None).ap;
        let search = AlmostPeriodSearch::default();
        let near_zero = find_almost_period(&h, 0.01, (0.0, 200.0), &abs, &search)
            .unwrap()
            .unwrap();
        assert!(near_zero.defect < 0.01 && near_zero.period < 0.01);
        let far = find_almost_period(&h, 0.01, (1000.0, 100.0), &abs, &search)
            .unwrap()
            .unwrap();
        assert!(far.defect < 0.01);
        assert!((far.period / (2.0 * PI) - 169.0).abs() < 0.01, "{far:?}");
        assert!(find_almost_period(&h, 0.01, (10.0, 100.0), &abs, &search)
            .unwrap()
            .is_none());
    }

    #[test]
    fn constant_has_every_period() {
        let h = scalar(&[(0.0, 2.0, 0.0)], None).ap;
        let found = find_almost_period(&h, 1e-9, (3.0, 1.0), &abs, &AlmostPeriodSearch::default())
            .unwrap()
            .unwrap();
        assert_eq!(found.defect, 0.0);
        assert_eq!(found.period, 3.0);
    }

    #[test]
    fn degenerate_interval_rejected() {
        let h = scalar(&[(1.0, 1.0, 0.0)], None).ap;
        assert!(
            find_almost_period(&h, 0.1, (0.0, 0.0), &abs, &AlmostPeriodSearch::default()).is_err()
        );
        assert!(
            find_almost_period(&h, 0.0, (0.0, 1.0), &abs, &AlmostPeriodSearch::default()).is_err()
        );
    }

    fn trajectory(times: Vec<f64>, f: impl Fn(f64) -> Vec<f64>) -> Trajectory {
        let states = times.iter().map(|&t| f(t)).collect();
        Trajectory::new(times, states, TrajectoryMeta::default()).unwrap()
    }

    #[test]
    fn fit_reproduces_trigonometric_polynomial() {
        let times: Vec<f64> = (0..=400).map(|i| 0.1 * i as f64).collect();
        let r2 = 2f64.sqrt();
        let tr = trajectory(times, |t| {
            vec![0.7 * t.cos() - 0.2 * (r2 * t).sin(), 0.1 + 1.5 * t.sin()]
        });
        let (fit, res) = fit_ap_residual(&tr, &[0.0, 1.0, r2], 5.0).unwrap();
        assert_eq!(fit.frequencies(), vec![0.0, 1.0, r2]);
        assert!(res.states().iter().all(|s| abs(s) < 1e-10));
    }

    #[test]
    fn fit_of_sine_plus_decay() {
        let times: Vec<f64> = (0..=400).map(|i| 0.1 * i as f64).collect();
        let tr = trajectory(times, |t| vec![t.sin() + (-t).exp()]);
        let (fit, res) = fit_ap_residual(&tr, &[1.0], 10.0).unwrap();
        assert!((fit.modes()[0].sin[0] - 1.0).abs() < 1e-4);
        let tail = res
            .times()
            .iter()
            .zip(res.states())
            .filter(|(t, _)| **t >= 10.0)
            .map(|(_, s)| s[0].abs());
        assert!(tail.fold(0.0, f64::max) <= (-10f64).exp() + 1e-4);
    }

    #[test]
    fn fit_with_no_frequencies_is_identity() {
        let tr = trajectory(vec![0.0, 1.0, 2.0], |t| vec![t * t]);
        let (fit, res) = fit_ap_residual(&tr, &[], 0.5).unwrap();
        assert!(fit.is_empty());
        assert_eq!(res.states(), tr.states());
    }

    #[test]
    fn fit_rejects_near_duplicate_frequencies() {
        let times: Vec<f64> = (0..=100).map(|i| 0.1 * i as f64).collect();
        let tr = trajectory(times, |t| vec![t.sin()]);
        match fit_ap_residual(&tr, &[1.0, 1.0 + 1e-11], 0.0) {
            Err(Error::IllConditioned { condition }) => assert!(condition > 1e10),
            other => panic!("expected ill-conditioning, got {other:?}"),
        }
    }

    #[test]
    fn envelopes_vanish_monotonically() {
        for e in [
            Envelope::Exponential { c: 2.0, mu: 0.5 },
            Envelope::Rational { c: 3.0, m: 2.0 },
        ] {
            let mut prev = e.eval(0.0);
            for i in 1..200 {
                let v = e.eval(0.25 * i as f64);
                assert!(v <= prev);
                prev = v;
            }
            let h = e.horizon(1e-8);
            assert!(e.eval(h * 1.0001) < 1e-8);
        }
        assert!(Envelope::Exponential { c: 1.0, mu: 0.0 }
            .validate()
            .is_err());
        assert!(Envelope::Rational { c: 1.0, m: 0.5 }.validate().is_err());
    }

    #[test]
    fn forcing_spec_json() {
        let json = r#"{"modes": [{"freq": 1, "b": 1, "profile": 1},
                                  {"freq": 1.4142135623730951, "a": 0.5, "profile": [1, 2]}],
                       "c0": {"kind": "exponential", "c": 1, "mu": 1, "profile": 1}}"#;
        let spec: ForcingSpec = serde_json::from_str(json).unwrap();
        let f = spec.build(2, None).unwrap();
        assert_eq!(f.eval(0.0), vec![1.5, 2.0]);
        let radial = r#"{"modes": [{"freq": 1, "a": 1, "profile": {"shape": "gaussian", "amplitude": 2, "width": 0.5}}]}"#;
        let spec: ForcingSpec = serde_json::from_str(radial).unwrap();
        let f = spec.build(2, Some(&[0.0, 0.5])).unwrap();
        assert!((f.eval(0.0)[1] - 2.0 * (-0.5f64).exp()).abs() < 1e-15);
        assert!(spec.build(2, None).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_aap() -> impl Strategy<Value = AAPFunction> {
            (
                prop::collection::vec(
                    (
                        prop::sample::select(vec![0.5, 1.0, 2f64.sqrt(), 3.0]),
                        -1.0f64..1.0,
                        -1.0f64..1.0,
                    ),
                    0..3,
                ),
                prop::option::of((-1.0f64..1.0, 0.2f64..2.0)),
            )
                .prop_map(|(modes, c0)| {
                    let ap = APPart::new(
                        2,
                        modes
                            .iter()
                            .map(|&(f, a, b)| ApMode::separable(f, a, b, &[1.0, -0.5]))
                            .collect(),
                    )
                    .unwrap();
                    let c0 = c0
                        .map(|(c, mu)| {
                            vec![C0Part::new(Envelope::Exponential { c, mu }, vec![0.3, 1.0])
                                .unwrap()]
                        })
                        .unwrap_or_default();
                    AAPFunction::new(ap, c0).unwrap()
                })
        }

        fn l2(v: &[f64]) -> f64 {
            v.iter().map(|x| x * x).sum::<f64>().sqrt()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn aap_norm_triangle_inequality(f in arb_aap(), g in arb_aap()) {
                let s = f.add(&g).unwrap();
                let lhs = s.norm(&l2);
                let rhs = f.norm(&l2) + g.norm(&l2);
                prop_assert!(lhs <= rhs * (1.0 + 1e-9) + 1e-12, "{lhs} > {rhs}");
            }

            #[test]
            fn returned_almost_periods_meet_eps(a in -1.0f64..1.0, b in -1.0f64..1.0, eps in 0.05f64..0.5, start in 0.0f64..50.0) {
                let h = APPart::new(1, vec![
                    ApMode::separable(1.0, a, 0.0, &[1.0]),
                    ApMode::separable(2f64.sqrt(), 0.0, b, &[1.0]),
                ]).unwrap();
                let search = AlmostPeriodSearch { t_max: 60.0 };
                if let Some(p) = find_almost_period(&h, eps, (start, 40.0), &l2, &search).unwrap() {
                    prop_assert!(p.defect < eps);
                    prop_assert!(p.period >= start && p.period <= start + 40.0);
                }
            }
        }
    }
}
