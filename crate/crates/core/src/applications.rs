//! The two concrete nonlinearities: a Navier–Stokes magnitude surrogate and
//! the power-type semilinear heat nonlinearity.
//!
//! The Navier–Stokes application works at the level of constants (θ, σ, β
//! from the integrability exponent `p`) and runs its dynamics on the scalar
//! singular instance; the Leray projector is not modelled. The heat
//! application runs end to end on radial fields of ℍ³.

use serde::{Deserialize, Serialize};

use crate::aap::AAPFunction;
use crate::fixed_point::Nonlinearity;
use crate::semigroup::{gamma_pq, SemigroupConstants};
use crate::{invalid, Error, Result};

/// `θ(p) = (d/2)(1/p + 1/d)`; lies in `(0, 1)` exactly when `p > d`.
pub fn nse_theta(d: usize, p: f64) -> f64 {
    0.5 * d as f64 * (1.0 / p + 1.0 / d as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NSEParameters {
    pub d: usize,
    pub p: f64,
    /// Constant `δ_d` of the dispersive exponents.
    pub delta: f64,
    /// Surrogate for `α`, absorbing the bound of the projector.
    #[serde(default = "one")]
    pub alpha: f64,
}

fn one() -> f64 {
    1.0
}

impl NSEParameters {
    pub fn new(d: usize, p: f64, delta: f64, alpha: f64) -> Result<Self> {
        let params = Self { d, p, delta, alpha };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(invalid(format!(
                "dimension must be at least 2, got {}",
                self.d
            )));
        }
        if !(self.p > self.d as f64) {
            return Err(invalid(format!(
                "need p > d, got p = {} with d = {}",
                self.p, self.d
            )));
        }
        if !(self.delta > 0.0) || !(self.alpha > 0.0) {
            return Err(invalid("δ and α must be positive"));
        }
        Ok(())
    }

    pub fn theta(&self) -> f64 {
        nse_theta(self.d, self.p)
    }

    /// `σ = d − 1 + γ_{p,p}`.
    pub fn sigma(&self) -> f64 {
        let g = gamma_pq(self.p, self.p, self.d, self.delta).expect("validated parameters");
        (self.d - 1) as f64 + g
    }

    /// `β = d − 1 + (γ_{p,p} + γ_{p/2,p})/2`.
    pub fn beta(&self) -> f64 {
        let g1 = gamma_pq(self.p, self.p, self.d, self.delta).expect("validated parameters");
        let g2 = gamma_pq(0.5 * self.p, self.p, self.d, self.delta).expect("validated parameters");
        (self.d - 1) as f64 + 0.5 * (g1 + g2)
    }

    /// Fails when `β < σ`, which happens for `p < 8`.
    pub fn constants(&self) -> Result<SemigroupConstants> {
        let (sigma, beta) = (self.sigma(), self.beta());
        if beta < sigma {
            return Err(Error::Hypothesis(format!(
                "β = {beta:.6} < σ = {sigma:.6} for p = {}: the decay estimates are not ordered",
                self.p
            )));
        }
        SemigroupConstants::new(sigma, beta, self.alpha, self.theta())
    }
}

/// `G(u, t) = u∘u + F(t)` with `L = 2ρ`.
#[derive(Clone, Debug, PartialEq)]
pub struct NseNonlinearity {
    pub forcing: AAPFunction,
    pub radius: f64,
    g0_sup: f64,
}

impl NseNonlinearity {
    /// `norm_x` measures the forcing; `sup_t‖F(t)‖_X` is taken as the AAP
    /// norm bound `Σ(‖C_j‖ + ‖S_j‖) + Σ|c|‖profile‖`.
    pub fn new(forcing: AAPFunction, radius: f64, norm_x: &dyn Fn(&[f64]) -> f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(invalid(format!(
                "ball radius must be positive, got {radius}"
            )));
        }
        let g0_sup = forcing.norm_bound(norm_x);
        Ok(Self {
            forcing,
            radius,
            g0_sup,
        })
    }

    /// [`Nonlinearity::evaluate`] after checking `‖u‖_Y ≤ ρ`.
    pub fn checked(&self, u: &[f64], t: f64, norm_y: &dyn Fn(&[f64]) -> f64) -> Result<Vec<f64>> {
        check_ball(u, t, self.radius, norm_y)?;
        Ok(self.evaluate(u, t))
    }
}

impl Nonlinearity for NseNonlinearity {
    fn name(&self) -> &str {
        "nse"
    }

    fn evaluate(&self, u: &[f64], t: f64) -> Vec<f64> {
        let mut g = self.forcing.eval(t);
        g.iter_mut().zip(u).for_each(|(g, x)| *g += x * x);
        g
    }

    fn lipschitz(&self) -> f64 {
        2.0 * self.radius
    }

    fn radius(&self) -> f64 {
        self.radius
    }

    fn g0_sup(&self) -> f64 {
        self.g0_sup
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatParameters {
    pub k: u32,
}

/// `G(u, t) = |u|^{k−1}u + f(t)` with `L = kρ^{k−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatNonlinearity {
    pub k: u32,
    pub forcing: AAPFunction,
    pub radius: f64,
    g0_sup: f64,
}

impl HeatNonlinearity {
    /// `sup_t‖f(t)‖_X` is taken as the AAP norm bound, as for [`NseNonlinearity`].
    pub fn new(
        params: HeatParameters,
        forcing: AAPFunction,
        radius: f64,
        norm_x: &dyn Fn(&[f64]) -> f64,
    ) -> Result<Self> {
        if params.k < 2 {
            return Err(invalid(format!(
                "the power must satisfy k ≥ 2, got {}",
                params.k
            )));
        }
        if !(radius > 0.0) {
            return Err(invalid(format!(
                "ball radius must be positive, got {radius}"
            )));
        }
        let g0_sup = forcing.norm_bound(norm_x);
        Ok(Self {
            k: params.k,
            forcing,
            radius,
            g0_sup,
        })
    }

    pub fn checked(&self, u: &[f64], t: f64, norm_y: &dyn Fn(&[f64]) -> f64) -> Result<Vec<f64>> {
        check_ball(u, t, self.radius, norm_y)?;
        Ok(self.evaluate(u, t))
    }
}

impl Nonlinearity for HeatNonlinearity {
    fn name(&self) -> &str {
        "heat"
    }

    fn evaluate(&self, u: &[f64], t: f64) -> Vec<f64> {
        let mut g = self.forcing.eval(t);
        let k = self.k as i32;
        g.iter_mut()
            .zip(u)
            .for_each(|(g, x)| *g += x.abs().powi(k - 1) * x);
        g
    }

    fn lipschitz(&self) -> f64 {
        self.k as f64 * self.radius.powi(self.k as i32 - 1)
    }

    fn radius(&self) -> f64 {
        self.radius
    }

    fn g0_sup(&self) -> f64 {
        self.g0_sup
    }
}

fn check_ball(u: &[f64], t: f64, radius: f64, norm_y: &dyn Fn(&[f64]) -> f64) -> Result<()> {
    let n = norm_y(u);
    if n > radius {
        return Err(Error::BallExit {
            time: t,
            norm: n,
            radius,
        });
    }
    Ok(())
}

/// `‖G(u₁,t) − G(u₂,t)‖_X / ‖u₁ − u₂‖_Y`.
pub fn lipschitz_quotient(
    g: &dyn Nonlinearity,
    u1: &[f64],
    u2: &[f64],
    t: f64,
    norm_x: &dyn Fn(&[f64]) -> f64,
    norm_y: &dyn Fn(&[f64]) -> f64,
) -> f64 {
    let dg: Vec<f64> = g
        .evaluate(u1, t)
        .iter()
        .zip(g.evaluate(u2, t))
        .map(|(a, b)| a - b)
        .collect();
    let du: Vec<f64> = u1.iter().zip(u2).map(|(a, b)| a - b).collect();
    norm_x(&dg) / norm_y(&du)
}
