//! Learning-rate condition and convergence bound for decentralized
//! periodic averaging, evaluated numerically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    pub eta: f64,
    /// Smoothness constant estimate.
    pub lipschitz: f64,
    pub tau: u32,
    pub zeta: f64,
    /// Gradient-noise bound (both noise components summed).
    pub sigma_sq: f64,
    pub clients: u32,
    pub rounds: u64,
    /// Objective at initialization.
    pub f_init: f64,
    #[serde(default)]
    pub f_inf: f64,
    /// Variance slope; carried along, unused by the bound.
    #[serde(default)]
    pub beta: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let positive = [("eta", self.eta), ("lipschitz", self.lipschitz)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.sigma_sq.is_finite() && self.sigma_sq >= 0.0) {
            return Err(Error::Validation(format!(
                "sigma_sq must be non-negative, got {}",
                self.sigma_sq
            )));
        }
        if self.tau == 0 || self.clients == 0 || self.rounds == 0 {
            return Err(Error::Validation(
                "tau, clients and rounds must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::Validation(format!(
                "zeta must lie in [0, 1], got {}",
                self.zeta
            )));
        }
        if !(self.f_init.is_finite() && self.f_inf.is_finite()) || self.f_init < self.f_inf {
            return Err(Error::Validation(format!(
                "need finite f_init ≥ f_inf, got {} and {}",
                self.f_init, self.f_inf
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrCondition {
    /// Left-hand side; `None` when ζ = 1.
    pub lhs: Option<f64>,
    pub feasible: bool,
    pub reason: Option<String>,
}

/// `ηL + η²L²τ²/(1−ζ) · (2ζ²/(1+ζ) + 2ζ/(1−ζ) + (τ−1)/τ) ≤ 1`.
pub fn lr_condition(inputs: &BoundInputs) -> Result<LrCondition> {
    inputs.validate()?;
    let BoundInputs {
        eta,
        lipschitz: l,
        zeta,
        ..
    } = *inputs;
    if zeta >= 1.0 {
        return Ok(LrCondition {
            lhs: None,
            feasible: false,
            reason: Some(
                "ζ = 1: the topology never mixes, so no step size satisfies the condition".into(),
            ),
        });
    }
    let tau = inputs.tau as f64;
    let el = eta * l;
    let bracket = 2.0 * zeta * zeta / (1.0 + zeta) + 2.0 * zeta / (1.0 - zeta) + (tau - 1.0) / tau;
    let lhs = el + el * el * tau * tau / (1.0 - zeta) * bracket;
    Ok(LrCondition {
        lhs: Some(lhs),
        feasible: lhs <= 1.0,
        reason: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    /// Total; `None` when ζ = 1.
    pub value: Option<f64>,
    /// Optimization, noise and network terms.
    pub terms: Option<[f64; 3]>,
    pub lr_condition: LrCondition,
}

/// `2(F(x₁) − F_inf)/(ηT) + ηLσ²/K + η²L²σ²((1+ζ²)/(1−ζ²)·τ − 1)`.
pub fn convergence_bound(inputs: &BoundInputs) -> Result<BoundValue> {
    let cond = lr_condition(inputs)?;
    if inputs.zeta >= 1.0 {
        return Ok(BoundValue {
            value: None,
            terms: None,
            lr_condition: cond,
        });
    }
    if !cond.feasible {
        log::warn!(
            "learning-rate condition fails (lhs {:?}); the bound is evaluated but not guaranteed",
            cond.lhs
        );
    }
    let BoundInputs {
        eta,
        lipschitz: l,
        zeta,
        sigma_sq,
        f_init,
        f_inf,
        ..
    } = *inputs;
    let t = inputs.rounds as f64;
    let k = inputs.clients as f64;
    let tau = inputs.tau as f64;
    let z2 = zeta * zeta;
    let terms = [
        2.0 * (f_init - f_inf) / (eta * t),
        eta * l * sigma_sq / k,
        eta * eta * l * l * sigma_sq * ((1.0 + z2) / (1.0 - z2) * tau - 1.0),
    ];
    Ok(BoundValue {
        value: Some(terms[0] + terms[1] + terms[2]),
        terms: Some(terms),
        lr_condition: cond,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceComparison {
    pub mean_grad_norm_sq: f64,
    pub bound: Option<f64>,
    /// Observed mean above the bound. Diagnostic only: L and σ² are
    /// estimates.
    pub violated: bool,
    pub rounds: usize,
}

pub fn compare_trace(grad_norm_sq: &[f64], inputs: &BoundInputs) -> Result<TraceComparison> {
    if grad_norm_sq.is_empty() {
        return Err(Error::Validation("empty gradient-norm trace".into()));
    }
    if grad_norm_sq.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(
            "gradient-norm trace has non-finite entries".into(),
        ));
    }
    let mean = grad_norm_sq.iter().sum::<f64>() / grad_norm_sq.len() as f64;
    let bound = convergence_bound(inputs)?.value;
    Ok(TraceComparison {
        mean_grad_norm_sq: mean,
        bound,
        violated: bound.is_some_and(|b| mean > b),
        rounds: grad_norm_sq.len(),
    })
}
