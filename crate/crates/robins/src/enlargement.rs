//! Filtration enlargement: what observing a future functional does to the
//! drivers the insurer sees.
//!
//! When the insurer knows `Y0 = int_0^{T0} kernel dW` at time zero, each
//! Brownian driver splits into a driver that is Brownian in the enlarged
//! filtration plus an absolutely continuous information drift proportional
//! to the conditional residual of the signal. When the insurer knows the
//! claim count at `T0`, the Brownian drivers are untouched but the claim
//! compensator tilts to the bridge intensity: remaining jumps spread
//! uniformly over the remaining time.

use crate::curves::Curve;
use crate::error::{Error, Result};
use crate::numerics::integrate;
use crate::scenario::{InsiderSource, InsiderSpec, ValidatedScenario};
use crate::strategy::PathState;

/// Squared kernel norm `int_s^t kernel(u)^2 du`.
pub fn kernel_norm_sq(kernel: &Curve, s: f64, t: f64) -> f64 {
    match kernel.constant() {
        Some(c) => c * c * (t - s),
        None => integrate(&|u| kernel.at(u) * kernel.at(u), s, t, 1e-12, kernel.knots()),
    }
}

/// Information drift of the two Brownian drivers in the enlarged filtration.
///
/// `phi1` tilts the asset driver, `phi2` the orthogonal surplus component.
/// Both are zero without a Brownian signal.
#[derive(Clone, Debug)]
pub struct InformationDrift {
    kind: DriftKind,
}

#[derive(Clone, Debug)]
enum DriftKind {
    None,
    /// Signal on the combined surplus driver `rho W1 + sqrt(1-rho^2) W2`.
    Wbar { kernel: Curve, t0: f64, rho: f64 },
    /// Signal on the asset driver alone.
    W1 { kernel: Curve, t0: f64 },
}

impl InformationDrift {
    /// Conditional residual of the signal over its remaining variance,
    /// `(y0 - run) / |kernel|^2_[t, t0]`, times the kernel at `t`.
    fn pull(kernel: &Curve, t0: f64, t: f64, residual: f64) -> f64 {
        let tail = kernel_norm_sq(kernel, t, t0);
        kernel.at(t) * residual / tail
    }

    /// Drift of the asset driver at `(t, state)`.
    pub fn phi1(&self, t: f64, state: &PathState) -> f64 {
        match &self.kind {
            DriftKind::None => 0.0,
            DriftKind::Wbar { kernel, t0, rho } => {
                rho * Self::pull(kernel, *t0, t, state.y0 - state.run_wbar)
            }
            DriftKind::W1 { kernel, t0 } => {
                Self::pull(kernel, *t0, t, state.y0 - state.run_w1)
            }
        }
    }

    /// Drift of the orthogonal surplus driver at `(t, state)`.
    pub fn phi2(&self, t: f64, state: &PathState) -> f64 {
        match &self.kind {
            DriftKind::None => 0.0,
            DriftKind::Wbar { kernel, t0, rho } => {
                (1.0 - rho * rho).sqrt()
                    * Self::pull(kernel, *t0, t, state.y0 - state.run_wbar)
            }
            DriftKind::W1 { .. } => 0.0,
        }
    }

    /// True when both components vanish identically.
    pub fn is_zero(&self) -> bool {
        matches!(self.kind, DriftKind::None)
    }
}

/// Build the information drift for a scenario's insider signal.
///
/// The claim-count signal has zero Brownian drift; its effect lives in
/// [`CompensatorTilt`]. Unsupported signal shapes are rejected.
pub fn drift_for(spec: &InsiderSpec, rho: f64) -> Result<InformationDrift> {
    let kind = match spec {
        InsiderSpec::None => DriftKind::None,
        InsiderSpec::JumpFunctional { .. } => DriftKind::None,
        InsiderSpec::BrownianFunctional { source, kernel, t0, .. } => {
            if kernel_norm_sq(kernel, 0.0, *t0) <= 0.0 {
                return Err(Error::UnsupportedInsider(
                    "signal kernel has zero norm".into(),
                ));
            }
            match source {
                InsiderSource::Wbar => DriftKind::Wbar {
                    kernel: kernel.clone(),
                    t0: *t0,
                    rho,
                },
                InsiderSource::W1 => DriftKind::W1 {
                    kernel: kernel.clone(),
                    t0: *t0,
                },
            }
        }
    };
    Ok(InformationDrift { kind })
}

/// Conditional density of a Brownian signal given the running integral:
/// a Gaussian kernel in `y - running` with variance the remaining norm.
pub fn donsker_conditional_density(y: f64, running: f64, norm_tail: f64) -> Result<f64> {
    if !(norm_tail > 0.0) {
        return Err(Error::DomainError(format!(
            "remaining signal variance must be positive, got {norm_tail}"
        )));
    }
    let d = y - running;
    Ok((-d * d / (2.0 * norm_tail)).exp() / (2.0 * std::f64::consts::PI * norm_tail).sqrt())
}

/// Claim-arrival intensity in the observer's filtration.
#[derive(Clone, Debug)]
pub struct CompensatorTilt {
    base_intensity: f64,
    t0: Option<f64>,
}

impl CompensatorTilt {
    /// Intensity at `(t, state)`: the base intensity without a claim-count
    /// signal, else the bridge rate `(remaining jumps) / (remaining time)`.
    pub fn intensity(&self, t: f64, state: &PathState) -> f64 {
        match self.t0 {
            None => self.base_intensity,
            Some(t0) => (state.y0 - state.eta2) / (t0 - t),
        }
    }

    /// True when the intensity is the untilted base rate.
    pub fn is_identity(&self) -> bool {
        self.t0.is_none()
    }
}

/// Build the compensator tilt for a scenario.
pub fn tilt_for(v: &ValidatedScenario) -> CompensatorTilt {
    let base_intensity = v
        .scenario()
        .insurance
        .jump2
        .as_ref()
        .map(|j| j.intensity)
        .unwrap_or(0.0);
    let t0 = match &v.scenario().insider {
        InsiderSpec::JumpFunctional { t0, .. } => Some(*t0),
        _ => None,
    };
    CompensatorTilt { base_intensity, t0 }
}
