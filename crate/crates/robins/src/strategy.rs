//! Shared vocabulary for strategies and values.
//!
//! Strategies are feedback maps of time and the per-path insider state:
//! the insurer chooses an investment fraction `pi` and a retained-risk
//! exposure `kappa`, the adversary chooses density generator components
//! `theta = (theta1, theta2, theta3, theta4)` tilting the two Brownian
//! drivers and the two jump compensators.

use std::sync::Arc;

/// Per-path state a feedback strategy may condition on.
///
/// `y0` is the insider's signal value for this path (the Brownian functional
/// or the future claim count), the running fields are the path statistics the
/// insider formulas consume, and `eta2` counts claims up to the current time.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PathState {
    /// Insider signal value (0 when there is no insider).
    pub y0: f64,
    /// Running kernel integral against the combined surplus driver.
    pub run_wbar: f64,
    /// Running kernel integral against the asset driver.
    pub run_w1: f64,
    /// Claim count up to the current time.
    pub eta2: f64,
}

/// A deterministic feedback map of `(t, state)`.
pub type StateFn = Arc<dyn Fn(f64, &PathState) -> f64 + Send + Sync>;

/// Constant map helper.
pub fn const_fn(v: f64) -> StateFn {
    Arc::new(move |_, _| v)
}

/// Strategy values at one `(t, state)` point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ControlPoint {
    pub pi: f64,
    pub kappa: f64,
    pub theta: [f64; 4],
}

/// A full strategy pair: the insurer's controls and the adversary's
/// density generator components as feedback maps.
#[derive(Clone)]
pub struct StrategyPair {
    pub pi: StateFn,
    pub kappa: StateFn,
    pub theta: [StateFn; 4],
}

impl StrategyPair {
    /// Constant-in-time, state-free strategies.
    pub fn constant(pi: f64, kappa: f64, theta: [f64; 4]) -> Self {
        StrategyPair {
            pi: const_fn(pi),
            kappa: const_fn(kappa),
            theta: theta.map(const_fn),
        }
    }

    /// The zero pair: park everything and leave the measure untouched.
    pub fn zero() -> Self {
        Self::constant(0.0, 0.0, [0.0; 4])
    }

    /// Evaluate every component at one point.
    pub fn eval(&self, t: f64, state: &PathState) -> ControlPoint {
        ControlPoint {
            pi: (self.pi)(t, state),
            kappa: (self.kappa)(t, state),
            theta: [
                (self.theta[0])(t, state),
                (self.theta[1])(t, state),
                (self.theta[2])(t, state),
                (self.theta[3])(t, state),
            ],
        }
    }

    /// Replace the adversary components with zero (risk-neutral evaluation).
    pub fn with_zero_theta(&self) -> Self {
        StrategyPair {
            pi: self.pi.clone(),
            kappa: self.kappa.clone(),
            theta: [const_fn(0.0), const_fn(0.0), const_fn(0.0), const_fn(0.0)],
        }
    }
}

impl std::fmt::Debug for StrategyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let origin = PathState::default();
        let p = self.eval(0.0, &origin);
        write!(f, "StrategyPair(at origin: {p:?})")
    }
}

/// A Monte Carlo estimate with its standard error and the settings that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: u64,
    pub dt: f64,
}

/// Game value with its additive decomposition.
///
/// When `analytic` is present it equals the sum of the four components:
/// initial log wealth, the integrated short rate, the integrated
/// risk-premium term, and the insider's information gain.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValueReport {
    pub analytic: Option<f64>,
    pub ln_x0: f64,
    pub rate_integral: f64,
    pub risk_premium_integral: f64,
    pub insider_gain: f64,
    /// Attached when a simulation was run alongside the analytics.
    pub mc: Option<McEstimate>,
}

impl ValueReport {
    /// Assemble a report whose analytic value is the component sum.
    pub fn from_components(
        ln_x0: f64,
        rate_integral: f64,
        risk_premium_integral: f64,
        insider_gain: f64,
    ) -> Self {
        ValueReport {
            analytic: Some(ln_x0 + rate_integral + risk_premium_integral + insider_gain),
            ln_x0,
            rate_integral,
            risk_premium_integral,
            insider_gain,
            mc: None,
        }
    }

    /// A report with no analytic value (Monte Carlo only regimes).
    pub fn mc_only() -> Self {
        ValueReport::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_pair_evaluates_everywhere() {
        let p = StrategyPair::constant(0.625, 0.625, [-0.125, 0.25, 0.0, 0.0]);
        let st = PathState { y0: 3.0, run_wbar: -1.0, run_w1: 0.5, eta2: 2.0 };
        let c = p.eval(0.7, &st);
        assert_eq!(c.pi, 0.625);
        assert_eq!(c.kappa, 0.625);
        assert_eq!(c.theta, [-0.125, 0.25, 0.0, 0.0]);
        let n = p.with_zero_theta().eval(0.7, &st);
        assert_eq!(n.pi, 0.625);
        assert_eq!(n.theta, [0.0; 4]);
    }

    #[test]
    fn report_sums_components() {
        let r = ValueReport::from_components(0.0, 0.03, 0.078125, 0.0);
        assert_eq!(r.analytic, Some(0.108125));
    }
}
