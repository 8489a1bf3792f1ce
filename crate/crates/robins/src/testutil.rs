//! Shared scenario fixtures for the test suite.

use crate::curves::Curve;
use crate::scenario::{
    validate, AmbiguitySpec, InsiderSource, InsiderSpec, InsuranceParams, JumpSpec,
    MarketParams, Scenario, ValidatedScenario,
};

/// Diffusive baseline: unit horizon and wealth, r 3%, drift 8%, vol 20%,
/// premium income 0.5, loading 0.3, claim vol 0.4, independent drivers,
/// ambiguity on.
pub(crate) fn s0() -> Scenario {
    Scenario {
        market: MarketParams {
            r: Curve::Constant(0.03),
            mu0: Curve::Constant(0.08),
            varrho: Curve::Constant(0.0),
            sigma: Curve::Constant(0.2),
            jump1: None,
        },
        insurance: InsuranceParams {
            a: Curve::Constant(0.3),
            b: Curve::Constant(0.4),
            lambda: Curve::Constant(0.5),
            rho: 0.0,
            jump2: None,
        },
        insider: InsiderSpec::None,
        ambiguity: AmbiguitySpec { enabled: true },
        horizon: 1.0,
        x0: 1.0,
    }
}

/// Same model with the adversary disabled.
pub(crate) fn neutral(mut s: Scenario) -> Scenario {
    s.ambiguity.enabled = false;
    s
}

/// Attach a flat-kernel signal on the combined surplus driver.
pub(crate) fn with_wbar_insider(mut s: Scenario, t0: f64, realized: Option<f64>) -> Scenario {
    s.insider = InsiderSpec::BrownianFunctional {
        source: InsiderSource::Wbar,
        kernel: Curve::Constant(1.0),
        t0,
        realized,
    };
    s
}

/// Attach a flat-kernel signal on the asset driver.
pub(crate) fn with_w1_insider(mut s: Scenario, t0: f64, realized: Option<f64>) -> Scenario {
    s.insider = InsiderSpec::BrownianFunctional {
        source: InsiderSource::W1,
        kernel: Curve::Constant(1.0),
        t0,
        realized,
    };
    s
}

/// Attach a claim-count signal (jump case only).
pub(crate) fn with_count_insider(mut s: Scenario, t0: f64, realized: Option<f64>) -> Scenario {
    s.insider = InsiderSpec::JumpFunctional { t0, realized };
    s
}

/// Large-insurer variant: price impact 0.005, everything else as [`s0`].
pub(crate) fn sl() -> Scenario {
    let mut s = s0();
    s.market.varrho = Curve::Constant(0.005);
    s
}

/// Jump variant: compound Poisson claims with unit mark and intensity 0.5
/// replacing the diffusive surplus risk.
pub(crate) fn sj() -> Scenario {
    let mut s = s0();
    s.insurance.b = Curve::Constant(0.0);
    s.insurance.jump2 = Some(JumpSpec { intensity: 0.5, mark: 1.0 });
    s
}

/// Validate a fixture, panicking on constraint violations.
pub(crate) fn v(s: &Scenario) -> ValidatedScenario {
    validate(s).expect("fixture must validate")
}
