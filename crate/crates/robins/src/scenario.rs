//! Scenario declaration, config parsing, and validation.
//!
//! A scenario bundles the market model, the insurance module, the insider
//! signal, and the ambiguity switch, together with the horizon and initial
//! wealth. Config files are sectioned `key = value` text (TOML subset) with
//! sections `[market]`, `[insurance]`, `[insider]`, `[ambiguity]`, `[run]`.
//! Coefficients are scalar constants or piecewise curves on a declared grid.
//!
//! Two mutually exclusive cases exist:
//!
//! * continuous: diffusive insurance risk, `b(t) > 0`, no jump component;
//! * jump: compound Poisson claims with a fixed mark, `b = 0`, and no
//!   price-impact term on the asset side.
//!
//! Validation is total: every input either produces a [`ValidatedScenario`]
//! or a typed rejection naming the violated constraint.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::curves::Curve;
use crate::error::{Error, Result};
use crate::numerics::integrate;

/// Lower floor for volatility-like curves.
pub const EPS_SIGMA: f64 = 1e-8;
/// Lower floor for the claim mark size.
pub const EPS_GAMMA: f64 = 1e-8;
/// Minimal gap between the trading horizon and the insider signal time.
pub const MIN_SIGNAL_GAP: f64 = 1e-3;
/// Number of interior points used for pointwise constraint checks.
const VALIDATION_POINTS: usize = 1000;

/// Compound Poisson component with a deterministic mark size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpSpec {
    /// Arrival intensity, strictly positive.
    pub intensity: f64,
    /// Mark size applied per jump, at least [`EPS_GAMMA`].
    pub mark: f64,
}

/// Risky-asset model: short rate, base drift, price-impact slope, and
/// volatility. A nonzero impact slope makes the insurer "large": its
/// investment moves the drift it earns.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketParams {
    pub r: Curve,
    pub mu0: Curve,
    pub varrho: Curve,
    pub sigma: Curve,
    /// Asset-side jumps are declared for completeness but not supported.
    pub jump1: Option<JumpSpec>,
}

/// Insurance module: premium income `lambda`, reinsurance cost loading `a`,
/// diffusive claim volatility `b`, correlation `rho` between the asset and
/// surplus drivers, and an optional compound Poisson claim component.
#[derive(Clone, Debug, PartialEq)]
pub struct InsuranceParams {
    pub a: Curve,
    pub b: Curve,
    pub lambda: Curve,
    pub rho: f64,
    pub jump2: Option<JumpSpec>,
}

/// Which Brownian driver the insider's signal integrates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InsiderSource {
    /// The asset driver.
    W1,
    /// The combined surplus driver `rho W1 + sqrt(1-rho^2) W2`.
    Wbar,
}

/// The insider's extra information, fixed at time zero.
#[derive(Clone, Debug, PartialEq)]
pub enum InsiderSpec {
    /// No extra information: the natural filtration.
    None,
    /// A Brownian functional `Y0 = int_0^{T0} kernel dW` observed at start.
    BrownianFunctional {
        source: InsiderSource,
        kernel: Curve,
        t0: f64,
        /// Conditioning value for the signal; drawn from its law when absent.
        realized: Option<f64>,
    },
    /// The claim count at the future time `t0` (jump case only).
    JumpFunctional { t0: f64, realized: Option<f64> },
}

impl InsiderSpec {
    /// Signal observation time, when a signal exists.
    pub fn t0(&self) -> Option<f64> {
        match self {
            InsiderSpec::None => None,
            InsiderSpec::BrownianFunctional { t0, .. } => Some(*t0),
            InsiderSpec::JumpFunctional { t0, .. } => Some(*t0),
        }
    }

    /// Conditioning value when one was declared.
    pub fn realized(&self) -> Option<f64> {
        match self {
            InsiderSpec::None => None,
            InsiderSpec::BrownianFunctional { realized, .. } => *realized,
            InsiderSpec::JumpFunctional { realized, .. } => *realized,
        }
    }
}

/// Whether the adversary is active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguitySpec {
    pub enabled: bool,
}

impl Default for AmbiguitySpec {
    fn default() -> Self {
        AmbiguitySpec { enabled: true }
    }
}

/// Full model declaration.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub market: MarketParams,
    pub insurance: InsuranceParams,
    pub insider: InsiderSpec,
    pub ambiguity: AmbiguitySpec,
    /// Trading horizon `T`.
    pub horizon: f64,
    /// Initial wealth, strictly positive.
    pub x0: f64,
}

/// Cached scalar coefficients available when every curve is constant.
#[derive(Clone, Copy, Debug)]
pub struct ConstCoeffs {
    pub r: f64,
    pub mu0: f64,
    pub varrho: f64,
    pub sigma: f64,
    pub a: f64,
    pub b: f64,
    pub lambda: f64,
    pub iota: f64,
    pub sigma_tilde: f64,
    pub cbar: f64,
}

/// A scenario that has passed every model constraint, with derived
/// coefficient curves available.
#[derive(Clone, Debug)]
pub struct ValidatedScenario {
    scenario: Scenario,
    consts: Option<ConstCoeffs>,
    knots: Arc<Vec<f64>>,
}

impl ValidatedScenario {
    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Market price of risk `iota = (mu0 - r) / sigma`.
    pub fn iota(&self, t: f64) -> f64 {
        match &self.consts {
            Some(c) => c.iota,
            None => {
                let m = &self.scenario.market;
                (m.mu0.at(t) - m.r.at(t)) / m.sigma.at(t)
            }
        }
    }

    /// Impact-adjusted volatility `sigma - 2 varrho / sigma`.
    pub fn sigma_tilde(&self, t: f64) -> f64 {
        match &self.consts {
            Some(c) => c.sigma_tilde,
            None => {
                let m = &self.scenario.market;
                let s = m.sigma.at(t);
                s - 2.0 * m.varrho.at(t) / s
            }
        }
    }

    /// Insurance risk premium per unit volatility,
    /// `(lambda - a + rho b iota) / (sqrt(1-rho^2) b)`.
    pub fn cbar(&self, t: f64) -> f64 {
        match &self.consts {
            Some(c) => c.cbar,
            None => {
                let i = &self.scenario.insurance;
                let rho = i.rho;
                let b = i.b.at(t);
                if b > 0.0 {
                    (i.lambda.at(t) - i.a.at(t) + rho * b * self.iota(t))
                        / ((1.0 - rho * rho).sqrt() * b)
                } else {
                    0.0
                }
            }
        }
    }

    /// Scalar coefficients when all curves are constant.
    pub fn consts(&self) -> Option<&ConstCoeffs> {
        self.consts.as_ref()
    }

    /// Every declared curve knot, for quadrature splitting.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// True when the insurance risk is compound Poisson.
    pub fn is_jump(&self) -> bool {
        self.scenario.insurance.jump2.is_some()
    }

    /// True when the insurer's investment moves the asset drift.
    pub fn is_large(&self) -> bool {
        match self.scenario.market.varrho.constant() {
            Some(v) => v != 0.0,
            None => true,
        }
    }

    /// Integrate `f` over `[a, b]` splitting at declared knots.
    pub fn integrate_knots<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> f64 {
        integrate(&f, a, b, 1e-12, &self.knots)
    }
}

fn check_pointwise<F: Fn(f64) -> Option<(f64, f64)>>(
    name: &str,
    upto: f64,
    f: F,
) -> Result<()> {
    // knot-aligned uniform sweep; curves are tame between knots
    for k in 0..=VALIDATION_POINTS {
        let t = upto * k as f64 / VALIDATION_POINTS as f64;
        if let Some((val, _req)) = f(t) {
            return Err(Error::ConstraintViolation {
                name: name.to_string(),
                t,
                value: val,
            });
        }
    }
    Ok(())
}

/// Validate every model constraint and cache derived coefficients.
pub fn validate(scenario: &Scenario) -> Result<ValidatedScenario> {
    let s = scenario;
    if !(s.x0 > 0.0) || !s.x0.is_finite() {
        return Err(Error::ConstraintViolation {
            name: "x0 must be strictly positive".into(),
            t: 0.0,
            value: s.x0,
        });
    }
    if !(s.horizon > 0.0) || !s.horizon.is_finite() {
        return Err(Error::ConstraintViolation {
            name: "horizon must be strictly positive".into(),
            t: 0.0,
            value: s.horizon,
        });
    }
    for (name, c) in [
        ("market.r", &s.market.r),
        ("market.mu0", &s.market.mu0),
        ("market.varrho", &s.market.varrho),
        ("market.sigma", &s.market.sigma),
        ("insurance.a", &s.insurance.a),
        ("insurance.b", &s.insurance.b),
        ("insurance.lambda", &s.insurance.lambda),
    ] {
        c.validate(name)?;
    }
    if !(s.insurance.rho > -1.0 && s.insurance.rho <= 0.0) {
        return Err(Error::ConstraintViolation {
            name: "insurance.rho must lie in (-1, 0]".into(),
            t: 0.0,
            value: s.insurance.rho,
        });
    }
    if let Some(j) = &s.market.jump1 {
        return Err(Error::ConstraintViolation {
            name: "market.jump1: asset-side jumps are not supported".into(),
            t: 0.0,
            value: j.intensity,
        });
    }

    let upto = s.horizon.max(s.insider.t0().unwrap_or(0.0));
    let m = &s.market;
    let ins = &s.insurance;
    check_pointwise("market.sigma below floor", upto, |t| {
        let v = m.sigma.at(t);
        (v < EPS_SIGMA).then_some((v, EPS_SIGMA))
    })?;
    check_pointwise("market.varrho outside [0, sigma^2/2)", upto, |t| {
        let v = m.varrho.at(t);
        let cap = 0.5 * m.sigma.at(t) * m.sigma.at(t);
        (v < 0.0 || v >= cap).then_some((v, cap))
    })?;
    check_pointwise("insurance premium ordering lambda > a > 0", upto, |t| {
        let (l, a) = (ins.lambda.at(t), ins.a.at(t));
        (!(l > a && a > 0.0)).then_some((l - a, 0.0))
    })?;

    let jump = ins.jump2.is_some();
    if jump {
        let j = ins.jump2.as_ref().unwrap();
        if !(j.intensity > 0.0) {
            return Err(Error::ConstraintViolation {
                name: "insurance.jump_intensity must be strictly positive".into(),
                t: 0.0,
                value: j.intensity,
            });
        }
        if j.mark < EPS_GAMMA {
            return Err(Error::ConstraintViolation {
                name: "insurance.jump_mark below floor".into(),
                t: 0.0,
                value: j.mark,
            });
        }
        check_pointwise("jump case requires b = 0", upto, |t| {
            let v = ins.b.at(t);
            (v != 0.0).then_some((v, 0.0))
        })?;
        if ins.rho != 0.0 {
            return Err(Error::ConstraintViolation {
                name: "jump case requires rho = 0".into(),
                t: 0.0,
                value: ins.rho,
            });
        }
        if matches!(
            s.insider,
            InsiderSpec::BrownianFunctional { source: InsiderSource::Wbar, .. }
        ) {
            return Err(Error::ConstraintViolation {
                name: "jump case has no combined surplus driver for the signal".into(),
                t: 0.0,
                value: 0.0,
            });
        }
    } else {
        check_pointwise("continuous case requires b above floor", upto, |t| {
            let v = ins.b.at(t);
            (v < EPS_SIGMA).then_some((v, EPS_SIGMA))
        })?;
        check_pointwise("insurance.b non-negative", upto, |t| {
            let v = ins.b.at(t);
            (v < 0.0).then_some((v, 0.0))
        })?;
    }

    match &s.insider {
        InsiderSpec::None => {}
        InsiderSpec::BrownianFunctional { kernel, t0, .. } => {
            kernel.validate("insider.kernel")?;
            if *t0 - s.horizon < MIN_SIGNAL_GAP {
                return Err(Error::ConstraintViolation {
                    name: "insider.t0 must exceed horizon by the minimal gap".into(),
                    t: s.horizon,
                    value: *t0,
                });
            }
            let tail = integrate(
                &|t| kernel.at(t) * kernel.at(t),
                s.horizon,
                *t0,
                1e-12,
                kernel.knots(),
            );
            if !(tail > 0.0) {
                return Err(Error::ConstraintViolation {
                    name: "insider kernel must carry information beyond the horizon".into(),
                    t: s.horizon,
                    value: tail,
                });
            }
        }
        InsiderSpec::JumpFunctional { t0, realized } => {
            if !jump {
                return Err(Error::ConstraintViolation {
                    name: "claim-count signal requires the jump case".into(),
                    t: 0.0,
                    value: 0.0,
                });
            }
            if *t0 - s.horizon < MIN_SIGNAL_GAP {
                return Err(Error::ConstraintViolation {
                    name: "insider.t0 must exceed horizon by the minimal gap".into(),
                    t: s.horizon,
                    value: *t0,
                });
            }
            if let Some(v) = realized {
                if *v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::ConstraintViolation {
                        name: "realized claim count must be a non-negative integer".into(),
                        t: 0.0,
                        value: *v,
                    });
                }
            }
        }
    }

    if s.market.varrho.constant() != Some(0.0) && jump {
        return Err(Error::ConstraintViolation {
            name: "price impact requires the continuous case".into(),
            t: 0.0,
            value: 0.0,
        });
    }

    let consts = const_coeffs(s);
    let mut knots: Vec<f64> = Vec::new();
    for c in [
        &s.market.r,
        &s.market.mu0,
        &s.market.varrho,
        &s.market.sigma,
        &s.insurance.a,
        &s.insurance.b,
        &s.insurance.lambda,
    ] {
        knots.extend_from_slice(c.knots());
    }
    if let InsiderSpec::BrownianFunctional { kernel, .. } = &s.insider {
        knots.extend_from_slice(kernel.knots());
    }
    knots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    knots.dedup();

    Ok(ValidatedScenario {
        scenario: s.clone(),
        consts,
        knots: Arc::new(knots),
    })
}

fn const_coeffs(s: &Scenario) -> Option<ConstCoeffs> {
    let r = s.market.r.constant()?;
    let mu0 = s.market.mu0.constant()?;
    let varrho = s.market.varrho.constant()?;
    let sigma = s.market.sigma.constant()?;
    let a = s.insurance.a.constant()?;
    let b = s.insurance.b.constant()?;
    let lambda = s.insurance.lambda.constant()?;
    let rho = s.insurance.rho;
    let iota = (mu0 - r) / sigma;
    let cbar = if b > 0.0 {
        (lambda - a + rho * b * iota) / ((1.0 - rho * rho).sqrt() * b)
    } else {
        0.0
    };
    Some(ConstCoeffs {
        r,
        mu0,
        varrho,
        sigma,
        a,
        b,
        lambda,
        iota,
        sigma_tilde: sigma - 2.0 * varrho / sigma,
        cbar,
    })
}

// ---------------------------------------------------------------------------
// Config file schema
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarketSection {
    r: Option<Curve>,
    mu0: Option<Curve>,
    #[serde(default)]
    varrho: Option<Curve>,
    sigma: Option<Curve>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InsuranceSection {
    a: Option<Curve>,
    b: Option<Curve>,
    lambda: Option<Curve>,
    #[serde(default)]
    rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    jump_intensity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    jump_mark: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InsiderSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<InsiderSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<Curve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    realized: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AmbiguitySection {
    #[serde(default)]
    enabled: Option<bool>,
}

/// Simulation settings carried by the `[run]` section beside the model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub horizon: Option<f64>,
    pub x0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub antithetic: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    market: MarketSection,
    #[serde(default)]
    insurance: InsuranceSection,
    #[serde(default, skip_serializing_if = "is_default_insider")]
    insider: InsiderSection,
    #[serde(default)]
    ambiguity: AmbiguitySection,
    #[serde(default)]
    run: RunSection,
}

fn is_default_insider(s: &InsiderSection) -> bool {
    *s == InsiderSection::default()
}

/// A parsed config: the scenario plus its run settings.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub scenario: Scenario,
    pub run: RunSection,
}

fn require(section: &str, key: &str, c: Option<Curve>) -> Result<Curve> {
    c.ok_or_else(|| Error::ParseError {
        line: 0,
        message: format!("missing required key `{key}` in [{section}]"),
    })
}

impl ConfigFile {
    fn into_loaded(self) -> Result<LoadedConfig> {
        let market = MarketParams {
            r: require("market", "r", self.market.r)?,
            mu0: require("market", "mu0", self.market.mu0)?,
            varrho: self.market.varrho.unwrap_or(Curve::Constant(0.0)),
            sigma: require("market", "sigma", self.market.sigma)?,
            jump1: None,
        };
        let jump2 = match (self.insurance.jump_intensity, self.insurance.jump_mark) {
            (Some(intensity), Some(mark)) => Some(JumpSpec { intensity, mark }),
            (None, None) => None,
            _ => {
                return Err(Error::ParseError {
                    line: 0,
                    message: "jump_intensity and jump_mark must be declared together".into(),
                })
            }
        };
        let insurance = InsuranceParams {
            a: require("insurance", "a", self.insurance.a)?,
            b: self.insurance.b.unwrap_or(Curve::Constant(0.0)),
            lambda: require("insurance", "lambda", self.insurance.lambda)?,
            rho: self.insurance.rho.unwrap_or(0.0),
            jump2,
        };
        let ins = &self.insider;
        let insider = match ins.kind.as_deref().unwrap_or("none") {
            "none" => InsiderSpec::None,
            "brownian" => InsiderSpec::BrownianFunctional {
                source: ins.source.ok_or_else(|| Error::ParseError {
                    line: 0,
                    message: "missing required key `source` in [insider]".into(),
                })?,
                kernel: ins.kernel.clone().unwrap_or(Curve::Constant(1.0)),
                t0: ins.t0.ok_or_else(|| Error::ParseError {
                    line: 0,
                    message: "missing required key `t0` in [insider]".into(),
                })?,
                realized: ins.realized,
            },
            "jump" => InsiderSpec::JumpFunctional {
                t0: ins.t0.ok_or_else(|| Error::ParseError {
                    line: 0,
                    message: "missing required key `t0` in [insider]".into(),
                })?,
                realized: ins.realized,
            },
            other => {
                return Err(Error::ParseError {
                    line: 0,
                    message: format!("insider.kind `{other}` is not one of none|brownian|jump"),
                })
            }
        };
        let horizon = self.run.horizon.ok_or_else(|| Error::ParseError {
            line: 0,
            message: "missing required key `horizon` in [run]".into(),
        })?;
        let x0 = self.run.x0.ok_or_else(|| Error::ParseError {
            line: 0,
            message: "missing required key `x0` in [run]".into(),
        })?;
        Ok(LoadedConfig {
            scenario: Scenario {
                market,
                insurance,
                insider,
                ambiguity: AmbiguitySpec {
                    enabled: self.ambiguity.enabled.unwrap_or(true),
                },
                horizon,
                x0,
            },
            run: self.run,
        })
    }

    fn from_scenario(s: &Scenario) -> ConfigFile {
        let (jump_intensity, jump_mark) = match &s.insurance.jump2 {
            Some(j) => (Some(j.intensity), Some(j.mark)),
            None => (None, None),
        };
        let insider = match &s.insider {
            InsiderSpec::None => InsiderSection::default(),
            InsiderSpec::BrownianFunctional { source, kernel, t0, realized } => InsiderSection {
                kind: Some("brownian".into()),
                source: Some(*source),
                t0: Some(*t0),
                kernel: Some(kernel.clone()),
                realized: *realized,
            },
            InsiderSpec::JumpFunctional { t0, realized } => InsiderSection {
                kind: Some("jump".into()),
                source: None,
                t0: Some(*t0),
                kernel: None,
                realized: *realized,
            },
        };
        ConfigFile {
            market: MarketSection {
                r: Some(s.market.r.clone()),
                mu0: Some(s.market.mu0.clone()),
                varrho: Some(s.market.varrho.clone()),
                sigma: Some(s.market.sigma.clone()),
            },
            insurance: InsuranceSection {
                a: Some(s.insurance.a.clone()),
                b: Some(s.insurance.b.clone()),
                lambda: Some(s.insurance.lambda.clone()),
                rho: Some(s.insurance.rho),
                jump_intensity,
                jump_mark,
            },
            insider,
            ambiguity: AmbiguitySection {
                enabled: Some(s.ambiguity.enabled),
            },
            run: RunSection {
                horizon: Some(s.horizon),
                x0: Some(s.x0),
                ..RunSection::default()
            },
        }
    }
}

fn classify_toml_error(e: toml::de::Error) -> Error {
    let msg = e.to_string();
    if let Some(rest) = msg.split("unknown field `").nth(1) {
        if let Some(key) = rest.split('`').next() {
            return Error::UnknownKey { key: key.to_string() };
        }
    }
    let line = msg
        .split("line ")
        .nth(1)
        .and_then(|s| s.split([',', ' ']).next())
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or(0);
    Error::ParseError {
        line,
        message: msg.lines().collect::<Vec<_>>().join("; "),
    }
}

/// Parse config text into a scenario plus run settings.
pub fn parse_config(text: &str) -> Result<LoadedConfig> {
    let table: toml::Table = text.parse().map_err(classify_toml_error)?;
    config_from_table(table)
}

/// Deserialize an already-assembled table (after overrides).
pub fn config_from_table(table: toml::Table) -> Result<LoadedConfig> {
    let file: ConfigFile = table.try_into().map_err(classify_toml_error)?;
    file.into_loaded()
}

/// Parse config text into a raw table, for override application.
pub fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse().map_err(classify_toml_error)
}

/// Apply a dotted `section.key=value` override onto a parsed table.
///
/// The value is parsed as TOML (numbers, booleans, arrays, inline tables);
/// anything that does not parse is taken as a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::ParseError {
        line: 0,
        message: format!("override `{spec}` is not of the form section.key=value"),
    })?;
    let mut parts = path.trim().split('.');
    let section = parts.next().unwrap_or("");
    let key = parts.next().ok_or_else(|| Error::ParseError {
        line: 0,
        message: format!("override `{spec}` must name section.key"),
    })?;
    if parts.next().is_some() {
        return Err(Error::ParseError {
            line: 0,
            message: format!("override `{spec}` nests too deep"),
        });
    }
    let value: toml::Value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(Error::ParseError {
            line: 0,
            message: format!("override section `{section}` is not a table"),
        }),
    }
}

/// Load and parse a config file from disk.
pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Load just the scenario from a config file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    Ok(load_config(path)?.scenario)
}

/// Serialize a scenario to canonical config text. Loading the result and
/// validating reproduces the validated scenario exactly.
pub fn serialize_scenario(s: &Scenario) -> String {
    toml::to_string(&ConfigFile::from_scenario(s)).expect("scenario serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::Interp;
    use crate::testutil::s0;

    const S0_TEXT: &str = r#"
[market]
r = 0.03
mu0 = 0.08
sigma = 0.2

[insurance]
a = 0.3
b = 0.4
lambda = 0.5

[run]
horizon = 1.0
x0 = 1.0
"#;

    #[test]
    fn parses_baseline_with_defaults() {
        let cfg = parse_config(S0_TEXT).unwrap();
        assert_eq!(cfg.scenario, s0());
        let v = validate(&cfg.scenario).unwrap();
        let c = v.consts().unwrap();
        assert_eq!(c.iota, 0.25);
        assert_eq!(c.cbar, 0.5);
        assert_eq!(c.sigma_tilde, 0.2);
        assert!(!v.is_jump());
        assert!(!v.is_large());
    }

    #[test]
    fn missing_sigma_is_a_parse_error() {
        let text = S0_TEXT.replace("sigma = 0.2\n", "");
        match parse_config(&text) {
            Err(Error::ParseError { message, .. }) => assert!(message.contains("sigma")),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_reported_by_name() {
        let text = S0_TEXT.replace("sigma = 0.2", "sigma = 0.2\nfliux = 1.0");
        match parse_config(&text) {
            Err(Error::UnknownKey { key }) => assert_eq!(key, "fliux"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn syntax_error_carries_line_number() {
        let text = "[market]\nr = 0.03\nmu0 = = 2\n";
        match parse_config(text) {
            Err(Error::ParseError { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn roundtrip_is_identity() {
        let mut sc = s0();
        sc.market.sigma = Curve::Piecewise {
            grid: vec![0.0, 0.5],
            values: vec![0.2, 0.25],
            interp: Interp::Linear,
        };
        sc.insurance.rho = -0.3;
        sc.insider = InsiderSpec::BrownianFunctional {
            source: InsiderSource::Wbar,
            kernel: Curve::Constant(1.0),
            t0: 2.0,
            realized: Some(0.3),
        };
        let text = serialize_scenario(&sc);
        let back = parse_config(&text).unwrap().scenario;
        assert_eq!(back, sc);
    }

    #[test]
    fn override_replaces_values_and_sections() {
        let mut table = parse_table(S0_TEXT).unwrap();
        apply_override(&mut table, "ambiguity.enabled=false").unwrap();
        apply_override(&mut table, "market.sigma=0.25").unwrap();
        let cfg = config_from_table(table).unwrap();
        assert!(!cfg.scenario.ambiguity.enabled);
        assert_eq!(cfg.scenario.market.sigma, Curve::Constant(0.25));
    }

    #[test]
    fn override_unknown_key_is_rejected_downstream() {
        let mut table = parse_table(S0_TEXT).unwrap();
        apply_override(&mut table, "market.flux=1.0").unwrap();
        assert!(matches!(
            config_from_table(table),
            Err(Error::UnknownKey { key }) if key == "flux"
        ));
    }

    #[test]
    fn validation_rejects_negative_volatility() {
        let mut sc = s0();
        sc.market.sigma = Curve::Constant(-0.1);
        assert!(matches!(validate(&sc), Err(Error::ConstraintViolation { .. })));
    }

    #[test]
    fn validation_rejects_premium_ordering() {
        let mut sc = s0();
        sc.insurance.a = Curve::Constant(0.6);
        assert!(matches!(validate(&sc), Err(Error::ConstraintViolation { .. })));
    }

    #[test]
    fn validation_rejects_positive_rho() {
        let mut sc = s0();
        sc.insurance.rho = 0.2;
        assert!(matches!(validate(&sc), Err(Error::ConstraintViolation { .. })));
    }

    #[test]
    fn validation_rejects_impact_outside_cap() {
        let mut sc = s0();
        sc.market.varrho = Curve::Constant(0.021); // cap is sigma^2/2 = 0.02
        assert!(matches!(validate(&sc), Err(Error::ConstraintViolation { .. })));
        sc.market.varrho = Curve::Constant(-0.001);
        assert!(matches!(validate(&sc), Err(Error::ConstraintViolation { .. })));
        sc.market.varrho = Curve::Constant(0.0199);
        assert!(validate(&sc).is_ok());
    }

    #[test]
    fn validation_rejects_signal_at_horizon() {
        let mut sc = s0();
        sc.insider = InsiderSpec::BrownianFunctional {
            source: InsiderSource::W1,
            kernel: Curve::Constant(1.0),
            t0: 1.0005,
            realized: None,
        };
        assert!(matches!(validate(&sc), Err(Error::ConstraintViolation { .. })));
    }

    #[test]
    fn validation_rejects_kernel_dead_after_horizon() {
        let mut sc = s0();
        sc.insider = InsiderSpec::BrownianFunctional {
            source: InsiderSource::W1,
            kernel: Curve::Piecewise {
                grid: vec![0.0, 1.0],
                values: vec![1.0, 0.0],
                interp: Interp::Const,
            },
            t0: 2.0,
            realized: None,
        };
        assert!(matches!(validate(&sc), Err(Error::ConstraintViolation { .. })));
    }

    #[test]
    fn jump_case_requires_zero_b() {
        let mut sc = s0();
        sc.insurance.jump2 = Some(JumpSpec { intensity: 0.5, mark: 1.0 });
        assert!(matches!(validate(&sc), Err(Error::ConstraintViolation { .. })));
        sc.insurance.b = Curve::Constant(0.0);
        assert!(validate(&sc).is_ok());
    }

    #[test]
    fn derived_coefficient_identities_hold_on_a_grid() {
        let mut sc = s0();
        sc.market.sigma = Curve::Piecewise {
            grid: vec![0.0, 0.3, 0.7],
            values: vec![0.2, 0.3, 0.25],
            interp: Interp::Linear,
        };
        sc.market.varrho = Curve::Piecewise {
            grid: vec![0.0, 0.5],
            values: vec![0.0, 0.005],
            interp: Interp::Const,
        };
        let v = validate(&sc).unwrap();
        for k in 0..=1000 {
            let t = k as f64 / 1000.0;
            let sig = sc.market.sigma.at(t);
            let lhs = v.iota(t) * sig;
            let rhs = sc.market.mu0.at(t) - sc.market.r.at(t);
            assert!((lhs - rhs).abs() <= 4.0 * f64::EPSILON * rhs.abs().max(1.0));
            let lhs = v.sigma_tilde(t) * sig;
            let rhs = sig * sig - 2.0 * sc.market.varrho.at(t);
            assert!((lhs - rhs).abs() <= 4.0 * f64::EPSILON * rhs.abs().max(1.0));
        }
    }
}
