//! Closed-form saddle strategies and game values for the regimes where the
//! game admits explicit solutions.
//!
//! Regimes are gated strictly: each evaluator checks the scenario shape it
//! was derived for and refuses anything else with a mode mismatch, so a
//! caller can never silently receive formulas outside their domain.
//!
//! Conventions shared by all evaluators:
//!
//! * `iota = (mu0 - r) / sigma` is the market price of risk,
//! * `cbar = (lambda - a + rho b iota) / (sqrt(1-rho^2) b)` prices the
//!   diffusive insurance risk,
//! * `sigma_tilde = sigma - 2 varrho / sigma` absorbs the price impact of a
//!   large insurer,
//! * the adversary's generator components follow the insurer's controls
//!   through the linear relations `theta1 = sigma_tilde pi - rho b kappa -
//!   (iota + phi1)` and `theta2 = -sqrt(1-rho^2) b kappa + rho (sigma -
//!   sigma_tilde) pi / sqrt(1-rho^2) + (cbar - phi2)`.

use std::sync::Arc;

use crate::enlargement::{drift_for, kernel_norm_sq, tilt_for, InformationDrift};
use crate::error::{Error, Result};
use crate::scenario::{InsiderSource, InsiderSpec, ValidatedScenario};
use crate::strategy::{const_fn, ControlPoint, PathState, StrategyPair, ValueReport};

/// Strategies plus the value report they achieve.
#[derive(Clone, Debug)]
pub struct ClosedFormSolution {
    pub strategy: StrategyPair,
    pub value: ValueReport,
}

// ---------------------------------------------------------------------------
// Regime guards
// ---------------------------------------------------------------------------

fn require_continuous(v: &ValidatedScenario, what: &str) -> Result<()> {
    if v.is_jump() {
        return Err(Error::ModeMismatch(format!(
            "{what} requires diffusive insurance risk, scenario has jumps"
        )));
    }
    Ok(())
}

fn require_jump(v: &ValidatedScenario, what: &str) -> Result<()> {
    if !v.is_jump() {
        return Err(Error::ModeMismatch(format!(
            "{what} requires compound Poisson insurance risk"
        )));
    }
    Ok(())
}

fn require_small(v: &ValidatedScenario, what: &str) -> Result<()> {
    if v.is_large() {
        return Err(Error::ModeMismatch(format!(
            "{what} requires zero price impact; use the large-insurer solvers"
        )));
    }
    Ok(())
}

fn require_robust(v: &ValidatedScenario, what: &str) -> Result<()> {
    if !v.scenario().ambiguity.enabled {
        return Err(Error::ModeMismatch(format!(
            "{what} is the robust solution but ambiguity is disabled"
        )));
    }
    Ok(())
}

fn require_neutral(v: &ValidatedScenario, what: &str) -> Result<()> {
    if v.scenario().ambiguity.enabled {
        return Err(Error::ModeMismatch(format!(
            "{what} is the neutral solution but ambiguity is enabled"
        )));
    }
    Ok(())
}

fn require_no_insider(v: &ValidatedScenario, what: &str) -> Result<()> {
    if !matches!(v.scenario().insider, InsiderSpec::None) {
        return Err(Error::ModeMismatch(format!(
            "{what} holds for the natural filtration; scenario declares a signal"
        )));
    }
    Ok(())
}

/// Constant kernel value of the declared Brownian signal, rejecting
/// time-varying kernels for the evaluators derived under a flat kernel.
fn constant_kernel(v: &ValidatedScenario, what: &str) -> Result<f64> {
    match &v.scenario().insider {
        InsiderSpec::BrownianFunctional { kernel, .. } => match kernel.constant() {
            Some(c) if c != 0.0 => Ok(c),
            _ => Err(Error::ModeMismatch(format!(
                "{what} requires a constant nonzero signal kernel"
            ))),
        },
        _ => Err(Error::ModeMismatch(format!(
            "{what} requires a Brownian signal"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Shared integrals
// ---------------------------------------------------------------------------

fn int_rate(v: &ValidatedScenario) -> f64 {
    let t_end = v.scenario().horizon;
    match v.consts() {
        Some(c) => c.r * t_end,
        None => v.integrate_knots(|t| v.scenario().market.r.at(t), 0.0, t_end),
    }
}

/// `int_0^T (iota^2 + cbar^2) dt`, the squared prices of risk.
fn int_quad(v: &ValidatedScenario) -> f64 {
    let t_end = v.scenario().horizon;
    match v.consts() {
        Some(c) => (c.iota * c.iota + c.cbar * c.cbar) * t_end,
        None => v.integrate_knots(
            |t| {
                let i = v.iota(t);
                let c = v.cbar(t);
                i * i + c * c
            },
            0.0,
            t_end,
        ),
    }
}

// ---------------------------------------------------------------------------
// Diffusive case, no price impact
// ---------------------------------------------------------------------------

/// Robust saddle for the diffusive small-insurer game on the natural
/// filtration.
pub fn small_robust_no_insider(v: &ValidatedScenario) -> Result<ClosedFormSolution> {
    let what = "small_robust_no_insider";
    require_continuous(v, what)?;
    require_small(v, what)?;
    require_no_insider(v, what)?;
    require_robust(v, what)?;

    let strategy = small_robust_base_strategy(v);
    let value = ValueReport::from_components(
        v.scenario().x0.ln(),
        int_rate(v),
        0.25 * int_quad(v),
        0.0,
    );
    Ok(ClosedFormSolution { strategy, value })
}

fn small_robust_base_pi(v: &ValidatedScenario, t: f64) -> f64 {
    let s = v.scenario();
    let rho = s.insurance.rho;
    let sig = s.market.sigma.at(t);
    let b = s.insurance.b.at(t);
    let prem = s.insurance.lambda.at(t) - s.insurance.a.at(t) + rho * b * v.iota(t);
    v.iota(t) / (2.0 * sig) + rho * prem / (2.0 * (1.0 - rho * rho) * sig * b)
}

fn small_robust_base_kappa(v: &ValidatedScenario, t: f64) -> f64 {
    let s = v.scenario();
    let rho = s.insurance.rho;
    let b = s.insurance.b.at(t);
    let prem = s.insurance.lambda.at(t) - s.insurance.a.at(t) + rho * b * v.iota(t);
    prem / (2.0 * (1.0 - rho * rho) * b * b)
}

fn small_robust_base_strategy(v: &ValidatedScenario) -> StrategyPair {
    let v1 = v.clone();
    let v2 = v.clone();
    let v3 = v.clone();
    let v4 = v.clone();
    StrategyPair {
        pi: Arc::new(move |t, _| small_robust_base_pi(&v1, t)),
        kappa: Arc::new(move |t, _| small_robust_base_kappa(&v2, t)),
        theta: [
            Arc::new(move |t, _: &PathState| -v3.iota(t) / 2.0),
            Arc::new(move |t, _: &PathState| v4.cbar(t) / 2.0),
            const_fn(0.0),
            const_fn(0.0),
        ],
    }
}

/// Neutral optimum for the diffusive small-insurer problem on the natural
/// filtration: exactly twice the robust controls, no generator tilt.
pub fn small_neutral_no_insider(v: &ValidatedScenario) -> Result<ClosedFormSolution> {
    let what = "small_neutral_no_insider";
    require_continuous(v, what)?;
    require_small(v, what)?;
    require_no_insider(v, what)?;
    require_neutral(v, what)?;

    let v1 = v.clone();
    let v2 = v.clone();
    let strategy = StrategyPair {
        pi: Arc::new(move |t, _| 2.0 * small_robust_base_pi(&v1, t)),
        kappa: Arc::new(move |t, _| 2.0 * small_robust_base_kappa(&v2, t)),
        theta: [const_fn(0.0), const_fn(0.0), const_fn(0.0), const_fn(0.0)],
    };
    let value = ValueReport::from_components(
        v.scenario().x0.ln(),
        int_rate(v),
        0.5 * int_quad(v),
        0.0,
    );
    Ok(ClosedFormSolution { strategy, value })
}

// ---------------------------------------------------------------------------
// Neutral feedback in tilde coordinates (shared by every neutral regime)
// ---------------------------------------------------------------------------

/// Neutral optimal controls given the effective prices of risk
/// `phi_tilde1 = iota + phi1` and `phi_tilde2 = cbar - phi2`.
///
/// Solves the first-order system of the neutral problem for any admissible
/// correlation and price impact. Fails on the singular surface
/// `sigma_tilde / sigma = rho^2`.
pub fn neutral_controls(
    v: &ValidatedScenario,
    t: f64,
    phi_tilde1: f64,
    phi_tilde2: f64,
) -> Result<(f64, f64)> {
    let s = v.scenario();
    let rho = s.insurance.rho;
    let sig = s.market.sigma.at(t);
    let sig_t = v.sigma_tilde(t);
    let b = s.insurance.b.at(t);
    let ratio = sig_t / sig - rho * rho;
    if ratio.abs() < 1e-10 {
        return Err(Error::SingularConfiguration(format!(
            "sigma_tilde/sigma equals rho^2 at t={t}"
        )));
    }
    let om = (1.0 - rho * rho).sqrt();
    let pi = ((1.0 - rho * rho) * phi_tilde1 + rho * om * phi_tilde2) / (ratio * sig);
    let kappa = (sig_t * om * phi_tilde2 + rho * (sig - sig_t) * phi_tilde1)
        / ((sig_t - rho * rho * sig) * b);
    Ok((pi, kappa))
}

fn neutral_strategy(v: &ValidatedScenario, drift: InformationDrift) -> StrategyPair {
    let d1 = drift.clone();
    let d2 = drift;
    let v1 = v.clone();
    let v2 = v.clone();
    StrategyPair {
        pi: Arc::new(move |t, st: &PathState| {
            let pt1 = v1.iota(t) + d1.phi1(t, st);
            let pt2 = v1.cbar(t) - d1.phi2(t, st);
            neutral_controls(&v1, t, pt1, pt2).map(|(pi, _)| pi).unwrap_or(f64::NAN)
        }),
        kappa: Arc::new(move |t, st: &PathState| {
            let pt1 = v2.iota(t) + d2.phi1(t, st);
            let pt2 = v2.cbar(t) - d2.phi2(t, st);
            neutral_controls(&v2, t, pt1, pt2).map(|(_, k)| k).unwrap_or(f64::NAN)
        }),
        theta: [const_fn(0.0), const_fn(0.0), const_fn(0.0), const_fn(0.0)],
    }
}

// ---------------------------------------------------------------------------
// Diffusive insider regimes, no price impact
// ---------------------------------------------------------------------------

struct BrownianSignal {
    kernel: crate::curves::Curve,
    t0: f64,
    source: InsiderSource,
}

fn brownian_signal(v: &ValidatedScenario, what: &str) -> Result<BrownianSignal> {
    match &v.scenario().insider {
        InsiderSpec::BrownianFunctional { source, kernel, t0, .. } => Ok(BrownianSignal {
            kernel: kernel.clone(),
            t0: *t0,
            source: *source,
        }),
        _ => Err(Error::ModeMismatch(format!(
            "{what} requires a Brownian signal"
        ))),
    }
}

/// Information gain of a flat-kernel signal for the robust game:
/// a log variance-contraction term, a linear-in-horizon term, and a squared
/// premium integral. `premium_integral` is `int_0^T (lambda-a)/b` for the
/// surplus signal and `int_0^T iota` for the asset signal.
fn robust_insider_gain(t_end: f64, t0: f64, premium_integral: f64) -> f64 {
    let span = 2.0 * t0 - t_end;
    0.5 * (1.0 / (1.0 - t_end * t_end / (span * span))).ln()
        + t_end / (2.0 * span)
        + premium_integral * premium_integral / (4.0 * span)
}

/// Robust saddle when the insurer observes a future integral of the
/// combined surplus driver.
pub fn small_robust_insider_insurance(v: &ValidatedScenario) -> Result<ClosedFormSolution> {
    let what = "small_robust_insider_insurance";
    require_continuous(v, what)?;
    require_small(v, what)?;
    require_robust(v, what)?;
    let sig = brownian_signal(v, what)?;
    if sig.source != InsiderSource::Wbar {
        return Err(Error::ModeMismatch(format!(
            "{what} requires the signal to ride the surplus driver"
        )));
    }

    let t_end = v.scenario().horizon;
    let t0 = sig.t0;
    let rho = v.scenario().insurance.rho;
    let om = (1.0 - rho * rho).sqrt();

    // half the kernel-weighted premium left to earn before the horizon
    let deferred = {
        let v = v.clone();
        let kernel = sig.kernel.clone();
        move |t: f64| -> f64 {
            match (v.consts(), kernel.constant()) {
                (Some(c), Some(k)) => 0.5 * k * (c.lambda - c.a) / c.b * (t_end - t),
                _ => {
                    0.5 * v.integrate_knots(
                        |s| {
                            kernel.at(s)
                                * (v.scenario().insurance.lambda.at(s)
                                    - v.scenario().insurance.a.at(s))
                                / v.scenario().insurance.b.at(s)
                        },
                        t,
                        t_end,
                    )
                }
            }
        }
    };
    let tail_fixed = kernel_norm_sq(&sig.kernel, t_end, t0);

    let correction = {
        let kernel = sig.kernel.clone();
        let deferred = deferred.clone();
        move |t: f64, st: &PathState| -> (f64, f64, f64) {
            // (kappa shift, A/M, B/N) at this point
            let n_t = kernel_norm_sq(&kernel, t, t0);
            let m = n_t + tail_fixed;
            let b_res = st.y0 - st.run_wbar;
            let a_res = b_res - deferred(t);
            (kernel.at(t) * a_res / m, a_res / m, b_res / n_t)
        }
    };

    let (v1, v2, v3) = (v.clone(), v.clone(), v.clone());
    let (c1, c2, c3) = (correction.clone(), correction.clone(), correction);
    let k1 = sig.kernel.clone();
    let k2 = sig.kernel.clone();
    let strategy = StrategyPair {
        pi: {
            let v = v.clone();
            Arc::new(move |t, _| small_robust_base_pi(&v, t))
        },
        kappa: Arc::new(move |t, st| {
            let b = v1.scenario().insurance.b.at(t);
            small_robust_base_kappa(&v1, t) - c1(t, st).0 / b
        }),
        theta: [
            Arc::new(move |t, st: &PathState| {
                let (_, am, bn) = c2(t, st);
                -v2.iota(t) / 2.0 + rho * k1.at(t) * (am - bn)
            }),
            Arc::new(move |t, st: &PathState| {
                let (_, am, bn) = c3(t, st);
                v3.cbar(t) / 2.0 + om * k2.at(t) * (am - bn)
            }),
            const_fn(0.0),
            const_fn(0.0),
        ],
    };

    let value = match (v.consts(), sig.kernel.constant()) {
        (Some(c), Some(_)) if rho == 0.0 => {
            let premium = (c.lambda - c.a) / c.b * t_end;
            ValueReport::from_components(
                v.scenario().x0.ln(),
                int_rate(v),
                0.25 * int_quad(v),
                robust_insider_gain(t_end, t0, premium),
            )
        }
        _ => ValueReport::mc_only(),
    };
    Ok(ClosedFormSolution { strategy, value })
}

/// Robust saddle when the insurer observes a future integral of the asset
/// driver. Derived under a flat kernel; other kernels are refused.
pub fn small_robust_insider_asset(v: &ValidatedScenario) -> Result<ClosedFormSolution> {
    let what = "small_robust_insider_asset";
    require_continuous(v, what)?;
    require_small(v, what)?;
    require_robust(v, what)?;
    let sig = brownian_signal(v, what)?;
    if sig.source != InsiderSource::W1 {
        return Err(Error::ModeMismatch(format!(
            "{what} requires the signal to ride the asset driver"
        )));
    }
    let k = constant_kernel(v, what)?;
    let t_end = v.scenario().horizon;
    let t0 = sig.t0;
    let rho = v.scenario().insurance.rho;
    let om = (1.0 - rho * rho).sqrt();

    let deferred_iota = {
        let v = v.clone();
        move |t: f64| -> f64 {
            match v.consts() {
                Some(c) => 0.5 * c.iota * (t_end - t),
                None => 0.5 * v.integrate_knots(|s| v.iota(s), t, t_end),
            }
        }
    };

    // corrections expressed through the normalized signal (flat unit kernel)
    let pi_corr = {
        let d = deferred_iota.clone();
        move |t: f64, st: &PathState, sig_t: f64| -> f64 {
            let residual = (st.y0 - st.run_w1) / k;
            (residual + d(t)) / (sig_t * ((t0 - t) + (t0 - t_end)))
        }
    };

    let (v1, v2, v3, v4) = (v.clone(), v.clone(), v.clone(), v.clone());
    let (p1, p2) = (pi_corr.clone(), pi_corr);
    let strategy = StrategyPair {
        pi: Arc::new(move |t, st| {
            let sig_t = v1.scenario().market.sigma.at(t);
            small_robust_base_pi(&v1, t) + p1(t, st, sig_t)
        }),
        kappa: {
            let v = v.clone();
            Arc::new(move |t, _| small_robust_base_kappa(&v, t))
        },
        theta: [
            Arc::new(move |t, st: &PathState| {
                let s = v2.scenario();
                let sig_t = s.market.sigma.at(t);
                let b = s.insurance.b.at(t);
                let pi = small_robust_base_pi(&v2, t) + p2(t, st, sig_t);
                let kap = small_robust_base_kappa(&v2, t);
                let phi1 = (st.y0 - st.run_w1) / (k * (t0 - t));
                sig_t * pi - rho * b * kap - (v2.iota(t) + phi1)
            }),
            Arc::new(move |t, _: &PathState| {
                // sigma_tilde = sigma here, so the pi term drops out
                let b = v3.scenario().insurance.b.at(t);
                -om * b * small_robust_base_kappa(&v3, t) + v3.cbar(t)
            }),
            const_fn(0.0),
            const_fn(0.0),
        ],
    };
    let value = match v4.consts() {
        Some(c) if rho == 0.0 => {
            let premium = c.iota * t_end;
            ValueReport::from_components(
                v.scenario().x0.ln(),
                int_rate(v),
                0.25 * int_quad(v),
                robust_insider_gain(t_end, t0, premium),
            )
        }
        _ => ValueReport::mc_only(),
    };
    Ok(ClosedFormSolution { strategy, value })
}

/// Neutral optimum with a Brownian signal on either driver: the neutral
/// feedback evaluated at the insider-tilted prices of risk.
pub fn small_neutral_insider(v: &ValidatedScenario) -> Result<ClosedFormSolution> {
    let what = "small_neutral_insider";
    require_continuous(v, what)?;
    require_small(v, what)?;
    require_neutral(v, what)?;
    let sig = brownian_signal(v, what)?;
    let drift = drift_for(&v.scenario().insider, v.scenario().insurance.rho)?;
    let strategy = neutral_strategy(v, drift);

    let t_end = v.scenario().horizon;
    let value = match (v.consts(), sig.kernel.constant()) {
        (Some(_), Some(_)) => ValueReport::from_components(
            v.scenario().x0.ln(),
            int_rate(v),
            0.5 * int_quad(v),
            0.5 * (sig.t0 / (sig.t0 - t_end)).ln(),
        ),
        _ => ValueReport::mc_only(),
    };
    Ok(ClosedFormSolution { strategy, value })
}

// ---------------------------------------------------------------------------
// Large insurer (price impact), neutral
// ---------------------------------------------------------------------------

/// Neutral optimum for a large insurer whose investment moves the drift.
/// Supports no signal or a flat-kernel Brownian signal on either driver.
pub fn large_neutral(v: &ValidatedScenario) -> Result<ClosedFormSolution> {
    let what = "large_neutral";
    require_continuous(v, what)?;
    require_neutral(v, what)?;

    let rho = v.scenario().insurance.rho;
    let drift = drift_for(&v.scenario().insider, rho)?;
    // probe the singular surface once per declared knot and both endpoints
    let t_end = v.scenario().horizon;
    for k in 0..=16 {
        let t = t_end * k as f64 / 16.0;
        neutral_controls(v, t, v.iota(t), v.cbar(t))?;
    }
    let strategy = neutral_strategy(v, drift);

    let base_quad = |t: f64| -> f64 {
        let s = v.scenario();
        let sig = s.market.sigma.at(t);
        let sig_t = v.sigma_tilde(t);
        let q = sig / sig_t;
        let om2 = 1.0 - rho * rho;
        let pt1 = v.iota(t);
        let pt2 = v.cbar(t);
        (((1.0 - 2.0 * rho * rho) * q + rho * rho) * pt1 * pt1
            + 2.0 * rho * om2.sqrt() * (q - 1.0) * pt1 * pt2
            + om2 * pt2 * pt2)
            / (1.0 - rho * rho * q)
    };

    let value = match &v.scenario().insider {
        InsiderSpec::None => {
            let premium = match v.consts() {
                Some(c) => {
                    let q = c.sigma / c.sigma_tilde;
                    let om2 = 1.0 - rho * rho;
                    0.5 * ((((1.0 - 2.0 * rho * rho) * q + rho * rho) * c.iota * c.iota
                        + 2.0 * rho * om2.sqrt() * (q - 1.0) * c.iota * c.cbar
                        + om2 * c.cbar * c.cbar)
                        / (1.0 - rho * rho * q))
                        * t_end
                }
                None => 0.5 * v.integrate_knots(base_quad, 0.0, t_end),
            };
            ValueReport::from_components(v.scenario().x0.ln(), int_rate(v), premium, 0.0)
        }
        InsiderSpec::BrownianFunctional { kernel, t0, .. }
            if rho == 0.0 && v.consts().is_some() && kernel.constant().is_some() =>
        {
            let c = v.consts().unwrap();
            let q = c.sigma / c.sigma_tilde;
            let premium = 0.5 * (q * c.iota * c.iota + c.cbar * c.cbar) * t_end;
            ValueReport::from_components(
                v.scenario().x0.ln(),
                int_rate(v),
                premium,
                0.5 * (t0 / (t0 - t_end)).ln(),
            )
        }
        _ => ValueReport::mc_only(),
    };
    Ok(ClosedFormSolution { strategy, value })
}

// ---------------------------------------------------------------------------
// Jump case
// ---------------------------------------------------------------------------

struct JumpCoeffs {
    gamma2: f64,
    lam_bar: f64,
}

fn jump_coeffs(v: &ValidatedScenario, what: &str) -> Result<JumpCoeffs> {
    require_jump(v, what)?;
    let j = v.scenario().insurance.jump2.as_ref().unwrap();
    Ok(JumpCoeffs { gamma2: j.mark, lam_bar: j.intensity })
}

fn jump_robust_kappa(prem: f64, g2: f64, lb: f64) -> f64 {
    prem / (prem * g2 + lb * g2 * g2 + (lb * prem * g2.powi(3) + lb * lb * g2.powi(4)).sqrt())
}

fn jump_neutral_kappa(prem: f64, g2: f64, lb: f64) -> f64 {
    prem / (prem * g2 + lb * g2 * g2)
}

/// Robust saddle for the compound Poisson game on the natural filtration.
/// The value has no closed form in this regime; reports are Monte Carlo
/// only.
pub fn jump_robust_no_insider(v: &ValidatedScenario) -> Result<ClosedFormSolution> {
    let what = "jump_robust_no_insider";
    require_small(v, what)?;
    require_no_insider(v, what)?;
    require_robust(v, what)?;
    let jc = jump_coeffs(v, what)?;

    let (v1, v2, v3) = (v.clone(), v.clone(), v.clone());
    let g2 = jc.gamma2;
    let lb = jc.lam_bar;
    let strategy = StrategyPair {
        pi: Arc::new(move |t, _| v1.iota(t) / (2.0 * v1.scenario().market.sigma.at(t))),
        kappa: Arc::new(move |t, _| {
            let s = v2.scenario();
            jump_robust_kappa(s.insurance.lambda.at(t) - s.insurance.a.at(t), g2, lb)
        }),
        theta: [
            Arc::new(move |t, _: &PathState| -v3.iota(t) / 2.0),
            const_fn(0.0),
            const_fn(0.0),
            {
                let v = v.clone();
                Arc::new(move |t, _: &PathState| {
                    let s = v.scenario();
                    let prem = s.insurance.lambda.at(t) - s.insurance.a.at(t);
                    let kap = jump_robust_kappa(prem, g2, lb);
                    (prem / (lb * g2)) * (1.0 - kap * g2) - kap * g2
                })
            },
        ],
    };
    Ok(ClosedFormSolution { strategy, value: ValueReport::mc_only() })
}

/// Neutral optimum for the compound Poisson problem on the natural
/// filtration, with its explicit expected log wealth.
pub fn jump_neutral_no_insider(v: &ValidatedScenario) -> Result<ClosedFormSolution> {
    let what = "jump_neutral_no_insider";
    require_small(v, what)?;
    require_no_insider(v, what)?;
    require_neutral(v, what)?;
    let jc = jump_coeffs(v, what)?;

    let (v1, v2) = (v.clone(), v.clone());
    let g2 = jc.gamma2;
    let lb = jc.lam_bar;
    let strategy = StrategyPair {
        pi: Arc::new(move |t, _| v1.iota(t) / v1.scenario().market.sigma.at(t)),
        kappa: Arc::new(move |t, _| {
            let s = v2.scenario();
            jump_neutral_kappa(s.insurance.lambda.at(t) - s.insurance.a.at(t), g2, lb)
        }),
        theta: [const_fn(0.0), const_fn(0.0), const_fn(0.0), const_fn(0.0)],
    };

    let t_end = v.scenario().horizon;
    let premium = match v.consts() {
        Some(c) => {
            let prem = c.lambda - c.a;
            let kap = jump_neutral_kappa(prem, g2, lb);
            (0.5 * c.iota * c.iota
                + prem * kap
                + lb * kap * g2
                + lb * (1.0 - kap * g2).ln())
                * t_end
        }
        None => v.integrate_knots(
            |t| {
                let s = v.scenario();
                let prem = s.insurance.lambda.at(t) - s.insurance.a.at(t);
                let kap = jump_neutral_kappa(prem, g2, lb);
                let i = v.iota(t);
                0.5 * i * i + prem * kap + lb * kap * g2 + lb * (1.0 - kap * g2).ln()
            },
            0.0,
            t_end,
        ),
    };
    let value =
        ValueReport::from_components(v.scenario().x0.ln(), int_rate(v), premium, 0.0);
    Ok(ClosedFormSolution { strategy, value })
}

/// Strategies for the compound Poisson case with insider information.
///
/// Covers: neutral with either signal type, robust with an asset-driver
/// signal (flat kernel), and robust with a claim-count signal behind the
/// experimental flag (evaluated by an exact series, constant parameters
/// only). Values in these regimes are Monte Carlo only.
pub fn jump_insider_strategies(
    v: &ValidatedScenario,
    experimental: bool,
) -> Result<ClosedFormSolution> {
    let what = "jump_insider_strategies";
    require_small(v, what)?;
    let jc = jump_coeffs(v, what)?;
    let robust = v.scenario().ambiguity.enabled;
    let g2 = jc.gamma2;
    let lb = jc.lam_bar;

    let strategy = match &v.scenario().insider {
        InsiderSpec::None => {
            return Err(Error::ModeMismatch(format!(
                "{what} requires an insider signal"
            )))
        }
        InsiderSpec::BrownianFunctional { source, kernel, t0, .. } => {
            if *source != InsiderSource::W1 {
                return Err(Error::ModeMismatch(format!(
                    "{what} supports asset-driver signals in the jump case"
                )));
            }
            let t0 = *t0;
            if robust {
                let k = constant_kernel(v, what)?;
                let t_end = v.scenario().horizon;
                let (v1, v2, v3) = (v.clone(), v.clone(), v.clone());
                let v4 = v.clone();
                StrategyPair {
                    pi: Arc::new(move |t, st| {
                        let sig_t = v1.scenario().market.sigma.at(t);
                        let residual = (st.y0 - st.run_w1) / k;
                        let defer = match v1.consts() {
                            Some(c) => 0.5 * c.iota * (t_end - t),
                            None => 0.5 * v1.integrate_knots(|s| v1.iota(s), t, t_end),
                        };
                        v1.iota(t) / (2.0 * sig_t)
                            + (residual + defer) / (sig_t * ((t0 - t) + (t0 - t_end)))
                    }),
                    kappa: Arc::new(move |t, _| {
                        let s = v2.scenario();
                        jump_robust_kappa(
                            s.insurance.lambda.at(t) - s.insurance.a.at(t),
                            g2,
                            lb,
                        )
                    }),
                    theta: [
                        Arc::new(move |t, st: &PathState| {
                            // theta1 = sigma pi - iota - phi1 in this regime
                            let sig_t = v3.scenario().market.sigma.at(t);
                            let residual = (st.y0 - st.run_w1) / k;
                            let defer = match v3.consts() {
                                Some(c) => 0.5 * c.iota * (t_end - t),
                                None => 0.5 * v3.integrate_knots(|s| v3.iota(s), t, t_end),
                            };
                            let pi = v3.iota(t) / (2.0 * sig_t)
                                + (residual + defer) / (sig_t * ((t0 - t) + (t0 - t_end)));
                            sig_t * pi - v3.iota(t) - residual / (t0 - t)
                        }),
                        const_fn(0.0),
                        const_fn(0.0),
                        Arc::new(move |t, _: &PathState| {
                            let s = v4.scenario();
                            let prem = s.insurance.lambda.at(t) - s.insurance.a.at(t);
                            let kap = jump_robust_kappa(prem, g2, lb);
                            (prem / (lb * g2)) * (1.0 - kap * g2) - kap * g2
                        }),
                    ],
                }
            } else {
                let kernel = kernel.clone();
                let (v1, v2) = (v.clone(), v.clone());
                StrategyPair {
                    pi: Arc::new(move |t, st| {
                        let sig_t = v1.scenario().market.sigma.at(t);
                        let tail = kernel_norm_sq(&kernel, t, t0);
                        v1.iota(t) / sig_t
                            + kernel.at(t) * (st.y0 - st.run_w1) / (sig_t * tail)
                    }),
                    kappa: Arc::new(move |t, _| {
                        let s = v2.scenario();
                        jump_neutral_kappa(
                            s.insurance.lambda.at(t) - s.insurance.a.at(t),
                            g2,
                            lb,
                        )
                    }),
                    theta: [const_fn(0.0), const_fn(0.0), const_fn(0.0), const_fn(0.0)],
                }
            }
        }
        InsiderSpec::JumpFunctional { t0, .. } => {
            let t0 = *t0;
            if robust {
                if !experimental {
                    return Err(Error::ExperimentalFeature(
                        "robust claim-count signal needs the experimental flag".into(),
                    ));
                }
                let c = v.consts().ok_or_else(|| {
                    Error::ModeMismatch(format!(
                        "{what}: robust claim-count series needs constant parameters"
                    ))
                })?;
                let t_end = v.scenario().horizon;
                let prem = c.lambda - c.a;
                let (v1, v2) = (v.clone(), v.clone());
                StrategyPair {
                    pi: Arc::new(move |t, _| v1.iota(t) / (2.0 * v1.scenario().market.sigma.at(t))),
                    kappa: Arc::new(move |t, st| {
                        let base = jump_robust_kappa(prem, g2, lb);
                        base
                            - claim_signal_kappa_shift(
                                prem, g2, lb, t, t_end, t0, st.eta2, st.y0,
                            )
                    }),
                    theta: [
                        Arc::new(move |t, _: &PathState| -v2.iota(t) / 2.0),
                        const_fn(0.0),
                        const_fn(0.0),
                        {
                            let v = v.clone();
                            Arc::new(move |t, st: &PathState| {
                                let s = v.scenario();
                                let prem =
                                    s.insurance.lambda.at(t) - s.insurance.a.at(t);
                                let base = jump_robust_kappa(prem, g2, lb);
                                let kap = base
                                    - claim_signal_kappa_shift(
                                        prem, g2, lb, t, t_end, t0, st.eta2, st.y0,
                                    );
                                (prem / (lb * g2)) * (1.0 - kap * g2) - kap * g2
                            })
                        },
                    ],
                }
            } else {
                let (v1, v2) = (v.clone(), v.clone());
                StrategyPair {
                    pi: Arc::new(move |t, _| v1.iota(t) / v1.scenario().market.sigma.at(t)),
                    kappa: Arc::new(move |t, st| {
                        let s = v2.scenario();
                        let prem = s.insurance.lambda.at(t) - s.insurance.a.at(t);
                        // the signal enters through the excess of the bridge
                        // rate over the base intensity
                        let excess = (st.y0 - st.eta2) / (t0 - t) - lb;
                        jump_neutral_kappa(prem, g2, lb) - excess / (prem + lb * g2)
                    }),
                    theta: [const_fn(0.0), const_fn(0.0), const_fn(0.0), const_fn(0.0)],
                }
            }
        }
    };
    Ok(ClosedFormSolution { strategy, value: ValueReport::mc_only() })
}

/// Exposure shift induced by knowing the claim count at `t0`, evaluated by
/// the exact series over the number of claims arriving before the horizon.
///
/// The conditional kernels reduce to Poisson mass functions and every
/// factor independent of the claim count cancels between numerator and
/// denominator.
fn claim_signal_kappa_shift(
    prem: f64,
    g2: f64,
    lb: f64,
    t: f64,
    t_end: f64,
    t0: f64,
    eta2: f64,
    y0: f64,
) -> f64 {
    let remaining = (y0 - eta2).round() as i64;
    if remaining < 0 {
        return f64::NAN;
    }
    let mu1 = lb * (t_end - t);
    let mu2 = lb * (t0 - t_end);
    let w = (1.0 + prem / (lb * g2)).sqrt();
    // ln-space Poisson masses keep the series stable for large counts
    let ln_pois = |k: i64, mu: f64| -> f64 {
        -mu + k as f64 * mu.ln() - ln_factorial(k)
    };
    let mut denom = 0.0;
    let mut numer = 0.0;
    for k in 0..=remaining {
        let base = (ln_pois(k, mu1) + k as f64 * w.ln()).exp();
        denom += base * (0.5 * ln_pois(remaining - k, mu2)).exp();
        if k < remaining {
            numer += base * (0.5 * ln_pois(remaining - k - 1, mu2)).exp();
        }
    }
    let q_gap = numer - denom;
    lb.sqrt() * q_gap / ((prem * g2 + lb * g2 * g2).sqrt() * denom)
}

fn ln_factorial(k: i64) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

// ---------------------------------------------------------------------------
// Nested Monte Carlo cross-check for the robust jump asset-signal exposure
// ---------------------------------------------------------------------------

/// Robust investment fraction for the jump case with an asset-driver signal,
/// evaluated by nested Monte Carlo on the conditional-expectation ratio.
///
/// `budget` caps the number of inner samples; exceeding it fails rather than
/// silently truncating.
pub fn jump_robust_asset_pi_nested_mc(
    v: &ValidatedScenario,
    t: f64,
    state: &PathState,
    n_inner: u64,
    budget: u64,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    use rand_distr::StandardNormal;

    let what = "jump_robust_asset_pi_nested_mc";
    require_small(v, what)?;
    jump_coeffs(v, what)?;
    require_robust(v, what)?;
    let sigb = brownian_signal(v, what)?;
    if sigb.source != InsiderSource::W1 {
        return Err(Error::ModeMismatch(format!("{what} needs an asset signal")));
    }
    if n_inner > budget {
        return Err(Error::NestedMcBudgetExceeded(format!(
            "{n_inner} inner samples exceed budget {budget}"
        )));
    }
    let c = v.consts().ok_or_else(|| {
        Error::ModeMismatch(format!("{what} needs constant parameters"))
    })?;
    let k = constant_kernel(v, what)?;
    let t_end = v.scenario().horizon;
    let tau = t_end - t;
    let tail_t = kernel_norm_sq(&sigb.kernel, t_end, sigb.t0);

    // Brownian exponent of the pricing kernel over [t, T] plus the square
    // root of the conditional signal density at T; jump factors cancel in
    // the ratio and are omitted.
    let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::InnerMc, 0);
    let mut num = 0.0;
    let mut den = 0.0;
    for _ in 0..n_inner {
        let dw: f64 = {
            let z: f64 = rng.sample(StandardNormal);
            z * tau.sqrt()
        };
        let run_t_end = state.run_w1 + k * dw;
        let resid = state.y0 - run_t_end;
        let weight = (-0.5 * c.iota * dw - resid * resid / (4.0 * tail_t)).exp();
        num += weight * resid;
        den += weight;
    }
    let ratio = num / den;
    Ok(c.iota / (2.0 * c.sigma) + pi_from_ratio(c, k, tail_t, ratio))
}

fn pi_from_ratio(c: &crate::scenario::ConstCoeffs, k: f64, tail_t: f64, ratio: f64) -> f64 {
    // ratio estimates E[sqrt-kernel-weighted residual] / E[sqrt-kernel];
    // the exposure correction divides by 2 sigma |kernel|^2_[T, T0] and
    // multiplies by the kernel value
    k * ratio / (2.0 * c.sigma * tail_t)
}

// ---------------------------------------------------------------------------
// Critical future time
// ---------------------------------------------------------------------------

/// Which market the insider's signal concerns when locating the critical
/// signal time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticalTimeKind {
    /// Signal about the surplus driver.
    Insurance,
    /// Signal about the asset driver.
    Asset,
}

/// The gain-gap equation whose root is the critical signal time: applicable
/// under constant parameters, independent drivers, and unit horizon.
fn gain_gap_equation(
    v: &ValidatedScenario,
    kind: CriticalTimeKind,
    what: &str,
) -> Result<impl Fn(f64) -> f64> {
    require_continuous(v, what)?;
    require_small(v, what)?;
    let c = v.consts().ok_or_else(|| {
        Error::ModeMismatch(format!("{what} needs constant parameters"))
    })?;
    if v.scenario().insurance.rho != 0.0 {
        return Err(Error::ModeMismatch(format!(
            "{what} is derived for independent drivers"
        )));
    }
    if (v.scenario().horizon - 1.0).abs() > 1e-12 {
        return Err(Error::ModeMismatch(format!("{what} is derived for unit horizon")));
    }
    let i2 = c.iota * c.iota;
    let c2 = c.cbar * c.cbar;
    let bracketed = match kind {
        CriticalTimeKind::Insurance => c2,
        CriticalTimeKind::Asset => i2,
    };
    Ok(move |x: f64| {
        let s = 2.0 * x - 1.0;
        i2 + c2 - (bracketed + 2.0) / s + 2.0 * (1.0 - 1.0 / (s * s)).ln()
    })
}

/// The signal time `t0` at which a robust insider's advantage crosses the
/// neutral insider's: the root of the gain-gap equation beyond the horizon.
///
/// Derived for constant parameters, independent drivers, and unit horizon.
pub fn critical_future_time(v: &ValidatedScenario, kind: CriticalTimeKind) -> Result<f64> {
    let what = "critical_future_time";
    let f = gain_gap_equation(v, kind, what)?;
    crate::numerics::bisect(&f, 1.0 + 1e-3, 1e6, 1e-13, 1e-10, what)
}

/// Signed residual of the gain-gap equation at a candidate signal time,
/// for reporting how sharply a computed root closes the equation.
pub fn critical_time_gap(
    v: &ValidatedScenario,
    kind: CriticalTimeKind,
    t0: f64,
) -> Result<f64> {
    Ok(gain_gap_equation(v, kind, "critical_time_gap")?(t0))
}

// ---------------------------------------------------------------------------
// First-order residuals
// ---------------------------------------------------------------------------

/// Residuals of the pointwise first-order conditions at one `(t, state)`.
///
/// `d_pi` and `d_kappa` are the insurer's stationarity residuals; the
/// adversary residuals compare `theta` against its linear follower maps
/// (`d_theta4` uses the jump balance `ln(1+theta4) + ln(1-kappa gamma2)`).
/// All vanish at a saddle.
#[derive(Clone, Copy, Debug, Default)]
pub struct FocResiduals {
    pub d_pi: f64,
    pub d_kappa: f64,
    pub d_theta1: f64,
    pub d_theta2: f64,
    pub d_theta4: Option<f64>,
}

/// Evaluate the first-order residuals for a control point under a scenario.
pub fn foc_residuals(
    v: &ValidatedScenario,
    t: f64,
    state: &PathState,
    ctrl: &ControlPoint,
) -> Result<FocResiduals> {
    let s = v.scenario();
    let robust = s.ambiguity.enabled;
    let drift = drift_for(&s.insider, s.insurance.rho)?;
    let phi1 = drift.phi1(t, state);
    let phi2 = drift.phi2(t, state);
    let rho = s.insurance.rho;
    let om = (1.0 - rho * rho).sqrt();
    let sig = s.market.sigma.at(t);
    let sig_t = v.sigma_tilde(t);
    let b = s.insurance.b.at(t);
    let prem = s.insurance.lambda.at(t) - s.insurance.a.at(t);
    let (pi, kap) = (ctrl.pi, ctrl.kappa);
    let th = ctrl.theta;

    let d_pi = s.market.mu0.at(t) + 2.0 * s.market.varrho.at(t) * pi - s.market.r.at(t)
        - sig * sig * pi
        + rho * sig * b * kap
        + sig * phi1
        + sig * th[0];

    let (d_kappa, d_theta4) = if v.is_jump() {
        let j = s.insurance.jump2.as_ref().unwrap();
        let (g2, lb) = (j.mark, j.intensity);
        let tilt = tilt_for(v);
        let lam_h = tilt.intensity(t, state);
        let dk = prem - kap * g2 * g2 * lb / (1.0 - kap * g2)
            - g2 * lam_h * (1.0 + th[3]) / (1.0 - kap * g2)
            + g2 * lb / (1.0 - kap * g2);
        let dt4 = if robust {
            Some((1.0 + th[3]).ln() + (1.0 - kap * g2).ln())
        } else {
            Some(th[3])
        };
        (dk, dt4)
    } else {
        let dk = prem + rho * sig * b * pi
            - b * b * kap
            - rho * b * (phi1 + th[0])
            - om * b * (phi2 + th[1]);
        (dk, None)
    };

    let (d_theta1, d_theta2) = if robust {
        let t1 = th[0] - (sig_t * pi - rho * b * kap - (v.iota(t) + phi1));
        let t2 = th[1]
            - (-om * b * kap + rho * (sig - sig_t) * pi / om + (v.cbar(t) - phi2));
        (t1, t2)
    } else {
        (th[0], th[1])
    };

    Ok(FocResiduals { d_pi, d_kappa, d_theta1, d_theta2, d_theta4 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::Curve;
    use crate::testutil::*;

    fn state() -> PathState {
        PathState::default()
    }

    fn assert_foc_small(v: &ValidatedScenario, t: f64, st: &PathState, ctrl: &ControlPoint) {
        let res = foc_residuals(v, t, st, ctrl).unwrap();
        assert!(res.d_pi.abs() < 1e-10, "d_pi = {} at t={t}", res.d_pi);
        assert!(res.d_kappa.abs() < 1e-10, "d_kappa = {} at t={t}", res.d_kappa);
        assert!(res.d_theta1.abs() < 1e-10, "d_theta1 = {}", res.d_theta1);
        assert!(res.d_theta2.abs() < 1e-10, "d_theta2 = {}", res.d_theta2);
        if let Some(d4) = res.d_theta4 {
            assert!(d4.abs() < 1e-10, "d_theta4 = {d4}");
        }
    }

    fn rho_variants() -> Vec<crate::scenario::Scenario> {
        [-0.9, -0.6, -0.3, 0.0]
            .iter()
            .map(|&rho| {
                let mut s = s0();
                s.insurance.rho = rho;
                s
            })
            .collect()
    }

    #[test]
    fn baseline_robust_saddle_matches_worked_values() {
        let sol = small_robust_no_insider(&v(&s0())).unwrap();
        let c = sol.strategy.eval(0.4, &state());
        assert!((c.pi - 0.625).abs() < 1e-12);
        assert!((c.kappa - 0.625).abs() < 1e-12);
        assert!((c.theta[0] + 0.125).abs() < 1e-12);
        assert!((c.theta[1] - 0.25).abs() < 1e-12);
        assert_eq!(c.theta[2], 0.0);
        assert_eq!(c.theta[3], 0.0);
        // constant coefficients reproduce the decimal value exactly
        assert_eq!(sol.value.analytic, Some(0.108125));
        assert_eq!(sol.value.rate_integral, 0.03);
        assert_eq!(sol.value.risk_premium_integral, 0.078125);
        assert_eq!(sol.value.insider_gain, 0.0);
    }

    #[test]
    fn baseline_neutral_doubles_and_drops_the_tilt() {
        let sol = small_neutral_no_insider(&v(&neutral(s0()))).unwrap();
        let c = sol.strategy.eval(0.4, &state());
        assert!((c.pi - 1.25).abs() < 1e-12);
        assert!((c.kappa - 1.25).abs() < 1e-12);
        assert_eq!(c.theta, [0.0; 4]);
        assert_eq!(sol.value.analytic, Some(0.18625));
    }

    #[test]
    fn ambiguity_halves_strategies_and_quarter_gaps_the_value() {
        for mut s in rho_variants() {
            s.ambiguity.enabled = true;
            let robust = small_robust_no_insider(&v(&s)).unwrap();
            let s_n = neutral(s);
            let neutral_sol = small_neutral_no_insider(&v(&s_n)).unwrap();
            for k in 0..=10 {
                let t = k as f64 / 10.0;
                let cr = robust.strategy.eval(t, &state());
                let cn = neutral_sol.strategy.eval(t, &state());
                assert!((cn.pi - 2.0 * cr.pi).abs() < 1e-12);
                assert!((cn.kappa - 2.0 * cr.kappa).abs() < 1e-12);
            }
            let vv = v(&s_n);
            let quad = vv.integrate_knots(
                |t| {
                    let i = vv.iota(t);
                    let c = vv.cbar(t);
                    i * i + c * c
                },
                0.0,
                1.0,
            );
            let gap = robust.value.analytic.unwrap() - neutral_sol.value.analytic.unwrap();
            assert!((gap + 0.25 * quad).abs() < 1e-12, "gap {gap} quad {quad}");
        }
    }

    #[test]
    fn neutral_feedback_map_agrees_with_the_doubled_base() {
        for s in rho_variants() {
            let vv = v(&s);
            for k in 0..=10 {
                let t = k as f64 / 10.0;
                let (pi, kappa) = neutral_controls(&vv, t, vv.iota(t), vv.cbar(t)).unwrap();
                assert!((pi - 2.0 * small_robust_base_pi(&vv, t)).abs() < 1e-12);
                assert!((kappa - 2.0 * small_robust_base_kappa(&vv, t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_order_conditions_vanish_across_diffusive_regimes() {
        for s in rho_variants() {
            let vv = v(&s);
            let sol = small_robust_no_insider(&vv).unwrap();
            let s_n = neutral(s);
            let vn = v(&s_n);
            let sol_n = small_neutral_no_insider(&vn).unwrap();
            for k in 0..=8 {
                let t = k as f64 / 8.0;
                assert_foc_small(&vv, t, &state(), &sol.strategy.eval(t, &state()));
                assert_foc_small(&vn, t, &state(), &sol_n.strategy.eval(t, &state()));
            }
        }
    }

    #[test]
    fn first_order_conditions_vanish_for_insider_strategies() {
        let states: Vec<PathState> = [-0.8, 0.0, 0.4, 1.3]
            .iter()
            .map(|&y| PathState { y0: y, run_wbar: 0.1, run_w1: 0.1, eta2: 0.0 })
            .collect();
        for base in rho_variants() {
            let s = with_wbar_insider(base.clone(), 2.0, None);
            let vv = v(&s);
            let sol = small_robust_insider_insurance(&vv).unwrap();
            let s_n = neutral(s);
            let vn = v(&s_n);
            let sol_n = small_neutral_insider(&vn).unwrap();
            for st in &states {
                for k in 1..=7 {
                    let t = 0.95 * k as f64 / 7.0;
                    assert_foc_small(&vv, t, st, &sol.strategy.eval(t, st));
                    assert_foc_small(&vn, t, st, &sol_n.strategy.eval(t, st));
                }
            }
        }
        // asset-driver signal, robust and neutral
        let s = with_w1_insider(s0(), 2.0, None);
        let vv = v(&s);
        let sol = small_robust_insider_asset(&vv).unwrap();
        let s_n = neutral(s);
        let vn = v(&s_n);
        let sol_n = small_neutral_insider(&vn).unwrap();
        for st in &states {
            for k in 1..=7 {
                let t = 0.95 * k as f64 / 7.0;
                assert_foc_small(&vv, t, st, &sol.strategy.eval(t, st));
                assert_foc_small(&vn, t, st, &sol_n.strategy.eval(t, st));
            }
        }
    }

    #[test]
    fn insurance_insider_exposure_matches_worked_value() {
        let s = with_wbar_insider(s0(), 2.0, Some(0.4));
        let sol = small_robust_insider_insurance(&v(&s)).unwrap();
        let st = PathState { y0: 0.4, ..PathState::default() };
        let c = sol.strategy.eval(0.5, &st);
        assert!((c.kappa - 0.35).abs() < 1e-12, "kappa = {}", c.kappa);
        assert!((c.pi - 0.625).abs() < 1e-12);
    }

    #[test]
    fn asset_insider_investment_matches_worked_value() {
        let s = with_w1_insider(s0(), 2.0, Some(0.4));
        let sol = small_robust_insider_asset(&v(&s)).unwrap();
        let st = PathState { y0: 0.4, ..PathState::default() };
        let c = sol.strategy.eval(0.5, &st);
        assert!((c.pi - 1.55).abs() < 1e-12, "pi = {}", c.pi);
        assert!((c.kappa - 0.625).abs() < 1e-12);
    }

    #[test]
    fn insider_corrections_vanish_at_the_conditional_mean() {
        // neutral: zero residual means no tilt at all
        let s_n = neutral(with_wbar_insider(s0(), 2.0, None));
        let sol_n = small_neutral_insider(&v(&s_n)).unwrap();
        let flat = PathState { y0: 0.7, run_wbar: 0.7, ..PathState::default() };
        let c = sol_n.strategy.eval(0.5, &flat);
        assert!((c.pi - 1.25).abs() < 1e-12);
        assert!((c.kappa - 1.25).abs() < 1e-12);
        // robust surplus signal: the exposure correction vanishes where the
        // residual equals the deferred premium drag
        let s = with_wbar_insider(s0(), 2.0, None);
        let sol = small_robust_insider_insurance(&v(&s)).unwrap();
        let t = 0.5;
        let drag = 0.5 * (0.2 / 0.4) * (1.0 - t);
        let st = PathState { y0: drag, ..PathState::default() };
        assert!((sol.strategy.eval(t, &st).kappa - 0.625).abs() < 1e-12);
    }

    #[test]
    fn insider_values_match_frozen_gains() {
        let s = with_wbar_insider(s0(), 2.0, Some(0.4));
        let val = small_robust_insider_insurance(&v(&s)).unwrap().value;
        assert!((val.insider_gain - 0.24639151782819173).abs() < 1e-12);
        assert!((val.analytic.unwrap() - 0.35451651782819173).abs() < 1e-12);

        let s = with_w1_insider(s0(), 2.0, Some(0.4));
        let val = small_robust_insider_asset(&v(&s)).unwrap().value;
        assert!((val.insider_gain - 0.23076651782819173).abs() < 1e-12);
        assert!((val.analytic.unwrap() - 0.33889151782819173).abs() < 1e-12);

        for s in [
            neutral(with_wbar_insider(s0(), 2.0, None)),
            neutral(with_w1_insider(s0(), 2.0, None)),
        ] {
            let val = small_neutral_insider(&v(&s)).unwrap().value;
            assert!((val.insider_gain - 0.34657359027997265).abs() < 1e-12);
            assert!((val.analytic.unwrap() - 0.53282359027997265).abs() < 1e-12);
        }
    }

    #[test]
    fn large_neutral_matches_impact_adjusted_values() {
        let vv = v(&neutral(sl()));
        let sol = large_neutral(&vv).unwrap();
        let c = sol.strategy.eval(0.3, &state());
        assert!((c.pi - 1.6666666666666667).abs() < 1e-12, "pi = {}", c.pi);
        assert!((c.kappa - 1.25).abs() < 1e-12);
        assert!((sol.value.analytic.unwrap() - 0.19666666666666667).abs() < 1e-10);
        // with a flat-kernel signal the gain is the same log factor
        let si = neutral(with_w1_insider(sl(), 2.0, None));
        let vi = large_neutral(&v(&si)).unwrap().value;
        assert!((vi.insider_gain - 0.34657359027997265).abs() < 1e-12);
        // first-order conditions hold for the impact-adjusted feedback
        for k in 0..=8 {
            let t = k as f64 / 8.0;
            assert_foc_small(&vv, t, &state(), &sol.strategy.eval(t, &state()));
        }
    }

    #[test]
    fn large_neutral_value_is_linear_in_small_impact() {
        let value_at = |imp: f64| -> f64 {
            let mut s = neutral(s0());
            s.market.varrho = Curve::Constant(imp);
            large_neutral(&v(&s)).unwrap().value.analytic.unwrap()
        };
        let base = value_at(0.0);
        assert!((base - 0.18625).abs() < 1e-12);
        let slope = (value_at(1e-5) - base) / 1e-5;
        // d/d(impact) of the value at zero impact is iota^2 / sigma^2
        assert!((slope - 1.5625).abs() < 2e-3, "slope = {slope}");
    }

    #[test]
    fn large_neutral_rejects_the_singular_surface() {
        let mut s = neutral(s0());
        s.insurance.rho = -0.5;
        s.market.varrho = Curve::Constant(0.015); // sigma_tilde / sigma = 0.25 = rho^2
        assert!(matches!(
            large_neutral(&v(&s)),
            Err(Error::SingularConfiguration(_))
        ));
    }

    #[test]
    fn jump_saddle_matches_frozen_constants() {
        let vv = v(&sj());
        let sol = jump_robust_no_insider(&vv).unwrap();
        let c = sol.strategy.eval(0.4, &state());
        assert!((c.pi - 0.625).abs() < 1e-12);
        assert!((c.kappa - 0.15484574527148342).abs() < 1e-12);
        assert!((c.theta[0] + 0.125).abs() < 1e-12);
        assert!((c.theta[3] - 0.18321595661992321).abs() < 1e-12);
        assert!(((1.0 + c.theta[3]) * (1.0 - c.kappa) - 1.0).abs() < 1e-14);
        assert_eq!(sol.value.analytic, None);
        for k in 0..=8 {
            let t = k as f64 / 8.0;
            assert_foc_small(&vv, t, &state(), &sol.strategy.eval(t, &state()));
        }

        let vn = v(&neutral(sj()));
        let sol_n = jump_neutral_no_insider(&vn).unwrap();
        let cn = sol_n.strategy.eval(0.4, &state());
        assert!((cn.pi - 1.25).abs() < 1e-12);
        assert!((cn.kappa - 0.28571428571428571).abs() < 1e-12);
        assert!((sol_n.value.analytic.unwrap() - 0.093013881689393535).abs() < 1e-12);
        for k in 0..=8 {
            let t = k as f64 / 8.0;
            assert_foc_small(&vn, t, &state(), &sol_n.strategy.eval(t, &state()));
        }
    }

    #[test]
    fn claim_count_insider_matches_frozen_example() {
        // pinned compensated excess: y0 - count = 1 + intensity * (t0 - t)
        let s = neutral(with_count_insider(sj(), 2.0, None));
        let vv = v(&s);
        let sol = jump_insider_strategies(&vv, false).unwrap();
        let st = PathState { y0: 1.75, ..PathState::default() };
        let c = sol.strategy.eval(0.5, &st);
        assert!((c.kappa + 0.66666666666666667).abs() < 1e-12, "kappa = {}", c.kappa);
        assert!((c.pi - 1.25).abs() < 1e-12);
        // the first-order condition pins the compensation term
        for st in [
            PathState { y0: 1.75, ..PathState::default() },
            PathState { y0: 3.0, eta2: 1.0, ..PathState::default() },
            PathState { y0: 0.5, ..PathState::default() },
        ] {
            for k in 1..=5 {
                let t = 0.9 * k as f64 / 5.0;
                assert_foc_small(&vv, t, &st, &sol.strategy.eval(t, &st));
            }
        }
    }

    #[test]
    fn jump_asset_signal_strategies_match_worked_values() {
        let s = neutral(with_w1_insider(sj(), 2.0, Some(0.3)));
        let vn = v(&s);
        let sol = jump_insider_strategies(&vn, false).unwrap();
        let st = PathState { y0: 0.3, ..PathState::default() };
        let c = sol.strategy.eval(0.5, &st);
        assert!((c.pi - 2.25).abs() < 1e-12, "pi = {}", c.pi);
        assert!((c.kappa - 0.28571428571428571).abs() < 1e-12);
        for k in 1..=5 {
            let t = 0.9 * k as f64 / 5.0;
            assert_foc_small(&vn, t, &st, &sol.strategy.eval(t, &st));
        }

        let sr = with_w1_insider(sj(), 2.0, Some(0.4));
        let vr = v(&sr);
        let sol_r = jump_insider_strategies(&vr, false).unwrap();
        let st = PathState { y0: 0.4, ..PathState::default() };
        let cr = sol_r.strategy.eval(0.5, &st);
        // flat-kernel correction coincides with the diffusive asset-signal one
        assert!((cr.pi - 1.55).abs() < 1e-12, "pi = {}", cr.pi);
        assert!((cr.kappa - 0.15484574527148342).abs() < 1e-12);
        assert!((cr.theta[3] - 0.18321595661992321).abs() < 1e-12);
        for k in 1..=5 {
            let t = 0.9 * k as f64 / 5.0;
            assert_foc_small(&vr, t, &st, &sol_r.strategy.eval(t, &st));
        }
    }

    #[test]
    fn claim_count_robust_series_cross_checked_by_direct_sum() {
        let (prem, g2, lb): (f64, f64, f64) = (0.2, 1.0, 0.5);
        let (t, t_end, t0): (f64, f64, f64) = (0.25, 1.0, 2.0);
        let (mu1, mu2) = (lb * (t_end - t), lb * (t0 - t_end));
        let phi4 = prem / (lb * g2);
        let pois = |k: i64, mu: f64| -> f64 {
            if k < 0 {
                return 0.0;
            }
            let mut f = (-mu).exp();
            for i in 1..=k {
                f *= mu / i as f64;
            }
            f
        };
        for rem in [0i64, 1, 4, 9] {
            // direct evaluation keeping the deterministic factors that must
            // cancel between numerator and denominator
            let det = (-0.5 * lb * (t_end - t) * phi4).exp() * 0.7;
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..=rem {
                let w = pois(k, mu1) * (1.0 + phi4).powf(k as f64 / 2.0) * det;
                num += w * (pois(rem - k - 1, mu2).sqrt() - pois(rem - k, mu2).sqrt());
                den += w * pois(rem - k, mu2).sqrt();
            }
            let direct = lb.sqrt() * num / ((prem * g2 + lb * g2 * g2).sqrt() * den);
            let series =
                claim_signal_kappa_shift(prem, g2, lb, t, t_end, t0, 0.0, rem as f64);
            assert!(
                (series - direct).abs() < 1e-12,
                "rem={rem}: series {series} direct {direct}"
            );
        }
        // knowing that no claims arrive is good news for retention; in fact
        // it pushes the exposure to exactly full retention
        let none_known =
            claim_signal_kappa_shift(prem, g2, lb, t, t_end, t0, 0.0, 0.0);
        assert!(none_known < 0.0);
        let kappa_full = jump_robust_kappa(prem, g2, lb) - none_known;
        assert!((kappa_full - 1.0 / g2).abs() < 1e-12);
    }

    #[test]
    fn claim_count_robust_strategies_require_the_experimental_flag() {
        let s = with_count_insider(sj(), 2.0, Some(3.0));
        let vv = v(&s);
        assert!(matches!(
            jump_insider_strategies(&vv, false),
            Err(Error::ExperimentalFeature(_))
        ));
        let sol = jump_insider_strategies(&vv, true).unwrap();
        let st = PathState { y0: 3.0, eta2: 1.0, ..PathState::default() };
        let c = sol.strategy.eval(0.25, &st);
        let base = 0.15484574527148342;
        let shift = claim_signal_kappa_shift(0.2, 1.0, 0.5, 0.25, 1.0, 2.0, 1.0, 3.0);
        assert!((c.kappa - (base - shift)).abs() < 1e-12);
        // follower tilt tracks the shifted exposure
        let expect_t4 = (0.2 / 0.5) * (1.0 - c.kappa) - c.kappa;
        assert!((c.theta[3] - expect_t4).abs() < 1e-12);
    }

    #[test]
    fn nested_mc_agrees_with_the_flat_kernel_closed_form() {
        let s = with_w1_insider(sj(), 2.0, Some(0.4));
        let vv = v(&s);
        let st = PathState { y0: 0.4, ..PathState::default() };
        let mc = jump_robust_asset_pi_nested_mc(&vv, 0.5, &st, 40_000, 100_000, 7).unwrap();
        assert!((mc - 1.55).abs() < 0.02, "nested mc pi = {mc}");
        assert!(matches!(
            jump_robust_asset_pi_nested_mc(&vv, 0.5, &st, 200_000, 100_000, 7),
            Err(Error::NestedMcBudgetExceeded(_))
        ));
    }

    #[test]
    fn critical_time_matches_frozen_roots_and_symmetry() {
        let vv = v(&s0());
        let root = critical_future_time(&vv, CriticalTimeKind::Insurance).unwrap();
        assert!((root - 4.5028648366424681).abs() < 1e-9);
        let span = 2.0 * root - 1.0;
        let residual = 0.3125 - (0.25 + 2.0) / span + 2.0 * (1.0 - 1.0 / (span * span)).ln();
        assert!(residual.abs() < 1e-10);

        let root_a = critical_future_time(&vv, CriticalTimeKind::Asset).unwrap();
        assert!((root_a - 4.2325536160582664).abs() < 1e-9);

        // swapping the prices of risk swaps the kinds
        let mut sw = s0();
        sw.market.mu0 = Curve::Constant(0.13); // iota = 0.5
        sw.insurance.b = Curve::Constant(0.8); // cbar = 0.25
        let root_sw = critical_future_time(&v(&sw), CriticalTimeKind::Asset).unwrap();
        assert!((root_sw - 4.5028648366424681).abs() < 1e-9);
    }

    #[test]
    fn critical_time_decreases_in_the_market_price_of_risk() {
        let frozen = [
            (0.1, 5.2353175692),
            (0.2, 4.78448954605),
            (0.3, 4.20896607022),
            (0.4, 3.63759960851),
            (0.5, 3.13630856169),
        ];
        let mut last = f64::INFINITY;
        for (iota, expect) in frozen {
            let mut s = s0();
            s.market.mu0 = Curve::Constant(0.03 + 0.2 * iota);
            let root = critical_future_time(&v(&s), CriticalTimeKind::Insurance).unwrap();
            assert!((root - expect).abs() < 1e-9, "iota={iota}: {root}");
            assert!(root < last);
            last = root;
        }
    }

    #[test]
    fn critical_time_reports_missing_bracket_and_mode_guards() {
        let mut s = s0();
        s.market.mu0 = Curve::Constant(0.03); // iota = 0
        s.insurance.lambda = Curve::Constant(0.30000001); // negligible premium
        assert!(matches!(
            critical_future_time(&v(&s), CriticalTimeKind::Insurance),
            Err(Error::NoBracket(_))
        ));

        let mut s = s0();
        s.horizon = 2.0;
        assert!(matches!(
            critical_future_time(&v(&s), CriticalTimeKind::Insurance),
            Err(Error::ModeMismatch(_))
        ));
        let mut s = s0();
        s.insurance.rho = -0.3;
        assert!(matches!(
            critical_future_time(&v(&s), CriticalTimeKind::Insurance),
            Err(Error::ModeMismatch(_))
        ));
    }

    #[test]
    fn mode_guards_refuse_wrong_regimes() {
        assert!(matches!(
            small_robust_no_insider(&v(&neutral(s0()))),
            Err(Error::ModeMismatch(_))
        ));
        assert!(matches!(
            small_neutral_no_insider(&v(&s0())),
            Err(Error::ModeMismatch(_))
        ));
        assert!(matches!(
            small_robust_no_insider(&v(&sl())),
            Err(Error::ModeMismatch(_))
        ));
        assert!(matches!(
            small_robust_no_insider(&v(&sj())),
            Err(Error::ModeMismatch(_))
        ));
        assert!(matches!(
            jump_robust_no_insider(&v(&s0())),
            Err(Error::ModeMismatch(_))
        ));
        assert!(matches!(
            large_neutral(&v(&sl())),
            Err(Error::ModeMismatch(_))
        ));
        assert!(matches!(
            small_robust_insider_insurance(&v(&with_w1_insider(s0(), 2.0, None))),
            Err(Error::ModeMismatch(_))
        ));
        assert!(matches!(
            small_robust_insider_asset(&v(&with_wbar_insider(s0(), 2.0, None))),
            Err(Error::ModeMismatch(_))
        ));
    }

    #[test]
    fn value_reports_are_internally_additive() {
        let reports = [
            small_robust_no_insider(&v(&s0())).unwrap().value,
            small_neutral_no_insider(&v(&neutral(s0()))).unwrap().value,
            small_robust_insider_insurance(&v(&with_wbar_insider(s0(), 2.0, None)))
                .unwrap()
                .value,
            large_neutral(&v(&neutral(sl()))).unwrap().value,
            jump_neutral_no_insider(&v(&neutral(sj()))).unwrap().value,
        ];
        for rep in reports {
            let sum =
                rep.ln_x0 + rep.rate_integral + rep.risk_premium_integral + rep.insider_gain;
            assert_eq!(rep.analytic, Some(sum));
        }
    }

    #[test]
    fn nonconstant_curves_integrate_consistently_with_constant_fast_paths() {
        // a piecewise curve that happens to be flat is recognized as constant
        // and keeps the exact fast path
        let mut s = s0();
        s.market.sigma = Curve::Piecewise {
            grid: vec![0.0, 0.5],
            values: vec![0.2, 0.2],
            interp: crate::curves::Interp::Const,
        };
        let vv = v(&s);
        assert!(vv.consts().is_some());
        let sol = small_robust_no_insider(&vv).unwrap();
        assert_eq!(sol.value.analytic, Some(0.108125));

        // genuinely time-varying premium: value via quadrature matches a
        // hand-computed piecewise integral
        let mut s = s0();
        s.insurance.lambda = Curve::Piecewise {
            grid: vec![0.0, 0.5],
            values: vec![0.5, 0.7],
            interp: crate::curves::Interp::Const,
        };
        let vv = v(&s);
        let sol = small_robust_no_insider(&vv).unwrap();
        // cbar is 0.5 on [0, 0.5) and 1.0 on [0.5, 1]
        let quad = 0.0625 + 0.5 * 0.25 + 0.5 * 1.0;
        let expect = 0.03 + 0.25 * quad;
        assert!((sol.value.analytic.unwrap() - expect).abs() < 1e-12);
    }
}
