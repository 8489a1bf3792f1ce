//! Optimality verification that never consults the closed-form solvers.
//!
//! Three independent instruments:
//!
//! * [`saddle_search`] locates the saddle of the game functional over a grid
//!   of constant strategies. For constant coefficients the terminal log
//!   wealth is affine in a handful of per-path driver statistics, so one
//!   simulated set of paths scores every grid cell exactly under common
//!   random numbers, and the max-min / min-max sweep checks the saddle
//!   property itself.
//! * [`gateaux_check`] estimates directional derivatives of the functional
//!   at an arbitrary strategy by fused central differences: all bumped
//!   variants ride the same paths, so the derivative's noise comes from the
//!   difference, not the level.
//! * [`martingale_suite`] checks that the adversary's density is a mean-one
//!   martingale with nondecreasing second moment, and flags tilts so strong
//!   that plain Monte Carlo becomes unreliable.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::decorrelate;
use crate::scenario::{InsiderSpec, ValidatedScenario};
use crate::simulate::{blocked_mean_se, simulate_bundle, true_dt, SimConfig};
use crate::strategy::{McEstimate, StateFn, StrategyPair};

/// Terminal density variance beyond which level estimates are flagged.
pub const HIGH_VARIANCE_THRESHOLD: f64 = 5.0;

/// Checkpoints used for the per-path density integral in the saddle search.
const SADDLE_CHECKPOINTS: usize = 17;

// ---------------------------------------------------------------------------
// Grid saddle search
// ---------------------------------------------------------------------------

/// One uniform grid axis with inclusive endpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    /// A degenerate axis pinned at one value.
    pub fn single(x: f64) -> Axis {
        Axis { lo: x, hi: x, n: 1 }
    }

    pub fn step(&self) -> f64 {
        if self.n > 1 {
            (self.hi - self.lo) / (self.n - 1) as f64
        } else {
            0.0
        }
    }

    pub fn at(&self, i: usize) -> f64 {
        self.lo + self.step() * i as f64
    }
}

/// Grid over the insurer's controls and the adversary's tilt components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaddleGrid {
    pub pi: Axis,
    pub kappa: Axis,
    pub theta1: Axis,
    pub theta2: Axis,
    pub theta4: Axis,
}

impl SaddleGrid {
    /// Default grid for a scenario: controls on `[0, 2]` in steps of 1/8,
    /// Brownian tilts on `[-1, 1]`, the jump tilt on `[-1/2, 1/2]` in steps
    /// of 1/16, with the retention axis kept inside the admissible region
    /// and every tilt axis collapsed to zero when ambiguity is off.
    pub fn for_scenario(v: &ValidatedScenario) -> SaddleGrid {
        let controls = Axis { lo: 0.0, hi: 2.0, n: 17 };
        let kappa = match v.scenario().insurance.jump2.as_ref() {
            // keep kappa*gamma2 strictly below 1
            Some(j) => {
                let hi = (0.875 / j.mark).min(2.0);
                Axis { lo: 0.0, hi, n: 8 }
            }
            None => controls,
        };
        if !v.scenario().ambiguity.enabled {
            return SaddleGrid {
                pi: controls,
                kappa,
                theta1: Axis::single(0.0),
                theta2: Axis::single(0.0),
                theta4: Axis::single(0.0),
            };
        }
        let brownian = Axis { lo: -1.0, hi: 1.0, n: 17 };
        let (theta2, theta4) = if v.is_jump() {
            (Axis::single(0.0), Axis { lo: -0.5, hi: 0.5, n: 17 })
        } else {
            (brownian, Axis::single(0.0))
        };
        SaddleGrid { pi: controls, kappa, theta1: brownian, theta2, theta4 }
    }
}

/// Result of a grid saddle search.
#[derive(Clone, Debug)]
pub struct SaddleReport {
    pub pi: f64,
    pub kappa: f64,
    pub theta: [f64; 4],
    /// Functional value at the saddle cell, with a standard error from the
    /// per-path scores (equivalently `sqrt(w' Sigma w / n)` for the affine
    /// weights over the path statistics).
    pub value: McEstimate,
    /// `max_u min_theta` of the estimated surface.
    pub max_min: f64,
    /// `min_theta max_u` of the estimated surface.
    pub min_max: f64,
}

/// Driver statistics flattened from the simulation records.
struct PathStats {
    n: usize,
    /// Terminal driver values and claim counts.
    w1: Vec<f64>,
    w2: Vec<f64>,
    nc: Vec<f64>,
    /// Checkpoint times and trapezoid weights.
    ck_t: Vec<f64>,
    ck_w: Vec<f64>,
    /// Path-major checkpoint values, index `p * n_ck + c`.
    ck_w1: Vec<f64>,
    ck_w2: Vec<f64>,
    ck_nc: Vec<f64>,
}

/// Affine weights of one insurer cell over the path statistics
/// `(eps, eps W1, eps W2, eps N, int eps)`.
#[derive(Clone, Copy)]
struct CellWeights {
    base: f64,
    c_w1: f64,
    c_w2: f64,
    c_n: f64,
    admissible: bool,
}

fn cell_weights(v: &ValidatedScenario, pi: f64, kappa: f64) -> CellWeights {
    let c = v.consts().expect("saddle search requires constant coefficients");
    let s = v.scenario();
    let t_end = s.horizon;
    let rho = s.insurance.rho;
    let omega = (1.0 - rho * rho).sqrt();
    let prem = c.lambda - c.a;
    let vol1 = c.sigma * pi - rho * c.b * kappa;
    let vol2 = -omega * c.b * kappa;
    let mut drift = c.r + (c.mu0 - c.r) * pi + c.varrho * pi * pi + prem * kappa
        - 0.5 * (vol1 * vol1 + vol2 * vol2);
    let mut c_n = 0.0;
    let mut admissible = true;
    if let Some(j) = &s.insurance.jump2 {
        let retained = kappa * j.mark;
        if retained >= 1.0 - crate::simulate::RETENTION_MARGIN {
            admissible = false;
        } else {
            drift += retained * j.intensity;
            c_n = (1.0 - retained).ln();
        }
    }
    CellWeights {
        base: s.x0.ln() + drift * t_end,
        c_w1: vol1,
        c_w2: vol2,
        c_n,
        admissible,
    }
}

/// Mean path statistics under the tilt `(th1, th2, th4)`:
/// `(E[eps_T], E[eps_T W1_T], E[eps_T W2_T], E[eps_T N_T], E[int eps])`.
fn tilt_stats(ps: &PathStats, lam: f64, th1: f64, th2: f64, th4: f64) -> [f64; 5] {
    let quad = 0.5 * (th1 * th1 + th2 * th2);
    let ln4 = if th4 == 0.0 { 0.0 } else { (1.0 + th4).ln() };
    let n_ck = ps.ck_t.len();
    let t_end = ps.ck_t[n_ck - 1];
    let mut sums = [0.0; 5];
    for p in 0..ps.n {
        let mut integral = 0.0;
        let row = p * n_ck;
        for c in 0..n_ck {
            let ln_eps = th1 * ps.ck_w1[row + c] + th2 * ps.ck_w2[row + c]
                + ln4 * ps.ck_nc[row + c]
                - (quad + th4 * lam) * ps.ck_t[c];
            integral += ps.ck_w[c] * ln_eps.exp();
        }
        let ln_eps_t = th1 * ps.w1[p] + th2 * ps.w2[p] + ln4 * ps.nc[p]
            - (quad + th4 * lam) * t_end;
        let e = ln_eps_t.exp();
        sums[0] += e;
        sums[1] += e * ps.w1[p];
        sums[2] += e * ps.w2[p];
        sums[3] += e * ps.nc[p];
        sums[4] += integral;
    }
    sums.map(|s| s / ps.n as f64)
}

/// Penalty rate of a constant tilt under the base claim intensity.
fn tilt_penalty(lam: f64, th1: f64, th2: f64, th4: f64) -> f64 {
    let quad = 0.5 * (th1 * th1 + th2 * th2);
    if lam == 0.0 || th4 == 0.0 {
        quad
    } else {
        quad + lam * ((1.0 + th4) * (1.0 + th4).ln() - th4)
    }
}

/// Locate the saddle of the game functional over constant strategies.
///
/// Simulates the drivers once with the parked strategy, then scores every
/// grid cell through the affine representation of the terminal log wealth.
/// The insurer maximizes over `(pi, kappa)`, the adversary minimizes over
/// the tilt components. Optima on an axis boundary are rejected: the grid
/// was too narrow to bracket the saddle.
pub fn saddle_search(
    v: &ValidatedScenario,
    grid: &SaddleGrid,
    cfg: &SimConfig,
) -> Result<SaddleReport> {
    if !matches!(v.scenario().insider, InsiderSpec::None) {
        return Err(Error::ModeMismatch(
            "the grid saddle search runs constant strategies on the natural \
             filtration; insider scenarios need feedback strategies"
                .into(),
        ));
    }
    if v.consts().is_none() {
        return Err(Error::ModeMismatch(
            "the grid saddle search needs constant coefficients".into(),
        ));
    }
    let robust = v.scenario().ambiguity.enabled;
    if !robust && (grid.theta1.n > 1 || grid.theta2.n > 1 || grid.theta4.n > 1) {
        return Err(Error::ModeMismatch(
            "ambiguity is disabled; the tilt axes must be pinned at zero".into(),
        ));
    }
    for (axis, name) in [
        (&grid.pi, "pi"),
        (&grid.kappa, "kappa"),
        (&grid.theta1, "theta1"),
        (&grid.theta2, "theta2"),
        (&grid.theta4, "theta4"),
    ] {
        if axis.n == 0 || !(axis.hi >= axis.lo) {
            return Err(Error::DomainError(format!(
                "the {name} axis needs ordered bounds and at least one point"
            )));
        }
    }
    if grid.theta4.lo <= -1.0 {
        return Err(Error::DomainError(
            "the theta4 axis must stay above -1 to keep the tilted intensity \
             positive"
                .into(),
        ));
    }

    let t_end = v.scenario().horizon;
    let mut sim_cfg = cfg.clone();
    sim_cfg.checkpoints = (0..SADDLE_CHECKPOINTS)
        .map(|i| t_end * i as f64 / (SADDLE_CHECKPOINTS - 1) as f64)
        .collect();
    let records = simulate_bundle(v, &[StrategyPair::zero()], &sim_cfg)?;

    let n = records.len();
    let n_ck = SADDLE_CHECKPOINTS;
    let mut ps = PathStats {
        n,
        w1: Vec::with_capacity(n),
        w2: Vec::with_capacity(n),
        nc: Vec::with_capacity(n),
        ck_t: records[0].snapshots.iter().map(|s| s.t).collect(),
        ck_w: Vec::new(),
        ck_w1: Vec::with_capacity(n * n_ck),
        ck_w2: Vec::with_capacity(n * n_ck),
        ck_nc: Vec::with_capacity(n * n_ck),
    };
    ps.ck_w = trapezoid_weights(&ps.ck_t);
    for r in &records {
        let t = &r.terminals[0];
        ps.w1.push(t.w1);
        ps.w2.push(t.w2);
        ps.nc.push(t.n_claims as f64);
        for s in &r.snapshots {
            ps.ck_w1.push(s.w1);
            ps.ck_w2.push(s.w2);
            ps.ck_nc.push(s.n_claims as f64);
        }
    }
    drop(records);

    let lam = v.scenario().insurance.jump2.as_ref().map(|j| j.intensity).unwrap_or(0.0);

    // score every tilt cell from the shared paths
    let tilt_cells: Vec<(usize, usize, usize)> = (0..grid.theta1.n)
        .flat_map(|i1| {
            (0..grid.theta2.n)
                .flat_map(move |i2| (0..grid.theta4.n).map(move |i4| (i1, i2, i4)))
        })
        .collect();
    let tilt_values: Vec<(f64, f64, f64)> = tilt_cells
        .iter()
        .map(|&(i1, i2, i4)| (grid.theta1.at(i1), grid.theta2.at(i2), grid.theta4.at(i4)))
        .collect();
    let stats: Vec<[f64; 5]> = tilt_values
        .par_iter()
        .map(|&(t1, t2, t4)| tilt_stats(&ps, lam, t1, t2, t4))
        .collect();

    let u_cells: Vec<(usize, usize)> = (0..grid.pi.n)
        .flat_map(|ip| (0..grid.kappa.n).map(move |ik| (ip, ik)))
        .collect();
    let weights: Vec<CellWeights> = u_cells
        .iter()
        .map(|&(ip, ik)| cell_weights(v, grid.pi.at(ip), grid.kappa.at(ik)))
        .collect();

    // J[u][theta]
    let surface: Vec<Vec<f64>> = weights
        .par_iter()
        .map(|w| {
            if !w.admissible {
                return vec![f64::NEG_INFINITY; tilt_values.len()];
            }
            tilt_values
                .iter()
                .zip(&stats)
                .map(|(&(t1, t2, t4), s)| {
                    w.base * s[0] + w.c_w1 * s[1] + w.c_w2 * s[2] + w.c_n * s[3]
                        + tilt_penalty(lam, t1, t2, t4) * s[4]
                })
                .collect()
        })
        .collect();

    // max over u of (min over theta), and min over theta of (max over u)
    let min_of = |row: &Vec<f64>| {
        row.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let (u_star, max_min) = surface
        .iter()
        .map(min_of)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let (th_star, min_max) = (0..tilt_values.len())
        .map(|j| {
            surface
                .iter()
                .map(|row| row[j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .enumerate()
        .fold((0, f64::INFINITY), |best, (j, v)| if v < best.1 { (j, v) } else { best });

    let (ip, ik) = u_cells[u_star];
    let (i1, i2, i4) = tilt_cells[th_star];
    let interior = |axis: &Axis, i: usize, name: &str| -> Result<()> {
        if axis.n > 1 && (i == 0 || i == axis.n - 1) {
            return Err(Error::GridTooCoarse(format!(
                "the {name} optimum sits on the grid boundary at {}; widen the axis",
                axis.at(i)
            )));
        }
        Ok(())
    };
    interior(&grid.pi, ip, "pi")?;
    interior(&grid.kappa, ik, "kappa")?;
    interior(&grid.theta1, i1, "theta1")?;
    interior(&grid.theta2, i2, "theta2")?;
    interior(&grid.theta4, i4, "theta4")?;

    // per-path scores at the saddle cell for the covariance-exact error
    let w = &weights[u_star];
    let (t1, t2, t4) = tilt_values[th_star];
    let quad = 0.5 * (t1 * t1 + t2 * t2);
    let ln4 = if t4 == 0.0 { 0.0 } else { (1.0 + t4).ln() };
    let g = tilt_penalty(lam, t1, t2, t4);
    let scores: Vec<f64> = (0..ps.n)
        .map(|p| {
            let row = p * n_ck;
            let mut integral = 0.0;
            for c in 0..n_ck {
                let ln_eps = t1 * ps.ck_w1[row + c] + t2 * ps.ck_w2[row + c]
                    + ln4 * ps.ck_nc[row + c]
                    - (quad + t4 * lam) * ps.ck_t[c];
                integral += ps.ck_w[c] * ln_eps.exp();
            }
            let ln_eps_t = t1 * ps.w1[p] + t2 * ps.w2[p] + ln4 * ps.nc[p]
                - (quad + t4 * lam) * t_end;
            let e = ln_eps_t.exp();
            w.base * e + w.c_w1 * e * ps.w1[p] + w.c_w2 * e * ps.w2[p]
                + w.c_n * e * ps.nc[p]
                + g * integral
        })
        .collect();
    let (mean, stderr) = blocked_mean_se(&scores, cfg.antithetic);

    Ok(SaddleReport {
        pi: grid.pi.at(ip),
        kappa: grid.kappa.at(ik),
        theta: [grid.theta1.at(i1), grid.theta2.at(i2), 0.0, grid.theta4.at(i4)],
        value: McEstimate {
            mean,
            stderr,
            n_paths: cfg.n_paths,
            dt: true_dt(t_end, cfg.n_steps_per_unit),
        },
        max_min,
        min_max,
    })
}

fn trapezoid_weights(t: &[f64]) -> Vec<f64> {
    let n = t.len();
    (0..n)
        .map(|i| {
            let left = if i == 0 { t[0] } else { t[i - 1] };
            let right = if i == n - 1 { t[n - 1] } else { t[i + 1] };
            0.5 * (right - left)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Directional derivatives
// ---------------------------------------------------------------------------

/// Central-difference estimate of one directional derivative.
#[derive(Clone, Debug)]
pub struct DirectionalDerivative {
    pub direction: &'static str,
    pub estimate: f64,
    pub stderr: f64,
}

fn offset(f: &StateFn, h: f64) -> StateFn {
    let g = f.clone();
    Arc::new(move |t, s| g(t, s) + h)
}

fn bump(s: &StrategyPair, which: usize, h: f64) -> StrategyPair {
    let mut out = s.clone();
    match which {
        0 => out.pi = offset(&s.pi, h),
        1 => out.kappa = offset(&s.kappa, h),
        2 => out.theta[0] = offset(&s.theta[0], h),
        3 => out.theta[1] = offset(&s.theta[1], h),
        _ => out.theta[3] = offset(&s.theta[3], h),
    }
    out
}

/// Estimate the Gateaux derivative of the game functional at `strategy` in
/// each control direction by central differences of size `bump_size`.
///
/// With `cfg.crn` set (the default) every bumped variant rides the same
/// driver paths in one fused pass, so each path contributes a difference
/// quotient and the derivative's error scales with the bump's effect, not
/// the level's variance. With `crn` off the two sides use decorrelated
/// seeds, which is only useful to demonstrate why common random numbers
/// matter.
pub fn gateaux_check(
    v: &ValidatedScenario,
    strategy: &StrategyPair,
    bump_size: f64,
    cfg: &SimConfig,
) -> Result<Vec<DirectionalDerivative>> {
    if !(bump_size > 0.0) || !bump_size.is_finite() {
        return Err(Error::DomainError(format!(
            "bump size must be positive and finite, got {bump_size}"
        )));
    }
    let robust = v.scenario().ambiguity.enabled;
    let mut directions: Vec<(&'static str, usize)> = vec![("pi", 0), ("kappa", 1)];
    if robust {
        directions.push(("theta1", 2));
        if v.is_jump() {
            directions.push(("theta4", 4));
        } else {
            directions.push(("theta2", 3));
        }
    }

    if cfg.crn {
        let mut variants = Vec::with_capacity(2 * directions.len());
        for &(_, which) in &directions {
            variants.push(bump(strategy, which, bump_size));
            variants.push(bump(strategy, which, -bump_size));
        }
        let records = simulate_bundle(v, &variants, cfg)?;
        return Ok(directions
            .iter()
            .enumerate()
            .map(|(d, &(name, _))| {
                let diffs: Vec<f64> = records
                    .iter()
                    .map(|r| {
                        (r.terminals[2 * d].objective()
                            - r.terminals[2 * d + 1].objective())
                            / (2.0 * bump_size)
                    })
                    .collect();
                let (estimate, stderr) = blocked_mean_se(&diffs, cfg.antithetic);
                DirectionalDerivative { direction: name, estimate, stderr }
            })
            .collect());
    }

    // decorrelated: independent noise on each side of the difference
    let mut out = Vec::with_capacity(directions.len());
    for (d, &(name, which)) in directions.iter().enumerate() {
        let side = |sign: f64, salt: u64| -> Result<(f64, f64)> {
            let mut c = cfg.clone();
            c.seed = decorrelate(cfg.seed, salt);
            let records =
                simulate_bundle(v, &[bump(strategy, which, sign * bump_size)], &c)?;
            let vals: Vec<f64> =
                records.iter().map(|r| r.terminals[0].objective()).collect();
            Ok(blocked_mean_se(&vals, c.antithetic))
        };
        let (mp, sp) = side(1.0, 2 * d as u64 + 1)?;
        let (mm, sm) = side(-1.0, 2 * d as u64 + 2)?;
        out.push(DirectionalDerivative {
            direction: name,
            estimate: (mp - mm) / (2.0 * bump_size),
            stderr: (sp * sp + sm * sm).sqrt() / (2.0 * bump_size),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Martingale diagnostics
// ---------------------------------------------------------------------------

/// Density moments at one checkpoint.
#[derive(Clone, Debug)]
pub struct MomentCheck {
    pub t: f64,
    /// `E[eps_t]`, which must be 1.
    pub mean: McEstimate,
    /// `E[eps_t^2]`, which must be nondecreasing in `t`.
    pub second_moment: McEstimate,
}

/// Martingale diagnostics for the density a strategy's tilt induces.
#[derive(Clone, Debug)]
pub struct MartingaleReport {
    pub checks: Vec<MomentCheck>,
    /// Worst `|E[eps_t] - 1| / se` over the checkpoints.
    pub max_abs_z: f64,
    /// Second moment nondecreasing within 3 combined standard errors.
    pub second_moment_nondecreasing: bool,
    /// Terminal density variance above [`HIGH_VARIANCE_THRESHOLD`]: level
    /// estimates under this tilt carry heavy-tailed weights.
    pub high_variance: bool,
}

/// Check the density martingale property at evenly spaced checkpoints.
pub fn martingale_suite(
    v: &ValidatedScenario,
    strategy: &StrategyPair,
    n_checkpoints: usize,
    cfg: &SimConfig,
) -> Result<MartingaleReport> {
    if n_checkpoints == 0 {
        return Err(Error::DomainError("need at least one checkpoint".into()));
    }
    let t_end = v.scenario().horizon;
    let mut sim_cfg = cfg.clone();
    sim_cfg.checkpoints = (1..=n_checkpoints)
        .map(|i| t_end * i as f64 / n_checkpoints as f64)
        .collect();
    let records = simulate_bundle(v, std::slice::from_ref(strategy), &sim_cfg)?;
    let dt = true_dt(t_end, cfg.n_steps_per_unit);
    let mk = |vals: &[f64]| {
        let (mean, stderr) = blocked_mean_se(vals, cfg.antithetic);
        McEstimate { mean, stderr, n_paths: cfg.n_paths, dt }
    };

    let mut checks = Vec::with_capacity(n_checkpoints);
    for c in 0..n_checkpoints {
        let eps: Vec<f64> =
            records.iter().map(|r| r.snapshots[c].ln_eps.exp()).collect();
        let sq: Vec<f64> = eps.iter().map(|e| e * e).collect();
        checks.push(MomentCheck {
            t: records[0].snapshots[c].t,
            mean: mk(&eps),
            second_moment: mk(&sq),
        });
    }

    let max_abs_z = checks
        .iter()
        .map(|c| (c.mean.mean - 1.0).abs() / c.mean.stderr)
        .fold(0.0, f64::max);
    let second_moment_nondecreasing = checks.windows(2).all(|w| {
        w[1].second_moment.mean
            >= w[0].second_moment.mean
                - 3.0 * (w[0].second_moment.stderr + w[1].second_moment.stderr)
    });
    let last = checks.last().expect("at least one checkpoint");
    let var = last.second_moment.mean - last.mean.mean * last.mean.mean;
    Ok(MartingaleReport {
        checks,
        max_abs_z,
        second_moment_nondecreasing,
        high_variance: var > HIGH_VARIANCE_THRESHOLD,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::PathState;
    use crate::testutil::*;

    fn cfg(n_paths: u64, spu: u32) -> SimConfig {
        SimConfig {
            n_paths,
            n_steps_per_unit: spu,
            seed: 42,
            antithetic: true,
            ..SimConfig::default()
        }
    }

    #[test]
    fn saddle_search_recovers_the_diffusive_saddle_exactly() {
        let sc = v(&s0());
        let grid = SaddleGrid::for_scenario(&sc);
        let rep = saddle_search(&sc, &grid, &cfg(32_768, 16)).unwrap();
        assert_eq!(rep.pi, 0.625);
        assert_eq!(rep.kappa, 0.625);
        assert_eq!(rep.theta, [-0.125, 0.25, 0.0, 0.0]);
        let j = &rep.value;
        assert!(
            (j.mean - 0.108125).abs() < 3.0 * j.stderr + 1e-3,
            "saddle value {} +- {} vs 0.108125",
            j.mean,
            j.stderr
        );
        // the saddle property: the sweep orders must agree
        assert!(rep.max_min <= rep.min_max + 1e-12);
        assert!(
            (rep.min_max - rep.max_min).abs() < 5.0 * j.stderr + 2e-3,
            "saddle gap {} vs se {}",
            rep.min_max - rep.max_min,
            j.stderr
        );
    }

    #[test]
    fn saddle_search_neutral_doubles_the_controls() {
        let sc = v(&neutral(s0()));
        let grid = SaddleGrid::for_scenario(&sc);
        // with antithetic pairing the neutral surface is deterministic
        let rep = saddle_search(&sc, &grid, &cfg(4_096, 16)).unwrap();
        assert_eq!(rep.pi, 1.25);
        assert_eq!(rep.kappa, 1.25);
        assert_eq!(rep.theta, [0.0; 4]);
        let j = &rep.value;
        assert!((j.mean - 0.18625).abs() < 3.0 * j.stderr + 1e-6);
        assert_eq!(rep.max_min, rep.min_max);
    }

    #[test]
    fn saddle_search_brackets_the_jump_saddle() {
        let sc = v(&sj());
        let grid = SaddleGrid::for_scenario(&sc);
        let rep = saddle_search(&sc, &grid, &cfg(32_768, 16)).unwrap();
        assert_eq!(rep.pi, 0.625);
        assert_eq!(rep.theta[0], -0.125);
        assert!(
            (rep.kappa - 0.15484574527148342).abs() <= grid.kappa.step() + 1e-12,
            "kappa {} vs 0.1548 at step {}",
            rep.kappa,
            grid.kappa.step()
        );
        assert!(
            (rep.theta[3] - 0.18321595661992321).abs() <= grid.theta4.step() + 1e-12,
            "theta4 {} vs 0.1832 at step {}",
            rep.theta[3],
            grid.theta4.step()
        );
        let j = &rep.value;
        assert!(
            (j.mean - 0.062409043380076791).abs() < 3.0 * j.stderr + 2e-3,
            "jump saddle value {} +- {}",
            j.mean,
            j.stderr
        );
    }

    #[test]
    fn saddle_search_flags_a_boundary_optimum() {
        let sc = v(&s0());
        let mut grid = SaddleGrid::for_scenario(&sc);
        grid.pi = Axis { lo: 0.0, hi: 0.5, n: 5 };
        assert!(matches!(
            saddle_search(&sc, &grid, &cfg(2_048, 16)),
            Err(Error::GridTooCoarse(_))
        ));
    }

    #[test]
    fn saddle_search_guards_its_domain() {
        let sc = v(&with_wbar_insider(s0(), 2.0, None));
        let grid = SaddleGrid::for_scenario(&sc);
        assert!(matches!(
            saddle_search(&sc, &grid, &cfg(64, 16)),
            Err(Error::ModeMismatch(_))
        ));

        let sc = v(&neutral(s0()));
        let mut grid = SaddleGrid::for_scenario(&sc);
        grid.theta1 = Axis { lo: -1.0, hi: 1.0, n: 17 };
        assert!(matches!(
            saddle_search(&sc, &grid, &cfg(64, 16)),
            Err(Error::ModeMismatch(_))
        ));
    }

    #[test]
    fn gateaux_vanishes_at_the_saddle_and_detects_detuning() {
        let sc = v(&s0());
        let saddle = StrategyPair::constant(0.625, 0.625, [-0.125, 0.25, 0.0, 0.0]);
        let c = cfg(8_192, 200);
        let derivs = gateaux_check(&sc, &saddle, 1e-3, &c).unwrap();
        assert_eq!(derivs.len(), 4);
        for d in &derivs {
            assert!(
                d.estimate.abs() < 3.0 * d.stderr,
                "{} derivative {} +- {} should vanish",
                d.direction,
                d.estimate,
                d.stderr
            );
        }

        // 20% over-investment: the pi derivative must be decisively negative
        let detuned = StrategyPair::constant(0.75, 0.625, [-0.125, 0.25, 0.0, 0.0]);
        let derivs = gateaux_check(&sc, &detuned, 1e-3, &c).unwrap();
        let dpi = derivs.iter().find(|d| d.direction == "pi").unwrap();
        assert!(
            dpi.estimate < -5.0 * dpi.stderr,
            "pi derivative {} +- {} should be negative",
            dpi.estimate,
            dpi.stderr
        );
    }

    #[test]
    fn gateaux_covers_the_jump_tilt() {
        let sc = v(&sj());
        let saddle = StrategyPair::constant(
            0.625,
            0.15484574527148342,
            [-0.125, 0.0, 0.0, 0.18321595661992321],
        );
        let derivs = gateaux_check(&sc, &saddle, 1e-3, &cfg(8_192, 200)).unwrap();
        let names: Vec<_> = derivs.iter().map(|d| d.direction).collect();
        assert_eq!(names, vec!["pi", "kappa", "theta1", "theta4"]);
        for d in &derivs {
            assert!(
                d.estimate.abs() < 3.0 * d.stderr,
                "{} derivative {} +- {} should vanish",
                d.direction,
                d.estimate,
                d.stderr
            );
        }
    }

    #[test]
    fn common_random_numbers_beat_decorrelated_differences() {
        let sc = v(&s0());
        let saddle = StrategyPair::constant(0.625, 0.625, [-0.125, 0.25, 0.0, 0.0]);
        let mut c = cfg(4_096, 100);
        let crn = gateaux_check(&sc, &saddle, 1e-3, &c).unwrap();
        c.crn = false;
        let dec = gateaux_check(&sc, &saddle, 1e-3, &c).unwrap();
        for (a, b) in crn.iter().zip(&dec) {
            assert_eq!(a.direction, b.direction);
            assert!(
                b.stderr > 10.0 * a.stderr,
                "{}: decorrelated se {} should dwarf fused se {}",
                a.direction,
                b.stderr,
                a.stderr
            );
        }
    }

    #[test]
    fn feedback_strategies_admit_directional_probes() {
        // state-dependent bump: the derivative at the insider optimum
        // vanishes direction by direction
        let sc = v(&with_wbar_insider(s0(), 2.0, None));
        let sol = crate::closedform::small_robust_insider_insurance(&sc).unwrap();
        let derivs = gateaux_check(&sc, &sol.strategy, 1e-3, &cfg(8_192, 200)).unwrap();
        for d in &derivs {
            assert!(
                d.estimate.abs() < 3.5 * d.stderr,
                "{} derivative {} +- {} should vanish at the insider optimum",
                d.direction,
                d.estimate,
                d.stderr
            );
        }
        // the strategy maps actually vary with the state
        let st0 = PathState::default();
        let st1 = PathState { y0: 1.0, ..PathState::default() };
        assert_ne!((sol.strategy.kappa)(0.5, &st0), (sol.strategy.kappa)(0.5, &st1));
    }

    #[test]
    fn martingale_suite_accepts_the_saddle_tilt() {
        let sc = v(&s0());
        let saddle = StrategyPair::constant(0.625, 0.625, [-0.125, 0.25, 0.0, 0.0]);
        let rep = martingale_suite(&sc, &saddle, 10, &cfg(8_192, 250)).unwrap();
        assert_eq!(rep.checks.len(), 10);
        assert!(rep.max_abs_z < 3.0, "max |z| = {}", rep.max_abs_z);
        assert!(rep.second_moment_nondecreasing);
        assert!(!rep.high_variance);
        assert_eq!(rep.checks[9].t, 1.0);
    }

    #[test]
    fn martingale_suite_flags_extreme_tilts() {
        let sc = v(&s0());
        let wild = StrategyPair::constant(0.0, 0.0, [3.0, 0.0, 0.0, 0.0]);
        let rep = martingale_suite(&sc, &wild, 5, &cfg(4_000, 100)).unwrap();
        assert!(rep.high_variance);
    }
}
