//! Numerical solvers for the two backward equations of the robust game: the
//! insurer's wealth equation through its conditional-expectation
//! representation, and the value equation through backward Euler with
//! least-squares regression plus shooting on the terminal constant.
//!
//! The value equation is solved on simulated state paths of the enlarged
//! filtration. Conditional expectations are fitted per time slice on a
//! polynomial basis of the observable state (the signal value and the running
//! kernel-weighted driver integral), the volatility `z` is read off a
//! regression of the martingale increments, and the generator is evaluated
//! explicitly in the fitted `z`. The terminal value is an unknown constant:
//! a scalar on the natural filtration, one constant per signal quantile bin
//! under insider information. Bisection on that constant matches the time
//! zero value to the start capital.
//!
//! Scenarios whose filtration carries no state (no insider signal) collapse
//! to exact deterministic backward integration: every path sees the same
//! coefficients, so the regression degenerates to the identity and `z`
//! vanishes. The Monte Carlo machinery engages exactly when a signal makes
//! the coefficients state dependent.
//!
//! Jump scenarios are out of scope here: their solvers are closed form.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::closedform::neutral_controls;
use crate::curves::Curve;
use crate::enlargement::{drift_for, kernel_norm_sq, InformationDrift};
use crate::error::{Error, Result};
use crate::numerics::{cholesky, cholesky_solve, condition_spd};
use crate::rng::{decorrelate, stream_rng, Stream};
use crate::scenario::{InsiderSource, InsiderSpec, Scenario, ValidatedScenario};
use crate::simulate::{true_dt, SimConfig};
use crate::strategy::{const_fn, PathState, StrategyPair};

/// Default tolerance on `|L(0) - ln x0|` for the shooting loop.
pub const DEFAULT_SHOOTING_TOL: f64 = 1e-3;

/// Number of signal quantile bins carrying separate terminal constants.
pub const QUANTILE_BINS: usize = 32;

/// Inner sample size per node of the nested wealth representation.
pub const INNER_PATHS: u64 = 4096;

/// Cap on total driver draws for the nested wealth representation.
const NESTED_MC_BUDGET: u64 = 2_000_000_000;

/// Half-width cap of the terminal-constant bracket after expansions.
const MAX_BRACKET_HALF_WIDTH: f64 = 64.0;

/// Bisection steps allowed before the shooting loop gives up.
const MAX_BISECTION_STEPS: u32 = 200;

/// Minimum regression points per basis function.
const MIN_PATHS_PER_BASIS_DIM: usize = 16;

/// Largest basis size: total degree three in two state coordinates.
const MAX_BASIS: usize = 10;

/// Simulation sizes matching the value-equation defaults: 2e5 regression
/// paths and 500 time steps per unit of horizon.
pub fn bsde_defaults() -> SimConfig {
    SimConfig {
        n_paths: 200_000,
        n_steps_per_unit: 500,
        ..SimConfig::default()
    }
}

/// Which backward equation a solution came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BsdeKind {
    /// Wealth equation of the robust problem, `X*_t = E[Pi(t,T) Itilde(c3 Pi(0,T)) | H_t]`.
    LinearWealth,
    /// Value equation of the robust problem with the quadratic generator.
    QuadraticRobust,
    /// Value equation with controls clamped to the neutral feedback.
    ClampNeutral,
}

/// Convergence and conditioning record of a solve.
#[derive(Clone, Debug)]
pub struct BsdeDiagnostics {
    /// Backward sweeps spent by the shooting loop (bracketing plus bisection),
    /// maximal over bins.
    pub shooting_iterations: u32,
    /// Largest `|L(0) - ln x0|` over bins at the accepted constants; for the
    /// wealth equation, `|X(0) - x0|`.
    pub residual_at_zero: f64,
    /// Largest regression Gram condition estimate seen.
    pub condition_number: f64,
    /// Largest regression basis size used.
    pub basis_dim: usize,
    /// Paths behind the regressions (zero when the solve is deterministic).
    pub regression_paths: u64,
}

/// A solved backward equation: central-state profiles, the shot terminal
/// level, and the fitted coefficient tables needed to read strategies off.
#[derive(Clone, Debug)]
pub struct BsdeSolution {
    pub kind: BsdeKind,
    /// Time grid, `n_steps + 1` points from zero to the horizon.
    pub grid: Vec<f64>,
    /// Value profile along the central state path (signal at its conditioning
    /// value or zero, drivers at their conditional mean). For the wealth
    /// equation this is the wealth level itself, otherwise `L_t`.
    pub y: Vec<f64>,
    /// Volatility profiles at the left grid points along the central state
    /// path. Empty when the representation does not expose them.
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    /// The shot constant: `c2*` (path-weighted over bins under a signal) or
    /// `c3*` for the wealth equation.
    pub terminal_constant: f64,
    /// Terminal constant per signal bin, lowest signal first. One entry
    /// without a signal; empty for the wealth equation.
    pub bin_constants: Vec<f64>,
    pub diagnostics: BsdeDiagnostics,
    scenario: Scenario,
    tables: Option<Arc<SliceTables>>,
}

impl BsdeSolution {
    /// Regressed value `L(t, state)` of a value-equation solution, evaluated
    /// on the slice containing `t`. `None` for wealth-equation solutions.
    pub fn value_at(&self, t: f64, state: &PathState) -> Option<f64> {
        let tables = self.tables.as_ref()?;
        Some(tables.value_at(t, state))
    }
}

// ---------------------------------------------------------------------------
// Shared slice data
// ---------------------------------------------------------------------------

/// Coefficients frozen on one time slice `[t_k, t_k + dt)`.
#[derive(Clone, Copy, Debug)]
struct SliceCoeffs {
    t: f64,
    r: f64,
    sigma: f64,
    sigma_tilde: f64,
    b: f64,
    mu_ex: f64,
    prem: f64,
    varrho: f64,
    iota: f64,
    cbar: f64,
    /// Kernel value at `t`, zero without a signal.
    kern: f64,
    /// Remaining signal variance `int_t^{T0} kern^2`, zero without a signal.
    norm_tail: f64,
    /// Price-impact weight of the quadratic generator,
    /// `(sigma - sigma_tilde) / (4 (1 - rho^2) (sigma + sigma_tilde - 2 rho^2 sigma))`.
    impact: f64,
    /// `sigma + sigma_tilde - 2 rho^2 sigma`, the saddle system determinant.
    denom: f64,
}

/// The insider signal's standing data.
#[derive(Clone, Debug)]
struct SignalMeta {
    source: InsiderSource,
    kernel: Curve,
    t0: f64,
    realized: Option<f64>,
    norm0: f64,
}

fn signal_meta(v: &ValidatedScenario) -> Option<SignalMeta> {
    match &v.scenario().insider {
        InsiderSpec::BrownianFunctional { source, kernel, t0, realized } => Some(SignalMeta {
            source: *source,
            kernel: kernel.clone(),
            t0: *t0,
            realized: *realized,
            norm0: kernel_norm_sq(kernel, 0.0, *t0),
        }),
        _ => None,
    }
}

fn slice_coeffs(
    v: &ValidatedScenario,
    meta: Option<&SignalMeta>,
    dt: f64,
    n_steps: usize,
) -> Result<Vec<SliceCoeffs>> {
    let s = v.scenario();
    let rho = s.insurance.rho;
    let mut out = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let t = dt * k as f64;
        let sigma = s.market.sigma.at(t);
        let sigma_tilde = v.sigma_tilde(t);
        let denom = sigma + sigma_tilde - 2.0 * rho * rho * sigma;
        if denom.abs() < 1e-12 {
            return Err(Error::SingularConfiguration(format!(
                "saddle system determinant vanishes at t={t}"
            )));
        }
        let impact =
            (sigma - sigma_tilde) / (4.0 * (1.0 - rho * rho) * denom);
        let (kern, norm_tail) = match meta {
            Some(m) => (m.kernel.at(t), kernel_norm_sq(&m.kernel, t, m.t0)),
            None => (0.0, 0.0),
        };
        out.push(SliceCoeffs {
            t,
            r: s.market.r.at(t),
            sigma,
            sigma_tilde,
            b: s.insurance.b.at(t),
            mu_ex: s.market.mu0.at(t) - s.market.r.at(t),
            prem: s.insurance.lambda.at(t) - s.insurance.a.at(t),
            varrho: s.market.varrho.at(t),
            iota: v.iota(t),
            cbar: v.cbar(t),
            kern,
            norm_tail,
            impact,
            denom,
        });
    }
    Ok(out)
}

/// Information drift components at one slice given the signal residual pull.
fn drift_components(source: InsiderSource, rho: f64, omega: f64, pull: f64) -> (f64, f64) {
    match source {
        InsiderSource::Wbar => (rho * pull, omega * pull),
        InsiderSource::W1 => (pull, 0.0),
    }
}

/// Drift pull of the conditioned source toward the signal residual. Zero
/// once the remaining signal variance is exhausted (or absent a signal).
fn pull_of(c: &SliceCoeffs, y0: f64, run: f64) -> f64 {
    if c.norm_tail > 0.0 {
        c.kern * (y0 - run) / c.norm_tail
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Quadratic generator and saddle maps
// ---------------------------------------------------------------------------

/// Quadratic generator of the value equation at effective prices of risk
/// `pt1 = iota + phi1`, `pt2 = cbar - phi2` and volatility `(z1, z2)`.
fn quad_generator(c: &SliceCoeffs, rho: f64, omega: f64, pt1: f64, pt2: f64, z1: f64, z2: f64) -> f64 {
    let bracket = (1.0 - rho * rho) * (z1 + pt1) - rho * omega * (z2 - pt2);
    0.25 * (z1 * z1 + z2 * z2) - 0.5 * pt1 * z1 + 0.5 * pt2 * z2
        - c.r
        - 0.25 * (pt1 * pt1 + pt2 * pt2)
        - c.impact * bracket * bracket
}

/// Saddle controls read off the value equation's volatility.
fn saddle_controls(
    c: &SliceCoeffs,
    rho: f64,
    omega: f64,
    pt1: f64,
    pt2: f64,
    z1: f64,
    z2: f64,
) -> (f64, f64, f64, f64) {
    let pi = ((1.0 - rho * rho) * (z1 + pt1) - rho * omega * (z2 - pt2)) / c.denom;
    let kappa = if c.b == 0.0 {
        0.0
    } else {
        (-omega * (c.sigma + c.sigma_tilde) * (z2 - pt2)
            + rho * (c.sigma - c.sigma_tilde) * (z1 + pt1))
            / (2.0 * c.denom * c.b)
    };
    let vol1 = c.sigma * pi - rho * c.b * kappa;
    let vol2 = -omega * c.b * kappa;
    (pi, kappa, z1 - vol1, z2 - vol2)
}

/// Growth rate of log wealth under the enlarged filtration at controls
/// `(pi, kappa)` and information drift `(phi1, phi2)`.
fn log_growth(c: &SliceCoeffs, rho: f64, omega: f64, pi: f64, kappa: f64, phi1: f64, phi2: f64) -> f64 {
    let vol1 = c.sigma * pi - rho * c.b * kappa;
    let vol2 = -omega * c.b * kappa;
    c.r + c.mu_ex * pi + c.varrho * pi * pi + c.prem * kappa
        - 0.5 * (vol1 * vol1 + vol2 * vol2)
        + vol1 * phi1
        + vol2 * phi2
}

/// Per-slice linear maps from `(pt1, pt2)` to the neutral controls. The
/// neutral first-order system is linear in the prices of risk, so two basis
/// evaluations determine it and surface any singular slice up front.
fn clamp_maps(v: &ValidatedScenario, coeffs: &[SliceCoeffs]) -> Result<Vec<[f64; 4]>> {
    coeffs
        .iter()
        .map(|c| {
            let (p1, k1) = neutral_controls(v, c.t, 1.0, 0.0)?;
            let (p2, k2) = neutral_controls(v, c.t, 0.0, 1.0)?;
            Ok([p1, p2, k1, k2])
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Forward state paths
// ---------------------------------------------------------------------------

/// Simulated enlarged-filtration state: driver increments and the running
/// kernel-weighted source integral, slice major.
struct ForwardPaths {
    n_paths: usize,
    n_steps: usize,
    /// Driver increments of the insider's Brownian motions, `[k * n + p]`.
    dw1: Vec<f32>,
    dw2: Vec<f32>,
    /// Running source integral at each grid time, `[(k) * n + p]`,
    /// `n_steps + 1` slices.
    run: Vec<f32>,
    /// Signal value per path.
    y0: Vec<f64>,
}

fn simulate_state_paths(
    coeffs: &[SliceCoeffs],
    meta: &SignalMeta,
    rho: f64,
    omega: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> ForwardPaths {
    let n_steps = coeffs.len();
    let sqrt_dt = dt.sqrt();
    let sd0 = meta.norm0.sqrt();
    let mut dw1 = vec![0.0f32; n_steps * n_paths];
    let mut dw2 = vec![0.0f32; n_steps * n_paths];
    let mut run = vec![0.0f32; (n_steps + 1) * n_paths];
    let mut y0 = vec![0.0f64; n_paths];
    for p in 0..n_paths {
        let mut rng = stream_rng(seed, Stream::Bsde, p as u64);
        let y = match meta.realized {
            Some(c) => c,
            None => sd0 * rng.sample::<f64, _>(StandardNormal),
        };
        y0[p] = y;
        let mut r = 0.0f64;
        for (k, c) in coeffs.iter().enumerate() {
            let g1: f64 = rng.sample(StandardNormal);
            let g2: f64 = rng.sample(StandardNormal);
            let d1 = g1 * sqrt_dt;
            let d2 = g2 * sqrt_dt;
            dw1[k * n_paths + p] = d1 as f32;
            dw2[k * n_paths + p] = d2 as f32;
            let pull = pull_of(c, y, r);
            let source_h = match meta.source {
                InsiderSource::Wbar => rho * d1 + omega * d2,
                InsiderSource::W1 => d1,
            };
            r += c.kern * (source_h + pull * dt);
            run[(k + 1) * n_paths + p] = r as f32;
        }
    }
    ForwardPaths { n_paths, n_steps, dw1, dw2, run, y0 }
}

// ---------------------------------------------------------------------------
// Regression basis
// ---------------------------------------------------------------------------

/// One slice's fitted regression: normalization of the two state coordinates
/// `(signal, running integral)`, the conditional-mean coefficients, and the
/// volatility coefficients (empty in clamp mode).
#[derive(Clone, Debug)]
struct SliceFit {
    active: [bool; 2],
    m: [f64; 2],
    s: [f64; 2],
    beta: Vec<f64>,
    gamma1: Vec<f64>,
    gamma2: Vec<f64>,
}

fn basis_dim(active: [bool; 2]) -> usize {
    match (active[0], active[1]) {
        (true, true) => MAX_BASIS,
        (false, false) => 1,
        _ => 4,
    }
}

/// Monomials of total degree at most three in the active normalized
/// coordinates. Returns the basis size.
fn basis_row(active: [bool; 2], u1: f64, u2: f64, out: &mut [f64; MAX_BASIS]) -> usize {
    match (active[0], active[1]) {
        (true, true) => {
            out[0] = 1.0;
            out[1] = u1;
            out[2] = u2;
            out[3] = u1 * u1;
            out[4] = u1 * u2;
            out[5] = u2 * u2;
            out[6] = u1 * u1 * u1;
            out[7] = u1 * u1 * u2;
            out[8] = u1 * u2 * u2;
            out[9] = u2 * u2 * u2;
            MAX_BASIS
        }
        (false, false) => {
            out[0] = 1.0;
            1
        }
        _ => {
            let u = if active[0] { u1 } else { u2 };
            out[0] = 1.0;
            out[1] = u;
            out[2] = u * u;
            out[3] = u * u * u;
            4
        }
    }
}

impl SliceFit {
    fn eval_basis(&self, y0: f64, run: f64, out: &mut [f64; MAX_BASIS]) -> usize {
        let u1 = if self.active[0] { (y0 - self.m[0]) / self.s[0] } else { 0.0 };
        let u2 = if self.active[1] { (run - self.m[1]) / self.s[1] } else { 0.0 };
        basis_row(self.active, u1, u2, out)
    }

    fn fitted(&self, coef: &[f64], y0: f64, run: f64) -> f64 {
        let mut row = [0.0; MAX_BASIS];
        let p = self.eval_basis(y0, run, &mut row);
        coef.iter().zip(&row[..p]).map(|(c, b)| c * b).sum()
    }
}

// ---------------------------------------------------------------------------
// Backward sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Quad,
    Clamp,
}

struct SweepCtx<'a> {
    coeffs: &'a [SliceCoeffs],
    paths: &'a ForwardPaths,
    meta: &'a SignalMeta,
    rho: f64,
    omega: f64,
    dt: f64,
    mode: Mode,
    clamp: Option<&'a [[f64; 4]]>,
}

struct SweepOutput {
    mean_l0: f64,
    fits: Option<Vec<SliceFit>>,
    condition: f64,
}

/// One backward pass over a bin's paths starting from the terminal constant
/// `c2`. Records the per-slice fits and a Gram condition estimate when
/// `record` is set.
fn sweep(ctx: &SweepCtx, bin: &[u32], c2: f64, record: bool) -> Result<SweepOutput> {
    let n = bin.len();
    let n_paths = ctx.paths.n_paths;
    let n_steps = ctx.paths.n_steps;
    let inv_n = 1.0 / n as f64;
    let mut l = vec![c2; n];
    let mut fits: Vec<SliceFit> = Vec::new();
    let mut condition = 1.0f64;
    let mid_slice = n_steps / 2;
    let mut row = [0.0; MAX_BASIS];
    let mut scratch_e = vec![0.0f64; n];
    let mut scratch_z1 = vec![0.0f64; n];
    let mut scratch_z2 = vec![0.0f64; n];

    for k in (0..n_steps).rev() {
        let c = &ctx.coeffs[k];
        let run_slice = &ctx.paths.run[k * n_paths..(k + 1) * n_paths];

        // Normalize the state coordinates on this slice's sample.
        let mut m = [0.0f64; 2];
        let mut s = [0.0f64; 2];
        for &pid in bin {
            let y = ctx.paths.y0[pid as usize];
            let r = run_slice[pid as usize] as f64;
            m[0] += y;
            m[1] += r;
            s[0] += y * y;
            s[1] += r * r;
        }
        m[0] *= inv_n;
        m[1] *= inv_n;
        let var0 = (s[0] * inv_n - m[0] * m[0]).max(0.0);
        let var1 = (s[1] * inv_n - m[1] * m[1]).max(0.0);
        s[0] = var0.sqrt();
        s[1] = var1.sqrt();
        let active = [
            s[0] > 1e-10 * (1.0 + m[0].abs()),
            s[1] > 1e-10 * (1.0 + m[1].abs()),
        ];
        let p = basis_dim(active);

        // Gram and right-hand sides in one pass.
        let mut gram = [0.0f64; MAX_BASIS * MAX_BASIS];
        let mut rhs_l = [0.0f64; MAX_BASIS];
        for (i, &pid) in bin.iter().enumerate() {
            let pid = pid as usize;
            let u1 = if active[0] { (ctx.paths.y0[pid] - m[0]) / s[0] } else { 0.0 };
            let u2 = if active[1] { (run_slice[pid] as f64 - m[1]) / s[1] } else { 0.0 };
            basis_row(active, u1, u2, &mut row);
            for a in 0..p {
                rhs_l[a] += row[a] * l[i];
                for b in 0..=a {
                    gram[a * p + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..=a {
                let g = gram[a * p + b] * inv_n;
                gram[a * p + b] = g;
                gram[b * p + a] = g;
            }
        }
        for v in rhs_l[..p].iter_mut() {
            *v *= inv_n;
        }
        let chol = cholesky(&gram[..p * p], p)?;
        let beta = cholesky_solve(&chol, p, &rhs_l[..p]);
        if record && k == mid_slice {
            condition = condition_spd(&gram[..p * p], &chol, p);
        }

        // Conditional means, then the volatility from the martingale
        // residuals (quadratic mode only).
        let mut gamma1 = vec![0.0f64; if ctx.mode == Mode::Quad { p } else { 0 }];
        let mut gamma2 = vec![0.0f64; gamma1.len()];
        for (i, &pid) in bin.iter().enumerate() {
            let pid = pid as usize;
            let u1 = if active[0] { (ctx.paths.y0[pid] - m[0]) / s[0] } else { 0.0 };
            let u2 = if active[1] { (run_slice[pid] as f64 - m[1]) / s[1] } else { 0.0 };
            basis_row(active, u1, u2, &mut row);
            let mut e = 0.0;
            for a in 0..p {
                e += beta[a] * row[a];
            }
            scratch_e[i] = e;
        }
        if ctx.mode == Mode::Quad {
            let mut rhs1 = [0.0f64; MAX_BASIS];
            let mut rhs2 = [0.0f64; MAX_BASIS];
            let inv_dt = 1.0 / ctx.dt;
            for (i, &pid) in bin.iter().enumerate() {
                let pid = pid as usize;
                let resid = l[i] - scratch_e[i];
                let d1 = ctx.paths.dw1[k * n_paths + pid] as f64;
                let d2 = ctx.paths.dw2[k * n_paths + pid] as f64;
                let u1 = if active[0] { (ctx.paths.y0[pid] - m[0]) / s[0] } else { 0.0 };
                let u2 = if active[1] { (run_slice[pid] as f64 - m[1]) / s[1] } else { 0.0 };
                basis_row(active, u1, u2, &mut row);
                let w1 = resid * d1 * inv_dt;
                let w2 = resid * d2 * inv_dt;
                for a in 0..p {
                    rhs1[a] += row[a] * w1;
                    rhs2[a] += row[a] * w2;
                }
            }
            for v in rhs1[..p].iter_mut() {
                *v *= inv_n;
            }
            for v in rhs2[..p].iter_mut() {
                *v *= inv_n;
            }
            gamma1 = cholesky_solve(&chol, p, &rhs1[..p]);
            gamma2 = cholesky_solve(&chol, p, &rhs2[..p]);
            for (i, &pid) in bin.iter().enumerate() {
                let pid = pid as usize;
                let u1 = if active[0] { (ctx.paths.y0[pid] - m[0]) / s[0] } else { 0.0 };
                let u2 = if active[1] { (run_slice[pid] as f64 - m[1]) / s[1] } else { 0.0 };
                basis_row(active, u1, u2, &mut row);
                let mut z1 = 0.0;
                let mut z2 = 0.0;
                for a in 0..p {
                    z1 += gamma1[a] * row[a];
                    z2 += gamma2[a] * row[a];
                }
                scratch_z1[i] = z1;
                scratch_z2[i] = z2;
            }
        }

        // Explicit generator step.
        for (i, &pid) in bin.iter().enumerate() {
            let pid = pid as usize;
            let y = ctx.paths.y0[pid];
            let r = run_slice[pid] as f64;
            let pull = pull_of(c, y, r);
            let (phi1, phi2) = drift_components(ctx.meta.source, ctx.rho, ctx.omega, pull);
            let pt1 = c.iota + phi1;
            let pt2 = c.cbar - phi2;
            let f = match ctx.mode {
                Mode::Quad => quad_generator(
                    c,
                    ctx.rho,
                    ctx.omega,
                    pt1,
                    pt2,
                    scratch_z1[i],
                    scratch_z2[i],
                ),
                Mode::Clamp => {
                    let map = &ctx.clamp.expect("clamp maps")[k];
                    let pi = map[0] * pt1 + map[1] * pt2;
                    let kappa = map[2] * pt1 + map[3] * pt2;
                    -log_growth(c, ctx.rho, ctx.omega, pi, kappa, phi1, phi2)
                }
            };
            l[i] = scratch_e[i] + f * ctx.dt;
        }

        if record {
            fits.push(SliceFit { active, m, s, beta, gamma1, gamma2 });
        }
    }

    if record {
        fits.reverse();
    }
    let mean_l0 = l.iter().sum::<f64>() * inv_n;
    Ok(SweepOutput {
        mean_l0,
        fits: if record { Some(fits) } else { None },
        condition,
    })
}

// ---------------------------------------------------------------------------
// Shooting
// ---------------------------------------------------------------------------

/// Bisection on the terminal constant until the time-zero value matches
/// `target` within `tol`. Returns the constant, the sweeps spent, and the
/// final residual.
fn shoot<F: FnMut(f64) -> Result<f64>>(
    mut eval_l0: F,
    target: f64,
    tol: f64,
) -> Result<(f64, u32, f64)> {
    let mut sweeps = 0u32;
    let mut half = 1.0f64;
    let mut lo = target - half;
    let mut hi = target + half;
    let mut r_lo = {
        sweeps += 1;
        eval_l0(lo)? - target
    };
    let mut r_hi = {
        sweeps += 1;
        eval_l0(hi)? - target
    };
    while r_lo > 0.0 || r_hi < 0.0 {
        if half >= MAX_BRACKET_HALF_WIDTH {
            return Err(Error::ShootingDiverged(format!(
                "time-zero value stays outside [{r_lo:.3e}, {r_hi:.3e}] of the start \
                 capital within terminal-constant half-width {half}"
            )));
        }
        half *= 4.0;
        if r_lo > 0.0 {
            lo = target - half;
            sweeps += 1;
            r_lo = eval_l0(lo)? - target;
        }
        if r_hi < 0.0 {
            hi = target + half;
            sweeps += 1;
            r_hi = eval_l0(hi)? - target;
        }
    }
    if r_lo.abs() <= tol {
        return Ok((lo, sweeps, r_lo));
    }
    if r_hi.abs() <= tol {
        return Ok((hi, sweeps, r_hi));
    }
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        sweeps += 1;
        let r_mid = eval_l0(mid)? - target;
        if r_mid.abs() <= tol {
            return Ok((mid, sweeps, r_mid));
        }
        if r_mid.signum() == r_lo.signum() {
            lo = mid;
            r_lo = r_mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::ShootingDiverged(format!(
        "residual above {tol:.1e} after {MAX_BISECTION_STEPS} bisection steps"
    )))
}

// ---------------------------------------------------------------------------
// Coefficient tables behind a solved value equation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct SliceTables {
    v: ValidatedScenario,
    dt: f64,
    n_steps: usize,
    horizon: f64,
    mode: Mode,
    source: Option<InsiderSource>,
    /// Interior signal cut points between bins, length `bins - 1`.
    bin_edges: Vec<f64>,
    /// Fits per bin per slice.
    bins: Vec<Vec<SliceFit>>,
    bin_constants: Vec<f64>,
    coeffs: Vec<SliceCoeffs>,
    clamp: Option<Vec<[f64; 4]>>,
}

impl SliceTables {
    fn bin_of(&self, y0: f64) -> usize {
        self.bin_edges.partition_point(|&e| e < y0)
    }

    fn run_of(&self, state: &PathState) -> f64 {
        match self.source {
            Some(InsiderSource::W1) => state.run_w1,
            _ => state.run_wbar,
        }
    }

    fn slice_of(&self, t: f64) -> usize {
        // nudge past rounding so exact grid points land on their own slice
        (((t / self.dt) + 1e-9).floor() as usize).min(self.n_steps - 1)
    }

    /// Fitted volatility pair at `(t, state)`.
    fn z_at(&self, t: f64, state: &PathState) -> (f64, f64) {
        let k = self.slice_of(t);
        let fit = &self.bins[self.bin_of(state.y0)][k];
        if fit.gamma1.is_empty() {
            return (0.0, 0.0);
        }
        let run = self.run_of(state);
        (
            fit.fitted(&fit.gamma1, state.y0, run),
            fit.fitted(&fit.gamma2, state.y0, run),
        )
    }

    /// Regressed value at `(t, state)`: the fitted conditional mean of the
    /// next slice plus the generator step, the same update the sweep applies.
    fn value_at(&self, t: f64, state: &PathState) -> f64 {
        let bin = self.bin_of(state.y0);
        if t >= self.horizon - 1e-9 * (1.0 + self.horizon) {
            return self.bin_constants[bin];
        }
        let k = self.slice_of(t);
        let fit = &self.bins[bin][k];
        let run = self.run_of(state);
        let e = fit.fitted(&fit.beta, state.y0, run);
        let c = &self.coeffs[k];
        let s = self.v.scenario();
        let rho = s.insurance.rho;
        let omega = (1.0 - rho * rho).sqrt();
        let pull = pull_of(c, state.y0, run);
        let source = self.source.unwrap_or(InsiderSource::Wbar);
        let (phi1, phi2) = drift_components(source, rho, omega, pull);
        let pt1 = c.iota + phi1;
        let pt2 = c.cbar - phi2;
        let f = match self.mode {
            Mode::Quad => {
                let (z1, z2) = if fit.gamma1.is_empty() {
                    (0.0, 0.0)
                } else {
                    (
                        fit.fitted(&fit.gamma1, state.y0, run),
                        fit.fitted(&fit.gamma2, state.y0, run),
                    )
                };
                quad_generator(c, rho, omega, pt1, pt2, z1, z2)
            }
            Mode::Clamp => {
                let map = &self.clamp.as_ref().expect("clamp maps")[k];
                let pi = map[0] * pt1 + map[1] * pt2;
                let kappa = map[2] * pt1 + map[3] * pt2;
                -log_growth(c, rho, omega, pi, kappa, phi1, phi2)
            }
        };
        e + f * self.dt
    }
}

// ---------------------------------------------------------------------------
// Value equation solver
// ---------------------------------------------------------------------------

/// Solve the value equation by backward Euler with regression and shooting.
///
/// With ambiguity enabled the generator is the quadratic saddle form; with
/// ambiguity disabled the controls are clamped to the neutral feedback and
/// the generator is the negated growth rate. Without an insider signal the
/// terminal constant is a scalar; with one, each of the
/// [`QUANTILE_BINS`] signal quantile bins (or the single conditioning value)
/// carries its own constant. `shooting_tol` bounds `|L(0) - ln x0|`.
///
/// Continuous scenarios only: jump regimes have closed-form solvers.
pub fn quadratic_bsde_solve(
    v: &ValidatedScenario,
    cfg: &SimConfig,
    shooting_tol: f64,
) -> Result<BsdeSolution> {
    if v.is_jump() {
        return Err(Error::ModeMismatch(
            "the value equation sweep covers the continuous case; jump regimes have \
             closed-form solvers"
            .into(),
        ));
    }
    if !(shooting_tol > 0.0) || !shooting_tol.is_finite() {
        return Err(Error::DomainError(format!(
            "shooting tolerance must be positive and finite, got {shooting_tol}"
        )));
    }
    let s = v.scenario();
    let mode = if s.ambiguity.enabled { Mode::Quad } else { Mode::Clamp };
    let rho = s.insurance.rho;
    let omega = (1.0 - rho * rho).sqrt();
    let horizon = s.horizon;
    let target = s.x0.ln();
    let dt = true_dt(horizon, cfg.n_steps_per_unit);
    let n_steps = (horizon / dt).round() as usize;
    let meta = signal_meta(v);
    let coeffs = slice_coeffs(v, meta.as_ref(), dt, n_steps)?;
    let clamp = if mode == Mode::Clamp { Some(clamp_maps(v, &coeffs)?) } else { None };
    let grid: Vec<f64> = (0..=n_steps)
        .map(|k| if k == n_steps { horizon } else { dt * k as f64 })
        .collect();

    let kind = if mode == Mode::Quad { BsdeKind::QuadraticRobust } else { BsdeKind::ClampNeutral };

    let Some(meta) = meta else {
        // No signal: every path sees the same coefficients, the regression is
        // the identity on a constant, and z vanishes. Integrate directly.
        let step = |k: usize| -> f64 {
            let c = &coeffs[k];
            match mode {
                Mode::Quad => quad_generator(c, rho, omega, c.iota, c.cbar, 0.0, 0.0),
                Mode::Clamp => {
                    let map = &clamp.as_ref().expect("clamp maps")[k];
                    let pi = map[0] * c.iota + map[1] * c.cbar;
                    let kappa = map[2] * c.iota + map[3] * c.cbar;
                    -log_growth(c, rho, omega, pi, kappa, 0.0, 0.0)
                }
            }
        };
        let offsets: Vec<f64> = {
            // offsets[k] = L_k - c2, accumulated backward
            let mut o = vec![0.0f64; n_steps + 1];
            for k in (0..n_steps).rev() {
                o[k] = o[k + 1] + step(k) * dt;
            }
            o
        };
        let (c2, sweeps, residual) = shoot(|c2| Ok(c2 + offsets[0]), target, shooting_tol)?;
        let y: Vec<f64> = offsets.iter().map(|o| c2 + o).collect();
        let fits: Vec<Vec<SliceFit>> = vec![(0..n_steps)
            .map(|k| SliceFit {
                active: [false, false],
                m: [0.0; 2],
                s: [0.0; 2],
                beta: vec![y[k + 1]],
                gamma1: if mode == Mode::Quad { vec![0.0] } else { vec![] },
                gamma2: if mode == Mode::Quad { vec![0.0] } else { vec![] },
            })
            .collect()];
        let tables = SliceTables {
            v: v.clone(),
            dt,
            n_steps,
            horizon,
            mode,
            source: None,
            bin_edges: vec![],
            bins: fits,
            bin_constants: vec![c2],
            coeffs,
            clamp,
        };
        return Ok(BsdeSolution {
            kind,
            grid,
            z1: vec![0.0; n_steps],
            z2: vec![0.0; n_steps],
            y,
            terminal_constant: c2,
            bin_constants: vec![c2],
            diagnostics: BsdeDiagnostics {
                shooting_iterations: sweeps,
                residual_at_zero: residual.abs(),
                condition_number: 1.0,
                basis_dim: 1,
                regression_paths: 0,
            },
            scenario: s.clone(),
            tables: Some(Arc::new(tables)),
        });
    };

    // Insider signal: regression over simulated state paths, one terminal
    // constant per signal bin.
    let n_paths = cfg.n_paths as usize;
    let n_bins = if meta.realized.is_some() { 1 } else { QUANTILE_BINS };
    let max_p = if meta.realized.is_some() { 4 } else { MAX_BASIS };
    let per_bin = n_paths / n_bins;
    if per_bin < MIN_PATHS_PER_BASIS_DIM * max_p {
        return Err(Error::RegressionIllConditioned(format!(
            "{n_paths} paths across {n_bins} signal bins leaves {per_bin} per regression, \
             below {} per basis function",
            MIN_PATHS_PER_BASIS_DIM * max_p
        )));
    }
    let paths = simulate_state_paths(&coeffs, &meta, rho, omega, n_paths, dt, cfg.seed);

    // Equal-count signal bins by rank.
    let mut order: Vec<u32> = (0..n_paths as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        paths.y0[a as usize].total_cmp(&paths.y0[b as usize])
    });
    let mut bin_ranges: Vec<(usize, usize)> = Vec::with_capacity(n_bins);
    for j in 0..n_bins {
        let lo = j * n_paths / n_bins;
        let hi = (j + 1) * n_paths / n_bins;
        bin_ranges.push((lo, hi));
    }
    let bin_edges: Vec<f64> = bin_ranges
        .iter()
        .skip(1)
        .map(|&(lo, _)| {
            0.5 * (paths.y0[order[lo - 1] as usize] + paths.y0[order[lo] as usize])
        })
        .collect();

    let ctx = SweepCtx {
        coeffs: &coeffs,
        paths: &paths,
        meta: &meta,
        rho,
        omega,
        dt,
        mode,
        clamp: clamp.as_deref(),
    };

    let mut bin_constants = Vec::with_capacity(n_bins);
    let mut bins_fits: Vec<Vec<SliceFit>> = Vec::with_capacity(n_bins);
    let mut max_sweeps = 0u32;
    let mut max_residual = 0.0f64;
    let mut max_condition = 1.0f64;
    for &(lo, hi) in &bin_ranges {
        let bin = &order[lo..hi];
        let (c2, sweeps, _) = shoot(
            |c2| sweep(&ctx, bin, c2, false).map(|o| o.mean_l0),
            target,
            shooting_tol,
        )?;
        let rec = sweep(&ctx, bin, c2, true)?;
        bin_constants.push(c2);
        bins_fits.push(rec.fits.expect("recorded fits"));
        max_sweeps = max_sweeps.max(sweeps);
        max_residual = max_residual.max((rec.mean_l0 - target).abs());
        max_condition = max_condition.max(rec.condition);
    }

    let weighted: f64 = bin_ranges
        .iter()
        .zip(&bin_constants)
        .map(|(&(lo, hi), c2)| (hi - lo) as f64 * c2)
        .sum::<f64>()
        / n_paths as f64;

    let tables = SliceTables {
        v: v.clone(),
        dt,
        n_steps,
        horizon,
        mode,
        source: Some(meta.source),
        bin_edges,
        bins: bins_fits,
        bin_constants: bin_constants.clone(),
        coeffs,
        clamp,
    };

    // Profiles along the central state path: the signal at its conditioning
    // value (or zero) and the source integral at its conditional mean.
    let y0_c = meta.realized.unwrap_or(0.0);
    let mut run_c = vec![0.0f64; n_steps + 1];
    for k in 0..n_steps {
        let c = &tables.coeffs[k];
        let pull = pull_of(c, y0_c, run_c[k]);
        run_c[k + 1] = run_c[k] + c.kern * pull * dt;
    }
    let state_at = |k: usize| -> PathState {
        let mut st = PathState { y0: y0_c, ..PathState::default() };
        match meta.source {
            InsiderSource::Wbar => st.run_wbar = run_c[k],
            InsiderSource::W1 => st.run_w1 = run_c[k],
        }
        st
    };
    let mut y = Vec::with_capacity(n_steps + 1);
    let mut z1 = Vec::with_capacity(n_steps);
    let mut z2 = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let st = state_at(k);
        y.push(tables.value_at(grid[k], &st));
        let (a, b) = tables.z_at(grid[k], &st);
        z1.push(a);
        z2.push(b);
    }
    y.push(tables.bin_constants[tables.bin_of(y0_c)]);

    Ok(BsdeSolution {
        kind,
        grid,
        y,
        z1,
        z2,
        terminal_constant: weighted,
        bin_constants,
        diagnostics: BsdeDiagnostics {
            shooting_iterations: max_sweeps,
            residual_at_zero: max_residual,
            condition_number: max_condition,
            basis_dim: max_p,
            regression_paths: cfg.n_paths,
        },
        scenario: s.clone(),
        tables: Some(Arc::new(tables)),
    })
}

// ---------------------------------------------------------------------------
// Wealth equation
// ---------------------------------------------------------------------------

/// Solve the wealth equation `X*_t = E[Pi(t,T) Itilde(c3 Pi(0,T)) | H_t]`
/// with `Itilde(y) = y^{-1/2}`, the discount kernel `Pi` carrying the
/// effective prices of risk, and `c3*` fixed by the start capital.
///
/// Without a signal the representation is closed form; with one, the
/// conditional expectations are nested Monte Carlo over the kernel, guarded
/// by a draw budget. Robust continuous small-insurer scenarios only.
pub fn linear_bsde_wealth(v: &ValidatedScenario, cfg: &SimConfig) -> Result<BsdeSolution> {
    if v.is_jump() {
        return Err(Error::ModeMismatch(
            "the wealth representation covers the continuous case; jump regimes have \
             closed-form solvers"
            .into(),
        ));
    }
    if !v.scenario().ambiguity.enabled {
        return Err(Error::ModeMismatch(
            "the wealth representation prices the robust problem; neutral regimes \
             use the direct solvers"
            .into(),
        ));
    }
    if v.is_large() {
        return Err(Error::ModeMismatch(
            "price impact requires the value equation sweep".into(),
        ));
    }
    let s = v.scenario();
    let horizon = s.horizon;
    let x0 = s.x0;
    let dt = true_dt(horizon, cfg.n_steps_per_unit);
    let n_steps = (horizon / dt).round() as usize;
    let meta = signal_meta(v);
    let coeffs = slice_coeffs(v, meta.as_ref(), dt, n_steps)?;
    let grid: Vec<f64> = (0..=n_steps)
        .map(|k| if k == n_steps { horizon } else { dt * k as f64 })
        .collect();

    let Some(meta) = meta else {
        // Deterministic prices of risk: every conditional expectation of the
        // kernel's square root is an explicit exponential.
        let mut i_r = vec![0.0f64; n_steps + 1];
        let mut i_q = vec![0.0f64; n_steps + 1];
        for k in 0..n_steps {
            let (a, b) = (grid[k], grid[k + 1]);
            i_r[k + 1] = i_r[k] + v.integrate_knots(|t| s.market.r.at(t), a, b);
            i_q[k + 1] = i_q[k]
                + v.integrate_knots(
                    |t| {
                        let q1 = v.iota(t);
                        let q2 = v.cbar(t);
                        q1 * q1 + q2 * q2
                    },
                    a,
                    b,
                );
        }
        let esq_0 = (-0.5 * i_r[n_steps] - 0.125 * i_q[n_steps]).exp();
        let c3 = (esq_0 / x0).powi(2);
        let mut y = Vec::with_capacity(n_steps + 1);
        for k in 0..=n_steps {
            let esq_k =
                (-0.5 * (i_r[n_steps] - i_r[k]) - 0.125 * (i_q[n_steps] - i_q[k])).exp();
            let pi_central = (-i_r[k] - 0.5 * i_q[k]).exp();
            y.push(esq_k / (c3 * pi_central).sqrt());
        }
        let z1: Vec<f64> = (0..n_steps).map(|k| 0.5 * v.iota(grid[k]) * y[k]).collect();
        let z2: Vec<f64> = (0..n_steps).map(|k| -0.5 * v.cbar(grid[k]) * y[k]).collect();
        let residual = (y[0] - x0).abs();
        return Ok(BsdeSolution {
            kind: BsdeKind::LinearWealth,
            grid,
            y,
            z1,
            z2,
            terminal_constant: c3,
            bin_constants: vec![],
            diagnostics: BsdeDiagnostics {
                shooting_iterations: 0,
                residual_at_zero: residual,
                condition_number: 1.0,
                basis_dim: 0,
                regression_paths: 0,
            },
            scenario: s.clone(),
            tables: None,
        });
    };

    // Nested Monte Carlo: an outer pass fixes c3 from E[sqrt(Pi(0,T))], then
    // each grid node prices the remaining kernel from the central state.
    let outer = cfg.n_paths;
    let inner_total: u64 = (0..n_steps as u64).map(|k| n_steps as u64 - k).sum::<u64>()
        * INNER_PATHS;
    let budget = outer * n_steps as u64 + inner_total;
    if budget > NESTED_MC_BUDGET {
        return Err(Error::NestedMcBudgetExceeded(format!(
            "{budget} driver draws needed, budget {NESTED_MC_BUDGET}; lower the path \
             count or coarsen the grid"
        )));
    }
    // The time-zero information already contains the signal, so the budget
    // constant is conditional on it: everything prices along the conditioning
    // value (or the central value zero when none was declared).
    let rho = s.insurance.rho;
    let omega = (1.0 - rho * rho).sqrt();
    let y0_c = meta.realized.unwrap_or(0.0);
    let (esq_0, _) = sqrt_kernel_mc(
        &coeffs,
        meta.source,
        rho,
        omega,
        0,
        y0_c,
        0.0,
        dt,
        outer,
        cfg.seed,
        Stream::Bsde,
    );
    let c3 = (esq_0 / x0).powi(2);

    // Central state path and the kernel along it (zero driver noise).
    let mut run_c = vec![0.0f64; n_steps + 1];
    let mut ln_pi_c = vec![0.0f64; n_steps + 1];
    for k in 0..n_steps {
        let c = &coeffs[k];
        let pull = pull_of(c, y0_c, run_c[k]);
        let (phi1, phi2) = drift_components(meta.source, rho, omega, pull);
        let pt1 = c.iota + phi1;
        let pt2 = c.cbar - phi2;
        ln_pi_c[k + 1] = ln_pi_c[k] - (c.r + 0.5 * (pt1 * pt1 + pt2 * pt2)) * dt;
        run_c[k + 1] = run_c[k] + c.kern * pull * dt;
    }
    let mut y = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        let esq_k = if k == n_steps {
            1.0
        } else {
            sqrt_kernel_mc(
                &coeffs,
                meta.source,
                rho,
                omega,
                k,
                y0_c,
                run_c[k],
                dt,
                INNER_PATHS,
                decorrelate(cfg.seed, 7001 + k as u64),
                Stream::InnerMc,
            )
            .0
        };
        y.push(esq_k / (c3 * ln_pi_c[k].exp()).sqrt());
    }
    let residual = (y[0] - x0).abs();
    Ok(BsdeSolution {
        kind: BsdeKind::LinearWealth,
        grid,
        y,
        z1: vec![],
        z2: vec![],
        terminal_constant: c3,
        bin_constants: vec![],
        diagnostics: BsdeDiagnostics {
            shooting_iterations: 0,
            residual_at_zero: residual,
            condition_number: 1.0,
            basis_dim: 0,
            regression_paths: outer,
        },
        scenario: s.clone(),
        tables: None,
    })
}

/// Monte Carlo mean and standard error of `sqrt(Pi(t_k, T))` conditional on
/// the state `(y0, run_start)` at slice `k_start`.
#[allow(clippy::too_many_arguments)]
fn sqrt_kernel_mc(
    coeffs: &[SliceCoeffs],
    source: InsiderSource,
    rho: f64,
    omega: f64,
    k_start: usize,
    y0: f64,
    run_start: f64,
    dt: f64,
    n_paths: u64,
    seed: u64,
    stream: Stream,
) -> (f64, f64) {
    let sqrt_dt = dt.sqrt();
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for p in 0..n_paths {
        let mut rng = stream_rng(seed, stream, p);
        let mut run = run_start;
        let mut ln_pi = 0.0f64;
        for c in coeffs.iter().skip(k_start) {
            let g1: f64 = rng.sample(StandardNormal);
            let g2: f64 = rng.sample(StandardNormal);
            let d1 = g1 * sqrt_dt;
            let d2 = g2 * sqrt_dt;
            let pull = pull_of(c, y0, run);
            let (phi1, phi2) = drift_components(source, rho, omega, pull);
            let pt1 = c.iota + phi1;
            let pt2 = c.cbar - phi2;
            ln_pi += -(c.r + 0.5 * (pt1 * pt1 + pt2 * pt2)) * dt - pt1 * d1 + pt2 * d2;
            let source_h = match source {
                InsiderSource::Wbar => rho * d1 + omega * d2,
                InsiderSource::W1 => d1,
            };
            run += c.kern * (source_h + pull * dt);
        }
        let v = (0.5 * ln_pi).exp();
        sum += v;
        sum_sq += v * v;
    }
    let n = n_paths as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// Strategy recovery
// ---------------------------------------------------------------------------

/// Read the saddle (or neutral) feedback strategies off a solved backward
/// equation. The solution must come from the same scenario.
pub fn recover_strategies(sol: &BsdeSolution, v: &ValidatedScenario) -> Result<StrategyPair> {
    if sol.scenario != *v.scenario() {
        return Err(Error::ModeMismatch(
            "the solution was computed for a different scenario".into(),
        ));
    }
    match sol.kind {
        BsdeKind::LinearWealth => {
            if sol.z1.is_empty() {
                return Err(Error::ModeMismatch(
                    "the wealth representation exposes controls in its closed-form \
                     regime only; solve the value equation for signal-dependent \
                     strategies"
                    .into(),
                ));
            }
            // Deterministic prices of risk: the volatility ratios pin the
            // controls directly.
            let s = v.scenario();
            let rho = s.insurance.rho;
            let omega = (1.0 - rho * rho).sqrt();
            let (v1, v2, v3, v4) = (v.clone(), v.clone(), v.clone(), v.clone());
            Ok(StrategyPair {
                pi: Arc::new(move |t, _state: &PathState| {
                    let sig = v1.scenario().market.sigma.at(t);
                    (v1.iota(t) + rho * v1.cbar(t) / omega) / (2.0 * sig)
                }),
                kappa: Arc::new(move |t, _state: &PathState| {
                    let b = v2.scenario().insurance.b.at(t);
                    if b == 0.0 { 0.0 } else { v2.cbar(t) / (2.0 * omega * b) }
                }),
                theta: [
                    Arc::new(move |t, _state: &PathState| -0.5 * v3.iota(t)),
                    Arc::new(move |t, _state: &PathState| 0.5 * v4.cbar(t)),
                    const_fn(0.0),
                    const_fn(0.0),
                ],
            })
        }
        BsdeKind::ClampNeutral => {
            let drift = drift_for(&v.scenario().insider, v.scenario().insurance.rho)?;
            Ok(neutral_feedback(v, drift))
        }
        BsdeKind::QuadraticRobust => {
            let tables = sol.tables.as_ref().expect("robust solutions carry tables").clone();
            let drift = drift_for(&v.scenario().insider, v.scenario().insurance.rho)?;
            let point = move |t: f64, state: &PathState| -> (f64, f64, f64, f64) {
                let k = tables.slice_of(t);
                let c = &tables.coeffs[k];
                let s = tables.v.scenario();
                let rho = s.insurance.rho;
                let omega = (1.0 - rho * rho).sqrt();
                let (z1, z2) = tables.z_at(t, state);
                let pt1 = c.iota + drift.phi1(t, state);
                let pt2 = c.cbar - drift.phi2(t, state);
                saddle_controls(c, rho, omega, pt1, pt2, z1, z2)
            };
            let (p1, p2, p3, p4) = (point.clone(), point.clone(), point.clone(), point);
            Ok(StrategyPair {
                pi: Arc::new(move |t, st: &PathState| p1(t, st).0),
                kappa: Arc::new(move |t, st: &PathState| p2(t, st).1),
                theta: [
                    Arc::new(move |t, st: &PathState| p3(t, st).2),
                    Arc::new(move |t, st: &PathState| p4(t, st).3),
                    const_fn(0.0),
                    const_fn(0.0),
                ],
            })
        }
    }
}

/// Neutral feedback controls evaluated at the effective prices of risk.
fn neutral_feedback(v: &ValidatedScenario, drift: InformationDrift) -> StrategyPair {
    let (v1, v2) = (v.clone(), v.clone());
    let (d1, d2) = (drift.clone(), drift);
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedform;
    use crate::simulate::simulate_bundle;
    use crate::testutil::{neutral, s0, sj, sl, v, with_wbar_insider};
    use approx::assert_abs_diff_eq;

    fn cfg(n_paths: u64, spu: u32) -> SimConfig {
        SimConfig {
            n_paths,
            n_steps_per_unit: spu,
            seed: 42,
            antithetic: false,
            threads: 1,
            crn: true,
            checkpoints: vec![],
        }
    }

    #[test]
    fn linear_wealth_matches_the_frozen_constants() {
        let v = v(&s0());
        let sol = linear_bsde_wealth(&v, &cfg(1, 500)).unwrap();
        assert_eq!(sol.kind, BsdeKind::LinearWealth);
        assert_abs_diff_eq!(sol.terminal_constant, 0.89751539999330448, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.y[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(*sol.y.last().unwrap(), 0.1471875f64.exp(), epsilon = 1e-12);
        for k in [0, 250, 499] {
            assert_abs_diff_eq!(sol.z1[k] / sol.y[k], 0.125, epsilon = 1e-12);
            assert_abs_diff_eq!(sol.z2[k] / sol.y[k], -0.25, epsilon = 1e-12);
        }
        assert!(sol.diagnostics.residual_at_zero < 1e-12);

        let strat = recover_strategies(&sol, &v).unwrap();
        let st = PathState::default();
        for t in [0.0, 0.3, 0.9] {
            assert_abs_diff_eq!((strat.pi)(t, &st), 0.625, epsilon = 1e-12);
            assert_abs_diff_eq!((strat.kappa)(t, &st), 0.625, epsilon = 1e-12);
            assert_abs_diff_eq!((strat.theta[0])(t, &st), -0.125, epsilon = 1e-12);
            assert_abs_diff_eq!((strat.theta[1])(t, &st), 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_wealth_guards_its_scope() {
        assert!(matches!(
            linear_bsde_wealth(&v(&sj()), &cfg(8, 10)),
            Err(Error::ModeMismatch(_))
        ));
        assert!(matches!(
            linear_bsde_wealth(&v(&neutral(s0())), &cfg(8, 10)),
            Err(Error::ModeMismatch(_))
        ));
        assert!(matches!(
            linear_bsde_wealth(&v(&sl()), &cfg(8, 10)),
            Err(Error::ModeMismatch(_))
        ));
        let insider = v(&with_wbar_insider(s0(), 2.0, None));
        assert!(matches!(
            linear_bsde_wealth(&insider, &cfg(100_000_000, 1000)),
            Err(Error::NestedMcBudgetExceeded(_))
        ));
    }

    #[test]
    fn inner_kernel_estimator_agrees_with_the_closed_form() {
        // Without a signal the pull vanishes and the conditional square-root
        // kernel from t = 0.4 to T = 1 is the exact exponential
        // exp(-r tau / 2 - (iota^2 + cbar^2) tau / 8) = exp(-0.0324375).
        // The estimator must land within Monte Carlo noise of it, which
        // pins the kernel increments, the discount sign, and the averaging.
        let val = v(&s0());
        let dt = 1.0 / 250.0;
        let coeffs = slice_coeffs(&val, None, dt, 250).unwrap();
        let (mean, se) = sqrt_kernel_mc(
            &coeffs,
            InsiderSource::Wbar,
            0.0,
            1.0,
            100,
            0.0,
            0.0,
            dt,
            16384,
            42,
            Stream::InnerMc,
        );
        let frozen = (-0.0324375f64).exp();
        assert!(se < 5e-3, "se {se}");
        assert!(
            (mean - frozen).abs() < 3.0 * se + 1e-4,
            "mean {mean} vs {frozen} with se {se}"
        );
    }

    #[test]
    fn nested_wealth_profile_prices_the_signal() {
        let sc = with_wbar_insider(s0(), 2.0, Some(0.4));
        let val = v(&sc);
        let sol = linear_bsde_wealth(&val, &cfg(8192, 100)).unwrap();
        assert_eq!(sol.z1.len(), 0);
        assert_eq!(sol.y.len(), 101);
        assert!(sol.y.iter().all(|x| x.is_finite() && *x > 0.0));
        // c3 is fixed by the start capital, so the time-zero node must
        // reprice it within the two estimators' Monte Carlo noise.
        assert!(
            sol.diagnostics.residual_at_zero < 0.03,
            "residual {}",
            sol.diagnostics.residual_at_zero
        );
        assert!(matches!(
            recover_strategies(&sol, &val),
            Err(Error::ModeMismatch(_))
        ));
    }

    #[test]
    fn quadratic_solver_recovers_the_diffusive_saddle() {
        let val = v(&s0());
        let defaults = bsde_defaults();
        assert_eq!(defaults.n_paths, 200_000);
        assert_eq!(defaults.n_steps_per_unit, 500);
        let sol = quadratic_bsde_solve(&val, &defaults, DEFAULT_SHOOTING_TOL).unwrap();
        assert_eq!(sol.kind, BsdeKind::QuadraticRobust);
        assert_abs_diff_eq!(sol.terminal_constant, 0.108125, epsilon = 2e-3);
        assert!(sol.diagnostics.shooting_iterations <= 30);
        assert!(sol.diagnostics.residual_at_zero <= DEFAULT_SHOOTING_TOL);
        assert_abs_diff_eq!(sol.y[0], 0.0, epsilon = DEFAULT_SHOOTING_TOL + 1e-12);
        // The terminal node carries the shot constant exactly.
        assert_eq!(*sol.y.last().unwrap(), sol.terminal_constant);
        assert_eq!(sol.bin_constants, vec![sol.terminal_constant]);

        let strat = recover_strategies(&sol, &val).unwrap();
        let st = PathState::default();
        for t in [0.1, 0.5, 0.9] {
            assert_abs_diff_eq!((strat.pi)(t, &st), 0.625, epsilon = 0.0125);
            assert_abs_diff_eq!((strat.kappa)(t, &st), 0.625, epsilon = 0.0125);
            assert_abs_diff_eq!((strat.theta[0])(t, &st), -0.125, epsilon = 0.0025);
            assert_abs_diff_eq!((strat.theta[1])(t, &st), 0.25, epsilon = 0.005);
        }
    }

    #[test]
    fn quadratic_price_impact_needs_the_asset_channel() {
        // With no excess return the saddle holds no stock, so the impact
        // slope must not move the value: the large and small solves agree
        // exactly on the rate-plus-premium integral r + cbar^2 / 4.
        let mut large = sl();
        large.market.mu0 = Curve::Constant(0.03);
        let mut small = s0();
        small.market.mu0 = Curve::Constant(0.03);
        let sol_large = quadratic_bsde_solve(&v(&large), &cfg(8, 500), 1e-10).unwrap();
        let sol_small = quadratic_bsde_solve(&v(&small), &cfg(8, 500), 1e-10).unwrap();
        assert_abs_diff_eq!(sol_large.terminal_constant, 0.0925, epsilon = 2e-10);
        assert_abs_diff_eq!(
            sol_large.terminal_constant,
            sol_small.terminal_constant,
            epsilon = 2e-10
        );
        assert!(sol_large.z1.iter().chain(sol_large.z2.iter()).all(|&z| z == 0.0));
        assert_abs_diff_eq!(sol_large.y[0], 0.0, epsilon = 2e-10);
    }

    #[test]
    fn quadratic_insider_bins_price_the_signal() {
        let sc = with_wbar_insider(s0(), 2.0, None);
        let val = v(&sc);
        let sol = quadratic_bsde_solve(&val, &cfg(32768, 50), 1e-3).unwrap();
        assert_eq!(sol.bin_constants.len(), QUANTILE_BINS);
        assert_eq!(sol.diagnostics.basis_dim, MAX_BASIS);
        assert_eq!(sol.diagnostics.regression_paths, 32768);
        assert!(sol.diagnostics.residual_at_zero <= 1e-3);
        // Signal-averaged value against the closed-form robust insider value.
        assert_abs_diff_eq!(
            sol.terminal_constant,
            0.35451651782819173,
            epsilon = 0.02
        );
        // Feedback controls at a concrete state against the closed form.
        let strat = recover_strategies(&sol, &val).unwrap();
        let reference = closedform::small_robust_insider_insurance(&val).unwrap();
        let st = PathState { y0: 0.4, ..PathState::default() };
        let t = 0.5;
        assert_abs_diff_eq!((reference.strategy.kappa)(t, &st), 0.35, epsilon = 1e-12);
        assert_abs_diff_eq!((strat.kappa)(t, &st), 0.35, epsilon = 0.06);
        assert_abs_diff_eq!((strat.pi)(t, &st), 0.625, epsilon = 0.02);
        assert_abs_diff_eq!(
            (strat.theta[1])(t, &st),
            (reference.strategy.theta[1])(t, &st),
            epsilon = 0.06
        );
        // Terminal node of the central bin is its constant exactly. The
        // empirical median can fall on either side of zero.
        let central = sol.tables.as_ref().unwrap().bin_of(0.0);
        assert!(central == QUANTILE_BINS / 2 - 1 || central == QUANTILE_BINS / 2);
        assert_eq!(*sol.y.last().unwrap(), sol.bin_constants[central]);
    }

    #[test]
    fn quadratic_clamp_reproduces_the_neutral_values() {
        // Large insurer, no signal: the clamp collapses to the neutral
        // growth-rate integral.
        let val = v(&neutral(sl()));
        let sol = quadratic_bsde_solve(&val, &cfg(8, 500), 1e-10).unwrap();
        assert_eq!(sol.kind, BsdeKind::ClampNeutral);
        assert_abs_diff_eq!(sol.terminal_constant, 0.19666666666666667, epsilon = 1e-9);
        let strat = recover_strategies(&sol, &val).unwrap();
        let st = PathState::default();
        assert_abs_diff_eq!((strat.pi)(0.0, &st), 5.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!((strat.kappa)(0.0, &st), 1.25, epsilon = 1e-12);
        assert_eq!((strat.theta[0])(0.3, &st), 0.0);

        // Small insurer with a signal: bin-averaged neutral value matches
        // the closed-form insider gain.
        let sc = with_wbar_insider(neutral(s0()), 2.0, None);
        let val = v(&sc);
        let sol = quadratic_bsde_solve(&val, &cfg(16384, 50), 1e-3).unwrap();
        assert_abs_diff_eq!(
            sol.terminal_constant,
            0.53282359027997265,
            epsilon = 0.035
        );
        let strat = recover_strategies(&sol, &val).unwrap();
        let st = PathState::default();
        assert_abs_diff_eq!((strat.pi)(0.0, &st), 1.25, epsilon = 1e-12);
        assert_abs_diff_eq!((strat.kappa)(0.0, &st), 1.25, epsilon = 1e-12);
    }

    #[test]
    fn quadratic_matches_the_grid_oracle_under_price_impact() {
        // No closed form exists here; the independent grid search must land
        // on the same saddle the value equation predicts.
        let val = v(&sl());
        let sol = quadratic_bsde_solve(&val, &cfg(8, 500), 1e-9).unwrap();
        let predicted = 0.03 + 0.5 * 0.0625 * 0.2 / 0.35 + 0.25 * 0.25;
        assert_abs_diff_eq!(sol.terminal_constant, predicted, epsilon = 1e-8);
        let strat = recover_strategies(&sol, &val).unwrap();
        let st = PathState::default();
        assert_abs_diff_eq!((strat.pi)(0.5, &st), 5.0 / 7.0, epsilon = 1e-9);
        assert_abs_diff_eq!((strat.kappa)(0.5, &st), 0.625, epsilon = 1e-9);
        assert_abs_diff_eq!((strat.theta[0])(0.5, &st), -0.2 * 5.0 / 7.0, epsilon = 1e-9);
        assert_abs_diff_eq!((strat.theta[1])(0.5, &st), 0.25, epsilon = 1e-9);

        // The grid adversary cannot reach theta1 = -sigma pi off its lattice,
        // and that under-minimization is smallest one cell above 5/7, so the
        // discrete argmax may sit at 0.75 or 0.875. kappa and the surplus
        // tilt land on the lattice exactly and must match.
        let grid = crate::oracle::SaddleGrid::for_scenario(&val);
        let mut oracle_cfg = cfg(32768, 16);
        oracle_cfg.antithetic = true;
        let report = crate::oracle::saddle_search(&val, &grid, &oracle_cfg).unwrap();
        assert!((report.pi - 5.0 / 7.0).abs() < 0.2, "pi {}", report.pi);
        assert_eq!(report.kappa, 0.625);
        assert!(
            (report.theta[0] + 0.2 * report.pi).abs() < 0.125 + 1e-12,
            "theta1 {} at pi {}",
            report.theta[0],
            report.pi
        );
        assert_eq!(report.theta[1], 0.25);
        // Tight enough to reject a value equation missing the impact
        // correction (2.2e-3 away), wide enough for the grid's own
        // adversary-lattice bias (about 3.5e-4).
        let tol = 1e-3 + 3.0 * report.value.stderr;
        assert!(
            (report.value.mean - sol.terminal_constant).abs() < tol,
            "grid value {} vs equation value {} (tol {tol})",
            report.value.mean,
            sol.terminal_constant
        );
    }

    #[test]
    fn quadratic_value_rises_with_the_rate() {
        let mut last = f64::NEG_INFINITY;
        for r in [0.01, 0.03, 0.05] {
            let mut sc = s0();
            sc.market.r = Curve::Constant(r);
            let sol = quadratic_bsde_solve(&v(&sc), &cfg(8, 50), 1e-8).unwrap();
            assert!(
                sol.terminal_constant > last,
                "value did not rise at r={r}"
            );
            last = sol.terminal_constant;
        }
    }

    #[test]
    fn quadratic_tracks_the_simulated_optimum_pathwise() {
        let val = v(&s0());
        let sol = quadratic_bsde_solve(&val, &cfg(8, 250), 1e-10).unwrap();
        let strat = recover_strategies(&sol, &val).unwrap();
        let mut sim_cfg = cfg(512, 250);
        sim_cfg.checkpoints = vec![0.25, 0.5, 0.75, 1.0];
        let records = simulate_bundle(&val, &[strat], &sim_cfg).unwrap();
        for rec in &records {
            for snap in &rec.snapshots {
                let st = PathState { y0: rec.y0, ..PathState::default() };
                let l = sol.value_at(snap.t, &st).unwrap();
                // At the no-signal saddle the tilted log wealth is
                // deterministic: the simulated path must ride the regressed
                // value to rounding.
                assert_abs_diff_eq!(snap.ln_eps + snap.ln_x, l, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn quadratic_guards_and_diagnoses() {
        assert!(matches!(
            quadratic_bsde_solve(&v(&sj()), &cfg(8, 10), 1e-3),
            Err(Error::ModeMismatch(_))
        ));
        assert!(matches!(
            quadratic_bsde_solve(&v(&s0()), &cfg(8, 10), 0.0),
            Err(Error::DomainError(_))
        ));
        let insider = v(&with_wbar_insider(s0(), 2.0, None));
        assert!(matches!(
            quadratic_bsde_solve(&insider, &cfg(256, 10), 1e-3),
            Err(Error::RegressionIllConditioned(_))
        ));
        let mut runaway = s0();
        runaway.market.r = Curve::Constant(100.0);
        assert!(matches!(
            quadratic_bsde_solve(&v(&runaway), &cfg(8, 10), 1e-3),
            Err(Error::ShootingDiverged(_))
        ));
        // Recovery refuses a solution from another scenario.
        let sol = quadratic_bsde_solve(&v(&s0()), &cfg(8, 10), 1e-3).unwrap();
        assert!(matches!(
            recover_strategies(&sol, &v(&sl())),
            Err(Error::ModeMismatch(_))
        ));
    }
}
