//! Streaming Monte Carlo for wealth and the adversary's density under the
//! enlarged filtration.
//!
//! Paths evolve in log space: Gaussian steps enter exactly, claim arrivals
//! are placed by conditionally uniform jump times, and insider information
//! enters through the information drift of the physical drivers and the
//! bridge intensity of the claim compensator. Several strategies can ride
//! the same drivers in one pass, which is what keeps common random numbers
//! exact across strategy variants.
//!
//! Every path owns its own counter-based RNG stream keyed by (seed, purpose,
//! path), so results are bit-identical for any thread count or chunking, and
//! reductions sum fixed-size blocks in path order to keep the rounding
//! deterministic too.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::enlargement::kernel_norm_sq;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scenario::{InsiderSource, InsiderSpec, RunSection, ValidatedScenario};
use crate::strategy::{McEstimate, PathState, StrategyPair};

/// Retained-claim fractions this close to full retention are rejected: the
/// post-claim wealth factor `1 - kappa gamma2` must stay bounded away from 0.
pub const RETENTION_MARGIN: f64 = 1e-6;

/// Paths per summation block; reductions sum blocks in path order.
const BLOCK: usize = 4096;

/// Simulation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub n_paths: u64,
    /// Time steps per unit of horizon (`dt = 1 / n_steps_per_unit`).
    pub n_steps_per_unit: u32,
    pub seed: u64,
    /// Pair paths with mirrored Gaussian draws; signal values and claim
    /// times are shared within a pair, and standard errors are computed
    /// over pair means.
    pub antithetic: bool,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
    /// Keep common random numbers across runs that share a seed.
    pub crn: bool,
    /// Times at which to snapshot running path statistics.
    pub checkpoints: Vec<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_paths: 100_000,
            n_steps_per_unit: 1000,
            seed: 42,
            antithetic: false,
            threads: 0,
            crn: true,
            checkpoints: Vec::new(),
        }
    }
}

impl SimConfig {
    /// Apply the `[run]` section of a config file on top of these settings.
    pub fn with_run(mut self, run: &RunSection) -> Self {
        if let Some(p) = run.paths {
            self.n_paths = p;
        }
        if let Some(dt) = run.dt {
            self.n_steps_per_unit = (1.0 / dt).round().max(1.0) as u32;
        }
        if let Some(s) = run.seed {
            self.seed = s;
        }
        if let Some(a) = run.antithetic {
            self.antithetic = a;
        }
        if let Some(t) = run.threads {
            self.threads = t;
        }
        self
    }
}

/// Terminal statistics of one path under one strategy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathTerminal {
    /// Log wealth at the horizon (absolute, includes `ln x0`).
    pub ln_x: f64,
    /// Log of the adversary's density at the horizon.
    pub ln_eps: f64,
    /// Terminal value of the asset driver.
    pub w1: f64,
    /// Terminal value of the orthogonal surplus driver.
    pub w2: f64,
    /// Claims arrived on `[0, T]`.
    pub n_claims: u64,
    /// Trapezoidal `int_0^T eps_s g(s) ds` of the density-weighted penalty.
    pub penalty_integral: f64,
    /// Trapezoidal `int_0^T eps_s ds`.
    pub density_integral: f64,
}

impl PathTerminal {
    /// This path's contribution to the game functional,
    /// `eps_T ln X_T + int eps g`.
    pub fn objective(&self) -> f64 {
        self.ln_eps.exp() * self.ln_x + self.penalty_integral
    }
}

/// Running statistics captured at one checkpoint for one strategy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Snapshot {
    /// Grid time of the checkpoint.
    pub t: f64,
    pub w1: f64,
    pub w2: f64,
    pub n_claims: u64,
    pub ln_x: f64,
    pub ln_eps: f64,
}

/// Everything recorded about one simulated path.
#[derive(Clone, Debug)]
pub struct PathRecord {
    pub path_id: u64,
    /// The insider's signal value on this path (0 without a signal).
    pub y0: f64,
    /// One terminal per strategy, in input order.
    pub terminals: Vec<PathTerminal>,
    /// Checkpoint-major, strategy-minor snapshots.
    pub snapshots: Vec<Snapshot>,
}

// ---------------------------------------------------------------------------
// Precomputation
// ---------------------------------------------------------------------------

/// Which running integral the information drift pulls on.
#[derive(Clone, Copy, Debug, PartialEq)]
enum DriftShape {
    None,
    Wbar,
    W1,
}

#[derive(Clone, Copy, Debug)]
enum SignalDraw {
    None,
    /// Marginal standard deviation of the Brownian signal.
    Brownian { sd: f64, realized: Option<f64> },
    /// Poisson mean of the claim count over `[0, t0]`.
    Count { mean: f64, realized: Option<f64> },
}

#[derive(Clone, Copy, Debug)]
struct JumpPre {
    /// Base claim intensity.
    lam: f64,
    /// Retained mark per claim.
    gamma2: f64,
    /// Signal time when the claim count at `t0` is observed.
    count_t0: Option<f64>,
}

/// Coefficients frozen at one grid point (the left endpoint of a step).
#[derive(Clone, Copy, Debug)]
struct Row {
    t: f64,
    r: f64,
    /// `mu0 - r`.
    mu_ex: f64,
    varrho: f64,
    sigma: f64,
    b: f64,
    /// `lambda - a`, the net premium rate.
    prem: f64,
    /// Signal kernel value (0 without a Brownian signal).
    kern: f64,
    /// `kern / |kernel|^2_[t, t0]`, the drift pull per unit residual.
    pull: f64,
    /// `1 / (t0 - t)` for the claim-count bridge (0 otherwise).
    inv_rem: f64,
}

struct Precomp {
    n_steps: usize,
    dt: f64,
    sqrt_dt: f64,
    horizon: f64,
    ln_x0: f64,
    rho: f64,
    omega: f64,
    rows: Vec<Row>,
    shape: DriftShape,
    signal: SignalDraw,
    jump: Option<JumpPre>,
    /// `(grid index, grid time)` per requested checkpoint, in request order.
    checkpoints: Vec<(usize, f64)>,
}

impl Precomp {
    fn build(v: &ValidatedScenario, n_strategies: usize, cfg: &SimConfig) -> Result<Self> {
        if n_strategies == 0 {
            return Err(Error::DomainError("no strategies to simulate".into()));
        }
        if cfg.n_paths == 0 {
            return Err(Error::DomainError("path count must be positive".into()));
        }
        if cfg.antithetic && cfg.n_paths % 2 != 0 {
            return Err(Error::DomainError(
                "antithetic pairing needs an even path count".into(),
            ));
        }
        let s = v.scenario();
        let horizon = s.horizon;
        let n_steps = ((horizon * cfg.n_steps_per_unit as f64).ceil() as usize).max(1);
        let dt = horizon / n_steps as f64;

        let (shape, signal) = match &s.insider {
            InsiderSpec::None => (DriftShape::None, SignalDraw::None),
            InsiderSpec::BrownianFunctional { source, kernel, t0, realized } => {
                let sd = kernel_norm_sq(kernel, 0.0, *t0).sqrt();
                if !(sd > 0.0) {
                    return Err(Error::UnsupportedInsider(
                        "signal kernel has zero norm".into(),
                    ));
                }
                let shape = match source {
                    InsiderSource::Wbar => DriftShape::Wbar,
                    InsiderSource::W1 => DriftShape::W1,
                };
                (shape, SignalDraw::Brownian { sd, realized: *realized })
            }
            InsiderSpec::JumpFunctional { t0, realized } => {
                let lam = s.insurance.jump2.as_ref().map(|j| j.intensity).unwrap_or(0.0);
                let realized = match realized {
                    None => None,
                    Some(y) => {
                        if *y < -1e-9 || (y - y.round()).abs() > 1e-9 {
                            return Err(Error::DomainError(format!(
                                "claim-count signal must be a nonnegative integer \
                                 to simulate, got {y}"
                            )));
                        }
                        Some(y.round())
                    }
                };
                (DriftShape::None, SignalDraw::Count { mean: lam * t0, realized })
            }
        };

        let count_signal_t0 = match &s.insider {
            InsiderSpec::JumpFunctional { t0, .. } => Some(*t0),
            _ => None,
        };
        let jump = s.insurance.jump2.as_ref().map(|j| JumpPre {
            lam: j.intensity,
            gamma2: j.mark,
            count_t0: count_signal_t0,
        });

        let kernel_t0 = match &s.insider {
            InsiderSpec::BrownianFunctional { kernel, t0, .. } => Some((kernel, *t0)),
            _ => None,
        };
        let count_t0 = jump.as_ref().and_then(|j| j.count_t0);
        let rows = (0..n_steps)
            .map(|i| {
                let t = dt * i as f64;
                let m = &s.market;
                let ins = &s.insurance;
                let (kern, pull) = match kernel_t0 {
                    None => (0.0, 0.0),
                    Some((kernel, t0)) => {
                        let k = kernel.at(t);
                        (k, k / kernel_norm_sq(kernel, t, t0))
                    }
                };
                let r = m.r.at(t);
                Row {
                    t,
                    r,
                    mu_ex: m.mu0.at(t) - r,
                    varrho: m.varrho.at(t),
                    sigma: m.sigma.at(t),
                    b: ins.b.at(t),
                    prem: ins.lambda.at(t) - ins.a.at(t),
                    kern,
                    pull,
                    inv_rem: count_t0.map(|t0| 1.0 / (t0 - t)).unwrap_or(0.0),
                }
            })
            .collect();

        let mut checkpoints = Vec::with_capacity(cfg.checkpoints.len());
        for &c in &cfg.checkpoints {
            if !(c >= 0.0 && c <= horizon + 1e-12) {
                return Err(Error::DomainError(format!(
                    "checkpoint {c} lies outside the horizon [0, {horizon}]"
                )));
            }
            let idx = ((c / dt).round() as usize).min(n_steps);
            let t = if idx == n_steps { horizon } else { dt * idx as f64 };
            checkpoints.push((idx, t));
        }
        // the per-path cursor walks checkpoints in grid order
        checkpoints.sort_by_key(|c| c.0);

        let rho = s.insurance.rho;
        Ok(Precomp {
            n_steps,
            dt,
            sqrt_dt: dt.sqrt(),
            horizon,
            ln_x0: s.x0.ln(),
            rho,
            omega: (1.0 - rho * rho).sqrt(),
            rows,
            shape,
            signal,
            jump,
            checkpoints,
        })
    }

    fn phi(&self, row: &Row, state: &PathState) -> (f64, f64) {
        match self.shape {
            DriftShape::None => (0.0, 0.0),
            DriftShape::Wbar => {
                let p = row.pull * (state.y0 - state.run_wbar);
                (self.rho * p, self.omega * p)
            }
            DriftShape::W1 => (row.pull * (state.y0 - state.run_w1), 0.0),
        }
    }

    /// Claim intensity in the observer's filtration at a grid row.
    fn lam_h(&self, row: &Row, state: &PathState) -> f64 {
        match &self.jump {
            None => 0.0,
            Some(j) => match j.count_t0 {
                None => j.lam,
                Some(_) => (state.y0 - state.eta2) * row.inv_rem,
            },
        }
    }

    /// Claim intensity in the observer's filtration at an arbitrary time.
    fn lam_h_at(&self, t: f64, state: &PathState) -> f64 {
        match &self.jump {
            None => 0.0,
            Some(j) => match j.count_t0 {
                None => j.lam,
                Some(t0) => (state.y0 - state.eta2) / (t0 - t),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Path evolution
// ---------------------------------------------------------------------------

/// Per-strategy running accumulators along one path.
#[derive(Clone, Copy, Debug)]
struct Accum {
    ln_x: f64,
    ln_eps: f64,
    /// `exp(ln_eps)`, kept current to avoid re-exponentiating.
    eps: f64,
    penalty_integral: f64,
    density_integral: f64,
    prev_eps_g: f64,
    prev_eps: f64,
}

struct Member {
    state: PathState,
    w1: f64,
    w2: f64,
    n_claims: u64,
    acc: Vec<Accum>,
    snapshots: Vec<Snapshot>,
    next_checkpoint: usize,
}

impl Member {
    fn new(pre: &Precomp, y0: f64, k: usize) -> Self {
        Member {
            state: PathState { y0, ..PathState::default() },
            w1: 0.0,
            w2: 0.0,
            n_claims: 0,
            acc: vec![
                Accum {
                    ln_x: pre.ln_x0,
                    ln_eps: 0.0,
                    eps: 1.0,
                    penalty_integral: 0.0,
                    density_integral: 0.0,
                    prev_eps_g: 0.0,
                    prev_eps: 1.0,
                };
                k
            ],
            snapshots: Vec::with_capacity(pre.checkpoints.len() * k),
            next_checkpoint: 0,
        }
    }

    /// Record snapshots for every checkpoint mapped to grid index `g`.
    fn visit_grid_point(&mut self, pre: &Precomp, g: usize) {
        while self.next_checkpoint < pre.checkpoints.len()
            && pre.checkpoints[self.next_checkpoint].0 == g
        {
            let t = pre.checkpoints[self.next_checkpoint].1;
            for a in &self.acc {
                self.snapshots.push(Snapshot {
                    t,
                    w1: self.w1,
                    w2: self.w2,
                    n_claims: self.n_claims,
                    ln_x: a.ln_x,
                    ln_eps: a.ln_eps,
                });
            }
            self.next_checkpoint += 1;
        }
    }
}

/// Penalty rate of the adversary's tilt: quadratic in the Brownian
/// components plus the relative-entropy rate of the jump tilt under the
/// observer's intensity.
fn penalty_rate(theta: &[f64; 4], lam_h: f64) -> f64 {
    let quad = 0.5 * (theta[0] * theta[0] + theta[1] * theta[1]);
    let t4 = theta[3];
    if lam_h == 0.0 || t4 == 0.0 {
        quad
    } else {
        quad + lam_h * ((1.0 + t4) * (1.0 + t4).ln() - t4)
    }
}

/// Evolve one member over one step. `dw1h`/`dw2h` are the Gaussian driver
/// increments in the observer's filtration; claims arrived during the step.
#[allow(clippy::too_many_arguments)]
fn step_member(
    pre: &Precomp,
    row: &Row,
    strategies: &[StrategyPair],
    mem: &mut Member,
    dw1h: f64,
    dw2h: f64,
    claims: u32,
    path_id: u64,
) -> Result<()> {
    let (phi1, phi2) = pre.phi(row, &mem.state);
    let dt = pre.dt;
    let dw1 = dw1h + phi1 * dt;
    let dw2 = dw2h + phi2 * dt;
    let lam_h = pre.lam_h(row, &mem.state);

    for (k, strat) in strategies.iter().enumerate() {
        let c = strat.eval(row.t, &mem.state);
        check_controls(pre, &c, path_id, row.t)?;
        let a = &mut mem.acc[k];

        // trapezoid panel [previous grid point, this one]
        let g = penalty_rate(&c.theta, lam_h);
        let eps_g = a.eps * g;
        if row.t > 0.0 {
            a.penalty_integral += 0.5 * (a.prev_eps_g + eps_g) * dt;
            a.density_integral += 0.5 * (a.prev_eps + a.eps) * dt;
        }
        a.prev_eps_g = eps_g;
        a.prev_eps = a.eps;

        let (pi, kappa) = (c.pi, c.kappa);
        let vol1 = row.sigma * pi - pre.rho * row.b * kappa;
        let vol2 = -pre.omega * row.b * kappa;
        let mut drift = row.r + row.mu_ex * pi + row.varrho * pi * pi + row.prem * kappa
            - 0.5 * (vol1 * vol1 + vol2 * vol2);
        let mut dlnx_jump = 0.0;
        let mut dlneps_jump = 0.0;
        if let Some(j) = &pre.jump {
            drift += kappa * j.gamma2 * j.lam;
            if claims > 0 {
                dlnx_jump = claims as f64 * (1.0 - kappa * j.gamma2).ln();
                dlneps_jump = claims as f64 * (1.0 + c.theta[3]).ln();
            }
        }
        a.ln_x += drift * dt + vol1 * dw1 + vol2 * dw2 + dlnx_jump;
        a.ln_eps += c.theta[0] * dw1h + c.theta[1] * dw2h
            - 0.5 * (c.theta[0] * c.theta[0] + c.theta[1] * c.theta[1]) * dt
            + dlneps_jump
            - c.theta[3] * lam_h * dt;
        a.eps = a.ln_eps.exp();
    }

    mem.state.run_wbar += row.kern * (pre.rho * dw1 + pre.omega * dw2);
    mem.state.run_w1 += row.kern * dw1;
    mem.state.eta2 += claims as f64;
    mem.w1 += dw1;
    mem.w2 += dw2;
    mem.n_claims += claims as u64;
    Ok(())
}

/// Close the integrals at the horizon with the final grid point's values.
fn finish_member(
    pre: &Precomp,
    strategies: &[StrategyPair],
    mem: &mut Member,
    path_id: u64,
) -> Result<()> {
    let t = pre.horizon;
    let lam_h = pre.lam_h_at(t, &mem.state);
    for (k, strat) in strategies.iter().enumerate() {
        let c = strat.eval(t, &mem.state);
        check_controls(pre, &c, path_id, t)?;
        let a = &mut mem.acc[k];
        let eps_g = a.eps * penalty_rate(&c.theta, lam_h);
        a.penalty_integral += 0.5 * (a.prev_eps_g + eps_g) * pre.dt;
        a.density_integral += 0.5 * (a.prev_eps + a.eps) * pre.dt;
    }
    Ok(())
}

fn check_controls(
    pre: &Precomp,
    c: &crate::strategy::ControlPoint,
    path_id: u64,
    t: f64,
) -> Result<()> {
    if let Some(j) = &pre.jump {
        if c.kappa * j.gamma2 >= 1.0 - RETENTION_MARGIN {
            return Err(Error::AdmissibilityBreach {
                path: path_id as usize,
                t,
                detail: format!(
                    "retained claim fraction kappa*gamma2 = {} must stay below 1",
                    c.kappa * j.gamma2
                ),
            });
        }
    }
    if c.theta[2] <= -1.0 || c.theta[3] <= -1.0 {
        return Err(Error::GeneratorBreach {
            path: path_id as usize,
            t,
            detail: format!(
                "jump tilt components must exceed -1, got theta3 = {}, theta4 = {}",
                c.theta[2], c.theta[3]
            ),
        });
    }
    Ok(())
}

fn poisson_draw(rng: &mut ChaCha12Rng, mean: f64) -> Result<f64> {
    if mean <= 0.0 {
        return Ok(0.0);
    }
    let d = Poisson::new(mean)
        .map_err(|e| Error::DomainError(format!("claim-count mean {mean}: {e}")))?;
    Ok(d.sample(rng))
}

/// Simulate one unit: a single path, or an antithetic pair sharing its
/// signal value and claim times with mirrored Gaussian draws.
fn run_unit<H>(
    pre: &Precomp,
    strategies: &[StrategyPair],
    cfg: &SimConfig,
    unit: u64,
    hook: &mut H,
) -> Result<Vec<PathRecord>>
where
    H: FnMut(u64, f64, f64, f64, &[Accum]),
{
    let members = if cfg.antithetic { 2 } else { 1 };
    let path_id = |m: usize| {
        if cfg.antithetic {
            2 * unit + m as u64
        } else {
            unit
        }
    };
    let mut rng_b = stream_rng(cfg.seed, Stream::Bridge, unit);
    let mut rng_d = stream_rng(cfg.seed, Stream::Drivers, unit);

    let y0 = match &pre.signal {
        SignalDraw::None => 0.0,
        SignalDraw::Brownian { sd, realized } => match realized {
            Some(y) => *y,
            None => sd * rng_b.sample::<f64, _>(StandardNormal),
        },
        SignalDraw::Count { mean, realized } => match realized {
            Some(y) => *y,
            None => poisson_draw(&mut rng_b, *mean)?,
        },
    };

    let times: Vec<f64> = match &pre.jump {
        None => Vec::new(),
        Some(j) => {
            let (count, span) = match j.count_t0 {
                Some(t0) => (y0.round() as u64, t0),
                None => (
                    poisson_draw(&mut rng_b, j.lam * pre.horizon)?.round() as u64,
                    pre.horizon,
                ),
            };
            let mut ts: Vec<f64> =
                (0..count).map(|_| rng_b.random_range(0.0..span)).collect();
            ts.sort_unstable_by(f64::total_cmp);
            ts
        }
    };

    let mut ms: Vec<Member> =
        (0..members).map(|_| Member::new(pre, y0, strategies.len())).collect();
    for (m, mem) in ms.iter_mut().enumerate() {
        mem.visit_grid_point(pre, 0);
        hook(path_id(m), 0.0, mem.w1, mem.w2, &mem.acc);
    }

    let mut ptr = 0usize;
    for i in 0..pre.n_steps {
        let row = &pre.rows[i];
        let t_next = if i + 1 == pre.n_steps {
            pre.horizon
        } else {
            pre.dt * (i + 1) as f64
        };
        let z1: f64 = rng_d.sample(StandardNormal);
        let z2: f64 = rng_d.sample(StandardNormal);
        let mut claims = 0u32;
        while ptr < times.len() && times[ptr] <= t_next {
            ptr += 1;
            claims += 1;
        }
        for (m, mem) in ms.iter_mut().enumerate() {
            let sign = if m == 0 { 1.0 } else { -1.0 };
            step_member(
                pre,
                row,
                strategies,
                mem,
                sign * z1 * pre.sqrt_dt,
                sign * z2 * pre.sqrt_dt,
                claims,
                path_id(m),
            )?;
            mem.visit_grid_point(pre, i + 1);
            hook(path_id(m), t_next, mem.w1, mem.w2, &mem.acc);
        }
    }

    let mut out = Vec::with_capacity(members);
    for (m, mem) in ms.iter_mut().enumerate() {
        finish_member(pre, strategies, mem, path_id(m))?;
        out.push(PathRecord {
            path_id: path_id(m),
            y0,
            terminals: mem
                .acc
                .iter()
                .map(|a| PathTerminal {
                    ln_x: a.ln_x,
                    ln_eps: a.ln_eps,
                    w1: mem.w1,
                    w2: mem.w2,
                    n_claims: mem.n_claims,
                    penalty_integral: a.penalty_integral,
                    density_integral: a.density_integral,
                })
                .collect(),
            snapshots: std::mem::take(&mut mem.snapshots),
        });
    }
    Ok(out)
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        Ok(f())
    } else {
        Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::DomainError(format!("thread pool: {e}")))?
            .install(f))
    }
}

/// Simulate every path once, evolving all strategies on shared drivers.
///
/// Records come back ordered by path id regardless of thread count, and a
/// given (seed, path) pair sees the same noise whatever else changes.
pub fn simulate_bundle(
    v: &ValidatedScenario,
    strategies: &[StrategyPair],
    cfg: &SimConfig,
) -> Result<Vec<PathRecord>> {
    let pre = Precomp::build(v, strategies.len(), cfg)?;
    let units = if cfg.antithetic { cfg.n_paths / 2 } else { cfg.n_paths };
    let nested: Vec<Vec<PathRecord>> = with_pool(cfg.threads, || {
        (0..units)
            .into_par_iter()
            .map(|u| run_unit(&pre, strategies, cfg, u, &mut |_, _, _, _, _: &[Accum]| {}))
            .collect::<Result<_>>()
    })??;
    Ok(nested.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Reductions and reports
// ---------------------------------------------------------------------------

/// The actual grid step for a horizon at a steps-per-unit setting.
pub(crate) fn true_dt(horizon: f64, n_steps_per_unit: u32) -> f64 {
    let n = ((horizon * n_steps_per_unit as f64).ceil() as usize).max(1);
    horizon / n as f64
}

pub(crate) fn blocked_sum(vals: &[f64]) -> f64 {
    vals.chunks(BLOCK).map(|c| c.iter().sum::<f64>()).sum()
}

/// Mean and standard error with block-ordered summation. Under antithetic
/// pairing the samples are the pair means.
pub(crate) fn blocked_mean_se(vals: &[f64], antithetic: bool) -> (f64, f64) {
    if antithetic {
        let pairs: Vec<f64> =
            vals.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        return blocked_mean_se(&pairs, false);
    }
    let n = vals.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = blocked_sum(vals) / n as f64;
    if n == 1 {
        return (mean, f64::INFINITY);
    }
    let sq: Vec<f64> = vals.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = blocked_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Density mean at one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointStat {
    pub t: f64,
    pub density_mean: McEstimate,
}

/// One-pass summary of a strategy's simulated performance.
#[derive(Clone, Debug, PartialEq)]
pub struct SimReport {
    /// The game functional `E[eps_T ln X_T + int eps g]`.
    pub objective: McEstimate,
    /// `E[ln X_T]` under the reference measure.
    pub log_wealth: McEstimate,
    /// `E[eps_T]`; 1 for any admissible tilt.
    pub density_terminal: McEstimate,
    /// `E[eps_T ln eps_T]`, the relative entropy of the tilted measure.
    pub relative_entropy: McEstimate,
    /// `E[int eps g]`, the accumulated penalty.
    pub penalty: McEstimate,
    /// Per-path `eps_T ln eps_T - int eps g`; mean 0 when the density and
    /// the penalty accumulator agree.
    pub entropy_gap: McEstimate,
    /// `E[eps_t]` at each requested checkpoint.
    pub density_checkpoints: Vec<CheckpointStat>,
}

/// Simulate one strategy and summarize the standard diagnostics.
pub fn simulate_report(
    v: &ValidatedScenario,
    strategy: &StrategyPair,
    cfg: &SimConfig,
) -> Result<SimReport> {
    let records = simulate_bundle(v, std::slice::from_ref(strategy), cfg)?;
    let dt = true_dt(v.scenario().horizon, cfg.n_steps_per_unit);
    let mk = |vals: &[f64]| {
        let (mean, stderr) = blocked_mean_se(vals, cfg.antithetic);
        McEstimate { mean, stderr, n_paths: cfg.n_paths, dt }
    };
    let collect = |f: &dyn Fn(&PathTerminal) -> f64| {
        records.iter().map(|r| f(&r.terminals[0])).collect::<Vec<f64>>()
    };
    let objective = mk(&collect(&|t| t.objective()));
    let log_wealth = mk(&collect(&|t| t.ln_x));
    let density_terminal = mk(&collect(&|t| t.ln_eps.exp()));
    let relative_entropy = mk(&collect(&|t| t.ln_eps.exp() * t.ln_eps));
    let penalty = mk(&collect(&|t| t.penalty_integral));
    let entropy_gap =
        mk(&collect(&|t| t.ln_eps.exp() * t.ln_eps - t.penalty_integral));
    let density_checkpoints = (0..cfg.checkpoints.len())
        .map(|c| {
            let vals: Vec<f64> = records
                .iter()
                .map(|r| r.snapshots[c].ln_eps.exp())
                .collect();
            CheckpointStat { t: records[0].snapshots[c].t, density_mean: mk(&vals) }
        })
        .collect();
    Ok(SimReport {
        objective,
        log_wealth,
        density_terminal,
        relative_entropy,
        penalty,
        entropy_gap,
        density_checkpoints,
    })
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        k => Error::DomainError(format!("csv: {k:?}")),
    }
}

/// Write every grid point of every path as CSV rows
/// `path,t,w1,w2,x,eps`. Runs serially; meant for small path counts.
pub fn dump_paths<W: std::io::Write>(
    v: &ValidatedScenario,
    strategy: &StrategyPair,
    cfg: &SimConfig,
    out: W,
) -> Result<()> {
    let pre = Precomp::build(v, 1, cfg)?;
    let units = if cfg.antithetic { cfg.n_paths / 2 } else { cfg.n_paths };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path", "t", "w1", "w2", "x", "eps"]).map_err(csv_err)?;
    let strategies = std::slice::from_ref(strategy);
    for u in 0..units {
        let mut rows: Vec<(u64, f64, f64, f64, f64, f64)> = Vec::new();
        run_unit(&pre, strategies, cfg, u, &mut |pid, t, w1, w2, acc: &[Accum]| {
            rows.push((pid, t, w1, w2, acc[0].ln_x.exp(), acc[0].eps));
        })?;
        rows.sort_by_key(|r| r.0);
        for r in rows {
            w.serialize(r).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
