//! Command line driver: loads scenario configs, dispatches to the solvers,
//! simulators, and verification oracles, and writes stable file artifacts.
//!
//! Commands: `solve | simulate | verify | bsde | critical-time`. Every
//! command is deterministic given its inputs and seed; re-running overwrites
//! byte-identical outputs apart from a timestamp header line that
//! `--no-timestamp` removes. Failures print one machine-parseable
//! `ERROR <code>: <detail>` line on stderr and exit with the stable code
//! from [`Error::exit_code`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bsde;
use crate::closedform::{self, ClosedFormSolution, CriticalTimeKind};
use crate::curves::{Curve, Interp};
use crate::enlargement::kernel_norm_sq;
use crate::error::{Error, Result};
use crate::oracle::{self, MomentCheck, SaddleGrid};
use crate::scenario::{self, InsiderSource, InsiderSpec, Scenario, ValidatedScenario};
use crate::simulate::{self, SimConfig};
use crate::strategy::{McEstimate, PathState, StateFn, StrategyPair, ValueReport};

/// Pointwise first-order residuals are exact identities; this only absorbs
/// float noise.
const FOC_TOL: f64 = 1e-8;

/// Central-difference bump for the directional derivative checks.
const GATEAUX_BUMP: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Argument schema
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "robins",
    version,
    about = "Solver and verifier for a robust insurance-investment game \
             with insider information"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form saddle strategies and game value for the scenario's regime
    Solve(SolveArgs),
    /// Monte Carlo evaluation of a strategy under the scenario
    Simulate(SimulateArgs),
    /// Optimality verification: grid saddle, derivatives, density martingale
    Verify(VerifyArgs),
    /// Backward-equation solvers for the wealth and value profiles
    Bsde(BsdeArgs),
    /// Signal time at which the robust insider's value meets the neutral one
    CriticalTime(CriticalTimeArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario config file (sectioned key = value text)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Directory for written artifacts (created if missing)
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,

    /// Random seed shared by all stochastic stages
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,

    /// Monte Carlo path count
    #[arg(long, value_name = "N")]
    paths: Option<u64>,

    /// Time step; steps per unit of horizon is round(1/dt)
    #[arg(long, value_name = "F")]
    dt: Option<f64>,

    /// Worker thread cap; 0 uses every core
    #[arg(long, value_name = "N")]
    threads: Option<usize>,

    /// Config override as dotted section.key=value (repeatable)
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,

    /// Enable evaluators marked experimental
    #[arg(long)]
    experimental: bool,

    /// Pair paths with mirrored Gaussian draws
    #[arg(long)]
    antithetic: bool,

    /// Omit the timestamp header line from written files
    #[arg(long)]
    no_timestamp: bool,

    /// Also write a gnuplot script for this command's outputs
    #[arg(long)]
    gnuplot_script: bool,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyChoice {
    /// Closed form for the scenario as declared
    Auto,
    /// Closed form with the adversary forced on
    Robust,
    /// Closed form with the adversary forced off
    Neutral,
    /// Park everything and leave the measure untouched
    Zero,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Strategy source by mode name
    #[arg(long, value_enum, default_value = "auto")]
    strategy: StrategyChoice,

    /// Strategy source from a CSV written by solve or bsde (time profiles;
    /// overrides --strategy)
    #[arg(long, value_name = "PATH")]
    strategy_csv: Option<PathBuf>,

    /// Density checkpoint times (comma separated; default quarter points)
    #[arg(long, value_name = "T,..", value_delimiter = ',')]
    checkpoints: Option<Vec<f64>>,

    /// Also dump the first N paths on the full grid to paths.csv
    #[arg(long, value_name = "N")]
    dump_paths: Option<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EquationChoice {
    /// Value equation: quadratic generator when the adversary is on, its
    /// generator-clamped neutral form otherwise
    Value,
    /// Wealth equation through its conditional-expectation representation
    Wealth,
}

#[derive(Args)]
struct BsdeArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Which backward equation to solve
    #[arg(long, value_enum, default_value = "value")]
    equation: EquationChoice,

    /// Bisection tolerance for shooting on the terminal constant
    #[arg(long, value_name = "F")]
    shooting_tol: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SignalChoice {
    /// Signal about the surplus driver
    Insurance,
    /// Signal about the asset driver
    Asset,
}

#[derive(Args)]
struct CriticalTimeArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Which driver the insider's signal concerns
    #[arg(long, value_enum, default_value = "insurance")]
    signal: SignalChoice,

    /// Sweep the market price of risk over the given values
    /// (bare flag sweeps 0.1,0.2,0.3,0.4,0.5)
    #[arg(long, value_name = "IOTA,..", num_args = 0.., value_delimiter = ',')]
    sweep: Option<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parse arguments, run the command, and return the process exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("ERROR 1: {e}");
            return 1;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("ERROR {}: {e}", e.exit_code());
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Solve(a) => {
            let m = RunManifest::build(&a.common, SimConfig::default())?;
            cmd_solve(&m)
        }
        Command::Simulate(a) => {
            let m = RunManifest::build(&a.common, SimConfig::default())?;
            cmd_simulate(&m, &a)
        }
        Command::Verify(a) => {
            let m = RunManifest::build(&a.common, verify_defaults())?;
            cmd_verify(&m)
        }
        Command::Bsde(a) => {
            let m = RunManifest::build(&a.common, bsde::bsde_defaults())?;
            cmd_bsde(&m, &a)
        }
        Command::CriticalTime(a) => {
            let m = RunManifest::build(&a.common, SimConfig::default())?;
            cmd_critical_time(&m, &a)
        }
    }
}

/// Settings sized so a full verification pass stays interactive while each
/// statistical check keeps a comfortable error margin.
fn verify_defaults() -> SimConfig {
    SimConfig {
        n_paths: 20_000,
        n_steps_per_unit: 200,
        antithetic: true,
        ..SimConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// A resolved invocation: the validated scenario, simulation settings with
/// precedence flags > config `[run]` section > per-command defaults, the
/// output directory, and presentation switches.
pub struct RunManifest {
    raw: Scenario,
    scenario: ValidatedScenario,
    out_dir: PathBuf,
    sim: SimConfig,
    experimental: bool,
    timestamp: bool,
    gnuplot: bool,
}

impl RunManifest {
    fn build(common: &CommonArgs, builtin: SimConfig) -> Result<RunManifest> {
        let text = std::fs::read_to_string(&common.config)?;
        let mut table = scenario::parse_table(&text)?;
        for spec in &common.overrides {
            scenario::apply_override(&mut table, spec)?;
        }
        let loaded = scenario::config_from_table(table)?;
        let validated = scenario::validate(&loaded.scenario)?;

        let mut sim = builtin.with_run(&loaded.run);
        if let Some(p) = common.paths {
            sim.n_paths = p;
        }
        if let Some(dt) = common.dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(Error::DomainError(format!(
                    "--dt must be positive and finite, got {dt}"
                )));
            }
            sim.n_steps_per_unit = (1.0 / dt).round().max(1.0) as u32;
        }
        if let Some(s) = common.seed {
            sim.seed = s;
        }
        if let Some(t) = common.threads {
            sim.threads = t;
        }
        if common.antithetic {
            sim.antithetic = true;
        }
        std::fs::create_dir_all(&common.out)?;

        Ok(RunManifest {
            raw: loaded.scenario,
            scenario: validated,
            out_dir: common.out.clone(),
            sim,
            experimental: common.experimental,
            timestamp: !common.no_timestamp,
            gnuplot: common.gnuplot_script,
        })
    }

    /// Write one artifact, prepending the timestamp header unless disabled.
    fn write(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        let mut text = String::new();
        if self.timestamp {
            let _ = writeln!(text, "# generated {}", utc_now());
        }
        text.push_str(body);
        std::fs::write(&path, text)?;
        println!("wrote {}", path.display());
        Ok(path)
    }

    fn write_plot(&self, body: &str) -> Result<()> {
        if self.gnuplot {
            self.write("plot.gp", body)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

/// Dispatch to the closed-form evaluator covering the scenario's regime.
fn closed_form_for(v: &ValidatedScenario, experimental: bool) -> Result<ClosedFormSolution> {
    let s = v.scenario();
    let robust = s.ambiguity.enabled;
    if v.is_jump() {
        return match (&s.insider, robust) {
            (InsiderSpec::None, true) => closedform::jump_robust_no_insider(v),
            (InsiderSpec::None, false) => closedform::jump_neutral_no_insider(v),
            _ => closedform::jump_insider_strategies(v, experimental),
        };
    }
    if v.is_large() {
        return if robust {
            Err(Error::ModeMismatch(
                "no closed form for the robust game with price impact; the \
                 nearest supported modes are the neutral price-impact solve \
                 (ambiguity.enabled=false) and the bsde subcommand's value \
                 equation"
                    .into(),
            ))
        } else {
            closedform::large_neutral(v)
        };
    }
    match (&s.insider, robust) {
        (InsiderSpec::None, true) => closedform::small_robust_no_insider(v),
        (InsiderSpec::None, false) => closedform::small_neutral_no_insider(v),
        (InsiderSpec::BrownianFunctional { source, .. }, true) => match source {
            InsiderSource::Wbar => closedform::small_robust_insider_insurance(v),
            InsiderSource::W1 => closedform::small_robust_insider_asset(v),
        },
        (InsiderSpec::BrownianFunctional { .. }, false) => {
            closedform::small_neutral_insider(v)
        }
        (InsiderSpec::JumpFunctional { .. }, _) => Err(Error::ModeMismatch(
            "a claim-count signal needs compound Poisson insurance risk".into(),
        )),
    }
}

/// The state a feedback strategy is tabulated on: the signal pinned at its
/// conditioning value (or its mean when undeclared) and the running path
/// statistics at their conditional means given that value.
fn central_state(v: &ValidatedScenario, t: f64) -> PathState {
    match &v.scenario().insider {
        InsiderSpec::None => PathState::default(),
        InsiderSpec::BrownianFunctional { kernel, t0, realized, .. } => {
            let y0 = realized.unwrap_or(0.0);
            let total = kernel_norm_sq(kernel, 0.0, *t0);
            let m = if total > 0.0 {
                y0 * kernel_norm_sq(kernel, 0.0, t) / total
            } else {
                0.0
            };
            PathState { y0, run_wbar: m, run_w1: m, eta2: 0.0 }
        }
        InsiderSpec::JumpFunctional { t0, realized } => {
            let lam = v
                .scenario()
                .insurance
                .jump2
                .as_ref()
                .map(|j| j.intensity)
                .unwrap_or(0.0);
            // counts are integers; keep the tabulation state reachable
            let y0 = realized.unwrap_or(lam * t0).round();
            let eta2 = (y0 * t / t0).round();
            PathState { y0, run_wbar: 0.0, run_w1: 0.0, eta2 }
        }
    }
}

/// Tabulate a strategy at 101 grid points along the central state path.
fn strategy_csv(v: &ValidatedScenario, strategy: &StrategyPair) -> String {
    let t_end = v.scenario().horizon;
    let mut body = String::from("t,pi,kappa,theta1,theta2,theta3,theta4\n");
    for i in 0..=100u32 {
        let t = t_end * f64::from(i) / 100.0;
        let st = central_state(v, t);
        let c = strategy.eval(t, &st);
        let _ = writeln!(
            body,
            "{},{},{},{},{},{},{}",
            t, c.pi, c.kappa, c.theta[0], c.theta[1], c.theta[2], c.theta[3]
        );
    }
    body
}

fn value_text(robust: bool, rep: &ValueReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode={}", if robust { "robust" } else { "neutral" });
    match rep.analytic {
        Some(v) => {
            let _ = writeln!(s, "V={v}");
            let _ = writeln!(s, "ln_x0={}", rep.ln_x0);
            let _ = writeln!(s, "rate_integral={}", rep.rate_integral);
            let _ = writeln!(s, "risk_premium_integral={}", rep.risk_premium_integral);
            let _ = writeln!(s, "insider_gain={}", rep.insider_gain);
        }
        None => {
            let _ = writeln!(s, "V=unavailable");
            let _ = writeln!(
                s,
                "note=no closed-form value in this regime; the simulate \
                 subcommand estimates it"
            );
        }
    }
    s
}

/// Load a time-profile strategy from a CSV written by solve or bsde.
/// Columns beyond time are interpolated linearly and held flat outside the
/// tabulated range; the result ignores the path state.
fn load_strategy_csv(path: &Path) -> Result<StrategyPair> {
    let text = std::fs::read_to_string(path)?;
    let mut grid: Vec<f64> = Vec::new();
    let mut cols: [Vec<f64>; 6] = Default::default();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('t') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(Error::ParseError {
                line: idx + 1,
                message: format!(
                    "strategy rows need 7 comma-separated fields, got {}",
                    fields.len()
                ),
            });
        }
        let mut vals = [0.0f64; 7];
        for (k, f) in fields.iter().enumerate() {
            vals[k] = f.parse().map_err(|e| Error::ParseError {
                line: idx + 1,
                message: format!("field {}: {e}", k + 1),
            })?;
        }
        if grid.last().is_some_and(|&last| vals[0] <= last) {
            return Err(Error::ParseError {
                line: idx + 1,
                message: "the time column must be strictly increasing".into(),
            });
        }
        grid.push(vals[0]);
        for k in 0..6 {
            cols[k].push(vals[k + 1]);
        }
    }
    if grid.is_empty() {
        return Err(Error::ParseError {
            line: 0,
            message: "no strategy rows found".into(),
        });
    }
    let curve_fn = |values: &Vec<f64>| -> StateFn {
        let curve = if grid.len() == 1 {
            Curve::Constant(values[0])
        } else {
            Curve::Piecewise {
                grid: grid.clone(),
                values: values.clone(),
                interp: Interp::Linear,
            }
        };
        Arc::new(move |t, _: &PathState| curve.at(t))
    };
    Ok(StrategyPair {
        pi: curve_fn(&cols[0]),
        kappa: curve_fn(&cols[1]),
        theta: [
            curve_fn(&cols[2]),
            curve_fn(&cols[3]),
            curve_fn(&cols[4]),
            curve_fn(&cols[5]),
        ],
    })
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

fn cmd_solve(m: &RunManifest) -> Result<i32> {
    let sol = closed_form_for(&m.scenario, m.experimental)?;
    let robust = m.raw.ambiguity.enabled;
    println!("mode={}", if robust { "robust" } else { "neutral" });
    match sol.value.analytic {
        Some(v) => println!("V={v}"),
        None => println!("V=unavailable"),
    }
    let c0 = sol.strategy.eval(0.0, &central_state(&m.scenario, 0.0));
    println!(
        "controls at t=0 on the central state: pi={} kappa={} theta=({},{},{},{})",
        c0.pi, c0.kappa, c0.theta[0], c0.theta[1], c0.theta[2], c0.theta[3]
    );
    m.write("value.txt", &value_text(robust, &sol.value))?;
    m.write("strategy.csv", &strategy_csv(&m.scenario, &sol.strategy))?;
    m.write_plot(STRATEGY_PLOT)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn toggled_strategy(m: &RunManifest, enabled: bool) -> Result<StrategyPair> {
    let mut s = m.raw.clone();
    s.ambiguity.enabled = enabled;
    let vv = scenario::validate(&s)?;
    Ok(closed_form_for(&vv, m.experimental)?.strategy)
}

fn simulate_strategy(m: &RunManifest, args: &SimulateArgs) -> Result<(StrategyPair, String)> {
    if let Some(path) = &args.strategy_csv {
        return Ok((load_strategy_csv(path)?, format!("csv:{}", path.display())));
    }
    match args.strategy {
        StrategyChoice::Auto => {
            let mode = if m.raw.ambiguity.enabled { "robust" } else { "neutral" };
            Ok((
                closed_form_for(&m.scenario, m.experimental)?.strategy,
                format!("closed-form ({mode})"),
            ))
        }
        StrategyChoice::Robust => {
            Ok((toggled_strategy(m, true)?, "closed-form (robust)".into()))
        }
        StrategyChoice::Neutral => {
            Ok((toggled_strategy(m, false)?, "closed-form (neutral)".into()))
        }
        StrategyChoice::Zero => Ok((StrategyPair::zero(), "zero".into())),
    }
}

fn cmd_simulate(m: &RunManifest, args: &SimulateArgs) -> Result<i32> {
    let (strategy, label) = simulate_strategy(m, args)?;
    println!("strategy={label}");
    let t_end = m.raw.horizon;
    let mut cfg = m.sim.clone();
    cfg.checkpoints = match &args.checkpoints {
        Some(ts) => {
            let mut ts = ts.clone();
            ts.sort_by(f64::total_cmp);
            ts.dedup();
            if ts.iter().any(|&t| !(t > 0.0 && t <= t_end)) {
                return Err(Error::DomainError(format!(
                    "checkpoints must lie in (0, {t_end}]"
                )));
            }
            ts
        }
        None => (1..=4).map(|i| t_end * i as f64 / 4.0).collect(),
    };

    let rep = simulate::simulate_report(&m.scenario, &strategy, &cfg)?;
    let mut body = String::from("metric,estimate,stderr,n_paths,dt\n");
    let mut row = |name: &str, e: &McEstimate| {
        let _ = writeln!(body, "{},{},{},{},{}", name, e.mean, e.stderr, e.n_paths, e.dt);
        println!("{name}={} stderr={}", e.mean, e.stderr);
    };
    row("objective", &rep.objective);
    row("log_wealth", &rep.log_wealth);
    row("density_terminal", &rep.density_terminal);
    row("relative_entropy", &rep.relative_entropy);
    row("penalty", &rep.penalty);
    row("entropy_gap", &rep.entropy_gap);
    for ck in &rep.density_checkpoints {
        row(&format!("density_t{}", ck.t), &ck.density_mean);
    }
    m.write("mc.csv", &body)?;

    if let Some(n) = args.dump_paths {
        let mut dump_cfg = cfg.clone();
        dump_cfg.n_paths = n;
        dump_cfg.antithetic = false;
        let mut buf = Vec::new();
        simulate::dump_paths(&m.scenario, &strategy, &dump_cfg, &mut buf)?;
        let text = String::from_utf8(buf)
            .map_err(|e| Error::DomainError(format!("path dump: {e}")))?;
        m.write("paths.csv", &text)?;
    }
    m.write_plot(MC_PLOT)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

struct CheckRow {
    name: String,
    statistic: f64,
    threshold: f64,
}

impl CheckRow {
    fn new(name: impl Into<String>, statistic: f64, threshold: f64) -> CheckRow {
        CheckRow { name: name.into(), statistic, threshold }
    }

    fn pass(&self) -> bool {
        // NaN statistics must fail
        self.statistic <= self.threshold
    }
}

/// Worst normalized decrease of the density second moment between adjacent
/// checkpoints; the moment must be nondecreasing, so anything above a few
/// standard errors is a violation.
fn worst_second_moment_drop(checks: &[MomentCheck]) -> f64 {
    let mut worst: f64 = 0.0;
    for w in checks.windows(2) {
        let drop = w[0].second_moment.mean - w[1].second_moment.mean;
        if drop <= 0.0 {
            continue;
        }
        let se = w[0].second_moment.stderr + w[1].second_moment.stderr;
        worst = worst.max(if se > 0.0 { drop / se } else { f64::INFINITY });
    }
    worst
}

fn cmd_verify(m: &RunManifest) -> Result<i32> {
    let v = &m.scenario;
    let reference = closed_form_for(v, m.experimental).map_err(|e| match e {
        Error::ModeMismatch(msg) => {
            Error::ModeMismatch(format!("verify needs a closed-form reference: {msg}"))
        }
        e => e,
    })?;
    let robust = m.raw.ambiguity.enabled;
    let t_end = m.raw.horizon;
    let mut rows: Vec<CheckRow> = Vec::new();

    // pointwise first-order residuals along the central state path
    {
        let mut worst = [0.0f64; 5];
        let mut has_theta4 = false;
        for frac in [0.25, 0.5, 0.75] {
            let t = frac * t_end;
            let st = central_state(v, t);
            let ctrl = reference.strategy.eval(t, &st);
            let res = closedform::foc_residuals(v, t, &st, &ctrl)?;
            worst[0] = worst[0].max(res.d_pi.abs());
            worst[1] = worst[1].max(res.d_kappa.abs());
            worst[2] = worst[2].max(res.d_theta1.abs());
            worst[3] = worst[3].max(res.d_theta2.abs());
            if let Some(d4) = res.d_theta4 {
                has_theta4 = true;
                worst[4] = worst[4].max(d4.abs());
            }
        }
        rows.push(CheckRow::new("foc_pi", worst[0], FOC_TOL));
        rows.push(CheckRow::new("foc_kappa", worst[1], FOC_TOL));
        rows.push(CheckRow::new("foc_theta1", worst[2], FOC_TOL));
        rows.push(CheckRow::new("foc_theta2", worst[3], FOC_TOL));
        if has_theta4 {
            rows.push(CheckRow::new("foc_theta4", worst[4], FOC_TOL));
        }
    }

    // constant-strategy grid saddle against the signal-free closed form;
    // the restricted game has the same saddle when parameters are constant
    let stripped_raw = {
        let mut s = m.raw.clone();
        s.insider = InsiderSpec::None;
        s
    };
    let stripped = scenario::validate(&stripped_raw)?;
    if stripped.consts().is_some() {
        let base = closed_form_for(&stripped, m.experimental)?;
        let refc = base.strategy.eval(0.0, &PathState::default());
        let grid = SaddleGrid::for_scenario(&stripped);
        let rep = oracle::saddle_search(&stripped, &grid, &m.sim)?;
        rows.push(CheckRow::new(
            "saddle_pi",
            (rep.pi - refc.pi).abs(),
            grid.pi.step() + 1e-9,
        ));
        rows.push(CheckRow::new(
            "saddle_kappa",
            (rep.kappa - refc.kappa).abs(),
            grid.kappa.step() + 1e-9,
        ));
        if robust {
            rows.push(CheckRow::new(
                "saddle_theta1",
                (rep.theta[0] - refc.theta[0]).abs(),
                grid.theta1.step() + 1e-9,
            ));
            if stripped.is_jump() {
                rows.push(CheckRow::new(
                    "saddle_theta4",
                    (rep.theta[3] - refc.theta[3]).abs(),
                    grid.theta4.step() + 1e-9,
                ));
            } else {
                rows.push(CheckRow::new(
                    "saddle_theta2",
                    (rep.theta[1] - refc.theta[1]).abs(),
                    grid.theta2.step() + 1e-9,
                ));
            }
        }
        rows.push(CheckRow::new(
            "saddle_gap",
            (rep.min_max - rep.max_min).abs(),
            5.0 * rep.value.stderr + 2e-3,
        ));
        if let Some(val) = base.value.analytic {
            rows.push(CheckRow::new(
                "saddle_value",
                (rep.value.mean - val).abs(),
                3.0 * rep.value.stderr + 2e-3,
            ));
        }
    }

    // directional derivatives vanish at the reference strategy
    for d in oracle::gateaux_check(v, &reference.strategy, GATEAUX_BUMP, &m.sim)? {
        let z = if d.stderr > 0.0 {
            d.estimate.abs() / d.stderr
        } else if d.estimate == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        rows.push(CheckRow::new(format!("grad_{}", d.direction), z, 3.0));
    }

    // the tilted density stays a unit-mean martingale with growing spread
    let mart = oracle::martingale_suite(v, &reference.strategy, 10, &m.sim)?;
    rows.push(CheckRow::new("density_mean_z", mart.max_abs_z, 3.0));
    rows.push(CheckRow::new(
        "density_second_moment_drop_z",
        worst_second_moment_drop(&mart.checks),
        3.0,
    ));
    if mart.high_variance {
        println!("note: terminal density variance is high; level estimates carry heavy-tailed weights");
    }

    let mut body = String::from("check,statistic,threshold,pass\n");
    let mut passed = 0usize;
    for r in &rows {
        let ok = r.pass();
        passed += ok as usize;
        let _ = writeln!(body, "{},{},{},{}", r.name, r.statistic, r.threshold, ok);
        println!(
            "{} {} statistic={} threshold={}",
            if ok { "PASS" } else { "FAIL" },
            r.name,
            r.statistic,
            r.threshold
        );
    }
    m.write("verify.csv", &body)?;
    m.write_plot(VERIFY_PLOT)?;
    println!("verify: {passed}/{} checks passed", rows.len());
    Ok(if passed == rows.len() { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// bsde
// ---------------------------------------------------------------------------

fn cmd_bsde(m: &RunManifest, args: &BsdeArgs) -> Result<i32> {
    let v = &m.scenario;
    let sol = match args.equation {
        EquationChoice::Value => {
            let tol = args.shooting_tol.unwrap_or(bsde::DEFAULT_SHOOTING_TOL);
            bsde::quadratic_bsde_solve(v, &m.sim, tol)?
        }
        EquationChoice::Wealth => bsde::linear_bsde_wealth(v, &m.sim)?,
    };
    let kind = match sol.kind {
        bsde::BsdeKind::LinearWealth => "linear-wealth",
        bsde::BsdeKind::QuadraticRobust => "quadratic-robust",
        bsde::BsdeKind::ClampNeutral => "clamp-neutral",
    };
    let d = &sol.diagnostics;
    println!("kind={kind}");
    println!("terminal_constant={}", sol.terminal_constant);
    println!("shooting_iterations={}", d.shooting_iterations);
    println!("residual_at_zero={:e}", d.residual_at_zero);

    let mut body = String::from("t,y,z1,z2\n");
    for (i, t) in sol.grid.iter().enumerate() {
        let z1 = sol.z1.get(i).map(|z| format!("{z}")).unwrap_or_default();
        let z2 = sol.z2.get(i).map(|z| format!("{z}")).unwrap_or_default();
        let _ = writeln!(body, "{},{},{},{}", t, sol.y[i], z1, z2);
    }
    m.write("bsde.csv", &body)?;

    let mut diag = String::new();
    let _ = writeln!(diag, "kind={kind}");
    let _ = writeln!(diag, "terminal_constant={}", sol.terminal_constant);
    let _ = writeln!(diag, "shooting_iterations={}", d.shooting_iterations);
    let _ = writeln!(diag, "residual_at_zero={:e}", d.residual_at_zero);
    let _ = writeln!(diag, "condition_number={}", d.condition_number);
    let _ = writeln!(diag, "basis_dim={}", d.basis_dim);
    let _ = writeln!(diag, "regression_paths={}", d.regression_paths);
    if !sol.bin_constants.is_empty() {
        let joined: Vec<String> =
            sol.bin_constants.iter().map(|c| format!("{c}")).collect();
        let _ = writeln!(diag, "bin_constants={}", joined.join(","));
    }
    m.write("bsde_diagnostics.txt", &diag)?;

    match bsde::recover_strategies(&sol, v) {
        Ok(pair) => {
            m.write("strategy.csv", &strategy_csv(v, &pair))?;
        }
        Err(Error::ModeMismatch(msg)) => {
            println!("strategies not recovered: {msg}");
        }
        Err(e) => return Err(e),
    }
    m.write_plot(BSDE_PLOT)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// critical-time
// ---------------------------------------------------------------------------

fn cmd_critical_time(m: &RunManifest, args: &CriticalTimeArgs) -> Result<i32> {
    let (kind, kind_name) = match args.signal {
        SignalChoice::Insurance => (CriticalTimeKind::Insurance, "insurance"),
        SignalChoice::Asset => (CriticalTimeKind::Asset, "asset"),
    };
    let mut body = String::from("signal,iota,t0_star,residual\n");
    match &args.sweep {
        None => {
            let t0 = closedform::critical_future_time(&m.scenario, kind)?;
            let resid = closedform::critical_time_gap(&m.scenario, kind, t0)?.abs();
            let iota = m.scenario.iota(0.0);
            println!("T0*={t0}");
            println!("residual={resid:e}");
            let _ = writeln!(body, "{kind_name},{iota},{t0},{resid:e}");
        }
        Some(list) => {
            let iotas = if list.is_empty() {
                vec![0.1, 0.2, 0.3, 0.4, 0.5]
            } else {
                list.clone()
            };
            let c = m.scenario.consts().ok_or_else(|| {
                Error::ModeMismatch("the sweep needs constant parameters".into())
            })?;
            let (r, sigma) = (c.r, c.sigma);
            println!("iota,t0_star,residual");
            for iota in iotas {
                let mut s = m.raw.clone();
                s.market.mu0 = Curve::Constant(r + iota * sigma);
                let vv = scenario::validate(&s)?;
                let t0 = closedform::critical_future_time(&vv, kind)?;
                let resid = closedform::critical_time_gap(&vv, kind, t0)?.abs();
                println!("{iota},{t0},{resid:e}");
                let _ = writeln!(body, "{kind_name},{iota},{t0},{resid:e}");
            }
        }
    }
    m.write("critical_time.csv", &body)?;
    m.write_plot(CRITICAL_TIME_PLOT)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// Plot scripts
// ---------------------------------------------------------------------------

const STRATEGY_PLOT: &str = "\
# control profiles along the central state path
set datafile separator comma
set key autotitle columnhead outside
set xlabel 't'
plot 'strategy.csv' using 1:2 with lines title 'pi', \\
     '' using 1:3 with lines title 'kappa', \\
     '' using 1:4 with lines title 'theta1', \\
     '' using 1:5 with lines title 'theta2', \\
     '' using 1:7 with lines title 'theta4'
";

const MC_PLOT: &str = "\
# Monte Carlo estimates with standard errors by metric
set datafile separator comma
set key autotitle columnhead
set errorbars
set xtics rotate by -30
plot 'mc.csv' using 0:2:3:xtic(1) with yerrorbars title 'estimate'
";

const VERIFY_PLOT: &str = "\
# per-check statistic against its threshold
set datafile separator comma
set key autotitle columnhead
set style data histograms
set xtics rotate by -30
plot 'verify.csv' using 2:xtic(1) title 'statistic', \\
     '' using 3 title 'threshold'
";

const BSDE_PLOT: &str = "\
# backward-equation profiles along the central state path
set datafile separator comma
set key autotitle columnhead outside
set xlabel 't'
plot 'bsde.csv' using 1:2 with lines title 'y', \\
     '' using 1:3 with lines title 'z1', \\
     '' using 1:4 with lines title 'z2'
";

const CRITICAL_TIME_PLOT: &str = "\
# critical signal time against the market price of risk
set datafile separator comma
set key autotitle columnhead
set xlabel 'iota'
plot 'critical_time.csv' using 2:3 with linespoints title 'T0*'
";

// ---------------------------------------------------------------------------
// Timestamps
// ---------------------------------------------------------------------------

fn utc_now() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let (y, mo, d) = civil_from_days((secs / 86_400) as i64);
    let rem = secs % 86_400;
    format!(
        "{y:04}-{mo:02}-{d:02}T{:02}:{:02}:{:02}Z",
        rem / 3600,
        (rem / 60) % 60,
        rem % 60
    )
}

/// Proleptic Gregorian date for a day count since 1970-01-01.
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1_460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (yoe + era * 400 + i64::from(m <= 2), m, d)
}
