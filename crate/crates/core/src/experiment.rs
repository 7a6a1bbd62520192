//! Configuration-driven experiments: parsing, assumption checks and the
//! batch commands behind the `clsrivc` binary.
//!
//! The configuration is flat `key = value` text. `#` starts a comment,
//! lists are comma separated, polynomial coefficients are in descending
//! powers.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::analysis::{
    bias_certificate, consistency_sweep, decompose_dataset, nonsingularity_condition, NoiseLevel,
    NoiseSpec,
};
use crate::error::{Assumption, Error, Result};
use crate::estimator::{
    check_a4, estimate, EstimateResult, EstimatorOptions, ThetaVector, DEFAULT_MAX_ITER,
    DEFAULT_TOL,
};
use crate::lti::{DiscreteFilter, Hold, TransferFunction};
use crate::poly::{coprime, DEFAULT_COPRIME_TOL};
use crate::signals::{excitation_order, gen_multisine, gen_piecewise_constant, SampledSignal};
use crate::sim::{simulate, ClosedLoopSystem, ControllerKind, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceKind {
    Multisine {
        freqs: Vec<f64>,
        amps: Vec<f64>,
        phases: Vec<f64>,
    },
    PiecewiseConstant {
        levels: Vec<f64>,
        dwell: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub plant_a: Vec<f64>,
    pub plant_b: Vec<f64>,
    pub controller_f: Vec<f64>,
    pub controller_l: Vec<f64>,
    pub controller_kind: ControllerKind,
    /// Optional discrete controller in `z^-1` coefficients.
    pub discrete_controller: Option<(Vec<f64>, Vec<f64>)>,
    pub period: f64,
    pub reference: ReferenceKind,
    pub reference_hold: Hold,
    pub noise_level: NoiseLevel,
    pub noise_seed: u64,
    pub noise_hold: Hold,
    pub noise_shaping: Option<(Vec<f64>, Vec<f64>)>,
    pub est_n: Option<usize>,
    pub est_m: Option<usize>,
    pub est_theta0: Option<Vec<f64>>,
    pub est_tol: f64,
    pub est_max_iter: usize,
    pub est_hold: Hold,
    pub run_n: Vec<usize>,
    pub run_replicates: usize,
    /// SHA-256 of the source text.
    pub hash: String,
}

const KNOWN_KEYS: &[&str] = &[
    "plant.a",
    "plant.b",
    "controller.f",
    "controller.l",
    "controller.kind",
    "controller.discrete.num",
    "controller.discrete.den",
    "sim.period",
    "sim.reference.type",
    "sim.reference.hold",
    "sim.reference.freqs",
    "sim.reference.amps",
    "sim.reference.phases",
    "sim.reference.levels",
    "sim.reference.dwell",
    "sim.reference.seed",
    "sim.noise.variance",
    "sim.noise.snr_db",
    "sim.noise.seed",
    "sim.noise.hold",
    "sim.noise.shaping.num",
    "sim.noise.shaping.den",
    "est.n",
    "est.m",
    "est.theta0",
    "est.tol",
    "est.max_iter",
    "est.hold",
    "run.n",
    "run.replicates",
];

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected 'key = value', found '{content}'"),
            })?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key '{key}'"),
                });
            }
            if let Some((first, _)) = map.get(key) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key '{key}' (first set on line {first})"),
                });
            }
            map.insert(key.to_string(), (line, value.trim().to_string()));
        }
        Ok(Self { map })
    }

    fn raw(&self, key: &str) -> Option<&(usize, String)> {
        self.map.get(key)
    }

    fn missing(&self, key: &str) -> Error {
        Error::Config {
            line: 0,
            message: format!("missing required key '{key}'"),
        }
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<T>().map(Some).map_err(|e| Error::Config {
                line: *line,
                message: format!("{key}: cannot parse '{v}': {e}"),
            }),
        }
    }

    fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.get(key)?.ok_or_else(|| self.missing(key))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| {
                    s.trim().parse::<T>().map_err(|e| Error::Config {
                        line: *line,
                        message: format!("{key}: cannot parse '{}': {e}", s.trim()),
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn require_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        self.list(key)?.ok_or_else(|| self.missing(key))
    }

    fn invalid(&self, key: &str, message: impl Into<String>) -> Error {
        Error::Config {
            line: self.raw(key).map_or(0, |(l, _)| *l),
            message: format!("{key}: {}", message.into()),
        }
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let e = Entries::parse(text)?;
        let reference = match e.require::<String>("sim.reference.type")?.as_str() {
            "multisine" => {
                let freqs: Vec<f64> = e.require_list("sim.reference.freqs")?;
                let k = freqs.len();
                let amps = e.list("sim.reference.amps")?.unwrap_or_else(|| vec![1.0; k]);
                let phases = e.list("sim.reference.phases")?.unwrap_or_else(|| vec![0.0; k]);
                if amps.len() != k || phases.len() != k {
                    return Err(e.invalid("sim.reference.amps", "amps and phases must match freqs in length"));
                }
                ReferenceKind::Multisine { freqs, amps, phases }
            }
            "pwc" => ReferenceKind::PiecewiseConstant {
                levels: e.list("sim.reference.levels")?.unwrap_or_else(|| vec![-1.0, 1.0]),
                dwell: e.get("sim.reference.dwell")?.unwrap_or(5),
                seed: e.get("sim.reference.seed")?.unwrap_or(0),
            },
            other => {
                return Err(e.invalid(
                    "sim.reference.type",
                    format!("expected 'multisine' or 'pwc', found '{other}'"),
                ))
            }
        };
        let noise_level = match (e.get::<f64>("sim.noise.variance")?, e.get::<f64>("sim.noise.snr_db")?) {
            (Some(_), Some(_)) => {
                return Err(e.invalid("sim.noise.snr_db", "set either sim.noise.variance or sim.noise.snr_db"))
            }
            (Some(v), None) if v >= 0.0 => NoiseLevel::Variance(v),
            (Some(_), None) => return Err(e.invalid("sim.noise.variance", "must be nonnegative")),
            (None, Some(db)) => NoiseLevel::SnrDb(db),
            (None, None) => NoiseLevel::Variance(0.0),
        };
        let pair = |num: &str, den: &str| -> Result<Option<(Vec<f64>, Vec<f64>)>> {
            match (e.list(num)?, e.list(den)?) {
                (Some(n), Some(d)) => Ok(Some((n, d))),
                (None, None) => Ok(None),
                _ => Err(e.invalid(num, format!("{num} and {den} must be given together"))),
            }
        };
        let est_theta0 = match e.raw("est.theta0") {
            None => None,
            Some((_, v)) if v == "auto" => None,
            Some(_) => e.list("est.theta0")?,
        };
        let run_n: Vec<usize> = e.list("run.n")?.unwrap_or_else(|| vec![10_000]);
        if run_n.is_empty() || run_n.windows(2).any(|w| w[0] >= w[1]) || run_n[0] == 0 {
            return Err(e.invalid("run.n", "must be a strictly ascending list of positive lengths"));
        }
        let period: f64 = e.require("sim.period")?;
        if !(period.is_finite() && period > 0.0) {
            return Err(e.invalid("sim.period", "must be positive"));
        }
        let est_tol: f64 = e.get("est.tol")?.unwrap_or(DEFAULT_TOL);
        if !(est_tol.is_finite() && est_tol > 0.0) {
            return Err(e.invalid("est.tol", "must be positive"));
        }
        Ok(Self {
            plant_a: e.require_list("plant.a")?,
            plant_b: e.require_list("plant.b")?,
            controller_f: e.require_list("controller.f")?,
            controller_l: e.require_list("controller.l")?,
            controller_kind: e.get("controller.kind")?.unwrap_or(ControllerKind::Continuous),
            discrete_controller: pair("controller.discrete.num", "controller.discrete.den")?,
            period,
            reference,
            reference_hold: e.get("sim.reference.hold")?.unwrap_or_default(),
            noise_level,
            noise_seed: e.get("sim.noise.seed")?.unwrap_or(1),
            noise_hold: e.get("sim.noise.hold")?.unwrap_or_default(),
            noise_shaping: pair("sim.noise.shaping.num", "sim.noise.shaping.den")?,
            est_n: e.get("est.n")?,
            est_m: e.get("est.m")?,
            est_theta0,
            est_tol,
            est_max_iter: e.get("est.max_iter")?.unwrap_or(DEFAULT_MAX_ITER),
            est_hold: e.get("est.hold")?.unwrap_or_default(),
            run_n,
            run_replicates: e.get("run.replicates")?.unwrap_or(1),
            hash: hex::encode(Sha256::digest(text.as_bytes())),
        })
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        fs::read_to_string(path)?.parse()
    }

    pub fn plant(&self) -> Result<TransferFunction> {
        TransferFunction::from_coeffs(&self.plant_b, &self.plant_a)
    }

    pub fn controller(&self) -> Result<TransferFunction> {
        TransferFunction::from_coeffs(&self.controller_f, &self.controller_l)
    }

    pub fn system(&self) -> Result<ClosedLoopSystem> {
        let sys = ClosedLoopSystem::new(self.plant()?, self.controller()?, self.controller_kind, self.period)?
            .with_reference_hold(self.reference_hold)
            .with_noise_hold(self.noise_hold);
        match (&self.discrete_controller, self.controller_kind) {
            (Some((num, den)), ControllerKind::DiscreteWithHold) => {
                sys.with_discrete_controller(DiscreteFilter::from_z_coefficients(num, den, self.period)?)
            }
            _ => Ok(sys),
        }
    }

    pub fn max_n(&self) -> usize {
        *self.run_n.last().expect("validated non-empty")
    }

    pub fn reference(&self, n: usize) -> Result<SampledSignal> {
        let r = match &self.reference {
            ReferenceKind::Multisine { freqs, amps, phases } => gen_multisine(freqs, amps, phases, n, self.period)?,
            ReferenceKind::PiecewiseConstant { levels, dwell, seed } => {
                gen_piecewise_constant(levels, *dwell, n, *seed, self.period)?
            }
        };
        Ok(r.with_hold(self.reference_hold))
    }

    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        let shaping = match &self.noise_shaping {
            Some((num, den)) => Some(DiscreteFilter::from_z_coefficients(num, den, self.period)?),
            None => None,
        };
        Ok(NoiseSpec {
            level: self.noise_level,
            seed: self.noise_seed,
            shaping,
        })
    }

    /// Estimator orders, defaulting to the plant's.
    pub fn orders(&self) -> Result<(usize, usize)> {
        let plant = self.plant()?;
        Ok((
            self.est_n.unwrap_or(plant.den().degree()),
            self.est_m.unwrap_or(if plant.num().is_zero() { 0 } else { plant.num().degree() }),
        ))
    }

    pub fn estimator_options(&self) -> Result<EstimatorOptions> {
        let (n, m) = self.orders()?;
        let theta0 = match &self.est_theta0 {
            Some(v) => {
                if v.len() != n + m + 1 {
                    return Err(Error::Config {
                        line: 0,
                        message: format!("est.theta0 needs {} entries, found {}", n + m + 1, v.len()),
                    });
                }
                Some(ThetaVector::from_slice(v, n)?)
            }
            None => None,
        };
        Ok(EstimatorOptions {
            n,
            m,
            tol: self.est_tol,
            max_iter: self.est_max_iter,
            hold: self.est_hold,
            theta0,
        })
    }

    /// Simulates `n` samples with the configured disturbance and `seed`.
    pub fn simulate(&self, sys: &ClosedLoopSystem, n: usize) -> Result<Dataset> {
        let r = self.reference(n)?;
        let zeros = SampledSignal::zeros(n, self.period, self.noise_hold)?;
        let clean = simulate(sys, &r, &zeros, n)?;
        let v = self.noise_spec()?.generate(&clean.x_star, n, self.noise_seed)?.with_hold(self.noise_hold);
        simulate(sys, &r, &v, n)
    }

    /// `n + max(n + n_l, m + n_f) + 1`.
    pub fn required_excitation_order(&self) -> Result<usize> {
        let (n, m) = self.orders()?;
        let c = self.controller()?;
        let nf = if c.num().is_zero() { 0 } else { c.num().degree() };
        Ok(n + (n + c.den().degree()).max(m + nf) + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub assumption: Assumption,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, a: Assumption) -> &Check {
        self.checks.iter().find(|c| c.assumption == a).expect("every assumption is checked")
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", c.assumption, if c.passed { "PASS" } else { "FAIL" }, c.detail)?;
        }
        Ok(())
    }
}

fn check(assumption: Assumption, r: Result<String>) -> Check {
    match r {
        Ok(detail) => Check {
            assumption,
            passed: true,
            detail,
        },
        Err(e) => Check {
            assumption,
            passed: false,
            detail: match e {
                Error::AssumptionViolated { detail, .. } => detail,
                other => other.to_string(),
            },
        },
    }
}

fn violated(assumption: Assumption, detail: String) -> Error {
    Error::AssumptionViolated { assumption, detail }
}

/// Evaluates every assumption independently; a failure in one does not
/// prevent the others from being reported.
pub fn validate(config: &ExperimentConfig) -> ValidationReport {
    let sys = config.system();
    let theta0 = || -> Result<ThetaVector> {
        let sys = config.system()?;
        let opts = config.estimator_options()?;
        match &opts.theta0 {
            Some(t) => Ok(t.clone()),
            None => {
                let data = config.simulate(&sys, config.max_n())?;
                opts.starting_point(&data, sys.controller())
            }
        }
    };
    let theta0 = theta0();

    let a1 = check(Assumption::A1, (|| {
        let sys = sys.as_ref().map_err(clone_err)?;
        sys.check_a1()?;
        let q = sys.q_star();
        Ok(format!(
            "plant and controller stable, coprime plant; closed-loop spectral abscissa {:.4}",
            q.spectral_abscissa()?
        ))
    })());

    let a2 = check(Assumption::A2, (|| {
        let variance_zero = matches!(config.noise_level, NoiseLevel::Variance(v) if v == 0.0);
        match &config.reference {
            _ if variance_zero => Ok("noise-free: disturbance is identically zero".to_string()),
            ReferenceKind::Multisine { .. } => Ok(format!(
                "deterministic multisine reference, disturbance seed {}",
                config.noise_seed
            )),
            ReferenceKind::PiecewiseConstant { seed, .. } if *seed == config.noise_seed => Err(violated(
                Assumption::A2,
                format!("reference and disturbance share seed {seed}"),
            )),
            ReferenceKind::PiecewiseConstant { seed, .. } => Ok(format!(
                "reference seed {seed} and disturbance seed {} are independent streams",
                config.noise_seed
            )),
        }
    })());

    let a3 = check(Assumption::A3, (|| {
        let required = config.required_excitation_order()?;
        let r = config.reference(config.max_n())?;
        let measured = excitation_order(&r, required)?;
        if measured >= required {
            Ok(format!("measured excitation order {measured} >= required {required}"))
        } else {
            Err(violated(
                Assumption::A3,
                format!("measured excitation order {measured} < required {required}"),
            ))
        }
    })());

    let a4 = check(Assumption::A4, (|| {
        let theta = theta0.as_ref().map_err(clone_err)?;
        let c = config.controller()?;
        if theta.m() > theta.n() {
            return Err(violated(Assumption::A4, format!("m = {} exceeds n = {}", theta.m(), theta.n())));
        }
        check_a4(theta, &c)?;
        if !coprime(&theta.a_poly(), &theta.b_poly(), DEFAULT_COPRIME_TOL) {
            return Err(violated(Assumption::A4, "initial model is not coprime".into()));
        }
        Ok(format!(
            "theta0 = {theta}; model closed-loop spectral abscissa {:.4}",
            theta.closed_loop_poly(&c).spectral_abscissa()?
        ))
    })());

    let a5 = check(Assumption::A5, (|| {
        let (n, m) = config.orders()?;
        let plant = config.plant()?;
        let (ns, ms) = (plant.den().degree(), if plant.num().is_zero() { 0 } else { plant.num().degree() });
        if (n, m) == (ns, ms) {
            Ok(format!("model orders (n, m) = ({n}, {m}) match the plant"))
        } else {
            Err(violated(
                Assumption::A5,
                format!("model orders ({n}, {m}) differ from plant orders ({ns}, {ms})"),
            ))
        }
    })());

    let a6 = check(Assumption::A6, (|| {
        let theta = theta0.as_ref().map_err(clone_err)?;
        let sys = sys.as_ref().map_err(clone_err)?;
        let p = &theta.a_poly() * &sys.q_star();
        let max_im = p.roots()?.iter().fold(0.0f64, |acc, z| acc.max(z.im.abs()));
        let ws = 2.0 * std::f64::consts::PI / config.period;
        if ws > 2.0 * max_im {
            Ok(format!("sampling frequency {ws:.4} rad/s > 2 x {max_im:.4}"))
        } else {
            Err(violated(
                Assumption::A6,
                format!("sampling frequency {ws:.4} rad/s <= 2 x {max_im:.4}"),
            ))
        }
    })());

    ValidationReport {
        checks: vec![a1, a2, a3, a4, a5, a6],
    }
}

fn clone_err(e: &Error) -> Error {
    Error::InvalidArgument(format!("prerequisite failed: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    Simulate,
    Estimate,
    Sweep,
    Certify,
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "validate" => Command::Validate,
            "simulate" => Command::Simulate,
            "estimate" => Command::Estimate,
            "sweep" => Command::Sweep,
            "certify" => Command::Certify,
            other => return Err(Error::InvalidArgument(format!("unknown command '{other}'"))),
        })
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Validate => "validate",
            Command::Simulate => "simulate",
            Command::Estimate => "estimate",
            Command::Sweep => "sweep",
            Command::Certify => "certify",
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `sim.noise.seed`.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub csv_path: Option<PathBuf>,
    pub summary_path: Option<PathBuf>,
    pub summary: String,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::AssumptionViolated { .. } => 2,
        Error::ConvergenceBudget(_) => 3,
        Error::Io(_) | Error::Csv(_) => 4,
        _ => 1,
    }
}

/// Runs `command` on the configuration at `path`. Errors are returned only
/// for failures before any work starts (unreadable or invalid config); the
/// remaining failures are reported through the outcome's exit code.
pub fn run(path: &Path, command: Command, opts: &RunOptions) -> Result<RunOutcome> {
    let mut config = ExperimentConfig::from_path(path)?;
    if let Some(seed) = opts.seed {
        config.noise_seed = seed;
    }
    let out_dir = opts.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let report = validate(&config);
    let mut summary = String::new();
    summary.push_str(&format!("command: {command}\nconfig: {}\nconfig_sha256: {}\n", path.display(), config.hash));
    summary.push_str(&format!("noise_seed: {}\n", config.noise_seed));
    summary.push_str(&report.to_string());

    let write_summary = |summary: &str| -> Result<PathBuf> {
        fs::create_dir_all(&out_dir)?;
        let p = out_dir.join("summary.txt");
        fs::write(&p, summary)?;
        Ok(p)
    };

    if command == Command::Validate || (!report.all_passed() && !opts.force) {
        let code = if report.all_passed() { 0 } else { 2 };
        if code != 0 {
            summary.push_str("validation failed; rerun with --force to proceed anyway\n");
        }
        let summary_path = write_summary(&summary).ok();
        return Ok(RunOutcome {
            exit_code: if summary_path.is_none() { 4 } else { code },
            csv_path: None,
            summary_path,
            summary,
        });
    }

    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let csv_path = out_dir.join(format!("{command}_{stamp}.csv"));
    let result = fs::create_dir_all(&out_dir)
        .map_err(Error::from)
        .and_then(|_| execute(&config, command, &csv_path));
    let exit_code = match result {
        Ok(headline) => {
            summary.push_str(&headline);
            0
        }
        Err(Error::ConvergenceBudget(msg)) => {
            summary.push_str(&format!("convergence failure: {msg}\n"));
            3
        }
        Err(e) => {
            summary.push_str(&format!("error: {e}\n"));
            exit_code(&e)
        }
    };
    let summary_path = write_summary(&summary);
    Ok(RunOutcome {
        exit_code: if summary_path.is_err() { 4 } else { exit_code },
        csv_path: csv_path.exists().then_some(csv_path),
        summary_path: summary_path.ok(),
        summary,
    })
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn estimate_with_budget(data: &Dataset, sys: &ClosedLoopSystem, opts: &EstimatorOptions) -> Result<EstimateResult> {
    let res = estimate(data, sys.controller(), opts)?;
    if !res.converged {
        return Err(Error::ConvergenceBudget(format!(
            "no convergence within {} iterations (last relative step {:.3e})",
            opts.max_iter,
            res.final_rel_step()
        )));
    }
    Ok(res)
}

/// Writes the command's CSV and returns the headline lines of the summary.
fn execute(config: &ExperimentConfig, command: Command, csv_path: &Path) -> Result<String> {
    let sys = config.system()?;
    let opts = config.estimator_options()?;
    let theta_true = sys.theta_true();
    let n = config.max_n();
    let mut out = String::new();
    match command {
        Command::Validate => unreachable!("handled before execution"),
        Command::Simulate => {
            let data = config.simulate(&sys, n)?;
            data.write_csv(create(csv_path)?)?;
            out.push_str(&format!("samples: {n}\n"));
            out.push_str(&format!("y_mean_square: {:.6e}\n", data.y.mean_square()));
            out.push_str(&format!("v_mean_square: {:.6e}\n", data.v.mean_square()));
        }
        Command::Estimate => {
            let data = config.simulate(&sys, n)?;
            let res = estimate_with_budget(&data, &sys, &opts)?;
            res.write_trace_csv(create(csv_path)?)?;
            out.push_str(&format!("samples: {n}\n"));
            out.push_str(&format!("theta: {}\n", res.theta));
            out.push_str(&format!("iterations: {}\n", res.iterations));
            out.push_str(&format!("fixed_point_residual: {:.6e}\n", res.fixed_point_residual));
            if (res.theta.n(), res.theta.m()) == (theta_true.n(), theta_true.m()) {
                out.push_str(&format!("error_norm: {:.6e}\n", res.theta.distance(&theta_true)));
                let clean = data_without_noise(&data)?;
                let d = decompose_dataset(&sys, &clean, &res.theta, opts.hold)?;
                let c = nonsingularity_condition(&d);
                out.push_str(&format!("condition_lhs: {:.6e}\ncondition_sigma_min: {:.6e}\ncondition_holds: {}\n", c.lhs, c.sigma_min, c.holds));
            }
        }
        Command::Sweep => {
            let r = config.reference(n)?;
            let table = consistency_sweep(
                &sys,
                &r,
                &config.noise_spec()?,
                &config.run_n,
                config.run_replicates,
                &[ControllerKind::Continuous, ControllerKind::DiscreteWithHold],
                &opts,
            )?;
            table.write_csv(create(csv_path)?)?;
            for s in &table.summary {
                out.push_str(&format!(
                    "{} N={}: median_err {:.6e} iqr {:.6e} bias_norm {:.6e} failures {}/{} phi_star_min_eig {:.6e}\n",
                    s.controller_kind, s.n, s.median_err, s.iqr_err, s.bias_norm, s.failures, s.replicates, s.phi_star_min_eig
                ));
            }
        }
        Command::Certify => {
            let r = config.reference(n)?;
            let zeros = SampledSignal::zeros(n, config.period, config.noise_hold)?;
            let data = simulate(&sys, &r, &zeros, n)?;
            let res = estimate_with_budget(&data, &sys, &opts)?;
            let cert = bias_certificate(&sys, &r, &res.theta, &theta_true, opts.hold)?;
            cert.write_csv(create(csv_path)?)?;
            let d = decompose_dataset(&sys, &data, &theta_true, opts.hold)?;
            let c = nonsingularity_condition(&d);
            out.push_str(&format!("samples: {n}\n"));
            out.push_str(&format!("theta_bar: {}\n", res.theta));
            out.push_str(&format!("bias_norm: {:.6e}\n", res.theta.distance(&theta_true)));
            out.push_str(&format!("relative_match: {:.6e}\n", cert.relative_match));
            out.push_str(&format!("relative_match_symmetric: {:.6e}\n", cert.relative_match_symmetric));
            out.push_str(&format!("identity_residual: {:.6e}\n", cert.identity_residual));
            out.push_str(&format!("condition_lhs: {:.6e}\ncondition_sigma_min: {:.6e}\ncondition_holds: {}\n", c.lhs, c.sigma_min, c.holds));
            out.push_str(&format!("decomposition_closure: {:.6e}\n", d.closure_residual()));
        }
    }
    Ok(out)
}

/// Copy of `data` with the disturbance removed.
fn data_without_noise(data: &Dataset) -> Result<Dataset> {
    let mut clean = data.clone();
    clean.u = data.u_star.clone();
    clean.y = data.x_star.clone();
    clean.v = SampledSignal::zeros(data.len(), data.period(), data.v.hold())?;
    Ok(clean)
}
