//! Asymptotic checks on the estimator: normal-matrix decomposition, the
//! nonsingularity condition, the bias certificate at a converged point and
//! Monte Carlo consistency sweeps.
//!
//! Expectations are time averages over one realisation.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Assumption, Error, Result};
use crate::estimator::{
    check_a4, estimate, filtered_reference_stack, EstimatorOptions, RegressorSet, ThetaVector,
};
use crate::lti::{DiscreteFilter, Hold};
use crate::poly::{sylvester, Polynomial};
use crate::signals::{fmt_f64, gen_colored_noise, gen_white_noise, SampledSignal};
use crate::sim::{epsilon_u, simulate, ClosedLoopSystem, ControllerKind, Dataset};

/// Samples covering ten times the slowest time constant of the loop and the
/// filters built around `theta_j`.
pub fn warmup_samples(sys: &ClosedLoopSystem, theta_j: &ThetaVector) -> Result<usize> {
    let mut slowest: f64 = 0.0;
    for p in [sys.q_star(), theta_j.a_poly(), theta_j.closed_loop_poly(sys.controller())] {
        for z in p.roots()? {
            if z.re < 0.0 {
                slowest = slowest.max(-1.0 / z.re);
            }
        }
    }
    Ok((10.0 * slowest / sys.period()).ceil() as usize)
}

fn avg_outer(a: &DMatrix<f64>, b: &DMatrix<f64>, skip: usize) -> DMatrix<f64> {
    let n = a.nrows() - skip;
    let ra = a.rows(skip, n);
    let rb = b.rows(skip, n);
    ra.tr_mul(&rb) / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalMatrixDecomposition {
    /// Average of `phi_hat phi^T`.
    pub total: DMatrix<f64>,
    /// Average of `phi_hat phi_tilde^T`.
    pub sylvester_term: DMatrix<f64>,
    /// Average of `phi_hat delta^T`.
    pub delta_term: DMatrix<f64>,
    /// Average of `phi_hat v_f^T`.
    pub noise_term: DMatrix<f64>,
    pub n_samples: usize,
}

impl NormalMatrixDecomposition {
    /// `|total - (sylvester + delta + noise)| / |total|` (Frobenius).
    pub fn closure_residual(&self) -> f64 {
        let sum = &self.sylvester_term + &self.delta_term + &self.noise_term;
        (&self.total - sum).norm() / self.total.norm()
    }
}

/// Splits the empirical normal matrix at `theta_j` into its noise-free
/// filter-then-sample part, the interpolation-error part and the
/// disturbance part. The first [`warmup_samples`] are discarded.
pub fn decompose_normal_matrix(
    sys: &ClosedLoopSystem,
    r: &SampledSignal,
    v: &SampledSignal,
    theta_j: &ThetaVector,
    hold: Hold,
) -> Result<NormalMatrixDecomposition> {
    sys.check_a1()?;
    check_a4(theta_j, sys.controller())?;
    let data = simulate(sys, r, v, r.len())?;
    decompose_dataset(sys, &data, theta_j, hold)
}

/// [`decompose_normal_matrix`] on an existing simulation.
pub fn decompose_dataset(
    sys: &ClosedLoopSystem,
    data: &Dataset,
    theta_j: &ThetaVector,
    hold: Hold,
) -> Result<NormalMatrixDecomposition> {
    let skip = warmup_samples(sys, theta_j)?;
    if data.len() <= skip + theta_j.dim() {
        return Err(Error::SignalTooShort {
            len: data.len(),
            required: skip + theta_j.dim() + 1,
        });
    }
    let set = RegressorSet::build_decomposed(sys, data, theta_j, hold)?;
    let d = set.decomposition.as_ref().expect("decomposed");
    Ok(NormalMatrixDecomposition {
        total: avg_outer(&set.phi_hat_f, &set.phi_f, skip),
        sylvester_term: avg_outer(&set.phi_hat_f, &d.phi_tilde_f, skip),
        delta_term: avg_outer(&set.phi_hat_f, &d.delta, skip),
        noise_term: avg_outer(&set.phi_hat_f, &d.v_f, skip),
        n_samples: data.len() - skip,
    })
}

/// `S(-B_j, A_j) Phi S(-B*, A*)^T` with `Phi` the average of the reference
/// stacks filtered by `L/(A_j Q_j)` and `L/(A_j Q*)`. Equals the
/// `sylvester_term` of the decomposition for a continuous controller.
pub fn sylvester_form(
    sys: &ClosedLoopSystem,
    r: &SampledSignal,
    theta_j: &ThetaVector,
) -> Result<DMatrix<f64>> {
    let (n, m) = (theta_j.n(), theta_j.m());
    let dim = n + m + 1;
    let l = sys.controller().den();
    let aj = theta_j.a_poly();
    let z = filtered_reference_stack(r, &aj, &theta_j.closed_loop_poly(sys.controller()), l, dim, r.hold())?;
    let w = filtered_reference_stack(r, &aj, &sys.q_star(), l, dim, r.hold())?;
    let skip = warmup_samples(sys, theta_j)?;
    let phi = avg_outer(&z, &w, skip);
    let sj = sylvester(&theta_j.b_poly(), &aj, n, m)?;
    let ss = sylvester(sys.b_star(), sys.a_star(), n, m)?;
    Ok(sj.entries() * phi * ss.entries().transpose())
}

/// Smallest eigenvalue of the average of `(L/(A* Q*) r_d)(L/(A* Q*) r_d)^T`.
pub fn phi_star_min_eigenvalue(sys: &ClosedLoopSystem, r: &SampledSignal, n: usize, m: usize) -> Result<f64> {
    let z = filtered_reference_stack(r, sys.a_star(), &sys.q_star(), sys.controller().den(), n + m + 1, r.hold())?;
    let skip = warmup_samples(sys, &sys.theta_true())?.min(r.len() / 2);
    Ok(avg_outer(&z, &z, skip).symmetric_eigenvalues().min())
}

/// Sufficient condition for a nonsingular normal matrix:
/// `|delta_term|_2 < sigma_min(sylvester_term)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonsingularityCondition {
    pub lhs: f64,
    pub sigma_min: f64,
    pub holds: bool,
}

fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    m.clone().svd(false, false).singular_values
}

pub fn nonsingularity_condition(d: &NormalMatrixDecomposition) -> NonsingularityCondition {
    let lhs = singular_values(&d.delta_term).max();
    let sigma_min = singular_values(&d.sylvester_term).min();
    NonsingularityCondition {
        lhs,
        sigma_min,
        holds: lhs < sigma_min,
    }
}

/// Smallest singular value of a matrix.
pub fn sigma_min(m: &DMatrix<f64>) -> f64 {
    singular_values(m).min()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasCertificate {
    /// Coefficients of `H = B* A_bar - B_bar A*`, `[p^(n+m) .. 1]`.
    pub h: DVector<f64>,
    pub phi_bar: DMatrix<f64>,
    pub psi_bar: DVector<f64>,
    /// `-phi_bar^-1 psi_bar`.
    pub predicted_h: DVector<f64>,
    pub relative_match: f64,
    /// Same prediction with both reference stacks filtered through the
    /// model loop `L/(A_bar Q_bar)`.
    pub predicted_h_symmetric: DVector<f64>,
    pub relative_match_symmetric: f64,
    /// Relative coefficient mismatch of `B_bar (A_bar A*) = A_bar (B* A_bar - H)`.
    pub identity_residual: f64,
}

impl BiasCertificate {
    /// `index,h,predicted_h,relative_match` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["index", "h", "predicted_h", "relative_match"])?;
        for i in 0..self.h.len() {
            w.write_record([
                i.to_string(),
                fmt_f64(self.h[i]),
                fmt_f64(self.predicted_h[i]),
                fmt_f64(self.relative_match),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn relative(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = a.norm();
    if scale == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    }
}

/// Predicts the bias polynomial at a noise-free converged point from the
/// input commutation error and compares it with the exact `H`.
///
/// Uses every sample of `r`, matching the window the estimator averaged
/// over; `hold` is the estimator's assumed plant-signal hold.
pub fn bias_certificate(
    sys: &ClosedLoopSystem,
    r: &SampledSignal,
    theta_bar: &ThetaVector,
    theta_true: &ThetaVector,
    hold: Hold,
) -> Result<BiasCertificate> {
    let (n, m) = (theta_bar.n(), theta_bar.m());
    if (theta_true.n(), theta_true.m()) != (n, m) {
        return Err(Error::Dimension("theta_bar and theta_true orders differ".into()));
    }
    let dim = n + m + 1;
    let (a_bar, b_bar) = (theta_bar.a_poly(), theta_bar.b_poly());
    let (a_star, b_star) = (theta_true.a_poly(), theta_true.b_poly());
    let h_poly = &(&b_star * &a_bar) - &(&b_bar * &a_star);
    let h = DVector::from_vec(h_poly.coeffs_padded(dim));

    let lhs = &b_bar * &(&a_bar * &a_star);
    let rhs = &a_bar * &(&(&b_star * &a_bar) - &h_poly);
    let len = lhs.degree().max(rhs.degree()) + 1;
    let diff = Polynomial::new(
        lhs.coeffs_padded(len)
            .iter()
            .zip(rhs.coeffs_padded(len))
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>(),
    );
    let identity_residual = diff.norm() / lhs.norm().max(rhs.norm()).max(f64::MIN_POSITIVE);

    let l = sys.controller().den();
    let q_bar = theta_bar.closed_loop_poly(sys.controller());
    let q_star = crate::lti::closed_loop_char(&a_star, &b_star, l, sys.controller().num());
    let z = filtered_reference_stack(r, &a_bar, &q_bar, l, dim, r.hold())?;
    let w = filtered_reference_stack(r, &a_bar, &q_star, l, dim, r.hold())?;
    let eps = epsilon_u(sys, r, theta_bar, hold)?;
    let eps = DVector::from_column_slice(eps.values());
    let count = r.len() as f64;
    let phi_bar = z.tr_mul(&w) / count;
    let phi_sym = z.tr_mul(&z) / count;
    let psi_bar = z.tr_mul(&eps) / count;

    let solve = |m: &DMatrix<f64>| -> Result<DVector<f64>> {
        let condition = crate::estimator::condition_number(m);
        if !(condition <= crate::estimator::MAX_CONDITION) {
            return Err(Error::AssumptionViolated {
                assumption: Assumption::A3,
                detail: format!(
                    "reference covariance is singular (condition number {condition:.3e}); \
                     the reference is not sufficiently exciting"
                ),
            });
        }
        Ok(-m.clone().lu().solve(&psi_bar).expect("checked nonsingular"))
    };
    let predicted_h = solve(&phi_bar)?;
    let predicted_h_symmetric = solve(&phi_sym)?;
    Ok(BiasCertificate {
        relative_match: relative(&h, &predicted_h),
        relative_match_symmetric: relative(&h, &predicted_h_symmetric),
        h,
        phi_bar,
        psi_bar,
        predicted_h,
        predicted_h_symmetric,
        identity_residual,
    })
}

/// Disturbance level: an explicit variance or a signal-to-noise ratio
/// relative to the noise-free plant output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    Variance(f64),
    SnrDb(f64),
}

#[derive(Debug, Clone)]
pub struct NoiseSpec {
    pub level: NoiseLevel,
    pub seed: u64,
    /// Optional discrete shaping filter applied to the white sequence.
    pub shaping: Option<DiscreteFilter>,
}

impl NoiseSpec {
    pub fn white(level: NoiseLevel, seed: u64) -> Self {
        Self {
            level,
            seed,
            shaping: None,
        }
    }

    /// Seed for replicate `k`.
    pub fn replicate_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Generates `n` samples with `variance` resolved against `x_star`.
    pub fn generate(&self, x_star: &SampledSignal, n: usize, seed: u64) -> Result<SampledSignal> {
        let variance = match self.level {
            NoiseLevel::Variance(v) => v,
            NoiseLevel::SnrDb(db) => x_star.mean_square() / 10f64.powf(db / 10.0),
        };
        let h = x_star.period();
        match &self.shaping {
            None => gen_white_noise(variance, n, seed, h),
            Some(f) => gen_colored_noise(variance, f, n, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub controller_kind: ControllerKind,
    pub n: usize,
    /// `None` for the noise-free run.
    pub replicate: Option<usize>,
    pub err_norm: f64,
    /// Noise-free bias at this `n`.
    pub bias_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub controller_kind: ControllerKind,
    pub n: usize,
    pub median_err: f64,
    pub iqr_err: f64,
    pub bias_norm: f64,
    pub failures: usize,
    pub replicates: usize,
    /// Smallest eigenvalue of the reference covariance at the true plant.
    pub phi_star_min_eig: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

impl SweepTable {
    /// `controller_kind,N,replicate,err_norm,bias_norm,converged` CSV; the
    /// noise-free run has an empty replicate field.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["controller_kind", "N", "replicate", "err_norm", "bias_norm", "converged"])?;
        for r in &self.rows {
            w.write_record([
                r.controller_kind.to_string(),
                r.n.to_string(),
                r.replicate.map_or(String::new(), |k| k.to_string()),
                fmt_f64(r.err_norm),
                fmt_f64(r.bias_norm),
                r.converged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_for(&self, kind: ControllerKind, n: usize) -> Option<&SweepSummary> {
        self.summary.iter().find(|s| s.controller_kind == kind && s.n == n)
    }
}

/// Quantile by linear interpolation of the sorted sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Maximum fraction of failed replicates before a sweep is aborted.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

/// Estimation error over a grid of record lengths for each controller kind.
///
/// The reference is fixed; each replicate draws a fresh disturbance. A
/// noise-free run at every length gives the bias. Failed replicates are
/// recorded with `converged = false` and a `NaN` error.
pub fn consistency_sweep(
    sys: &ClosedLoopSystem,
    r: &SampledSignal,
    noise: &NoiseSpec,
    n_grid: &[usize],
    replicates: usize,
    kinds: &[ControllerKind],
    opts: &EstimatorOptions,
) -> Result<SweepTable> {
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("n_grid must be non-empty and strictly ascending".into()));
    }
    let n_max = *n_grid.last().expect("non-empty");
    if r.len() < n_max {
        return Err(Error::SignalTooShort {
            len: r.len(),
            required: n_max,
        });
    }
    let theta_true = sys.theta_true();
    if (theta_true.n(), theta_true.m()) != (opts.n, opts.m) {
        return Err(Error::AssumptionViolated {
            assumption: Assumption::A5,
            detail: format!(
                "estimator orders ({}, {}) differ from plant orders ({}, {})",
                opts.n,
                opts.m,
                theta_true.n(),
                theta_true.m()
            ),
        });
    }

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &kind in kinds {
        let loop_sys = sys.with_kind(kind)?;
        let zeros = SampledSignal::zeros(n_max, r.period(), loop_sys.noise_hold())?;
        let clean = simulate(&loop_sys, r, &zeros, n_max)?;

        let noise_free: Vec<SweepRow> = n_grid
            .par_iter()
            .map(|&n| {
                let (err, converged) = run_one(&loop_sys, &clean.truncated(n), opts, &theta_true);
                SweepRow {
                    controller_kind: kind,
                    n,
                    replicate: None,
                    err_norm: err,
                    bias_norm: err,
                    converged,
                }
            })
            .collect();

        let (loop_ref, theta_ref) = (&loop_sys, &theta_true);
        let noisy: Vec<SweepRow> = (0..replicates)
            .into_par_iter()
            .flat_map_iter(|k| {
                let data = noise
                    .generate(&clean.x_star, n_max, noise.replicate_seed(k))
                    .map(|v| v.with_hold(loop_ref.noise_hold()))
                    .and_then(|v| simulate(loop_ref, r, &v, n_max));
                let noise_free = &noise_free;
                n_grid.iter().enumerate().map(move |(i, &n)| {
                    let (err, converged) = match &data {
                        Ok(d) => run_one(loop_ref, &d.truncated(n), opts, theta_ref),
                        Err(_) => (f64::NAN, false),
                    };
                    SweepRow {
                        controller_kind: kind,
                        n,
                        replicate: Some(k),
                        err_norm: err,
                        bias_norm: noise_free[i].bias_norm,
                        converged,
                    }
                })
            })
            .collect();

        let phi_star_min_eig = phi_star_min_eigenvalue(&loop_sys, &r.truncated(n_max), opts.n, opts.m)?;
        for (i, &n) in n_grid.iter().enumerate() {
            let errs: Vec<f64> = noisy.iter().filter(|row| row.n == n && row.converged).map(|row| row.err_norm).collect();
            let failures = noisy.iter().filter(|row| row.n == n && !row.converged).count();
            if replicates > 0 && failures as f64 > MAX_FAILURE_FRACTION * replicates as f64 {
                return Err(Error::ConvergenceBudget(format!(
                    "{failures} of {replicates} replicates failed to converge for {kind} controller at N = {n}"
                )));
            }
            summary.push(SweepSummary {
                controller_kind: kind,
                n,
                median_err: quantile(&errs, 0.5),
                iqr_err: quantile(&errs, 0.75) - quantile(&errs, 0.25),
                bias_norm: noise_free[i].bias_norm,
                failures,
                replicates,
                phi_star_min_eig,
            });
        }
        rows.extend(noise_free);
        rows.extend(noisy);
    }
    Ok(SweepTable { rows, summary })
}

fn run_one(sys: &ClosedLoopSystem, data: &Dataset, opts: &EstimatorOptions, theta_true: &ThetaVector) -> (f64, bool) {
    match estimate(data, sys.controller(), opts) {
        Ok(res) => (res.theta.distance(theta_true), res.converged),
        Err(_) => (f64::NAN, false),
    }
}
