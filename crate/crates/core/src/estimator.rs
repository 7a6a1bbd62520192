//! Closed-loop simplified refined instrumental variable estimator.
//!
//! Regressors are the sampled plant signals filtered by `p^k / A_j`, with
//! the filters discretized under an assumed hold. Instruments are built from
//! the reference alone, passed through the model closed loop, so they are
//! uncorrelated with the output disturbance.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Assumption, Error, Result};
use crate::lti::{closed_loop_char, columns_to_matrix, FilterBank, Hold, TransferFunction};
use crate::poly::{sylvester, Polynomial};
use crate::signals::{fmt_f64, SampledSignal};
use crate::sim::{Channel, ClosedLoopSystem, Dataset};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;
/// Normal matrices with a larger condition number are rejected.
pub const MAX_CONDITION: f64 = 1e12;
const MAX_BISECTIONS: usize = 50;

/// Model parameters `[a_1 .. a_n, b_0 .. b_m]` of
/// `B(p)/A(p)` with `A(p) = a_1 p^n + .. + a_n p + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl ThetaVector {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if b.is_empty() {
            return Err(Error::Dimension("theta needs at least one numerator coefficient".into()));
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("theta"));
        }
        Ok(Self { a, b })
    }

    /// Splits a stacked vector with `n` denominator entries.
    pub fn from_slice(v: &[f64], n: usize) -> Result<Self> {
        if v.len() <= n {
            return Err(Error::Dimension(format!(
                "theta of length {} cannot hold n = {n} plus a numerator",
                v.len()
            )));
        }
        Self::new(v[..n].to_vec(), v[n..].to_vec())
    }

    /// Normalises `a` to `A(0) = 1`; `deg a` must equal `n` and `deg b <= m`.
    pub fn from_polynomials(a: &Polynomial, b: &Polynomial, n: usize, m: usize) -> Result<Self> {
        let a0 = a.constant_term();
        if a.is_zero() || a0 == 0.0 {
            return Err(Error::InvalidArgument(
                "denominator must have a nonzero constant term".into(),
            ));
        }
        if a.degree() != n {
            return Err(Error::Dimension(format!("deg A = {} but n = {n}", a.degree())));
        }
        if !b.is_zero() && b.degree() > m {
            return Err(Error::Dimension(format!("deg B = {} exceeds m = {m}", b.degree())));
        }
        let ac = a.scale(1.0 / a0).coeffs().to_vec();
        let bc = b.scale(1.0 / a0).coeffs_padded(m + 1);
        Self::new(ac[..n].to_vec(), bc)
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn m(&self) -> usize {
        self.b.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn a_poly(&self) -> Polynomial {
        let mut c = self.a.clone();
        c.push(1.0);
        Polynomial::new(c)
    }

    pub fn b_poly(&self) -> Polynomial {
        Polynomial::new(self.b.clone())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.a.iter().chain(&self.b).copied().collect()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_vec(self.to_vec())
    }

    pub fn norm(&self) -> f64 {
        self.to_dvector().norm()
    }

    /// Euclidean distance; orders must match.
    pub fn distance(&self, other: &ThetaVector) -> f64 {
        assert_eq!((self.n(), self.m()), (other.n(), other.m()), "theta orders differ");
        (self.to_dvector() - other.to_dvector()).norm()
    }

    /// `A_j L + B_j F` for controller `c = F/L`.
    pub fn closed_loop_poly(&self, c: &TransferFunction) -> Polynomial {
        closed_loop_char(&self.a_poly(), &self.b_poly(), c.den(), c.num())
    }
}

impl fmt::Display for ThetaVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.to_vec().iter().map(|v| format!("{v:.10}")).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// Model denominator and model closed loop must both be Hurwitz.
pub fn check_a4(theta: &ThetaVector, c: &TransferFunction) -> Result<()> {
    if theta.m() > theta.n() {
        return Err(Error::AssumptionViolated {
            assumption: Assumption::A4,
            detail: format!("numerator order {} exceeds denominator order {}", theta.m(), theta.n()),
        });
    }
    let a = theta.a_poly();
    if !a.is_hurwitz(0.0)? {
        return Err(Error::AssumptionViolated {
            assumption: Assumption::A4,
            detail: format!("model denominator {a} is not Hurwitz"),
        });
    }
    let q = theta.closed_loop_poly(c);
    if !q.is_hurwitz(0.0)? {
        return Err(Error::AssumptionViolated {
            assumption: Assumption::A4,
            detail: format!("model closed-loop polynomial {q} is not Hurwitz"),
        });
    }
    Ok(())
}

fn check_same_grid(a: &SampledSignal, b: &SampledSignal) -> Result<()> {
    if (a.period() - b.period()).abs() > 1e-12 * a.period() {
        return Err(Error::PeriodMismatch {
            expected: a.period(),
            found: b.period(),
        });
    }
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "signals have {} and {} samples",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn monomials(top: usize, count: usize) -> Vec<Polynomial> {
    (0..count).map(|i| Polynomial::monomial(1.0, top - i)).collect()
}

/// Filtered regressor matrix (rows are samples) and filtered output.
///
/// Only `A_j` is used from `theta_j`; the numerator sets the order `m`.
pub fn build_regressor(
    u: &SampledSignal,
    y: &SampledSignal,
    theta_j: &ThetaVector,
    hold: Hold,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_same_grid(u, y)?;
    let (n, m) = (theta_j.n(), theta_j.m());
    let a = theta_j.a_poly();
    if !a.is_hurwitz(0.0)? {
        return Err(Error::AssumptionViolated {
            assumption: Assumption::A4,
            detail: format!("model denominator {a} is not Hurwitz"),
        });
    }
    let h = u.period();
    // p^n .. p, then 1 for the filtered output
    let y_out = FilterBank::new(&monomials(n, n + 1), &a, h, hold)?.apply(y.values());
    let u_out = FilterBank::new(&monomials(m, m + 1), &a, h, hold)?.apply(u.values());
    let mut cols: Vec<Vec<f64>> = y_out[..n]
        .iter()
        .map(|c| c.iter().map(|v| -v).collect())
        .collect();
    cols.extend(u_out);
    Ok((columns_to_matrix(&cols), DVector::from_vec(y_out[n].clone())))
}

/// Instruments from the reference, one proper filter per column.
///
/// Output columns filter `r` by `-p^(n-i) B_j L / (A_j Q_j)` and input
/// columns by `p^(m-j) A_j L / (A_j Q_j)`, `Q_j = A_j L + B_j F`: these are
/// the model closed-loop plant output and input passed through the same
/// `p^k / A_j` filters as the regressor.
pub fn build_instruments(
    r: &SampledSignal,
    theta_j: &ThetaVector,
    c: &TransferFunction,
    hold: Hold,
) -> Result<DMatrix<f64>> {
    check_a4(theta_j, c)?;
    let (n, m) = (theta_j.n(), theta_j.m());
    let (a, b, l) = (theta_j.a_poly(), theta_j.b_poly(), c.den().clone());
    let den = &a * &theta_j.closed_loop_poly(c);
    let bl = &b * &l;
    let al = &a * &l;
    let mut nums: Vec<Polynomial> = (0..n).map(|i| -&bl.shift(n - i)).collect();
    nums.extend((0..=m).map(|j| al.shift(m - j)));
    let out = FilterBank::new(&nums, &den, r.period(), hold)?.apply(r.values());
    Ok(columns_to_matrix(&out))
}

/// Samples of `p^k L / (A Q)` applied to `r` for `k = n+m .. 0`, one column
/// each: the filtered reference-derivative stack.
pub fn filtered_reference_stack(
    r: &SampledSignal,
    a: &Polynomial,
    q: &Polynomial,
    l: &Polynomial,
    dim: usize,
    hold: Hold,
) -> Result<DMatrix<f64>> {
    let nums: Vec<Polynomial> = (0..dim).map(|i| l.shift(dim - 1 - i)).collect();
    let out = FilterBank::new(&nums, &(a * q), r.period(), hold)?.apply(r.values());
    Ok(columns_to_matrix(&out))
}

/// Same instruments through the Sylvester factorisation
/// `S(-B_j, A_j) * [p^k L / (A_j Q_j) r]`.
pub fn build_instruments_factored(
    r: &SampledSignal,
    theta_j: &ThetaVector,
    c: &TransferFunction,
    hold: Hold,
) -> Result<DMatrix<f64>> {
    check_a4(theta_j, c)?;
    let (n, m) = (theta_j.n(), theta_j.m());
    let (a, b) = (theta_j.a_poly(), theta_j.b_poly());
    let s = sylvester(&b, &a, n, m)?;
    let z = filtered_reference_stack(r, &a, &theta_j.closed_loop_poly(c), c.den(), n + m + 1, hold)?;
    Ok(z * s.entries().transpose())
}

/// Regressor `phi - phi_tilde - delta` split of a noisy regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorDecomposition {
    /// Filter-then-sample regressor of the noise-free loop.
    pub phi_tilde_f: DMatrix<f64>,
    /// Interpolation error of the noise-free regressor.
    pub delta: DMatrix<f64>,
    /// Disturbance contribution.
    pub v_f: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorSet {
    pub phi_f: DMatrix<f64>,
    pub phi_hat_f: DMatrix<f64>,
    pub y_f: DVector<f64>,
    pub decomposition: Option<RegressorDecomposition>,
}

impl RegressorSet {
    /// Regressor from `(u, y)` under `hold`, instruments from `r` under the
    /// reference's own hold.
    pub fn build(
        data: &Dataset,
        c: &TransferFunction,
        theta_j: &ThetaVector,
        hold: Hold,
    ) -> Result<Self> {
        let (phi_f, y_f) = build_regressor(&data.u, &data.y, theta_j, hold)?;
        let phi_hat_f = build_instruments(&data.r, theta_j, c, data.r.hold())?;
        Ok(Self {
            phi_f,
            phi_hat_f,
            y_f,
            decomposition: None,
        })
    }

    /// Also computes the noise-free split using the exact loop `sys`.
    pub fn build_decomposed(
        sys: &ClosedLoopSystem,
        data: &Dataset,
        theta_j: &ThetaVector,
        hold: Hold,
    ) -> Result<Self> {
        let mut set = Self::build(data, sys.controller(), theta_j, hold)?;
        let (n, m) = (theta_j.n(), theta_j.m());
        let a = theta_j.a_poly();
        let (phi_clean, _) = build_regressor(&data.u_star, &data.x_star, theta_j, hold)?;

        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n + m + 1);
        if n > 0 {
            let y = sys.filtered_channel_bank(&data.r, None, &monomials(n, n), &a, Channel::Y)?;
            cols.extend(y.into_iter().map(|c| c.into_iter().map(|v| -v).collect()));
        }
        cols.extend(sys.filtered_channel_bank(&data.r, None, &monomials(m, m + 1), &a, Channel::U)?);
        let phi_tilde_f = columns_to_matrix(&cols);
        let delta = &phi_clean - &phi_tilde_f;
        let v_f = &set.phi_f - &phi_clean;
        set.decomposition = Some(RegressorDecomposition {
            phi_tilde_f,
            delta,
            v_f,
        });
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.y_f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_f.is_empty()
    }

    /// `(1/N) sum phi_hat phi^T`.
    pub fn normal_matrix(&self) -> DMatrix<f64> {
        self.phi_hat_f.tr_mul(&self.phi_f) / self.len() as f64
    }

    /// `(1/N) sum phi_hat y_f`.
    pub fn cross_vector(&self) -> DVector<f64> {
        self.phi_hat_f.tr_mul(&self.y_f) / self.len() as f64
    }

    /// `(1/N) sum phi_hat (y_f - phi^T theta)`.
    pub fn moment_residual(&self, theta: &ThetaVector) -> DVector<f64> {
        let e = &self.y_f - &self.phi_f * theta.to_dvector();
        self.phi_hat_f.tr_mul(&e) / self.len() as f64
    }
}

/// 2-norm condition number.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves the instrumental-variable normal equations once.
pub fn clsrivc_step(regs: &RegressorSet, n: usize) -> Result<ThetaVector> {
    let d = regs.phi_f.ncols();
    if regs.len() < d {
        return Err(Error::SignalTooShort {
            len: regs.len(),
            required: d,
        });
    }
    let normal = regs.normal_matrix();
    let condition = condition_number(&normal);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularNormalMatrix { condition });
    }
    let sol = normal
        .lu()
        .solve(&regs.cross_vector())
        .ok_or(Error::SingularNormalMatrix { condition })?;
    ThetaVector::from_slice(sol.as_slice(), n)
}

/// Reflects unstable model poles into the left half plane and, if the model
/// closed loop is still unstable, shrinks the numerator by bisection.
pub fn stabilize(theta: &ThetaVector, c: &TransferFunction) -> Result<ThetaVector> {
    let n = theta.n();
    let mut a = theta.a_poly();
    if !a.is_hurwitz(0.0)? {
        let roots: Vec<Complex64> = a
            .roots()?
            .into_iter()
            .map(|z| {
                if z.re >= 0.0 {
                    Complex64::new(-z.re.max(1e-6 * (1.0 + z.norm())), z.im)
                } else {
                    z
                }
            })
            .collect();
        a = Polynomial::from_roots(&roots);
    }
    let a = a.scale(1.0 / a.constant_term());
    if a.degree() != n {
        return Err(Error::Stabilization("model denominator lost its leading coefficient".into()));
    }
    let stable = ThetaVector::new(a.coeffs()[..n].to_vec(), theta.b().to_vec())?;
    if stable.closed_loop_poly(c).is_hurwitz(0.0)? {
        return Ok(stable);
    }
    let with_b = |s: f64| {
        let b: Vec<f64> = stable.b().iter().map(|v| v * s).collect();
        ThetaVector::new(stable.a().to_vec(), b)
    };
    if !with_b(0.0)?.closed_loop_poly(c).is_hurwitz(0.0)? {
        return Err(Error::Stabilization(
            "model closed loop is unstable even with a zero numerator".into(),
        ));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if with_b(mid)?.closed_loop_poly(c).is_hurwitz(0.0)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo == 0.0 {
        return Err(Error::Stabilization(format!(
            "no stabilising numerator scaling found in {MAX_BISECTIONS} bisections"
        )));
    }
    with_b(lo)
}

/// Least squares on the regressor filtered by `(p/lambda + 1)^n`, stabilised.
pub fn initial_estimate(
    data: &Dataset,
    c: &TransferFunction,
    n: usize,
    m: usize,
    lambda: f64,
    hold: Hold,
) -> Result<ThetaVector> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("filter bandwidth must be positive, got {lambda}")));
    }
    let factor = Polynomial::new(vec![1.0 / lambda, 1.0]);
    let a = (0..n).fold(Polynomial::one(), |acc, _| &acc * &factor);
    let prefilter = ThetaVector::from_polynomials(&a, &Polynomial::zero(), n, m)?;
    let (phi_f, y_f) = build_regressor(&data.u, &data.y, &prefilter, hold)?;
    let regs = RegressorSet {
        phi_hat_f: phi_f.clone(),
        phi_f,
        y_f,
        decomposition: None,
    };
    stabilize(&clsrivc_step(&regs, n)?, c)
}

/// Default bandwidth of the initial least-squares prefilter: a tenth of the
/// Nyquist frequency.
pub fn default_init_bandwidth(period: f64) -> f64 {
    0.1 * std::f64::consts::PI / period
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iter: usize,
    pub theta: ThetaVector,
    /// `NaN` for the starting point.
    pub rel_step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub theta: ThetaVector,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceEntry>,
    /// `|(1/N) sum phi_hat(theta) (y_f - phi^T theta)|` at the returned theta.
    pub fixed_point_residual: f64,
    /// `|(1/N) sum phi_hat(theta) y_f|`, the natural scale of the residual.
    pub fixed_point_scale: f64,
}

impl EstimateResult {
    pub fn final_rel_step(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |t| t.rel_step)
    }

    /// `iter,a_1..a_n,b_0..b_m,rel_step` CSV.
    pub fn write_trace_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["iter".to_string()];
        header.extend((1..=self.theta.n()).map(|i| format!("a_{i}")));
        header.extend((0..=self.theta.m()).map(|j| format!("b_{j}")));
        header.push("rel_step".into());
        w.write_record(&header)?;
        for e in &self.trace {
            let mut row = vec![e.iter.to_string()];
            row.extend(e.theta.to_vec().into_iter().map(fmt_f64));
            row.push(fmt_f64(e.rel_step));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Iterates [`clsrivc_step`] from `theta_0` until the relative step falls
/// to `tol` or `max_iter` steps were taken. `hold` is the intersample
/// behaviour assumed for the plant signals.
pub fn clsrivc(
    data: &Dataset,
    c: &TransferFunction,
    theta_0: &ThetaVector,
    tol: f64,
    max_iter: usize,
    hold: Hold,
) -> Result<EstimateResult> {
    check_a4(theta_0, c)?;
    let n = theta_0.n();
    let mut theta = theta_0.clone();
    let mut trace = vec![TraceEntry {
        iter: 0,
        theta: theta.clone(),
        rel_step: f64::NAN,
    }];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let regs = RegressorSet::build(data, c, &theta, hold)?;
        let next = stabilize(&clsrivc_step(&regs, n)?, c)?;
        let rel_step = next.distance(&theta) / theta.norm().max(f64::MIN_POSITIVE);
        iterations += 1;
        theta = next;
        trace.push(TraceEntry {
            iter: iterations,
            theta: theta.clone(),
            rel_step,
        });
        if rel_step <= tol {
            converged = true;
            break;
        }
    }
    let regs = RegressorSet::build(data, c, &theta, hold)?;
    Ok(EstimateResult {
        fixed_point_residual: regs.moment_residual(&theta).norm(),
        fixed_point_scale: regs.cross_vector().norm(),
        theta,
        iterations,
        converged,
        trace,
    })
}

/// Estimator settings; `theta0 = None` starts from [`initial_estimate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOptions {
    pub n: usize,
    pub m: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub hold: Hold,
    pub theta0: Option<ThetaVector>,
}

impl EstimatorOptions {
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            hold: Hold::Zoh,
            theta0: None,
        }
    }

    /// Starting point for `data`.
    pub fn starting_point(&self, data: &Dataset, c: &TransferFunction) -> Result<ThetaVector> {
        match &self.theta0 {
            Some(t) => {
                if (t.n(), t.m()) != (self.n, self.m) {
                    return Err(Error::Dimension(format!(
                        "theta0 has orders ({}, {}), estimator expects ({}, {})",
                        t.n(),
                        t.m(),
                        self.n,
                        self.m
                    )));
                }
                Ok(t.clone())
            }
            None => initial_estimate(data, c, self.n, self.m, default_init_bandwidth(data.period()), self.hold),
        }
    }
}

/// [`clsrivc`] from the configured starting point.
pub fn estimate(data: &Dataset, c: &TransferFunction, opts: &EstimatorOptions) -> Result<EstimateResult> {
    let theta0 = opts.starting_point(data, c)?;
    clsrivc(data, c, &theta0, opts.tol, opts.max_iter, opts.hold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::{gen_multisine, gen_piecewise_constant};
    use crate::sim::{simulate, ControllerKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference_system(kind: ControllerKind) -> ClosedLoopSystem {
        let plant = TransferFunction::from_coeffs(&[1.0], &[0.5, 1.5, 1.0]).unwrap();
        let ctrl = TransferFunction::from_coeffs(&[2.0, 2.0], &[1.0, 10.0]).unwrap();
        ClosedLoopSystem::new(plant, ctrl, kind, 0.1).unwrap()
    }

    fn noise_free(sys: &ClosedLoopSystem, r: &SampledSignal) -> Dataset {
        let z = SampledSignal::zeros(r.len(), r.period(), Hold::Zoh).unwrap();
        simulate(sys, r, &z, r.len()).unwrap()
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn theta_round_trip() {
        let t = ThetaVector::from_polynomials(
            &Polynomial::new(vec![1.0, 3.0, 2.0]),
            &Polynomial::new(vec![4.0]),
            2,
            1,
        )
        .unwrap();
        assert_eq!(t.a(), &[0.5, 1.5]);
        assert_eq!(t.b(), &[0.0, 2.0]);
        assert_eq!(t.to_vec(), vec![0.5, 1.5, 0.0, 2.0]);
        assert_eq!(ThetaVector::from_slice(&t.to_vec(), 2).unwrap(), t);
        assert!(ThetaVector::from_polynomials(&Polynomial::new(vec![1.0, 0.0]), &Polynomial::one(), 1, 0).is_err());
    }

    #[test]
    fn regressor_step_example() {
        let theta = ThetaVector::new(vec![1.0], vec![1.0]).unwrap();
        let u = SampledSignal::new(vec![1.0; 50], 0.1, Hold::Zoh).unwrap();
        let y = SampledSignal::zeros(50, 0.1, Hold::Zoh).unwrap();
        let (phi, yf) = build_regressor(&u, &y, &theta, Hold::Zoh).unwrap();
        assert!(phi.column(0).iter().all(|&v| v == 0.0));
        assert!(yf.iter().all(|&v| v == 0.0));
        for k in 0..50 {
            let want = 1.0 - (-0.1 * k as f64).exp();
            assert!((phi[(k, 1)] - want).abs() < 1e-12);
        }
        let (phi, _) = build_regressor(&y, &y, &theta, Hold::Zoh).unwrap();
        assert!(phi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_plant_is_exact() {
        let theta = ThetaVector::new(vec![0.3, 1.1], vec![0.3, 1.1, 1.0]).unwrap();
        let y = gen_multisine(&[0.5, 2.0], &[1.0, 0.4], &[0.0, 0.3], 400, 0.1).unwrap();
        for hold in [Hold::Zoh, Hold::Foh] {
            let (phi, yf) = build_regressor(&y, &y, &theta, hold).unwrap();
            let e = &yf - &phi * theta.to_dvector();
            assert!(e.amax() < 1e-12 * yf.amax().max(1.0));
        }
    }

    #[test]
    fn zero_reference_zero_instruments() {
        let sys = reference_system(ControllerKind::Continuous);
        let r = SampledSignal::zeros(100, 0.1, Hold::Zoh).unwrap();
        let z = build_instruments(&r, &sys.theta_true(), sys.controller(), Hold::Zoh).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn open_loop_instruments() {
        // C = 0: instruments are -p^k/A (B/A r) and p^k/A r
        let theta = ThetaVector::new(vec![0.5, 1.5], vec![1.0]).unwrap();
        let c = TransferFunction::gain(0.0);
        let r = gen_piecewise_constant(&[-1.0, 1.0], 5, 500, 3, 0.1).unwrap();
        let z = build_instruments(&r, &theta, &c, Hold::Zoh).unwrap();
        let a = theta.a_poly();
        let x_path = FilterBank::new(&monomials(2, 2), &(&a * &a), 0.1, Hold::Zoh).unwrap().apply(r.values());
        let u_path = FilterBank::new(&[Polynomial::one()], &a, 0.1, Hold::Zoh).unwrap().apply(r.values());
        for k in 0..r.len() {
            assert!((z[(k, 0)] + x_path[0][k]).abs() < 1e-12);
            assert!((z[(k, 1)] + x_path[1][k]).abs() < 1e-12);
            assert!((z[(k, 2)] - u_path[0][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn instruments_match_model_loop_signals() {
        // instruments equal the regressor built from a noise-free simulation
        // of the model loop
        let sys = reference_system(ControllerKind::Continuous);
        let theta = ThetaVector::new(vec![0.4, 1.2], vec![1.3]).unwrap();
        let model = ClosedLoopSystem::new(
            TransferFunction::new(theta.b_poly(), theta.a_poly()).unwrap(),
            sys.controller().clone(),
            ControllerKind::Continuous,
            0.1,
        )
        .unwrap();
        let r = gen_multisine(&[0.7, 3.0, 9.0], &[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0], 800, 0.1).unwrap();
        let z = build_instruments(&r, &theta, sys.controller(), Hold::Zoh).unwrap();
        let mut cols = Vec::new();
        let a = theta.a_poly();
        let y = model.filtered_channel_bank(&r, None, &monomials(2, 2), &a, Channel::Y).unwrap();
        cols.extend(y.into_iter().map(|c| c.into_iter().map(|v| -v).collect::<Vec<_>>()));
        cols.extend(model.filtered_channel_bank(&r, None, &[Polynomial::one()], &a, Channel::U).unwrap());
        let oracle = columns_to_matrix(&cols);
        assert!(rel(&z, &oracle) < 1e-9);
    }

    #[test]
    fn sylvester_factorisation_reference() {
        let sys = reference_system(ControllerKind::Continuous);
        let r = gen_piecewise_constant(&[-1.0, 1.0], 5, 2000, 7, 0.1).unwrap();
        let theta = ThetaVector::new(vec![0.45, 1.6], vec![1.1]).unwrap();
        for hold in [Hold::Zoh, Hold::Foh] {
            let a = build_instruments(&r, &theta, sys.controller(), hold).unwrap();
            let b = build_instruments_factored(&r, &theta, sys.controller(), hold).unwrap();
            assert!(rel(&a, &b) < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn sylvester_factorisation_random(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=3usize);
            let m = rng.random_range(0..=n.min(2));
            let roots: Vec<Complex64> = (0..n).map(|_| Complex64::new(-rng.random_range(0.5..4.0), 0.0)).collect();
            let a = Polynomial::from_roots(&roots);
            let b = Polynomial::new((0..=m).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let theta = ThetaVector::from_polynomials(&a, &b, n, m).unwrap();
            let c = TransferFunction::from_coeffs(&[0.3], &[1.0, 5.0]).unwrap();
            prop_assume!(check_a4(&theta, &c).is_ok());
            let r = gen_piecewise_constant(&[-1.0, 1.0], 4, 500, seed, 0.1).unwrap();
            let x = build_instruments(&r, &theta, &c, Hold::Zoh).unwrap();
            let y = build_instruments_factored(&r, &theta, &c, Hold::Zoh).unwrap();
            prop_assert!(rel(&x, &y) < 1e-9);
        }

        #[test]
        fn stabilize_random(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = vec![rng.random_range(-2.0..2.0), rng.random_range(-3.0..3.0)];
            prop_assume!(a[0].abs() > 1e-3);
            let theta = ThetaVector::new(a, vec![rng.random_range(-5.0..5.0)]).unwrap();
            let c = TransferFunction::from_coeffs(&[2.0, 2.0], &[1.0, 10.0]).unwrap();
            let s = stabilize(&theta, &c).unwrap();
            prop_assert!(s.a_poly().is_hurwitz(0.0).unwrap());
            prop_assert!(s.closed_loop_poly(&c).is_hurwitz(0.0).unwrap());
            prop_assert_eq!(s.n(), 2);
        }
    }

    #[test]
    fn stabilize_examples() {
        let c = TransferFunction::from_coeffs(&[2.0, 2.0], &[1.0, 10.0]).unwrap();
        let t = ThetaVector::new(vec![0.5, 1.5], vec![1.0]).unwrap();
        assert_eq!(stabilize(&t, &c).unwrap(), t);
        // A = 1 - p has its root at +1
        let t = ThetaVector::new(vec![-1.0], vec![0.2]).unwrap();
        let s = stabilize(&t, &c).unwrap();
        assert!((s.a()[0] - 1.0).abs() < 1e-12);
        assert_eq!(s.b(), &[0.2]);
        // large negative gain destabilises the loop; b is shrunk
        let t = ThetaVector::new(vec![0.5, 1.5], vec![-40.0]).unwrap();
        let s = stabilize(&t, &c).unwrap();
        assert!(s.b()[0] > -40.0 && s.b()[0] < 0.0);
        assert!(s.closed_loop_poly(&c).is_hurwitz(0.0).unwrap());
    }

    #[test]
    fn step_examples() {
        // G = 1 modelled with n = 1, m = 0 is exactly theta = (0, 1)
        let theta_j = ThetaVector::new(vec![0.7], vec![1.0]).unwrap();
        let y = gen_multisine(&[0.5, 2.0], &[1.0, 0.4], &[0.0, 0.3], 600, 0.1).unwrap();
        let (phi, y_f) = build_regressor(&y, &y, &theta_j, Hold::Zoh).unwrap();
        let regs = RegressorSet {
            phi_hat_f: phi.clone(),
            phi_f: phi,
            y_f,
            decomposition: None,
        };
        let t = clsrivc_step(&regs, 1).unwrap();
        assert!(t.a()[0].abs() < 1e-9 && (t.b()[0] - 1.0).abs() < 1e-9, "{t}");

        let dup = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let regs = RegressorSet {
            phi_hat_f: dup.clone(),
            phi_f: dup,
            y_f: DVector::from_vec(vec![1.0, 2.0, 3.0]),
            decomposition: None,
        };
        assert!(matches!(clsrivc_step(&regs, 1), Err(Error::SingularNormalMatrix { .. })));
    }

    #[test]
    fn true_parameters_are_fixed_point_with_discrete_controller() {
        let sys = reference_system(ControllerKind::DiscreteWithHold);
        let r = gen_piecewise_constant(&[-1.0, 1.0], 5, 20_000, 11, 0.1).unwrap();
        let data = noise_free(&sys, &r);
        let theta = sys.theta_true();
        let regs = RegressorSet::build(&data, sys.controller(), &theta, Hold::Zoh).unwrap();
        let next = clsrivc_step(&regs, 2).unwrap();
        assert!(next.distance(&theta) < 1e-6, "{next}");

        let res = clsrivc(&data, sys.controller(), &theta, 1e-8, 100, Hold::Zoh).unwrap();
        assert!(res.converged && res.iterations <= 2);
        assert!(res.theta.distance(&theta) < 1e-6);

        let res = clsrivc(&data, sys.controller(), &theta, 1e-8, 0, Hold::Zoh).unwrap();
        assert!(!res.converged);
        assert_eq!(res.theta, theta);
        assert_eq!(res.iterations, 0);
    }

    #[test]
    fn continuous_controller_converges_away_from_truth() {
        let sys = reference_system(ControllerKind::Continuous);
        let r = gen_piecewise_constant(&[-1.0, 1.0], 5, 100_000, 11, 0.1).unwrap();
        let data = noise_free(&sys, &r);
        let theta0 = initial_estimate(&data, sys.controller(), 2, 0, default_init_bandwidth(0.1), Hold::Zoh).unwrap();
        let res = clsrivc(&data, sys.controller(), &theta0, 1e-8, 100, Hold::Zoh).unwrap();
        assert!(res.converged, "{:?}", res.trace.last());
        assert!(res.theta.distance(&sys.theta_true()) > 1e-7, "{}", res.theta);
        assert!(res.fixed_point_residual <= 10.0 * 1e-8 * res.fixed_point_scale);

        let mut buf = Vec::new();
        res.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,a_1,a_2,b_0,rel_step\n"));
        assert_eq!(text.lines().count(), res.trace.len() + 1);
    }

    #[test]
    fn decomposition_is_exact_without_noise() {
        let sys = reference_system(ControllerKind::Continuous);
        let r = gen_piecewise_constant(&[-1.0, 1.0], 5, 3000, 2, 0.1).unwrap();
        let data = noise_free(&sys, &r);
        let theta = ThetaVector::new(vec![0.45, 1.6], vec![1.1]).unwrap();
        let set = RegressorSet::build_decomposed(&sys, &data, &theta, Hold::Zoh).unwrap();
        let d = set.decomposition.as_ref().unwrap();
        assert!(d.v_f.iter().all(|&v| v == 0.0));
        let sum = &d.phi_tilde_f + &d.delta;
        assert!((&set.phi_f - sum).amax() < 1e-8);
        let dv = crate::sim::delta_vector(&sys, &r, &theta, Hold::Zoh).unwrap();
        assert!((&dv.regressor_error() - &d.delta).amax() < 1e-10);
    }
}
