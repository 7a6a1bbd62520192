//! Transfer functions, closed-loop sensitivities and exact hold-equivalent
//! discretization.
//!
//! A continuous filter is applied to sampled data by assuming a hold
//! (piecewise-constant or piecewise-linear) reconstruction of the input and
//! sampling the exact response. The resulting discrete filter is computed
//! from a single matrix exponential of an augmented state matrix, so the
//! sampled response has no integration error.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::poly::Polynomial;
use crate::signals::SampledSignal;

/// Intersample behaviour of a sampled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Hold {
    /// Piecewise constant between samples.
    #[default]
    Zoh,
    /// Piecewise linear between consecutive samples.
    Foh,
}

impl fmt::Display for Hold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Hold::Zoh => "zoh",
            Hold::Foh => "foh",
        })
    }
}

impl FromStr for Hold {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zoh" => Ok(Hold::Zoh),
            "foh" => Ok(Hold::Foh),
            other => Err(Error::InvalidArgument(format!("unknown hold '{other}'"))),
        }
    }
}

/// Proper ratio of two polynomials in `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction {
    num: Polynomial,
    den: Polynomial,
}

impl TransferFunction {
    pub fn new(num: Polynomial, den: Polynomial) -> Result<Self> {
        if den.is_zero() {
            return Err(Error::ZeroPolynomial);
        }
        if !num.is_zero() && num.degree() > den.degree() {
            return Err(Error::Improper {
                num: num.degree(),
                den: den.degree(),
            });
        }
        Ok(Self { num, den })
    }

    pub fn from_coeffs(num: &[f64], den: &[f64]) -> Result<Self> {
        Self::new(Polynomial::new(num.to_vec()), Polynomial::new(den.to_vec()))
    }

    pub fn gain(k: f64) -> Self {
        Self {
            num: Polynomial::constant(k),
            den: Polynomial::one(),
        }
    }

    pub fn num(&self) -> &Polynomial {
        &self.num
    }

    pub fn den(&self) -> &Polynomial {
        &self.den
    }

    pub fn is_zero(&self) -> bool {
        self.num.is_zero()
    }

    /// `H(0)`; infinite when the denominator vanishes at the origin.
    pub fn dc_gain(&self) -> f64 {
        self.num.constant_term() / self.den.constant_term()
    }

    pub fn eval(&self, s: Complex64) -> Complex64 {
        self.num.eval_complex(s) / self.den.eval_complex(s)
    }

    pub fn poles(&self) -> Result<Vec<Complex64>> {
        self.den.roots()
    }

    /// Product of two transfer functions without cancellation.
    pub fn series(&self, other: &TransferFunction) -> TransferFunction {
        TransferFunction {
            num: &self.num * &other.num,
            den: &self.den * &other.den,
        }
    }

    /// Controllable canonical realisation.
    pub fn to_state_space(&self) -> StateSpace {
        let lead = self.den.leading();
        let n = self.den.degree();
        let den: Vec<f64> = self.den.coeffs().iter().map(|c| c / lead).collect();
        let num: Vec<f64> = self
            .num
            .coeffs_padded(n + 1)
            .iter()
            .map(|c| c / lead)
            .collect();
        let d = num[0];
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, 1);
        let mut c = DMatrix::zeros(1, n);
        if n > 0 {
            for i in 0..n - 1 {
                a[(i, i + 1)] = 1.0;
            }
            for j in 0..n {
                // state x_j is the (j)-th derivative of the internal variable
                a[(n - 1, j)] = -den[n - j];
                c[(0, j)] = num[n - j] - den[n - j] * d;
            }
            b[(n - 1, 0)] = 1.0;
        }
        StateSpace {
            a,
            b,
            c,
            d: DMatrix::from_element(1, 1, d),
        }
    }
}

impl fmt::Display for TransferFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}) / ({})", self.num, self.den)
    }
}

/// `Q = A L + B F`, the closed-loop characteristic polynomial.
pub fn closed_loop_char(
    a: &Polynomial,
    b: &Polynomial,
    l: &Polynomial,
    f: &Polynomial,
) -> Polynomial {
    &(a * l) + &(b * f)
}

/// The four closed-loop transfer functions over the common denominator `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivitySet {
    /// `1 / (1 + GC)`
    pub s: TransferFunction,
    /// `C / (1 + GC)`
    pub cs: TransferFunction,
    /// `G / (1 + GC)`
    pub gs: TransferFunction,
    /// `GC / (1 + GC)`
    pub gcs: TransferFunction,
}

impl SensitivitySet {
    pub fn denominator(&self) -> &Polynomial {
        self.s.den()
    }
}

pub fn sensitivities(g: &TransferFunction, c: &TransferFunction) -> Result<SensitivitySet> {
    let (b, a) = (g.num(), g.den());
    let (f, l) = (c.num(), c.den());
    let q = closed_loop_char(a, b, l, f);
    if q.is_zero() {
        return Err(Error::InvalidArgument(
            "1 + GC is identically zero".into(),
        ));
    }
    Ok(SensitivitySet {
        s: TransferFunction::new(a * l, q.clone())?,
        cs: TransferFunction::new(a * f, q.clone())?,
        gs: TransferFunction::new(b * l, q.clone())?,
        gcs: TransferFunction::new(b * f, q)?,
    })
}

/// `p^i * extra_num / den`, failing when the result is improper.
pub fn derivative_filter(
    i: usize,
    extra_num: &Polynomial,
    den: &Polynomial,
) -> Result<TransferFunction> {
    TransferFunction::new(extra_num.shift(i), den.clone())
}

/// Continuous-time state-space model `x' = Ax + Bw`, `y = Cx + Dw`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl StateSpace {
    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    /// Feeds output `row` into the single-input `filter` and returns the
    /// system whose outputs are the filter outputs.
    pub fn cascade(&self, row: usize, filter: &StateSpace) -> StateSpace {
        let (n, nf, k, q) = (self.states(), filter.states(), self.inputs(), filter.outputs());
        let c_row = self.c.rows(row, 1).into_owned();
        let d_row = self.d.rows(row, 1).into_owned();
        let bf = filter.b.column(0).into_owned();
        let df = filter.d.column(0).into_owned();

        let mut a = DMatrix::zeros(n + nf, n + nf);
        a.view_mut((0, 0), (n, n)).copy_from(&self.a);
        a.view_mut((n, 0), (nf, n)).copy_from(&(&bf * &c_row));
        a.view_mut((n, n), (nf, nf)).copy_from(&filter.a);

        let mut b = DMatrix::zeros(n + nf, k);
        b.view_mut((0, 0), (n, k)).copy_from(&self.b);
        b.view_mut((n, 0), (nf, k)).copy_from(&(&bf * &d_row));

        let mut c = DMatrix::zeros(q, n + nf);
        c.view_mut((0, 0), (q, n)).copy_from(&(&df * &c_row));
        c.view_mut((0, n), (q, nf)).copy_from(&filter.c);

        StateSpace {
            a,
            b,
            c,
            d: &df * &d_row,
        }
    }

    /// Single-input realisation of several numerators over one denominator;
    /// output `i` realises `nums[i] / den`.
    pub fn filter_bank(nums: &[Polynomial], den: &Polynomial) -> Result<StateSpace> {
        if nums.is_empty() {
            return Err(Error::InvalidArgument("empty filter bank".into()));
        }
        let rows: Vec<StateSpace> = nums
            .iter()
            .map(|num| Ok(TransferFunction::new(num.clone(), den.clone())?.to_state_space()))
            .collect::<Result<_>>()?;
        let n = rows[0].states();
        let mut c = DMatrix::zeros(rows.len(), n);
        let mut d = DMatrix::zeros(rows.len(), 1);
        for (i, r) in rows.iter().enumerate() {
            c.set_row(i, &r.c.row(0));
            d[(i, 0)] = r.d[(0, 0)];
        }
        Ok(StateSpace {
            a: rows[0].a.clone(),
            b: rows[0].b.clone(),
            c,
            d,
        })
    }

    /// Exact discretization with one hold per input channel.
    pub fn discretize(&self, period: f64, holds: &[Hold]) -> Result<DiscreteStateSpace> {
        discretize_state_space(self, period, holds)
    }
}

/// Causal discrete state-space model `x+ = Phi x + Gamma w`, `y = Cx + Dw`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStateSpace {
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Initial state per unit first input sample. Zero except for FOH
    /// channels, whose shifted state starts at `-G1 w_0` so that the
    /// continuous state is zero at `t = 0`.
    pub x0: DMatrix<f64>,
    pub period: f64,
}

fn check_period(period: f64) -> Result<()> {
    if !(period.is_finite() && period > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sampling period must be positive, got {period}"
        )));
    }
    Ok(())
}

/// Hold-equivalent discretization of `ss` at `period`.
///
/// For an FOH input the exact update needs the next sample, `x+ = Phi x +
/// G0 w + G1 w+`; the state is shifted by `G1 w` to obtain a causal model.
pub fn discretize_state_space(
    ss: &StateSpace,
    period: f64,
    holds: &[Hold],
) -> Result<DiscreteStateSpace> {
    check_period(period)?;
    let (n, k) = (ss.states(), ss.inputs());
    if holds.len() != k {
        return Err(Error::Dimension(format!(
            "{} holds for {k} inputs",
            holds.len()
        )));
    }
    if n == 0 {
        return Ok(DiscreteStateSpace {
            phi: DMatrix::zeros(0, 0),
            gamma: DMatrix::zeros(0, k),
            c: DMatrix::zeros(ss.outputs(), 0),
            d: ss.d.clone(),
            x0: DMatrix::zeros(0, k),
            period,
        });
    }
    let dim = n + 2 * k;
    let mut m = DMatrix::zeros(dim, dim);
    m.view_mut((0, 0), (n, n)).copy_from(&(&ss.a * period));
    m.view_mut((0, n), (n, k)).copy_from(&(&ss.b * period));
    for i in 0..k {
        m[(n + i, n + k + i)] = 1.0;
    }
    // exp(M) with the time scaling folded into A and B: the ramp block
    // yields the integral of e^{A(h-s)} B s/h ds directly.
    let e = m.exp();
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix exponential"));
    }
    let phi = e.view((0, 0), (n, n)).into_owned();
    let g_const = e.view((0, n), (n, k)).into_owned();
    let g_ramp = e.view((0, n + k), (n, k)).into_owned();

    let mut g0 = DMatrix::zeros(n, k);
    let mut g1 = DMatrix::zeros(n, k);
    for (i, hold) in holds.iter().enumerate() {
        match hold {
            Hold::Zoh => g0.set_column(i, &g_const.column(i)),
            Hold::Foh => {
                g0.set_column(i, &(g_const.column(i) - g_ramp.column(i)));
                g1.set_column(i, &g_ramp.column(i));
            }
        }
    }
    let gamma = &phi * &g1 + g0;
    let d = &ss.c * &g1 + &ss.d;
    Ok(DiscreteStateSpace {
        phi,
        gamma,
        c: ss.c.clone(),
        d,
        x0: -g1,
        period,
    })
}

impl DiscreteStateSpace {
    pub fn states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.d.nrows()
    }

    /// Zero-state response. `inputs[j]` is the sequence on input channel `j`;
    /// the result holds one sequence per output.
    pub fn simulate(&self, inputs: &[&[f64]]) -> Vec<Vec<f64>> {
        let (n, k, p) = (self.states(), self.inputs(), self.outputs());
        assert_eq!(inputs.len(), k, "input channel count");
        let len = inputs.first().map_or(0, |s| s.len());
        assert!(inputs.iter().all(|s| s.len() == len), "ragged inputs");

        let phi = row_major(&self.phi);
        let gamma = row_major(&self.gamma);
        let c = row_major(&self.c);
        let d = row_major(&self.d);
        let mut x = vec![0.0; n];
        if len > 0 {
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = (0..k).map(|j| self.x0[(i, j)] * inputs[j][0]).sum();
            }
        }
        let mut next = vec![0.0; n];
        let mut w = vec![0.0; k];
        let mut out = vec![Vec::with_capacity(len); p];

        for t in 0..len {
            for (j, s) in inputs.iter().enumerate() {
                w[j] = s[t];
            }
            for (r, o) in out.iter_mut().enumerate() {
                let mut y = dot(&c[r * n..(r + 1) * n], &x);
                y += dot(&d[r * k..(r + 1) * k], &w);
                o.push(y);
            }
            for i in 0..n {
                next[i] = dot(&phi[i * n..(i + 1) * n], &x) + dot(&gamma[i * k..(i + 1) * k], &w);
            }
            std::mem::swap(&mut x, &mut next);
        }
        out
    }

    pub fn spectral_radius(&self) -> f64 {
        if self.states() == 0 {
            return 0.0;
        }
        self.phi
            .complex_eigenvalues()
            .iter()
            .fold(0.0f64, |m, z| m.max(z.norm()))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// SISO discrete filter obtained by hold-equivalent discretization.
///
/// Carries its own state for sample-by-sample use; clones are independent.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteFilter {
    sys: DiscreteStateSpace,
    hold: Hold,
    state: Vec<f64>,
    started: bool,
}

impl DiscreteFilter {
    fn from_system(sys: DiscreteStateSpace, hold: Hold) -> Self {
        let n = sys.states();
        Self {
            sys,
            hold,
            state: vec![0.0; n],
            started: false,
        }
    }

    /// Realises a filter given by coefficients in `z^-1`:
    /// `(n0 + n1 z^-1 + ...) / (d0 + d1 z^-1 + ...)`.
    pub fn from_z_coefficients(num_z: &[f64], den_z: &[f64], period: f64) -> Result<Self> {
        check_period(period)?;
        let d0 = *den_z.first().ok_or(Error::ZeroPolynomial)?;
        if d0 == 0.0 {
            return Err(Error::InvalidArgument(
                "leading denominator coefficient in z^-1 must be nonzero".into(),
            ));
        }
        let order = den_z.len().max(num_z.len()).saturating_sub(1);
        let mut den = vec![0.0; order + 1];
        let mut num = vec![0.0; order + 1];
        for (i, v) in den_z.iter().enumerate() {
            den[i] = v / d0;
        }
        for (i, v) in num_z.iter().enumerate() {
            num[i] = v / d0;
        }
        // (num, den) in z^-1 equal the descending z-power coefficients of
        // z^order * H(z), so the continuous controllable form applies verbatim.
        let ss = TransferFunction::from_coeffs(&num, &den)?.to_state_space();
        let sys = DiscreteStateSpace {
            phi: ss.a,
            gamma: ss.b,
            c: ss.c,
            d: ss.d,
            x0: DMatrix::zeros(order, 1),
            period,
        };
        Ok(Self::from_system(sys, Hold::Zoh))
    }

    pub fn system(&self) -> &DiscreteStateSpace {
        &self.sys
    }

    pub fn period(&self) -> f64 {
        self.sys.period
    }

    pub fn hold(&self) -> Hold {
        self.hold
    }

    pub fn order(&self) -> usize {
        self.sys.states()
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|s| *s = 0.0);
        self.started = false;
    }

    /// Direct feedthrough from the current input sample.
    pub fn feedthrough(&self) -> f64 {
        self.sys.d[(0, 0)]
    }

    /// Output contribution of the current state alone.
    pub fn free_output(&self) -> f64 {
        (0..self.order())
            .map(|j| self.sys.c[(0, j)] * self.state[j])
            .sum()
    }

    /// Advances one sample and returns the output for input `u`.
    pub fn step(&mut self, u: f64) -> f64 {
        if !self.started {
            for (i, s) in self.state.iter_mut().enumerate() {
                *s = self.sys.x0[(i, 0)] * u;
            }
            self.started = true;
        }
        let y = self.free_output() + self.feedthrough() * u;
        let n = self.order();
        let next: Vec<f64> = (0..n)
            .map(|i| {
                (0..n).map(|j| self.sys.phi[(i, j)] * self.state[j]).sum::<f64>()
                    + self.sys.gamma[(i, 0)] * u
            })
            .collect();
        self.state = next;
        y
    }

    /// Zero-state response to a whole sequence; the filter's own state is
    /// left untouched.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.sys
            .simulate(&[x])
            .pop()
            .expect("single-output filter")
    }

    /// Coefficients of the transfer function in `z^-1`, with `den_z[0] = 1`.
    pub fn transfer_coefficients(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.order();
        let phi = &self.sys.phi;
        let gamma = self.sys.gamma.column(0).into_owned();
        let c = self.sys.c.row(0).into_owned();
        let d = self.feedthrough();
        // Faddeev-LeVerrier: adj(zI - Phi) = sum_k M_k z^(n-1-k)
        let mut den = vec![1.0; n + 1];
        let mut num = vec![0.0; n + 1];
        num[0] = d;
        let mut mk = DMatrix::<f64>::identity(n, n);
        for k in 1..=n {
            num[k] = (&c * &mk * &gamma)[(0, 0)];
            let am = phi * &mk;
            den[k] = -am.trace() / k as f64;
            mk = am + DMatrix::identity(n, n) * den[k];
            num[k] += d * den[k];
        }
        (num, den)
    }

    /// `H_d(1)`.
    pub fn dc_gain(&self) -> f64 {
        let n = self.order();
        if n == 0 {
            return self.feedthrough();
        }
        // D + C (I - Phi)^-1 Gamma, avoiding the cancellation in the
        // polynomial coefficients when Phi is close to the identity
        let m = DMatrix::<f64>::identity(n, n) - &self.sys.phi;
        match m.lu().solve(&self.sys.gamma.columns(0, 1).into_owned()) {
            Some(x) => self.feedthrough() + (self.sys.c.rows(0, 1) * x)[(0, 0)],
            None => f64::INFINITY,
        }
    }

    pub fn poles(&self) -> Vec<Complex64> {
        if self.order() == 0 {
            return Vec::new();
        }
        self.sys.phi.complex_eigenvalues().iter().copied().collect()
    }

    pub fn is_stable(&self) -> bool {
        self.sys.spectral_radius() < 1.0
    }
}

/// Exact hold-equivalent of `tf` at `period`.
pub fn discretize(tf: &TransferFunction, period: f64, hold: Hold) -> Result<DiscreteFilter> {
    let sys = discretize_state_space(&tf.to_state_space(), period, &[hold])?;
    Ok(DiscreteFilter::from_system(sys, hold))
}

/// Applies `f` to `x` from zero initial conditions.
pub fn filter_signal(f: &DiscreteFilter, x: &SampledSignal) -> Result<SampledSignal> {
    if (f.period() - x.period()).abs() > 1e-12 * f.period() {
        return Err(Error::PeriodMismatch {
            expected: f.period(),
            found: x.period(),
        });
    }
    SampledSignal::new(f.apply(x.values()), x.period(), x.hold())
}

/// Several filters sharing one denominator, discretized as a single
/// single-input multi-output system. Each output equals the discretization
/// of the corresponding numerator over the common denominator.
#[derive(Debug, Clone)]
pub struct FilterBank {
    sys: DiscreteStateSpace,
}

impl FilterBank {
    pub fn new(nums: &[Polynomial], den: &Polynomial, period: f64, hold: Hold) -> Result<Self> {
        let ss = StateSpace::filter_bank(nums, den)?;
        Ok(Self {
            sys: discretize_state_space(&ss, period, &[hold])?,
        })
    }

    pub fn len(&self) -> usize {
        self.sys.outputs()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One output sequence per numerator.
    pub fn apply(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.sys.simulate(&[x])
    }
}

/// Matrix whose column `j` is `columns[j]`.
pub(crate) fn columns_to_matrix(columns: &[Vec<f64>]) -> DMatrix<f64> {
    let rows = columns.first().map_or(0, |c| c.len());
    DMatrix::from_fn(rows, columns.len(), |i, j| columns[j][i])
}
