//! Exact sampled-data simulation of the closed loop.
//!
//! Every external input (reference and output disturbance) is a held
//! sequence, so the continuous loop between two samples is a linear system
//! driven by constant or linear inputs and is propagated by a matrix
//! exponential. The same augmentation gives exact "filter-then-sample"
//! responses of any proper filter applied to the continuous plant input or
//! output, which is what the interpolation errors compare against.

use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Assumption, Error, Result};
use crate::estimator::{check_a4, ThetaVector};
use crate::lti::{
    closed_loop_char, discretize, DiscreteFilter, DiscreteStateSpace, FilterBank, Hold,
    StateSpace, TransferFunction,
};
use crate::poly::{coprime, Polynomial, DEFAULT_COPRIME_TOL};
use crate::signals::{fmt_f64, SampledSignal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    /// `C(p)` acts on the continuous plant output.
    Continuous,
    /// A discrete controller acts on the output samples and its output is
    /// applied to the plant through a zero-order hold.
    DiscreteWithHold,
}

impl FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "continuous" => Ok(ControllerKind::Continuous),
            "discrete_zoh" | "discrete" => Ok(ControllerKind::DiscreteWithHold),
            other => Err(Error::InvalidArgument(format!(
                "unknown controller kind '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControllerKind::Continuous => "continuous",
            ControllerKind::DiscreteWithHold => "discrete_zoh",
        })
    }
}

/// Signal inside the loop that a filter is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    /// Plant input.
    U,
    /// Plant output, including the disturbance.
    Y,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopSystem {
    plant: TransferFunction,
    controller: TransferFunction,
    kind: ControllerKind,
    period: f64,
    reference_hold: Hold,
    noise_hold: Hold,
    discrete_controller: Option<DiscreteFilter>,
}

impl ClosedLoopSystem {
    /// Builds the loop, rescaling the plant so that `A*(0) = 1`. For the
    /// discrete kind the controller defaults to the ZOH equivalent of `C`.
    pub fn new(
        plant: TransferFunction,
        controller: TransferFunction,
        kind: ControllerKind,
        period: f64,
    ) -> Result<Self> {
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sampling period must be positive, got {period}"
            )));
        }
        let a0 = plant.den().constant_term();
        if a0 == 0.0 {
            return Err(Error::InvalidArgument(
                "plant denominator must have a nonzero constant term".into(),
            ));
        }
        let plant = TransferFunction::new(plant.num().scale(1.0 / a0), plant.den().scale(1.0 / a0))?;
        let discrete_controller = match kind {
            ControllerKind::Continuous => None,
            ControllerKind::DiscreteWithHold => Some(discretize(&controller, period, Hold::Zoh)?),
        };
        Ok(Self {
            plant,
            controller,
            kind,
            period,
            reference_hold: Hold::Zoh,
            noise_hold: Hold::Zoh,
            discrete_controller,
        })
    }

    pub fn with_reference_hold(mut self, hold: Hold) -> Self {
        self.reference_hold = hold;
        self
    }

    pub fn with_noise_hold(mut self, hold: Hold) -> Self {
        self.noise_hold = hold;
        self
    }

    /// Replaces the discrete controller (only meaningful for the discrete kind).
    pub fn with_discrete_controller(mut self, controller: DiscreteFilter) -> Result<Self> {
        if (controller.period() - self.period).abs() > 1e-12 * self.period {
            return Err(Error::PeriodMismatch {
                expected: self.period,
                found: controller.period(),
            });
        }
        self.kind = ControllerKind::DiscreteWithHold;
        self.discrete_controller = Some(controller);
        Ok(self)
    }

    /// Same loop with the other controller implementation.
    pub fn with_kind(&self, kind: ControllerKind) -> Result<Self> {
        Ok(Self::new(self.plant.clone(), self.controller.clone(), kind, self.period)?
            .with_reference_hold(self.reference_hold)
            .with_noise_hold(self.noise_hold))
    }

    pub fn plant(&self) -> &TransferFunction {
        &self.plant
    }

    pub fn controller(&self) -> &TransferFunction {
        &self.controller
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn reference_hold(&self) -> Hold {
        self.reference_hold
    }

    pub fn noise_hold(&self) -> Hold {
        self.noise_hold
    }

    pub fn discrete_controller(&self) -> Option<&DiscreteFilter> {
        self.discrete_controller.as_ref()
    }

    pub fn a_star(&self) -> &Polynomial {
        self.plant.den()
    }

    pub fn b_star(&self) -> &Polynomial {
        self.plant.num()
    }

    /// `Q* = A* L + B* F`.
    pub fn q_star(&self) -> Polynomial {
        closed_loop_char(self.a_star(), self.b_star(), self.controller.den(), self.controller.num())
    }

    /// Plant parameters in estimator ordering.
    pub fn theta_true(&self) -> ThetaVector {
        ThetaVector::from_polynomials(self.a_star(), self.b_star(), self.a_star().degree(), self.b_star().degree())
            .expect("normalised plant")
    }

    /// Checks plant/controller stability, coprimeness, properness and
    /// closed-loop stability of the continuous loop.
    pub fn check_a1(&self) -> Result<()> {
        let fail = |detail: String| {
            Err(Error::AssumptionViolated {
                assumption: Assumption::A1,
                detail,
            })
        };
        let (a, b) = (self.a_star(), self.b_star());
        if !a.is_hurwitz(0.0)? {
            return fail(format!("plant denominator {a} is not Hurwitz"));
        }
        if !coprime(a, b, DEFAULT_COPRIME_TOL) {
            return fail("plant numerator and denominator are not coprime".into());
        }
        if !self.controller.den().is_hurwitz(0.0)? {
            return fail(format!("controller denominator {} is not Hurwitz", self.controller.den()));
        }
        let q = self.q_star();
        if !q.is_hurwitz(0.0)? {
            return fail(format!("closed-loop polynomial A*L + B*F = {q} is not Hurwitz"));
        }
        Ok(())
    }

    /// Plant with inputs `[u, v]` and outputs `[u, y]`, `y = G u + v`.
    fn plant_channels(&self) -> StateSpace {
        let p = self.plant.to_state_space();
        let n = p.states();
        let mut b = DMatrix::zeros(n, 2);
        b.set_column(0, &p.b.column(0));
        let mut c = DMatrix::zeros(2, n);
        c.set_row(1, &p.c.row(0));
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, p.d[(0, 0)], 1.0]);
        StateSpace { a: p.a, b, c, d }
    }

    /// Continuous loop with inputs `[r, v]` and outputs `[u, y, y - v]`.
    fn continuous_loop(&self) -> Result<StateSpace> {
        let p = self.plant.to_state_space();
        let k = self.controller.to_state_space();
        let plant = PlantBlocks {
            a: p.a,
            bu: p.b.columns(0, 1).into_owned(),
            bv: DMatrix::zeros(self.plant.den().degree(), 1),
            c: p.c,
            du: p.d[(0, 0)],
            dv: 1.0,
        };
        let (a, b, c, d) = interconnect(&plant, &k.a, &k.b, &k.c, k.d[(0, 0)])?;
        Ok(StateSpace { a, b, c, d })
    }

    /// Discrete loop with inputs `[r, v]` and outputs `[u, y, y - v]`.
    fn discrete_loop(&self) -> Result<DiscreteStateSpace> {
        let ctrl = self
            .discrete_controller
            .as_ref()
            .expect("discrete kind carries a controller");
        let pd = self
            .plant_channels()
            .discretize(self.period, &[Hold::Zoh, self.noise_hold])?;
        let plant = PlantBlocks {
            a: pd.phi.clone(),
            bu: pd.gamma.columns(0, 1).into_owned(),
            bv: pd.gamma.columns(1, 1).into_owned(),
            c: pd.c.rows(1, 1).into_owned(),
            du: pd.d[(1, 0)],
            dv: pd.d[(1, 1)],
        };
        let ks = ctrl.system();
        let (phi, gamma, c, d) = interconnect(&plant, &ks.phi, &ks.gamma, &ks.c, ks.d[(0, 0)])?;
        // plant states come first; only the noise channel can be FOH
        let mut x0 = DMatrix::zeros(phi.nrows(), 2);
        x0.view_mut((0, 1), (pd.x0.nrows(), 1)).copy_from(&pd.x0.columns(1, 1));
        Ok(DiscreteStateSpace {
            phi,
            gamma,
            c,
            d,
            x0,
            period: self.period,
        })
    }

    fn sampled_loop(&self) -> Result<DiscreteStateSpace> {
        match self.kind {
            ControllerKind::Continuous => self
                .continuous_loop()?
                .discretize(self.period, &[self.reference_hold, self.noise_hold]),
            ControllerKind::DiscreteWithHold => self.discrete_loop(),
        }
    }

    /// Fails unless the sampled loop is asymptotically stable.
    pub fn check_stability(&self) -> Result<()> {
        match self.kind {
            ControllerKind::Continuous => {
                let q = self.q_star();
                if !q.is_hurwitz(0.0)? {
                    return Err(Error::UnstableClosedLoop(format!(
                        "A*L + B*F = {q} has roots with nonnegative real part"
                    )));
                }
            }
            ControllerKind::DiscreteWithHold => {
                let rho = self.discrete_loop()?.spectral_radius();
                if rho >= 1.0 {
                    return Err(Error::UnstableClosedLoop(format!(
                        "sampled loop has spectral radius {rho:.6}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_signal(&self, s: &SampledSignal, n: usize, what: &str) -> Result<()> {
        if (s.period() - self.period).abs() > 1e-12 * self.period {
            return Err(Error::PeriodMismatch {
                expected: self.period,
                found: s.period(),
            });
        }
        if s.len() < n {
            return Err(Error::InvalidArgument(format!(
                "{what} has {} samples, {n} requested",
                s.len()
            )));
        }
        Ok(())
    }

    /// Exact filter-then-sample responses of the filters `nums[i] / den`
    /// applied to the continuous signal on `channel`, driven by `r` and the
    /// disturbance `v` (`None` for the noise-free loop).
    pub fn filtered_channel_bank(
        &self,
        r: &SampledSignal,
        v: Option<&SampledSignal>,
        nums: &[Polynomial],
        den: &Polynomial,
        channel: Channel,
    ) -> Result<Vec<Vec<f64>>> {
        let n = r.len();
        self.check_signal(r, n, "reference")?;
        if let Some(v) = v {
            self.check_signal(v, n, "disturbance")?;
        }
        self.check_stability()?;
        let filter = StateSpace::filter_bank(nums, den)?;
        let zeros = vec![0.0; n];
        let v_vals = v.map_or(&zeros[..], |v| &v.values()[..n]);
        let row = match channel {
            Channel::U => 0,
            Channel::Y => 1,
        };
        match self.kind {
            ControllerKind::Continuous => {
                let sys = self.continuous_loop()?.cascade(row, &filter);
                let d = sys.discretize(self.period, &[self.reference_hold, self.noise_hold])?;
                Ok(d.simulate(&[r.values(), v_vals]))
            }
            ControllerKind::DiscreteWithHold => {
                // u is exactly piecewise constant; only the plant part is continuous.
                let loop_out = self.discrete_loop()?.simulate(&[r.values(), v_vals]);
                let sys = self.plant_channels().cascade(row, &filter);
                let d = sys.discretize(self.period, &[Hold::Zoh, self.noise_hold])?;
                Ok(d.simulate(&[&loop_out[0], v_vals]))
            }
        }
    }
}

/// Plant blocks for the interconnection; `y = c x + du u + dv v`.
struct PlantBlocks {
    a: DMatrix<f64>,
    bu: DMatrix<f64>,
    bv: DMatrix<f64>,
    c: DMatrix<f64>,
    du: f64,
    dv: f64,
}

type Blocks = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

/// Closes `u = r - K(y)` around the plant. Works for both derivative and
/// shift-operator models since the algebra is identical. Returns
/// `(A, B, C, D)` with inputs `[r, v]` and outputs `[u, y, y - v]`.
fn interconnect(
    plant: &PlantBlocks,
    ka: &DMatrix<f64>,
    kb: &DMatrix<f64>,
    kc: &DMatrix<f64>,
    kd: f64,
) -> Result<Blocks> {
    let (np, nc) = (plant.a.nrows(), ka.nrows());
    let denom = 1.0 + kd * plant.du;
    if denom.abs() < 1e-12 {
        return Err(Error::InvalidArgument(
            "algebraic loop is singular (1 + D_c D_p = 0)".into(),
        ));
    }
    let kappa = 1.0 / denom;
    let n = np + nc;

    // u = ux x + uw w
    let mut ux = DMatrix::zeros(1, n);
    ux.view_mut((0, 0), (1, np)).copy_from(&(&plant.c * (-kd * kappa)));
    ux.view_mut((0, np), (1, nc)).copy_from(&(kc * (-kappa)));
    let uw = DMatrix::from_row_slice(1, 2, &[kappa, -kd * plant.dv * kappa]);

    // y = yx x + yw w
    let mut yx = &ux * plant.du;
    {
        let mut v = yx.view_mut((0, 0), (1, np));
        v += &plant.c;
    }
    let mut yw = &uw * plant.du;
    yw[(0, 1)] += plant.dv;

    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, 0), (np, np)).copy_from(&plant.a);
    a.view_mut((np, np), (nc, nc)).copy_from(ka);
    {
        let mut top = a.view_mut((0, 0), (np, n));
        top += &plant.bu * &ux;
    }
    {
        let mut bottom = a.view_mut((np, 0), (nc, n));
        bottom += kb * &yx;
    }

    let mut b = DMatrix::zeros(n, 2);
    b.view_mut((0, 0), (np, 2)).copy_from(&(&plant.bu * &uw));
    {
        let mut col = b.view_mut((0, 1), (np, 1));
        col += &plant.bv;
    }
    b.view_mut((np, 0), (nc, 2)).copy_from(&(kb * &yw));

    let mut c = DMatrix::zeros(3, n);
    c.set_row(0, &ux.row(0));
    c.set_row(1, &yx.row(0));
    c.set_row(2, &yx.row(0));
    let mut d = DMatrix::zeros(3, 2);
    d.set_row(0, &uw.row(0));
    d.set_row(1, &yw.row(0));
    d.set_row(2, &yw.row(0));
    d[(2, 1)] -= 1.0;
    Ok((a, b, c, d))
}

/// Sampled loop signals on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub r: SampledSignal,
    pub u: SampledSignal,
    pub y: SampledSignal,
    /// Plant input with `v = 0`.
    pub u_star: SampledSignal,
    /// Plant output with `v = 0`.
    pub x_star: SampledSignal,
    pub v: SampledSignal,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn period(&self) -> f64 {
        self.r.period()
    }

    /// First `n` samples of every signal.
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            r: self.r.truncated(n),
            u: self.u.truncated(n),
            y: self.y.truncated(n),
            u_star: self.u_star.truncated(n),
            x_star: self.x_star.truncated(n),
            v: self.v.truncated(n),
        }
    }

    /// `t,r,u,y,u_star,x_star,v` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "r", "u", "y", "u_star", "x_star", "v"])?;
        let h = self.period();
        for k in 0..self.len() {
            w.write_record([
                fmt_f64(k as f64 * h),
                fmt_f64(self.r.values()[k]),
                fmt_f64(self.u.values()[k]),
                fmt_f64(self.y.values()[k]),
                fmt_f64(self.u_star.values()[k]),
                fmt_f64(self.x_star.values()[k]),
                fmt_f64(self.v.values()[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Simulates `n` samples of the loop driven by the held reference `r` and
/// held disturbance `v`.
pub fn simulate(
    sys: &ClosedLoopSystem,
    r: &SampledSignal,
    v: &SampledSignal,
    n: usize,
) -> Result<Dataset> {
    sys.check_signal(r, n, "reference")?;
    sys.check_signal(v, n, "disturbance")?;
    sys.check_stability()?;
    let lp = sys.sampled_loop()?;
    let r_vals = &r.values()[..n];
    let v_vals = &v.values()[..n];
    let zeros = vec![0.0; n];
    let noisy = lp.simulate(&[r_vals, v_vals]);
    let clean = lp.simulate(&[r_vals, &zeros]);
    let h = sys.period();
    let sig = |vals: Vec<f64>, hold| SampledSignal::new(vals, h, hold);
    let mut noisy = noisy.into_iter();
    let mut clean = clean.into_iter();
    let u = noisy.next().expect("u");
    let y = noisy.next().expect("y");
    let u_star = clean.next().expect("u*");
    let x_star = clean.next().expect("x*");
    Ok(Dataset {
        r: sig(r_vals.to_vec(), sys.reference_hold())?,
        u: sig(u, Hold::Zoh)?,
        y: sig(y, Hold::Zoh)?,
        u_star: sig(u_star, Hold::Zoh)?,
        x_star: sig(x_star, Hold::Zoh)?,
        v: sig(v_vals.to_vec(), sys.noise_hold())?,
    })
}

/// Exact samples of `filt` applied to the continuous noise-free `channel`.
pub fn true_filtered_derivative(
    sys: &ClosedLoopSystem,
    r: &SampledSignal,
    filt: &TransferFunction,
    channel: Channel,
) -> Result<SampledSignal> {
    let out = sys.filtered_channel_bank(r, None, &[filt.num().clone()], filt.den(), channel)?;
    SampledSignal::new(out.into_iter().next().expect("one output"), r.period(), Hold::Zoh)
}

/// Interpolation errors of the filtered derivatives.
///
/// `output` has `n + m + 1` columns: column `i < n` is the filter-then-sample
/// minus sample-then-filter difference for `p^(n-i)/A_j` on the plant output;
/// the remaining columns are zero. `input_discrepancy` holds the analogous
/// difference for `p^(m-j)/A_j` on the plant input, column `j = 0..=m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaVectors {
    pub output: DMatrix<f64>,
    pub input_discrepancy: DMatrix<f64>,
}

impl DeltaVectors {
    /// Total error carried by the noise-free regressor, i.e. regressor minus
    /// its filter-then-sample counterpart. Output entries equal `output`; the
    /// input entries are the sample-then-filter minus filter-then-sample
    /// differences (the regressor's input columns enter with a plus sign).
    pub fn regressor_error(&self) -> DMatrix<f64> {
        let mut full = self.output.clone();
        let n = full.ncols() - self.input_discrepancy.ncols();
        for j in 0..self.input_discrepancy.ncols() {
            full.set_column(n + j, &(-self.input_discrepancy.column(j)));
        }
        full
    }
}

/// Interpolation errors at model `theta_j`; `hold` is the intersample
/// behaviour assumed when filtering sampled data.
pub fn delta_vector(
    sys: &ClosedLoopSystem,
    r: &SampledSignal,
    theta_j: &ThetaVector,
    hold: Hold,
) -> Result<DeltaVectors> {
    check_a4(theta_j, sys.controller())?;
    let (n, m) = (theta_j.n(), theta_j.m());
    let aj = theta_j.a_poly();
    let len = r.len();
    let zeros = SampledSignal::zeros(len, r.period(), sys.noise_hold())?;
    let data = simulate(sys, r, &zeros, len)?;

    let y_nums: Vec<Polynomial> = (0..n).map(|i| Polynomial::monomial(1.0, n - i)).collect();
    let u_nums: Vec<Polynomial> = (0..=m).map(|j| Polynomial::monomial(1.0, m - j)).collect();

    let mut output = DMatrix::zeros(len, n + m + 1);
    if n > 0 {
        let exact = sys.filtered_channel_bank(r, None, &y_nums, &aj, Channel::Y)?;
        let sampled = FilterBank::new(&y_nums, &aj, r.period(), hold)?.apply(data.x_star.values());
        for i in 0..n {
            for k in 0..len {
                output[(k, i)] = exact[i][k] - sampled[i][k];
            }
        }
    }
    let exact = sys.filtered_channel_bank(r, None, &u_nums, &aj, Channel::U)?;
    let sampled = FilterBank::new(&u_nums, &aj, r.period(), hold)?.apply(data.u_star.values());
    let mut input_discrepancy = DMatrix::zeros(len, m + 1);
    for j in 0..=m {
        for k in 0..len {
            input_discrepancy[(k, j)] = exact[j][k] - sampled[j][k];
        }
    }
    Ok(DeltaVectors {
        output,
        input_discrepancy,
    })
}

/// `{B/A (continuous u)}(t_k) - (B/A)_d u(t_k)` for the noise-free loop.
pub fn epsilon_u(
    sys: &ClosedLoopSystem,
    r: &SampledSignal,
    theta_bar: &ThetaVector,
    hold: Hold,
) -> Result<SampledSignal> {
    check_a4(theta_bar, sys.controller())?;
    let model = TransferFunction::new(theta_bar.b_poly(), theta_bar.a_poly())?;
    let exact = true_filtered_derivative(sys, r, &model, Channel::U)?;
    let zeros = SampledSignal::zeros(r.len(), r.period(), sys.noise_hold())?;
    let data = simulate(sys, r, &zeros, r.len())?;
    let sampled = discretize(&model, r.period(), hold)?.apply(data.u_star.values());
    let values = exact
        .values()
        .iter()
        .zip(&sampled)
        .map(|(a, b)| a - b)
        .collect();
    SampledSignal::new(values, r.period(), Hold::Zoh)
}
