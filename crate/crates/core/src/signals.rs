//! Sampled sequences, reference and noise generators, and the excitation
//! order check for references.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use crate::lti::Hold;
use crate::error::{Error, Result};
use crate::lti::DiscreteFilter;

/// Uniformly sampled real sequence with its intersample behaviour.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSignal {
    values: Vec<f64>,
    period: f64,
    hold: Hold,
}

impl SampledSignal {
    pub fn new(values: Vec<f64>, period: f64, hold: Hold) -> Result<Self> {
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sampling period must be positive, got {period}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("signal values"));
        }
        Ok(Self {
            values,
            period,
            hold,
        })
    }

    pub fn zeros(n: usize, period: f64, hold: Hold) -> Result<Self> {
        Self::new(vec![0.0; n], period, hold)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn hold(&self) -> Hold {
        self.hold
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_hold(mut self, hold: Hold) -> Self {
        self.hold = hold;
        self
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            values: self.values[..n.min(self.len())].to_vec(),
            period: self.period,
            hold: self.hold,
        }
    }

    pub fn mean_square(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|v| v * v).sum::<f64>() / self.len() as f64
    }

    /// Writes `t,value` CSV with 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "value"])?;
        for (k, v) in self.values.iter().enumerate() {
            w.write_record([fmt_f64(k as f64 * self.period), fmt_f64(*v)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `t,value` CSV. The period is taken from the first two time
    /// stamps (a single row needs `fallback_period`).
    pub fn read_csv<R: Read>(reader: R, hold: Hold, fallback_period: Option<f64>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "value" {
            return Err(Error::InvalidArgument(format!(
                "expected header 't,value', found '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::InvalidArgument(format!("row {}: {e}", line + 2))
                })
            };
            times.push(parse(&rec[0])?);
            values.push(parse(&rec[1])?);
        }
        let period = match (times.len(), fallback_period) {
            (n, _) if n >= 2 => times[1] - times[0],
            (_, Some(p)) => p,
            _ => {
                return Err(Error::InvalidArgument(
                    "cannot infer sampling period from fewer than two rows".into(),
                ))
            }
        };
        Self::new(values, period, hold)
    }
}

/// Full-precision decimal rendering used by every CSV writer.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Sum of sinusoids sampled at `period`: `sum_i amps[i] sin(freqs[i] k period + phases[i])`.
pub fn gen_multisine(
    freqs: &[f64],
    amps: &[f64],
    phases: &[f64],
    n: usize,
    period: f64,
) -> Result<SampledSignal> {
    if freqs.len() != amps.len() || freqs.len() != phases.len() {
        return Err(Error::Dimension(format!(
            "multisine: {} frequencies, {} amplitudes, {} phases",
            freqs.len(),
            amps.len(),
            phases.len()
        )));
    }
    let nyquist = std::f64::consts::PI / period;
    if let Some(f) = freqs.iter().find(|f| f.abs() >= nyquist) {
        return Err(Error::InvalidArgument(format!(
            "multisine frequency {f} rad/s is not below the Nyquist frequency {nyquist} rad/s"
        )));
    }
    let values = (0..n)
        .map(|k| {
            let t = k as f64 * period;
            freqs
                .iter()
                .zip(amps)
                .zip(phases)
                .map(|((w, a), ph)| a * (w * t + ph).sin())
                .sum()
        })
        .collect();
    SampledSignal::new(values, period, Hold::Zoh)
}

/// Random levels, each held for `dwell` samples.
pub fn gen_piecewise_constant(
    levels: &[f64],
    dwell: usize,
    n: usize,
    seed: u64,
    period: f64,
) -> Result<SampledSignal> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("no levels given".into()));
    }
    if dwell == 0 {
        return Err(Error::InvalidArgument("dwell must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n);
    while values.len() < n {
        let level = levels[rng.random_range(0..levels.len())];
        let take = dwell.min(n - values.len());
        values.extend(std::iter::repeat_n(level, take));
    }
    SampledSignal::new(values, period, Hold::Zoh)
}

/// Zero-mean Gaussian white sequence.
pub fn gen_white_noise(variance: f64, n: usize, seed: u64, period: f64) -> Result<SampledSignal> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be nonnegative, got {variance}"
        )));
    }
    if variance == 0.0 {
        return SampledSignal::zeros(n, period, Hold::Zoh);
    }
    let normal = Normal::new(0.0, variance.sqrt())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n).map(|_| normal.sample(&mut rng)).collect();
    SampledSignal::new(values, period, Hold::Zoh)
}

/// White noise of the given variance passed through a stable discrete
/// shaping filter.
pub fn gen_colored_noise(
    variance: f64,
    shaping: &DiscreteFilter,
    n: usize,
    seed: u64,
) -> Result<SampledSignal> {
    if !shaping.is_stable() {
        return Err(Error::InvalidArgument("noise shaping filter is unstable".into()));
    }
    let white = gen_white_noise(variance, n, seed, shaping.period())?;
    SampledSignal::new(shaping.apply(white.values()), shaping.period(), Hold::Zoh)
}

pub const DEFAULT_RANK_TOL: f64 = 1e-6;

/// Excitation order with the default relative rank tolerance.
pub fn excitation_order(x: &SampledSignal, max_order: usize) -> Result<usize> {
    excitation_order_with_tol(x, max_order, DEFAULT_RANK_TOL)
}

/// Largest `q <= max_order` for which the `q x q` lagged autocorrelation
/// matrix has every eigenvalue above `rank_tol` times its largest.
///
/// The matrix is the (non-centred) sample covariance of the lag vectors
/// `[x(t), ..., x(t - q + 1)]` over a common window, so a sum of `k`
/// sinusoids yields rank exactly `2k` up to round-off.
pub fn excitation_order_with_tol(x: &SampledSignal, max_order: usize, rank_tol: f64) -> Result<usize> {
    let required = 10 * max_order.max(1);
    if x.len() < required {
        return Err(Error::SignalTooShort {
            len: x.len(),
            required,
        });
    }
    let v = x.values();
    let q = max_order;
    let start = q.saturating_sub(1);
    let count = (v.len() - start) as f64;
    let mut r = DMatrix::<f64>::zeros(q, q);
    for i in 0..q {
        for j in i..q {
            let s: f64 = (start..v.len()).map(|t| v[t - i] * v[t - j]).sum();
            r[(i, j)] = s / count;
            r[(j, i)] = s / count;
        }
    }
    let mut order = 0;
    for k in 1..=q {
        let eig = r.view((0, 0), (k, k)).into_owned().symmetric_eigenvalues();
        let max = eig.max();
        let min = eig.min();
        if max > 0.0 && min > rank_tol * max {
            order = k;
        } else {
            break;
        }
    }
    Ok(order)
}
