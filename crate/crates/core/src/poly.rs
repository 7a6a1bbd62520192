//! Real polynomials in the differential operator `p`.
//!
//! Coefficients are stored in descending powers, so `coeffs()[0]` is the
//! leading coefficient. The zero polynomial is stored as `[0.0]`.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    /// Builds a polynomial from descending coefficients, trimming leading zeros.
    pub fn new(coeffs: impl Into<Vec<f64>>) -> Self {
        let mut coeffs = coeffs.into();
        let first = coeffs.iter().position(|&c| c != 0.0);
        match first {
            Some(i) => {
                coeffs.drain(..i);
            }
            None => coeffs = vec![0.0],
        }
        Self { coeffs }
    }

    pub fn zero() -> Self {
        Self { coeffs: vec![0.0] }
    }

    pub fn one() -> Self {
        Self::constant(1.0)
    }

    pub fn constant(c: f64) -> Self {
        Self::new(vec![c])
    }

    /// `c * p^k`.
    pub fn monomial(c: f64, k: usize) -> Self {
        let mut coeffs = vec![0.0; k + 1];
        coeffs[0] = c;
        Self::new(coeffs)
    }

    /// Monic real polynomial with the given roots. Complex roots must come in
    /// conjugate pairs; the imaginary residue of the product is discarded.
    pub fn from_roots(roots: &[Complex64]) -> Self {
        let mut acc = vec![Complex64::new(1.0, 0.0)];
        for &r in roots {
            let mut next = vec![Complex64::new(0.0, 0.0); acc.len() + 1];
            for (i, &c) in acc.iter().enumerate() {
                next[i] += c;
                next[i + 1] -= c * r;
            }
            acc = next;
        }
        Self::new(acc.into_iter().map(|c| c.re).collect::<Vec<_>>())
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    pub fn leading(&self) -> f64 {
        self.coeffs[0]
    }

    /// Value at `p = 0`.
    pub fn constant_term(&self) -> f64 {
        *self.coeffs.last().expect("nonempty")
    }

    /// Coefficients left-padded with zeros to exactly `len` entries, i.e. in
    /// the basis `[p^(len-1), ..., p, 1]`. Panics if the degree does not fit.
    pub fn coeffs_padded(&self, len: usize) -> Vec<f64> {
        if self.is_zero() {
            return vec![0.0; len];
        }
        assert!(
            self.coeffs.len() <= len,
            "degree {} does not fit in {len} coefficients",
            self.degree()
        );
        let mut out = vec![0.0; len - self.coeffs.len()];
        out.extend_from_slice(&self.coeffs);
        out
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn eval_complex(&self, z: Complex64) -> Complex64 {
        self.coeffs
            .iter()
            .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.coeffs.iter().map(|c| c * s).collect::<Vec<_>>())
    }

    /// Multiplies by `p^k`.
    pub fn shift(&self, k: usize) -> Self {
        if self.is_zero() {
            return Self::zero();
        }
        let mut coeffs = self.coeffs.clone();
        coeffs.extend(std::iter::repeat_n(0.0, k));
        Self { coeffs }
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// Drops leading coefficients whose magnitude is below `tol` times the
    /// largest coefficient magnitude.
    pub fn trim(&self, tol: f64) -> Self {
        let max = self.coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let first = self.coeffs.iter().position(|c| c.abs() > tol * max);
        match first {
            Some(i) => Self::new(self.coeffs[i..].to_vec()),
            None => Self::zero(),
        }
    }

    /// Exact combination of two polynomials.
    pub fn arith(&self, other: &Polynomial, op: ArithOp) -> Polynomial {
        match op {
            ArithOp::Add => self + other,
            ArithOp::Sub => self - other,
            ArithOp::Mul => self * other,
        }
    }

    /// All complex roots with multiplicity, from the eigenvalues of the
    /// companion matrix. A nonzero constant has no roots.
    pub fn roots(&self) -> Result<Vec<Complex64>> {
        if self.is_zero() {
            return Err(Error::ZeroPolynomial);
        }
        let n = self.degree();
        if n == 0 {
            return Ok(Vec::new());
        }
        let lead = self.leading();
        let mut companion = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            companion[(0, j)] = -self.coeffs[j + 1] / lead;
        }
        for i in 1..n {
            companion[(i, i - 1)] = 1.0;
        }
        let eig = companion.complex_eigenvalues();
        Ok(eig.iter().copied().collect())
    }

    /// True iff every root has real part strictly less than `-margin`.
    pub fn is_hurwitz(&self, margin: f64) -> Result<bool> {
        Ok(self.roots()?.iter().all(|r| r.re < -margin))
    }

    /// Largest real part over all roots (`-inf` for a nonzero constant).
    pub fn spectral_abscissa(&self) -> Result<f64> {
        Ok(self
            .roots()?
            .iter()
            .fold(f64::NEG_INFINITY, |m, r| m.max(r.re)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

fn add_aligned(a: &[f64], b: &[f64], sign: f64) -> Polynomial {
    let len = a.len().max(b.len());
    let mut out = vec![0.0; len];
    for (i, &c) in a.iter().enumerate() {
        out[len - a.len() + i] += c;
    }
    for (i, &c) in b.iter().enumerate() {
        out[len - b.len() + i] += sign * c;
    }
    Polynomial::new(out)
}

impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        add_aligned(&self.coeffs, &rhs.coeffs, 1.0)
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        add_aligned(&self.coeffs, &rhs.coeffs, -1.0)
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        if self.is_zero() || rhs.is_zero() {
            return Polynomial::zero();
        }
        let mut out = vec![0.0; self.coeffs.len() + rhs.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            for (j, &b) in rhs.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Polynomial::new(out)
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

macro_rules! forward_owned {
    ($tr:ident, $m:ident) => {
        impl $tr for Polynomial {
            type Output = Polynomial;
            fn $m(self, rhs: Polynomial) -> Polynomial {
                (&self).$m(&rhs)
            }
        }
        impl $tr<&Polynomial> for Polynomial {
            type Output = Polynomial;
            fn $m(self, rhs: &Polynomial) -> Polynomial {
                (&self).$m(rhs)
            }
        }
        impl $tr<Polynomial> for &Polynomial {
            type Output = Polynomial;
            fn $m(self, rhs: Polynomial) -> Polynomial {
                self.$m(&rhs)
            }
        }
    };
}

forward_owned!(Add, add);
forward_owned!(Sub, sub);
forward_owned!(Mul, mul);

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.degree();
        let mut first = true;
        for (i, &c) in self.coeffs.iter().enumerate() {
            if c == 0.0 && !(first && i == n) {
                continue;
            }
            let k = n - i;
            if !first {
                f.write_str(if c < 0.0 { " - " } else { " + " })?;
            } else if c < 0.0 {
                f.write_str("-")?;
            }
            let mag = c.abs();
            match k {
                0 => write!(f, "{mag}")?,
                1 => write!(f, "{mag}p")?,
                _ => write!(f, "{mag}p^{k}")?,
            }
            first = false;
        }
        Ok(())
    }
}

/// Resultant of `a` and `b` as the determinant of their classical
/// `(deg a + deg b)`-square Sylvester matrix.
pub fn resultant(a: &Polynomial, b: &Polynomial) -> f64 {
    let (da, db) = (a.degree(), b.degree());
    let dim = da + db;
    if dim == 0 {
        return 1.0;
    }
    let mut s = DMatrix::<f64>::zeros(dim, dim);
    for row in 0..db {
        for (j, &c) in a.coeffs().iter().enumerate() {
            s[(row, row + j)] = c;
        }
    }
    for row in 0..da {
        for (j, &c) in b.coeffs().iter().enumerate() {
            s[(db + row, row + j)] = c;
        }
    }
    s.determinant()
}

/// Coprimeness test on the resultant scaled by `|a|^deg b * |b|^deg a`.
///
/// Returns false if either polynomial is zero.
pub fn coprime(a: &Polynomial, b: &Polynomial, tol: f64) -> bool {
    if a.is_zero() || b.is_zero() {
        return false;
    }
    if a.degree() == 0 || b.degree() == 0 {
        return true;
    }
    let scale = a.norm().powi(b.degree() as i32) * b.norm().powi(a.degree() as i32);
    (resultant(a, b) / scale).abs() > tol
}

pub const DEFAULT_COPRIME_TOL: f64 = 1e-8;

/// The square matrix `S(-B, A)` of dimension `n + m + 1`.
///
/// Row `i` (0-based, `i < n`) holds the coefficients of `-p^(n-i) B(p)` and row
/// `n + j` (`j <= m`) those of `p^(m-j) A(p)`, both in the basis
/// `[p^(n+m), ..., p, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SylvesterMatrix {
    entries: DMatrix<f64>,
    n: usize,
    m: usize,
}

impl SylvesterMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.n + self.m + 1
    }

    pub fn determinant(&self) -> f64 {
        self.entries.determinant()
    }

    /// Determinant after normalising every row to unit 2-norm.
    pub fn scaled_determinant(&self) -> f64 {
        let mut s = self.entries.clone();
        for mut row in s.row_iter_mut() {
            let norm = row.norm();
            if norm > 0.0 {
                row /= norm;
            }
        }
        s.determinant()
    }
}

pub fn sylvester(b: &Polynomial, a: &Polynomial, n: usize, m: usize) -> Result<SylvesterMatrix> {
    if a.is_zero() || a.degree() != n {
        return Err(Error::Dimension(format!(
            "sylvester: deg A = {} but n = {n}",
            a.degree()
        )));
    }
    if a.constant_term() == 0.0 {
        return Err(Error::InvalidArgument(
            "sylvester: A must have a nonzero constant term".into(),
        ));
    }
    if !b.is_zero() && b.degree() > m {
        return Err(Error::Dimension(format!(
            "sylvester: deg B = {} exceeds m = {m}",
            b.degree()
        )));
    }
    let dim = n + m + 1;
    let mut s = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        let row = (-b).shift(n - i).coeffs_padded(dim);
        s.row_mut(i).copy_from_slice(&row);
    }
    for j in 0..=m {
        let row = a.shift(m - j).coeffs_padded(dim);
        s.row_mut(n + j).copy_from_slice(&row);
    }
    Ok(SylvesterMatrix { entries: s, n, m })
}
