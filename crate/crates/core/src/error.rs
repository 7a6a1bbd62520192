use std::fmt;

/// One of the six standing assumptions an experiment must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Assumption {
    A1,
    A2,
    A3,
    A4,
    A5,
    A6,
}

impl Assumption {
    pub const ALL: [Assumption; 6] = [
        Assumption::A1,
        Assumption::A2,
        Assumption::A3,
        Assumption::A4,
        Assumption::A5,
        Assumption::A6,
    ];
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Assumption::A1 => "A1",
            Assumption::A2 => "A2",
            Assumption::A3 => "A3",
            Assumption::A4 => "A4",
            Assumption::A5 => "A5",
            Assumption::A6 => "A6",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("polynomial is identically zero")]
    ZeroPolynomial,

    #[error("improper transfer function: numerator degree {num} exceeds denominator degree {den}")]
    Improper { num: usize, den: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("sampling period mismatch: {expected} s vs {found} s")]
    PeriodMismatch { expected: f64, found: f64 },

    #[error("closed loop is unstable: {0}")]
    UnstableClosedLoop(String),

    #[error("assumption {assumption} violated: {detail}")]
    AssumptionViolated { assumption: Assumption, detail: String },

    #[error(
        "normal matrix is singular or ill-conditioned (condition number {condition:.3e}); \
         the reference may lack persistent excitation (A3) or the interpolation \
         error may be too large relative to the instrument correlation"
    )]
    SingularNormalMatrix { condition: f64 },

    #[error("could not stabilise model parameters: {0}")]
    Stabilization(String),

    #[error("signal too short: {len} samples, need at least {required}")]
    SignalTooShort { len: usize, required: usize },

    /// `line` is 1-based; 0 marks a problem with the file as a whole.
    #[error("config{}: {message}", line_label(*.line))]
    Config { line: usize, message: String },

    #[error("{0}")]
    ConvergenceBudget(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn line_label(line: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!(" line {line}")
    }
}

pub type Result<T> = std::result::Result<T, Error>;
