use std::fmt;

/// Errors from grid construction, problem evaluation, and the τ-integration loop.
#[derive(Debug, Clone, PartialEq)]
pub enum VemError {
    /// Grid construction rejected (non-increasing interval or too few nodes).
    InvalidGrid(String),
    /// An operand's dimensions do not match what the operation expects.
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },
    /// A user-supplied callable produced a non-finite value.
    Evaluation {
        context: String,
        node: Option<usize>,
        tau: Option<f64>,
    },
    /// Explicit step size collapsed below the representable floor; the flow
    /// is most likely stiff and should be integrated with the stiff method.
    StiffnessSuspected { dtau: f64 },
    /// The implicit stepper could not complete a step.
    StepFailed { reason: String, dtau: f64 },
    /// The monitored functional rose far beyond the allowed slack, which
    /// signals a defect in the assembled flow rather than integration noise.
    DescentViolation { tau: f64, rise: f64, functional: f64 },
    /// API misuse, e.g. requesting the terminal-time rate of a fixed-horizon
    /// problem.
    Usage(String),
}

impl fmt::Display for VemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidGrid(msg) => write!(f, "invalid grid: {msg}"),
            Self::Dimension {
                context,
                expected,
                got,
            } => write!(f, "dimension mismatch in {context}: expected {expected}, got {got}"),
            Self::Evaluation { context, node, tau } => {
                write!(f, "non-finite evaluation of {context}")?;
                if let Some(i) = node {
                    write!(f, " at node {i}")?;
                }
                if let Some(t) = tau {
                    write!(f, " (tau = {t})")?;
                }
                Ok(())
            }
            Self::StiffnessSuspected { dtau } => write!(
                f,
                "step size underflow (dtau = {dtau:e}); the flow appears stiff, \
                 retry with the implicit method"
            ),
            Self::StepFailed { reason, dtau } => {
                write!(f, "implicit step failed at dtau = {dtau:e}: {reason}")
            }
            Self::DescentViolation {
                tau,
                rise,
                functional,
            } => write!(
                f,
                "monitored functional rose by {rise:e} at tau = {tau} (value {functional}); \
                 this signals a flow assembly defect"
            ),
            Self::Usage(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for VemError {}

pub type Result<T> = std::result::Result<T, VemError>;
