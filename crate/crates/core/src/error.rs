use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("chart amplitude A={0} outside [0, 1)")]
    InvalidAmplitude(f64),
    #[error("chart inversion did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },
    #[error("chart Jacobian is singular at (t, x) = ({0}, {1})")]
    SingularJacobian(f64, f64),
    #[error("worldline x={0} is not static in the eta frame")]
    UnsupportedWorldline(f64),
    #[error("lattice: {0}")]
    Lattice(String),
    #[error("window: {0}")]
    Window(String),
    #[error("frame mismatch: expected {expected}, found {found}")]
    FrameMismatch { expected: String, found: String },
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("covariance is not positive definite: {0}")]
    NotPositive(String),
    #[error("uncertainty relation violated: smallest symplectic eigenvalue {0:e}")]
    Uncertainty(f64),
    #[error("time step {dt:e} unstable: dt * omega_max = {product:.4} >= 2")]
    Cfl { dt: f64, product: f64 },
    #[error("propagator symplectic defect {defect:e} exceeds {tol:e}")]
    SymplecticDefect { defect: f64, tol: f64 },
    #[error("time mismatch: state at {state}, requested {requested}")]
    TimeMismatch { state: f64, requested: f64 },
    #[error("measurement: {0}")]
    Measurement(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
