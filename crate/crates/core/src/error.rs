use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown link `{0}`")]
    UnknownLink(String),

    #[error("unknown joint `{0}`")]
    UnknownJoint(String),

    #[error("unknown group `{0}`")]
    UnknownGroup(String),

    #[error("invalid robot model: {0}")]
    InvalidModel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// Damped least squares did not reach the tolerances. `pass` is 1 or 2 for the
    /// two passes of the rhythm solver, 0 for a plain fixed-scapula solve.
    #[error(
        "IK did not converge (pass {pass}) after {iterations} iterations: \
         position error {position_error:.3e} m, rotation error {rotation_error:.3e} rad"
    )]
    IkNoConvergence {
        pass: u8,
        iterations: usize,
        position_error: f64,
        rotation_error: f64,
    },

    #[error("muscle-length inversion did not converge: residual {residual_deg:.3} deg")]
    InversionNoConvergence { residual_deg: f64 },

    #[error("joint target for `{joint}` ({value_deg:.2} deg) is outside its limits")]
    TargetOutOfLimits { joint: String, value_deg: f64 },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("plant did not settle within {iterations} iterations")]
    NoSettle { iterations: usize },

    #[error("marker `{0}` is not visible")]
    MarkerNotVisible(String),

    #[error("mapping layout hash mismatch: expected {expected}, found {found}")]
    LayoutMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
