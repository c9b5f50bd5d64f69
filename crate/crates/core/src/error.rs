use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("conditioning event has zero mass at W={w:?}")]
    ZeroMassConditioning { w: Vec<f64> },

    #[error("positivity violated at W={w:?}: Pr(A=0|W) is zero or undefined")]
    PositivityViolation { w: Vec<f64> },

    #[error("distribution places no mass on A=1")]
    NoTreatedMass,

    #[error("support violation: {0}")]
    SupportViolation(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no untreated (A=0) rows to fit the outcome regression")]
    NoUntreatedRows,

    #[error("no treated (A=1) rows; P_n(A) is zero")]
    NoTreatedRows,

    #[error("design matrix is singular even after ridge jitter")]
    SingularDesign,

    #[error("treatment is degenerate: every row has A={0}")]
    DegenerateTreatment(u8),

    #[error("IRLS did not converge in {iterations} iterations (gradient norm {grad_norm:.3e})")]
    IrlsDivergence { iterations: usize, grad_norm: f64 },

    #[error("invalid learner spec: {0}")]
    InvalidSpec(String),

    #[error("oracle learner requires the true nuisance functions")]
    OracleUnavailable,

    #[error("no influence-function values supplied")]
    EmptyEif,

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("row {row}: treatment value '{value}' is not 0 or 1")]
    NonBinaryTreatment { row: usize, value: String },

    #[error("row {row}, column '{column}': cannot parse '{value}' as a finite number")]
    UnparseableNumber {
        row: usize,
        column: String,
        value: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable code, used in the CLI's error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ZeroMassConditioning { .. } => "zero_mass_conditioning",
            Error::PositivityViolation { .. } => "positivity_violation",
            Error::NoTreatedMass => "no_treated_mass",
            Error::SupportViolation(_) => "support_violation",
            Error::InvalidDistribution(_) => "invalid_distribution",
            Error::InvalidObservation(_) => "invalid_observation",
            Error::EmptyDataset => "empty_dataset",
            Error::NoUntreatedRows => "no_untreated_rows",
            Error::NoTreatedRows => "no_treated_rows",
            Error::SingularDesign => "singular_design",
            Error::DegenerateTreatment(_) => "degenerate_treatment",
            Error::IrlsDivergence { .. } => "irls_divergence",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::OracleUnavailable => "oracle_unavailable",
            Error::EmptyEif => "empty_eif",
            Error::Fold { source, .. } => source.code(),
            Error::MissingColumn(_) => "missing_column",
            Error::NonBinaryTreatment { .. } => "non_binary_treatment",
            Error::UnparseableNumber { .. } => "unparseable_number",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
