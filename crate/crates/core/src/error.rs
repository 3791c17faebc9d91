use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    /// A data row failed validation. Rows are numbered from 1, header excluded.
    #[error("row {row}, column `{column}`: {message}")]
    Row {
        row: usize,
        column: String,
        message: String,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("no matching rows for keys {}", format_keys(.0))]
    MissingKeys(Vec<(i32, u32)>),

    #[error("covariate `{0}` has zero variance over the fitting rows")]
    ZeroVariance(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid family: {0}")]
    InvalidFamily(String),

    #[error("unknown season {0}")]
    UnknownSeason(i32),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        best: Vec<f64>,
        trace: Vec<f64>,
    },

    #[error("complete separation suspected: parameter `{parameter}` reached {value:.3e}")]
    Separation { parameter: String, value: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("inner Hessian not negative definite{}", .season.map(|s| format!(" (season {s})")).unwrap_or_default())]
    IndefiniteHessian { season: Option<i32> },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for failures of the numerical machinery as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::Separation { .. }
                | Error::Singular(_)
                | Error::IndefiniteHessian { .. }
                | Error::Numerical(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn row(row: usize, column: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Row {
            row,
            column: column.into(),
            message: message.into(),
        }
    }
}

fn format_keys(keys: &[(i32, u32)]) -> String {
    const SHOWN: usize = 10;
    let mut out: Vec<String> = keys
        .iter()
        .take(SHOWN)
        .map(|(s, d)| format!("({s}, {d})"))
        .collect();
    if keys.len() > SHOWN {
        out.push(format!("... {} more", keys.len() - SHOWN));
    }
    out.join(", ")
}
