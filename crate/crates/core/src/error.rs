use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// The conditioning observation lies where every training kernel underflows.
    #[error("observation outside training support")]
    OutsideSupport,

    /// Every cell of a density grid evaluated to zero.
    #[error("density grid has no mass")]
    EmptyGrid,

    #[error("expansion failure: non-finite coefficient; try a center closer to the samples")]
    ExpansionFailure,

    #[error("conditioning failed: {0}")]
    Conditioning(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("image {image_id}: {message}")]
    Invariant { image_id: String, message: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fold {fold}, image {image_id}, method {method}: {source}")]
    Episode {
        fold: usize,
        image_id: String,
        method: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for errors caused by invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Domain(_)
                | Error::Parse { .. }
                | Error::Invariant { .. }
                | Error::EmptyDataset
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}
