use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: not found", path.display())]
    NotFound { path: PathBuf },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: unsupported format: {detail}", path.display())]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("malformed annotations: {0}")]
    Annotations(String),

    #[error("unknown label {0:?} (expected \"mitotic\" or \"imposter\")")]
    UnknownLabel(String),

    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),

    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("geometry mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    GeometryMismatch {
        left_w: usize,
        left_h: usize,
        right_w: usize,
        right_h: usize,
    },

    #[error("insufficient tissue: {found} pixels above the OD threshold, need at least {needed}")]
    InsufficientTissue { found: usize, needed: usize },

    #[error("degenerate stain estimate: stain vectors {angle_deg:.3} degrees apart")]
    DegenerateStains { angle_deg: f64 },

    #[error("PMAP: {0}")]
    Pmap(String),

    #[error("CSV line {line}: {detail}")]
    Csv { line: u64, detail: String },

    #[error("scorer {scorer} failed on tile at ({x}, {y}): {source}")]
    Tile {
        scorer: String,
        x: i64,
        y: i64,
        #[source]
        source: ScorerError,
    },

    #[error("classifier {scorer} failed on candidate {index} at ({x:.1}, {y:.1}): {source}")]
    Candidate {
        scorer: String,
        index: usize,
        x: f64,
        y: f64,
        #[source]
        source: ScorerError,
    },

    #[error("{ids} image ids cannot fill {k} folds")]
    TooFewIds { ids: usize, k: usize },
}

impl Error {
    pub fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    /// True for failures of an external scorer process or its file protocol.
    pub fn is_scorer_protocol(&self) -> bool {
        matches!(
            self,
            Error::Tile { source, .. } | Error::Candidate { source, .. }
                if matches!(source, ScorerError::Exit { .. } | ScorerError::Protocol(_))
        )
    }
}

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("command exited with {}", code.map_or_else(|| "a signal".to_string(), |c| format!("status {c}")))]
    Exit { code: Option<i32> },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("wrong output geometry: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    Geometry {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("score {0} outside [0, 1]")]
    Range(f64),

    #[error("scorer does not support {0} mode")]
    Mode(&'static str),

    #[error("{0}")]
    Other(String),
}
