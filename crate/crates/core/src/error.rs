use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("empty axis: {0}")]
    EmptyAxis(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("attention over an empty context")]
    EmptyContext,
    #[error("query {0} has no tokens in any hint")]
    EmptyQuery(String),
    #[error("submap {0} has no instances")]
    EmptySubmap(u32),
    #[error("instance {id} has {points} points, at least {min} required")]
    DegenerateInstance { id: u32, points: usize, min: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("batch construction: {0}")]
    Batch(String),
    #[error("missing dependency: {}", .0.display())]
    Dependency(PathBuf),
    #[error("config error: {0}")]
    Config(String),
    #[error("generation failed in cell {cell_id}: {reason}")]
    Generation { cell_id: u32, reason: String },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("provenance mismatch: {0}")]
    Provenance(String),
    #[error("refusing to overwrite {}", .0.display())]
    Exists(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dependency(_) => 3,
            _ => 2,
        }
    }
}
