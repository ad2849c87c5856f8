//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("wrong token count: expected {expected}, got {actual}")]
    WrongTokenCount { expected: usize, actual: usize },

    #[error("race condition: second writer for video {video_id} in iteration {iteration}")]
    RaceCondition { video_id: String, iteration: u64 },

    #[error("unknown video: {0}")]
    UnknownVideo(String),

    #[error("video {video_id} has {available} tokens, need at least {needed}")]
    VideoTooSmall {
        video_id: String,
        available: usize,
        needed: usize,
    },

    #[error("sync called before all workers reported completion ({done}/{total})")]
    SyncIncomplete { done: usize, total: usize },

    #[error("event placement failed after {retries} retries (no collision-free slot)")]
    EventPlacement { retries: usize },

    #[error("requested duration class ({requested}s) exceeds video duration ({available}s)")]
    DurationClassTooLong { requested: f64, available: f64 },

    #[error("bad magic header: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("file truncated: needed {needed} more bytes in {section}")]
    Truncated {
        section: &'static str,
        needed: usize,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
