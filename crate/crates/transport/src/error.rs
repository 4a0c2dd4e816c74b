use std::io;

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("topic {0:?} already exists")]
    NameCollision(String),
    #[error("could not allocate shared segment for {name:?} ({bytes} bytes): {source}")]
    SegmentAllocationFailure { name: String, bytes: usize, source: io::Error },
    #[error("topic {0:?} not found")]
    TopicNotFound(String),
    #[error("segment {name:?} is incompatible: {reason}")]
    IncompatibleSegment { name: String, reason: String },
    #[error("invalid topic config: {0}")]
    InvalidConfig(String),
    #[error("all {0} loans are outstanding")]
    LoansExhausted(u32),
    #[error("chunk pool is empty")]
    PoolExhausted,
    #[error("handle is no longer valid")]
    StaleHandle,
    #[error("topic already has {0} subscribers")]
    TooManySubscribers(u32),
    #[error("topic already has a publisher")]
    PublisherExists,
    #[error("payload of {len} bytes exceeds the {max}-byte message size")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("message of {len} bytes exceeds the {max}-byte frame limit")]
    MessageTooLarge { len: usize, max: usize },
    #[error("peer disconnected")]
    Disconnected,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TransportError>;
