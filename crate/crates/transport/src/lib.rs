//! Zero-copy publish/subscribe over POSIX shared memory.
//!
//! A topic is one shared segment holding a fixed pool of equally sized
//! chunks. The single publisher borrows a chunk, writes into it in place and
//! publishes it; every subscriber's bounded queue then references the same
//! bytes until each one returns its loan. A publisher may hold at most 8
//! loans at once and a topic accepts at most 127 live subscribers. When a
//! subscriber's queue is full the oldest entry is dropped.
//!
//! [`copy`] provides a socket-based transport with the same delivery
//! semantics that copies every payload, used as a baseline.

pub mod clock;
pub mod copy;
mod error;
pub mod layout;
mod segment;
mod topic;

pub use clock::monotonic_ns;
pub use copy::{CopyPublisher, CopySubscriber};
pub use error::{Result, TransportError};
pub use layout::{MAX_LOANS, MAX_SUBSCRIBERS};
pub use segment::{segment_name, PREFIX_ENV};
pub use topic::{
    Access, LoanHandle, Publisher, Subscriber, SubscriberStats, Topic, TopicConfig, TopicStats, DEFAULT_POOL_CAPACITY,
    DEFAULT_QUEUE_DEPTH,
};
