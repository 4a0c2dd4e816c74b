//! One outgoing or incoming topic over either transport.

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use adunit_transport::{monotonic_ns, CopyPublisher, CopySubscriber, Publisher, Subscriber, Topic};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::messages::stamp_publish;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Loaned,
    Copy,
}

impl TransportKind {
    pub const ALL: [TransportKind; 2] = [TransportKind::Loaned, TransportKind::Copy];

    pub fn as_str(self) -> &'static str {
        match self {
            TransportKind::Loaned => "loaned",
            TransportKind::Copy => "copy",
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "loaned" => Ok(TransportKind::Loaned),
            "copy" => Ok(TransportKind::Copy),
            other => Err(format!("unknown transport {other:?} (expected loaned or copy)")),
        }
    }
}

/// Where a run's topics live: shared-memory names carry the run id, socket
/// addresses are published as files in the run directory.
#[derive(Debug, Clone)]
pub struct Rendezvous {
    pub transport: TransportKind,
    pub run_id: String,
    pub run_dir: PathBuf,
    pub timeout: Duration,
}

impl Rendezvous {
    pub fn topic_name(&self, base: &str) -> String {
        format!("{base}.{}", self.run_id)
    }

    fn addr_file(&self, base: &str) -> PathBuf {
        self.run_dir.join(format!("{base}.addr"))
    }

    fn timeout_err(&self, what: String) -> HarnessError {
        HarnessError::Timeout(format!("{what} within {:?}", self.timeout))
    }
}

fn write_atomic(path: &Path, text: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(tmp, path)
}

fn wait_for_addr(path: &Path, timeout: Duration) -> Option<SocketAddr> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(addr) = std::fs::read_to_string(path).ok().and_then(|s| s.trim().parse().ok()) {
            return Some(addr);
        }
        if Instant::now() >= deadline {
            return None;
        }
        std::thread::sleep(Duration::from_millis(2));
    }
}

fn queue_full(timeout: Duration) -> HarnessError {
    HarnessError::Timeout(format!("subscriber queue stayed full for {timeout:?}"))
}

pub enum OutLink {
    Loaned { publisher: Publisher, timeout: Duration },
    Copy { publisher: CopyPublisher, buf: Vec<u8>, timeout: Duration },
}

impl OutLink {
    /// Attaches as the publisher of `base`. Loaned topics must already exist.
    pub fn open(rv: &Rendezvous, base: &str, message_size: usize) -> Result<Self> {
        match rv.transport {
            TransportKind::Loaned => {
                let topic = Topic::open(&rv.topic_name(base), rv.timeout)?;
                Ok(OutLink::Loaned { publisher: topic.publisher()?, timeout: rv.timeout })
            }
            TransportKind::Copy => {
                let publisher = CopyPublisher::bind("127.0.0.1:0", message_size)?;
                write_atomic(&rv.addr_file(base), &publisher.local_addr().to_string())?;
                Ok(OutLink::Copy { publisher, buf: vec![0; message_size], timeout: rv.timeout })
            }
        }
    }

    pub fn wait_for_subscribers(&self, n: usize) -> Result<()> {
        let (ok, timeout) = match self {
            OutLink::Loaned { publisher, timeout } => (publisher.wait_for_subscribers(n, *timeout), *timeout),
            OutLink::Copy { publisher, timeout, .. } => (publisher.wait_for_subscribers(n, *timeout), *timeout),
        };
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Timeout(format!("{n} subscribers did not attach within {timeout:?}")))
        }
    }

    /// Blocks while any subscriber queue is full.
    pub fn wait_ready(&self) -> Result<()> {
        match self {
            OutLink::Loaned { publisher, timeout } if !publisher.wait_for_queue_space(*timeout) => {
                Err(queue_full(*timeout))
            }
            _ => Ok(()),
        }
    }

    /// Lets `fill` write one message in place and returns its length; the
    /// publish timestamp is stamped after `fill` returns. Blocks while any
    /// subscriber queue is full so that no message is dropped.
    pub fn send(&mut self, fill: impl FnOnce(&mut [u8]) -> usize) -> Result<u64> {
        match self {
            OutLink::Loaned { publisher, timeout } => {
                if !publisher.wait_for_queue_space(*timeout) {
                    return Err(queue_full(*timeout));
                }
                let handle = publisher.borrow()?;
                let buf = publisher.payload_mut(&handle)?;
                let len = fill(buf);
                let t = monotonic_ns();
                stamp_publish(buf, t);
                publisher.publish_loaned(handle, len)?;
                Ok(t)
            }
            OutLink::Copy { publisher, buf, .. } => {
                let len = fill(buf);
                let t = monotonic_ns();
                stamp_publish(buf, t);
                publisher.publish_copy(&buf[..len])?;
                Ok(t)
            }
        }
    }
}

pub enum InLink {
    Loaned { subscriber: Subscriber, timeout: Duration },
    Copy { subscriber: CopySubscriber, timeout: Duration },
}

impl InLink {
    /// Subscribes to `base`, waiting for it to appear.
    pub fn open(rv: &Rendezvous, base: &str, message_size: usize) -> Result<Self> {
        match rv.transport {
            TransportKind::Loaned => {
                let topic = Topic::open(&rv.topic_name(base), rv.timeout)?;
                Ok(InLink::Loaned { subscriber: topic.subscribe()?, timeout: rv.timeout })
            }
            TransportKind::Copy => {
                let addr = wait_for_addr(&rv.addr_file(base), rv.timeout)
                    .ok_or_else(|| rv.timeout_err(format!("publisher of {base} did not appear")))?;
                let subscriber = CopySubscriber::connect_timeout(addr, message_size, rv.timeout)?;
                Ok(InLink::Copy { subscriber, timeout: rv.timeout })
            }
        }
    }

    /// Waits for the next message and hands it to `read` together with the
    /// time it was taken.
    pub fn recv<R>(&mut self, read: impl FnOnce(&[u8], u64) -> R) -> Result<R> {
        match self {
            InLink::Loaned { subscriber, timeout } => {
                let handle = subscriber
                    .take_loaned(true, *timeout)
                    .ok_or_else(|| HarnessError::Timeout(format!("no message within {timeout:?}")))?;
                let t_take = monotonic_ns();
                let out = read(subscriber.payload(&handle)?, t_take);
                subscriber.return_loaned(handle)?;
                Ok(out)
            }
            InLink::Copy { subscriber, timeout } => {
                let bytes = subscriber
                    .take_copy(true, *timeout)?
                    .ok_or_else(|| HarnessError::Timeout(format!("no message within {timeout:?}")))?;
                let t_take = monotonic_ns();
                Ok(read(&bytes, t_take))
            }
        }
    }
}
