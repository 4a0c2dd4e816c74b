//! Copying baseline: length-prefixed frames over loopback TCP.
//!
//! Each frame is a 4-byte little-endian payload length followed by the
//! payload. The sender copies into the kernel, the receiver copies out into
//! a fresh buffer.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Result, TransportError};

pub const FRAME_HEADER_BYTES: usize = 4;

struct Peers {
    streams: Mutex<Vec<TcpStream>>,
    joined: Condvar,
}

/// Accepts any number of subscribers and writes every frame to each of them.
pub struct CopyPublisher {
    addr: SocketAddr,
    peers: Arc<Peers>,
    max_message: usize,
}

impl CopyPublisher {
    /// Listens on `addr`, typically `127.0.0.1:0`.
    pub fn bind(addr: impl ToSocketAddrs, max_message: usize) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let peers = Arc::new(Peers { streams: Mutex::new(Vec::new()), joined: Condvar::new() });
        let accept = Arc::downgrade(&peers);
        thread::Builder::new().name(format!("copy-accept-{}", addr.port())).spawn(move || {
            for stream in listener.incoming() {
                let Some(peers) = accept.upgrade() else { break };
                match stream.and_then(|s| s.set_nodelay(true).map(|_| s)) {
                    Ok(s) => {
                        peers.streams.lock().unwrap().push(s);
                        peers.joined.notify_all();
                    }
                    Err(e) => log::warn!("copy publisher accept failed: {e}"),
                }
            }
        })?;
        Ok(Self { addr, peers, max_message: max_message.min(u32::MAX as usize) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn subscriber_count(&self) -> usize {
        self.peers.streams.lock().unwrap().len()
    }

    /// Blocks until at least `n` subscribers have connected. Returns false on timeout.
    pub fn wait_for_subscribers(&self, n: usize, timeout: Duration) -> bool {
        let guard = self.peers.streams.lock().unwrap();
        let (guard, _) = self.peers.joined.wait_timeout_while(guard, timeout, |s| s.len() < n).unwrap();
        guard.len() >= n
    }

    /// Sends one frame to every connected subscriber. Peers that have hung up are dropped.
    pub fn publish_copy(&mut self, payload: &[u8]) -> Result<()> {
        if payload.len() > self.max_message {
            return Err(TransportError::MessageTooLarge { len: payload.len(), max: self.max_message });
        }
        let header = (payload.len() as u32).to_le_bytes();
        let mut streams = self.peers.streams.lock().unwrap();
        streams.retain_mut(|s| match s.write_all(&header).and_then(|_| s.write_all(payload)) {
            Ok(()) => true,
            Err(e) => {
                log::debug!("dropping copy subscriber: {e}");
                false
            }
        });
        Ok(())
    }
}

impl Drop for CopyPublisher {
    fn drop(&mut self) {
        for s in self.peers.streams.lock().unwrap().drain(..) {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        // Wake the accept loop so it sees the publisher is gone.
        let _ = TcpStream::connect(self.addr);
    }
}

/// Receives frames from one [`CopyPublisher`].
pub struct CopySubscriber {
    stream: TcpStream,
    buf: Vec<u8>,
    filled: usize,
    max_message: usize,
}

impl CopySubscriber {
    pub fn connect(addr: SocketAddr, max_message: usize) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream, buf: vec![0; 64 * 1024], filled: 0, max_message })
    }

    /// Connects, retrying until `timeout` while the publisher comes up.
    pub fn connect_timeout(addr: SocketAddr, max_message: usize, timeout: Duration) -> Result<Self> {
        let start = Instant::now();
        loop {
            match Self::connect(addr, max_message) {
                Ok(s) => return Ok(s),
                Err(TransportError::Io(e)) if e.kind() == ErrorKind::ConnectionRefused && start.elapsed() < timeout => {
                    thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn frame_len(&self) -> Option<usize> {
        (self.filled >= FRAME_HEADER_BYTES)
            .then(|| u32::from_le_bytes(self.buf[..FRAME_HEADER_BYTES].try_into().unwrap()) as usize)
    }

    fn pop_frame(&mut self) -> Result<Option<Vec<u8>>> {
        let Some(len) = self.frame_len() else { return Ok(None) };
        if len > self.max_message {
            return Err(TransportError::MessageTooLarge { len, max: self.max_message });
        }
        let end = FRAME_HEADER_BYTES + len;
        if self.filled < end {
            if self.buf.len() < end {
                self.buf.resize(end, 0);
            }
            return Ok(None);
        }
        let payload = self.buf[FRAME_HEADER_BYTES..end].to_vec();
        self.buf.copy_within(end..self.filled, 0);
        self.filled -= end;
        Ok(Some(payload))
    }

    /// Reads the next frame. Without `blocking` only already-arrived data is
    /// consulted; otherwise waits up to `timeout`.
    pub fn take_copy(&mut self, blocking: bool, timeout: Duration) -> Result<Option<Vec<u8>>> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(frame) = self.pop_frame()? {
                return Ok(Some(frame));
            }
            if self.filled == self.buf.len() {
                let grow = self.buf.len() * 2;
                self.buf.resize(grow, 0);
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            if blocking && remaining.is_zero() {
                return Ok(None);
            }
            self.stream.set_nonblocking(!blocking)?;
            if blocking {
                self.stream.set_read_timeout(Some(remaining))?;
            }
            match self.stream.read(&mut self.buf[self.filled..]) {
                Ok(0) => return Err(TransportError::Disconnected),
                Ok(n) => self.filled += n,
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    if !blocking {
                        return Ok(None);
                    }
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) if is_disconnect(&e) => return Err(TransportError::Disconnected),
                Err(e) => return Err(e.into()),
            }
        }
    }
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(e.kind(), ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted | ErrorKind::BrokenPipe)
}

#[cfg(test)]
mod tests {
    use super::*;

    const WAIT: Duration = Duration::from_secs(5);

    #[test]
    fn frames_arrive_intact_and_in_order() {
        let mut publisher = CopyPublisher::bind("127.0.0.1:0", 1 << 21).unwrap();
        let mut sub = CopySubscriber::connect(publisher.local_addr(), 1 << 21).unwrap();
        assert!(publisher.wait_for_subscribers(1, WAIT));
        let big: Vec<u8> = (0..1_228_800u32).map(|i| (i % 251) as u8).collect();
        let writer = thread::spawn(move || {
            publisher.publish_copy(&[]).unwrap();
            publisher.publish_copy(&big).unwrap();
            publisher.publish_copy(b"tail").unwrap();
            publisher
        });
        assert_eq!(sub.take_copy(true, WAIT).unwrap(), Some(vec![]));
        let got = sub.take_copy(true, WAIT).unwrap().unwrap();
        assert_eq!(got.len(), 1_228_800);
        assert!(got.iter().enumerate().all(|(i, &b)| b == (i % 251) as u8));
        assert_eq!(sub.take_copy(true, WAIT).unwrap().as_deref(), Some(&b"tail"[..]));
        drop(writer.join().unwrap());
        assert!(matches!(sub.take_copy(true, WAIT), Err(TransportError::Disconnected)));
    }

    #[test]
    fn empty_subscriber_times_out() {
        let publisher = CopyPublisher::bind("127.0.0.1:0", 16).unwrap();
        let mut sub = CopySubscriber::connect(publisher.local_addr(), 16).unwrap();
        assert_eq!(sub.take_copy(false, WAIT).unwrap(), None);
        let t = Instant::now();
        assert_eq!(sub.take_copy(true, Duration::from_millis(30)).unwrap(), None);
        assert!(t.elapsed() >= Duration::from_millis(25));
    }

    #[test]
    fn oversized_payload_is_rejected() {
        let mut publisher = CopyPublisher::bind("127.0.0.1:0", 8).unwrap();
        assert!(matches!(publisher.publish_copy(&[0; 9]), Err(TransportError::MessageTooLarge { len: 9, max: 8 })));
    }
}
