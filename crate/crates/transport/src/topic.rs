//! Loaned-message publish/subscribe over a shared segment.

use std::sync::Arc;
use std::time::Duration;

use crate::clock;
use crate::error::{Result, TransportError};
use crate::layout::{Layout, SubscriberRecord, CHUNK_FREE, CHUNK_LOANED, CHUNK_PUBLISHED, MAX_LOANS, MAX_SUBSCRIBERS};
use crate::segment::{Guard, Segment};

pub const DEFAULT_QUEUE_DEPTH: usize = 8;
pub const DEFAULT_POOL_CAPACITY: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicConfig {
    pub name: String,
    pub message_size: usize,
    pub pool_capacity: usize,
    pub queue_depth: usize,
}

impl TopicConfig {
    pub fn new(name: impl Into<String>, message_size: usize) -> Self {
        Self {
            name: name.into(),
            message_size,
            pool_capacity: DEFAULT_POOL_CAPACITY,
            queue_depth: DEFAULT_QUEUE_DEPTH,
        }
    }

    pub fn with_pool_capacity(mut self, n: usize) -> Self {
        self.pool_capacity = n;
        self
    }

    pub fn with_queue_depth(mut self, n: usize) -> Self {
        self.queue_depth = n;
        self
    }

    pub fn validate(&self) -> Result<Layout> {
        let bad = |m: String| Err(TransportError::InvalidConfig(m));
        if self.message_size == 0 {
            return bad("message_size must be positive".into());
        }
        if self.queue_depth == 0 {
            return bad("queue_depth must be positive".into());
        }
        if self.pool_capacity < MAX_LOANS as usize + self.queue_depth || self.pool_capacity > u32::MAX as usize {
            return bad(format!(
                "pool_capacity {} must be at least {} loans + queue_depth {}",
                self.pool_capacity, MAX_LOANS, self.queue_depth
            ));
        }
        Layout::new(self.message_size, self.pool_capacity, self.queue_depth)
            .ok_or_else(|| TransportError::InvalidConfig("segment size overflows".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Access {
    Write,
    Read { slot: u32, slot_generation: u32 },
}

/// Reference to a loaned chunk. Publishing or returning it makes every copy stale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LoanHandle {
    chunk: u32,
    generation: u32,
    access: Access,
    offset: usize,
    seq: u64,
    publish_ns: u64,
    len: usize,
}

impl LoanHandle {
    pub fn chunk(&self) -> u32 {
        self.chunk
    }

    /// Byte offset of the payload inside the shared segment.
    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn is_writable(&self) -> bool {
        self.access == Access::Write
    }

    /// Sequence number; 0 on a publisher loan.
    pub fn seq(&self) -> u64 {
        self.seq
    }

    /// Monotonic publish time; 0 on a publisher loan.
    pub fn publish_ns(&self) -> u64 {
        self.publish_ns
    }

    /// Published payload length; the full message size on a publisher loan.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubscriberStats {
    pub slot: u32,
    pub queued: usize,
    pub delivered: u64,
    pub dropped: u64,
    pub held: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicStats {
    pub pool_capacity: usize,
    pub free_chunks: usize,
    pub loans_outstanding: usize,
    pub publisher_attached: bool,
    pub next_seq: u64,
    pub subscribers: Vec<SubscriberStats>,
}

/// A topic's shared segment. The creating handle unlinks the name on drop;
/// publishers and subscribers keep their mapping alive independently.
pub struct Topic {
    seg: Arc<Segment>,
}

impl std::fmt::Debug for Topic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Topic").field("name", &self.seg.topic()).field("layout", &self.seg.layout).finish()
    }
}

impl Topic {
    pub fn create(config: &TopicConfig) -> Result<Self> {
        let layout = config.validate()?;
        Ok(Self { seg: Arc::new(Segment::create(&config.name, layout)?) })
    }

    /// Attaches to a topic created elsewhere, waiting up to `timeout` for it.
    pub fn open(name: &str, timeout: Duration) -> Result<Self> {
        Ok(Self { seg: Arc::new(Segment::open(name, timeout)?) })
    }

    pub fn name(&self) -> &str {
        self.seg.topic()
    }

    pub fn is_owner(&self) -> bool {
        self.seg.is_owner()
    }

    pub fn layout(&self) -> &Layout {
        &self.seg.layout
    }

    pub fn message_size(&self) -> usize {
        self.seg.layout.message_size
    }

    pub fn publisher(&self) -> Result<Publisher> {
        let g = self.seg.lock();
        let h = g.h();
        // SAFETY: lock held.
        unsafe {
            if (*h).publisher_attached != 0 {
                return Err(TransportError::PublisherExists);
            }
            (*h).publisher_attached = 1;
            (*h).publisher_pid = std::process::id();
        }
        g.notify_all();
        drop(g);
        Ok(Publisher { seg: self.seg.clone() })
    }

    /// Registers a subscriber; it sees only messages published from now on.
    pub fn subscribe(&self) -> Result<Subscriber> {
        let mut g = self.seg.lock();
        let h = g.h();
        // SAFETY: lock held.
        let live = unsafe { (*h).live_subscribers };
        if live >= MAX_SUBSCRIBERS {
            return Err(TransportError::TooManySubscribers(MAX_SUBSCRIBERS));
        }
        let slot = (0..MAX_SUBSCRIBERS).find(|&s| g.sub(s).active == 0).expect("live count below limit");
        let generation = g.sub(slot).generation.wrapping_add(1);
        g.put_sub(slot, SubscriberRecord { active: 1, generation, pid: std::process::id(), ..Default::default() });
        // SAFETY: lock held.
        unsafe { (*h).live_subscribers += 1 };
        g.notify_all();
        drop(g);
        Ok(Subscriber { seg: self.seg.clone(), slot, generation })
    }

    pub fn stats(&self) -> TopicStats {
        stats(&self.seg.lock())
    }

    /// Cross-checks every refcount against the loans, queues and holds that
    /// reference the chunk, and the free stack against the free chunks.
    pub fn audit(&self) -> std::result::Result<(), String> {
        audit(&self.seg.lock())
    }
}

fn stats(g: &Guard<'_>) -> TopicStats {
    let h = g.h();
    let subscribers = (0..MAX_SUBSCRIBERS)
        .map(|s| (s, g.sub(s)))
        .filter(|(_, r)| r.active != 0)
        .map(|(slot, r)| SubscriberStats {
            slot,
            queued: r.len as usize,
            delivered: r.delivered,
            dropped: r.dropped,
            held: r.held as usize,
        })
        .collect();
    // SAFETY: lock held.
    unsafe {
        TopicStats {
            pool_capacity: g.layout().pool_capacity,
            free_chunks: (*h).free_count as usize,
            loans_outstanding: (*h).loans_outstanding as usize,
            publisher_attached: (*h).publisher_attached != 0,
            next_seq: (*h).next_seq,
            subscribers,
        }
    }
}

fn audit(g: &Guard<'_>) -> std::result::Result<(), String> {
    let l = *g.layout();
    let mut expected = vec![0u32; l.pool_capacity];
    let mut loans = 0;
    for i in 0..l.pool_capacity as u32 {
        let c = g.chunk(i);
        if c.state == CHUNK_LOANED {
            expected[i as usize] += 1;
            loans += 1;
        }
        for s in 0..MAX_SUBSCRIBERS {
            if c.holds(s) {
                if g.sub(s).active == 0 {
                    return Err(format!("chunk {i} held by inactive slot {s}"));
                }
                expected[i as usize] += 1;
            }
        }
    }
    let mut live = 0;
    for s in 0..MAX_SUBSCRIBERS {
        let r = g.sub(s);
        if r.active == 0 {
            continue;
        }
        live += 1;
        if r.len as usize > l.queue_depth {
            return Err(format!("slot {s} queue length {} exceeds depth", r.len));
        }
        for k in 0..r.len {
            let chunk = g.queue_entry(s, (r.head + k) % l.queue_depth as u32);
            expected[chunk as usize] += 1;
        }
    }
    let h = g.h();
    // SAFETY: lock held.
    let (free_count, live_count, loan_count) = unsafe { ((*h).free_count, (*h).live_subscribers, (*h).loans_outstanding) };
    if live != live_count {
        return Err(format!("{live} active slots but live count {live_count}"));
    }
    if loans != loan_count {
        return Err(format!("{loans} loaned chunks but loan count {loan_count}"));
    }
    let mut on_stack = vec![false; l.pool_capacity];
    for k in 0..free_count {
        let i = g.free_entry(k) as usize;
        if std::mem::replace(&mut on_stack[i], true) {
            return Err(format!("chunk {i} twice on the free stack"));
        }
    }
    for i in 0..l.pool_capacity {
        let c = g.chunk(i as u32);
        if c.refcount != expected[i] {
            return Err(format!("chunk {i} refcount {} but {} references", c.refcount, expected[i]));
        }
        let free = c.state == CHUNK_FREE;
        if free != on_stack[i] || free != (c.refcount == 0) {
            return Err(format!("chunk {i} state {} refcount {} on free stack {}", c.state, c.refcount, on_stack[i]));
        }
    }
    Ok(())
}

/// Drops one reference; the chunk goes back to the pool at zero.
fn release_ref(g: &mut Guard<'_>, chunk: u32) {
    let mut c = g.chunk(chunk);
    assert!(c.refcount > 0, "refcount underflow on chunk {chunk}");
    c.refcount -= 1;
    if c.refcount == 0 {
        c.state = CHUNK_FREE;
        c.generation = c.generation.wrapping_add(1);
        c.holders = [0; 2];
        g.put_chunk(chunk, c);
        g.push_free(chunk);
    } else {
        g.put_chunk(chunk, c);
    }
}

/// The single writer of a topic.
pub struct Publisher {
    seg: Arc<Segment>,
}

impl Publisher {
    pub fn topic_name(&self) -> &str {
        self.seg.topic()
    }

    pub fn message_size(&self) -> usize {
        self.seg.layout.message_size
    }

    /// Takes a free chunk for writing.
    pub fn borrow(&mut self) -> Result<LoanHandle> {
        let mut g = self.seg.lock();
        let h = g.h();
        // SAFETY: lock held.
        if unsafe { (*h).loans_outstanding } >= MAX_LOANS {
            return Err(TransportError::LoansExhausted(MAX_LOANS));
        }
        let chunk = g.pop_free().ok_or(TransportError::PoolExhausted)?;
        let mut c = g.chunk(chunk);
        debug_assert_eq!(c.state, CHUNK_FREE);
        c.state = CHUNK_LOANED;
        c.refcount = 1;
        c.seq = 0;
        c.publish_ns = 0;
        c.payload_len = 0;
        g.put_chunk(chunk, c);
        // SAFETY: lock held.
        unsafe { (*h).loans_outstanding += 1 };
        let layout = g.layout();
        Ok(LoanHandle {
            chunk,
            generation: c.generation,
            access: Access::Write,
            offset: layout.chunk_offset(chunk as usize),
            seq: 0,
            publish_ns: 0,
            len: layout.message_size,
        })
    }

    fn check_loan(g: &Guard<'_>, handle: &LoanHandle) -> Result<()> {
        if handle.access != Access::Write || handle.chunk as usize >= g.layout().pool_capacity {
            return Err(TransportError::StaleHandle);
        }
        let c = g.chunk(handle.chunk);
        if c.state != CHUNK_LOANED || c.generation != handle.generation {
            return Err(TransportError::StaleHandle);
        }
        Ok(())
    }

    /// Writable view of a loaned chunk's full message area.
    pub fn payload_mut(&mut self, handle: &LoanHandle) -> Result<&mut [u8]> {
        Self::check_loan(&self.seg.lock(), handle)?;
        // SAFETY: the chunk is loaned to this publisher, so nobody else reads
        // or writes it until it is published.
        Ok(unsafe { std::slice::from_raw_parts_mut(self.seg.base().add(handle.offset), self.seg.layout.message_size) })
    }

    /// Enqueues the chunk on every live subscriber and returns its sequence number.
    pub fn publish_loaned(&mut self, handle: LoanHandle, payload_len: usize) -> Result<u64> {
        let mut g = self.seg.lock();
        Self::check_loan(&g, &handle)?;
        let max = g.layout().message_size;
        if payload_len > max {
            return Err(TransportError::PayloadTooLarge { len: payload_len, max });
        }
        let h = g.h();
        // SAFETY: lock held.
        let seq = unsafe {
            let seq = (*h).next_seq;
            (*h).next_seq += 1;
            (*h).loans_outstanding -= 1;
            seq
        };
        let mut c = g.chunk(handle.chunk);
        c.seq = seq;
        c.publish_ns = clock::monotonic_ns();
        c.payload_len = payload_len as u64;
        c.state = CHUNK_PUBLISHED;
        g.put_chunk(handle.chunk, c);

        let depth = g.layout().queue_depth as u32;
        for s in 0..MAX_SUBSCRIBERS {
            let mut r = g.sub(s);
            if r.active == 0 {
                continue;
            }
            if r.len == depth {
                let oldest = g.queue_entry(s, r.head);
                r.head = (r.head + 1) % depth;
                r.len -= 1;
                r.dropped += 1;
                release_ref(&mut g, oldest);
            }
            g.set_queue_entry(s, (r.head + r.len) % depth, handle.chunk);
            r.len += 1;
            g.put_sub(s, r);
            let mut c = g.chunk(handle.chunk);
            c.refcount += 1;
            g.put_chunk(handle.chunk, c);
        }
        // Drop the publisher's own reference last; with no subscribers this frees the chunk.
        release_ref(&mut g, handle.chunk);
        g.notify_all();
        Ok(seq)
    }

    /// Gives a loan back without publishing it.
    pub fn discard(&mut self, handle: LoanHandle) -> Result<()> {
        let mut g = self.seg.lock();
        Self::check_loan(&g, &handle)?;
        // SAFETY: lock held.
        unsafe { (*g.h()).loans_outstanding -= 1 };
        release_ref(&mut g, handle.chunk);
        Ok(())
    }

    pub fn loans_outstanding(&self) -> usize {
        // SAFETY: lock held.
        unsafe { (*self.seg.lock().h()).loans_outstanding as usize }
    }

    pub fn subscriber_count(&self) -> usize {
        // SAFETY: lock held.
        unsafe { (*self.seg.lock().h()).live_subscribers as usize }
    }

    /// Blocks until at least `n` subscribers are attached. Returns false on timeout.
    pub fn wait_for_subscribers(&self, n: usize, timeout: Duration) -> bool {
        let deadline = clock::deadline_after(timeout);
        let mut g = self.seg.lock();
        loop {
            // SAFETY: lock held.
            if unsafe { (*g.h()).live_subscribers } as usize >= n {
                return true;
            }
            if !g.wait_until(&deadline) && clock::passed(&deadline) {
                // SAFETY: lock held.
                return unsafe { (*g.h()).live_subscribers } as usize >= n;
            }
        }
    }

    /// Blocks until every live subscriber has room in its queue, so the next
    /// publish drops nothing. Returns false on timeout.
    pub fn wait_for_queue_space(&self, timeout: Duration) -> bool {
        let deadline = clock::deadline_after(timeout);
        let mut g = self.seg.lock();
        let depth = g.layout().queue_depth as u32;
        loop {
            let full = (0..MAX_SUBSCRIBERS).any(|s| {
                let r = g.sub(s);
                r.active != 0 && r.len >= depth
            });
            if !full {
                return true;
            }
            if !g.wait_until(&deadline) && clock::passed(&deadline) {
                return false;
            }
        }
    }

    pub fn stats(&self) -> TopicStats {
        stats(&self.seg.lock())
    }

    /// Offset of `ptr` within this endpoint's mapping of the segment, if it points into it.
    pub fn segment_offset(&self, ptr: *const u8) -> Option<usize> {
        self.seg.offset_of(ptr)
    }
}

impl Drop for Publisher {
    fn drop(&mut self) {
        let mut g = self.seg.lock();
        for i in 0..g.layout().pool_capacity as u32 {
            if g.chunk(i).state == CHUNK_LOANED {
                release_ref(&mut g, i);
            }
        }
        let h = g.h();
        // SAFETY: lock held.
        unsafe {
            (*h).loans_outstanding = 0;
            (*h).publisher_attached = 0;
            (*h).publisher_pid = 0;
        }
        g.notify_all();
    }
}

/// One reader with its own bounded FIFO.
pub struct Subscriber {
    seg: Arc<Segment>,
    slot: u32,
    generation: u32,
}

impl Subscriber {
    /// Slot index in the subscriber table.
    pub fn id(&self) -> u32 {
        self.slot
    }

    pub fn topic_name(&self) -> &str {
        self.seg.topic()
    }

    /// Dequeues the oldest message. With `blocking`, waits up to `timeout`
    /// for one to arrive; returns `None` when nothing is available.
    pub fn take_loaned(&mut self, blocking: bool, timeout: Duration) -> Option<LoanHandle> {
        let deadline = blocking.then(|| clock::deadline_after(timeout));
        let mut g = self.seg.lock();
        loop {
            let mut r = g.sub(self.slot);
            if r.len > 0 {
                let depth = g.layout().queue_depth as u32;
                let was_full = r.len == depth;
                let chunk = g.queue_entry(self.slot, r.head);
                r.head = (r.head + 1) % depth;
                r.len -= 1;
                r.delivered += 1;
                r.held += 1;
                g.put_sub(self.slot, r);
                // The queue reference becomes the hold reference.
                let mut c = g.chunk(chunk);
                debug_assert_eq!(c.state, CHUNK_PUBLISHED);
                c.set_holder(self.slot, true);
                g.put_chunk(chunk, c);
                if was_full {
                    // A publisher may be waiting for queue space.
                    g.notify_all();
                }
                return Some(LoanHandle {
                    chunk,
                    generation: c.generation,
                    access: Access::Read { slot: self.slot, slot_generation: self.generation },
                    offset: g.layout().chunk_offset(chunk as usize),
                    seq: c.seq,
                    publish_ns: c.publish_ns,
                    len: c.payload_len as usize,
                });
            }
            match &deadline {
                Some(d) if !clock::passed(d) => {
                    g.wait_until(d);
                }
                _ => return None,
            }
        }
    }

    fn check_hold(&self, g: &Guard<'_>, handle: &LoanHandle) -> Result<()> {
        let mine = Access::Read { slot: self.slot, slot_generation: self.generation };
        if handle.access != mine || handle.chunk as usize >= g.layout().pool_capacity {
            return Err(TransportError::StaleHandle);
        }
        let c = g.chunk(handle.chunk);
        if c.generation != handle.generation || !c.holds(self.slot) {
            return Err(TransportError::StaleHandle);
        }
        Ok(())
    }

    /// Read-only view of a taken message's payload.
    pub fn payload(&self, handle: &LoanHandle) -> Result<&[u8]> {
        self.check_hold(&self.seg.lock(), handle)?;
        // SAFETY: the chunk is held by this subscriber and cannot be reused
        // before it is returned, which needs `&mut self`.
        Ok(unsafe { std::slice::from_raw_parts(self.seg.base().add(handle.offset), handle.len) })
    }

    pub fn return_loaned(&mut self, handle: LoanHandle) -> Result<()> {
        let mut g = self.seg.lock();
        self.check_hold(&g, &handle)?;
        let mut c = g.chunk(handle.chunk);
        c.set_holder(self.slot, false);
        g.put_chunk(handle.chunk, c);
        let mut r = g.sub(self.slot);
        r.held -= 1;
        g.put_sub(self.slot, r);
        release_ref(&mut g, handle.chunk);
        Ok(())
    }

    pub fn queue_len(&self) -> usize {
        self.seg.lock().sub(self.slot).len as usize
    }

    pub fn stats(&self) -> TopicStats {
        stats(&self.seg.lock())
    }

    /// Offset of `ptr` within this endpoint's mapping of the segment, if it points into it.
    pub fn segment_offset(&self, ptr: *const u8) -> Option<usize> {
        self.seg.offset_of(ptr)
    }
}

impl Drop for Subscriber {
    fn drop(&mut self) {
        let mut g = self.seg.lock();
        let depth = g.layout().queue_depth as u32;
        let r = g.sub(self.slot);
        for k in 0..r.len {
            let chunk = g.queue_entry(self.slot, (r.head + k) % depth);
            release_ref(&mut g, chunk);
        }
        for i in 0..g.layout().pool_capacity as u32 {
            let mut c = g.chunk(i);
            if c.holds(self.slot) {
                c.set_holder(self.slot, false);
                g.put_chunk(i, c);
                release_ref(&mut g, i);
            }
        }
        let generation = r.generation;
        g.put_sub(self.slot, SubscriberRecord { generation, ..Default::default() });
        // SAFETY: lock held.
        unsafe { (*g.h()).live_subscribers -= 1 };
        g.notify_all();
    }
}
