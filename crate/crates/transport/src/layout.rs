//! Shared segment layout.
//!
//! Every topic lives in one POSIX shared-memory object. All integers are
//! native-endian (the segment never leaves the host). Offsets are in bytes
//! from the start of the mapping.
//!
//! ```text
//! offset        size                     contents
//! 0             256                      Header
//! 256           64 * pool_capacity       chunk table, one ChunkRecord per chunk
//! ..            4 * pool_capacity        free stack (u32 chunk indices), padded to 64
//! ..            64 * 127                 subscriber table, one SubscriberRecord per slot
//! ..            4 * queue_depth * 127    subscriber queues (u32 chunk indices), padded to 4096
//! payload       stride * pool_capacity   payload area, stride = message_size rounded up to 64
//! ```
//!
//! Header:
//!
//! ```text
//! 0    [u8; 4]  magic "ADU1"
//! 4    u32      version (1)
//! 8    u64      message_size
//! 16   u32      pool_capacity
//! 20   u32      queue_depth
//! 24   u32      max_subscribers (127)
//! 28   u32      max_loans (8)
//! 32   u64      chunk stride
//! 40   u64      chunk table offset
//! 48   u64      free stack offset
//! 56   u64      subscriber table offset
//! 64   u64      queue area offset
//! 72   u64      payload area offset
//! 80   u64      segment size
//! 88   u32      state: 0 initializing, 1 ready (atomic, release/acquire)
//! 92   u32      publisher attached (0/1)
//! 96   u64      next sequence number (first publish gets 1)
//! 104  u32      publisher loans outstanding
//! 108  u32      free chunk count (depth of the free stack)
//! 112  u32      live subscribers
//! 116  u32      publisher pid
//! 120  [u8; 8]  reserved
//! 128  64       pthread_mutex_t, process-shared and robust
//! 192  64       pthread_cond_t, process-shared, CLOCK_MONOTONIC
//! ```
//!
//! ChunkRecord:
//!
//! ```text
//! 0    u64       sequence number of the last publish
//! 8    u64       publish timestamp, monotonic ns
//! 16   u64       payload length
//! 24   u32       refcount: loan (0/1) + queue entries + subscriber holds
//! 28   u32       state: 0 free, 1 loaned, 2 published
//! 32   u32       generation, bumped every time the chunk returns to the free stack
//! 36   u32       reserved
//! 40   [u64; 2]  holder bitmap, bit i set while subscriber slot i holds the chunk
//! 56   u64       reserved
//! ```
//!
//! SubscriberRecord:
//!
//! ```text
//! 0    u32  active (0/1)
//! 4    u32  generation, bumped on every attach
//! 8    u32  queue head index
//! 12   u32  queue length
//! 16   u64  messages delivered by take
//! 24   u64  messages dropped on overflow
//! 32   u32  chunks currently held
//! 36   u32  owner pid
//! 40   24   reserved
//! ```
//!
//! All fields other than `state` are read and written only while holding
//! the header mutex. Payload bytes are accessed without the lock by whoever
//! holds the chunk; the mutex hand-off at publish and take orders those
//! accesses.

use std::mem::{offset_of, size_of};
use std::sync::atomic::AtomicU32;

pub const MAGIC: [u8; 4] = *b"ADU1";
pub const VERSION: u32 = 1;
pub const MAX_LOANS: u32 = 8;
pub const MAX_SUBSCRIBERS: u32 = 127;
pub const HEADER_BYTES: usize = 256;
pub const RECORD_BYTES: usize = 64;
pub const PAYLOAD_ALIGN: usize = 4096;
pub const CHUNK_ALIGN: usize = 64;

pub const STATE_READY: u32 = 1;

pub const CHUNK_FREE: u32 = 0;
pub const CHUNK_LOANED: u32 = 1;
pub const CHUNK_PUBLISHED: u32 = 2;

#[repr(C, align(64))]
pub struct MutexSlot(pub libc::pthread_mutex_t);

#[repr(C, align(64))]
pub struct CondSlot(pub libc::pthread_cond_t);

#[repr(C)]
pub struct Header {
    pub magic: [u8; 4],
    pub version: u32,
    pub message_size: u64,
    pub pool_capacity: u32,
    pub queue_depth: u32,
    pub max_subscribers: u32,
    pub max_loans: u32,
    pub chunk_stride: u64,
    pub chunk_table: u64,
    pub free_stack: u64,
    pub subscriber_table: u64,
    pub queues: u64,
    pub payload: u64,
    pub segment_size: u64,
    pub state: AtomicU32,
    pub publisher_attached: u32,
    pub next_seq: u64,
    pub loans_outstanding: u32,
    pub free_count: u32,
    pub live_subscribers: u32,
    pub publisher_pid: u32,
    pub _reserved: [u8; 8],
    pub mutex: MutexSlot,
    pub cond: CondSlot,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ChunkRecord {
    pub seq: u64,
    pub publish_ns: u64,
    pub payload_len: u64,
    pub refcount: u32,
    pub state: u32,
    pub generation: u32,
    pub _reserved0: u32,
    pub holders: [u64; 2],
    pub _reserved1: u64,
}

impl ChunkRecord {
    #[inline]
    pub fn holds(&self, slot: u32) -> bool {
        self.holders[(slot / 64) as usize] & (1 << (slot % 64)) != 0
    }

    #[inline]
    pub fn set_holder(&mut self, slot: u32, on: bool) {
        let word = &mut self.holders[(slot / 64) as usize];
        if on {
            *word |= 1 << (slot % 64);
        } else {
            *word &= !(1 << (slot % 64));
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SubscriberRecord {
    pub active: u32,
    pub generation: u32,
    pub head: u32,
    pub len: u32,
    pub delivered: u64,
    pub dropped: u64,
    pub held: u32,
    pub pid: u32,
    pub _reserved: [u8; 24],
}

const _: () = {
    assert!(size_of::<MutexSlot>() == 64);
    assert!(size_of::<CondSlot>() == 64);
    assert!(size_of::<Header>() == HEADER_BYTES);
    assert!(offset_of!(Header, state) == 88);
    assert!(offset_of!(Header, next_seq) == 96);
    assert!(offset_of!(Header, publisher_pid) == 116);
    assert!(offset_of!(Header, mutex) == 128);
    assert!(offset_of!(Header, cond) == 192);
    assert!(size_of::<ChunkRecord>() == RECORD_BYTES);
    assert!(offset_of!(ChunkRecord, holders) == 40);
    assert!(size_of::<SubscriberRecord>() == RECORD_BYTES);
    assert!(offset_of!(SubscriberRecord, pid) == 36);
};

#[inline]
pub const fn round_up(v: usize, to: usize) -> usize {
    v.div_ceil(to) * to
}

/// Region offsets derived from the topic parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub message_size: usize,
    pub pool_capacity: usize,
    pub queue_depth: usize,
    pub chunk_stride: usize,
    pub chunk_table: usize,
    pub free_stack: usize,
    pub subscriber_table: usize,
    pub queues: usize,
    pub payload: usize,
    pub segment_size: usize,
}

impl Layout {
    pub fn new(message_size: usize, pool_capacity: usize, queue_depth: usize) -> Option<Self> {
        let chunk_stride = round_up(message_size, CHUNK_ALIGN);
        let chunk_table = HEADER_BYTES;
        let free_stack = chunk_table.checked_add(pool_capacity.checked_mul(RECORD_BYTES)?)?;
        let subscriber_table = round_up(free_stack + 4 * pool_capacity, RECORD_BYTES);
        let queues = subscriber_table + RECORD_BYTES * MAX_SUBSCRIBERS as usize;
        let payload = round_up(queues.checked_add(4usize.checked_mul(queue_depth)?.checked_mul(MAX_SUBSCRIBERS as usize)?)?, PAYLOAD_ALIGN);
        let segment_size = payload.checked_add(chunk_stride.checked_mul(pool_capacity)?)?;
        Some(Self {
            message_size,
            pool_capacity,
            queue_depth,
            chunk_stride,
            chunk_table,
            free_stack,
            subscriber_table,
            queues,
            payload,
            segment_size,
        })
    }

    /// Payload offset of chunk `i`.
    #[inline]
    pub fn chunk_offset(&self, i: usize) -> usize {
        self.payload + i * self.chunk_stride
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_topic_layout() {
        let l = Layout::new(1_228_800, 24, 8).unwrap();
        assert_eq!(l.chunk_stride, 1_228_800);
        assert_eq!(l.free_stack, 256 + 24 * 64);
        assert_eq!(l.subscriber_table, 1_792 + 128);
        assert_eq!(l.queues, 1_920 + 127 * 64);
        assert_eq!(l.payload, 16_384);
        assert_eq!(l.segment_size, 16_384 + 24 * 1_228_800);
        assert_eq!(l.chunk_offset(3) % 64, 0);
    }

    #[test]
    fn odd_sizes_are_padded() {
        let l = Layout::new(40, 3, 2).unwrap();
        assert_eq!(l.chunk_stride, 64);
        assert_eq!(l.payload % PAYLOAD_ALIGN, 0);
        assert_eq!(l.chunk_offset(2) - l.chunk_offset(1), 64);
    }

    #[test]
    fn holder_bits() {
        let mut c = ChunkRecord::default();
        c.set_holder(0, true);
        c.set_holder(126, true);
        assert!(c.holds(0) && c.holds(126) && !c.holds(64));
        c.set_holder(126, false);
        assert_eq!(c.holders, [1, 0]);
    }
}
