//! Mapping, initialization and locking of one topic segment.

use std::ffi::CString;
use std::io;
use std::ptr::{self, NonNull};
use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use crate::clock;
use crate::error::{Result, TransportError};
use crate::layout::{ChunkRecord, Header, Layout, SubscriberRecord, MAGIC, MAX_LOANS, MAX_SUBSCRIBERS, STATE_READY, VERSION};

pub const PREFIX_ENV: &str = "ADUNIT_SEGMENT_PREFIX";

/// OS object name for a topic: `/<prefix>adunit.<topic>`.
pub fn segment_name(topic: &str) -> String {
    let prefix = std::env::var(PREFIX_ENV).unwrap_or_default();
    format!("/{prefix}adunit.{topic}")
}

pub(crate) fn validate_topic_name(topic: &str) -> Result<()> {
    let ok = !topic.is_empty()
        && topic.len() <= 200
        && topic.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(TransportError::InvalidConfig(format!("bad topic name {topic:?}")))
    }
}

fn errno() -> io::Error {
    io::Error::last_os_error()
}

pub(crate) struct Segment {
    base: NonNull<u8>,
    len: usize,
    topic: String,
    os_name: CString,
    owner: bool,
    pub(crate) layout: Layout,
}

// SAFETY: the mapping is shared memory whose mutable state is guarded by the
// process-shared mutex in the header.
unsafe impl Send for Segment {}
unsafe impl Sync for Segment {}

impl Segment {
    pub(crate) fn create(topic: &str, layout: Layout) -> Result<Self> {
        validate_topic_name(topic)?;
        let os_name = CString::new(segment_name(topic)).expect("validated name has no NUL");
        let fail = |source: io::Error| TransportError::SegmentAllocationFailure {
            name: topic.to_string(),
            bytes: layout.segment_size,
            source,
        };
        // SAFETY: plain libc calls on a NUL-terminated name and a descriptor we own.
        unsafe {
            let fd = libc::shm_open(os_name.as_ptr(), libc::O_CREAT | libc::O_EXCL | libc::O_RDWR | libc::O_CLOEXEC, 0o600);
            if fd < 0 {
                let e = errno();
                return Err(if e.raw_os_error() == Some(libc::EEXIST) {
                    TransportError::NameCollision(topic.to_string())
                } else {
                    fail(e)
                });
            }
            let cleanup = |e: io::Error| {
                libc::close(fd);
                libc::shm_unlink(os_name.as_ptr());
                fail(e)
            };
            if libc::ftruncate(fd, layout.segment_size as libc::off_t) != 0 {
                return Err(cleanup(errno()));
            }
            // Reserve the pages now so exhaustion shows up here instead of as SIGBUS later.
            let rc = libc::posix_fallocate(fd, 0, layout.segment_size as libc::off_t);
            if rc != 0 {
                return Err(cleanup(io::Error::from_raw_os_error(rc)));
            }
            let p = libc::mmap(ptr::null_mut(), layout.segment_size, libc::PROT_READ | libc::PROT_WRITE, libc::MAP_SHARED, fd, 0);
            if p == libc::MAP_FAILED {
                return Err(cleanup(errno()));
            }
            libc::close(fd);
            let seg = Segment {
                base: NonNull::new(p.cast()).expect("mmap returned null"),
                len: layout.segment_size,
                topic: topic.to_string(),
                os_name,
                owner: true,
                layout,
            };
            seg.initialize();
            Ok(seg)
        }
    }

    /// Fills in the header, synchronization objects and free stack, then marks the segment ready.
    unsafe fn initialize(&self) {
        let l = &self.layout;
        let h = self.header();
        (*h).magic = MAGIC;
        (*h).version = VERSION;
        (*h).message_size = l.message_size as u64;
        (*h).pool_capacity = l.pool_capacity as u32;
        (*h).queue_depth = l.queue_depth as u32;
        (*h).max_subscribers = MAX_SUBSCRIBERS;
        (*h).max_loans = MAX_LOANS;
        (*h).chunk_stride = l.chunk_stride as u64;
        (*h).chunk_table = l.chunk_table as u64;
        (*h).free_stack = l.free_stack as u64;
        (*h).subscriber_table = l.subscriber_table as u64;
        (*h).queues = l.queues as u64;
        (*h).payload = l.payload as u64;
        (*h).segment_size = l.segment_size as u64;
        (*h).next_seq = 1;
        (*h).free_count = l.pool_capacity as u32;

        let mut mattr: libc::pthread_mutexattr_t = std::mem::zeroed();
        libc::pthread_mutexattr_init(&mut mattr);
        libc::pthread_mutexattr_setpshared(&mut mattr, libc::PTHREAD_PROCESS_SHARED);
        libc::pthread_mutexattr_setrobust(&mut mattr, libc::PTHREAD_MUTEX_ROBUST);
        let rc = libc::pthread_mutex_init(ptr::addr_of_mut!((*h).mutex.0), &mattr);
        assert_eq!(rc, 0, "pthread_mutex_init");
        libc::pthread_mutexattr_destroy(&mut mattr);

        let mut cattr: libc::pthread_condattr_t = std::mem::zeroed();
        libc::pthread_condattr_init(&mut cattr);
        libc::pthread_condattr_setpshared(&mut cattr, libc::PTHREAD_PROCESS_SHARED);
        libc::pthread_condattr_setclock(&mut cattr, libc::CLOCK_MONOTONIC);
        let rc = libc::pthread_cond_init(ptr::addr_of_mut!((*h).cond.0), &cattr);
        assert_eq!(rc, 0, "pthread_cond_init");
        libc::pthread_condattr_destroy(&mut cattr);

        // Stack top is the last entry, so chunk 0 is handed out first.
        for k in 0..l.pool_capacity {
            self.free_slot(k).write((l.pool_capacity - 1 - k) as u32);
        }
        (*h).state.store(STATE_READY, Ordering::Release);
    }

    /// Maps an existing topic, waiting up to `timeout` for it to appear and become ready.
    pub(crate) fn open(topic: &str, timeout: Duration) -> Result<Self> {
        validate_topic_name(topic)?;
        let os_name = CString::new(segment_name(topic)).expect("validated name has no NUL");
        let start = Instant::now();
        loop {
            if let Some(seg) = Self::try_open(topic, &os_name)? {
                return Ok(seg);
            }
            if start.elapsed() >= timeout {
                return Err(TransportError::TopicNotFound(topic.to_string()));
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    fn try_open(topic: &str, os_name: &CString) -> Result<Option<Self>> {
        // SAFETY: libc calls on a descriptor we own; the header is only read
        // after the mapping is known to cover it.
        unsafe {
            let fd = libc::shm_open(os_name.as_ptr(), libc::O_RDWR | libc::O_CLOEXEC, 0);
            if fd < 0 {
                let e = errno();
                return if e.raw_os_error() == Some(libc::ENOENT) { Ok(None) } else { Err(e.into()) };
            }
            let mut st: libc::stat = std::mem::zeroed();
            if libc::fstat(fd, &mut st) != 0 {
                let e = errno();
                libc::close(fd);
                return Err(e.into());
            }
            let len = st.st_size as usize;
            if len < std::mem::size_of::<Header>() {
                libc::close(fd);
                return Ok(None);
            }
            let p = libc::mmap(ptr::null_mut(), len, libc::PROT_READ | libc::PROT_WRITE, libc::MAP_SHARED, fd, 0);
            libc::close(fd);
            if p == libc::MAP_FAILED {
                return Err(errno().into());
            }
            let h = p.cast::<Header>();
            if (*h).state.load(Ordering::Acquire) != STATE_READY {
                libc::munmap(p, len);
                return Ok(None);
            }
            let bad = |reason: String| {
                libc::munmap(p, len);
                Err(TransportError::IncompatibleSegment { name: topic.to_string(), reason })
            };
            if (*h).magic != MAGIC || (*h).version != VERSION {
                return bad(format!("magic {:?} version {}", (*h).magic, (*h).version));
            }
            let layout = Layout::new((*h).message_size as usize, (*h).pool_capacity as usize, (*h).queue_depth as usize);
            match layout {
                Some(l) if l.segment_size == len && l.payload as u64 == (*h).payload => Ok(Some(Segment {
                    base: NonNull::new(p.cast()).expect("mmap returned null"),
                    len,
                    topic: topic.to_string(),
                    os_name: os_name.clone(),
                    owner: false,
                    layout: l,
                })),
                _ => bad(format!("layout does not match {len}-byte mapping")),
            }
        }
    }

    pub(crate) fn topic(&self) -> &str {
        &self.topic
    }

    pub(crate) fn is_owner(&self) -> bool {
        self.owner
    }

    pub(crate) fn base(&self) -> *mut u8 {
        self.base.as_ptr()
    }

    pub(crate) fn header(&self) -> *mut Header {
        self.base.as_ptr().cast()
    }

    fn free_slot(&self, k: usize) -> *mut u32 {
        debug_assert!(k < self.layout.pool_capacity);
        // SAFETY: within the free stack region of the mapping.
        unsafe { self.base.as_ptr().add(self.layout.free_stack + 4 * k).cast() }
    }

    /// Offset of `ptr` within this mapping, if it points inside it.
    pub(crate) fn offset_of(&self, ptr: *const u8) -> Option<usize> {
        let start = self.base.as_ptr() as usize;
        let p = ptr as usize;
        (p >= start && p < start + self.len).then(|| p - start)
    }

    pub(crate) fn lock(&self) -> Guard<'_> {
        // SAFETY: the mutex was initialized before the ready flag was published.
        let rc = unsafe { libc::pthread_mutex_lock(ptr::addr_of_mut!((*self.header()).mutex.0)) };
        self.check_lock(rc);
        Guard { seg: self }
    }

    fn check_lock(&self, rc: i32) {
        match rc {
            0 => {}
            libc::EOWNERDEAD => {
                log::warn!("topic {}: previous lock owner died, recovering", self.topic);
                // SAFETY: we own the mutex after EOWNERDEAD.
                unsafe { libc::pthread_mutex_consistent(ptr::addr_of_mut!((*self.header()).mutex.0)) };
            }
            rc => panic!("topic {}: pthread mutex error {rc}", self.topic),
        }
    }
}

impl Drop for Segment {
    fn drop(&mut self) {
        // SAFETY: unmapping our own mapping; the name is only unlinked by its creator.
        unsafe {
            libc::munmap(self.base.as_ptr().cast(), self.len);
            if self.owner {
                libc::shm_unlink(self.os_name.as_ptr());
            }
        }
    }
}

/// Holds the segment mutex; all accounting state is accessed through it.
pub(crate) struct Guard<'a> {
    seg: &'a Segment,
}

impl Guard<'_> {
    #[inline]
    pub(crate) fn h(&self) -> *mut Header {
        self.seg.header()
    }

    #[inline]
    pub(crate) fn layout(&self) -> &Layout {
        &self.seg.layout
    }

    #[inline]
    fn chunk_ptr(&self, i: u32) -> *mut ChunkRecord {
        assert!((i as usize) < self.seg.layout.pool_capacity, "chunk index {i} out of range");
        // SAFETY: inside the chunk table.
        unsafe { self.seg.base().add(self.seg.layout.chunk_table).cast::<ChunkRecord>().add(i as usize) }
    }

    #[inline]
    pub(crate) fn chunk(&self, i: u32) -> ChunkRecord {
        // SAFETY: lock held; index checked.
        unsafe { self.chunk_ptr(i).read() }
    }

    #[inline]
    pub(crate) fn put_chunk(&mut self, i: u32, rec: ChunkRecord) {
        // SAFETY: lock held; index checked.
        unsafe { self.chunk_ptr(i).write(rec) }
    }

    #[inline]
    fn sub_ptr(&self, slot: u32) -> *mut SubscriberRecord {
        assert!(slot < MAX_SUBSCRIBERS, "subscriber slot {slot} out of range");
        // SAFETY: inside the subscriber table.
        unsafe { self.seg.base().add(self.seg.layout.subscriber_table).cast::<SubscriberRecord>().add(slot as usize) }
    }

    #[inline]
    pub(crate) fn sub(&self, slot: u32) -> SubscriberRecord {
        // SAFETY: lock held; slot checked.
        unsafe { self.sub_ptr(slot).read() }
    }

    #[inline]
    pub(crate) fn put_sub(&mut self, slot: u32, rec: SubscriberRecord) {
        // SAFETY: lock held; slot checked.
        unsafe { self.sub_ptr(slot).write(rec) }
    }

    #[inline]
    fn queue_ptr(&self, slot: u32, k: u32) -> *mut u32 {
        let depth = self.seg.layout.queue_depth;
        assert!(slot < MAX_SUBSCRIBERS && (k as usize) < depth);
        // SAFETY: inside the queue area.
        unsafe { self.seg.base().add(self.seg.layout.queues).cast::<u32>().add(slot as usize * depth + k as usize) }
    }

    #[inline]
    pub(crate) fn queue_entry(&self, slot: u32, k: u32) -> u32 {
        // SAFETY: lock held; bounds checked.
        unsafe { self.queue_ptr(slot, k).read() }
    }

    #[inline]
    pub(crate) fn set_queue_entry(&mut self, slot: u32, k: u32, chunk: u32) {
        // SAFETY: lock held; bounds checked.
        unsafe { self.queue_ptr(slot, k).write(chunk) }
    }

    pub(crate) fn pop_free(&mut self) -> Option<u32> {
        let h = self.h();
        // SAFETY: lock held.
        unsafe {
            if (*h).free_count == 0 {
                return None;
            }
            (*h).free_count -= 1;
            Some(self.seg.free_slot((*h).free_count as usize).read())
        }
    }

    pub(crate) fn push_free(&mut self, chunk: u32) {
        let h = self.h();
        // SAFETY: lock held; the stack cannot overflow because every chunk is pushed at most once.
        unsafe {
            assert!(((*h).free_count as usize) < self.seg.layout.pool_capacity, "free stack overflow");
            self.seg.free_slot((*h).free_count as usize).write(chunk);
            (*h).free_count += 1;
        }
    }

    pub(crate) fn free_entry(&self, k: u32) -> u32 {
        // SAFETY: lock held.
        unsafe { self.seg.free_slot(k as usize).read() }
    }

    pub(crate) fn notify_all(&self) {
        // SAFETY: cond initialized before the ready flag.
        unsafe { libc::pthread_cond_broadcast(ptr::addr_of_mut!((*self.h()).cond.0)) };
    }

    /// Waits for a notification or `deadline`. Returns false on timeout.
    pub(crate) fn wait_until(&mut self, deadline: &libc::timespec) -> bool {
        if clock::passed(deadline) {
            return false;
        }
        let h = self.h();
        // SAFETY: we hold the mutex, as pthread_cond_timedwait requires.
        let rc = unsafe { libc::pthread_cond_timedwait(ptr::addr_of_mut!((*h).cond.0), ptr::addr_of_mut!((*h).mutex.0), deadline) };
        match rc {
            libc::ETIMEDOUT => false,
            rc => {
                self.seg.check_lock(rc);
                true
            }
        }
    }
}

impl Drop for Guard<'_> {
    fn drop(&mut self) {
        // SAFETY: this guard holds the mutex.
        unsafe { libc::pthread_mutex_unlock(ptr::addr_of_mut!((*self.h()).mutex.0)) };
    }
}
