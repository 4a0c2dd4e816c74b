use std::time::Duration;

fn read(clock: libc::clockid_t) -> libc::timespec {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid out pointer and the clock ids used here always exist on Linux.
    let rc = unsafe { libc::clock_gettime(clock, &mut ts) };
    assert_eq!(rc, 0, "clock_gettime failed");
    ts
}

fn nanos(ts: libc::timespec) -> u64 {
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

/// Monotonic clock in nanoseconds, comparable across processes on one host.
pub fn monotonic_ns() -> u64 {
    nanos(read(libc::CLOCK_MONOTONIC))
}

/// CPU time consumed by the calling thread.
pub fn thread_cpu_ns() -> u64 {
    nanos(read(libc::CLOCK_THREAD_CPUTIME_ID))
}

/// CPU time consumed by the whole process.
pub fn process_cpu_ns() -> u64 {
    nanos(read(libc::CLOCK_PROCESS_CPUTIME_ID))
}

pub(crate) fn deadline_after(timeout: Duration) -> libc::timespec {
    let now = read(libc::CLOCK_MONOTONIC);
    let total = now.tv_nsec as u128 + timeout.as_nanos().min(u64::MAX as u128 / 2);
    libc::timespec {
        tv_sec: now.tv_sec.saturating_add((total / 1_000_000_000) as libc::time_t),
        tv_nsec: (total % 1_000_000_000) as libc::c_long,
    }
}

pub(crate) fn passed(deadline: &libc::timespec) -> bool {
    let now = read(libc::CLOCK_MONOTONIC);
    (now.tv_sec, now.tv_nsec) >= (deadline.tv_sec, deadline.tv_nsec)
}
