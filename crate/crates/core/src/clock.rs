//! Simulation-friendly clock. The engine never reads the OS clock directly;
//! everything flows through a `Clock` so a run can execute on virtual time
//! and stay deterministic.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone)]
pub enum Clock {
    /// Nanosecond counter advanced explicitly by the scheduler.
    Virtual(Arc<AtomicU64>),
    Wall,
}

impl Clock {
    pub fn virtual_at(start_ns: u64) -> Clock {
        Clock::Virtual(Arc::new(AtomicU64::new(start_ns)))
    }

    pub fn now_ns(&self) -> u64 {
        match self {
            Clock::Virtual(ns) => ns.load(Ordering::SeqCst),
            Clock::Wall => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .expect("wall clock before epoch")
                .as_nanos() as u64,
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ns() / 1_000_000
    }

    /// Move a virtual clock forward to `target_ns` (no-op if already past).
    /// Panics on a wall clock: the scheduler must not drive real time.
    pub fn advance_to_ns(&self, target_ns: u64) {
        match self {
            Clock::Virtual(ns) => {
                ns.fetch_max(target_ns, Ordering::SeqCst);
            }
            Clock::Wall => panic!("cannot advance a wall clock"),
        }
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }
}

pub const MS_IN_NS: u64 = 1_000_000;
pub const SEC_IN_NS: u64 = 1_000_000_000;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_advances_monotonically() {
        let clock = Clock::virtual_at(0);
        assert_eq!(clock.now_ns(), 0);
        clock.advance_to_ns(5 * MS_IN_NS);
        assert_eq!(clock.now_ms(), 5);
        // Backwards target is ignored.
        clock.advance_to_ns(MS_IN_NS);
        assert_eq!(clock.now_ms(), 5);
    }

    #[test]
    fn shared_handle_sees_advances() {
        let clock = Clock::virtual_at(100);
        let other = clock.clone();
        clock.advance_to_ns(7_000);
        assert_eq!(other.now_ns(), 7_000);
    }

    #[test]
    fn wall_clock_moves() {
        let clock = Clock::Wall;
        let a = clock.now_ns();
        let b = clock.now_ns();
        assert!(b >= a);
    }
}
