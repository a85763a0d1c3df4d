//! Hybrid logical clock timestamps and the oracle that issues them.
//!
//! Every logged request carries one of these timestamps as its LSN, so the
//! encoding doubles as a global sequence number.

use serde::{Deserialize, Serialize};

/// Bits reserved for the logical (event-order) component.
pub const LOGICAL_BITS: u32 = 18;
/// Largest logical counter value within one millisecond.
pub const LOGICAL_MAX: u64 = (1 << LOGICAL_BITS) - 1;

/// A hybrid logical clock value packed into a single `u64`:
/// 46 bits of physical milliseconds, 18 bits of logical counter.
///
/// The packing is order-preserving, so comparing encoded values compares
/// `(physical, logical)` lexicographically.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct HlcTimestamp(u64);

impl HlcTimestamp {
    pub const ZERO: HlcTimestamp = HlcTimestamp(0);
    pub const MAX: HlcTimestamp = HlcTimestamp(u64::MAX);

    pub fn new(physical_ms: u64, logical: u64) -> Self {
        debug_assert!(logical <= LOGICAL_MAX);
        HlcTimestamp((physical_ms << LOGICAL_BITS) | (logical & LOGICAL_MAX))
    }

    pub fn from_raw(raw: u64) -> Self {
        HlcTimestamp(raw)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn physical_ms(self) -> u64 {
        self.0 >> LOGICAL_BITS
    }

    pub fn logical(self) -> u64 {
        self.0 & LOGICAL_MAX
    }

    /// Physical-time difference `self - other` in milliseconds, saturating at
    /// zero. Staleness tolerances compare physical components only.
    pub fn physical_delta_ms(self, other: HlcTimestamp) -> u64 {
        self.physical_ms().saturating_sub(other.physical_ms())
    }
}

impl std::fmt::Display for HlcTimestamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.physical_ms(), self.logical())
    }
}

/// Clock state behind the timestamp oracle. Single mutator; every issued
/// timestamp is strictly greater than the previous one.
#[derive(Debug, Clone, Default)]
pub struct HlcClock {
    last: HlcTimestamp,
}

impl HlcClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Issue the next timestamp for wall/virtual time `now_ms`.
    ///
    /// The physical component never moves backwards even if `now_ms` does,
    /// and logical-counter exhaustion rolls into the next millisecond rather
    /// than failing.
    pub fn tick(&mut self, now_ms: u64) -> HlcTimestamp {
        let next = if now_ms > self.last.physical_ms() {
            HlcTimestamp::new(now_ms, 0)
        } else if self.last.logical() < LOGICAL_MAX {
            HlcTimestamp::new(self.last.physical_ms(), self.last.logical() + 1)
        } else {
            HlcTimestamp::new(self.last.physical_ms() + 1, 0)
        };
        self.last = next;
        next
    }

    pub fn last_issued(&self) -> HlcTimestamp {
        self.last
    }

    /// Fast-forward so future timestamps stay above an externally observed
    /// one (used when recovering state from a persisted log).
    pub fn observe(&mut self, ts: HlcTimestamp) {
        if ts > self.last {
            self.last = ts;
        }
    }
}
