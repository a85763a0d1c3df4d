//! Log-backbone vector database engine.
//!
//! The engine is organized around a write-ahead log that doubles as the
//! pub/sub spine between roles: proxies route requests, loggers make writes
//! durable and hash them onto log channels, data nodes consume channels into
//! segments, index nodes build ANN indexes over sealed segments, and query
//! nodes serve searches with tunable staleness. Coordinators keep the whole
//! thing placed, healthy, and garbage collected.
//!
//! Everything runs on an injected [`clock::Clock`] and seeded RNGs, so a
//! cluster can execute on virtual time inside a deterministic simulation.

pub mod binlog;
pub mod bucket;
pub mod clock;
pub mod error;
pub mod esmap;
pub mod filter;
pub mod hlc;
pub mod index;
pub mod kmeans;
pub mod log;
pub mod metric;
pub mod records;
pub mod ring;
pub mod schema;
pub mod segment;
pub mod store;

pub use error::{EngineError, Result};
pub use hlc::{HlcClock, HlcTimestamp};
pub use metric::Metric;
