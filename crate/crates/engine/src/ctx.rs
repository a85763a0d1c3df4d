//! Borrow bundle handed to node and coordinator handlers: the shared
//! backbone (log broker, coordination metadata, object store, configuration)
//! a component is allowed to touch while handling one call.

use logvec_core::log::Broker;
use logvec_core::store::ObjectStore;

use crate::config::EngineConfig;
use crate::meta::MetaStore;

pub struct Ctx<'a> {
    pub broker: &'a mut Broker,
    pub meta: &'a mut MetaStore,
    pub store: &'a ObjectStore,
    pub config: &'a EngineConfig,
}

impl<'a> Ctx<'a> {
    pub fn now_ms(&self) -> u64 {
        self.broker.clock().now_ms()
    }

    pub fn now_ns(&self) -> u64 {
        self.broker.clock().now_ns()
    }
}
