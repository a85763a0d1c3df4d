//! Proxy: the request entry point. Keeps a catalog cache fed from the DDL
//! channel and a per-collection node-coverage cache from coordination
//! metadata, rejects bad requests before any node traffic, stamps read
//! timestamps, routes writes through the hash ring, and folds node-wise
//! partial results into the global top-k.

use std::collections::{BTreeMap, BTreeSet};

use logvec_core::error::{EngineError, Result};
use logvec_core::filter::FilterExpr;
use logvec_core::hlc::HlcTimestamp;
use logvec_core::log::{EntryKind, SubscriberPosition, DDL_CHANNEL};
use logvec_core::metric::Metric;
use logvec_core::records::{self, DdlRecord};
use logvec_core::ring::{route, HashRing, Route};
use logvec_core::schema::{validate_entity, Entity, PkType, PkValue, Validation};
use logvec_core::segment::CollectionId;

use crate::catalog::CollectionInfo;
use crate::ctx::Ctx;
use crate::meta::MetaStore;
use crate::querynode::{dedup_ranked, ScoredPk};

/// Meta key the query coordinator keeps a collection's node coverage under
/// (sorted node ids with any hosted segment or mirror of the collection).
pub fn distribution_key(collection_id: CollectionId) -> String {
    format!("distribution/{collection_id}")
}

/// A verified insert, ready to hand to the routed logger.
#[derive(Debug, Clone)]
pub struct InsertPlan {
    pub info: CollectionInfo,
    pub entity: Entity,
    pub route: Route,
}

/// A verified delete.
#[derive(Debug, Clone)]
pub struct DeletePlan {
    pub info: CollectionInfo,
    pub pk: PkValue,
    pub route: Route,
}

/// Unverified search arguments as they arrive at the proxy.
#[derive(Debug, Clone)]
pub struct SearchArgs<'a> {
    pub collection: &'a str,
    pub vector: &'a [f32],
    pub k: usize,
    pub metric: Metric,
    pub tau_ms: Option<u64>,
    pub filter: Option<&'a str>,
}

/// A verified search: the read timestamp is assigned, the filter is parsed
/// against the schema, and `nodes` is every node to dispatch to.
#[derive(Debug, Clone)]
pub struct SearchPlan {
    pub info: CollectionInfo,
    pub read_ts: HlcTimestamp,
    pub k: usize,
    pub metric: Metric,
    pub tau_ms: Option<u64>,
    pub filter: Option<FilterExpr>,
    pub nodes: Vec<u64>,
}

pub struct Proxy {
    pub node_id: u64,
    catalog: BTreeMap<String, CollectionInfo>,
    distribution: BTreeMap<CollectionId, Vec<u64>>,
    ddl_position: SubscriberPosition,
}

impl Proxy {
    pub fn new(node_id: u64) -> Proxy {
        Proxy {
            node_id,
            catalog: BTreeMap::new(),
            distribution: BTreeMap::new(),
            ddl_position: SubscriberPosition::default(),
        }
    }

    /// Tail the DDL channel into the catalog cache. A fresh proxy replays the
    /// channel from the start, which rebuilds the full catalog.
    pub fn pump(&mut self, ctx: &Ctx) -> Result<bool> {
        let mut progressed = false;
        loop {
            let batch = self.ddl_position.consume(ctx.broker, DDL_CHANNEL, 256)?;
            if batch.is_empty() {
                break;
            }
            progressed = true;
            for (_, entry) in batch {
                if entry.kind != EntryKind::Ddl {
                    continue;
                }
                match records::decode(&entry.payload)? {
                    DdlRecord::CreateCollection { collection_id, name, schema, shard_count } => {
                        self.catalog.insert(
                            name.clone(),
                            CollectionInfo { collection_id, name, schema, shard_count },
                        );
                    }
                    DdlRecord::DropCollection { collection_id, name } => {
                        self.catalog.remove(&name);
                        self.distribution.remove(&collection_id);
                    }
                }
            }
        }
        Ok(progressed)
    }

    fn resolve(&self, name: &str) -> Result<CollectionInfo> {
        self.catalog
            .get(name)
            .cloned()
            .ok_or_else(|| EngineError::UnknownCollection(name.to_string()))
    }

    pub fn knows(&self, name: &str) -> bool {
        self.catalog.contains_key(name)
    }

    /// Node coverage for a collection, re-read from meta when the cache has
    /// no entry yet.
    fn nodes_for(&mut self, meta: &MetaStore, collection_id: CollectionId) -> Result<Vec<u64>> {
        if !self.distribution.contains_key(&collection_id) {
            self.refresh_distribution(meta, collection_id)?;
        }
        Ok(self.distribution.get(&collection_id).cloned().unwrap_or_default())
    }

    pub fn refresh_distribution(
        &mut self,
        meta: &MetaStore,
        collection_id: CollectionId,
    ) -> Result<()> {
        let nodes: Vec<u64> =
            meta.get_json(&distribution_key(collection_id))?.unwrap_or_default();
        self.distribution.insert(collection_id, nodes);
        Ok(())
    }

    /// Drop cached coverage so the next search re-reads it; called when the
    /// proxy hears placement changed.
    pub fn invalidate_distribution(&mut self, collection_id: CollectionId) {
        self.distribution.remove(&collection_id);
    }

    pub fn prepare_insert(
        &mut self,
        ctx: &mut Ctx,
        ring: &HashRing,
        collection: &str,
        mut entity: Entity,
    ) -> Result<InsertPlan> {
        let info = self.resolve(collection)?;
        match validate_entity(&info.schema, &entity) {
            Validation::Violations(violations) => {
                return Err(EngineError::SchemaViolation(violations))
            }
            Validation::Ok { needs_auto_pk } => {
                if needs_auto_pk {
                    let ts = ctx.broker.allocate_timestamp();
                    entity.pk = Some(match info.schema.pk_type {
                        PkType::Int => PkValue::Int(ts.raw() as i64),
                        PkType::Str => PkValue::Str(format!("auto-{}", ts.raw())),
                    });
                }
            }
        }
        let pk = entity.pk.as_ref().expect("validated");
        let route = route(ring, info.collection_id, info.shard_count, pk)?;
        Ok(InsertPlan { info, entity, route })
    }

    pub fn prepare_delete(
        &mut self,
        ring: &HashRing,
        collection: &str,
        pk: PkValue,
    ) -> Result<DeletePlan> {
        let info = self.resolve(collection)?;
        let route = route(ring, info.collection_id, info.shard_count, &pk)?;
        Ok(DeletePlan { info, pk, route })
    }

    pub fn prepare_search(&mut self, ctx: &mut Ctx, args: &SearchArgs) -> Result<SearchPlan> {
        let info = self.resolve(args.collection)?;
        if args.k == 0 {
            return Err(EngineError::InvalidParam("k must be at least 1".to_string()));
        }
        let dim = info.schema.primary_dim();
        if args.vector.len() != dim {
            return Err(EngineError::DimensionMismatch { expected: dim, got: args.vector.len() });
        }
        let filter = match args.filter {
            Some(text) => Some(FilterExpr::parse(text, &info.schema)?),
            None => None,
        };
        let nodes = self.nodes_for(ctx.meta, info.collection_id)?;
        let read_ts = ctx.broker.allocate_timestamp();
        Ok(SearchPlan {
            info,
            read_ts,
            k: args.k,
            metric: args.metric,
            tau_ms: args.tau_ms,
            filter,
            nodes,
        })
    }
}

/// Fold node-wise partials into the global top-k: duplicate pks collapse to
/// their best score, ties break by pk ascending.
pub fn reduce_global(metric: Metric, k: usize, partials: Vec<Vec<ScoredPk>>) -> Vec<ScoredPk> {
    let mut all: Vec<ScoredPk> = partials.into_iter().flatten().collect();
    dedup_ranked(metric, &mut all);
    all.truncate(k);
    all
}

/// Partial answers are an error, never a silently truncated result.
pub fn check_coverage(expected: &[u64], responded: &BTreeSet<u64>) -> Result<()> {
    let missing: Vec<u64> =
        expected.iter().copied().filter(|n| !responded.contains(n)).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(EngineError::PartialCoverage { nodes: missing })
    }
}

/// One dispatch group: requests against the same collection with the same
/// similarity function ride together.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub collection_id: CollectionId,
    pub metric: Metric,
    /// Indexes into the pending list, in arrival order.
    pub requests: Vec<usize>,
}

pub fn batch_requests(pending: &[(CollectionId, Metric)]) -> Vec<Batch> {
    let mut batches: Vec<Batch> = Vec::new();
    for (i, (collection_id, metric)) in pending.iter().enumerate() {
        match batches
            .iter_mut()
            .find(|b| b.collection_id == *collection_id && b.metric == *metric)
        {
            Some(b) => b.requests.push(i),
            None => batches.push(Batch {
                collection_id: *collection_id,
                metric: *metric,
                requests: vec![i],
            }),
        }
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use logvec_core::clock::Clock;
    use logvec_core::log::Broker;
    use logvec_core::metric::distance;
    use logvec_core::schema::Schema;
    use logvec_core::store::ObjectStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::config::EngineConfig;

    struct Bed {
        _dir: tempfile::TempDir,
        broker: Broker,
        meta: MetaStore,
        store: ObjectStore,
        config: EngineConfig,
    }

    impl Bed {
        fn ctx(&mut self) -> Ctx<'_> {
            Ctx {
                broker: &mut self.broker,
                meta: &mut self.meta,
                store: &self.store,
                config: &self.config,
            }
        }
    }

    fn fresh() -> Bed {
        let dir = tempfile::tempdir().unwrap();
        let mut broker = Broker::open(dir.path(), Clock::virtual_at(1_000 * 1_000_000)).unwrap();
        broker.ensure_channel(DDL_CHANNEL).unwrap();
        let meta = MetaStore::open(&dir.path().join("meta")).unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        Bed { _dir: dir, broker, meta, store, config: EngineConfig::default() }
    }

    fn announce(bed: &mut Bed, info: &CollectionInfo) {
        let record = DdlRecord::CreateCollection {
            collection_id: info.collection_id,
            name: info.name.clone(),
            schema: info.schema.clone(),
            shard_count: info.shard_count,
        };
        bed.broker.publish(DDL_CHANNEL, EntryKind::Ddl, records::encode(&record)).unwrap();
    }

    fn info() -> CollectionInfo {
        let mut schema = Schema::simple(2);
        schema.numeric_fields.push(logvec_core::schema::NumericField {
            name: "price".to_string(),
            kind: logvec_core::schema::NumericType::Float,
        });
        CollectionInfo { collection_id: 1, name: "items".to_string(), schema, shard_count: 4 }
    }

    fn entity(pk: i64) -> Entity {
        let mut e = Entity::new(Some(PkValue::Int(pk)), vec![pk as f32, 0.0]);
        e.numerics.insert("price".to_string(), logvec_core::schema::NumericValue::Float(9.5));
        e
    }

    #[test]
    fn ddl_channel_feeds_the_catalog_cache() {
        let mut bed = fresh();
        let info = info();
        announce(&mut bed, &info);
        let mut proxy = Proxy::new(1);
        assert!(!proxy.knows("items"));
        proxy.pump(&bed.ctx()).unwrap();
        assert!(proxy.knows("items"));

        let args = SearchArgs {
            collection: "items",
            vector: &[0.0, 0.0],
            k: 5,
            metric: Metric::Euclidean,
            tau_ms: Some(100),
            filter: None,
        };
        let plan = proxy.prepare_search(&mut bed.ctx(), &args).unwrap();
        assert_eq!(plan.info.collection_id, 1);
        assert_eq!(plan.nodes, Vec::<u64>::new(), "no coverage recorded yet");

        let record = DdlRecord::DropCollection { collection_id: 1, name: "items".to_string() };
        bed.broker.publish(DDL_CHANNEL, EntryKind::Ddl, records::encode(&record)).unwrap();
        proxy.pump(&bed.ctx()).unwrap();
        assert!(matches!(
            proxy.prepare_search(&mut bed.ctx(), &args),
            Err(EngineError::UnknownCollection(_))
        ));

        // A proxy attaching late replays the whole channel and ends up at the
        // same state.
        let mut late = Proxy::new(2);
        late.pump(&bed.ctx()).unwrap();
        assert!(!late.knows("items"));
    }

    #[test]
    fn rejects_bad_requests_before_dispatch() {
        let mut bed = fresh();
        announce(&mut bed, &info());
        let mut proxy = Proxy::new(1);
        proxy.pump(&bed.ctx()).unwrap();

        let good = SearchArgs {
            collection: "items",
            vector: &[1.0, 2.0],
            k: 3,
            metric: Metric::Euclidean,
            tau_ms: None,
            filter: None,
        };
        assert!(matches!(
            proxy.prepare_search(&mut bed.ctx(), &SearchArgs { collection: "ghost", ..good.clone() }),
            Err(EngineError::UnknownCollection(_))
        ));
        assert!(matches!(
            proxy.prepare_search(&mut bed.ctx(), &SearchArgs { k: 0, ..good.clone() }),
            Err(EngineError::InvalidParam(_))
        ));
        assert!(matches!(
            proxy.prepare_search(&mut bed.ctx(), &SearchArgs { vector: &[1.0], ..good.clone() }),
            Err(EngineError::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(matches!(
            proxy.prepare_search(
                &mut bed.ctx(),
                &SearchArgs { filter: Some("price <"), ..good.clone() }
            ),
            Err(EngineError::Filter(_))
        ));
        assert!(matches!(
            proxy.prepare_search(
                &mut bed.ctx(),
                &SearchArgs { filter: Some("color = \"red\""), ..good.clone() }
            ),
            Err(EngineError::Filter(_))
        ));
        let plan = proxy
            .prepare_search(&mut bed.ctx(), &SearchArgs { filter: Some("price < 100"), ..good })
            .unwrap();
        assert!(plan.filter.is_some());
    }

    #[test]
    fn inserts_validate_route_and_fill_auto_pks() {
        let mut bed = fresh();
        let info = info();
        announce(&mut bed, &info);
        let mut proxy = Proxy::new(1);
        proxy.pump(&bed.ctx()).unwrap();
        let mut ring = HashRing::new(64);
        ring.add_logger(1);
        ring.add_logger(2);

        let plan = proxy.prepare_insert(&mut bed.ctx(), &ring, "items", entity(42)).unwrap();
        assert_eq!(plan.route, route(&ring, 1, 4, &PkValue::Int(42)).unwrap());
        assert_eq!(plan.entity.pk, Some(PkValue::Int(42)));

        let bad = Entity::new(Some(PkValue::Int(1)), vec![1.0]);
        match proxy.prepare_insert(&mut bed.ctx(), &ring, "items", bad) {
            Err(EngineError::SchemaViolation(violations)) => {
                assert!(violations.iter().any(|v| v.contains("dimension")), "{violations:?}");
                assert!(violations.iter().any(|v| v.contains("price")), "{violations:?}");
            }
            other => panic!("expected schema violations, got {other:?}"),
        }

        // Omitted pk on an auto-pk schema gets a fresh one per request.
        let mut no_pk = entity(0);
        no_pk.pk = None;
        let a = proxy.prepare_insert(&mut bed.ctx(), &ring, "items", no_pk.clone()).unwrap();
        let b = proxy.prepare_insert(&mut bed.ctx(), &ring, "items", no_pk).unwrap();
        assert!(a.entity.pk.is_some() && b.entity.pk.is_some());
        assert_ne!(a.entity.pk, b.entity.pk);

        let del = proxy.prepare_delete(&ring, "items", PkValue::Int(42)).unwrap();
        assert_eq!(del.route, plan.route);
    }

    #[test]
    fn distribution_cache_follows_meta() {
        let mut bed = fresh();
        announce(&mut bed, &info());
        let mut proxy = Proxy::new(1);
        proxy.pump(&bed.ctx()).unwrap();
        bed.meta.set_json(&distribution_key(1), &vec![5u64, 7]).unwrap();

        let args = SearchArgs {
            collection: "items",
            vector: &[0.0, 0.0],
            k: 1,
            metric: Metric::Euclidean,
            tau_ms: None,
            filter: None,
        };
        let plan = proxy.prepare_search(&mut bed.ctx(), &args).unwrap();
        assert_eq!(plan.nodes, vec![5, 7]);

        // Placement changes are picked up after invalidation.
        bed.meta.set_json(&distribution_key(1), &vec![5u64, 7, 9]).unwrap();
        let plan = proxy.prepare_search(&mut bed.ctx(), &args).unwrap();
        assert_eq!(plan.nodes, vec![5, 7], "cache still serves the old view");
        proxy.invalidate_distribution(1);
        let plan = proxy.prepare_search(&mut bed.ctx(), &args).unwrap();
        assert_eq!(plan.nodes, vec![5, 7, 9]);
    }

    /// Random partition of a small dataset into per-node partials: the global
    /// reduce must equal single-machine brute force, with duplicates (the
    /// same pk reported by two nodes) collapsed.
    #[test]
    fn reduce_matches_brute_force_and_collapses_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let query = [0.25f32, -0.5];
        let rows: Vec<(PkValue, Vec<f32>)> = (0..60)
            .map(|pk| (PkValue::Int(pk), vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]))
            .collect();
        for metric in [Metric::Euclidean, Metric::InnerProduct] {
            let mut oracle: Vec<ScoredPk> = rows
                .iter()
                .map(|(pk, v)| ScoredPk {
                    pk: pk.clone(),
                    score: distance(metric, &query, v).unwrap(),
                })
                .collect();
            oracle.sort_by(|a, b| crate::querynode::hit_order(metric, a, b));
            oracle.truncate(10);

            // 3 nodes, each holding a random subset; one pk duplicated on
            // every node (redistribution overlap).
            let mut partials: Vec<Vec<ScoredPk>> = vec![Vec::new(); 3];
            for (pk, v) in &rows {
                let node = rng.gen_range(0..3);
                let hit = ScoredPk {
                    pk: pk.clone(),
                    score: distance(metric, &query, v).unwrap(),
                };
                if *pk == PkValue::Int(0) {
                    for p in partials.iter_mut() {
                        p.push(hit.clone());
                    }
                } else {
                    partials[node].push(hit);
                }
            }
            for p in partials.iter_mut() {
                dedup_ranked(metric, p);
                p.truncate(10);
            }
            let got = reduce_global(metric, 10, partials);
            assert_eq!(got, oracle, "metric {metric:?}");
            let mut pks: Vec<&PkValue> = got.iter().map(|h| &h.pk).collect();
            pks.dedup();
            assert_eq!(pks.len(), got.len(), "duplicate pks in the result");
        }
    }

    #[test]
    fn single_partial_passes_through_truncated() {
        let partial = vec![
            ScoredPk { pk: PkValue::Int(1), score: 0.1 },
            ScoredPk { pk: PkValue::Int(2), score: 0.2 },
            ScoredPk { pk: PkValue::Int(3), score: 0.3 },
        ];
        let got = reduce_global(Metric::Euclidean, 2, vec![partial.clone()]);
        assert_eq!(got, partial[..2].to_vec());
    }

    #[test]
    fn coverage_check_names_the_missing_nodes() {
        let responded: BTreeSet<u64> = [1, 3].into_iter().collect();
        assert!(check_coverage(&[1, 3], &responded).is_ok());
        match check_coverage(&[1, 2, 3, 4], &responded) {
            Err(EngineError::PartialCoverage { nodes }) => assert_eq!(nodes, vec![2, 4]),
            other => panic!("expected partial coverage, got {other:?}"),
        }
    }

    #[test]
    fn batches_group_by_collection_and_metric() {
        let pending = [
            (1u64, Metric::Euclidean),
            (1, Metric::InnerProduct),
            (1, Metric::Euclidean),
            (2, Metric::Euclidean),
            (1, Metric::InnerProduct),
        ];
        let batches = batch_requests(&pending);
        assert_eq!(
            batches,
            vec![
                Batch { collection_id: 1, metric: Metric::Euclidean, requests: vec![0, 2] },
                Batch { collection_id: 1, metric: Metric::InnerProduct, requests: vec![1, 4] },
                Batch { collection_id: 2, metric: Metric::Euclidean, requests: vec![3] },
            ]
        );
    }
}
