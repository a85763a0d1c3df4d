//! One segment's rows held column-wise, and their conversion to and from
//! the per-column binlog objects.

use std::collections::BTreeMap;

use logvec_core::binlog::{self, BinlogHeader, Column};
use logvec_core::error::{EngineError, Result};
use logvec_core::filter::{FilterExpr, LabelOp, NumOp};
use logvec_core::hlc::HlcTimestamp;
use logvec_core::schema::{Entity, NumericType, NumericValue, PkType, PkValue, Schema};
use logvec_core::segment::{CollectionId, SegmentId};
use logvec_core::store::ObjectStore;

/// Object key of one column's binlog file.
pub fn binlog_key(collection_id: CollectionId, segment_id: SegmentId, column: &str) -> String {
    format!("collection/{collection_id}/segment/{segment_id}/binlog/{column}.mbl")
}

/// Binlog body bytes one entity contributes to its segment. The logger's
/// seal-by-size decision and the data node's buffer accounting both use
/// this, so they cross the threshold on the same row.
pub fn entity_body_bytes(schema: &Schema, entity: &Entity) -> u64 {
    let mut bytes = 8u64;
    bytes += match &entity.pk {
        Some(PkValue::Str(s)) => 4 + s.len() as u64,
        _ => 8,
    };
    for f in &schema.vector_fields {
        bytes += 4 * f.dim as u64;
    }
    for name in &schema.label_fields {
        bytes += 4 + entity.labels.get(name).map_or(0, |s| s.len() as u64);
    }
    for f in &schema.numeric_fields {
        bytes += match f.kind {
            NumericType::Int => 8,
            NumericType::Float => 4,
        };
    }
    bytes
}

/// Rows of one segment in column order. The logger's in-flight buffer, the
/// data node's conversion input, and a query node's reloaded sealed segment
/// are all this one type.
#[derive(Debug, Clone)]
pub struct SegmentRows {
    schema: Schema,
    pks: Vec<PkValue>,
    lsns: Vec<HlcTimestamp>,
    vectors: BTreeMap<String, Vec<f32>>,
    labels: BTreeMap<String, Vec<String>>,
    numerics: BTreeMap<String, Vec<NumericValue>>,
    /// Binlog body bytes of the rows held; the seal-by-size measure.
    bytes: u64,
}

impl SegmentRows {
    pub fn new(schema: Schema) -> SegmentRows {
        let vectors = schema.vector_fields.iter().map(|f| (f.name.clone(), Vec::new())).collect();
        let labels = schema.label_fields.iter().map(|n| (n.clone(), Vec::new())).collect();
        let numerics =
            schema.numeric_fields.iter().map(|f| (f.name.clone(), Vec::new())).collect();
        SegmentRows {
            schema,
            pks: Vec::new(),
            lsns: Vec::new(),
            vectors,
            labels,
            numerics,
            bytes: 0,
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.pks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pks.is_empty()
    }

    pub fn byte_size(&self) -> u64 {
        self.bytes
    }

    pub fn pks(&self) -> &[PkValue] {
        &self.pks
    }

    pub fn lsns(&self) -> &[HlcTimestamp] {
        &self.lsns
    }

    pub fn pk_at(&self, row: usize) -> &PkValue {
        &self.pks[row]
    }

    pub fn lsn_at(&self, row: usize) -> HlcTimestamp {
        self.lsns[row]
    }

    pub fn min_lsn(&self) -> HlcTimestamp {
        self.lsns.iter().min().copied().unwrap_or(HlcTimestamp::ZERO)
    }

    pub fn max_lsn(&self) -> HlcTimestamp {
        self.lsns.iter().max().copied().unwrap_or(HlcTimestamp::ZERO)
    }

    /// Concatenated row-major values of the schema's first vector field.
    pub fn primary_vectors(&self) -> &[f32] {
        let name = &self.schema.vector_fields[0].name;
        &self.vectors[name]
    }

    pub fn primary_dim(&self) -> usize {
        self.schema.primary_dim()
    }

    pub fn vector_column(&self, field: &str) -> Option<&[f32]> {
        self.vectors.get(field).map(|v| v.as_slice())
    }

    pub fn label_at(&self, field: &str, row: usize) -> Option<&str> {
        self.labels.get(field).map(|c| c[row].as_str())
    }

    pub fn numeric_at(&self, field: &str, row: usize) -> Option<NumericValue> {
        self.numerics.get(field).map(|c| c[row])
    }

    /// Append one fully-stamped entity: pk assigned, LSN set, attributes
    /// complete. Anything less is rejected so the columns stay total.
    pub fn push(&mut self, entity: &Entity) -> Result<()> {
        let mut problems = Vec::new();
        match (&entity.pk, self.schema.pk_type) {
            (Some(PkValue::Int(_)), PkType::Int) | (Some(PkValue::Str(_)), PkType::Str) => {}
            (Some(_), _) => problems.push("primary key type does not match schema".to_string()),
            (None, _) => problems.push("entity has no primary key".to_string()),
        }
        if entity.lsn.is_none() {
            problems.push("entity has no LSN".to_string());
        }
        for f in &self.schema.vector_fields {
            match entity.vectors.get(&f.name) {
                Some(v) if v.len() == f.dim => {}
                Some(v) => problems.push(format!(
                    "vector field {} has dimension {}, schema says {}",
                    f.name,
                    v.len(),
                    f.dim
                )),
                None => problems.push(format!("missing vector field {}", f.name)),
            }
        }
        for name in &self.schema.label_fields {
            if !entity.labels.contains_key(name) {
                problems.push(format!("missing label field {name}"));
            }
        }
        for f in &self.schema.numeric_fields {
            match entity.numerics.get(&f.name) {
                Some(v) if v.matches(f.kind) => {}
                Some(_) => problems.push(format!("numeric field {} has the wrong type", f.name)),
                None => problems.push(format!("missing numeric field {}", f.name)),
            }
        }
        if !problems.is_empty() {
            return Err(EngineError::SchemaViolation(problems));
        }

        self.bytes += entity_body_bytes(&self.schema, entity);
        self.pks.push(entity.pk.clone().expect("validated above"));
        self.lsns.push(entity.lsn.expect("validated above"));
        for f in &self.schema.vector_fields {
            self.vectors
                .get_mut(&f.name)
                .expect("declared field")
                .extend_from_slice(&entity.vectors[&f.name]);
        }
        for name in &self.schema.label_fields {
            self.labels.get_mut(name).expect("declared field").push(entity.labels[name].clone());
        }
        for f in &self.schema.numeric_fields {
            self.numerics.get_mut(&f.name).expect("declared field").push(entity.numerics[&f.name]);
        }
        Ok(())
    }

    pub fn entity_at(&self, row: usize) -> Entity {
        let mut vectors = BTreeMap::new();
        for f in &self.schema.vector_fields {
            let col = &self.vectors[&f.name];
            vectors.insert(f.name.clone(), col[row * f.dim..(row + 1) * f.dim].to_vec());
        }
        let mut labels = BTreeMap::new();
        for name in &self.schema.label_fields {
            labels.insert(name.clone(), self.labels[name][row].clone());
        }
        let mut numerics = BTreeMap::new();
        for f in &self.schema.numeric_fields {
            numerics.insert(f.name.clone(), self.numerics[&f.name][row]);
        }
        Entity {
            pk: Some(self.pks[row].clone()),
            vectors,
            labels,
            numerics,
            lsn: Some(self.lsns[row]),
        }
    }

    /// Column-backed evaluation of a filter on one row; same semantics as
    /// [`FilterExpr::matches`] on the row's attribute maps.
    pub fn matches_row(&self, expr: &FilterExpr, row: usize) -> bool {
        match expr {
            FilterExpr::And(a, b) => self.matches_row(a, row) && self.matches_row(b, row),
            FilterExpr::Or(a, b) => self.matches_row(a, row) || self.matches_row(b, row),
            FilterExpr::Not(e) => !self.matches_row(e, row),
            FilterExpr::Label { field, op, value } => match self.label_at(field, row) {
                Some(v) => match op {
                    LabelOp::Eq => v == value,
                    LabelOp::Ne => v != value,
                },
                None => false,
            },
            FilterExpr::Numeric { field, op, value } => match self.numeric_at(field, row) {
                Some(v) => {
                    let x = v.as_f64();
                    match op {
                        NumOp::Lt => x < *value,
                        NumOp::Le => x <= *value,
                        NumOp::Eq => x == *value,
                        NumOp::Ge => x >= *value,
                        NumOp::Gt => x > *value,
                    }
                }
                None => false,
            },
        }
    }

    fn column(&self, name: &str) -> Column {
        if name == binlog::PK_COLUMN {
            return match self.schema.pk_type {
                PkType::Int => Column::Int64(
                    self.pks
                        .iter()
                        .map(|pk| match pk {
                            PkValue::Int(v) => *v,
                            PkValue::Str(_) => unreachable!("push keeps the pk column homogeneous"),
                        })
                        .collect(),
                ),
                PkType::Str => Column::Utf8(
                    self.pks
                        .iter()
                        .map(|pk| match pk {
                            PkValue::Str(s) => s.clone(),
                            PkValue::Int(_) => unreachable!("push keeps the pk column homogeneous"),
                        })
                        .collect(),
                ),
            };
        }
        if name == binlog::LSN_COLUMN {
            return Column::Lsn(self.lsns.clone());
        }
        if let Some(f) = self.schema.vector_fields.iter().find(|f| f.name == name) {
            return Column::Float32 { dim: f.dim, values: self.vectors[name].clone() };
        }
        if let Some(col) = self.labels.get(name) {
            return Column::Utf8(col.clone());
        }
        let f = self
            .schema
            .numeric_fields
            .iter()
            .find(|f| f.name == name)
            .expect("column name from this schema");
        match f.kind {
            NumericType::Int => Column::Int64(
                self.numerics[name]
                    .iter()
                    .map(|v| match v {
                        NumericValue::Int(i) => *i,
                        NumericValue::Float(_) => unreachable!("push type-checks numerics"),
                    })
                    .collect(),
            ),
            NumericType::Float => Column::Float32 {
                dim: 1,
                values: self.numerics[name]
                    .iter()
                    .map(|v| match v {
                        NumericValue::Float(x) => *x,
                        NumericValue::Int(_) => unreachable!("push type-checks numerics"),
                    })
                    .collect(),
            },
        }
    }

    /// Persist every column and return `column name → object key`.
    pub fn write_binlogs(
        &self,
        store: &ObjectStore,
        collection_id: CollectionId,
        segment_id: SegmentId,
    ) -> Result<BTreeMap<String, String>> {
        let (min_lsn, max_lsn) = (self.min_lsn(), self.max_lsn());
        let mut paths = BTreeMap::new();
        for name in binlog::column_names(&self.schema) {
            let header = BinlogHeader {
                collection_id,
                segment_id,
                field_id: binlog::field_id(&self.schema, &name)
                    .expect("column name from this schema"),
                row_count: self.len() as u64,
                min_lsn,
                max_lsn,
            };
            let key = binlog_key(collection_id, segment_id, &name);
            store.put(&key, &binlog::encode(&header, &self.column(&name)))?;
            paths.insert(name, key);
        }
        Ok(paths)
    }

    /// Load a sealed segment back from its binlog objects.
    pub fn read_binlogs(
        store: &ObjectStore,
        schema: &Schema,
        paths: &BTreeMap<String, String>,
    ) -> Result<SegmentRows> {
        let mut rows = SegmentRows::new(schema.clone());
        let mut row_count: Option<u64> = None;
        for name in binlog::column_names(schema) {
            let key = paths.get(&name).ok_or_else(|| EngineError::Corrupt {
                path: name.clone(),
                reason: "segment descriptor lists no binlog for this column".to_string(),
            })?;
            let bytes = store.get(key)?;
            let kind = binlog::column_kind(schema, &name).expect("column name from this schema");
            let (header, column) = binlog::decode(&bytes, kind, key)?;
            let expect_id = binlog::field_id(schema, &name).expect("column name from this schema");
            if header.field_id != expect_id {
                return Err(EngineError::Corrupt {
                    path: key.clone(),
                    reason: format!(
                        "field id {} where {expect_id} was expected",
                        header.field_id
                    ),
                });
            }
            match row_count {
                None => row_count = Some(header.row_count),
                Some(n) if n == header.row_count => {}
                Some(n) => {
                    return Err(EngineError::Corrupt {
                        path: key.clone(),
                        reason: format!(
                            "row count {} disagrees with sibling columns ({n})",
                            header.row_count
                        ),
                    })
                }
            }
            rows.set_column(&name, key, column)?;
        }
        rows.recompute_bytes();
        Ok(rows)
    }

    fn set_column(&mut self, name: &str, key: &str, column: Column) -> Result<()> {
        let bad = || EngineError::Corrupt {
            path: key.to_string(),
            reason: "column body does not match the schema's type".to_string(),
        };
        if name == binlog::PK_COLUMN {
            self.pks = match (column, self.schema.pk_type) {
                (Column::Int64(v), PkType::Int) => v.into_iter().map(PkValue::Int).collect(),
                (Column::Utf8(v), PkType::Str) => v.into_iter().map(PkValue::Str).collect(),
                _ => return Err(bad()),
            };
            return Ok(());
        }
        if name == binlog::LSN_COLUMN {
            self.lsns = match column {
                Column::Lsn(v) => v,
                _ => return Err(bad()),
            };
            return Ok(());
        }
        if let Some(f) = self.schema.vector_fields.iter().find(|f| f.name == name) {
            match column {
                Column::Float32 { dim, values } if dim == f.dim => {
                    self.vectors.insert(name.to_string(), values);
                    return Ok(());
                }
                _ => return Err(bad()),
            }
        }
        if self.schema.label_fields.iter().any(|n| n == name) {
            match column {
                Column::Utf8(v) => {
                    self.labels.insert(name.to_string(), v);
                    return Ok(());
                }
                _ => return Err(bad()),
            }
        }
        let f = self
            .schema
            .numeric_fields
            .iter()
            .find(|f| f.name == name)
            .expect("column name from this schema");
        let values = match (column, f.kind) {
            (Column::Int64(v), NumericType::Int) => {
                v.into_iter().map(NumericValue::Int).collect()
            }
            (Column::Float32 { dim: 1, values }, NumericType::Float) => {
                values.into_iter().map(NumericValue::Float).collect()
            }
            _ => return Err(bad()),
        };
        self.numerics.insert(name.to_string(), values);
        Ok(())
    }

    fn recompute_bytes(&mut self) {
        let rows = self.pks.len() as u64;
        let mut bytes = 8 * rows;
        for pk in &self.pks {
            bytes += match pk {
                PkValue::Int(_) => 8,
                PkValue::Str(s) => 4 + s.len() as u64,
            };
        }
        for f in &self.schema.vector_fields {
            bytes += 4 * f.dim as u64 * rows;
        }
        for col in self.labels.values() {
            bytes += col.iter().map(|s| 4 + s.len() as u64).sum::<u64>();
        }
        for f in &self.schema.numeric_fields {
            bytes += rows
                * match f.kind {
                    NumericType::Int => 8,
                    NumericType::Float => 4,
                };
        }
        self.bytes = bytes;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use logvec_core::schema::NumericField;

    fn schema() -> Schema {
        let mut s = Schema::simple(4);
        s.label_fields.push("category".into());
        s.numeric_fields.push(NumericField { name: "price".into(), kind: NumericType::Float });
        s.numeric_fields.push(NumericField { name: "stock".into(), kind: NumericType::Int });
        s
    }

    fn entity(pk: i64) -> Entity {
        let x = pk as f32 * 0.5;
        let mut e = Entity::new(Some(PkValue::Int(pk)), vec![x, -x, 1.0, x * x]);
        e.labels.insert("category".into(), format!("c{}", pk % 3));
        e.numerics.insert("price".into(), NumericValue::Float(x * 10.0));
        e.numerics.insert("stock".into(), NumericValue::Int(pk * 2));
        e.lsn = Some(HlcTimestamp::new(1_000 + pk as u64, 3));
        e
    }

    fn filled(n: i64) -> SegmentRows {
        let mut rows = SegmentRows::new(schema());
        for pk in 0..n {
            rows.push(&entity(pk)).unwrap();
        }
        rows
    }

    #[test]
    fn roundtrips_through_binlogs() {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let rows = filled(7);
        let paths = rows.write_binlogs(&store, 3, 9).unwrap();
        assert_eq!(paths.len(), 6);
        assert_eq!(paths["vector"], "collection/3/segment/9/binlog/vector.mbl");
        let back = SegmentRows::read_binlogs(&store, &schema(), &paths).unwrap();
        assert_eq!(back.len(), 7);
        assert_eq!(back.byte_size(), rows.byte_size());
        assert_eq!((back.min_lsn(), back.max_lsn()), (rows.min_lsn(), rows.max_lsn()));
        for row in 0..7 {
            assert_eq!(back.entity_at(row), entity(row as i64));
        }
        assert_eq!(back.primary_vectors(), rows.primary_vectors());
    }

    #[test]
    fn string_pk_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let mut s = Schema::simple(2);
        s.pk_type = PkType::Str;
        s.auto_pk = false;
        let mut rows = SegmentRows::new(s.clone());
        for name in ["alpha", "beta"] {
            let mut e = Entity::new(Some(PkValue::Str(name.into())), vec![1.0, 2.0]);
            e.lsn = Some(HlcTimestamp::new(5, 0));
            rows.push(&e).unwrap();
        }
        let paths = rows.write_binlogs(&store, 1, 1).unwrap();
        let back = SegmentRows::read_binlogs(&store, &s, &paths).unwrap();
        assert_eq!(back.pk_at(1), &PkValue::Str("beta".into()));
        assert_eq!(back.byte_size(), rows.byte_size());
    }

    // byte_size is defined as binlog body bytes; check it against the files.
    #[test]
    fn byte_size_matches_persisted_bodies() {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let rows = filled(5);
        let paths = rows.write_binlogs(&store, 1, 2).unwrap();
        let header_len = binlog::encode(
            &BinlogHeader {
                collection_id: 0,
                segment_id: 0,
                field_id: 0,
                row_count: 0,
                min_lsn: HlcTimestamp::ZERO,
                max_lsn: HlcTimestamp::ZERO,
            },
            &Column::Int64(vec![]),
        )
        .len();
        let total: u64 = paths
            .values()
            .map(|key| (store.get(key).unwrap().len() - header_len) as u64)
            .sum();
        assert_eq!(rows.byte_size(), total);
    }

    #[test]
    fn push_rejects_incomplete_rows() {
        let mut rows = SegmentRows::new(schema());
        let mut no_lsn = entity(1);
        no_lsn.lsn = None;
        assert!(rows.push(&no_lsn).is_err());

        let mut bad_dim = entity(1);
        bad_dim.vectors.insert("vector".into(), vec![0.0; 3]);
        assert!(rows.push(&bad_dim).is_err());

        let mut no_label = entity(1);
        no_label.labels.clear();
        assert!(rows.push(&no_label).is_err());

        let mut wrong_numeric = entity(1);
        wrong_numeric.numerics.insert("stock".into(), NumericValue::Float(1.0));
        assert!(rows.push(&wrong_numeric).is_err());

        let mut no_pk = entity(1);
        no_pk.pk = None;
        assert!(rows.push(&no_pk).is_err());

        assert!(rows.is_empty(), "nothing was appended");
        assert_eq!(rows.byte_size(), 0);
    }

    // Oracle: the column-backed evaluator must agree with FilterExpr::matches
    // over reconstructed per-row attribute maps.
    #[test]
    fn matches_row_agrees_with_entity_matching() {
        let rows = filled(10);
        let s = schema();
        for text in [
            "category = c1",
            "price >= 20 and stock < 10",
            "not (category != c0 or price < 5)",
            "stock = 4 or (category = c2 and price > 0)",
        ] {
            let f = FilterExpr::parse(text, &s).unwrap();
            for row in 0..rows.len() {
                let e = rows.entity_at(row);
                assert_eq!(
                    rows.matches_row(&f, row),
                    f.matches(&e.labels, &e.numerics),
                    "filter {text:?} row {row}"
                );
            }
        }
    }

    #[test]
    fn read_with_missing_column_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let rows = filled(3);
        let mut paths = rows.write_binlogs(&store, 1, 2).unwrap();
        paths.remove("price");
        assert!(matches!(
            SegmentRows::read_binlogs(&store, &schema(), &paths),
            Err(EngineError::Corrupt { .. })
        ));
    }

    #[test]
    fn empty_segment_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let rows = SegmentRows::new(schema());
        let paths = rows.write_binlogs(&store, 1, 2).unwrap();
        let back = SegmentRows::read_binlogs(&store, &schema(), &paths).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.byte_size(), 0);
    }
}
