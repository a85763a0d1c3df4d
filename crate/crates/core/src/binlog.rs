//! Columnar binlog files: the persisted form of a sealed segment, one file
//! per field plus the pk and lsn columns.
//!
//! Layout: header `magic "MBL1", version u16, collection_id u64,
//! segment_id u64, field_id u32, row_count u64, min_lsn u64, max_lsn u64`,
//! then the column body — fixed-width little-endian rows for vectors
//! (float32 × dim), numerics (int64 or float32) and LSNs (u64), and
//! `u32`-length-prefixed UTF-8 for strings.

use crate::error::{EngineError, Result};
use crate::hlc::HlcTimestamp;
use crate::schema::Schema;
use crate::segment::{CollectionId, SegmentId};

pub const BINLOG_MAGIC: &[u8; 4] = b"MBL1";
pub const BINLOG_VERSION: u16 = 1;

/// Reserved column names for the two system columns every segment has.
pub const PK_COLUMN: &str = "__pk";
pub const LSN_COLUMN: &str = "__lsn";
pub const PK_FIELD_ID: u32 = 0;
pub const LSN_FIELD_ID: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinlogHeader {
    pub collection_id: CollectionId,
    pub segment_id: SegmentId,
    pub field_id: u32,
    pub row_count: u64,
    pub min_lsn: HlcTimestamp,
    pub max_lsn: HlcTimestamp,
}

/// One decoded column body.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Int64(Vec<i64>),
    /// LSNs, one per row.
    Lsn(Vec<HlcTimestamp>),
    /// Row-major float32 values; `dim` = 1 for scalar float fields.
    Float32 { dim: usize, values: Vec<f32> },
    Utf8(Vec<String>),
}

/// What a reader expects a column body to contain; taken from the schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Int64,
    Lsn,
    Float32 { dim: usize },
    Utf8,
}

impl Column {
    pub fn rows(&self) -> usize {
        match self {
            Column::Int64(v) => v.len(),
            Column::Lsn(v) => v.len(),
            Column::Float32 { dim, values } => values.len() / dim.max(&1),
            Column::Utf8(v) => v.len(),
        }
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            Column::Int64(_) => ColumnKind::Int64,
            Column::Lsn(_) => ColumnKind::Lsn,
            Column::Float32 { dim, .. } => ColumnKind::Float32 { dim: *dim },
            Column::Utf8(_) => ColumnKind::Utf8,
        }
    }
}

/// Stable field-id assignment within a collection: pk = 0, lsn = 1, then
/// schema fields in declaration order (vectors, labels, numerics).
pub fn field_id(schema: &Schema, column: &str) -> Option<u32> {
    if column == PK_COLUMN {
        return Some(PK_FIELD_ID);
    }
    if column == LSN_COLUMN {
        return Some(LSN_FIELD_ID);
    }
    let mut id = LSN_FIELD_ID + 1;
    for f in &schema.vector_fields {
        if f.name == column {
            return Some(id);
        }
        id += 1;
    }
    for name in &schema.label_fields {
        if name == column {
            return Some(id);
        }
        id += 1;
    }
    for f in &schema.numeric_fields {
        if f.name == column {
            return Some(id);
        }
        id += 1;
    }
    None
}

/// Column names of every binlog file a sealed segment writes, in field-id
/// order.
pub fn column_names(schema: &Schema) -> Vec<String> {
    let mut names = vec![PK_COLUMN.to_string(), LSN_COLUMN.to_string()];
    names.extend(schema.vector_fields.iter().map(|f| f.name.clone()));
    names.extend(schema.label_fields.iter().cloned());
    names.extend(schema.numeric_fields.iter().map(|f| f.name.clone()));
    names
}

pub fn column_kind(schema: &Schema, column: &str) -> Option<ColumnKind> {
    if column == PK_COLUMN {
        return Some(match schema.pk_type {
            crate::schema::PkType::Int => ColumnKind::Int64,
            crate::schema::PkType::Str => ColumnKind::Utf8,
        });
    }
    if column == LSN_COLUMN {
        return Some(ColumnKind::Lsn);
    }
    if let Some(dim) = schema.dim_of(column) {
        return Some(ColumnKind::Float32 { dim });
    }
    if schema.label_fields.iter().any(|n| n == column) {
        return Some(ColumnKind::Utf8);
    }
    schema.numeric_fields.iter().find(|f| f.name == column).map(|f| match f.kind {
        crate::schema::NumericType::Int => ColumnKind::Int64,
        crate::schema::NumericType::Float => ColumnKind::Float32 { dim: 1 },
    })
}

pub fn encode(header: &BinlogHeader, column: &Column) -> Vec<u8> {
    debug_assert_eq!(header.row_count as usize, column.rows());
    let mut out = Vec::new();
    out.extend_from_slice(BINLOG_MAGIC);
    out.extend_from_slice(&BINLOG_VERSION.to_le_bytes());
    out.extend_from_slice(&header.collection_id.to_le_bytes());
    out.extend_from_slice(&header.segment_id.to_le_bytes());
    out.extend_from_slice(&header.field_id.to_le_bytes());
    out.extend_from_slice(&header.row_count.to_le_bytes());
    out.extend_from_slice(&header.min_lsn.raw().to_le_bytes());
    out.extend_from_slice(&header.max_lsn.raw().to_le_bytes());
    match column {
        Column::Int64(values) => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Column::Lsn(values) => {
            for v in values {
                out.extend_from_slice(&v.raw().to_le_bytes());
            }
        }
        Column::Float32 { values, .. } => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Column::Utf8(values) => {
            for s in values {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8], expect: ColumnKind, name: &str) -> Result<(BinlogHeader, Column)> {
    let corrupt = |reason: String| EngineError::Corrupt { path: name.to_string(), reason };
    if bytes.len() < 50 {
        return Err(corrupt(format!("binlog shorter than header: {} bytes", bytes.len())));
    }
    if &bytes[0..4] != BINLOG_MAGIC {
        return Err(corrupt("bad magic".to_string()));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != BINLOG_VERSION {
        return Err(corrupt(format!("unsupported binlog version {version}")));
    }
    let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let header = BinlogHeader {
        collection_id: u64_at(6),
        segment_id: u64_at(14),
        field_id: u32::from_le_bytes(bytes[22..26].try_into().unwrap()),
        row_count: u64_at(26),
        min_lsn: HlcTimestamp::from_raw(u64_at(34)),
        max_lsn: HlcTimestamp::from_raw(u64_at(42)),
    };
    let rows = header.row_count as usize;
    let body = &bytes[50..];
    let fixed = |width: usize| -> Result<&[u8]> {
        let need = rows * width;
        if body.len() != need {
            return Err(corrupt(format!("body is {} bytes, expected {need}", body.len())));
        }
        Ok(body)
    };
    let column = match expect {
        ColumnKind::Int64 => {
            let body = fixed(8)?;
            Column::Int64(
                body.chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        ColumnKind::Lsn => {
            let body = fixed(8)?;
            Column::Lsn(
                body.chunks_exact(8)
                    .map(|c| HlcTimestamp::from_raw(u64::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            )
        }
        ColumnKind::Float32 { dim } => {
            let body = fixed(4 * dim)?;
            Column::Float32 {
                dim,
                values: body
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            }
        }
        ColumnKind::Utf8 => {
            let mut values = Vec::with_capacity(rows);
            let mut at = 0usize;
            for _ in 0..rows {
                if body.len() - at < 4 {
                    return Err(corrupt("string column truncated".to_string()));
                }
                let len = u32::from_le_bytes(body[at..at + 4].try_into().unwrap()) as usize;
                at += 4;
                if body.len() - at < len {
                    return Err(corrupt("string column truncated".to_string()));
                }
                let s = std::str::from_utf8(&body[at..at + len])
                    .map_err(|e| corrupt(format!("invalid UTF-8: {e}")))?;
                values.push(s.to_string());
                at += len;
            }
            if at != body.len() {
                return Err(corrupt("trailing bytes after string column".to_string()));
            }
            Column::Utf8(values)
        }
    };
    Ok((header, column))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(rows: u64) -> BinlogHeader {
        BinlogHeader {
            collection_id: 1,
            segment_id: 2,
            field_id: 3,
            row_count: rows,
            min_lsn: HlcTimestamp::new(100, 0),
            max_lsn: HlcTimestamp::new(200, 5),
        }
    }

    #[test]
    fn vector_column_roundtrips_bit_exactly() {
        let values = vec![1.0f32, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0];
        let col = Column::Float32 { dim: 3, values: values.clone() };
        let bytes = encode(&header(2), &col);
        let (h, back) = decode(&bytes, ColumnKind::Float32 { dim: 3 }, "v").unwrap();
        assert_eq!(h, header(2));
        match back {
            Column::Float32 { dim, values: got } => {
                assert_eq!(dim, 3);
                assert_eq!(
                    got.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
                    values.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
                );
            }
            other => panic!("wrong column type: {other:?}"),
        }
    }

    #[test]
    fn int_lsn_and_string_columns_roundtrip() {
        let ints = Column::Int64(vec![i64::MIN, -1, 0, 7, i64::MAX]);
        let bytes = encode(&header(5), &ints);
        assert_eq!(decode(&bytes, ColumnKind::Int64, "pk").unwrap().1, ints);

        let lsns = Column::Lsn(vec![HlcTimestamp::new(1, 2), HlcTimestamp::new(3, 4)]);
        let bytes = encode(&header(2), &lsns);
        assert_eq!(decode(&bytes, ColumnKind::Lsn, "lsn").unwrap().1, lsns);

        let strs = Column::Utf8(vec!["".into(), "hej då".into(), "x".repeat(300)]);
        let bytes = encode(&header(3), &strs);
        assert_eq!(decode(&bytes, ColumnKind::Utf8, "label").unwrap().1, strs);
    }

    // Frozen golden image: the header layout must never drift.
    #[test]
    fn encoding_is_byte_stable() {
        let col = Column::Int64(vec![7]);
        let h = BinlogHeader {
            collection_id: 0x0102030405060708,
            segment_id: 0x1112131415161718,
            field_id: 0x21222324,
            row_count: 1,
            min_lsn: HlcTimestamp::from_raw(0x3132333435363738),
            max_lsn: HlcTimestamp::from_raw(0x4142434445464748),
        };
        let bytes = encode(&h, &col);
        let mut expect = Vec::new();
        expect.extend_from_slice(b"MBL1");
        expect.extend_from_slice(&1u16.to_le_bytes());
        expect.extend_from_slice(&0x0102030405060708u64.to_le_bytes());
        expect.extend_from_slice(&0x1112131415161718u64.to_le_bytes());
        expect.extend_from_slice(&0x21222324u32.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&0x3132333435363738u64.to_le_bytes());
        expect.extend_from_slice(&0x4142434445464748u64.to_le_bytes());
        expect.extend_from_slice(&7i64.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn wrong_sizes_and_magic_are_corrupt() {
        let col = Column::Int64(vec![1, 2]);
        let mut bytes = encode(&header(2), &col);
        assert!(decode(&bytes[..10], ColumnKind::Int64, "x").is_err());
        assert!(decode(&bytes, ColumnKind::Float32 { dim: 4 }, "x").is_err());
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes, ColumnKind::Int64, "x"),
            Err(EngineError::Corrupt { .. })
        ));
    }

    #[test]
    fn field_ids_follow_schema_order() {
        let mut schema = Schema::simple(4);
        schema.label_fields.push("category".into());
        schema.numeric_fields.push(crate::schema::NumericField {
            name: "price".into(),
            kind: crate::schema::NumericType::Float,
        });
        assert_eq!(field_id(&schema, PK_COLUMN), Some(0));
        assert_eq!(field_id(&schema, LSN_COLUMN), Some(1));
        assert_eq!(field_id(&schema, "vector"), Some(2));
        assert_eq!(field_id(&schema, "category"), Some(3));
        assert_eq!(field_id(&schema, "price"), Some(4));
        assert_eq!(field_id(&schema, "absent"), None);
        assert_eq!(
            column_names(&schema),
            vec!["__pk", "__lsn", "vector", "category", "price"]
        );
        assert_eq!(column_kind(&schema, "price"), Some(ColumnKind::Float32 { dim: 1 }));
    }
}
