//! Collection schemas and the entities stored under them.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::hlc::HlcTimestamp;

/// Primary key value: integer or string, per the schema.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PkValue {
    Int(i64),
    Str(String),
}

impl std::fmt::Display for PkValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PkValue::Int(v) => write!(f, "{v}"),
            PkValue::Str(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PkType {
    Int,
    Str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorField {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericType {
    Int,
    Float,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericField {
    pub name: String,
    pub kind: NumericType,
}

/// A numeric attribute value, held at exactly the width the columnar
/// storage uses (int64 / float32) so persistence round-trips bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NumericValue {
    Int(i64),
    Float(f32),
}

impl NumericValue {
    pub fn as_f64(self) -> f64 {
        match self {
            NumericValue::Int(v) => v as f64,
            NumericValue::Float(v) => v as f64,
        }
    }

    pub fn matches(self, kind: NumericType) -> bool {
        matches!(
            (self, kind),
            (NumericValue::Int(_), NumericType::Int) | (NumericValue::Float(_), NumericType::Float)
        )
    }
}

/// Collection schema: one primary key, one or more fixed-dimension vector
/// fields, plus filter-only label (string) and numeric fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub pk_name: String,
    pub pk_type: PkType,
    /// When set, entities may omit the primary key and the system assigns an
    /// integer one.
    pub auto_pk: bool,
    pub vector_fields: Vec<VectorField>,
    pub label_fields: Vec<String>,
    pub numeric_fields: Vec<NumericField>,
}

impl Schema {
    /// Single-vector schema with an auto-assigned integer primary key.
    pub fn simple(dim: usize) -> Schema {
        Schema {
            pk_name: "pk".to_string(),
            pk_type: PkType::Int,
            auto_pk: true,
            vector_fields: vec![VectorField { name: "vector".to_string(), dim }],
            label_fields: Vec::new(),
            numeric_fields: Vec::new(),
        }
    }

    pub fn dim_of(&self, field: &str) -> Option<usize> {
        self.vector_fields.iter().find(|f| f.name == field).map(|f| f.dim)
    }

    /// Dimension of the first (primary) vector field.
    pub fn primary_dim(&self) -> usize {
        self.vector_fields.first().map(|f| f.dim).unwrap_or(0)
    }

    /// Structural validity of the schema itself.
    pub fn check(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if self.vector_fields.is_empty() {
            problems.push("schema needs at least one vector field".to_string());
        }
        for f in &self.vector_fields {
            if f.dim == 0 {
                problems.push(format!("vector field {} has dimension 0", f.name));
            }
        }
        if self.auto_pk && self.pk_type != PkType::Int {
            problems.push("auto-assigned primary keys must be integers".to_string());
        }
        let mut names = BTreeSet::new();
        let all = std::iter::once(self.pk_name.as_str())
            .chain(self.vector_fields.iter().map(|f| f.name.as_str()))
            .chain(self.label_fields.iter().map(|s| s.as_str()))
            .chain(self.numeric_fields.iter().map(|f| f.name.as_str()));
        for name in all {
            if !names.insert(name) {
                problems.push(format!("duplicate field name {name}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

/// One row: primary key, vectors, filterable attributes, and the LSN the
/// logger stamped on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub pk: Option<PkValue>,
    pub vectors: BTreeMap<String, Vec<f32>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub numerics: BTreeMap<String, NumericValue>,
    /// Assigned exactly once, at log time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lsn: Option<HlcTimestamp>,
}

impl Entity {
    pub fn new(pk: Option<PkValue>, vector: Vec<f32>) -> Entity {
        let mut vectors = BTreeMap::new();
        vectors.insert("vector".to_string(), vector);
        Entity { pk, vectors, labels: BTreeMap::new(), numerics: BTreeMap::new(), lsn: None }
    }

    pub fn primary_vector<'a>(&'a self, schema: &Schema) -> Option<&'a [f32]> {
        let name = &schema.vector_fields.first()?.name;
        self.vectors.get(name).map(|v| v.as_slice())
    }
}

/// Outcome of validating an entity against a schema.
#[derive(Debug, Clone, PartialEq)]
pub enum Validation {
    /// `needs_auto_pk` is set when the pk was omitted and the schema allows
    /// the system to assign one.
    Ok { needs_auto_pk: bool },
    Violations(Vec<String>),
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        matches!(self, Validation::Ok { .. })
    }
}

/// Collects every schema violation rather than stopping at the first; an
/// invalid entity is data, not a fault.
pub fn validate_entity(schema: &Schema, entity: &Entity) -> Validation {
    let mut violations = Vec::new();
    let mut needs_auto_pk = false;

    match &entity.pk {
        None => {
            if schema.auto_pk {
                needs_auto_pk = true;
            } else {
                violations.push(format!("missing primary key field {}", schema.pk_name));
            }
        }
        Some(PkValue::Int(_)) => {
            if schema.pk_type != PkType::Int {
                violations.push(format!("primary key {} must be a string", schema.pk_name));
            }
        }
        Some(PkValue::Str(_)) => {
            if schema.pk_type != PkType::Str {
                violations.push(format!("primary key {} must be an integer", schema.pk_name));
            }
        }
    }

    for field in &schema.vector_fields {
        match entity.vectors.get(&field.name) {
            None => violations.push(format!("missing vector field {}", field.name)),
            Some(v) if v.len() != field.dim => violations.push(format!(
                "dimension mismatch on {}: expected {}, got {}",
                field.name,
                field.dim,
                v.len()
            )),
            Some(_) => {}
        }
    }
    for name in entity.vectors.keys() {
        if schema.dim_of(name).is_none() {
            violations.push(format!("unknown vector field {name}"));
        }
    }
    for name in &schema.label_fields {
        if !entity.labels.contains_key(name) {
            violations.push(format!("missing label field {name}"));
        }
    }
    for name in entity.labels.keys() {
        if !schema.label_fields.contains(name) {
            violations.push(format!("unknown label field {name}"));
        }
    }
    for field in &schema.numeric_fields {
        match entity.numerics.get(&field.name) {
            None => violations.push(format!("missing numeric field {}", field.name)),
            Some(value) if !value.matches(field.kind) => {
                violations.push(format!("numeric field {} has the wrong type", field.name))
            }
            Some(_) => {}
        }
    }
    for name in entity.numerics.keys() {
        if !schema.numeric_fields.iter().any(|f| &f.name == name) {
            violations.push(format!("unknown numeric field {name}"));
        }
    }

    if violations.is_empty() {
        Validation::Ok { needs_auto_pk }
    } else {
        Validation::Violations(violations)
    }
}
