//! Similarity metrics used for vector search.

use serde::{Deserialize, Serialize};

use crate::error::EngineError;

/// Supported distance / similarity functions.
///
/// Euclidean scores are distances (lower is closer); inner product and
/// angular scores are similarities (higher is closer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    InnerProduct,
    Angular,
}

impl Metric {
    /// `true` when a smaller score means a closer match.
    pub fn lower_is_better(self) -> bool {
        matches!(self, Metric::Euclidean)
    }

    /// Ranks `a` against `b`: returns `Ordering::Less` when `a` is the
    /// better (closer) score.
    pub fn cmp_scores(self, a: f32, b: f32) -> std::cmp::Ordering {
        if self.lower_is_better() {
            a.total_cmp(&b)
        } else {
            b.total_cmp(&a)
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        match s.to_ascii_lowercase().as_str() {
            "l2" | "euclidean" => Some(Metric::Euclidean),
            "ip" | "inner_product" => Some(Metric::InnerProduct),
            "cosine" | "angular" => Some(Metric::Angular),
            _ => None,
        }
    }

    pub fn wire_name(self) -> &'static str {
        match self {
            Metric::Euclidean => "l2",
            Metric::InnerProduct => "ip",
            Metric::Angular => "angular",
        }
    }
}

/// Exact metric value between two vectors. Accumulates in f64 so the result
/// agrees with a naive double-precision loop.
pub fn distance(metric: Metric, a: &[f32], b: &[f32]) -> Result<f32, EngineError> {
    if a.len() != b.len() {
        return Err(EngineError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    match metric {
        Metric::Euclidean => Ok(euclidean(a, b)),
        Metric::InnerProduct => Ok(inner_product(a, b)),
        Metric::Angular => {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                return Err(EngineError::ZeroVector);
            }
            Ok((f64::from(inner_product(a, b)) / (na * nb)) as f32)
        }
    }
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f32 {
    squared_euclidean(a, b).sqrt() as f32
}

/// Squared euclidean distance in f64. Rank-equivalent to [`euclidean`];
/// index internals use it to skip the square root.
pub fn squared_euclidean(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0f64;
    for (x, y) in a.iter().zip(b) {
        let d = f64::from(*x) - f64::from(*y);
        acc += d * d;
    }
    acc
}

pub fn inner_product(a: &[f32], b: &[f32]) -> f32 {
    inner_product_f64(a, b) as f32
}

pub fn inner_product_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt()
}

/// Ranking key where smaller is always better, regardless of metric
/// direction. Index internals rank by this and convert back with
/// [`score_from_key`] only for the survivors.
///
/// A zero vector under the angular metric keys to `+∞` (never a match)
/// rather than erroring, so scans over mixed data cannot fail mid-flight.
pub fn rank_key(metric: Metric, a: &[f32], b: &[f32]) -> f64 {
    match metric {
        Metric::Euclidean => squared_euclidean(a, b),
        Metric::InnerProduct => -inner_product_f64(a, b),
        Metric::Angular => {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                f64::INFINITY
            } else {
                -(inner_product_f64(a, b) / (na * nb))
            }
        }
    }
}

/// Convert a ranking key back to the metric's score.
pub fn score_from_key(metric: Metric, key: f64) -> f32 {
    match metric {
        Metric::Euclidean => key.sqrt() as f32,
        Metric::InnerProduct | Metric::Angular => (-key) as f32,
    }
}
