//! Scalar quantization: one byte per dimension, trained on a segment's
//! per-dimension value range.

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sq8Codec {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl Sq8Codec {
    /// Train on row-major vectors: min/max per dimension.
    pub fn train(data: &[f32], dim: usize) -> Sq8Codec {
        assert!(dim > 0 && data.len() % dim == 0 && !data.is_empty());
        let mut min = vec![f32::INFINITY; dim];
        let mut max = vec![f32::NEG_INFINITY; dim];
        for row in data.chunks_exact(dim) {
            for (j, v) in row.iter().enumerate() {
                min[j] = min[j].min(*v);
                max[j] = max[j].max(*v);
            }
        }
        Sq8Codec { min, max }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// `q_i = round((x_i − min_i) · 255 / (max_i − min_i))`, rounding half
    /// away from zero, clamped to [0, 255]. A degenerate dimension
    /// (max = min) encodes 0.
    pub fn encode(&self, v: &[f32]) -> Result<Vec<u8>> {
        if v.len() != self.dim() {
            return Err(EngineError::DimensionMismatch { expected: self.dim(), got: v.len() });
        }
        let mut out = Vec::with_capacity(v.len());
        self.encode_into(v, &mut out);
        Ok(out)
    }

    pub fn encode_into(&self, v: &[f32], out: &mut Vec<u8>) {
        for (j, x) in v.iter().enumerate() {
            let span = f64::from(self.max[j]) - f64::from(self.min[j]);
            let q = if span > 0.0 {
                let scaled = (f64::from(*x) - f64::from(self.min[j])) * 255.0 / span;
                scaled.round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            out.push(q);
        }
    }

    /// `x_i = min_i + q_i · (max_i − min_i) / 255`.
    pub fn decode(&self, codes: &[u8]) -> Result<Vec<f32>> {
        if codes.len() != self.dim() {
            return Err(EngineError::DimensionMismatch { expected: self.dim(), got: codes.len() });
        }
        let mut out = Vec::with_capacity(codes.len());
        self.decode_into(codes, &mut out);
        Ok(out)
    }

    pub fn decode_into(&self, codes: &[u8], out: &mut Vec<f32>) {
        for (j, q) in codes.iter().enumerate() {
            let span = f64::from(self.max[j]) - f64::from(self.min[j]);
            let x = f64::from(self.min[j]) + f64::from(*q) * span / 255.0;
            out.push(x as f32);
        }
    }
}
