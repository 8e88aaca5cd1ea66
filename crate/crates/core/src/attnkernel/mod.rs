//! Scaled dot-product attention, head aggregation, and a small deterministic
//! decoder used as the built-in attention provider.

mod toy;

use std::ops::Range;

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};

pub use toy::{toy_forward, ForwardOutput, ForwardRequest, PastState, ToyModel, ToyModelSpec};

/// Tolerance on per-row softmax normalization.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Attention weights of one layer, restricted to a contiguous block of query rows.
///
/// Keys always span the whole visible sequence `0..n_keys()`. Row `r` belongs
/// to absolute position `query_start + r`, so keys after that position are
/// masked and hold exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub layer: usize,
    pub heads: Vec<Array2<f64>>,
    pub query_start: usize,
}

impl AttentionTensor {
    pub fn new(layer: usize, heads: Vec<Array2<f64>>, query_start: usize) -> Result<Self> {
        let tensor = AttentionTensor {
            layer,
            heads,
            query_start,
        };
        tensor.check_shapes()?;
        Ok(tensor)
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn n_queries(&self) -> usize {
        self.heads.first().map_or(0, |h| h.nrows())
    }

    pub fn n_keys(&self) -> usize {
        self.heads.first().map_or(0, |h| h.ncols())
    }

    pub fn query_range(&self) -> Range<usize> {
        self.query_start..self.query_start + self.n_queries()
    }

    fn check_shapes(&self) -> Result<()> {
        let Some(first) = self.heads.first() else {
            return Err(Error::Shape("attention tensor has no heads".into()));
        };
        let dim = first.dim();
        if let Some((h, m)) = self.heads.iter().enumerate().find(|(_, m)| m.dim() != dim) {
            return Err(Error::Shape(format!(
                "head {h} has shape {:?}, head 0 has {:?}",
                m.dim(),
                dim
            )));
        }
        Ok(())
    }

    /// Checks row-stochasticity over the visible prefix and exact zeros
    /// past the causal boundary.
    pub fn validate(&self, tolerance: f64) -> Result<()> {
        self.check_shapes()?;
        for (h, head) in self.heads.iter().enumerate() {
            for (r, row) in head.rows().into_iter().enumerate() {
                let visible = (self.query_start + r + 1).min(row.len());
                let sum: f64 = row.iter().take(visible).sum();
                if (sum - 1.0).abs() > tolerance {
                    return Err(Error::Shape(format!("head {h} row {r} sums to {sum}")));
                }
                if let Some(v) = row.iter().skip(visible).find(|&&v| v != 0.0) {
                    return Err(Error::Shape(format!(
                        "head {h} row {r} attends past its position (weight {v})"
                    )));
                }
                if let Some(v) = row.iter().find(|&&v| v.is_nan() || v < 0.0) {
                    return Err(Error::Shape(format!("head {h} row {r} has weight {v}")));
                }
            }
        }
        Ok(())
    }
}

/// Element-wise sum of all head matrices of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedAttention {
    pub matrix: Array2<f64>,
}

impl AggregatedAttention {
    pub fn n_queries(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_keys(&self) -> usize {
        self.matrix.ncols()
    }
}

/// `softmax(Q Kᵀ / √d)` row-wise.
///
/// With `causal_offset = Some(p)`, query row `i` sits at absolute position
/// `p + i` and cannot see keys beyond it; those entries are exactly 0.
pub fn attention_scores(
    queries: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    causal_offset: Option<usize>,
) -> Result<Array2<f64>> {
    let (n, d) = queries.dim();
    let (m, dk) = keys.dim();
    if d == 0 || n == 0 || m == 0 {
        return Err(Error::Shape(format!(
            "empty attention operands: queries {n}x{d}, keys {m}x{dk}"
        )));
    }
    if d != dk {
        return Err(Error::Shape(format!("query width {d} does not match key width {dk}")));
    }
    if let Some(offset) = causal_offset {
        if offset >= m {
            return Err(Error::Shape(format!(
                "causal offset {offset} leaves query row 0 without a visible key among {m}"
            )));
        }
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = queries.dot(&keys.t());
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let visible = causal_offset.map_or(m, |p| (p + i + 1).min(m));
        let max = row
            .iter()
            .take(visible)
            .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v * scale));
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < visible {
                *v = (*v * scale - max).exp();
                total += *v;
            } else {
                *v = 0.0;
            }
        }
        row.iter_mut().take(visible).for_each(|v| *v /= total);
    }
    Ok(scores)
}

/// Sums the head matrices of `tensor` without normalizing by the head count.
pub fn aggregate_heads(tensor: &AttentionTensor) -> Result<AggregatedAttention> {
    tensor.check_shapes()?;
    let mut matrix = tensor.heads[0].clone();
    for head in &tensor.heads[1..] {
        Zip::from(&mut matrix).and(head).for_each(|acc, &v| *acc += v);
    }
    Ok(AggregatedAttention { matrix })
}
