use serde::{Deserialize, Serialize};

use super::{DenseMatrix, NumericError};

/// Sparse nonnegative adjacency stored in compressed-row form.
///
/// Entries within a row are sorted by column. Edge order (row-major) is the
/// canonical order used by per-edge operations in the expression graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseAdjacency {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseAdjacency {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Builds from `(row, col, weight)` triplets. Duplicate coordinates,
    /// out-of-range indices and negative or non-finite weights are rejected.
    pub fn from_entries(
        rows: usize,
        cols: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self, NumericError> {
        let mut entries: Vec<_> = entries.into_iter().collect();
        for &(r, c, w) in &entries {
            if r >= rows || c >= cols {
                return Err(NumericError::Shape(format!(
                    "entry ({r}, {c}) outside {rows}x{cols} adjacency"
                )));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(NumericError::NonFinite(format!(
                    "adjacency weight {w} at ({r}, {c})"
                )));
            }
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        if let Some(w) = entries.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(NumericError::Shape(format!(
                "duplicate adjacency entry ({}, {})",
                w[0].0, w[0].1
            )));
        }
        let mut row_ptr = vec![0; rows + 1];
        for &(r, _, _) in &entries {
            row_ptr[r + 1] += 1;
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx: entries.iter().map(|e| e.1).collect(),
            weights: entries.iter().map(|e| e.2).collect(),
        })
    }

    /// Unit-weight pattern from `(row, col)` pairs; repeated pairs collapse.
    pub fn from_pattern(
        rows: usize,
        cols: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, NumericError> {
        let mut pairs: Vec<_> = pairs.into_iter().collect();
        pairs.sort_unstable();
        pairs.dedup();
        Self::from_entries(rows, cols, pairs.into_iter().map(|(r, c)| (r, c, 1.0)))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.col_idx.is_empty()
    }

    /// Edge index range for row `r`.
    #[inline]
    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    pub fn row_cols(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_range(r)]
    }

    pub fn row_weights(&self, r: usize) -> &[f64] {
        &self.weights[self.row_range(r)]
    }

    pub fn degree(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            self.row_range(r)
                .map(move |e| (r, self.col_idx[e], self.weights[e]))
        })
    }

    /// Row index of every edge, in edge order.
    pub fn edge_rows(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            out.extend(std::iter::repeat_n(r, self.degree(r)));
        }
        out
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.row_cols(r).binary_search(&c).is_ok()
    }

    /// Each nonempty row rescaled to sum to one (mean aggregation).
    pub fn row_normalized(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            let range = self.row_range(r);
            let total: f64 = self.weights[range.clone()].iter().sum();
            if total > 0.0 {
                for w in &mut out.weights[range] {
                    *w /= total;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        Self::from_entries(self.cols, self.rows, self.iter().map(|(r, c, w)| (c, r, w)))
            .expect("transpose of a valid adjacency is valid")
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for (r, c, w) in self.iter() {
            out.set(r, c, w);
        }
        out
    }

    /// `self × x` for dense `x`.
    pub fn matmul_dense(&self, x: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, x.rows(), "sparse matmul inner dimension");
        let d = x.cols();
        let mut out = vec![0.0; self.rows * d];
        for r in 0..self.rows {
            let out_row = &mut out[r * d..(r + 1) * d];
            for e in self.row_range(r) {
                let w = self.weights[e];
                for (o, v) in out_row.iter_mut().zip(x.row(self.col_idx[e])) {
                    *o += w * v;
                }
            }
        }
        DenseMatrix::from_raw(self.rows, d, out)
    }

    /// `selfᵀ × g`, used for the backward pass of [`Self::matmul_dense`].
    pub fn transpose_matmul_dense(&self, g: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, g.rows(), "sparse transpose matmul dimension");
        let d = g.cols();
        let mut out = vec![0.0; self.cols * d];
        for r in 0..self.rows {
            let g_row = g.row(r);
            for e in self.row_range(r) {
                let w = self.weights[e];
                let c = self.col_idx[e];
                for (o, v) in out[c * d..(c + 1) * d].iter_mut().zip(g_row) {
                    *o += w * v;
                }
            }
        }
        DenseMatrix::from_raw(self.cols, d, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_out_of_range() {
        assert!(SparseAdjacency::from_entries(2, 2, [(0, 0, 1.0), (0, 0, 2.0)]).is_err());
        assert!(SparseAdjacency::from_entries(2, 2, [(2, 0, 1.0)]).is_err());
        assert!(SparseAdjacency::from_entries(2, 2, [(0, 0, -1.0)]).is_err());
    }

    #[test]
    fn pattern_collapses_repeats() {
        let a = SparseAdjacency::from_pattern(2, 3, [(0, 1), (0, 1), (1, 2)]).unwrap();
        assert_eq!(a.nnz(), 2);
        assert!(a.contains(0, 1));
        assert!(!a.contains(0, 2));
    }

    #[test]
    fn normalized_rows_sum_to_one() {
        let a = SparseAdjacency::from_pattern(3, 3, [(0, 0), (0, 2), (2, 1)])
            .unwrap()
            .row_normalized();
        assert_eq!(a.row_weights(0), &[0.5, 0.5]);
        assert_eq!(a.degree(1), 0);
        assert_eq!(a.row_weights(2), &[1.0]);
    }
}
