/// Sparsity structure of a square weighted adjacency, stored as directed
/// entries in CSR order. Self-loops are never stored; the propagation
/// operators add the identity themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePattern {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    rows: Vec<usize>,
}

impl SparsePattern {
    /// Builds the pattern from directed `(row, col)` pairs. Duplicates are
    /// collapsed; self-loops are rejected by the caller.
    pub fn from_directed(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut per_row: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (r, c) in pairs {
            assert!(r < n && c < n, "entry ({r},{c}) outside {n}x{n}");
            assert_ne!(r, c, "self-loop in sparse pattern");
            per_row[r].push(c);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut rows = Vec::new();
        row_ptr.push(0);
        for (r, mut cs) in per_row.into_iter().enumerate() {
            cs.sort_unstable();
            cs.dedup();
            rows.extend(std::iter::repeat(r).take(cs.len()));
            cols.extend(cs);
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            rows,
        }
    }

    /// Symmetric pattern holding both directions of every undirected pair.
    pub fn symmetric(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self::from_directed(n, pairs.into_iter().flat_map(|(u, v)| [(u, v), (v, u)]))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    #[inline]
    pub fn row_of(&self, e: usize) -> usize {
        self.rows[e]
    }

    #[inline]
    pub fn col_of(&self, e: usize) -> usize {
        self.cols[e]
    }

    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    /// Entry index of `(r, c)` if materialized.
    pub fn entry(&self, r: usize, c: usize) -> Option<usize> {
        if r >= self.n {
            return None;
        }
        let range = self.row_range(r);
        self.cols[range.clone()]
            .binary_search(&c)
            .ok()
            .map(|k| range.start + k)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().copied().zip(self.cols.iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_lookup() {
        let p = SparsePattern::symmetric(4, [(0, 1), (2, 1), (0, 1)]);
        assert_eq!(p.nnz(), 4);
        assert!(p.entry(1, 0).is_some());
        assert!(p.entry(1, 2).is_some());
        assert!(p.entry(0, 2).is_none());
        let e = p.entry(2, 1).unwrap();
        assert_eq!((p.row_of(e), p.col_of(e)), (2, 1));
        assert_eq!(p.row_range(3), 4..4);
    }
}
