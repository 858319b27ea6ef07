//! Compressed-row sparse matrices, a sparse direct LU solver and a
//! supernodal Cholesky for the symmetric positive definite Schur systems.
//!
//! The LU factorization is a left-looking Gilbert–Peierls scheme with threshold
//! partial pivoting. Columns are pre-ordered with reverse Cuthill–McKee on the
//! symmetrized pattern, and the diagonal is preferred as pivot whenever it is
//! within the pivot threshold of the column maximum.

use std::collections::VecDeque;

mod cholesky;
pub use cholesky::CholeskyFactors;

use crate::error::{Error, Result};

/// Row-compressed sparse matrix with sorted, duplicate-free column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let triplets: Vec<_> = d.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
        Self::from_triplets(n, n, &triplets).expect("diagonal indices are in range")
    }

    /// Assembles a matrix from `(row, col, value)` triplets. Duplicates are
    /// summed and entries that end up exactly zero are dropped.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut counts = vec![0usize; rows + 1];
        for &(r, c, _) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::IndexOutOfBounds { row: r, col: c, rows, cols });
            }
            counts[r + 1] += 1;
        }
        for i in 0..rows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols_buf = vec![0usize; triplets.len()];
        let mut vals_buf = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let p = next[r];
            cols_buf[p] = c;
            vals_buf[p] = v;
            next[r] += 1;
        }

        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..rows {
            scratch.clear();
            scratch.extend((counts[r]..counts[r + 1]).map(|p| (cols_buf[p], vals_buf[p])));
            scratch.sort_by_key(|&(c, _)| c);
            let mut k = 0;
            while k < scratch.len() {
                let c = scratch[k].0;
                let mut v = 0.0;
                while k < scratch.len() && scratch[k].0 == c {
                    v += scratch[k].1;
                    k += 1;
                }
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self { rows, cols, indptr, indices, values })
    }

    /// Builds a matrix from a dense row-major array, skipping zeros.
    pub fn from_dense(rows: usize, cols: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "from_dense",
                expected: rows * cols,
                got: dense.len(),
            });
        }
        let triplets: Vec<_> = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .filter_map(|(i, j)| {
                let v = dense[i * cols + j];
                (v != 0.0).then_some((i, j, v))
            })
            .collect();
        Self::from_triplets(rows, cols, &triplets)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterates over `(col, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[i]..self.indptr[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.indptr[i]..self.indptr[i + 1];
        match self.indices[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                out[i * self.cols + j] = v;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// Multiplies row `i` by `s[i]` (nonzero factors keep the pattern intact).
    pub fn scale_rows(&mut self, s: &[f64]) {
        assert_eq!(s.len(), self.rows, "one factor per row");
        for (i, &f) in s.iter().enumerate() {
            for v in &mut self.values[self.indptr[i]..self.indptr[i + 1]] {
                *v *= f;
            }
        }
    }

    /// `A + shift·I` for a square matrix.
    pub fn add_diagonal(&self, shift: f64) -> SparseMatrix {
        let mut trip: Vec<_> = (0..self.rows)
            .flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v)))
            .collect();
        trip.extend((0..self.rows.min(self.cols)).map(|i| (i, i, shift)));
        SparseMatrix::from_triplets(self.rows, self.cols, &trip).expect("indices in range")
    }

    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.rows];
        self.spmv_into(x, &mut y)?;
        Ok(y)
    }

    /// `y = A x`, overwriting `y`.
    pub fn spmv_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "spmv",
                expected: self.cols,
                got: x.len(),
            });
        }
        if y.len() != self.rows {
            return Err(Error::DimensionMismatch {
                op: "spmv output",
                expected: self.rows,
                got: y.len(),
            });
        }
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
        Ok(())
    }

    /// `y = Aᵀ x`.
    pub fn spmv_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::DimensionMismatch {
                op: "spmv_transpose",
                expected: self.rows,
                got: x.len(),
            });
        }
        let mut y = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (j, v) in self.row(i) {
                y[j] += v * xi;
            }
        }
        Ok(y)
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &j in &self.indices {
            counts[j + 1] += 1;
        }
        for j in 0..self.cols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                let p = next[j];
                indices[p] = i;
                values[p] = v;
                next[j] += 1;
            }
        }
        SparseMatrix {
            rows: self.cols,
            cols: self.rows,
            indptr: counts,
            indices,
            values,
        }
    }

    /// Keeps the listed rows (in the given order) and remaps columns through
    /// `col_map`; columns mapped to `None` are discarded.
    pub fn submatrix(&self, rows: &[usize], col_map: &[Option<usize>], new_cols: usize) -> SparseMatrix {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for &r in rows {
            scratch.clear();
            scratch.extend(self.row(r).filter_map(|(j, v)| col_map[j].map(|jj| (jj, v))));
            scratch.sort_by_key(|&(c, _)| c);
            for &(c, v) in &scratch {
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        SparseMatrix {
            rows: rows.len(),
            cols: new_cols,
            indptr,
            indices,
            values,
        }
    }

    /// Relative asymmetry `max |A - Aᵀ| / max |A|`.
    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let t = self.transpose();
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                worst = worst.max((v - t.get(i, j)).abs());
            }
            for (j, v) in t.row(i) {
                worst = worst.max((v - self.get(i, j)).abs());
            }
        }
        let scale = self.max_abs();
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }
}

/// Sparse product `A · diag(dg) · B`.
pub fn triple_product(a: &SparseMatrix, dg: &[f64], b: &SparseMatrix) -> Result<SparseMatrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "triple_product",
            expected: a.cols,
            got: b.rows,
        });
    }
    if dg.len() != a.cols {
        return Err(Error::DimensionMismatch {
            op: "triple_product diagonal",
            expected: a.cols,
            got: dg.len(),
        });
    }
    let n = b.cols;
    let mut acc = vec![0.0; n];
    let mut marker = vec![usize::MAX; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut indptr = Vec::with_capacity(a.rows + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    indptr.push(0);
    for i in 0..a.rows {
        touched.clear();
        for (k, aik) in a.row(i) {
            let w = aik * dg[k];
            if w == 0.0 {
                continue;
            }
            for (j, bkj) in b.row(k) {
                if marker[j] != i {
                    marker[j] = i;
                    acc[j] = 0.0;
                    touched.push(j);
                }
                acc[j] += w * bkj;
            }
        }
        touched.sort_unstable();
        for &j in &touched {
            if acc[j] != 0.0 {
                indices.push(j);
                values.push(acc[j]);
            }
        }
        indptr.push(indices.len());
    }
    Ok(SparseMatrix {
        rows: a.rows,
        cols: n,
        indptr,
        indices,
        values,
    })
}

/// Column ordering applied before factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ordering {
    Natural,
    #[default]
    ReverseCuthillMcKee,
    NestedDissection,
}

/// Reverse Cuthill–McKee ordering of the symmetrized pattern of `a`.
/// Returns `perm` with `perm[k]` the original index placed at position `k`.
pub fn rcm_ordering(a: &SparseMatrix) -> Vec<usize> {
    let n = a.rows.max(a.cols);
    let adj = symmetric_adjacency(a, n);
    let degree: Vec<usize> = adj.iter().map(|v| v.len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));

    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral_node(&adj, &degree, seed);
        let mut queue = VecDeque::new();
        queue.push_back(start);
        visited[start] = true;
        let mut nbrs: Vec<usize> = Vec::new();
        while let Some(v) = queue.pop_front() {
            order.push(v);
            nbrs.clear();
            nbrs.extend(adj[v].iter().copied().filter(|&w| !visited[w]));
            nbrs.sort_by_key(|&w| (degree[w], w));
            for &w in &nbrs {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Subgraphs at or below this size are ordered by reverse Cuthill–McKee.
const ND_LEAF: usize = 64;

/// Nested dissection of the symmetrized pattern of `a` by recursive
/// level-structure bisection: each connected piece is split at the median BFS
/// level from a pseudo-peripheral node, both halves are ordered first and the
/// separator last.
pub fn nested_dissection_ordering(a: &SparseMatrix) -> Vec<usize> {
    let n = a.rows.max(a.cols);
    let adj = symmetric_adjacency(a, n);
    let mut nd = Dissector {
        adj: &adj,
        label: vec![0; n],
        next_label: 1,
        level: vec![usize::MAX; n],
        order: Vec::with_capacity(n),
    };
    nd.dissect((0..n).collect(), 0);
    nd.order
}

struct Dissector<'a> {
    adj: &'a [Vec<usize>],
    /// Subgraph membership; only nodes sharing a label are adjacent here.
    label: Vec<u32>,
    next_label: u32,
    level: Vec<usize>,
    order: Vec<usize>,
}

impl Dissector<'_> {
    fn fresh_label(&mut self, nodes: &[usize]) -> u32 {
        let l = self.next_label;
        self.next_label += 1;
        for &v in nodes {
            self.label[v] = l;
        }
        l
    }

    /// BFS within the subgraph `lab`, returning the level sets.
    fn levels(&mut self, root: usize, lab: u32) -> Vec<Vec<usize>> {
        let mut sets = vec![vec![root]];
        self.level[root] = 0;
        loop {
            let mut next = Vec::new();
            for &v in sets.last().expect("nonempty") {
                for &w in &self.adj[v] {
                    if self.label[w] == lab && self.level[w] == usize::MAX {
                        self.level[w] = sets.len();
                        next.push(w);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            sets.push(next);
        }
        sets
    }

    fn clear_levels(&mut self, sets: &[Vec<usize>]) {
        for v in sets.iter().flatten() {
            self.level[*v] = usize::MAX;
        }
    }

    fn emit_rcm(&mut self, nodes: &[usize], lab: u32) {
        let mut remaining: Vec<usize> = nodes.to_vec();
        let start = self.order.len();
        while let Some(&seed) = remaining.iter().find(|&&v| self.level[v] == usize::MAX) {
            let sets = self.levels(seed, lab);
            for set in &sets {
                self.order.extend_from_slice(set);
            }
            remaining.retain(|&v| self.level[v] == usize::MAX);
        }
        self.order[start..].reverse();
        for k in start..self.order.len() {
            let v = self.order[k];
            self.level[v] = usize::MAX;
        }
    }

    fn dissect(&mut self, nodes: Vec<usize>, lab: u32) {
        if nodes.len() <= ND_LEAF {
            self.emit_rcm(&nodes, lab);
            return;
        }
        // Split into connected components first.
        let sets = self.levels(nodes[0], lab);
        let reached: usize = sets.iter().map(Vec::len).sum();
        if reached < nodes.len() {
            let comp: Vec<usize> = sets.concat();
            self.clear_levels(&sets);
            let rest: Vec<usize> = {
                let l = self.fresh_label(&comp);
                nodes.into_iter().filter(|&v| self.label[v] != l).collect()
            };
            let l = self.label[comp[0]];
            self.dissect(comp, l);
            let lr = self.fresh_label(&rest);
            self.dissect(rest, lr);
            return;
        }
        // Pseudo-peripheral root: restart from the far end while eccentricity grows.
        let mut sets = sets;
        for _ in 0..4 {
            let far = *sets.last().expect("nonempty").iter().min_by_key(|&&v| (self.adj[v].len(), v)).expect("nonempty");
            self.clear_levels(&sets);
            let trial = self.levels(far, lab);
            if trial.len() <= sets.len() {
                self.clear_levels(&trial);
                sets = self.levels(sets[0][0], lab);
                break;
            }
            sets = trial;
        }
        if sets.len() < 3 {
            self.clear_levels(&sets);
            self.emit_rcm(&nodes, lab);
            return;
        }
        let half = nodes.len() / 2;
        let mut acc = 0;
        let mut mid = 1;
        for (k, set) in sets.iter().enumerate() {
            acc += set.len();
            if acc >= half {
                mid = k.clamp(1, sets.len() - 2);
                break;
            }
        }
        let mut left: Vec<usize> = sets[..mid].concat();
        let right: Vec<usize> = sets[mid + 1..].concat();
        let mut sep = Vec::new();
        for &v in &sets[mid] {
            if self.adj[v].iter().any(|&w| self.label[w] == lab && self.level[w] == mid + 1) {
                sep.push(v);
            } else {
                left.push(v);
            }
        }
        self.clear_levels(&sets);
        let ll = self.fresh_label(&left);
        let lr = self.fresh_label(&right);
        let ls = self.fresh_label(&sep);
        self.dissect(left, ll);
        self.dissect(right, lr);
        self.emit_rcm(&sep, ls);
    }
}

fn symmetric_adjacency(a: &SparseMatrix, n: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for i in 0..a.rows {
        for (j, _) in a.row(i) {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// BFS levels from `root`, returning (eccentricity, last level nodes).
fn bfs_levels(adj: &[Vec<usize>], root: usize) -> (usize, Vec<usize>) {
    let mut level = vec![usize::MAX; adj.len()];
    level[root] = 0;
    let mut frontier = vec![root];
    let mut depth = 0;
    loop {
        let mut next = Vec::new();
        for &v in &frontier {
            for &w in &adj[v] {
                if level[w] == usize::MAX {
                    level[w] = depth + 1;
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            return (depth, frontier);
        }
        depth += 1;
        frontier = next;
    }
}

fn pseudo_peripheral_node(adj: &[Vec<usize>], degree: &[usize], seed: usize) -> usize {
    let mut root = seed;
    let (mut ecc, mut last) = bfs_levels(adj, root);
    loop {
        let candidate = *last
            .iter()
            .min_by_key(|&&v| (degree[v], v))
            .expect("bfs level is nonempty");
        let (e, l) = bfs_levels(adj, candidate);
        if e > ecc {
            root = candidate;
            ecc = e;
            last = l;
        } else {
            return root;
        }
    }
}

/// Compressed-column storage used internally by the factorization.
#[derive(Debug, Clone)]
struct Csc {
    colptr: Vec<usize>,
    rowind: Vec<usize>,
    values: Vec<f64>,
}

/// Sparse LU factors `P A Q = L U` with unit-diagonal `L`.
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    /// Column `k` of the factors is original column `q[k]`.
    q: Vec<usize>,
    /// Original row `i` is pivot row `pinv[i]`.
    pinv: Vec<usize>,
    /// Unit lower factor, diagonal stored first in each column.
    l: Csc,
    /// Upper factor, diagonal stored last in each column.
    u: Csc,
}

/// Diagonal preference threshold for partial pivoting.
const PIVOT_THRESHOLD: f64 = 0.1;

/// Default relative singularity threshold.
pub const SINGULAR_RTOL: f64 = 1e-14;

impl LuFactors {
    pub fn factorize(a: &SparseMatrix) -> Result<Self> {
        Self::factorize_with(a, Ordering::default(), SINGULAR_RTOL)
    }

    /// Factorizes `a`; a pivot with magnitude at most `singular_rtol · max|A|`
    /// is reported as singular, naming the original row being eliminated.
    pub fn factorize_with(a: &SparseMatrix, ordering: Ordering, singular_rtol: f64) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::DimensionMismatch {
                op: "lu (square)",
                expected: a.rows,
                got: a.cols,
            });
        }
        let n = a.rows;
        let q = match ordering {
            Ordering::Natural => (0..n).collect(),
            Ordering::ReverseCuthillMcKee => rcm_ordering(a),
            Ordering::NestedDissection => nested_dissection_ordering(a),
        };
        // Column access to A.
        let at = a.transpose();
        let threshold = singular_rtol * a.max_abs();

        let mut l = Csc {
            colptr: Vec::with_capacity(n + 1),
            rowind: Vec::with_capacity(4 * a.nnz() + n),
            values: Vec::with_capacity(4 * a.nnz() + n),
        };
        let mut u = Csc {
            colptr: Vec::with_capacity(n + 1),
            rowind: Vec::with_capacity(4 * a.nnz() + n),
            values: Vec::with_capacity(4 * a.nnz() + n),
        };
        const UNSET: usize = usize::MAX;
        let mut pinv = vec![UNSET; n];
        let mut x = vec![0.0; n];
        let mut marked = vec![false; n];
        let mut reach: Vec<usize> = Vec::with_capacity(n);
        let mut stack: Vec<usize> = Vec::with_capacity(n);
        let mut pstack: Vec<usize> = Vec::with_capacity(n);

        for k in 0..n {
            l.colptr.push(l.rowind.len());
            u.colptr.push(u.rowind.len());
            let col = q[k];

            // Nonzero pattern of L \ A(:, col) by depth-first search over L.
            reach.clear();
            for (i, _) in at.row(col) {
                if !marked[i] {
                    dfs(i, &l, &pinv, &mut marked, &mut stack, &mut pstack, &mut reach);
                }
            }
            // `reach` holds nodes in reverse topological order.
            for &i in &reach {
                x[i] = 0.0;
            }
            for (i, v) in at.row(col) {
                x[i] = v;
            }
            for &j in reach.iter().rev() {
                let jj = pinv[j];
                if jj == UNSET {
                    continue;
                }
                let xj = x[j];
                if xj == 0.0 {
                    continue;
                }
                for p in (l.colptr[jj] + 1)..l.colptr_end(jj) {
                    x[l.rowind[p]] -= l.values[p] * xj;
                }
            }

            // Pivot selection.
            let mut ipiv = UNSET;
            let mut amax = -1.0;
            for &i in reach.iter().rev() {
                if pinv[i] == UNSET {
                    let t = x[i].abs();
                    if t > amax {
                        amax = t;
                        ipiv = i;
                    }
                } else {
                    u.rowind.push(pinv[i]);
                    u.values.push(x[i]);
                }
            }
            if ipiv == UNSET || amax <= threshold {
                for &i in &reach {
                    marked[i] = false;
                    x[i] = 0.0;
                }
                return Err(Error::SingularMatrix {
                    row: col,
                    pivot: amax.max(0.0),
                    threshold,
                });
            }
            if pinv[col] == UNSET && marked[col] && x[col].abs() >= PIVOT_THRESHOLD * amax {
                ipiv = col;
            }
            let pivot = x[ipiv];
            u.rowind.push(k);
            u.values.push(pivot);
            pinv[ipiv] = k;
            l.rowind.push(ipiv);
            l.values.push(1.0);
            for &i in reach.iter().rev() {
                if pinv[i] == UNSET {
                    l.rowind.push(i);
                    l.values.push(x[i] / pivot);
                }
                x[i] = 0.0;
                marked[i] = false;
            }
        }
        l.colptr.push(l.rowind.len());
        u.colptr.push(u.rowind.len());
        for r in &mut l.rowind {
            *r = pinv[*r];
        }
        Ok(Self { n, q, pinv, l, u })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries in `L + U`.
    pub fn fill(&self) -> usize {
        self.l.values.len() + self.u.values.len()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch {
                op: "lu solve",
                expected: self.n,
                got: b.len(),
            });
        }
        let mut y = vec![0.0; self.n];
        for (i, &bi) in b.iter().enumerate() {
            y[self.pinv[i]] = bi;
        }
        // L y = P b
        for k in 0..self.n {
            let yk = y[k];
            if yk != 0.0 {
                for p in (self.l.colptr[k] + 1)..self.l.colptr_end(k) {
                    y[self.l.rowind[p]] -= self.l.values[p] * yk;
                }
            }
        }
        // U z = y
        for k in (0..self.n).rev() {
            let end = self.u.colptr_end(k);
            let diag = end - 1;
            y[k] /= self.u.values[diag];
            let yk = y[k];
            if yk != 0.0 {
                for p in self.u.colptr[k]..diag {
                    y[self.u.rowind[p]] -= self.u.values[p] * yk;
                }
            }
        }
        let mut x = vec![0.0; self.n];
        for (k, &col) in self.q.iter().enumerate() {
            x[col] = y[k];
        }
        Ok(x)
    }

    /// Solves `Aᵀ x = b` with the same factors.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch {
                op: "lu transpose solve",
                expected: self.n,
                got: b.len(),
            });
        }
        let mut w: Vec<f64> = self.q.iter().map(|&c| b[c]).collect();
        // Uᵀ w = Qᵀ b
        for k in 0..self.n {
            let end = self.u.colptr_end(k);
            let diag = end - 1;
            let mut s = w[k];
            for p in self.u.colptr[k]..diag {
                s -= self.u.values[p] * w[self.u.rowind[p]];
            }
            w[k] = s / self.u.values[diag];
        }
        // Lᵀ v = w
        for k in (0..self.n).rev() {
            let mut s = w[k];
            for p in (self.l.colptr[k] + 1)..self.l.colptr_end(k) {
                s -= self.l.values[p] * w[self.l.rowind[p]];
            }
            w[k] = s;
        }
        let mut x = vec![0.0; self.n];
        for (i, &pi) in self.pinv.iter().enumerate() {
            x[i] = w[pi];
        }
        Ok(x)
    }
}

impl Csc {
    fn colptr_end(&self, k: usize) -> usize {
        if k + 1 < self.colptr.len() {
            self.colptr[k + 1]
        } else {
            self.rowind.len()
        }
    }
}

/// Non-recursive DFS from original row `start` through the columns of `L`
/// already computed; finished nodes are appended to `reach`.
fn dfs(
    start: usize,
    l: &Csc,
    pinv: &[usize],
    marked: &mut [bool],
    stack: &mut Vec<usize>,
    pstack: &mut Vec<usize>,
    reach: &mut Vec<usize>,
) {
    stack.clear();
    pstack.clear();
    stack.push(start);
    pstack.push(usize::MAX);
    while let Some(&j) = stack.last() {
        let top = stack.len() - 1;
        let jj = pinv[j];
        if !marked[j] {
            marked[j] = true;
            pstack[top] = if jj == usize::MAX { 0 } else { l.colptr[jj] + 1 };
        }
        let end = if jj == usize::MAX { 0 } else { l.colptr_end(jj) };
        let mut descended = false;
        let mut p = pstack[top];
        while p < end {
            let i = l.rowind[p];
            p += 1;
            if !marked[i] {
                pstack[top] = p;
                stack.push(i);
                pstack.push(usize::MAX);
                descended = true;
                break;
            }
        }
        if !descended {
            stack.pop();
            pstack.pop();
            reach.push(j);
        }
    }
}

/// One-shot sparse direct solve of `A x = b`.
pub fn direct_solve(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    LuFactors::factorize(a)?.solve(b)
}
