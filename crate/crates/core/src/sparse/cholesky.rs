//! Supernodal multifrontal Cholesky for symmetric positive definite systems.
//!
//! The ordering is post-ordered along the elimination tree, columns with
//! nested structure are grouped into supernodes, and each supernode is
//! eliminated inside a dense frontal matrix. Child update matrices are kept on
//! a stack and extend-added into the parent front.

use nalgebra::DMatrix;

use super::{nested_dissection_ordering, rcm_ordering, Ordering, SparseMatrix};
use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Panel width of the blocked dense factorization.
const PANEL: usize = 48;

#[derive(Debug, Clone)]
struct Supernode {
    first: usize,
    ncols: usize,
    /// Front row indices: the supernode columns followed by the rows below.
    rows: Vec<usize>,
    /// Column-major `rows.len() × ncols` block of `L`.
    values: Vec<f64>,
}

/// Factors `Pᵀ A P = L Lᵀ` of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct CholeskyFactors {
    n: usize,
    /// Position `k` of the factorization holds original index `perm[k]`.
    perm: Vec<usize>,
    supernodes: Vec<Supernode>,
}

/// Elimination tree of the symmetric pattern of `a` under `perm`.
fn etree(a: &SparseMatrix, perm: &[usize], pinv: &[usize]) -> Vec<usize> {
    let n = perm.len();
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for i in 0..n {
        for (c, _) in a.row(perm[i]) {
            let mut r = pinv[c];
            if r >= i {
                continue;
            }
            while ancestor[r] != NONE && ancestor[r] != i {
                let t = ancestor[r];
                ancestor[r] = i;
                r = t;
            }
            if ancestor[r] == NONE {
                ancestor[r] = i;
                parent[r] = i;
            }
        }
    }
    parent
}

fn postorder(parent: &[usize]) -> Vec<usize> {
    let n = parent.len();
    let mut head = vec![NONE; n];
    let mut next = vec![NONE; n];
    for j in (0..n).rev() {
        if parent[j] != NONE {
            next[j] = head[parent[j]];
            head[parent[j]] = j;
        }
    }
    let mut post = Vec::with_capacity(n);
    let mut stack = Vec::new();
    for root in (0..n).filter(|&j| parent[j] == NONE) {
        stack.push(root);
        while let Some(&j) = stack.last() {
            let c = head[j];
            if c == NONE {
                stack.pop();
                post.push(j);
            } else {
                head[j] = next[c];
                stack.push(c);
            }
        }
    }
    post
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Dense partial Cholesky of the leading `ncols` columns of the front `f`.
/// On return `f[.., ..ncols]` holds `L` and the trailing lower block holds the
/// Schur update. Fails with the local column of a non-positive pivot.
fn factor_front(f: &mut DMatrix<f64>, ncols: usize, threshold: f64) -> std::result::Result<(), (usize, f64)> {
    let m = f.nrows();
    let mut k = 0;
    while k < ncols {
        let kend = (k + PANEL).min(ncols);
        for c in k..kend {
            let piv = f[(c, c)];
            if !(piv > threshold) {
                return Err((c, piv));
            }
            let d = piv.sqrt();
            {
                let col = &mut f.as_mut_slice()[c * m..(c + 1) * m];
                col[c] = d;
                for x in &mut col[c + 1..] {
                    *x /= d;
                }
            }
            for c2 in c + 1..kend {
                let s = f[(c2, c)];
                if s == 0.0 {
                    continue;
                }
                let (left, right) = f.as_mut_slice().split_at_mut(c2 * m);
                let src = &left[c * m + c2..c * m + m];
                let dst = &mut right[c2..m];
                for (y, x) in dst.iter_mut().zip(src) {
                    *y -= s * x;
                }
            }
        }
        if kend < m {
            let p = f.view((kend, k), (m - kend, kend - k)).into_owned();
            // Lower-block update of the trailing matrix.
            let mut j = 0;
            let rest = m - kend;
            while j < rest {
                let w = PANEL.min(rest - j);
                let pj = p.rows(j, w).transpose();
                let pr = p.rows(j, rest - j);
                let mut target = f.view_mut((kend + j, kend + j), (rest - j, w));
                target.gemm(-1.0, &pr, &pj, 1.0);
                j += w;
            }
        }
        k = kend;
    }
    Ok(())
}

impl CholeskyFactors {
    pub fn factorize(a: &SparseMatrix) -> Result<Self> {
        Self::factorize_with(a, Ordering::NestedDissection, super::SINGULAR_RTOL)
    }

    /// Factorizes a symmetric `a`; only the pattern and values of `a` as given
    /// are read, so an asymmetric input is factorized as if symmetric. A pivot
    /// at most `singular_rtol · max|A|` reports the original row.
    pub fn factorize_with(a: &SparseMatrix, ordering: Ordering, singular_rtol: f64) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::DimensionMismatch {
                op: "cholesky (square)",
                expected: a.rows(),
                got: a.cols(),
            });
        }
        let n = a.rows();
        let base = match ordering {
            Ordering::Natural => (0..n).collect(),
            Ordering::ReverseCuthillMcKee => rcm_ordering(a),
            Ordering::NestedDissection => nested_dissection_ordering(a),
        };
        let parent0 = etree(a, &base, &inverse(&base));
        let perm: Vec<usize> = postorder(&parent0).into_iter().map(|k| base[k]).collect();
        let pinv = inverse(&perm);
        let parent = etree(a, &perm, &pinv);

        // Symbolic pass: column structures, merged into fundamental supernodes.
        let mut nchild = vec![0usize; n];
        for &p in &parent {
            if p != NONE {
                nchild[p] += 1;
            }
        }
        let mut structs: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for j in 0..n {
            if parent[j] != NONE {
                children[parent[j]].push(j);
            }
        }
        let mut mark = vec![NONE; n];
        let mut count = vec![0usize; n];
        let mut snode_start: Vec<usize> = Vec::new();
        let mut snode_below: Vec<Vec<usize>> = Vec::new();
        for j in 0..n {
            let mut s = Vec::new();
            mark[j] = j;
            for (c, _) in a.row(perm[j]) {
                let i = pinv[c];
                if i > j && mark[i] != j {
                    mark[i] = j;
                    s.push(i);
                }
            }
            for &c in &children[j] {
                for &i in &std::mem::take(&mut structs[c]) {
                    if i > j && mark[i] != j {
                        mark[i] = j;
                        s.push(i);
                    }
                }
            }
            s.sort_unstable();
            count[j] = s.len();
            let joins = j > 0 && parent[j - 1] == j && nchild[j] == 1 && count[j - 1] == count[j] + 1;
            if joins {
                *snode_below.last_mut().expect("open supernode") = s.clone();
            } else {
                snode_start.push(j);
                snode_below.push(s.clone());
            }
            if parent[j] != NONE {
                structs[j] = s;
            }
        }
        drop(structs);

        let ns = snode_start.len();
        let mut snode_of = vec![0usize; n];
        for s in 0..ns {
            let end = snode_start.get(s + 1).copied().unwrap_or(n);
            for j in snode_start[s]..end {
                snode_of[j] = s;
            }
        }

        // Numeric pass.
        let threshold = singular_rtol * a.max_abs();
        let mut local = vec![NONE; n];
        let mut stack: Vec<(usize, Vec<usize>, DMatrix<f64>)> = Vec::new();
        let mut supernodes = Vec::with_capacity(ns);
        for s in 0..ns {
            let first = snode_start[s];
            let end = snode_start.get(s + 1).copied().unwrap_or(n);
            let ncols = end - first;
            let mut rows: Vec<usize> = (first..end).collect();
            rows.extend_from_slice(&snode_below[s]);
            let m = rows.len();
            for (k, &r) in rows.iter().enumerate() {
                local[r] = k;
            }
            let mut f = DMatrix::<f64>::zeros(m, m);
            for j in first..end {
                let lj = j - first;
                for (c, v) in a.row(perm[j]) {
                    let i = pinv[c];
                    if i >= j {
                        f[(local[i], lj)] += v;
                    }
                }
            }
            while stack.last().is_some_and(|(p, _, _)| *p == s) {
                let (_, crow, u) = stack.pop().expect("nonempty stack");
                let map: Vec<usize> = crow.iter().map(|&r| local[r]).collect();
                for (jj, &fj) in map.iter().enumerate() {
                    for ii in jj..map.len() {
                        f[(map[ii], fj)] += u[(ii, jj)];
                    }
                }
            }
            factor_front(&mut f, ncols, threshold).map_err(|(c, piv)| Error::SingularMatrix {
                row: perm[first + c],
                pivot: piv.max(0.0),
                threshold,
            })?;
            let last = end - 1;
            if m > ncols && parent[last] != NONE {
                let u = f.view((ncols, ncols), (m - ncols, m - ncols)).into_owned();
                stack.push((snode_of[parent[last]], rows[ncols..].to_vec(), u));
            }
            let values = f.columns(0, ncols).iter().copied().collect();
            supernodes.push(Supernode {
                first,
                ncols,
                rows,
                values,
            });
        }
        Ok(Self { n, perm, supernodes })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of `L`, including the explicit zeros of dense blocks.
    pub fn fill(&self) -> usize {
        self.supernodes
            .iter()
            .map(|s| s.ncols * (2 * s.rows.len() - s.ncols + 1) / 2)
            .sum()
    }

    pub fn num_supernodes(&self) -> usize {
        self.supernodes.len()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch {
                op: "cholesky solve",
                expected: self.n,
                got: b.len(),
            });
        }
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for sn in &self.supernodes {
            let m = sn.rows.len();
            for c in 0..sn.ncols {
                let col = &sn.values[c * m..(c + 1) * m];
                let j = sn.first + c;
                y[j] /= col[c];
                let yj = y[j];
                if yj != 0.0 {
                    for (k, &r) in sn.rows.iter().enumerate().skip(c + 1) {
                        y[r] -= col[k] * yj;
                    }
                }
            }
        }
        for sn in self.supernodes.iter().rev() {
            let m = sn.rows.len();
            for c in (0..sn.ncols).rev() {
                let col = &sn.values[c * m..(c + 1) * m];
                let j = sn.first + c;
                let mut s = y[j];
                for (k, &r) in sn.rows.iter().enumerate().skip(c + 1) {
                    s -= col[k] * y[r];
                }
                y[j] = s / col[c];
            }
        }
        let mut x = vec![0.0; self.n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = y[k];
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random sparse SPD matrix `Gᵀ G + I` with `G` sparse.
    fn random_spd(n: usize, per_row: usize, seed: u64) -> SparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for i in 0..n {
            for _ in 0..per_row {
                t.push((i, rng.gen_range(0..n), rng.gen_range(-1.0..1.0)));
            }
        }
        let g = SparseMatrix::from_triplets(n, n, &t).unwrap();
        super::super::triple_product(&g.transpose(), &vec![1.0; n], &g)
            .unwrap()
            .add_diagonal(1.0)
    }

    fn dense_solve(a: &SparseMatrix, b: &[f64]) -> Vec<f64> {
        let n = a.rows();
        let m = DMatrix::from_row_slice(n, n, &a.to_dense());
        m.lu().solve(&nalgebra::DVector::from_column_slice(b)).unwrap().as_slice().to_vec()
    }

    #[test]
    fn identity_and_diagonal() {
        let f = CholeskyFactors::factorize(&SparseMatrix::diagonal(&[4.0, 9.0, 1.0])).unwrap();
        assert_eq!(f.solve(&[4.0, 9.0, 2.0]).unwrap(), vec![1.0, 1.0, 2.0]);
        assert_eq!(f.dim(), 3);
    }

    #[test]
    fn matches_dense_solve_on_random_spd() {
        for (seed, ordering) in [
            (1, Ordering::Natural),
            (2, Ordering::ReverseCuthillMcKee),
            (3, Ordering::NestedDissection),
        ] {
            let a = random_spd(150, 2, seed);
            let b: Vec<f64> = (0..150).map(|k| (k as f64 * 0.37).sin()).collect();
            let f = CholeskyFactors::factorize_with(&a, ordering, 1e-14).unwrap();
            let x = f.solve(&b).unwrap();
            let xd = dense_solve(&a, &b);
            for (u, v) in x.iter().zip(&xd) {
                assert!((u - v).abs() <= 1e-10 * (1.0 + v.abs()), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn large_fronts_use_the_blocked_path() {
        // A dense-ish matrix forces fronts wider than one panel.
        let a = random_spd(200, 12, 9);
        let f = CholeskyFactors::factorize(&a).unwrap();
        assert!(f.supernodes.iter().any(|s| s.ncols > PANEL));
        let b = vec![1.0; 200];
        let x = f.solve(&b).unwrap();
        let r = a.spmv(&x).unwrap();
        assert!(r.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-10));
    }

    #[test]
    fn indefinite_matrix_reports_the_row() {
        let a = SparseMatrix::from_dense(2, 2, &[1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(
            CholeskyFactors::factorize_with(&a, Ordering::Natural, 1e-14),
            Err(Error::SingularMatrix { row: 1, .. })
        ));
        let s = SparseMatrix::from_dense(2, 2, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(CholeskyFactors::factorize(&s), Err(Error::SingularMatrix { .. })));
    }

    #[test]
    fn disconnected_blocks() {
        let a = SparseMatrix::from_triplets(
            4,
            4,
            &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0), (2, 2, 5.0), (3, 3, 3.0)],
        )
        .unwrap();
        let f = CholeskyFactors::factorize(&a).unwrap();
        let x = f.solve(&[3.0, 3.0, 5.0, 3.0]).unwrap();
        for (u, v) in x.iter().zip([1.0, 1.0, 1.0, 1.0]) {
            assert!((u - v).abs() < 1e-14);
        }
    }
}
