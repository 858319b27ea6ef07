//! Discrete de Rham complex on an ε-ball graph: kernel weights, virtual node
//! volumes, moment-matched virtual edge areas and the operators built on them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_graph, BoundaryKind, EdgeGraph, Point, PointCloud};
use crate::sparse::{triple_product, CholeskyFactors, Ordering, SparseMatrix};

/// Moment rows per constrained node in 2-D: x, y, xx, yy, xy.
pub const MOMENTS_PER_NODE: usize = 5;

/// Compact kernel `(1 − r/ε)²₊`.
pub fn kernel(r: f64, eps: f64) -> f64 {
    let t = (1.0 - r / eps).max(0.0);
    t * t
}

pub fn kernel_weights(graph: &EdgeGraph) -> Vec<f64> {
    graph.geometry().iter().map(|g| kernel(g.length, graph.eps())).collect()
}

/// Drops edges with zero kernel weight, returning the retained graph and weights.
pub fn retain_supported(graph: &EdgeGraph, phi: &[f64]) -> (EdgeGraph, Vec<f64>) {
    let keep: Vec<bool> = phi.iter().map(|&p| p > 0.0).collect();
    if keep.iter().all(|&k| k) {
        return (graph.clone(), phi.to_vec());
    }
    let kept = phi.iter().copied().filter(|&p| p > 0.0).collect();
    (graph.retain(&keep), kept)
}

/// Nodes carrying volume: everything except Dirichlet boundary nodes.
pub fn carries_volume(kind: BoundaryKind) -> bool {
    !kind.is_dirichlet()
}

/// Virtual volumes `m_i ∝ 1/κ_i`, normalized so that they sum to `omega_area`.
pub fn node_volumes(graph: &EdgeGraph, phi: &[f64], omega_area: f64) -> Result<Vec<f64>> {
    let kinds = graph.kinds();
    if !kinds.contains(&BoundaryKind::Interior) {
        return Err(Error::NoInteriorNodes);
    }
    let mut kappa = vec![0.0; graph.num_nodes()];
    for (e, &(i, j)) in graph.edges().iter().enumerate() {
        kappa[i] += phi[e];
        kappa[j] += phi[e];
    }
    let mut total = 0.0;
    for (k, &kind) in kinds.iter().enumerate() {
        if carries_volume(kind) {
            if !(kappa[k] > 0.0) {
                return Err(Error::IsolatedNode { node: k });
            }
            total += 1.0 / kappa[k];
        }
    }
    Ok(kinds
        .iter()
        .zip(&kappa)
        .map(|(&kind, &kap)| {
            if carries_volume(kind) {
                (1.0 / kap) / total * omega_area
            } else {
                0.0
            }
        })
        .collect())
}

/// Moment constraints `B a = c`, one block of [`MOMENTS_PER_NODE`] rows per node.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub b: SparseMatrix,
    pub c: Vec<f64>,
    /// Node owning each constraint block.
    pub nodes: Vec<usize>,
}

impl ConstraintSystem {
    pub fn node_of_row(&self, row: usize) -> usize {
        self.nodes[row / MOMENTS_PER_NODE]
    }

    /// `‖B a − c‖∞`
    pub fn residual_inf(&self, a: &[f64]) -> Result<f64> {
        let ba = self.b.spmv(a)?;
        Ok(ba.iter().zip(&self.c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
    }
}

/// Assembles first- and second-moment rows for every interior node.
pub fn assemble_constraints(graph: &EdgeGraph, m: &[f64]) -> Result<ConstraintSystem> {
    if m.len() != graph.num_nodes() {
        return Err(Error::DimensionMismatch {
            op: "assemble_constraints",
            expected: graph.num_nodes(),
            got: m.len(),
        });
    }
    let nodes: Vec<usize> = (0..graph.num_nodes())
        .filter(|&k| graph.kinds()[k] == BoundaryKind::Interior)
        .collect();
    let mut trip = Vec::new();
    let mut c = Vec::with_capacity(nodes.len() * MOMENTS_PER_NODE);
    for (blk, &i) in nodes.iter().enumerate() {
        let r0 = blk * MOMENTS_PER_NODE;
        for &inc in graph.incident(i) {
            let [ex, ey] = graph.eta(inc);
            trip.push((r0, inc.edge, ex));
            trip.push((r0 + 1, inc.edge, ey));
            trip.push((r0 + 2, inc.edge, ex * ex));
            trip.push((r0 + 3, inc.edge, ey * ey));
            trip.push((r0 + 4, inc.edge, ex * ey));
        }
        c.extend_from_slice(&[0.0, 0.0, 2.0 * m[i], 2.0 * m[i], 0.0]);
    }
    let b = SparseMatrix::from_triplets(c.len(), graph.num_edges(), &trip)?;
    Ok(ConstraintSystem { b, c, nodes })
}

/// Relative Tikhonov shift applied to the Schur complement before factorizing.
const SCHUR_SHIFT: f64 = 1e-10;
const MAX_REFINEMENTS: usize = 30;

/// Minimizes `½ Σ a_e²/φ_e` subject to `B a = c` through the Schur complement
/// `S = B Φ Bᵀ`.
///
/// Rows are equilibrated, identically-zero rows with zero target are dropped,
/// and `S + δI` is factorized once and used for iterative refinement. The shift
/// makes consistent but linearly dependent constraints (regular grids) solvable;
/// inconsistent ones surface as a moment residual above tolerance.
pub fn solve_areas(cs: &ConstraintSystem, phi: &[f64]) -> Result<Vec<f64>> {
    let n_e = cs.b.cols();
    if phi.len() != n_e {
        return Err(Error::DimensionMismatch {
            op: "solve_areas",
            expected: n_e,
            got: phi.len(),
        });
    }
    if phi.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::InvalidArgument("kernel weights must be positive on retained edges".into()));
    }
    if cs.c.is_empty() {
        return Ok(vec![0.0; n_e]);
    }

    // Equilibrate and drop empty rows.
    let mut kept = Vec::new();
    let mut scale = Vec::new();
    for r in 0..cs.b.rows() {
        let rmax = cs.b.row(r).map(|(_, v)| v.abs()).fold(0.0, f64::max);
        if rmax == 0.0 {
            if cs.c[r] != 0.0 {
                return Err(Error::RankDeficientConstraints { node: cs.node_of_row(r) });
            }
            continue;
        }
        kept.push(r);
        scale.push(1.0 / rmax);
    }
    let col_map: Vec<Option<usize>> = (0..n_e).map(Some).collect();
    let mut bs = cs.b.submatrix(&kept, &col_map, n_e);
    bs.scale_rows(&scale);
    let cs_scaled: Vec<f64> = kept.iter().zip(&scale).map(|(&r, s)| cs.c[r] * s).collect();
    let bt = bs.transpose();
    let s = triple_product(&bs, phi, &bt)?;
    let dmax = (0..s.rows()).map(|k| s.get(k, k)).fold(0.0, f64::max);
    let shift = SCHUR_SHIFT * dmax;
    let shifted = s.add_diagonal(shift);
    let lu = CholeskyFactors::factorize_with(&shifted, Ordering::NestedDissection, 1e-12).map_err(|e| match e {
        Error::SingularMatrix { row, .. } => Error::RankDeficientConstraints {
            node: cs.node_of_row(kept[row]),
        },
        other => other,
    })?;

    let areas = |lambda: &[f64]| -> Result<Vec<f64>> {
        let mut a = bt.spmv(lambda)?;
        for (x, p) in a.iter_mut().zip(phi) {
            *x *= p;
        }
        Ok(a)
    };
    let resid = |a: &[f64]| -> Result<Vec<f64>> {
        let ba = bs.spmv(a)?;
        Ok(cs_scaled.iter().zip(&ba).map(|(c, x)| c - x).collect())
    };
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    let mut lambda = lu.solve(&cs_scaled)?;
    let mut a = areas(&lambda)?;
    let mut r = resid(&a)?;
    let target = 1e-15 * inf(&cs_scaled).max(1e-300);
    for _ in 0..MAX_REFINEMENTS {
        let rn = inf(&r);
        if rn <= target {
            break;
        }
        let dl = lu.solve(&r)?;
        let trial_lambda: Vec<f64> = lambda.iter().zip(&dl).map(|(x, d)| x + d).collect();
        let trial_a = areas(&trial_lambda)?;
        let trial_r = resid(&trial_a)?;
        if inf(&trial_r) >= rn {
            break;
        }
        lambda = trial_lambda;
        a = trial_a;
        r = trial_r;
    }

    let tol = 1e-9 * inf(&cs.c).max(1.0);
    let ba = cs.b.spmv(&a)?;
    let (worst_row, worst) = ba
        .iter()
        .zip(&cs.c)
        .map(|(x, y)| (x - y).abs())
        .enumerate()
        .fold((0, 0.0), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
    if !(worst <= tol) {
        return Err(Error::RankDeficientConstraints { node: cs.node_of_row(worst_row) });
    }
    Ok(a)
}

/// Signed incidence `d₀` (|E|×N): row `e = (i, j)` holds −1 at `i` and +1 at `j`.
pub fn incidence(graph: &EdgeGraph) -> SparseMatrix {
    let mut trip = Vec::with_capacity(2 * graph.num_edges());
    for (e, &(i, j)) in graph.edges().iter().enumerate() {
        trip.push((e, i, -1.0));
        trip.push((e, j, 1.0));
    }
    SparseMatrix::from_triplets(graph.num_edges(), graph.num_nodes(), &trip).expect("edge indices are in range")
}

#[derive(Debug, Clone)]
pub struct MeecComplex {
    pub graph: EdgeGraph,
    pub d0: SparseMatrix,
    /// Virtual node volumes (zero on Dirichlet nodes).
    pub m: Vec<f64>,
    /// Virtual edge areas, possibly negative.
    pub a: Vec<f64>,
    pub phi: Vec<f64>,
    /// Nodes carrying moment constraints.
    pub interior: Vec<usize>,
    pub omega_area: f64,
    pub moment_residual: f64,
}

/// Summary statistics written by `--dump-complex`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexDiagnostics {
    pub sum_volumes: f64,
    pub moment_residual_inf: f64,
    pub num_negative_areas: usize,
    pub min_area: f64,
    pub max_area: f64,
}

pub fn build_complex(cloud: &PointCloud, min_degree: usize) -> Result<MeecComplex> {
    let graph = build_graph(cloud, min_degree)?;
    complex_on_graph(&graph, cloud.domain.area())
}

/// Builds the complex on a prescribed graph.
pub fn complex_on_graph(graph: &EdgeGraph, omega_area: f64) -> Result<MeecComplex> {
    let phi = kernel_weights(graph);
    let (graph, phi) = retain_supported(graph, &phi);
    let m = node_volumes(&graph, &phi, omega_area)?;
    let cs = assemble_constraints(&graph, &m)?;
    let a = solve_areas(&cs, &phi)?;
    let moment_residual = cs.residual_inf(&a)?;
    Ok(MeecComplex {
        d0: incidence(&graph),
        interior: cs.nodes,
        graph,
        m,
        a,
        phi,
        omega_area,
        moment_residual,
    })
}

impl MeecComplex {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_edges(&self) -> usize {
        self.graph.num_edges()
    }

    pub fn shared(self) -> Arc<Self> {
        Arc::new(self)
    }

    pub fn diagnostics(&self) -> ComplexDiagnostics {
        ComplexDiagnostics {
            sum_volumes: self.m.iter().sum(),
            moment_residual_inf: self.moment_residual,
            num_negative_areas: self.a.iter().filter(|&&a| a < 0.0).count(),
            min_area: self.a.iter().copied().fold(f64::INFINITY, f64::min),
            max_area: self.a.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// `d₀ᵀ M₁` over all nodes (N×|E|).
    pub fn weak_divergence(&self) -> SparseMatrix {
        let mut trip = Vec::with_capacity(2 * self.num_edges());
        for (e, &(i, j)) in self.graph.edges().iter().enumerate() {
            trip.push((i, e, -self.a[e]));
            trip.push((j, e, self.a[e]));
        }
        SparseMatrix::from_triplets(self.num_nodes(), self.num_edges(), &trip).expect("edge indices are in range")
    }

    /// `δ₁σ` for an edge cochain with `n_f` components per edge (row-major).
    /// Rows outside the constrained interior are reported as zero.
    pub fn codifferential(&self, sigma: &[f64], n_f: usize) -> Result<Vec<f64>> {
        if sigma.len() != self.num_edges() * n_f {
            return Err(Error::DimensionMismatch {
                op: "codifferential",
                expected: self.num_edges() * n_f,
                got: sigma.len(),
            });
        }
        let mut out = vec![0.0; self.num_nodes() * n_f];
        for &i in &self.interior {
            for inc in self.graph.incident(i) {
                let w = f64::from(inc.sign) * self.a[inc.edge];
                for c in 0..n_f {
                    out[i * n_f + c] += w * sigma[inc.edge * n_f + c];
                }
            }
            for c in 0..n_f {
                out[i * n_f + c] /= self.m[i];
            }
        }
        Ok(out)
    }

    /// `K = ε d₀ᵀM₁d₀` restricted to interior rows, all columns.
    pub fn stiffness(&self, eps_diff: f64) -> Result<SparseMatrix> {
        if !(eps_diff > 0.0) {
            return Err(Error::InvalidArgument("background diffusion must be positive".into()));
        }
        let mut trip = Vec::new();
        for (row, &i) in self.interior.iter().enumerate() {
            for inc in self.graph.incident(i) {
                let j = self.graph.neighbor(i, inc.edge);
                let w = eps_diff * self.a[inc.edge];
                trip.push((row, i, w));
                trip.push((row, j, -w));
            }
        }
        SparseMatrix::from_triplets(self.interior.len(), self.num_nodes(), &trip)
    }

    /// Hodge Laplacian `Δ₀ = M₀⁻¹d₀ᵀM₁d₀` (N×N) with zero rows off the interior.
    pub fn hodge_laplacian(&self) -> SparseMatrix {
        let mut trip = Vec::new();
        for &i in &self.interior {
            for inc in self.graph.incident(i) {
                let j = self.graph.neighbor(i, inc.edge);
                let w = self.a[inc.edge] / self.m[i];
                trip.push((i, i, w));
                trip.push((i, j, -w));
            }
        }
        SparseMatrix::from_triplets(self.num_nodes(), self.num_nodes(), &trip).expect("indices in range")
    }
}

/// Midpoint-rule 1-cochain of a vector field: `σ_e = δx_e · p(x̄_e)`.
pub fn edge_cochain(graph: &EdgeGraph, field: impl Fn(Point) -> Point) -> Vec<f64> {
    graph
        .geometry()
        .iter()
        .map(|g| {
            let p = field(g.midpoint);
            g.delta[0] * p[0] + g.delta[1] * p[1]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_graph_with_radius, rotate, sample_domain, Domain};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn grid_cloud(n: usize) -> PointCloud {
        let h = 1.0 / (n - 1) as f64;
        let mut pos = Vec::new();
        let mut kinds = Vec::new();
        for j in 0..n {
            for i in 0..n {
                pos.push([i as f64 * h, j as f64 * h]);
                let b = i == 0 || j == 0 || i == n - 1 || j == n - 1;
                kinds.push(if b { BoundaryKind::DirichletOuter } else { BoundaryKind::Interior });
            }
        }
        PointCloud::new(pos, kinds, h, Domain::unit_square()).unwrap()
    }

    /// Small random cloud: jittered interior points plus a ring of boundary nodes.
    fn random_cloud(seed: u64, n_side: usize) -> PointCloud {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let h = 1.0 / n_side as f64;
        let mut pos = Vec::new();
        let mut kinds = Vec::new();
        for k in 0..n_side {
            let t = k as f64 * h;
            for p in [[t, 0.0], [1.0, t], [1.0 - t, 1.0], [0.0, 1.0 - t]] {
                pos.push(p);
                kinds.push(BoundaryKind::DirichletOuter);
            }
        }
        for j in 0..n_side {
            for i in 0..n_side {
                pos.push([
                    (i as f64 + 0.5 + rng.gen_range(-0.25..0.25)) * h,
                    (j as f64 + 0.5 + rng.gen_range(-0.25..0.25)) * h,
                ]);
                kinds.push(BoundaryKind::Interior);
            }
        }
        PointCloud::new(pos, kinds, h, Domain::unit_square()).unwrap()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel(0.6, 0.6), 0.0);
        assert!((kernel(0.5, 0.6) - 1.0 / 36.0).abs() < 1e-15);
        assert_eq!(kernel(0.0, 0.6), 1.0);
        assert_eq!(kernel(0.9, 0.6), 0.0);
    }

    #[test]
    fn volumes_follow_inverse_kernel_mass() {
        // path 0–1–2–3 with interior nodes 1, 2
        let pos = vec![[0.0, 0.5], [0.3, 0.5], [0.6, 0.5], [0.9, 0.5]];
        let kinds = vec![
            BoundaryKind::DirichletOuter,
            BoundaryKind::Interior,
            BoundaryKind::Interior,
            BoundaryKind::DirichletOuter,
        ];
        let cloud = PointCloud::new(pos, kinds, 0.3, Domain::unit_square()).unwrap();
        let g = build_graph_with_radius(&cloud, 0.4).unwrap();
        let m = node_volumes(&g, &[1.0, 1.0, 1.0], 1.0).unwrap();
        assert_eq!(m, vec![0.0, 0.5, 0.5, 0.0]);
        // κ = (1, 3) on the interior pair
        let m = node_volumes(&g, &[0.5, 0.5, 2.5], 1.0).unwrap();
        assert!((m[1] - 0.75).abs() < 1e-15 && (m[2] - 0.25).abs() < 1e-15);

        let all_dirichlet = PointCloud::new(
            vec![[0.0, 0.0], [0.1, 0.0]],
            vec![BoundaryKind::DirichletOuter; 2],
            0.1,
            Domain::unit_square(),
        )
        .unwrap();
        let g = build_graph_with_radius(&all_dirichlet, 0.2).unwrap();
        assert!(matches!(node_volumes(&g, &[1.0], 1.0), Err(Error::NoInteriorNodes)));
    }

    fn plus_stencil(h: f64) -> (EdgeGraph, Vec<f64>) {
        let c = [0.5, 0.5];
        let pos = vec![c, [0.5 + h, 0.5], [0.5 - h, 0.5], [0.5, 0.5 + h], [0.5, 0.5 - h]];
        let mut kinds = vec![BoundaryKind::DirichletOuter; 5];
        kinds[0] = BoundaryKind::Interior;
        let cloud = PointCloud::new(pos, kinds, h, Domain::unit_square()).unwrap();
        let g = build_graph_with_radius(&cloud, 1.2 * h).unwrap();
        let mut m = vec![0.0; 5];
        m[0] = h * h;
        (g, m)
    }

    #[test]
    fn plus_stencil_constraints_and_areas() {
        let h = 0.1;
        let (g, m) = plus_stencil(h);
        assert_eq!(g.num_edges(), 4);
        let cs = assemble_constraints(&g, &m).unwrap();
        assert_eq!(cs.b.rows(), 5);
        // edges (0,1) east, (0,2) west, (0,3) north, (0,4) south
        let dense = cs.b.to_dense();
        let row = |r: usize| &dense[r * 4..(r + 1) * 4];
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(close(row(0), &[h, -h, 0.0, 0.0]));
        assert!(close(row(2), &[h * h, h * h, 0.0, 0.0]));
        assert_eq!(cs.c, vec![0.0, 0.0, 2.0 * h * h, 2.0 * h * h, 0.0]);
        let a = solve_areas(&cs, &kernel_weights(&g)).unwrap();
        for x in a {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_constraint_system() {
        let cloud = PointCloud::new(
            vec![[0.0, 0.0], [0.1, 0.0]],
            vec![BoundaryKind::DirichletOuter; 2],
            0.1,
            Domain::unit_square(),
        )
        .unwrap();
        let g = build_graph_with_radius(&cloud, 0.2).unwrap();
        let cs = assemble_constraints(&g, &[0.0, 0.0]).unwrap();
        assert_eq!(cs.b.rows(), 0);
        assert_eq!(solve_areas(&cs, &[1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn insufficient_incidence_is_rank_deficient() {
        // Interior node with neighbors on a single line cannot match the yy moment.
        let pos = vec![[0.5, 0.5], [0.6, 0.5], [0.4, 0.5]];
        let kinds = vec![BoundaryKind::Interior, BoundaryKind::DirichletOuter, BoundaryKind::DirichletOuter];
        let cloud = PointCloud::new(pos, kinds, 0.1, Domain::unit_square()).unwrap();
        let g = build_graph_with_radius(&cloud, 0.15).unwrap();
        let cs = assemble_constraints(&g, &[0.01, 0.0, 0.0]).unwrap();
        assert!(matches!(
            solve_areas(&cs, &kernel_weights(&g)),
            Err(Error::RankDeficientConstraints { node: 0 })
        ));
    }

    /// Dense KKT `[[Φ⁻¹, −Bᵀ], [B, 0]] [a; λ] = [0; c]` solved by LU.
    fn kkt_oracle(cs: &ConstraintSystem, phi: &[f64]) -> Vec<f64> {
        let (nc, ne) = (cs.b.rows(), cs.b.cols());
        let b = DMatrix::from_row_slice(nc, ne, &cs.b.to_dense());
        let n = ne + nc;
        let mut k = DMatrix::<f64>::zeros(n, n);
        for e in 0..ne {
            k[(e, e)] = 1.0 / phi[e];
        }
        k.view_mut((0, ne), (ne, nc)).copy_from(&(-b.transpose()));
        k.view_mut((ne, 0), (nc, ne)).copy_from(&b);
        let mut rhs = DVector::zeros(n);
        for r in 0..nc {
            rhs[ne + r] = cs.c[r];
        }
        let sol = k.lu().solve(&rhs).expect("nonsingular KKT");
        sol.rows(0, ne).iter().copied().collect()
    }

    #[test]
    fn schur_matches_dense_kkt() {
        for seed in 0..5 {
            let cloud = random_cloud(seed, 5);
            assert!(cloud.len() <= 50);
            let g = build_graph(&cloud, 8).unwrap();
            let phi = kernel_weights(&g);
            let m = node_volumes(&g, &phi, 1.0).unwrap();
            let cs = assemble_constraints(&g, &m).unwrap();
            let a = solve_areas(&cs, &phi).unwrap();
            let oracle = kkt_oracle(&cs, &phi);
            let diff: f64 = a.iter().zip(&oracle).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = oracle.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(diff <= 1e-8 * scale, "seed {seed}: {diff} vs {scale}");
        }
    }

    #[test]
    fn qp_optimality_along_null_space() {
        use rand::{Rng, SeedableRng};
        let cloud = random_cloud(11, 5);
        let g = build_graph(&cloud, 8).unwrap();
        let phi = kernel_weights(&g);
        let m = node_volumes(&g, &phi, 1.0).unwrap();
        let cs = assemble_constraints(&g, &m).unwrap();
        let a = solve_areas(&cs, &phi).unwrap();
        let b = DMatrix::from_row_slice(cs.b.rows(), cs.b.cols(), &cs.b.to_dense());
        let pinv = b.clone().pseudo_inverse(1e-12).unwrap();
        let ne = cs.b.cols();
        let projector = DMatrix::<f64>::identity(ne, ne) - &pinv * &b;
        let obj = |x: &[f64]| x.iter().zip(&phi).map(|(a, p)| 0.5 * a * a / p).sum::<f64>();
        let f0 = obj(&a);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tested = 0;
        for _ in 0..5 {
            let raw = DVector::from_fn(ne, |_, _| rng.gen_range(-1.0..1.0));
            let dir = &projector * raw;
            assert!((&b * &dir).amax() <= 1e-10 * dir.amax());
            for t in [1e-3, -1e-3] {
                let x: Vec<f64> = a.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
                assert!(obj(&x) > f0);
            }
            tested += 1;
        }
        assert_eq!(tested, 5);
    }

    #[test]
    fn uniform_grid_gives_five_point_laplacian() {
        let n = 9;
        let cloud = grid_cloud(n);
        let h = cloud.h;
        let g = build_graph_with_radius(&cloud, 1.2 * h).unwrap();
        let cx = complex_on_graph(&g, 1.0).unwrap();
        let lap = cx.hodge_laplacian();
        for &i in &cx.interior {
            for (j, v) in lap.row(i) {
                let expect = if j == i { 4.0 / (h * h) } else { -1.0 / (h * h) };
                assert!((v - expect).abs() <= 1e-9 * (1.0 / (h * h)), "row {i} col {j}: {v}");
            }
            assert_eq!(lap.row(i).count(), 5);
        }
    }

    #[test]
    fn stiffness_on_path_graph() {
        let pos = vec![[0.2, 0.5], [0.5, 0.5], [0.8, 0.5]];
        let kinds = vec![BoundaryKind::DirichletOuter, BoundaryKind::Interior, BoundaryKind::DirichletOuter];
        let cloud = PointCloud::new(pos, kinds, 0.3, Domain::unit_square()).unwrap();
        let g = build_graph_with_radius(&cloud, 0.4).unwrap();
        let cx = MeecComplex {
            d0: incidence(&g),
            m: vec![0.0, 1.0, 0.0],
            a: vec![1.0, 1.0],
            phi: kernel_weights(&g),
            interior: vec![1],
            omega_area: 1.0,
            moment_residual: 0.0,
            graph: g,
        };
        let k = cx.stiffness(1.0).unwrap();
        assert_eq!(k.to_dense(), vec![-1.0, 2.0, -1.0]);
        assert!(cx.stiffness(0.0).is_err());
    }

    #[test]
    fn stiffness_interior_block_is_positive_definite() {
        let cloud = grid_cloud(7);
        let g = build_graph_with_radius(&cloud, 1.2 * cloud.h).unwrap();
        let cx = complex_on_graph(&g, 1.0).unwrap();
        let k = cx.stiffness(1.0).unwrap();
        let col_map: Vec<Option<usize>> = {
            let mut map = vec![None; cx.num_nodes()];
            for (r, &i) in cx.interior.iter().enumerate() {
                map[i] = Some(r);
            }
            map
        };
        let rows: Vec<usize> = (0..cx.interior.len()).collect();
        let kuu = k.submatrix(&rows, &col_map, cx.interior.len());
        assert!(kuu.asymmetry() <= 1e-12);
        let n = kuu.rows();
        assert_eq!(n, 25);
        let dense = DMatrix::from_row_slice(n, n, &kuu.to_dense());
        let eig = dense.symmetric_eigen();
        assert!(eig.eigenvalues.min() > 0.0);
    }

    #[test]
    fn jittered_square_invariants() {
        let cloud = sample_domain(&Domain::unit_square(), 0.05, 7).unwrap();
        let cx = build_complex(&cloud, 8).unwrap();
        let total: f64 = cx.m.iter().sum();
        assert!((total - 1.0).abs() <= 1e-10);
        assert!(cx.moment_residual <= 1e-9);
        // d₀ 𝟙 = 0 and two entries per row
        let ones = vec![1.0; cx.num_nodes()];
        assert!(cx.d0.spmv(&ones).unwrap().iter().all(|&x| x == 0.0));
        for e in 0..cx.num_edges() {
            let row: Vec<_> = cx.d0.row(e).collect();
            assert_eq!(row.len(), 2);
            assert_eq!((row[0].1, row[1].1), (-1.0, 1.0));
        }
        // Δ₀ annihilates constants
        let lap = cx.hodge_laplacian();
        assert!(lap.spmv(&ones).unwrap().iter().all(|x| x.abs() <= 1e-12 * lap.max_abs()));
    }

    #[test]
    fn affine_exactness() {
        let cloud = sample_domain(&Domain::with_hole([0.45, 0.55], 0.15), 0.07, 2).unwrap();
        let cx = build_complex(&cloud, 8).unwrap();
        let fields: [(fn(Point) -> Point, f64); 6] = [
            (|_| [1.0, 0.0], 0.0),
            (|_| [0.0, 1.0], 0.0),
            (|p| [p[0], 0.0], -1.0),
            (|p| [p[1], 0.0], 0.0),
            (|p| [0.0, p[0]], 0.0),
            (|p| [0.0, p[1]], -1.0),
        ];
        for (f, expect) in fields {
            let sigma = edge_cochain(&cx.graph, f);
            let d = cx.codifferential(&sigma, 1).unwrap();
            for &i in &cx.interior {
                assert!((d[i] - expect).abs() <= 1e-9, "{} vs {expect}", d[i]);
            }
        }
        let sigma = edge_cochain(&cx.graph, |p| p);
        let d = cx.codifferential(&sigma, 1).unwrap();
        for &i in &cx.interior {
            assert!((d[i] + 2.0).abs() <= 1e-9);
        }
        let zero = cx.codifferential(&vec![0.0; cx.num_edges()], 1).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rotated_cloud_reproduces_areas() {
        let cloud = sample_domain(&Domain::unit_square(), 0.1, 5).unwrap();
        let cx = build_complex(&cloud, 8).unwrap();
        let angle = 37f64.to_radians();
        let rc = cloud.rigid_transform(angle, [0.0, 0.0]);
        let gr = build_graph_with_radius(&rc, cx.graph.eps()).unwrap();
        let cr = complex_on_graph(&gr, cloud.domain.area()).unwrap();
        assert_eq!(cr.graph.edges(), cx.graph.edges());
        for (a, b) in cx.a.iter().zip(&cr.a) {
            assert!((a - b).abs() <= 1e-9);
        }
        let _ = rotate([0.0, 0.0], 0.0);
    }

    #[test]
    fn diagnostics_summarize_areas() {
        let cloud = sample_domain(&Domain::unit_square(), 0.1, 1).unwrap();
        let cx = build_complex(&cloud, 8).unwrap();
        let d = cx.diagnostics();
        assert!((d.sum_volumes - 1.0).abs() < 1e-12);
        assert!(d.min_area <= d.max_area);
        let json = serde_json::to_value(&d).unwrap();
        for key in ["sum_volumes", "moment_residual_inf", "num_negative_areas", "min_area", "max_area"] {
            assert!(json.get(key).is_some());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn conservation_identity(seed in 0u64..1000, sigma_seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let cloud = random_cloud(seed, 6);
            let cx = build_complex(&cloud, 8).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sigma_seed);
            let sigma: Vec<f64> = (0..cx.num_edges()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let div = cx.weak_divergence().spmv(&sigma).unwrap();
            let total: f64 = div.iter().sum();
            let scale: f64 = sigma.iter().zip(&cx.a).map(|(s, a)| (s * a).abs()).sum();
            prop_assert!(total.abs() <= 1e-12 * scale);
        }
    }
}
