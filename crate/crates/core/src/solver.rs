//! Assembly and nonlinear solution of `ε d₀ᵀM₁d₀ u + d₀ᵀM₁ F(u; μ) = M₀ f`.
//!
//! Dirichlet rows are removed and their columns lifted into the load. Neumann
//! nodes stay unknown; their rows only sum over edges pointing into the
//! interior half-space and receive `q·m_i` in the load.

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::complex::MeecComplex;
use crate::error::{Error, Result};
use crate::features::{
    feature_state_jacobian, stack_features, ChannelKind, ChannelRole, EdgeFeatureBlock, FeatureLayout, FieldChannel,
    StateJacobian,
};
use crate::flux::FluxKernel;
use crate::geometry::{dot, norm, BoundaryKind, EdgeGraph, Point};
use crate::sparse::{LuFactors, SparseMatrix};

/// Problem data on a fixed point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    /// Background diffusion ε > 0.
    pub eps_diff: f64,
    /// Number of scalar state components per node.
    pub state_width: usize,
    /// Parameter channels, appended after the state channels in the feature layout.
    pub parameters: Vec<FieldChannel>,
    /// Row-major `N × N_F` forcing.
    pub forcing: Vec<f64>,
    /// Row-major `N × N_F`; read on Dirichlet nodes only.
    pub dirichlet: Vec<f64>,
    /// Row-major `N × N_F` flux density; read on Neumann nodes only.
    pub neumann: Vec<f64>,
}

impl ProblemSpec {
    /// Scalar problem with zero forcing, zero boundary data and no parameters.
    pub fn scalar(n: usize, eps_diff: f64) -> Self {
        Self {
            eps_diff,
            state_width: 1,
            parameters: Vec::new(),
            forcing: vec![0.0; n],
            dirichlet: vec![0.0; n],
            neumann: vec![0.0; n],
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !(self.eps_diff > 0.0) || !self.eps_diff.is_finite() {
            return Err(Error::InconsistentSpec("background diffusion must be positive".into()));
        }
        if self.state_width == 0 {
            return Err(Error::InconsistentSpec("state width must be positive".into()));
        }
        let nf = self.state_width;
        for (name, v) in [("forcing", &self.forcing), ("dirichlet", &self.dirichlet), ("neumann", &self.neumann)] {
            if v.len() != n * nf {
                return Err(Error::InconsistentSpec(format!(
                    "{name} has {} values, expected {}",
                    v.len(),
                    n * nf
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InconsistentSpec(format!("{name} has non-finite values")));
            }
        }
        for p in &self.parameters {
            if p.role != ChannelRole::Parameter {
                return Err(Error::InconsistentSpec(format!("channel '{}' is not a parameter", p.name)));
            }
            if p.len() != n || p.values.len() != n * p.kind.width() {
                return Err(Error::InconsistentSpec(format!("parameter '{}' has the wrong length", p.name)));
            }
            if p.values.iter().any(|x| !x.is_finite()) {
                return Err(Error::InconsistentSpec(format!("parameter '{}' has non-finite values", p.name)));
            }
        }
        Ok(())
    }
}

/// Outward unit normal at a boundary node.
///
/// The negated mean direction to the neighbors fixes the orientation. When the
/// node has boundary neighbors on both sides, the normal is taken perpendicular
/// to the chord through the nearest one on each side, which is far less
/// sensitive to jitter in the interior points.
pub fn boundary_normal(graph: &EdgeGraph, node: usize) -> Result<Point> {
    let inc = graph.incident(node);
    if inc.len() < 2 {
        return Err(Error::DegenerateNormal { node });
    }
    let mut s = [0.0, 0.0];
    for &i in inc {
        let eta = graph.eta(i);
        let r = norm(eta);
        s[0] += eta[0] / r;
        s[1] += eta[1] / r;
    }
    let l = norm(s);
    if l < 1e-8 {
        return Err(Error::DegenerateNormal { node });
    }
    let mean = [-s[0] / l, -s[1] / l];

    let kinds = graph.kinds();
    let on_hole = kinds[node] == BoundaryKind::DirichletHole;
    let same_curve = |k: BoundaryKind| k != BoundaryKind::Interior && (k == BoundaryKind::DirichletHole) == on_hole;
    // nearest boundary neighbor left and right of the mean direction
    let mut best: [Option<(f64, Point)>; 2] = [None, None];
    for inc in inc {
        if !same_curve(kinds[graph.neighbor(node, inc.edge)]) {
            continue;
        }
        let eta = graph.eta(*inc);
        let side = usize::from(mean[0] * eta[1] - mean[1] * eta[0] > 0.0);
        let r = norm(eta);
        if best[side].is_none_or(|(d, _)| r < d) {
            best[side] = Some((r, eta));
        }
    }
    if let [Some((_, a)), Some((_, b))] = best {
        let chord = [b[0] - a[0], b[1] - a[1]];
        let c = norm(chord);
        if c > 1e-12 {
            let mut n = [chord[1] / c, -chord[0] / c];
            if dot(n, mean) < 0.0 {
                n = [-n[0], -n[1]];
            }
            return Ok(n);
        }
    }
    Ok(mean)
}

/// Normals at every Neumann node (`None` elsewhere).
pub fn boundary_normals(graph: &EdgeGraph) -> Result<Vec<Option<Point>>> {
    graph
        .kinds()
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            if kind == BoundaryKind::Neumann {
                boundary_normal(graph, k).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Assembled discrete system on the unknown (interior and Neumann) nodes.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    pub complex: Arc<MeecComplex>,
    pub eps_diff: f64,
    pub n_f: usize,
    /// Unknown nodes in row order.
    pub unknowns: Vec<usize>,
    /// Row of each node, `None` on Dirichlet nodes.
    pub row_of: Vec<Option<usize>>,
    /// `n_u × N` background stiffness rows.
    pub k_full: SparseMatrix,
    /// `n_u × n_u` block acting on the unknowns.
    pub k_uu: SparseMatrix,
    /// `n_u × |E|` weak divergence rows.
    pub d: SparseMatrix,
    d_t: SparseMatrix,
    /// Row-major `n_u × N_F` load `M₀ f` plus Neumann terms.
    pub load: Vec<f64>,
    /// Row-major `N × N_F` Dirichlet values (zero elsewhere).
    pub dirichlet: Vec<f64>,
    pub parameters: Vec<FieldChannel>,
    pub layout: FeatureLayout,
    state_jac: StateJacobian,
    k_uu_lu: OnceLock<LuFactors>,
}

pub fn assemble_system(cx: Arc<MeecComplex>, spec: &ProblemSpec) -> Result<DiscreteSystem> {
    let n = cx.num_nodes();
    spec.validate(n)?;
    let nf = spec.state_width;
    let graph = &cx.graph;
    let kinds = graph.kinds();
    let normals = boundary_normals(graph)?;

    let mut row_of = vec![None; n];
    let mut unknowns = Vec::new();
    for k in 0..n {
        if !kinds[k].is_dirichlet() {
            row_of[k] = Some(unknowns.len());
            unknowns.push(k);
        }
    }
    let n_u = unknowns.len();

    let mut k_trip = Vec::new();
    let mut d_trip = Vec::new();
    let mut load = vec![0.0; n_u * nf];
    for (r, &i) in unknowns.iter().enumerate() {
        let normal = normals[i];
        for inc in graph.incident(i) {
            if let Some(nrm) = normal {
                let eta = graph.eta(*inc);
                if dot(eta, nrm) >= -1e-9 * norm(eta) {
                    continue;
                }
            }
            let j = graph.neighbor(i, inc.edge);
            let a = cx.a[inc.edge];
            k_trip.push((r, i, spec.eps_diff * a));
            k_trip.push((r, j, -spec.eps_diff * a));
            d_trip.push((r, inc.edge, f64::from(inc.sign) * a));
        }
        for c in 0..nf {
            load[r * nf + c] = cx.m[i] * spec.forcing[i * nf + c];
            if kinds[i] == BoundaryKind::Neumann {
                load[r * nf + c] += spec.neumann[i * nf + c] * cx.m[i];
            }
        }
    }
    let k_full = SparseMatrix::from_triplets(n_u, n, &k_trip)?;
    let rows: Vec<usize> = (0..n_u).collect();
    let k_uu = k_full.submatrix(&rows, &row_of, n_u);
    let d = SparseMatrix::from_triplets(n_u, graph.num_edges(), &d_trip)?;
    let d_t = d.transpose();

    let mut dirichlet = vec![0.0; n * nf];
    for k in 0..n {
        if kinds[k].is_dirichlet() {
            dirichlet[k * nf..(k + 1) * nf].copy_from_slice(&spec.dirichlet[k * nf..(k + 1) * nf]);
        }
    }

    let mut channel_spec: Vec<(String, ChannelKind, ChannelRole)> = (0..nf)
        .map(|c| (state_name(c, nf), ChannelKind::Scalar, ChannelRole::State { component: c }))
        .collect();
    channel_spec.extend(spec.parameters.iter().map(|p| (p.name.clone(), p.kind, p.role)));
    let layout = FeatureLayout::new(&channel_spec)?;
    let state_jac = feature_state_jacobian(graph, &layout);

    Ok(DiscreteSystem {
        eps_diff: spec.eps_diff,
        n_f: nf,
        unknowns,
        row_of,
        k_full,
        k_uu,
        d,
        d_t,
        load,
        dirichlet,
        parameters: spec.parameters.clone(),
        layout,
        state_jac,
        k_uu_lu: OnceLock::new(),
        complex: cx,
    })
}

fn state_name(c: usize, nf: usize) -> String {
    if nf == 1 {
        "u".to_string()
    } else {
        format!("u{c}")
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl DiscreteSystem {
    pub fn num_unknowns(&self) -> usize {
        self.unknowns.len() * self.n_f
    }

    pub fn graph(&self) -> &EdgeGraph {
        &self.complex.graph
    }

    /// Full nodal state from unknown values, Dirichlet entries set to `g`.
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let nf = self.n_f;
        let mut u = self.dirichlet.clone();
        for (r, &k) in self.unknowns.iter().enumerate() {
            u[k * nf..(k + 1) * nf].copy_from_slice(&x[r * nf..(r + 1) * nf]);
        }
        u
    }

    /// Unknown values of a full nodal state.
    pub fn restrict(&self, u: &[f64]) -> Vec<f64> {
        let nf = self.n_f;
        self.unknowns.iter().flat_map(|&k| u[k * nf..(k + 1) * nf].iter().copied()).collect()
    }

    /// Overwrites Dirichlet entries of a full state with the boundary data.
    pub fn apply_dirichlet(&self, u: &mut [f64]) {
        let nf = self.n_f;
        for (k, kind) in self.graph().kinds().iter().enumerate() {
            if kind.is_dirichlet() {
                u[k * nf..(k + 1) * nf].copy_from_slice(&self.dirichlet[k * nf..(k + 1) * nf]);
            }
        }
    }

    pub fn tolerance(&self, rel: f64) -> f64 {
        rel * inf_norm(&self.load).max(1.0)
    }

    /// `b − K_ub g`: the load after lifting the Dirichlet columns.
    pub fn lifted_rhs(&self) -> Vec<f64> {
        let nf = self.n_f;
        let mut rhs = self.load.clone();
        for c in 0..nf {
            let g: Vec<f64> = (0..self.graph().num_nodes())
                .map(|k| if self.row_of[k].is_none() { self.dirichlet[k * nf + c] } else { 0.0 })
                .collect();
            let kg = self.k_full.spmv(&g).expect("dimensions agree");
            for (r, v) in kg.into_iter().enumerate() {
                rhs[r * nf + c] -= v;
            }
        }
        rhs
    }

    /// Edge features at a full nodal state.
    pub fn features(&self, u: &[f64]) -> Result<EdgeFeatureBlock> {
        let n = self.graph().num_nodes();
        let nf = self.n_f;
        if u.len() != n * nf {
            return Err(Error::DimensionMismatch {
                op: "state",
                expected: n * nf,
                got: u.len(),
            });
        }
        let mut channels: Vec<FieldChannel> = (0..nf)
            .map(|c| {
                FieldChannel::scalar(
                    &state_name(c, nf),
                    ChannelRole::State { component: c },
                    (0..n).map(|k| u[k * nf + c]).collect(),
                )
            })
            .collect();
        channels.extend(self.parameters.iter().cloned());
        stack_features(self.graph(), &channels)
    }

    /// Flux cochain `F_e = r_e K(ξ_e)` at a full state.
    pub fn flux(&self, kernel: &FluxKernel, u: &[f64]) -> Result<Vec<f64>> {
        self.check_kernel(kernel)?;
        crate::flux::flux_cochain(self.graph(), kernel, &self.features(u)?)
    }

    pub fn check_kernel(&self, kernel: &FluxKernel) -> Result<()> {
        if kernel.output_width() != self.n_f {
            return Err(Error::DimensionMismatch {
                op: "kernel output width",
                expected: self.n_f,
                got: kernel.output_width(),
            });
        }
        kernel.check_layout(&self.layout)
    }

    /// `K u + D F` on unknown rows (no load), for a given cochain.
    fn operator_with_flux(&self, u: &[f64], flux: &[f64]) -> Vec<f64> {
        let nf = self.n_f;
        let n = self.graph().num_nodes();
        let ne = self.graph().num_edges();
        let mut out = vec![0.0; self.unknowns.len() * nf];
        for c in 0..nf {
            let uc: Vec<f64> = (0..n).map(|k| u[k * nf + c]).collect();
            let fc: Vec<f64> = (0..ne).map(|e| flux[e * nf + c]).collect();
            let ku = self.k_full.spmv(&uc).expect("dimensions agree");
            let df = self.d.spmv(&fc).expect("dimensions agree");
            for r in 0..self.unknowns.len() {
                out[r * nf + c] = ku[r] + df[r];
            }
        }
        out
    }

    /// `G(u) = K u + D F(u) − b` on the unknown rows.
    pub fn residual(&self, kernel: &FluxKernel, u: &[f64]) -> Result<Vec<f64>> {
        self.check_kernel(kernel)?;
        let density = kernel.evaluate(&self.features(u)?)?;
        self.residual_from_density(u, &density)
    }

    /// Total flux cochain `σ = ε d₀u + F(u)` over all edges.
    pub fn total_flux(&self, kernel: &FluxKernel, u: &[f64]) -> Result<Vec<f64>> {
        let nf = self.n_f;
        let mut f = self.flux(kernel, u)?;
        for (e, &(i, j)) in self.graph().edges().iter().enumerate() {
            for c in 0..nf {
                f[e * nf + c] += self.eps_diff * (u[j * nf + c] - u[i * nf + c]);
            }
        }
        Ok(f)
    }

    /// `∂G/∂u` over the unknowns (row-major node-then-component ordering).
    pub fn jacobian(&self, kernel: &FluxKernel, u: &[f64]) -> Result<SparseMatrix> {
        self.check_kernel(kernel)?;
        let block = self.features(u)?;
        let (_, kjac) = kernel.evaluate_with_jacobian(&block)?;
        self.assemble_jacobian(&kjac)
    }

    /// Residual from precomputed densities (row-major `|E| × N_F`) at a full state.
    pub fn residual_from_density(&self, u: &[f64], density: &[f64]) -> Result<Vec<f64>> {
        let nf = self.n_f;
        let mut flux = density.to_vec();
        for (e, geo) in self.graph().geometry().iter().enumerate() {
            flux[e * nf..(e + 1) * nf].iter_mut().for_each(|v| *v *= geo.length);
        }
        let mut g = self.operator_with_flux(u, &flux);
        for (gi, bi) in g.iter_mut().zip(&self.load) {
            *gi -= bi;
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteResidual);
        }
        Ok(g)
    }

    /// `∂G/∂u` from kernel feature Jacobians (row-major `|E| × N_F × n_ξ`).
    pub fn assemble_jacobian(&self, kjac: &[f64]) -> Result<SparseMatrix> {
        let nf = self.n_f;
        let graph = self.graph();
        let w = self.layout.width;
        if kjac.len() != graph.num_edges() * nf * w {
            return Err(Error::DimensionMismatch {
                op: "kernel jacobian",
                expected: graph.num_edges() * nf * w,
                got: kjac.len(),
            });
        }
        let mut trip = Vec::new();
        for r in 0..self.unknowns.len() {
            for (k, v) in self.k_full.row(r) {
                if let Some(col) = self.row_of[k] {
                    for c in 0..nf {
                        trip.push((r * nf + c, col * nf + c, v));
                    }
                }
            }
        }
        // dF_e[o]/du[node, comp] = r_e Σ_col J_e[o, col] ∂ξ_e[col]/∂u[node, comp]
        let mut local: Vec<(usize, usize, usize, f64)> = Vec::new();
        for (e, &(i, j)) in graph.edges().iter().enumerate() {
            let rows: Vec<(usize, f64)> = self.d_t.row(e).collect();
            if rows.is_empty() {
                continue;
            }
            let len = graph.geometry()[e].length;
            local.clear();
            for o in 0..nf {
                let jrow = &kjac[(e * nf + o) * w..(e * nf + o + 1) * w];
                for sd in self.state_jac.edge(e) {
                    let coef = len * jrow[sd.column] * sd.coef;
                    if coef != 0.0 {
                        local.push((o, if sd.head { j } else { i }, sd.component, coef));
                    }
                }
            }
            for &(r, dre) in &rows {
                for &(o, node, comp, coef) in &local {
                    if let Some(col) = self.row_of[node] {
                        trip.push((r * nf + o, col * nf + comp, dre * coef));
                    }
                }
            }
        }
        let n = self.num_unknowns();
        SparseMatrix::from_triplets(n, n, &trip)
    }

    /// Cached factorization of the background stiffness block.
    fn k_uu_factors(&self) -> Result<&LuFactors> {
        if let Some(lu) = self.k_uu_lu.get() {
            return Ok(lu);
        }
        let lu = LuFactors::factorize(&self.k_uu)?;
        Ok(self.k_uu_lu.get_or_init(|| lu))
    }

    /// Solves `K_uu x = rhs` for each state component.
    fn solve_background(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let nf = self.n_f;
        let nu = self.unknowns.len();
        let lu = self.k_uu_factors()?;
        let mut x = vec![0.0; nu * nf];
        for c in 0..nf {
            let rc: Vec<f64> = (0..nu).map(|r| rhs[r * nf + c]).collect();
            let xc = lu.solve(&rc)?;
            for r in 0..nu {
                x[r * nf + c] = xc[r];
            }
        }
        Ok(x)
    }

    /// Harmonic extension of the Dirichlet data (`K u = 0` on unknown rows).
    pub fn initial_guess(&self) -> Result<Vec<f64>> {
        let nf = self.n_f;
        let mut rhs = self.lifted_rhs();
        for (r, v) in rhs.iter_mut().enumerate() {
            *v -= self.load[r / nf * nf + r % nf];
        }
        Ok(self.expand(&self.solve_background(&rhs)?))
    }

    /// One lagged-flux step: `K_uu x = b − K_ub g − D F(u_prev)`.
    pub fn picard_step(&self, kernel: &FluxKernel, u: &[f64]) -> Result<Vec<f64>> {
        let nf = self.n_f;
        let ne = self.graph().num_edges();
        let flux = self.flux(kernel, u)?;
        let mut rhs = self.lifted_rhs();
        for c in 0..nf {
            let fc: Vec<f64> = (0..ne).map(|e| flux[e * nf + c]).collect();
            let df = self.d.spmv(&fc)?;
            for (r, v) in df.into_iter().enumerate() {
                rhs[r * nf + c] -= v;
            }
        }
        Ok(self.expand(&self.solve_background(&rhs)?))
    }

    /// `Dᵀ w` per component, row-major `|E| × N_F`.
    pub fn divergence_adjoint(&self, w: &[f64]) -> Result<Vec<f64>> {
        let nf = self.n_f;
        let nu = self.unknowns.len();
        let ne = self.graph().num_edges();
        let mut out = vec![0.0; ne * nf];
        for c in 0..nf {
            let wc: Vec<f64> = (0..nu).map(|r| w[r * nf + c]).collect();
            let dtw = self.d.spmv_transpose(&wc)?;
            for e in 0..ne {
                out[e * nf + c] = dtw[e];
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Newton,
    PicardFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub method: SolveMethod,
    /// Accepted line-search step (1 for Picard steps).
    pub step: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub tolerance: f64,
    pub method: SolveMethod,
    pub initial_residual: f64,
    pub history: Vec<StepRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Stop when `‖G‖∞ ≤ rel_tol · max(1, ‖b‖∞)`.
    pub rel_tol: f64,
    pub max_newton: usize,
    pub max_picard: usize,
    /// Backtracking halves the step at most this many times.
    pub max_halvings: u32,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            max_newton: 50,
            max_picard: 200,
            max_halvings: 10,
        }
    }
}

pub fn newton_solve(sys: &DiscreteSystem, kernel: &FluxKernel, u0: &[f64]) -> Result<(Vec<f64>, SolveReport)> {
    newton_solve_with(sys, kernel, u0, &SolverOptions::default())
}

/// Newton with backtracking; a stalled line search hands over to lagged-flux
/// Picard iterations, after which Newton resumes.
pub fn newton_solve_with(
    sys: &DiscreteSystem,
    kernel: &FluxKernel,
    u0: &[f64],
    opts: &SolverOptions,
) -> Result<(Vec<f64>, SolveReport)> {
    let mut u = u0.to_vec();
    sys.apply_dirichlet(&mut u);
    let tol = sys.tolerance(opts.rel_tol);
    let mut g = sys.residual(kernel, &u)?;
    let mut r = inf_norm(&g);
    let mut report = SolveReport {
        converged: r <= tol,
        iterations: 0,
        residual: r,
        tolerance: tol,
        method: SolveMethod::Newton,
        initial_residual: r,
        history: Vec::new(),
    };
    let mut newton_its = 0;
    let mut picard_its = 0;

    while !report.converged && newton_its < opts.max_newton {
        newton_its += 1;
        let jac = sys.jacobian(kernel, &u)?;
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let delta = LuFactors::factorize(&jac)?.solve(&neg)?;
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..=opts.max_halvings {
            let x: Vec<f64> = sys.restrict(&u).iter().zip(&delta).map(|(a, d)| a + alpha * d).collect();
            let trial = sys.expand(&x);
            match sys.residual(kernel, &trial) {
                Ok(gt) if inf_norm(&gt) < r => {
                    accepted = Some((trial, gt));
                    break;
                }
                Ok(_) | Err(Error::NonFiniteResidual) => alpha *= 0.5,
                Err(e) => return Err(e),
            }
        }
        match accepted {
            Some((trial, gt)) => {
                u = trial;
                g = gt;
                r = inf_norm(&g);
                report.history.push(StepRecord {
                    method: SolveMethod::Newton,
                    step: alpha,
                    residual: r,
                });
                report.converged = r <= tol;
            }
            None => {
                if picard_its >= opts.max_picard {
                    break;
                }
                report.method = SolveMethod::PicardFallback;
                let stall = r;
                while picard_its < opts.max_picard {
                    picard_its += 1;
                    let next = sys.picard_step(kernel, &u)?;
                    let gn = match sys.residual(kernel, &next) {
                        Ok(gn) => gn,
                        Err(Error::NonFiniteResidual) => break,
                        Err(e) => return Err(e),
                    };
                    u = next;
                    g = gn;
                    r = inf_norm(&g);
                    report.history.push(StepRecord {
                        method: SolveMethod::PicardFallback,
                        step: 1.0,
                        residual: r,
                    });
                    report.converged = r <= tol;
                    if report.converged || r < 0.1 * stall {
                        break;
                    }
                }
            }
        }
    }
    report.iterations = newton_its + picard_its;
    report.residual = r;
    Ok((u, report))
}

/// JSON form `{"u": [[…]], "report": {"iterations", "residual", "method"}}`.
pub fn solution_json(u: &[f64], n_f: usize, report: &SolveReport) -> serde_json::Value {
    let rows: Vec<Vec<f64>> = u.chunks(n_f).map(<[f64]>::to_vec).collect();
    serde_json::json!({
        "u": rows,
        "report": {
            "iterations": report.iterations,
            "residual": report.residual,
            "method": report.method,
            "converged": report.converged,
        }
    })
}

/// `‖u − v‖₂ / ‖v‖₂` over the unknown nodes.
pub fn relative_l2(sys: &DiscreteSystem, u: &[f64], reference: &[f64]) -> f64 {
    let (a, b) = (sys.restrict(u), sys.restrict(reference));
    let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex::{build_complex, complex_on_graph};
    use crate::flux::{analytic_kernel, MlpParams};
    use crate::geometry::{build_graph_with_radius, sample_domain, Domain, PointCloud, Side};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

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

    fn poisson_system(h: f64, seed: u64) -> (DiscreteSystem, Vec<f64>) {
        let cloud = sample_domain(&Domain::unit_square(), h, seed).unwrap();
        let cx = build_complex(&cloud, 8).unwrap().shared();
        let exact: Vec<f64> = cloud.positions.iter().map(|p| (PI * p[0]).sin() * (PI * p[1]).sin()).collect();
        let mut spec = ProblemSpec::scalar(cloud.len(), 1.0);
        spec.forcing = exact.iter().map(|u| 2.0 * PI * PI * u).collect();
        (assemble_system(cx, &spec).unwrap(), exact)
    }

    fn ad_spec(cloud: &PointCloud, angle: f64) -> ProblemSpec {
        let n = cloud.len();
        let mut spec = ProblemSpec::scalar(n, 0.2);
        let v = [angle.cos(), angle.sin()];
        spec.parameters = vec![FieldChannel::vector("v", ChannelRole::Parameter, &vec![v; n])];
        for (k, kind) in cloud.boundary_kind.iter().enumerate() {
            if *kind == BoundaryKind::DirichletHole {
                spec.dirichlet[k] = 1.0;
            }
        }
        spec
    }

    #[test]
    fn grid_load_and_lifting() {
        let cloud = grid_cloud(3);
        let g = build_graph_with_radius(&cloud, 1.2 * cloud.h).unwrap();
        let cx = complex_on_graph(&g, 1.0).unwrap().shared();
        let mut spec = ProblemSpec::scalar(9, 1.0);
        spec.forcing = vec![1.0; 9];
        spec.dirichlet = (0..9).map(|k| k as f64).collect();
        let sys = assemble_system(cx.clone(), &spec).unwrap();
        assert_eq!(sys.unknowns, vec![4]);
        // single interior node with volume |Ω| = 1 and four unit-h edges: a_e = m/h²
        assert!((sys.load[0] - 1.0).abs() < 1e-12);
        let a = 1.0 / (0.5f64 * 0.5);
        let lifted = sys.lifted_rhs();
        let expect = 1.0 + a * (1.0 + 3.0 + 5.0 + 7.0);
        assert!((lifted[0] - expect).abs() < 1e-9, "{} vs {expect}", lifted[0]);
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let cloud = sample_domain(&Domain::with_hole([0.5, 0.5], 0.2), 0.1, 0).unwrap();
        let cx = build_complex(&cloud, 8).unwrap().shared();
        let mut spec = ad_spec(&cloud, 1.0);
        spec.dirichlet = vec![0.0; cloud.len()];
        let sys = assemble_system(cx, &spec).unwrap();
        assert!(sys.load.iter().all(|&b| b == 0.0));
        let kernel = analytic_kernel("advection", 0.2).unwrap();
        let (u, rep) = newton_solve(&sys, &kernel, &vec![0.0; cloud.len()]).unwrap();
        assert!(rep.converged && rep.iterations == 0);
        assert!(u.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stiffness_block_is_symmetric() {
        let (sys, _) = poisson_system(0.1, 1);
        assert!(sys.k_uu.asymmetry() <= 1e-12 * sys.k_uu.max_abs());
    }

    #[test]
    fn inconsistent_spec_rejected() {
        let cloud = sample_domain(&Domain::unit_square(), 0.2, 0).unwrap();
        let cx = build_complex(&cloud, 8).unwrap().shared();
        let mut spec = ProblemSpec::scalar(cloud.len(), 1.0);
        spec.forcing.pop();
        assert!(matches!(assemble_system(cx.clone(), &spec), Err(Error::InconsistentSpec(_))));
        let spec = ProblemSpec::scalar(cloud.len(), 0.0);
        assert!(matches!(assemble_system(cx, &spec), Err(Error::InconsistentSpec(_))));
    }

    #[test]
    fn poisson_is_one_newton_step() {
        let (sys, _) = poisson_system(0.1, 2);
        let zero = analytic_kernel("zero", 1.0).unwrap();
        let u0 = sys.initial_guess().unwrap();
        let (u, rep) = newton_solve(&sys, &zero, &u0).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 1);
        let g = sys.residual(&zero, &u).unwrap();
        assert!(inf_norm(&g) <= 1e-12);
        // kernel ≡ 0: Jacobian equals K
        let j = sys.jacobian(&zero, &u).unwrap();
        assert_eq!(j, sys.k_uu);
    }

    #[test]
    fn residual_matches_dense_assembly() {
        let cloud = sample_domain(&Domain::with_hole([0.5, 0.5], 0.2), 0.1, 4).unwrap();
        let cx = build_complex(&cloud, 8).unwrap().shared();
        let spec = ad_spec(&cloud, 0.7);
        let sys = assemble_system(cx.clone(), &spec).unwrap();
        let kernel = analytic_kernel("nonlinear_advection", 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut u: Vec<f64> = (0..cloud.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        sys.apply_dirichlet(&mut u);
        let g = sys.residual(&kernel, &u).unwrap();
        // Dense oracle straight from the definitions, edge by edge.
        let v = [0.7f64.cos(), 0.7f64.sin()];
        for (r, &i) in sys.unknowns.iter().enumerate() {
            let mut acc = -cx.m[i] * spec.forcing[i];
            for inc in cx.graph.incident(i) {
                let (a, b) = cx.graph.edge(inc.edge);
                let geo = cx.graph.geometry()[inc.edge];
                let ubar = 0.5 * (u[a] + u[b]);
                let vt = v[0] * geo.tangent[0] + v[1] * geo.tangent[1];
                let flux = geo.length * -(vt * (ubar + 0.5 * ubar * ubar));
                let s = f64::from(inc.sign);
                acc += cx.a[inc.edge] * (0.2 * (u[i] - u[cx.graph.neighbor(i, inc.edge)]) + s * flux);
            }
            assert!((g[r] - acc).abs() <= 1e-12 * (1.0 + acc.abs()));
        }
    }

    #[test]
    fn jacobian_matches_directional_differences() {
        let cloud = sample_domain(&Domain::with_hole([0.5, 0.5], 0.2), 0.1, 5).unwrap();
        let cx = build_complex(&cloud, 8).unwrap().shared();
        let sys = assemble_system(cx, &ad_spec(&cloud, 4.2)).unwrap();
        let mut params = MlpParams::with_architecture(6, 16, 2, 1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in params.layers_mut() {
            l.b.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        }
        for kernel in [
            FluxKernel::Learned(params),
            analytic_kernel("nonlinear_advection", 0.2).unwrap(),
        ] {
            let x: Vec<f64> = (0..sys.num_unknowns()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dx: Vec<f64> = (0..sys.num_unknowns()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let u = sys.expand(&x);
            let jv = sys.jacobian(&kernel, &u).unwrap().spmv(&dx).unwrap();
            let h = 1e-6;
            let shifted = |s: f64| sys.expand(&x.iter().zip(&dx).map(|(a, b)| a + s * b).collect::<Vec<_>>());
            let gp = sys.residual(&kernel, &shifted(h)).unwrap();
            let gm = sys.residual(&kernel, &shifted(-h)).unwrap();
            let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let err: f64 = fd.iter().zip(&jv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = jv.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(err <= 1e-6 * scale, "{err} vs {scale}");
        }
    }

    #[test]
    fn linear_kernel_jacobian_is_state_independent() {
        let cloud = sample_domain(&Domain::with_hole([0.5, 0.5], 0.2), 0.1, 6).unwrap();
        let cx = build_complex(&cloud, 8).unwrap().shared();
        let sys = assemble_system(cx, &ad_spec(&cloud, 1.0)).unwrap();
        let k = analytic_kernel("advection", 0.2).unwrap();
        let a = sys.jacobian(&k, &vec![0.3; cloud.len()]).unwrap();
        let b = sys.jacobian(&k, &vec![-2.0; cloud.len()]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn advection_converges_quickly() {
        let cloud = sample_domain(&Domain::with_hole([0.5, 0.5], 0.2), 0.07, 0).unwrap();
        let cx = build_complex(&cloud, 8).unwrap().shared();
        let sys = assemble_system(cx, &ad_spec(&cloud, 245f64.to_radians())).unwrap();
        let k = analytic_kernel("advection", 0.2).unwrap();
        let (_, rep) = newton_solve(&sys, &k, &sys.initial_guess().unwrap()).unwrap();
        assert!(rep.converged && rep.iterations <= 5, "{rep:?}");
    }

    #[test]
    fn nonlinear_darcy_decreases_monotonically() {
        let cloud = sample_domain(&Domain::unit_square(), 0.07, 1).unwrap();
        let cx = build_complex(&cloud, 8).unwrap().shared();
        let n = cloud.len();
        let mut spec = ProblemSpec::scalar(n, 0.1);
        spec.forcing = vec![1.0; n];
        let alpha: Vec<f64> = cloud.positions.iter().map(|p| 1.0 + 0.5 * (3.0 * p[0]).sin() * p[1]).collect();
        spec.parameters = vec![FieldChannel::scalar("alpha", ChannelRole::Parameter, alpha)];
        let sys = assemble_system(cx, &spec).unwrap();
        let k = analytic_kernel("nonlinear_darcy", 0.1).unwrap();
        let (_, rep) = newton_solve(&sys, &k, &sys.initial_guess().unwrap()).unwrap();
        assert!(rep.converged && rep.residual <= 1e-6);
        let mut prev = rep.initial_residual;
        for s in &rep.history {
            assert!(s.residual < prev);
            prev = s.residual;
        }
    }

    #[test]
    fn picard_fallback_recovers_from_a_bad_start() {
        // Start far away so the first Newton directions overshoot; the solve must still converge.
        let cloud = sample_domain(&Domain::unit_square(), 0.1, 2).unwrap();
        let cx = build_complex(&cloud, 8).unwrap().shared();
        let n = cloud.len();
        let mut spec = ProblemSpec::scalar(n, 0.5);
        spec.forcing = vec![1.0; n];
        spec.parameters = vec![FieldChannel::scalar("alpha", ChannelRole::Parameter, vec![1.0; n])];
        let sys = assemble_system(cx, &spec).unwrap();
        let k = analytic_kernel("nonlinear_darcy", 0.5).unwrap();
        let opts = SolverOptions { max_halvings: 0, ..SolverOptions::default() };
        let (_, rep) = newton_solve_with(&sys, &k, &vec![5.0; n], &opts).unwrap();
        assert!(rep.converged, "{rep:?}");
    }

    #[test]
    fn poisson_error_decays_under_refinement() {
        let mut errs = Vec::new();
        for h in [0.1, 0.05] {
            let (sys, exact) = poisson_system(h, 3);
            let zero = analytic_kernel("zero", 1.0).unwrap();
            let (u, _) = newton_solve(&sys, &zero, &sys.initial_guess().unwrap()).unwrap();
            errs.push(relative_l2(&sys, &u, &exact));
        }
        assert!(errs[1] < errs[0] / 2.5, "{errs:?}");
    }

    #[test]
    fn consistency_residual_decays() {
        let mut res = Vec::new();
        for h in [0.1, 0.05, 0.025] {
            let (sys, exact) = poisson_system(h, 0);
            let zero = analytic_kernel("zero", 1.0).unwrap();
            let g = sys.residual(&zero, &exact).unwrap();
            // residual per unit volume: pointwise truncation error
            let worst = sys
                .unknowns
                .iter()
                .zip(&g)
                .map(|(&i, gi)| (gi / sys.complex.m[i]).abs())
                .fold(0.0, f64::max);
            res.push(worst);
        }
        assert!(res[2] < res[0], "{res:?}");
    }

    #[test]
    fn normals_on_square_and_hole() {
        let d = Domain::with_hole([0.5, 0.5], 0.25);
        let cloud = sample_domain(&d, 0.05, 0).unwrap().with_neumann_sides(&[crate::geometry::Side::Bottom]);
        let cx = build_complex(&cloud, 8).unwrap();
        for (k, kind) in cloud.boundary_kind.iter().enumerate() {
            let p = cloud.positions[k];
            match kind {
                BoundaryKind::Neumann => {
                    let n = boundary_normal(&cx.graph, k).unwrap();
                    assert!(n[1] < -0.9, "{n:?}");
                }
                BoundaryKind::DirichletHole => {
                    let n = boundary_normal(&cx.graph, k).unwrap();
                    let to_center = [0.5 - p[0], 0.5 - p[1]];
                    let cos = dot(n, to_center) / norm(to_center);
                    assert!(cos >= 15f64.to_radians().cos(), "node {k} at {p:?}: {n:?} cos {cos}");
                }
                _ => {}
            }
        }
        // Symmetric neighbors above a bottom node give exactly (0, −1).
        let pos = vec![[0.5, 0.0], [0.4, 0.1], [0.6, 0.1], [0.5, 0.1]];
        let kinds = vec![BoundaryKind::Neumann, BoundaryKind::Interior, BoundaryKind::Interior, BoundaryKind::Interior];
        let c = PointCloud::new(pos, kinds, 0.1, Domain::unit_square()).unwrap();
        let g = build_graph_with_radius(&c, 0.2).unwrap();
        let n = boundary_normal(&g, 0).unwrap();
        assert!(n[0].abs() < 1e-15 && (n[1] + 1.0).abs() < 1e-15);
        // Opposite neighbors cancel.
        let pos = vec![[0.5, 0.5], [0.4, 0.5], [0.6, 0.5]];
        let c = PointCloud::new(pos, vec![BoundaryKind::Neumann; 3], 0.1, Domain::unit_square()).unwrap();
        let g = build_graph_with_radius(&c, 0.15).unwrap();
        assert!(matches!(boundary_normal(&g, 0), Err(Error::DegenerateNormal { node: 0 })));
    }

    #[test]
    fn homogeneous_neumann_leaves_load_unchanged() {
        let cloud = sample_domain(&Domain::unit_square(), 0.1, 3).unwrap().with_neumann_sides(&[Side::Left]);
        let cx = build_complex(&cloud, 8).unwrap().shared();
        let mut spec = ProblemSpec::scalar(cloud.len(), 1.0);
        spec.forcing = vec![2.0; cloud.len()];
        let a = assemble_system(cx.clone(), &spec).unwrap();
        let expect: Vec<f64> = a.unknowns.iter().map(|&i| 2.0 * cx.m[i]).collect();
        assert_eq!(a.load, expect);
        spec.neumann = vec![0.5; cloud.len()];
        let b = assemble_system(cx.clone(), &spec).unwrap();
        for (r, &i) in b.unknowns.iter().enumerate() {
            let extra = if cloud.boundary_kind[i] == BoundaryKind::Neumann { 0.5 * cx.m[i] } else { 0.0 };
            assert!((b.load[r] - expect[r] - extra).abs() < 1e-15);
        }
        // Neumann rows only use inward edges.
        for (r, &i) in a.unknowns.iter().enumerate() {
            if cloud.boundary_kind[i] == BoundaryKind::Neumann {
                for (k, v) in a.k_full.row(r) {
                    if k != i && v != 0.0 {
                        assert!(cloud.positions[k][0] > cloud.positions[i][0]);
                    }
                }
            }
        }
    }

    #[test]
    fn solution_json_shape() {
        let (sys, _) = poisson_system(0.2, 0);
        let zero = analytic_kernel("zero", 1.0).unwrap();
        let (u, rep) = newton_solve(&sys, &zero, &sys.initial_guess().unwrap()).unwrap();
        let v = solution_json(&u, 1, &rep);
        assert_eq!(v["u"].as_array().unwrap().len(), u.len());
        assert_eq!(v["report"]["method"], "newton");
    }
}
