//! Point clouds on the unit square with circular holes, and the ε-ball edge
//! graph with cached per-edge geometry.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Tolerance used when classifying nodes as lying on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hole {
    pub center: Point,
    pub radius: f64,
}

/// Unit square `[0,1]²` with disjoint circular holes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Domain {
    pub holes: Vec<Hole>,
}

impl Domain {
    pub fn unit_square() -> Self {
        Self::default()
    }

    pub fn with_hole(center: Point, radius: f64) -> Self {
        Self {
            holes: vec![Hole { center, radius }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, hole) in self.holes.iter().enumerate() {
            let [cx, cy] = hole.center;
            if !(hole.radius > 0.0) || !hole.radius.is_finite() {
                return Err(Error::InvalidDomain(format!("hole {k} has non-positive radius")));
            }
            let margin = [cx, 1.0 - cx, cy, 1.0 - cy].into_iter().fold(f64::INFINITY, f64::min);
            if !(margin > hole.radius) {
                return Err(Error::InvalidDomain(format!(
                    "hole {k} (radius {}) is not strictly inside the unit square",
                    hole.radius
                )));
            }
            for (l, other) in self.holes.iter().enumerate().skip(k + 1) {
                if dist(hole.center, other.center) <= hole.radius + other.radius {
                    return Err(Error::InvalidDomain(format!("holes {k} and {l} intersect")));
                }
            }
        }
        Ok(())
    }

    /// |Ω|: square area minus hole areas.
    pub fn area(&self) -> f64 {
        1.0 - self.holes.iter().map(|h| PI * h.radius * h.radius).sum::<f64>()
    }

    pub fn contains(&self, p: Point) -> bool {
        let tol = BOUNDARY_TOL;
        let in_square = (-tol..=1.0 + tol).contains(&p[0]) && (-tol..=1.0 + tol).contains(&p[1]);
        in_square && self.holes.iter().all(|h| dist(p, h.center) >= h.radius - tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Interior,
    DirichletOuter,
    DirichletHole,
    Neumann,
}

impl BoundaryKind {
    pub fn is_dirichlet(self) -> bool {
        matches!(self, BoundaryKind::DirichletOuter | BoundaryKind::DirichletHole)
    }
}

/// Side of the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

impl Side {
    fn holds(self, p: Point) -> bool {
        let t = BOUNDARY_TOL;
        match self {
            Side::Left => p[0].abs() <= t,
            Side::Right => (p[0] - 1.0).abs() <= t,
            Side::Bottom => p[1].abs() <= t,
            Side::Top => (p[1] - 1.0).abs() <= t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub positions: Vec<Point>,
    pub boundary_kind: Vec<BoundaryKind>,
    pub h: f64,
    pub domain: Domain,
}

impl PointCloud {
    pub fn new(positions: Vec<Point>, boundary_kind: Vec<BoundaryKind>, h: f64, domain: Domain) -> Result<Self> {
        if positions.len() != boundary_kind.len() {
            return Err(Error::InvalidArgument(format!(
                "{} positions but {} boundary kinds",
                positions.len(),
                boundary_kind.len()
            )));
        }
        if !(h > 0.0) {
            return Err(Error::InvalidArgument("spacing h must be positive".into()));
        }
        if positions.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::InvalidArgument("non-finite node position".into()));
        }
        Ok(Self {
            positions,
            boundary_kind,
            h,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn count(&self, kind: BoundaryKind) -> usize {
        self.boundary_kind.iter().filter(|&&k| k == kind).count()
    }

    /// Retags outer Dirichlet nodes on the given sides (corners excluded) as Neumann.
    pub fn with_neumann_sides(mut self, sides: &[Side]) -> Self {
        for (p, kind) in self.positions.iter().zip(self.boundary_kind.iter_mut()) {
            if *kind != BoundaryKind::DirichletOuter {
                continue;
            }
            let on: Vec<_> = [Side::Left, Side::Right, Side::Bottom, Side::Top]
                .into_iter()
                .filter(|s| s.holds(*p))
                .collect();
            if on.len() == 1 && sides.contains(&on[0]) {
                *kind = BoundaryKind::Neumann;
            }
        }
        self
    }

    /// Applies `x ↦ R(angle)·x + shift` to every node. The domain description
    /// is kept in the reference frame; only positions move.
    pub fn rigid_transform(&self, angle: f64, shift: Point) -> PointCloud {
        let mut out = self.clone();
        for p in &mut out.positions {
            *p = add(rotate(*p, angle), shift);
        }
        out
    }

    /// Checks that every node lies in Ω and that boundary-tagged nodes lie on ∂Ω.
    pub fn check_against_domain(&self) -> Result<()> {
        for (i, (&p, &kind)) in self.positions.iter().zip(&self.boundary_kind).enumerate() {
            if !self.domain.contains(p) {
                return Err(Error::InvalidArgument(format!("node {i} lies outside the domain")));
            }
            let on_outer = p[0].abs() <= BOUNDARY_TOL
                || (p[0] - 1.0).abs() <= BOUNDARY_TOL
                || p[1].abs() <= BOUNDARY_TOL
                || (p[1] - 1.0).abs() <= BOUNDARY_TOL;
            let on_hole = self
                .domain
                .holes
                .iter()
                .any(|h| (dist(p, h.center) - h.radius).abs() <= BOUNDARY_TOL);
            let ok = match kind {
                BoundaryKind::Interior => !on_outer && !on_hole,
                BoundaryKind::DirichletOuter => on_outer,
                BoundaryKind::DirichletHole => on_hole,
                BoundaryKind::Neumann => on_outer || on_hole,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!("node {i} is tagged {kind:?} inconsistently")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cloud: PointCloud = serde_json::from_str(s)?;
        PointCloud::new(cloud.positions, cloud.boundary_kind, cloud.h, cloud.domain)
    }
}

/// Options for [`sample_domain_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions {
    /// Jitter amplitude as a fraction of the grid spacing (at most 0.25).
    pub jitter: f64,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { jitter: 0.25 }
    }
}

pub fn sample_domain(domain: &Domain, h: f64, seed: u64) -> Result<PointCloud> {
    sample_domain_with(domain, h, seed, &SamplerOptions::default())
}

/// Jittered-grid interior nodes plus arc-length boundary nodes at spacing `h`.
pub fn sample_domain_with(domain: &Domain, h: f64, seed: u64, opts: &SamplerOptions) -> Result<PointCloud> {
    domain.validate()?;
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument("spacing h must be positive".into()));
    }
    if !(0.0..=0.25).contains(&opts.jitter) {
        return Err(Error::InvalidArgument("jitter must lie in [0, 0.25]".into()));
    }
    if let Some(rmin) = domain.holes.iter().map(|h| h.radius).reduce(f64::min) {
        if h >= rmin {
            return Err(Error::InvalidArgument(format!(
                "spacing {h} is not smaller than the smallest hole radius {rmin}"
            )));
        }
    }

    let mut positions = Vec::new();
    let mut kinds = Vec::new();

    // Outer boundary, counterclockwise from the origin.
    let n_side = ((1.0 / h).round() as usize).max(1);
    let s = 1.0 / n_side as f64;
    for k in 0..n_side {
        let t = k as f64 * s;
        positions.push([t, 0.0]);
        positions.push([1.0, t]);
        positions.push([1.0 - t, 1.0]);
        positions.push([0.0, 1.0 - t]);
    }
    // Reorder so that the perimeter is traversed side by side.
    let mut outer = Vec::with_capacity(4 * n_side);
    for side in 0..4 {
        for k in 0..n_side {
            outer.push(positions[4 * k + side]);
        }
    }
    positions = outer;
    kinds.resize(positions.len(), BoundaryKind::DirichletOuter);

    for (k, hole) in domain.holes.iter().enumerate() {
        let n = (2.0 * PI * hole.radius / h).round() as usize;
        if n < 8 {
            return Err(Error::SpacingTooCoarse { hole: k, nodes: n });
        }
        for m in 0..n {
            let t = 2.0 * PI * m as f64 / n as f64;
            positions.push([hole.center[0] + hole.radius * t.cos(), hole.center[1] + hole.radius * t.sin()]);
            kinds.push(BoundaryKind::DirichletHole);
        }
    }

    // Interior jittered grid; grid points within the 0.5h collar of a hole are rejected.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = opts.jitter * s;
    for j in 0..n_side {
        for i in 0..n_side {
            let base = [(i as f64 + 0.5) * s, (j as f64 + 0.5) * s];
            let jx = rng.gen_range(-1.0..=1.0) * amp;
            let jy = rng.gen_range(-1.0..=1.0) * amp;
            let near_hole = domain
                .holes
                .iter()
                .any(|hole| dist(base, hole.center) - hole.radius < 0.5 * h);
            if near_hole {
                continue;
            }
            positions.push([base[0] + jx, base[1] + jy]);
            kinds.push(BoundaryKind::Interior);
        }
    }

    PointCloud::new(positions, kinds, h, domain.clone())
}

/// Cached geometry of an oriented edge `(i, j)`, `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeGeometry {
    /// δx = x_j − x_i
    pub delta: Point,
    pub length: f64,
    pub midpoint: Point,
    pub tangent: Point,
}

impl EdgeGeometry {
    fn new(xi: Point, xj: Point) -> Self {
        let delta = sub(xj, xi);
        let length = norm(delta);
        Self {
            delta,
            length,
            midpoint: [xi[0] + 0.5 * delta[0], xi[1] + 0.5 * delta[1]],
            tangent: [delta[0] / length, delta[1] / length],
        }
    }

    /// Counterclockwise normal `R_{π/2} ê`.
    pub fn normal(&self) -> Point {
        [-self.tangent[1], self.tangent[0]]
    }
}

/// Incidence of an edge at a node with orientation sign `s_e(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Incidence {
    pub edge: usize,
    pub sign: i8,
}

/// ε-ball graph over a point cloud.
#[derive(Debug, Clone)]
pub struct EdgeGraph {
    positions: Vec<Point>,
    kinds: Vec<BoundaryKind>,
    h: f64,
    eps: f64,
    edges: Vec<(usize, usize)>,
    geometry: Vec<EdgeGeometry>,
    adjacency: Vec<Vec<Incidence>>,
}

impl EdgeGraph {
    fn from_edges(cloud: &PointCloud, eps: f64, edges: Vec<(usize, usize)>) -> Result<Self> {
        let positions = cloud.positions.clone();
        let mut adjacency = vec![Vec::new(); positions.len()];
        let mut geometry = Vec::with_capacity(edges.len());
        for (e, &(i, j)) in edges.iter().enumerate() {
            debug_assert!(i < j);
            let g = EdgeGeometry::new(positions[i], positions[j]);
            if !(g.length > 0.0) {
                return Err(Error::InvalidArgument(format!("nodes {i} and {j} coincide")));
            }
            geometry.push(g);
            adjacency[i].push(Incidence { edge: e, sign: -1 });
            adjacency[j].push(Incidence { edge: e, sign: 1 });
        }
        Ok(Self {
            positions,
            kinds: cloud.boundary_kind.clone(),
            h: cloud.h,
            eps,
            edges,
            geometry,
            adjacency,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.positions.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn kinds(&self) -> &[BoundaryKind] {
        &self.kinds
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn geometry(&self) -> &[EdgeGeometry] {
        &self.geometry
    }

    pub fn edge(&self, e: usize) -> (usize, usize) {
        self.edges[e]
    }

    pub fn incident(&self, node: usize) -> &[Incidence] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// The endpoint of `edge` opposite to `node`.
    pub fn neighbor(&self, node: usize, edge: usize) -> usize {
        let (i, j) = self.edges[edge];
        if i == node {
            j
        } else {
            i
        }
    }

    /// η_e = x_neighbor − x_node for an incidence stored at `node`.
    pub fn eta(&self, inc: Incidence) -> Point {
        let d = self.geometry[inc.edge].delta;
        // s = −1 when node is the tail (η = δx), +1 when it is the head (η = −δx).
        let s = -f64::from(inc.sign);
        [s * d[0], s * d[1]]
    }

    /// Subgraph keeping only edges with `keep[e]`.
    pub fn retain(&self, keep: &[bool]) -> EdgeGraph {
        let mut adjacency = vec![Vec::new(); self.positions.len()];
        let mut edges = Vec::new();
        let mut geometry = Vec::new();
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            if !keep[e] {
                continue;
            }
            let ne = edges.len();
            edges.push((i, j));
            geometry.push(self.geometry[e]);
            adjacency[i].push(Incidence { edge: ne, sign: -1 });
            adjacency[j].push(Incidence { edge: ne, sign: 1 });
        }
        EdgeGraph {
            positions: self.positions.clone(),
            kinds: self.kinds.clone(),
            h: self.h,
            eps: self.eps,
            edges,
            geometry,
            adjacency,
        }
    }

    /// Number of connected components.
    pub fn components(&self) -> usize {
        let n = self.positions.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &(i, j) in &self.edges {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a] = b;
            }
        }
        (0..n).filter(|&x| find(&mut parent, x) == x).count()
    }
}

/// Cloud at spacing `h/2` whose first `N` nodes are the coarse cloud.
///
/// Boundary curves are refined by inserting midpoints between consecutive
/// coarse boundary nodes, so the boundary stays nested. Interior nodes come
/// from a fresh sample at `h/2`; samples closer than `0.5·h/2` to a coarse node
/// are dropped, which is the sampler's own minimum interior separation. Outer
/// nodes on sides that carry Neumann nodes in the coarse cloud are Neumann.
pub fn refine_cloud(coarse: &PointCloud, seed: u64) -> Result<PointCloud> {
    let hf = 0.5 * coarse.h;
    let fine = sample_domain(&coarse.domain, hf, seed)?;
    let sides = [Side::Left, Side::Right, Side::Bottom, Side::Top];
    let neumann_sides: Vec<Side> = sides
        .into_iter()
        .filter(|s| {
            coarse
                .positions
                .iter()
                .zip(&coarse.boundary_kind)
                .any(|(&p, &k)| k == BoundaryKind::Neumann && s.holds(p))
        })
        .collect();
    let mut positions = coarse.positions.clone();
    let mut kinds = coarse.boundary_kind.clone();

    let mut outer: Vec<(f64, Point)> = coarse
        .positions
        .iter()
        .zip(&coarse.boundary_kind)
        .filter(|(_, &k)| matches!(k, BoundaryKind::DirichletOuter | BoundaryKind::Neumann))
        .map(|(&p, _)| (perimeter_parameter(p), p))
        .collect();
    outer.sort_by(|a, b| a.0.total_cmp(&b.0));
    for k in 0..outer.len() {
        let (a, b) = (outer[k].1, outer[(k + 1) % outer.len()].1);
        let shared = sides.into_iter().find(|s| s.holds(a) && s.holds(b));
        let Some(side) = shared else { continue };
        if dist(a, b) <= BOUNDARY_TOL {
            continue;
        }
        positions.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
        kinds.push(if neumann_sides.contains(&side) {
            BoundaryKind::Neumann
        } else {
            BoundaryKind::DirichletOuter
        });
    }

    for hole in &coarse.domain.holes {
        let mut angles: Vec<f64> = coarse
            .positions
            .iter()
            .zip(&coarse.boundary_kind)
            .filter(|(&p, &k)| k == BoundaryKind::DirichletHole && (dist(p, hole.center) - hole.radius).abs() <= BOUNDARY_TOL)
            .map(|(&p, _)| (p[1] - hole.center[1]).atan2(p[0] - hole.center[0]))
            .collect();
        angles.sort_by(f64::total_cmp);
        for k in 0..angles.len() {
            let next = if k + 1 < angles.len() { angles[k + 1] } else { angles[0] + 2.0 * PI };
            let t = 0.5 * (angles[k] + next);
            positions.push([hole.center[0] + hole.radius * t.cos(), hole.center[1] + hole.radius * t.sin()]);
            kinds.push(BoundaryKind::DirichletHole);
        }
    }

    let grid = CellGrid::new(&coarse.positions, coarse.h);
    for (&p, &k) in fine.positions.iter().zip(&fine.boundary_kind) {
        if k != BoundaryKind::Interior {
            continue;
        }
        let mut near = false;
        grid.candidates(p, 1, |j| near |= dist(p, coarse.positions[j]) < 0.5 * hf);
        if !near {
            positions.push(p);
            kinds.push(k);
        }
    }
    PointCloud::new(positions, kinds, hf, coarse.domain.clone())
}

/// Arc-length position on the unit-square perimeter, counterclockwise from the origin.
fn perimeter_parameter(p: Point) -> f64 {
    if Side::Bottom.holds(p) && !Side::Right.holds(p) {
        p[0]
    } else if Side::Right.holds(p) && !Side::Top.holds(p) {
        1.0 + p[1]
    } else if Side::Top.holds(p) && !Side::Left.holds(p) {
        3.0 - p[0]
    } else {
        4.0 - p[1]
    }
}

/// Uniform bucket grid for radius queries.
struct CellGrid {
    origin: Point,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl CellGrid {
    fn new(points: &[Point], cell: f64) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        if points.is_empty() {
            lo = [0.0; 2];
            hi = [0.0; 2];
        }
        let nx = (((hi[0] - lo[0]) / cell).floor() as usize + 1).max(1);
        let ny = (((hi[1] - lo[1]) / cell).floor() as usize + 1).max(1);
        let mut grid = Self {
            origin: lo,
            cell,
            nx,
            ny,
            buckets: vec![Vec::new(); nx * ny],
        };
        for (k, &p) in points.iter().enumerate() {
            let (cx, cy) = grid.cell_of(p);
            grid.buckets[cy * nx + cx].push(k);
        }
        grid
    }

    fn cell_of(&self, p: Point) -> (usize, usize) {
        let cx = ((p[0] - self.origin[0]) / self.cell).floor().max(0.0) as usize;
        let cy = ((p[1] - self.origin[1]) / self.cell).floor().max(0.0) as usize;
        (cx.min(self.nx - 1), cy.min(self.ny - 1))
    }

    /// Visits candidates in the `ring`-neighborhood of the cell containing `p`.
    fn candidates(&self, p: Point, ring: usize, mut f: impl FnMut(usize)) {
        let (cx, cy) = self.cell_of(p);
        let x0 = cx.saturating_sub(ring);
        let y0 = cy.saturating_sub(ring);
        let x1 = (cx + ring).min(self.nx - 1);
        let y1 = (cy + ring).min(self.ny - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                for &k in &self.buckets[y * self.nx + x] {
                    f(k);
                }
            }
        }
    }
}

/// All pairs `(i, j, r)` with `i < j` and `r < radius`, sorted by `(i, j)`.
fn pairs_within(points: &[Point], radius: f64) -> Vec<(usize, usize, f64)> {
    let grid = CellGrid::new(points, radius);
    let mut out = Vec::new();
    for (i, &p) in points.iter().enumerate() {
        let mut local = Vec::new();
        grid.candidates(p, 1, |j| {
            if j > i {
                let r = dist(p, points[j]);
                if r < radius {
                    local.push((i, j, r));
                }
            }
        });
        local.sort_by_key(|&(_, j, _)| j);
        out.extend(local);
    }
    out
}

/// Default minimum neighbor count in 2-D.
pub const DEFAULT_MIN_DEGREE: usize = 8;

/// Smallest ε in `{1.5h, 1.6h, …, 4h}` giving every node at least
/// `min_degree` neighbors.
pub fn build_graph(cloud: &PointCloud, min_degree: usize) -> Result<EdgeGraph> {
    let n = cloud.len();
    if n < min_degree + 1 {
        return Err(Error::InvalidArgument(format!(
            "{n} nodes cannot reach minimum degree {min_degree}"
        )));
    }
    let h = cloud.h;
    let candidates: Vec<f64> = (0..=25).map(|k| h * (1.5 + 0.1 * k as f64)).collect();
    let max_eps = *candidates.last().expect("nonempty");
    let pairs = pairs_within(&cloud.positions, max_eps);
    let mut best = 0;
    for &eps in &candidates {
        let mut degree = vec![0usize; n];
        for &(i, j, r) in &pairs {
            if r < eps {
                degree[i] += 1;
                degree[j] += 1;
            }
        }
        let min = degree.iter().copied().min().unwrap_or(0);
        best = best.max(min);
        if min >= min_degree {
            let edges = pairs.iter().filter(|p| p.2 < eps).map(|p| (p.0, p.1)).collect();
            return finish_graph(cloud, eps, edges);
        }
    }
    Err(Error::DegreeUnreachable {
        min_degree,
        max_eps,
        best,
    })
}

/// ε-ball graph with a prescribed radius.
pub fn build_graph_with_radius(cloud: &PointCloud, eps: f64) -> Result<EdgeGraph> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("ball radius must be positive".into()));
    }
    let edges = pairs_within(&cloud.positions, eps).into_iter().map(|p| (p.0, p.1)).collect();
    finish_graph(cloud, eps, edges)
}

fn finish_graph(cloud: &PointCloud, eps: f64, edges: Vec<(usize, usize)>) -> Result<EdgeGraph> {
    let graph = EdgeGraph::from_edges(cloud, eps, edges)?;
    let components = graph.components();
    if components > 1 {
        return Err(Error::DisconnectedGraph { components });
    }
    Ok(graph)
}

/// Largest distance from a probe grid (spacing h/4 over Ω) to the nearest node.
pub fn fill_distance(cloud: &PointCloud) -> f64 {
    if cloud.is_empty() {
        return f64::INFINITY;
    }
    let step = cloud.h / 4.0;
    let n = (1.0 / step).ceil() as usize;
    let cell = cloud.h.max(1e-3);
    let grid = CellGrid::new(&cloud.positions, cell);
    let mut worst: f64 = 0.0;
    for j in 0..=n {
        for i in 0..=n {
            let p = [(i as f64 * step).min(1.0), (j as f64 * step).min(1.0)];
            if !cloud.domain.contains(p) {
                continue;
            }
            let mut ring = 1;
            let mut best = f64::INFINITY;
            loop {
                grid.candidates(p, ring, |k| best = best.min(dist(p, cloud.positions[k])));
                // The search square of half-width ring·cell guarantees exactness
                // once the best distance fits inside it.
                if best <= (ring as f64) * cell || ring > grid.nx.max(grid.ny) {
                    break;
                }
                ring *= 2;
            }
            worst = worst.max(best);
        }
    }
    worst
}

pub fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn norm(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn rotate(p: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}
