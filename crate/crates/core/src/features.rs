//! Rotation-invariant edge-frame features built from nodal channels.
//!
//! A scalar channel `p` contributes `(p̄, (p_j − p_i)/r)` per edge. A vector
//! channel `b` contributes `(b̄·ê, b̄·n̂, D b·ê, D b·n̂)` with `n̂` the
//! counterclockwise normal and `D b = (b_j − b_i)/r`.
//!
//! Reversing an edge negates `ê` and `n̂`. The scalar difference column and the
//! two vector average columns change sign; the scalar average and the vector
//! difference columns are unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EdgeGraph, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Scalar,
    Vector,
}

impl ChannelKind {
    pub fn width(self) -> usize {
        match self {
            ChannelKind::Scalar => 1,
            ChannelKind::Vector => 2,
        }
    }

    /// Feature columns contributed per edge.
    pub fn columns(self) -> usize {
        match self {
            ChannelKind::Scalar => 2,
            ChannelKind::Vector => 4,
        }
    }
}

/// Whether a channel is read from the unknown state or is a fixed parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRole {
    /// State channel starting at this component of the nodal state.
    State { component: usize },
    Parameter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldChannel {
    pub name: String,
    pub kind: ChannelKind,
    pub role: ChannelRole,
    /// Row-major `N × width` values.
    pub values: Vec<f64>,
}

impl FieldChannel {
    pub fn scalar(name: &str, role: ChannelRole, values: Vec<f64>) -> Self {
        Self {
            name: name.to_string(),
            kind: ChannelKind::Scalar,
            role,
            values,
        }
    }

    pub fn vector(name: &str, role: ChannelRole, values: &[Point]) -> Self {
        Self {
            name: name.to_string(),
            kind: ChannelKind::Vector,
            role,
            values: values.iter().flat_map(|p| [p[0], p[1]]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.kind.width()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.values.len() != n * self.kind.width() {
            return Err(Error::DimensionMismatch {
                op: "feature channel",
                expected: n * self.kind.width(),
                got: self.values.len(),
            });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("channel '{}' has non-finite values", self.name)));
        }
        Ok(())
    }
}

/// Column `column` of a feature row derives from `channel`, frame component `component`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub name: String,
    pub kind: ChannelKind,
    pub role: ChannelRole,
    /// First feature column of this channel.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub channels: Vec<ChannelLayout>,
    pub width: usize,
}

impl FeatureLayout {
    pub fn new(channels: &[(String, ChannelKind, ChannelRole)]) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::NoFeatures);
        }
        let mut offset = 0;
        let channels = channels
            .iter()
            .map(|(name, kind, role)| {
                let c = ChannelLayout {
                    name: name.clone(),
                    kind: *kind,
                    role: *role,
                    offset,
                };
                offset += kind.columns();
                c
            })
            .collect();
        Ok(Self { channels, width: offset })
    }

    pub fn of(channels: &[FieldChannel]) -> Result<Self> {
        let spec: Vec<_> = channels.iter().map(|c| (c.name.clone(), c.kind, c.role)).collect();
        Self::new(&spec)
    }
}

/// Row-major `|E| × width` feature matrix with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFeatureBlock {
    pub xi: Vec<f64>,
    pub layout: FeatureLayout,
}

impl EdgeFeatureBlock {
    pub fn width(&self) -> usize {
        self.layout.width
    }

    pub fn num_edges(&self) -> usize {
        self.xi.len().checked_div(self.layout.width).unwrap_or(0)
    }

    pub fn row(&self, e: usize) -> &[f64] {
        let w = self.layout.width;
        &self.xi[e * w..(e + 1) * w]
    }
}

pub fn project_scalar(graph: &EdgeGraph, p: &[f64]) -> Result<Vec<[f64; 2]>> {
    if p.len() != graph.num_nodes() {
        return Err(Error::DimensionMismatch {
            op: "project_scalar",
            expected: graph.num_nodes(),
            got: p.len(),
        });
    }
    Ok(graph
        .edges()
        .iter()
        .zip(graph.geometry())
        .map(|(&(i, j), g)| [0.5 * (p[i] + p[j]), (p[j] - p[i]) / g.length])
        .collect())
}

pub fn project_vector(graph: &EdgeGraph, b: &[Point]) -> Result<Vec<[f64; 4]>> {
    if b.len() != graph.num_nodes() {
        return Err(Error::DimensionMismatch {
            op: "project_vector",
            expected: graph.num_nodes(),
            got: b.len(),
        });
    }
    Ok(graph
        .edges()
        .iter()
        .zip(graph.geometry())
        .map(|(&(i, j), g)| {
            let t = g.tangent;
            let n = g.normal();
            let avg = [0.5 * (b[i][0] + b[j][0]), 0.5 * (b[i][1] + b[j][1])];
            let diff = [(b[j][0] - b[i][0]) / g.length, (b[j][1] - b[i][1]) / g.length];
            [
                avg[0] * t[0] + avg[1] * t[1],
                avg[0] * n[0] + avg[1] * n[1],
                diff[0] * t[0] + diff[1] * t[1],
                diff[0] * n[0] + diff[1] * n[1],
            ]
        })
        .collect())
}

/// Concatenates per-channel projections in channel order.
pub fn stack_features(graph: &EdgeGraph, channels: &[FieldChannel]) -> Result<EdgeFeatureBlock> {
    let layout = FeatureLayout::of(channels)?;
    let n = graph.num_nodes();
    for c in channels {
        c.validate(n)?;
    }
    let w = layout.width;
    let mut xi = vec![0.0; graph.num_edges() * w];
    for (c, lay) in channels.iter().zip(&layout.channels) {
        match c.kind {
            ChannelKind::Scalar => {
                for (e, f) in project_scalar(graph, &c.values)?.into_iter().enumerate() {
                    xi[e * w + lay.offset..e * w + lay.offset + 2].copy_from_slice(&f);
                }
            }
            ChannelKind::Vector => {
                let pts: Vec<Point> = c.values.chunks_exact(2).map(|v| [v[0], v[1]]).collect();
                for (e, f) in project_vector(graph, &pts)?.into_iter().enumerate() {
                    xi[e * w + lay.offset..e * w + lay.offset + 4].copy_from_slice(&f);
                }
            }
        }
    }
    Ok(EdgeFeatureBlock { xi, layout })
}

/// One coefficient `∂ξ_e[column] / ∂u[node, component]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    pub column: usize,
    /// `false` for the tail `i`, `true` for the head `j` of the edge.
    pub head: bool,
    pub component: usize,
    pub coef: f64,
}

/// Sparse dependence of every edge feature row on the nodal state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateJacobian {
    offsets: Vec<usize>,
    entries: Vec<StateDerivative>,
}

impl StateJacobian {
    pub fn edge(&self, e: usize) -> &[StateDerivative] {
        &self.entries[self.offsets[e]..self.offsets[e + 1]]
    }
}

/// Derivatives of the state-derived feature columns; parameter columns have none.
pub fn feature_state_jacobian(graph: &EdgeGraph, layout: &FeatureLayout) -> StateJacobian {
    let mut offsets = Vec::with_capacity(graph.num_edges() + 1);
    let mut entries = Vec::new();
    for g in graph.geometry() {
        offsets.push(entries.len());
        let inv_r = 1.0 / g.length;
        for lay in &layout.channels {
            let ChannelRole::State { component } = lay.role else {
                continue;
            };
            let o = lay.offset;
            match lay.kind {
                ChannelKind::Scalar => {
                    for (head, s) in [(false, -1.0), (true, 1.0)] {
                        entries.push(StateDerivative { column: o, head, component, coef: 0.5 });
                        entries.push(StateDerivative { column: o + 1, head, component, coef: s * inv_r });
                    }
                }
                ChannelKind::Vector => {
                    let t = g.tangent;
                    let n = g.normal();
                    for (head, s) in [(false, -1.0), (true, 1.0)] {
                        for d in 0..2 {
                            let comp = component + d;
                            entries.push(StateDerivative { column: o, head, component: comp, coef: 0.5 * t[d] });
                            entries.push(StateDerivative { column: o + 1, head, component: comp, coef: 0.5 * n[d] });
                            entries.push(StateDerivative { column: o + 2, head, component: comp, coef: s * inv_r * t[d] });
                            entries.push(StateDerivative { column: o + 3, head, component: comp, coef: s * inv_r * n[d] });
                        }
                    }
                }
            }
        }
    }
    offsets.push(entries.len());
    StateJacobian { offsets, entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_graph, build_graph_with_radius, rotate, sample_domain, BoundaryKind, Domain, PointCloud};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud_of(pos: Vec<Point>) -> PointCloud {
        let n = pos.len();
        PointCloud::new(pos, vec![BoundaryKind::Interior; n], 0.5, Domain::unit_square()).unwrap()
    }

    fn state(values: Vec<f64>) -> FieldChannel {
        FieldChannel::scalar("u", ChannelRole::State { component: 0 }, values)
    }

    #[test]
    fn scalar_projection() {
        let g = build_graph_with_radius(&cloud_of(vec![[0.0, 0.0], [0.5, 0.0]]), 0.6).unwrap();
        assert_eq!(project_scalar(&g, &[1.0, 3.0]).unwrap(), vec![[2.0, 4.0]]);
        assert_eq!(project_scalar(&g, &[7.0, 7.0]).unwrap(), vec![[7.0, 0.0]]);
        let cloud = sample_domain(&Domain::unit_square(), 0.1, 0).unwrap();
        let g = build_graph(&cloud, 8).unwrap();
        let x: Vec<f64> = cloud.positions.iter().map(|p| p[0]).collect();
        for (f, geo) in project_scalar(&g, &x).unwrap().iter().zip(g.geometry()) {
            assert!((f[1] - geo.tangent[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn vector_projection() {
        let g = build_graph_with_radius(&cloud_of(vec![[0.0, 0.0], [0.5, 0.0]]), 0.6).unwrap();
        assert_eq!(project_vector(&g, &[[1.0, 0.0]; 2]).unwrap(), vec![[1.0, 0.0, 0.0, 0.0]]);
        let g = build_graph_with_radius(&cloud_of(vec![[0.0, 0.0], [0.0, 0.5]]), 0.6).unwrap();
        assert_eq!(project_vector(&g, &[[1.0, 0.0]; 2]).unwrap(), vec![[0.0, -1.0, 0.0, 0.0]]);

        let cloud = sample_domain(&Domain::unit_square(), 0.1, 1).unwrap();
        let g = build_graph(&cloud, 8).unwrap();
        let b: Vec<Point> = cloud.positions.iter().map(|p| [p[0], 0.0]).collect();
        for (f, geo) in project_vector(&g, &b).unwrap().iter().zip(g.geometry()) {
            assert!((f[2] - geo.tangent[0].powi(2)).abs() <= 1e-12);
        }
    }

    #[test]
    fn stacking_layout() {
        let pos = vec![[0.0, 0.0], [0.4, 0.0], [0.0, 0.3]];
        let g = build_graph_with_radius(&cloud_of(pos), 0.6).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (1, 2)]);
        let u = state(vec![0.0, 1.0, 2.0]);
        let v = FieldChannel::vector("v", ChannelRole::Parameter, &[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let block = stack_features(&g, &[u, v]).unwrap();
        assert_eq!(block.width(), 6);
        assert_eq!(block.layout.channels[1].offset, 2);
        // Edge (1,2): δx = (−0.4, 0.3), r = 0.5, ê = (−0.8, 0.6), n̂ = (−0.6, −0.8).
        // ū = 1.5, Du = 2; v̄ = (0.5, 0.5); Dv = (−2, 2).
        let expect = [1.5, 2.0, 0.5 * (-0.8 + 0.6), 0.5 * (-0.6 - 0.8), -2.0 * -0.8 + 2.0 * 0.6, -2.0 * -0.6 + 2.0 * -0.8];
        for (a, b) in block.row(2).iter().zip(expect) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        assert!(matches!(stack_features(&g, &[]), Err(Error::NoFeatures)));
        let short = state(vec![0.0; 2]);
        assert!(matches!(stack_features(&g, &[short]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn state_jacobian_coefficients() {
        let g = build_graph_with_radius(&cloud_of(vec![[0.0, 0.0], [0.5, 0.0]]), 0.6).unwrap();
        let layout = FeatureLayout::of(&[
            state(vec![0.0; 2]),
            FieldChannel::vector("v", ChannelRole::Parameter, &[[0.0, 0.0]; 2]),
        ])
        .unwrap();
        let jac = feature_state_jacobian(&g, &layout);
        let head: Vec<_> = jac.edge(0).iter().filter(|d| d.head).map(|d| (d.column, d.coef)).collect();
        assert_eq!(head, vec![(0, 0.5), (1, 2.0)]);
        assert!(jac.edge(0).iter().all(|d| d.column < 2));
    }

    /// Applies the sparse state Jacobian to a direction and compares with central differences.
    #[test]
    fn state_jacobian_matches_finite_differences() {
        let cloud = sample_domain(&Domain::unit_square(), 0.2, 3).unwrap();
        let g = build_graph(&cloud, 8).unwrap();
        let n = g.num_nodes();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rand_vec = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let u = rand_vec(3 * n);
        let du = rand_vec(3 * n);
        let param = rand_vec(n);
        let channels = |u: &[f64]| -> Vec<FieldChannel> {
            let scalar: Vec<f64> = (0..n).map(|k| u[3 * k]).collect();
            let vector: Vec<Point> = (0..n).map(|k| [u[3 * k + 1], u[3 * k + 2]]).collect();
            vec![
                FieldChannel::scalar("s", ChannelRole::State { component: 0 }, scalar),
                FieldChannel::scalar("p", ChannelRole::Parameter, param.clone()),
                FieldChannel::vector("b", ChannelRole::State { component: 1 }, &vector),
            ]
        };
        let block = stack_features(&g, &channels(&u)).unwrap();
        let jac = feature_state_jacobian(&g, &block.layout);
        let w = block.width();
        let step = 1e-6;
        let shift = |s: f64| -> Vec<f64> { u.iter().zip(&du).map(|(a, b)| a + s * b).collect() };
        let plus = stack_features(&g, &channels(&shift(step))).unwrap();
        let minus = stack_features(&g, &channels(&shift(-step))).unwrap();
        for (e, &(i, j)) in g.edges().iter().enumerate() {
            let mut jv = vec![0.0; w];
            for d in jac.edge(e) {
                let node = if d.head { j } else { i };
                jv[d.column] += d.coef * du[3 * node + d.component];
            }
            for c in 0..w {
                let fd = (plus.xi[e * w + c] - minus.xi[e * w + c]) / (2.0 * step);
                assert!((fd - jv[c]).abs() <= 1e-7 * (1.0 + fd.abs()), "edge {e} col {c}: {fd} vs {}", jv[c]);
            }
            // parameter columns 2..4 carry no state derivative
            assert!(jv[2] == 0.0 && jv[3] == 0.0);
        }
    }

    #[test]
    fn rotation_invariance() {
        let cloud = sample_domain(&Domain::with_hole([0.5, 0.5], 0.2), 0.1, 8).unwrap();
        let g = build_graph(&cloud, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..g.num_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<Point> = (0..g.num_nodes()).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let base = stack_features(
            &g,
            &[state(s.clone()), FieldChannel::vector("b", ChannelRole::Parameter, &b)],
        )
        .unwrap();
        for deg in [30.0f64, 90.0, 137.0] {
            let angle = deg.to_radians();
            let rc = cloud.rigid_transform(angle, [0.3, -0.2]);
            let gr = build_graph_with_radius(&rc, g.eps()).unwrap();
            let br: Vec<Point> = b.iter().map(|&v| rotate(v, angle)).collect();
            let rot = stack_features(
                &gr,
                &[state(s.clone()), FieldChannel::vector("b", ChannelRole::Parameter, &br)],
            )
            .unwrap();
            assert_eq!(gr.edges(), g.edges());
            for (a, r) in base.xi.iter().zip(&rot.xi) {
                assert!((a - r).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn orientation_flip_signs() {
        let fwd = build_graph_with_radius(&cloud_of(vec![[0.1, 0.2], [0.4, 0.6]]), 0.6).unwrap();
        let rev = build_graph_with_radius(&cloud_of(vec![[0.4, 0.6], [0.1, 0.2]]), 0.6).unwrap();
        let p = [0.3, -1.2];
        let b = [[0.5, 2.0], [-1.0, 0.25]];
        let f = stack_features(
            &fwd,
            &[state(p.to_vec()), FieldChannel::vector("b", ChannelRole::Parameter, &b)],
        )
        .unwrap();
        let r = stack_features(
            &rev,
            &[
                state(vec![p[1], p[0]]),
                FieldChannel::vector("b", ChannelRole::Parameter, &[b[1], b[0]]),
            ],
        )
        .unwrap();
        let sign = [1.0, -1.0, -1.0, -1.0, 1.0, 1.0];
        for c in 0..6 {
            assert!((f.xi[c] - sign[c] * r.xi[c]).abs() <= 1e-14, "column {c}");
        }
    }

    #[test]
    fn midpoint_features_are_second_order() {
        let p = |x: Point| (std::f64::consts::PI * x[0]).sin();
        let dp = |x: Point| [std::f64::consts::PI * (std::f64::consts::PI * x[0]).cos(), 0.0];
        let center = [0.37, 0.5];
        let dir = [0.8, 0.6];
        let mut errs = Vec::new();
        let mut lens = Vec::new();
        for k in 0..5 {
            let r = 0.2 / 2f64.powi(k);
            let a = [center[0] - 0.5 * r * dir[0], center[1] - 0.5 * r * dir[1]];
            let b = [center[0] + 0.5 * r * dir[0], center[1] + 0.5 * r * dir[1]];
            let g = build_graph_with_radius(&cloud_of(vec![a, b]), 1.5 * r).unwrap();
            let f = project_scalar(&g, &[p(a), p(b)]).unwrap()[0];
            let grad = dp(center);
            let e0 = (f[0] - p(center)).abs();
            let e1 = (f[1] - (grad[0] * dir[0] + grad[1] * dir[1])).abs();
            errs.push(e0.max(e1));
            lens.push(r);
        }
        let slope = (errs[0] / errs[4]).ln() / (lens[0] / lens[4]).ln();
        assert!((slope - 2.0).abs() < 0.2, "slope {slope}");
    }
}
