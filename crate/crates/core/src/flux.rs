//! Edge flux densities: closed-form constitutive laws and a Tanh MLP.
//!
//! The discrete flux cochain is `F_e = r_e · K(ξ_e)`. Analytic kernels are
//! written for the learned slot of `ε d₀ᵀM₁d₀ u + d₀ᵀM₁ F = M₀ f`, i.e. they carry
//! the total flux minus the background diffusion `ε ∇u`. With this convention a
//! density `q̄·ê` contributes `−∇·q` to the left-hand side.
//!
//! | name                  | features                  | density                     |
//! |-----------------------|---------------------------|-----------------------------|
//! | `zero`                | any                       | 0                           |
//! | `advection`           | u (state), v (vector)     | −(v̄·ê) ū                    |
//! | `nonlinear_advection` | u (state), v (vector)     | −(v̄·ê)(ū + ū²/2)            |
//! | `darcy`               | u (state), α (scalar)     | (ᾱ − ε) D_e u               |
//! | `nonlinear_darcy`     | u (state), α (scalar)     | (ᾱ + ū − ε) D_e u           |
//!
//! The nonlinear advection law `(1 + u) v·∇u` is used in flux form
//! `∇·(v (u + u²/2))`, which coincides for divergence-free `v`.

use nalgebra::{DMatrix, DMatrixView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ChannelKind, ChannelRole, EdgeFeatureBlock, FeatureLayout};
use crate::geometry::EdgeGraph;

/// Rows per batched network evaluation.
const BATCH_ROWS: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_out × fan_in`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn row(&self, o: usize) -> &[f64] {
        &self.w[o * self.fan_in..(o + 1) * self.fan_in]
    }
}

/// Feedforward network, Tanh on hidden layers and identity on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MlpJson", try_from = "MlpJson")]
pub struct MlpParams {
    widths: Vec<usize>,
    layers: Vec<Layer>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpJson {
    widths: Vec<usize>,
    layers: Vec<LayerJson>,
    seed: u64,
}

impl From<MlpParams> for MlpJson {
    fn from(p: MlpParams) -> Self {
        MlpJson {
            widths: p.widths,
            layers: p
                .layers
                .into_iter()
                .map(|l| LayerJson {
                    w: l.w.chunks(l.fan_in.max(1)).map(<[f64]>::to_vec).collect(),
                    b: l.b,
                })
                .collect(),
            seed: p.seed,
        }
    }
}

impl TryFrom<MlpJson> for MlpParams {
    type Error = Error;

    fn try_from(j: MlpJson) -> Result<Self> {
        if j.widths.len() < 2 || j.layers.len() != j.widths.len() - 1 {
            return Err(Error::InvalidArgument("layer count does not match widths".into()));
        }
        let mut layers = Vec::with_capacity(j.layers.len());
        for (k, l) in j.layers.into_iter().enumerate() {
            let (fan_in, fan_out) = (j.widths[k], j.widths[k + 1]);
            if l.w.len() != fan_out || l.b.len() != fan_out || l.w.iter().any(|r| r.len() != fan_in) {
                return Err(Error::InvalidArgument(format!("layer {k} has inconsistent shape")));
            }
            let w: Vec<f64> = l.w.concat();
            if w.iter().chain(&l.b).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("layer {k} has non-finite parameters")));
            }
            layers.push(Layer { fan_in, fan_out, w, b: l.b });
        }
        Ok(MlpParams {
            widths: j.widths,
            layers,
            seed: j.seed,
        })
    }
}

/// Scratch buffers for single-row evaluation.
#[derive(Debug, Default, Clone)]
pub struct MlpWorkspace {
    acts: Vec<Vec<f64>>,
    grad: Vec<f64>,
    grad_prev: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument("need at least input and output widths, all positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|p| {
                let (fan_in, fan_out) = (p[0], p[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    fan_in,
                    fan_out,
                    w: (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect(),
                    b: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            seed,
        })
    }

    /// `depth` hidden layers of width `hidden`.
    pub fn with_architecture(input: usize, hidden: usize, depth: usize, output: usize, seed: u64) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(hidden, depth));
        widths.push(output);
        Self::new(&widths, seed)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for l in &mut z.layers {
            l.w.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameters flattened layer by layer, weights (row-major) then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                op: "set_flat",
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }

    fn check_row(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::DimensionMismatch {
                op: "mlp input",
                expected: self.input_width(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn forward_ws(&self, x: &[f64], ws: &mut MlpWorkspace) {
        let nl = self.layers.len();
        ws.acts.resize(nl, Vec::new());
        for (k, layer) in self.layers.iter().enumerate() {
            let (before, rest) = ws.acts.split_at_mut(k);
            let input: &[f64] = if k == 0 { x } else { &before[k - 1] };
            let out = &mut rest[0];
            out.clear();
            for o in 0..layer.fan_out {
                let z = dot(layer.row(o), input) + layer.b[o];
                out.push(if k + 1 < nl { z.tanh() } else { z });
            }
        }
    }

    /// Output for one feature row.
    pub fn forward_row(&self, x: &[f64], ws: &mut MlpWorkspace) -> Result<Vec<f64>> {
        self.check_row(x)?;
        self.forward_ws(x, ws);
        Ok(ws.acts.last().expect("nonempty").clone())
    }

    /// Back-propagates `seed` (one value per output) to the input, using the
    /// activations left in `ws` by the last forward pass.
    fn backprop_input(&self, seed: &[f64], ws: &mut MlpWorkspace) -> Vec<f64> {
        let nl = self.layers.len();
        ws.grad.clear();
        ws.grad.extend_from_slice(seed);
        for k in (0..nl).rev() {
            let layer = &self.layers[k];
            if k + 1 < nl {
                for (g, a) in ws.grad.iter_mut().zip(&ws.acts[k]) {
                    *g *= 1.0 - a * a;
                }
            }
            ws.grad_prev.clear();
            ws.grad_prev.resize(layer.fan_in, 0.0);
            for o in 0..layer.fan_out {
                let g = ws.grad[o];
                if g != 0.0 {
                    axpy(g, layer.row(o), &mut ws.grad_prev);
                }
            }
            std::mem::swap(&mut ws.grad, &mut ws.grad_prev);
        }
        ws.grad.clone()
    }

    /// Output and row-major `N_F × n_ξ` input Jacobian for one row.
    pub fn forward_with_jacobian(&self, x: &[f64], ws: &mut MlpWorkspace) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_row(x)?;
        self.forward_ws(x, ws);
        let out = ws.acts.last().expect("nonempty").clone();
        let nf = self.output_width();
        let mut jac = Vec::with_capacity(nf * x.len());
        let mut seed = vec![0.0; nf];
        for o in 0..nf {
            seed.iter_mut().for_each(|s| *s = 0.0);
            seed[o] = 1.0;
            jac.extend(self.backprop_input(&seed, ws));
        }
        Ok((out, jac))
    }

    /// Accumulates `∂(upstream · K(x))/∂θ` for one row into `grad`.
    pub fn accumulate_param_gradient(&self, x: &[f64], upstream: &[f64], grad: &mut MlpParams, ws: &mut MlpWorkspace) {
        self.forward_ws(x, ws);
        let nl = self.layers.len();
        ws.grad.clear();
        ws.grad.extend_from_slice(upstream);
        for k in (0..nl).rev() {
            let layer = &self.layers[k];
            if k + 1 < nl {
                for (g, a) in ws.grad.iter_mut().zip(&ws.acts[k]) {
                    *g *= 1.0 - a * a;
                }
            }
            let input: &[f64] = if k == 0 { x } else { &ws.acts[k - 1] };
            let gl = &mut grad.layers[k];
            for o in 0..layer.fan_out {
                let g = ws.grad[o];
                if g != 0.0 {
                    axpy(g, input, &mut gl.w[o * layer.fan_in..(o + 1) * layer.fan_in]);
                    gl.b[o] += g;
                }
            }
            if k > 0 {
                ws.grad_prev.clear();
                ws.grad_prev.resize(layer.fan_in, 0.0);
                for o in 0..layer.fan_out {
                    let g = ws.grad[o];
                    if g != 0.0 {
                        axpy(g, layer.row(o), &mut ws.grad_prev);
                    }
                }
                std::mem::swap(&mut ws.grad, &mut ws.grad_prev);
            }
        }
    }

    /// Activations of every layer for a batch, each `rows × fan_out`.
    fn forward_batch(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let rows = x.len() / self.input_width();
        let nl = self.layers.len();
        let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(nl);
        let x = DMatrix::from_row_slice(rows, self.input_width(), x);
        for (k, layer) in self.layers.iter().enumerate() {
            // row-major W is the column-major Wᵀ
            let wt = DMatrixView::from_slice(&layer.w, layer.fan_in, layer.fan_out);
            let input = if k == 0 { &x } else { &acts[k - 1] };
            let mut z = input * wt;
            for (o, mut col) in z.column_iter_mut().enumerate() {
                let b = layer.b[o];
                if k + 1 < nl {
                    col.apply(|v| *v = (*v + b).tanh());
                } else {
                    col.add_scalar_mut(b);
                }
            }
            acts.push(z);
        }
        acts
    }

    /// Back-propagates the per-row output cotangents `g` (`rows × N_F`). Calls
    /// `visit(k, δ_k)` with the pre-activation cotangent of every layer and
    /// returns the input cotangent.
    fn backward_batch(
        &self,
        acts: &[DMatrix<f64>],
        mut g: DMatrix<f64>,
        mut visit: impl FnMut(usize, &DMatrix<f64>),
    ) -> DMatrix<f64> {
        let nl = self.layers.len();
        for k in (0..nl).rev() {
            let layer = &self.layers[k];
            if k + 1 < nl {
                g.zip_apply(&acts[k], |gv, a| *gv *= 1.0 - a * a);
            }
            visit(k, &g);
            let wt = DMatrixView::from_slice(&layer.w, layer.fan_in, layer.fan_out);
            g = &g * wt.transpose();
        }
        g
    }

    /// Spectral norm of each weight matrix by power iteration.
    pub fn spectral_norms(&self, iterations: usize) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| {
                let mut v = vec![1.0 / (l.fan_in as f64).sqrt(); l.fan_in];
                let mut sigma = 0.0;
                for _ in 0..iterations {
                    let wv: Vec<f64> = (0..l.fan_out).map(|o| dot(l.row(o), &v)).collect();
                    let mut wtwv = vec![0.0; l.fan_in];
                    for (o, &c) in wv.iter().enumerate() {
                        axpy(c, l.row(o), &mut wtwv);
                    }
                    let norm = wtwv.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        return 0.0;
                    }
                    sigma = norm.sqrt();
                    v = wtwv.into_iter().map(|x| x / norm).collect();
                }
                sigma
            })
            .collect()
    }

    /// Upper bound on the Lipschitz constant: product of layer operator norms
    /// (Tanh is 1-Lipschitz).
    pub fn lipschitz_bound(&self) -> f64 {
        self.spectral_norms(100).iter().product()
    }
}

/// Recorded activations of a batched forward pass, reusable for several
/// backward passes.
#[derive(Debug)]
pub struct MlpTape<'a> {
    theta: &'a MlpParams,
    xi: &'a [f64],
    /// Per chunk of rows, the activations of every layer.
    chunks: Vec<Vec<DMatrix<f64>>>,
}

impl<'a> MlpTape<'a> {
    /// Forward pass over a row-major `rows × n_ξ` feature matrix.
    pub fn record(theta: &'a MlpParams, xi: &'a [f64]) -> Result<Self> {
        let w = theta.input_width();
        if !xi.len().is_multiple_of(w) {
            return Err(Error::DimensionMismatch {
                op: "mlp input",
                expected: w,
                got: xi.len() % w,
            });
        }
        let chunks = xi.chunks(BATCH_ROWS * w).map(|c| theta.forward_batch(c)).collect();
        Ok(Self { theta, xi, chunks })
    }

    pub fn rows(&self) -> usize {
        self.xi.len() / self.theta.input_width()
    }

    /// Outputs, row-major `rows × N_F`.
    pub fn output(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows() * self.theta.output_width());
        for acts in &self.chunks {
            let last = acts.last().expect("nonempty");
            for r in 0..last.nrows() {
                out.extend(last.row(r).iter());
            }
        }
        out
    }

    /// Input Jacobians, row-major `rows × N_F × n_ξ`.
    pub fn input_jacobian(&self) -> Vec<f64> {
        let (w, nf) = (self.theta.input_width(), self.theta.output_width());
        let mut jac = vec![0.0; self.rows() * nf * w];
        for (c, acts) in self.chunks.iter().enumerate() {
            let e0 = c * BATCH_ROWS;
            let n = acts[0].nrows();
            for o in 0..nf {
                let mut seed = DMatrix::zeros(n, nf);
                seed.column_mut(o).fill(1.0);
                let gx = self.theta.backward_batch(acts, seed, |_, _| {});
                for r in 0..n {
                    let dst = &mut jac[((e0 + r) * nf + o) * w..((e0 + r) * nf + o + 1) * w];
                    for (d, v) in dst.iter_mut().zip(gx.row(r).iter()) {
                        *d = *v;
                    }
                }
            }
        }
        jac
    }

    /// `Σ_rows ∂(upstream_row · K(ξ_row))/∂θ`.
    pub fn param_gradient(&self, upstream: &[f64]) -> Result<MlpParams> {
        let (w, nf) = (self.theta.input_width(), self.theta.output_width());
        if upstream.len() != self.rows() * nf {
            return Err(Error::DimensionMismatch {
                op: "mlp_param_gradient",
                expected: self.rows() * nf,
                got: upstream.len(),
            });
        }
        let mut grad = self.theta.zeros_like();
        for ((acts, chunk), up) in self
            .chunks
            .iter()
            .zip(self.xi.chunks(BATCH_ROWS * w))
            .zip(upstream.chunks(BATCH_ROWS * nf))
        {
            if up.iter().all(|&u| u == 0.0) {
                continue;
            }
            let n = up.len() / nf;
            let x = DMatrix::from_row_slice(n, w, chunk);
            self.theta.backward_batch(acts, DMatrix::from_row_slice(n, nf, up), |k, delta| {
                let input = if k == 0 { &x } else { &acts[k - 1] };
                // Σ_rows input ⊗ δ, laid out as the row-major fan_out × fan_in weights
                let dwt = input.transpose() * delta;
                let gl = &mut grad.layers[k];
                for (dst, src) in gl.w.iter_mut().zip(dwt.iter()) {
                    *dst += src;
                }
                for (o, col) in delta.column_iter().enumerate() {
                    gl.b[o] += col.sum();
                }
            });
        }
        Ok(grad)
    }
}

/// Batched forward pass over a row-major `rows × n_ξ` feature matrix.
pub fn mlp_forward(theta: &MlpParams, xi: &[f64]) -> Result<Vec<f64>> {
    Ok(MlpTape::record(theta, xi)?.output())
}

pub fn mlp_input_jacobian(theta: &MlpParams, xi_row: &[f64]) -> Result<Vec<f64>> {
    let mut ws = MlpWorkspace::default();
    Ok(theta.forward_with_jacobian(xi_row, &mut ws)?.1)
}

/// `Σ_rows ∂(upstream_row · K(ξ_row))/∂θ`.
pub fn mlp_param_gradient(theta: &MlpParams, xi: &[f64], upstream: &[f64]) -> Result<MlpParams> {
    MlpTape::record(theta, xi)?.param_gradient(upstream)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyticLaw {
    Zero,
    Advection,
    NonlinearAdvection,
    Darcy,
    NonlinearDarcy,
}

impl AnalyticLaw {
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "zero" => AnalyticLaw::Zero,
            "advection" => AnalyticLaw::Advection,
            "nonlinear_advection" => AnalyticLaw::NonlinearAdvection,
            "darcy" => AnalyticLaw::Darcy,
            "nonlinear_darcy" => AnalyticLaw::NonlinearDarcy,
            other => return Err(Error::UnknownKernel(other.to_string())),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            AnalyticLaw::Zero => "zero",
            AnalyticLaw::Advection => "advection",
            AnalyticLaw::NonlinearAdvection => "nonlinear_advection",
            AnalyticLaw::Darcy => "darcy",
            AnalyticLaw::NonlinearDarcy => "nonlinear_darcy",
        }
    }

    /// Kind of the parameter channel following the scalar state, if any.
    pub fn parameter_kind(self) -> Option<ChannelKind> {
        match self {
            AnalyticLaw::Zero => None,
            AnalyticLaw::Advection | AnalyticLaw::NonlinearAdvection => Some(ChannelKind::Vector),
            AnalyticLaw::Darcy | AnalyticLaw::NonlinearDarcy => Some(ChannelKind::Scalar),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticKernel {
    pub law: AnalyticLaw,
    pub eps_diff: f64,
}

impl AnalyticKernel {
    /// Density and its gradient with respect to the feature row.
    ///
    /// Rows start with `(ū, D_e u)`; the parameter channel follows at column 2.
    pub fn density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        match self.law {
            AnalyticLaw::Zero => 0.0,
            AnalyticLaw::Advection => {
                let (u, vt) = (x[0], x[2]);
                grad[0] = -vt;
                grad[2] = -u;
                -vt * u
            }
            AnalyticLaw::NonlinearAdvection => {
                let (u, vt) = (x[0], x[2]);
                let s = u + 0.5 * u * u;
                grad[0] = -vt * (1.0 + u);
                grad[2] = -s;
                -vt * s
            }
            AnalyticLaw::Darcy => {
                let (du, alpha) = (x[1], x[2]);
                grad[1] = alpha - self.eps_diff;
                grad[2] = du;
                (alpha - self.eps_diff) * du
            }
            AnalyticLaw::NonlinearDarcy => {
                let (u, du, alpha) = (x[0], x[1], x[2]);
                let c = alpha + u - self.eps_diff;
                grad[0] = du;
                grad[1] = c;
                grad[2] = du;
                c * du
            }
        }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.density_and_gradient(x, &mut g)
    }

    fn check_layout(&self, layout: &FeatureLayout) -> Result<()> {
        let Some(kind) = self.law.parameter_kind() else {
            return Ok(());
        };
        let ch = &layout.channels;
        let ok = ch.len() >= 2
            && ch[0].kind == ChannelKind::Scalar
            && ch[0].role == (ChannelRole::State { component: 0 })
            && ch[1].kind == kind
            && ch[1].role == ChannelRole::Parameter;
        if ok {
            Ok(())
        } else {
            Err(Error::InconsistentSpec(format!(
                "kernel '{}' expects a scalar state followed by a {:?} parameter channel",
                self.law.name(),
                kind
            )))
        }
    }
}

/// Registry lookup; `eps_diff` is the background diffusion of the system.
pub fn analytic_kernel(name: &str, eps_diff: f64) -> Result<FluxKernel> {
    Ok(FluxKernel::Analytic(AnalyticKernel {
        law: AnalyticLaw::from_name(name)?,
        eps_diff,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub enum FluxKernel {
    Analytic(AnalyticKernel),
    Learned(MlpParams),
}

impl FluxKernel {
    pub fn output_width(&self) -> usize {
        match self {
            FluxKernel::Analytic(_) => 1,
            FluxKernel::Learned(p) => p.output_width(),
        }
    }

    pub fn check_layout(&self, layout: &FeatureLayout) -> Result<()> {
        match self {
            FluxKernel::Analytic(k) => k.check_layout(layout),
            FluxKernel::Learned(p) => {
                if p.input_width() == layout.width {
                    Ok(())
                } else {
                    Err(Error::DimensionMismatch {
                        op: "kernel input width",
                        expected: layout.width,
                        got: p.input_width(),
                    })
                }
            }
        }
    }

    /// Densities, row-major `|E| × N_F`.
    pub fn evaluate(&self, block: &EdgeFeatureBlock) -> Result<Vec<f64>> {
        self.check_layout(&block.layout)?;
        match self {
            FluxKernel::Analytic(k) => Ok((0..block.num_edges()).map(|e| k.density(block.row(e))).collect()),
            FluxKernel::Learned(p) => mlp_forward(p, &block.xi),
        }
    }

    /// Densities and row-major `|E| × N_F × n_ξ` feature Jacobians.
    pub fn evaluate_with_jacobian(&self, block: &EdgeFeatureBlock) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_layout(&block.layout)?;
        let (ne, w, nf) = (block.num_edges(), block.width(), self.output_width());
        let mut dens = Vec::with_capacity(ne * nf);
        let mut jac = vec![0.0; ne * nf * w];
        match self {
            FluxKernel::Analytic(k) => {
                for e in 0..ne {
                    dens.push(k.density_and_gradient(block.row(e), &mut jac[e * w..(e + 1) * w]));
                }
            }
            FluxKernel::Learned(p) => {
                let tape = MlpTape::record(p, &block.xi)?;
                dens = tape.output();
                jac = tape.input_jacobian();
            }
        }
        Ok((dens, jac))
    }
}

/// `F_e = r_e · K(ξ_e)`, row-major `|E| × N_F`.
pub fn flux_cochain(graph: &EdgeGraph, kernel: &FluxKernel, block: &EdgeFeatureBlock) -> Result<Vec<f64>> {
    if block.num_edges() != graph.num_edges() {
        return Err(Error::DimensionMismatch {
            op: "flux_cochain",
            expected: graph.num_edges(),
            got: block.num_edges(),
        });
    }
    let nf = kernel.output_width();
    let mut f = kernel.evaluate(block)?;
    for (e, g) in graph.geometry().iter().enumerate() {
        for v in &mut f[e * nf..(e + 1) * nf] {
            *v *= g.length;
        }
    }
    Ok(f)
}
