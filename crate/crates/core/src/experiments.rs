//! Desk-scale studies: convergence, truncation, single-shot recovery,
//! pretrained kernels, invariance, conservation and nonlinear solves.
//!
//! Every driver returns a [`ResultTable`] and the threshold checks it was
//! built to exercise. Ground truth for learned models comes from solving the
//! analytic law on a cloud refined to `h/2` and restricting to the coarse nodes.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::complex::build_complex;
use crate::error::{Error, Result};
use crate::features::{ChannelRole, FieldChannel};
use crate::flux::{analytic_kernel, AnalyticLaw, FluxKernel, MlpParams};
use crate::geometry::{refine_cloud, rotate, sample_domain, Domain, Hole, Point, PointCloud, DEFAULT_MIN_DEGREE};
use crate::solver::{assemble_system, newton_solve_with, relative_l2, DiscreteSystem, ProblemSpec, SolveReport, SolverOptions};
use crate::training::{pretrain_kernel, train, LogRow, PretrainConfig, Samples, TrainConfig, TrainingInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    /// Resolution `h` or sweep value.
    pub param: f64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn push(&mut self, experiment: &str, param: f64, metric: &str, value: f64) {
        self.rows.push(ResultRow {
            experiment: experiment.to_string(),
            param,
            metric: metric.to_string(),
            value,
        });
    }

    /// `(param, value)` pairs of one metric in insertion order.
    pub fn metric(&self, experiment: &str, metric: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.experiment == experiment && r.metric == metric)
            .map(|r| (r.param, r.value))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        if let Some(r) = self.rows.iter().find(|r| !r.value.is_finite() || !r.param.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite entry for {}/{}",
                r.experiment, r.metric
            )));
        }
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One acceptance threshold evaluated by a driver.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            bound: format!("<= {bound:e}"),
            passed: value <= bound,
        }
    }

    pub fn within(name: &str, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            bound: format!("in [{lo}, {hi}]"),
            passed: (lo..=hi).contains(&value),
        }
    }

    pub fn holds(name: &str, ok: bool) -> Self {
        Self {
            name: name.to_string(),
            value: if ok { 1.0 } else { 0.0 },
            bound: "holds".to_string(),
            passed: ok,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub table: ResultTable,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Least-squares slope of `log err` against `log h`.
pub fn fit_slope(h: &[f64], err: &[f64]) -> f64 {
    let n = h.len() as f64;
    let x: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn check_levels(h: &[f64]) -> Result<()> {
    if h.is_empty() || h.windows(2).any(|w| w[1] >= w[0]) || h.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("h list must be positive and strictly decreasing".into()));
    }
    Ok(())
}

fn solver(rel_tol: f64) -> SolverOptions {
    SolverOptions {
        rel_tol,
        ..SolverOptions::default()
    }
}

/// Builds the complex and assembles the system for a cloud.
pub fn system_for(cloud: &PointCloud, spec: &ProblemSpec) -> Result<DiscreteSystem> {
    let cx = build_complex(cloud, DEFAULT_MIN_DEGREE)?.shared();
    assemble_system(cx, spec)
}

/// Solves from the harmonic extension; non-convergence is an error.
pub fn solve_converged(sys: &DiscreteSystem, kernel: &FluxKernel, rel_tol: f64) -> Result<(Vec<f64>, SolveReport)> {
    let (u, rep) = newton_solve_with(sys, kernel, &sys.initial_guess()?, &solver(rel_tol))?;
    if !rep.converged {
        return Err(Error::StaleSolution {
            residual: rep.residual,
            tolerance: rep.tolerance,
        });
    }
    Ok((u, rep))
}

/// `v = (cos θ, sin θ)`.
pub fn velocity(angle_deg: f64) -> Point {
    let a = angle_deg.to_radians();
    [a.cos(), a.sin()]
}

/// Hole center shifted by `d` along the anti-diagonal `y = 1 − x`.
pub fn diagonal_center(d: f64) -> Point {
    [0.5 + d, 0.5 - d]
}

/// Advection–diffusion with `u = hole_value` on holes and `u = 0` outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvectionCase {
    pub law: String,
    pub eps_diff: f64,
    pub angle_deg: f64,
    pub holes: Vec<Hole>,
    pub hole_value: f64,
    pub h: f64,
    pub seed: u64,
}

impl Default for AdvectionCase {
    fn default() -> Self {
        Self {
            law: "advection".to_string(),
            eps_diff: 0.2,
            angle_deg: 245.0,
            holes: vec![Hole {
                center: [0.5, 0.5],
                radius: 0.15,
            }],
            hole_value: 1.0,
            h: 0.07,
            seed: 0,
        }
    }
}

impl AdvectionCase {
    pub fn domain(&self) -> Domain {
        Domain {
            holes: self.holes.clone(),
        }
    }

    pub fn cloud(&self) -> Result<PointCloud> {
        sample_domain(&self.domain(), self.h, self.seed)
    }

    pub fn spec(&self, cloud: &PointCloud) -> ProblemSpec {
        let n = cloud.len();
        let mut spec = ProblemSpec::scalar(n, self.eps_diff);
        spec.parameters = vec![FieldChannel::vector(
            "v",
            ChannelRole::Parameter,
            &vec![velocity(self.angle_deg); n],
        )];
        for (k, kind) in cloud.boundary_kind.iter().enumerate() {
            if *kind == crate::geometry::BoundaryKind::DirichletHole {
                spec.dirichlet[k] = self.hole_value;
            }
        }
        spec
    }

    pub fn kernel(&self) -> Result<FluxKernel> {
        analytic_kernel(&self.law, self.eps_diff)
    }
}

/// `−∇·((α + [u]) ∇u) = f` with `u = 0` on every boundary and log-normal α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DarcyCase {
    pub law: String,
    pub eps_diff: f64,
    /// Log-amplitude of the permeability; drawn from lognormal(0, 0.5) when absent.
    pub kappa: Option<f64>,
    pub modes: usize,
    pub holes: Vec<Hole>,
    pub forcing: f64,
    pub h: f64,
    pub seed: u64,
}

impl Default for DarcyCase {
    fn default() -> Self {
        Self {
            law: "darcy".to_string(),
            eps_diff: 0.1,
            kappa: None,
            modes: 8,
            holes: vec![Hole {
                center: [0.5, 0.5],
                radius: 0.15,
            }],
            forcing: 1.0,
            h: 0.07,
            seed: 0,
        }
    }
}

impl DarcyCase {
    pub fn domain(&self) -> Domain {
        Domain {
            holes: self.holes.clone(),
        }
    }

    pub fn cloud(&self) -> Result<PointCloud> {
        sample_domain(&self.domain(), self.h, self.seed)
    }

    pub fn kappa(&self) -> f64 {
        self.kappa.unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0000);
            LogNormal::new(0.0, 0.5).expect("valid parameters").sample(&mut rng)
        })
    }

    pub fn spec(&self, cloud: &PointCloud) -> ProblemSpec {
        let n = cloud.len();
        let mut spec = ProblemSpec::scalar(n, self.eps_diff);
        spec.forcing = vec![self.forcing; n];
        let alpha = permeability(&cloud.positions, self.kappa(), self.modes, self.seed);
        spec.parameters = vec![FieldChannel::scalar("alpha", ChannelRole::Parameter, alpha)];
        spec
    }

    pub fn kernel(&self) -> Result<FluxKernel> {
        analytic_kernel(&self.law, self.eps_diff)
    }
}

/// `α(x) = exp(κ g(x))` with `g` a normalized sum of `modes` random Fourier modes.
pub fn permeability(points: &[Point], kappa: f64, modes: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms: Vec<(f64, f64, f64, f64)> = (0..modes)
        .map(|_| {
            let kx = f64::from(rng.gen_range(1..=3u8));
            let ky = f64::from(rng.gen_range(1..=3u8));
            let phase = rng.gen_range(0.0..2.0 * PI);
            let c: f64 = StandardNormal.sample(&mut rng);
            (kx, ky, phase, c)
        })
        .collect();
    let norm = (modes.max(1) as f64).sqrt();
    points
        .iter()
        .map(|p| {
            let g: f64 = terms
                .iter()
                .map(|&(kx, ky, ph, c)| c * (PI * (kx * p[0] + ky * p[1]) + ph).cos())
                .sum();
            (kappa * g / norm).exp()
        })
        .collect()
}

/// Either problem family, tagged by `family` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Case {
    Advection(AdvectionCase),
    Darcy(DarcyCase),
}

impl Case {
    pub fn cloud(&self) -> Result<PointCloud> {
        match self {
            Case::Advection(c) => c.cloud(),
            Case::Darcy(c) => c.cloud(),
        }
    }

    pub fn spec(&self, cloud: &PointCloud) -> ProblemSpec {
        match self {
            Case::Advection(c) => c.spec(cloud),
            Case::Darcy(c) => c.spec(cloud),
        }
    }

    pub fn kernel(&self) -> Result<FluxKernel> {
        match self {
            Case::Advection(c) => c.kernel(),
            Case::Darcy(c) => c.kernel(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Case::Advection(c) => c.seed,
            Case::Darcy(c) => c.seed,
        }
    }
}

/// Reference solution on `cloud`: the analytic law solved on the `h/2`
/// refinement, restricted to the coarse nodes.
pub fn ground_truth(case: &Case, cloud: &PointCloud) -> Result<Vec<f64>> {
    let fine = refine_cloud(cloud, case.seed().wrapping_add(0x9e37_79b9))?;
    let sys = system_for(&fine, &case.spec(&fine))?;
    let (u, _) = solve_converged(&sys, &case.kernel()?, 1e-10)?;
    Ok(u[..cloud.len() * sys.n_f].to_vec())
}

fn sinsin(p: Point) -> f64 {
    (PI * p[0]).sin() * (PI * p[1]).sin()
}

fn sinsin_grad(p: Point) -> Point {
    [
        PI * (PI * p[0]).cos() * (PI * p[1]).sin(),
        PI * (PI * p[0]).sin() * (PI * p[1]).cos(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manufactured {
    /// `u* = sin(πx) sin(πy)`.
    SinSin,
    /// `u* = c`.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoissonConfig {
    pub h: Vec<f64>,
    pub seeds: Vec<u64>,
    pub solution: Manufactured,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        Self {
            h: vec![0.1, 0.07, 0.05, 0.035],
            seeds: vec![0],
            solution: Manufactured::SinSin,
        }
    }
}

/// `−Δu = f` on the unit square with a manufactured solution.
pub fn poisson_convergence(cfg: &PoissonConfig) -> Result<Outcome> {
    check_levels(&cfg.h)?;
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let exact = |p: Point| match cfg.solution {
        Manufactured::SinSin => sinsin(p),
        Manufactured::Constant(c) => c,
    };
    let forcing = |p: Point| match cfg.solution {
        Manufactured::SinSin => 2.0 * PI * PI * sinsin(p),
        Manufactured::Constant(_) => 0.0,
    };
    let zero = analytic_kernel("zero", 1.0)?;
    let mut out = Outcome::default();
    let mut errs = Vec::new();
    let mut max_abs: f64 = 0.0;
    for &h in &cfg.h {
        let mut err = 0.0;
        for &seed in &cfg.seeds {
            let cloud = sample_domain(&Domain::unit_square(), h, seed)?;
            let mut spec = ProblemSpec::scalar(cloud.len(), 1.0);
            spec.forcing = cloud.positions.iter().map(|&p| forcing(p)).collect();
            spec.dirichlet = cloud.positions.iter().map(|&p| exact(p)).collect();
            let sys = system_for(&cloud, &spec)?;
            let (u, _) = solve_converged(&sys, &zero, 1e-10)?;
            let reference: Vec<f64> = cloud.positions.iter().map(|&p| exact(p)).collect();
            for (a, b) in sys.restrict(&u).iter().zip(sys.restrict(&reference)) {
                max_abs = max_abs.max((a - b).abs());
            }
            err += relative_l2(&sys, &u, &reference);
            out.table.push("poisson", h, "nodes", cloud.len() as f64);
        }
        err /= cfg.seeds.len() as f64;
        out.table.push("poisson", h, "rel_l2", err);
        out.table.push("poisson", h, "max_abs_error", max_abs);
        errs.push(err);
    }
    match cfg.solution {
        Manufactured::Constant(_) => out.checks.push(Check::at_most("constant reproduced", max_abs, 1e-10)),
        Manufactured::SinSin if cfg.h.len() >= 2 => {
            let slope = fit_slope(&cfg.h, &errs);
            out.table.push("poisson", 0.0, "slope", slope);
            out.table.push("poisson", 0.0, "low_confidence", f64::from(u8::from(cfg.h.len() < 3)));
            out.checks.push(Check::within("poisson slope", slope, 1.7, 2.3));
            out.checks.push(Check::holds("monotone decrease", errs.windows(2).all(|w| w[1] < w[0])));
        }
        Manufactured::SinSin => {}
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestField {
    /// `σ = (x², xy)`, `−∇·σ = −3x`.
    Quadratic,
    /// `σ = (1 + 2x − y, 3 + x + 4y)`, `−∇·σ = −6`.
    Affine,
    /// `σ = (sign(x − ½), 0)`.
    Discontinuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruncationConfig {
    pub h: Vec<f64>,
    pub seed: u64,
    pub field: TestField,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            h: vec![0.1, 0.05, 0.025, 0.0125],
            seed: 0,
            field: TestField::Quadratic,
        }
    }
}

/// Simpson-rule line integral of `field` along every edge (exact for quadratics).
pub fn edge_line_integrals(graph: &crate::geometry::EdgeGraph, field: impl Fn(Point) -> Point) -> Vec<f64> {
    graph
        .edges()
        .iter()
        .zip(graph.geometry())
        .map(|(&(i, j), g)| {
            let (a, b) = (graph.positions()[i], graph.positions()[j]);
            let proj = |p: Point| {
                let f = field(p);
                f[0] * g.delta[0] + f[1] * g.delta[1]
            };
            (proj(a) + 4.0 * proj(g.midpoint) + proj(b)) / 6.0
        })
        .collect()
}

/// Max interior error of `δ₁σ` against `−∇·σ` per resolution.
pub fn truncation_study(cfg: &TruncationConfig) -> Result<Outcome> {
    check_levels(&cfg.h)?;
    let field = |p: Point| -> Point {
        match cfg.field {
            TestField::Quadratic => [p[0] * p[0], p[0] * p[1]],
            TestField::Affine => [1.0 + 2.0 * p[0] - p[1], 3.0 + p[0] + 4.0 * p[1]],
            TestField::Discontinuous => [if p[0] < 0.5 { -1.0 } else { 1.0 }, 0.0],
        }
    };
    let neg_div = |p: Point| match cfg.field {
        TestField::Quadratic => -3.0 * p[0],
        TestField::Affine => -6.0,
        TestField::Discontinuous => 0.0,
    };
    let mut out = Outcome::default();
    let mut errs = Vec::new();
    for &h in &cfg.h {
        let cloud = sample_domain(&Domain::unit_square(), h, cfg.seed)?;
        let cx = build_complex(&cloud, DEFAULT_MIN_DEGREE)?;
        let sigma = edge_line_integrals(&cx.graph, field);
        let d = cx.codifferential(&sigma, 1)?;
        let err = cx
            .interior
            .iter()
            .map(|&i| (d[i] - neg_div(cloud.positions[i])).abs())
            .fold(0.0, f64::max);
        out.table.push("truncation", h, "max_error", err);
        out.table.push("truncation", h, "moment_residual", cx.moment_residual);
        errs.push(err);
    }
    match cfg.field {
        TestField::Affine => {
            let worst = errs.iter().copied().fold(0.0, f64::max);
            out.checks.push(Check::at_most("affine exactness", worst, 1e-9));
        }
        _ if cfg.h.len() >= 2 => {
            let slope = fit_slope(&cfg.h, &errs);
            out.table.push("truncation", 0.0, "slope", slope);
            if cfg.field == TestField::Quadratic {
                out.checks.push(Check::within("truncation slope", slope, 0.8, 1.5));
            }
        }
        _ => {}
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateDataConfig {
    /// Template case; angle, hole and seed are varied per instance.
    pub case: Case,
    pub count: usize,
    pub seed: u64,
    /// Out-of-distribution geometry: 1–2 holes of variable radius anywhere.
    pub ood: bool,
    /// Velocity angle range in degrees (advection only).
    pub angle_range: [f64; 2],
    /// Hole-center offset range along the anti-diagonal (in-distribution only).
    pub offset_range: [f64; 2],
}

impl Default for GenerateDataConfig {
    fn default() -> Self {
        Self {
            case: Case::Advection(AdvectionCase::default()),
            count: 4,
            seed: 0,
            ood: false,
            angle_range: [220.0, 270.0],
            offset_range: [-0.15, 0.15],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataInstance {
    pub case: Case,
    pub cloud: PointCloud,
    /// Row-major `N × N_F` reference solution.
    pub target: Vec<f64>,
}

impl DataInstance {
    pub fn training_instance(&self) -> Result<TrainingInstance> {
        let sys = system_for(&self.cloud, &self.case.spec(&self.cloud))?;
        TrainingInstance::new(sys, self.target.clone())
    }
}

fn random_holes(rng: &mut ChaCha8Rng) -> Vec<Hole> {
    let count = rng.gen_range(1..=2);
    let mut holes: Vec<Hole> = Vec::new();
    while holes.len() < count {
        let radius = rng.gen_range(0.08..0.18);
        let center = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
        let clear = holes
            .iter()
            .all(|h| crate::geometry::dist(h.center, center) > h.radius + radius + 0.1);
        if clear {
            holes.push(Hole { center, radius });
        }
    }
    holes
}

/// Draws instances around the template and solves them for ground truth.
pub fn generate_data(cfg: &GenerateDataConfig) -> Result<Vec<DataInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.count);
    for k in 0..cfg.count {
        let holes = if cfg.ood {
            random_holes(&mut rng)
        } else {
            let radius = match &cfg.case {
                Case::Advection(c) => c.holes.first().map_or(0.15, |h| h.radius),
                Case::Darcy(c) => c.holes.first().map_or(0.15, |h| h.radius),
            };
            let d = rng.gen_range(cfg.offset_range[0]..=cfg.offset_range[1]);
            vec![Hole {
                center: diagonal_center(d),
                radius,
            }]
        };
        let seed = cfg.seed.wrapping_mul(1000).wrapping_add(k as u64);
        let case = match &cfg.case {
            Case::Advection(c) => Case::Advection(AdvectionCase {
                angle_deg: rng.gen_range(cfg.angle_range[0]..cfg.angle_range[1]),
                holes,
                seed,
                ..c.clone()
            }),
            Case::Darcy(c) => {
                let sigma = if cfg.ood { 0.7 } else { 0.5 };
                let kappa = LogNormal::new(0.0, sigma).expect("valid parameters").sample(&mut rng);
                Case::Darcy(DarcyCase {
                    kappa: Some(kappa),
                    holes,
                    seed,
                    ..c.clone()
                })
            }
        };
        let cloud = case.cloud()?;
        let target = ground_truth(&case, &cloud)?;
        out.push(DataInstance { case, cloud, target });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SingleShotConfig {
    pub case: AdvectionCase,
    pub hidden: usize,
    pub depth: usize,
    pub mlp_seed: u64,
    pub train: TrainConfig,
    pub delta_theta: Vec<f64>,
    pub delta_center: Vec<f64>,
    pub obstacle_values: Vec<f64>,
    pub train_tolerance: f64,
    pub sweep_tolerance: f64,
}

fn steps(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as i64;
    (0..=n).map(|k| lo + k as f64 * step).map(|v| (v * 1e9).round() / 1e9).collect()
}

impl Default for SingleShotConfig {
    fn default() -> Self {
        Self {
            case: AdvectionCase::default(),
            hidden: 64,
            depth: 4,
            mlp_seed: 0,
            train: TrainConfig::default(),
            delta_theta: steps(-25.0, 25.0, 5.0),
            delta_center: steps(-0.15, 0.15, 0.05),
            obstacle_values: steps(1.0, 1.5, 0.1),
            train_tolerance: 1e-2,
            sweep_tolerance: 5e-2,
        }
    }
}

/// Trained parameters tagged with the iteration they were taken at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub params: MlpParams,
}

pub struct SingleShotOutcome {
    pub outcome: Outcome,
    pub params: MlpParams,
    pub best_iteration: usize,
    pub log: Vec<LogRow>,
}

fn learned_error(case: &AdvectionCase, kernel: &FluxKernel) -> Result<f64> {
    let cloud = case.cloud()?;
    let truth = ground_truth(&Case::Advection(case.clone()), &cloud)?;
    let sys = system_for(&cloud, &case.spec(&cloud))?;
    let (u, _) = solve_converged(&sys, kernel, 1e-6)?;
    Ok(relative_l2(&sys, &u, &truth))
}

/// Trains on one instance, then evaluates the frozen kernel on sweeps of
/// velocity angle, hole position and obstacle value.
pub fn single_shot(cfg: &SingleShotConfig) -> Result<SingleShotOutcome> {
    let case = &cfg.case;
    let cloud = case.cloud()?;
    let truth = ground_truth(&Case::Advection(case.clone()), &cloud)?;
    let inst = TrainingInstance::new(system_for(&cloud, &case.spec(&cloud))?, truth)?;
    let theta0 = MlpParams::with_architecture(6, cfg.hidden, cfg.depth, 1, cfg.mlp_seed)?;
    let trained = train(std::slice::from_ref(&inst), theta0, &cfg.train)?;
    let kernel = FluxKernel::Learned(trained.best.clone());
    let mut out = Outcome::default();

    let (u, _) = solve_converged(&inst.system, &kernel, 1e-6)?;
    let train_err = relative_l2(&inst.system, &u, &inst.target);
    out.table.push("train", trained.best_iteration as f64, "rel_l2", train_err);
    out.checks.push(Check::at_most("training error", train_err, cfg.train_tolerance));

    let mut sweep = |name: &str, values: &[f64], make: &dyn Fn(f64) -> AdvectionCase| -> Result<()> {
        let mut worst: f64 = 0.0;
        for &v in values {
            let e = learned_error(&make(v), &kernel)?;
            out.table.push(name, v, "rel_l2", e);
            worst = worst.max(e);
        }
        out.checks.push(Check::at_most(&format!("{name} sweep"), worst, cfg.sweep_tolerance));
        Ok(())
    };
    sweep("delta_theta", &cfg.delta_theta, &|d| AdvectionCase {
        angle_deg: case.angle_deg + d,
        ..case.clone()
    })?;
    let radius = case.holes.first().map_or(0.15, |h| h.radius);
    sweep("delta_center", &cfg.delta_center, &|d| AdvectionCase {
        holes: vec![Hole {
            center: diagonal_center(d),
            radius,
        }],
        ..case.clone()
    })?;
    sweep("obstacle_value", &cfg.obstacle_values, &|v| AdvectionCase {
        hole_value: v,
        ..case.clone()
    })?;
    Ok(SingleShotOutcome {
        outcome: out,
        params: trained.best,
        best_iteration: trained.best_iteration,
        log: trained.log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainedConfig {
    pub h: Vec<f64>,
    pub geometries: Vec<Vec<Hole>>,
    pub eps_diff: f64,
    pub angle_deg: f64,
    pub seed: u64,
    pub hidden: usize,
    pub depth: usize,
    pub train_samples: usize,
    pub holdout_samples: usize,
    /// Regression for the accurate kernel.
    pub accurate: PretrainConfig,
    /// The same regression stopped early at the coarse accuracy.
    pub coarse: PretrainConfig,
}

impl Default for PretrainedConfig {
    fn default() -> Self {
        Self {
            h: vec![0.1, 0.07, 0.05, 0.035],
            geometries: vec![
                vec![Hole {
                    center: [0.35, 0.6],
                    radius: 0.12,
                }],
                vec![
                    Hole {
                        center: [0.3, 0.3],
                        radius: 0.12,
                    },
                    Hole {
                        center: [0.68, 0.65],
                        radius: 0.14,
                    },
                ],
            ],
            eps_diff: 0.2,
            angle_deg: 245.0,
            seed: 0,
            hidden: 16,
            depth: 2,
            train_samples: 4000,
            holdout_samples: 4000,
            accurate: PretrainConfig {
                adam_iterations: 2000,
                lm_iterations: 1500,
                target_gamma: Some(1e-5),
                ..PretrainConfig::default()
            },
            coarse: PretrainConfig {
                adam_iterations: 2000,
                target_gamma: Some(0.1),
                lm_iterations: 0,
                check_every: 1,
                ..PretrainConfig::default()
            },
        }
    }
}

/// Advection feature samples `(ū, D_e u, v̄·ê, v̄·n̂, 0, 0)` for a unit velocity.
pub fn advection_samples(n: usize, seed: u64, u_range: [f64; 2], du_max: f64) -> Samples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let law = crate::flux::AnalyticKernel {
        law: AnalyticLaw::Advection,
        eps_diff: 0.0,
    };
    let mut xi = Vec::with_capacity(6 * n);
    let mut density = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.gen_range(u_range[0]..=u_range[1]);
        let du = rng.gen_range(-du_max..=du_max);
        let phi = rng.gen_range(0.0..2.0 * PI);
        let row = [u, du, phi.cos(), phi.sin(), 0.0, 0.0];
        density.push(law.density(&row));
        xi.extend_from_slice(&row);
    }
    Samples { width: 6, xi, density }
}

/// Manufactured advection–diffusion problem `−εΔu + v·∇u = f`, `u* = sin(πx) sin(πy)`.
fn manufactured_advection(cloud: &PointCloud, eps: f64, v: Point) -> (ProblemSpec, Vec<f64>) {
    let n = cloud.len();
    let mut spec = ProblemSpec::scalar(n, eps);
    let exact: Vec<f64> = cloud.positions.iter().map(|&p| sinsin(p)).collect();
    spec.forcing = cloud
        .positions
        .iter()
        .map(|&p| {
            let g = sinsin_grad(p);
            2.0 * PI * PI * eps * sinsin(p) + v[0] * g[0] + v[1] * g[1]
        })
        .collect();
    spec.dirichlet = exact.clone();
    spec.parameters = vec![FieldChannel::vector("v", ChannelRole::Parameter, &vec![v; n])];
    (spec, exact)
}

/// Convergence with kernels regressed to two accuracies on unseen geometries.
pub fn pretrained_convergence(cfg: &PretrainedConfig) -> Result<Outcome> {
    check_levels(&cfg.h)?;
    let train_set = advection_samples(cfg.train_samples, cfg.seed, [-0.1, 1.1], 5.0);
    let holdout = advection_samples(cfg.holdout_samples, cfg.seed.wrapping_add(1), [0.0, 1.0], 4.5);
    let theta0 = MlpParams::with_architecture(6, cfg.hidden, cfg.depth, 1, cfg.seed)?;
    let accurate = pretrain_kernel(&train_set, &holdout, theta0.clone(), &cfg.accurate)?;
    let coarse = pretrain_kernel(&train_set, &holdout, theta0, &cfg.coarse)?;
    let mut out = Outcome::default();
    out.table.push("pretrain", 0.0, "gamma_accurate", accurate.gamma_hat);
    out.table.push("pretrain", 0.0, "gamma_coarse", coarse.gamma_hat);
    out.checks.push(Check::at_most("accurate kernel gamma", accurate.gamma_hat, 1e-5));

    let v = velocity(cfg.angle_deg);
    let kernels = [
        ("analytic", analytic_kernel("advection", cfg.eps_diff)?),
        ("accurate", FluxKernel::Learned(accurate.params)),
        ("coarse", FluxKernel::Learned(coarse.params)),
    ];
    for (g, holes) in cfg.geometries.iter().enumerate() {
        let domain = Domain { holes: holes.clone() };
        let exp = format!("geometry{g}");
        let mut errs = vec![Vec::new(); kernels.len()];
        for &h in &cfg.h {
            let cloud = sample_domain(&domain, h, cfg.seed)?;
            let (spec, exact) = manufactured_advection(&cloud, cfg.eps_diff, v);
            let sys = system_for(&cloud, &spec)?;
            for (k, (name, kernel)) in kernels.iter().enumerate() {
                let (u, _) = solve_converged(&sys, kernel, 1e-10)?;
                let e = relative_l2(&sys, &u, &exact);
                out.table.push(&exp, h, &format!("rel_l2_{name}"), e);
                errs[k].push(e);
            }
        }
        for (k, (name, _)) in kernels.iter().enumerate() {
            let slope = fit_slope(&cfg.h, &errs[k]);
            out.table.push(&exp, 0.0, &format!("slope_{name}"), slope);
        }
        out.checks
            .push(Check::within(&format!("{exp} accurate slope"), fit_slope(&cfg.h, &errs[1]), 1.7, 2.3));
        let ratio_lo = errs[2].iter().map(|e| e / coarse.gamma_hat).fold(f64::INFINITY, f64::min);
        let ratio_hi = errs[2].iter().map(|e| e / coarse.gamma_hat).fold(0.0, f64::max);
        out.checks.push(Check::within(&format!("{exp} coarse plateau min ratio"), ratio_lo, 0.1, 10.0));
        out.checks.push(Check::within(&format!("{exp} coarse plateau max ratio"), ratio_hi, 0.1, 10.0));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvarianceConfig {
    pub case: AdvectionCase,
    pub angles_deg: Vec<f64>,
    pub translation: Point,
    pub hidden: usize,
    pub depth: usize,
    pub mlp_seed: u64,
    pub rel_tol: f64,
    pub tolerance: f64,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            case: AdvectionCase::default(),
            angles_deg: vec![0.0, 30.0, 90.0, 137.0],
            translation: [0.3, -0.2],
            hidden: 16,
            depth: 2,
            mlp_seed: 1,
            rel_tol: 1e-12,
            tolerance: 1e-8,
        }
    }
}

/// Rigid motions of cloud and vector inputs leave nodal solutions unchanged.
pub fn invariance_check(cfg: &InvarianceConfig) -> Result<Outcome> {
    let case = &cfg.case;
    let cloud = case.cloud()?;
    let spec = case.spec(&cloud);
    let learned = FluxKernel::Learned(MlpParams::with_architecture(6, cfg.hidden, cfg.depth, 1, cfg.mlp_seed)?);
    let kernels = [("analytic", case.kernel()?), ("learned", learned)];
    let base_sys = system_for(&cloud, &spec)?;
    let mut out = Outcome::default();
    let mut transforms: Vec<(String, f64, f64, Point)> = cfg
        .angles_deg
        .iter()
        .map(|&a| ("rotation".to_string(), a, a, [0.0, 0.0]))
        .collect();
    transforms.push(("translation".to_string(), 0.0, 0.0, cfg.translation));
    for (name, kernel) in &kernels {
        let (base, _) = solve_converged(&base_sys, kernel, cfg.rel_tol)?;
        let mut worst: f64 = 0.0;
        for (kind, param, angle, shift) in &transforms {
            let moved = cloud.rigid_transform(angle.to_radians(), *shift);
            let mut mspec = spec.clone();
            let v = velocity(case.angle_deg + angle);
            mspec.parameters = vec![FieldChannel::vector("v", ChannelRole::Parameter, &vec![v; cloud.len()])];
            let sys = system_for(&moved, &mspec)?;
            let (u, _) = solve_converged(&sys, kernel, cfg.rel_tol)?;
            let num: f64 = u.iter().zip(&base).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = base.iter().map(|b| b * b).sum();
            let diff = (num / den).sqrt();
            out.table.push(&format!("{kind}_{name}"), *param, "rel_diff", diff);
            worst = worst.max(diff);
        }
        out.checks.push(Check::at_most(&format!("{name} invariance"), worst, cfg.tolerance));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConservationConfig {
    pub h: f64,
    pub seed: u64,
    pub samples: usize,
    /// Converged problem whose total flux is checked end to end.
    pub case: AdvectionCase,
    pub tolerance: f64,
}

impl Default for ConservationConfig {
    fn default() -> Self {
        Self {
            h: 1.0 / 30.0,
            seed: 0,
            samples: 10,
            case: AdvectionCase::default(),
            tolerance: 1e-12,
        }
    }
}

/// `|Σ_i (d₀ᵀM₁σ)_i| / ‖M₁σ‖₁`.
pub fn conservation_defect(cx: &crate::complex::MeecComplex, sigma: &[f64]) -> Result<f64> {
    let total: f64 = cx.weak_divergence().spmv(sigma)?.iter().sum();
    let scale: f64 = cx.a.iter().zip(sigma).map(|(a, s)| (a * s).abs()).sum();
    Ok(if scale == 0.0 { total.abs() } else { total.abs() / scale })
}

pub fn conservation_check(cfg: &ConservationConfig) -> Result<Outcome> {
    let cloud = sample_domain(&Domain::unit_square(), cfg.h, cfg.seed)?;
    let cx = build_complex(&cloud, DEFAULT_MIN_DEGREE)?;
    let mut out = Outcome::default();
    out.table.push("conservation", 0.0, "nodes", cloud.len() as f64);
    let zero = conservation_defect(&cx, &vec![0.0; cx.num_edges()])?;
    out.table.push("conservation", 0.0, "defect_zero", zero);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst: f64 = zero;
    for k in 0..cfg.samples {
        let sigma: Vec<f64> = (0..cx.num_edges()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = conservation_defect(&cx, &sigma)?;
        out.table.push("conservation", (k + 1) as f64, "defect_random", d);
        worst = worst.max(d);
    }
    out.checks.push(Check::at_most("random cochains", worst, cfg.tolerance));

    let acloud = cfg.case.cloud()?;
    let sys = system_for(&acloud, &cfg.case.spec(&acloud))?;
    let kernel = cfg.case.kernel()?;
    let (u, _) = solve_converged(&sys, &kernel, 1e-10)?;
    let sigma = sys.total_flux(&kernel, &u)?;
    let d = conservation_defect(&sys.complex, &sigma)?;
    out.table.push("conservation", 0.0, "defect_solution", d);
    out.checks.push(Check::at_most("converged total flux", d, cfg.tolerance));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NonlinearConfig {
    pub instances: usize,
    pub h: f64,
    pub seed: u64,
    /// Newton stopping tolerance relative to `max(1, ‖b‖∞)`.
    pub rel_tol: f64,
    /// Absolute bound on `‖G‖∞` at the returned state.
    pub tolerance: f64,
}

impl Default for NonlinearConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            h: 0.05,
            seed: 0,
            rel_tol: 1e-8,
            tolerance: 1e-6,
        }
    }
}

/// Seeded nonlinear Darcy and nonlinear advection solves.
pub fn nonlinear_solves(cfg: &NonlinearConfig) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Outcome::default();
    let mut worst: f64 = 0.0;
    let mut all_converged = true;
    for k in 0..cfg.instances {
        let d = rng.gen_range(-0.15..=0.15);
        let holes = vec![Hole {
            center: diagonal_center(d),
            radius: 0.15,
        }];
        let seed = cfg.seed.wrapping_mul(1000).wrapping_add(k as u64);
        let cases = [
            Case::Darcy(DarcyCase {
                law: "nonlinear_darcy".into(),
                holes: holes.clone(),
                h: cfg.h,
                seed,
                ..DarcyCase::default()
            }),
            Case::Advection(AdvectionCase {
                law: "nonlinear_advection".into(),
                angle_deg: rng.gen_range(220.0..270.0),
                holes,
                h: cfg.h,
                seed,
                ..AdvectionCase::default()
            }),
        ];
        for case in &cases {
            let cloud = case.cloud()?;
            let sys = system_for(&cloud, &case.spec(&cloud))?;
            let kernel = case.kernel()?;
            let (u, rep) = newton_solve_with(&sys, &kernel, &sys.initial_guess()?, &solver(cfg.rel_tol))?;
            let g = sys.residual(&kernel, &u)?;
            let r = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let name = match case {
                Case::Darcy(_) => "nonlinear_darcy",
                Case::Advection(_) => "nonlinear_advection",
            };
            out.table.push(name, k as f64, "residual", r);
            out.table.push(name, k as f64, "iterations", rep.iterations as f64);
            out.table.push(
                name,
                k as f64,
                "picard_steps",
                rep.history.iter().filter(|s| s.method == crate::solver::SolveMethod::PicardFallback).count() as f64,
            );
            all_converged &= rep.converged;
            worst = worst.max(r);
        }
    }
    out.checks.push(Check::holds("all converged", all_converged));
    out.checks.push(Check::at_most("worst residual", worst, cfg.tolerance));
    Ok(out)
}

/// Rotates a point about the origin by `angle_deg` (degrees).
pub fn rotate_deg(p: Point, angle_deg: f64) -> Point {
    rotate(p, angle_deg.to_radians())
}
