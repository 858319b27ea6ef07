//! Fitting learned flux kernels: solution-matching training through the
//! converged solve, and direct regression on sampled densities.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::{mlp_forward, mlp_param_gradient, FluxKernel, MlpParams, MlpTape, MlpWorkspace};
use crate::solver::{newton_solve_with, DiscreteSystem, SolverOptions};
use crate::sparse::LuFactors;

/// An assembled problem paired with its target nodal solution.
#[derive(Debug, Clone)]
pub struct TrainingInstance {
    pub system: DiscreteSystem,
    /// Row-major `N × N_F` target.
    pub target: Vec<f64>,
}

impl TrainingInstance {
    pub fn new(system: DiscreteSystem, target: Vec<f64>) -> Result<Self> {
        let n = system.graph().num_nodes() * system.n_f;
        if target.len() != n {
            return Err(Error::DimensionMismatch {
                op: "training target",
                expected: n,
                got: target.len(),
            });
        }
        let mut lifted = target.clone();
        system.apply_dirichlet(&mut lifted);
        let off = lifted
            .iter()
            .zip(&target)
            .any(|(g, t)| (g - t).abs() > 1e-12 * g.abs().max(1.0) || !t.is_finite());
        if off {
            return Err(Error::InconsistentSpec("target disagrees with Dirichlet data".into()));
        }
        Ok(Self { system, target })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// Squared 2-norm of the mismatch over unknown entries.
    pub loss: f64,
    /// `‖u − u_data‖₂ / ‖u_data‖₂` over the same entries.
    pub rel_l2: f64,
}

pub fn loss(sys: &DiscreteSystem, u: &[f64], u_data: &[f64]) -> Result<LossValue> {
    let n = sys.graph().num_nodes() * sys.n_f;
    if u.len() != n || u_data.len() != n {
        return Err(Error::DimensionMismatch {
            op: "loss",
            expected: n,
            got: u.len().min(u_data.len()),
        });
    }
    let (a, b) = (sys.restrict(u), sys.restrict(u_data));
    let loss: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = b.iter().map(|y| y * y).sum();
    Ok(LossValue {
        loss,
        rel_l2: (loss / norm.max(f64::MIN_POSITIVE)).sqrt(),
    })
}

/// `∂ℒ/∂u` over the unknowns.
pub fn loss_cotangent(sys: &DiscreteSystem, u: &[f64], u_data: &[f64]) -> Vec<f64> {
    sys.restrict(u).iter().zip(sys.restrict(u_data)).map(|(x, y)| 2.0 * (x - y)).collect()
}

/// `dℒ/dθ` at a converged state via the adjoint `(∂G/∂u)ᵀ w = ∂ℒ/∂u`.
///
/// `tolerance` is the absolute residual bound the state must satisfy.
pub fn implicit_gradient(
    sys: &DiscreteSystem,
    theta: &MlpParams,
    u_star: &[f64],
    dl_du: &[f64],
    tolerance: f64,
) -> Result<MlpParams> {
    if dl_du.len() != sys.num_unknowns() {
        return Err(Error::DimensionMismatch {
            op: "implicit_gradient",
            expected: sys.num_unknowns(),
            got: dl_du.len(),
        });
    }
    sys.check_kernel(&FluxKernel::Learned(theta.clone()))?;
    let block = sys.features(u_star)?;
    let tape = MlpTape::record(theta, &block.xi)?;
    let g = sys.residual_from_density(u_star, &tape.output())?;
    let residual = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if residual > tolerance {
        return Err(Error::StaleSolution { residual, tolerance });
    }
    if dl_du.iter().all(|&v| v == 0.0) {
        return Ok(theta.zeros_like());
    }
    let jac = sys.assemble_jacobian(&tape.input_jacobian())?;
    let w = LuFactors::factorize(&jac)?.solve_transpose(dl_du)?;
    let mut upstream = sys.divergence_adjoint(&w)?;
    let nf = sys.n_f;
    for (e, geo) in sys.graph().geometry().iter().enumerate() {
        for c in 0..nf {
            upstream[e * nf + c] *= -geo.length;
        }
    }
    tape.param_gradient(&upstream)
}

/// Scales `g` to at most `max_norm`; returns the norm before clipping.
pub fn clip_gradient(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..x.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g[k] * g[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            x[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Keep a parameter snapshot every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Relative Newton tolerance for the inner solves.
    pub solver_rel_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            learning_rate: 5e-4,
            clip_norm: 1.0,
            beta1: 0.95,
            beta2: 0.99,
            checkpoint_every: 0,
            seed: 0,
            solver_rel_tol: 1e-6,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("learning rate and clip norm must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub instance_id: usize,
    pub loss: f64,
    pub rel_l2: f64,
    pub newton_iters: usize,
    pub grad_norm_preclip: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest-loss parameters seen (earliest on ties).
    pub best: MlpParams,
    pub best_iteration: usize,
    pub best_loss: f64,
    pub last: MlpParams,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<(usize, MlpParams)>,
}

pub fn write_log<W: Write>(log: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Batch-size-one training with implicit gradients, Adam and clipping.
pub fn train(instances: &[TrainingInstance], kernel0: MlpParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::NoSamples);
    }
    let opts = SolverOptions {
        rel_tol: cfg.solver_rel_tol,
        ..SolverOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = kernel0;
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut warm: Vec<Option<Vec<f64>>> = vec![None; instances.len()];
    let mut best: Option<(f64, usize, MlpParams)> = None;
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();
    let mut skipped = 0;

    for it in 0..cfg.iterations {
        let k = rng.gen_range(0..instances.len());
        let inst = &instances[k];
        let step = solve_and_differentiate(inst, &params, warm[k].as_deref(), &opts);
        let (u, lv, newton_iters, mut grad) = match step {
            Ok(s) => s,
            Err(e) if is_solve_failure(&e) => {
                skipped += 1;
                log.push(LogRow {
                    iter: it,
                    instance_id: k,
                    loss: f64::NAN,
                    rel_l2: f64::NAN,
                    newton_iters: 0,
                    grad_norm_preclip: f64::NAN,
                    converged: false,
                });
                if skipped * 10 > cfg.iterations {
                    return Err(Error::TooManySkips {
                        skipped,
                        iterations: it + 1,
                    });
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        warm[k] = Some(u);
        if best.as_ref().is_none_or(|b| lv.loss < b.0) {
            best = Some((lv.loss, it, params.clone()));
        }
        let pre = clip_gradient(&mut grad, cfg.clip_norm);
        adam.step(&mut flat, &grad);
        params.set_flat(&flat)?;
        log.push(LogRow {
            iter: it,
            instance_id: k,
            loss: lv.loss,
            rel_l2: lv.rel_l2,
            newton_iters,
            grad_norm_preclip: pre,
            converged: true,
        });
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            checkpoints.push((it + 1, params.clone()));
        }
    }
    let (best_loss, best_iteration, best) = best.ok_or(Error::TooManySkips {
        skipped,
        iterations: cfg.iterations,
    })?;
    Ok(TrainOutcome {
        best,
        best_iteration,
        best_loss,
        last: params,
        log,
        checkpoints,
    })
}

fn is_solve_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFiniteResidual | Error::SingularMatrix { .. } | Error::StaleSolution { .. }
    )
}

/// Solves (warm start first, then from the harmonic extension) and returns
/// the state, loss, Newton iterations and the flat loss gradient.
fn solve_and_differentiate(
    inst: &TrainingInstance,
    params: &MlpParams,
    warm: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, LossValue, usize, Vec<f64>)> {
    let sys = &inst.system;
    let kernel = FluxKernel::Learned(params.clone());
    let mut attempt = |u0: &[f64]| -> Result<(Vec<f64>, usize)> {
        let (u, rep) = newton_solve_with(sys, &kernel, u0, opts)?;
        if rep.converged {
            Ok((u, rep.iterations))
        } else {
            Err(Error::StaleSolution {
                residual: rep.residual,
                tolerance: rep.tolerance,
            })
        }
    };
    let (u, its) = match warm.map(&mut attempt) {
        Some(Ok(r)) => r,
        _ => attempt(&sys.initial_guess()?)?,
    };
    let lv = loss(sys, &u, &inst.target)?;
    let ct = loss_cotangent(sys, &u, &inst.target);
    let grad = implicit_gradient(sys, params, &u, &ct, sys.tolerance(opts.rel_tol))?;
    Ok((u, lv, its, grad.to_flat()))
}

/// Feature rows with target densities, row-major `len × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub width: usize,
    pub xi: Vec<f64>,
    pub density: Vec<f64>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }
}

/// Max absolute density error of a single-output network over the samples.
pub fn sup_error(theta: &MlpParams, samples: &Samples) -> Result<f64> {
    let out = mlp_forward(theta, &samples.xi)?;
    Ok(out.iter().zip(&samples.density).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub adam_iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Levenberg–Marquardt refinement steps after Adam.
    pub lm_iterations: usize,
    /// LM is skipped above this many parameters (dense normal equations).
    pub lm_max_params: usize,
    /// Stop once the held-out sup error falls to this value.
    pub target_gamma: Option<f64>,
    /// Held-out evaluation cadence during the Adam phase.
    pub check_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            adam_iterations: 3000,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            lm_iterations: 200,
            lm_max_params: 2000,
            target_gamma: None,
            check_every: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: MlpParams,
    /// Sup error over the held-out samples.
    pub gamma_hat: f64,
    pub adam_steps: usize,
    pub lm_steps: usize,
}

/// Squared-loss regression of densities, Adam then Levenberg–Marquardt.
pub fn pretrain_kernel(
    train: &Samples,
    holdout: &Samples,
    theta0: MlpParams,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if train.is_empty() || holdout.is_empty() {
        return Err(Error::NoSamples);
    }
    if theta0.output_width() != 1 || train.width != theta0.input_width() || holdout.width != train.width {
        return Err(Error::DimensionMismatch {
            op: "pretrain_kernel",
            expected: theta0.input_width(),
            got: train.width,
        });
    }
    let reached = |g: f64| cfg.target_gamma.is_some_and(|t| g <= t);
    let mut params = theta0;
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), cfg.learning_rate, cfg.beta1, cfg.beta2);
    let n = train.len() as f64;
    let mut adam_steps = 0;
    let mut gamma = sup_error(&params, holdout)?;
    while adam_steps < cfg.adam_iterations && !reached(gamma) {
        let out = mlp_forward(&params, &train.xi)?;
        let up: Vec<f64> = out.iter().zip(&train.density).map(|(a, b)| 2.0 * (a - b) / n).collect();
        let g = mlp_param_gradient(&params, &train.xi, &up)?.to_flat();
        adam.step(&mut flat, &g);
        params.set_flat(&flat)?;
        adam_steps += 1;
        if adam_steps % cfg.check_every.max(1) == 0 || adam_steps == cfg.adam_iterations {
            gamma = sup_error(&params, holdout)?;
        }
    }

    let mut lm_steps = 0;
    if params.num_params() <= cfg.lm_max_params && !reached(gamma) {
        let mut lambda = 1e-3;
        let sse = |p: &MlpParams| -> Result<f64> {
            let out = mlp_forward(p, &train.xi)?;
            Ok(out.iter().zip(&train.density).map(|(a, b)| (a - b) * (a - b)).sum())
        };
        let mut current = sse(&params)?;
        while lm_steps < cfg.lm_iterations && !reached(gamma) {
            let (jtj, jtr) = normal_equations(&params, train)?;
            let mut improved = false;
            for _ in 0..30 {
                let mut a = jtj.clone();
                for k in 0..a.nrows() {
                    a[(k, k)] += lambda * (jtj[(k, k)] + 1e-12);
                }
                let Some(chol) = a.cholesky() else {
                    lambda *= 4.0;
                    continue;
                };
                let delta = chol.solve(&(-&jtr));
                let trial_flat: Vec<f64> = flat.iter().zip(delta.iter()).map(|(x, d)| x + d).collect();
                let mut trial = params.clone();
                trial.set_flat(&trial_flat)?;
                let s = sse(&trial)?;
                if s.is_finite() && s < current {
                    params = trial;
                    flat = trial_flat;
                    current = s;
                    lambda = (lambda / 3.0).max(1e-15);
                    improved = true;
                    break;
                }
                lambda *= 4.0;
            }
            lm_steps += 1;
            gamma = sup_error(&params, holdout)?;
            if !improved {
                break;
            }
        }
    }
    Ok(PretrainOutcome {
        params,
        gamma_hat: gamma,
        adam_steps,
        lm_steps,
    })
}

/// `JᵀJ` and `Jᵀr` of the density residuals with respect to the flat parameters.
fn normal_equations(params: &MlpParams, samples: &Samples) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let p = params.num_params();
    let out = mlp_forward(params, &samples.xi)?;
    let mut grad = params.zeros_like();
    let mut ws = MlpWorkspace::default();
    let mut jac = DMatrix::zeros(samples.len(), p);
    let mut r = DVector::zeros(samples.len());
    for (s, row) in samples.xi.chunks_exact(samples.width).enumerate() {
        for layer in grad.layers_mut() {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }
        params.accumulate_param_gradient(row, &[1.0], &mut grad, &mut ws);
        for (k, v) in grad.to_flat().into_iter().enumerate() {
            jac[(s, k)] = v;
        }
        r[s] = out[s] - samples.density[s];
    }
    let jt = jac.transpose();
    Ok((&jt * &jac, &jt * r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex::build_complex;
    use crate::features::{ChannelRole, FieldChannel};
    use crate::geometry::{sample_domain, BoundaryKind, Domain};
    use crate::solver::{assemble_system, ProblemSpec};
    use proptest::prelude::{prop_assert, proptest};

    fn ad_system(h: f64, seed: u64, angle_deg: f64) -> DiscreteSystem {
        let cloud = sample_domain(&Domain::with_hole([0.5, 0.5], 0.2), h, seed).unwrap();
        let cx = build_complex(&cloud, 8).unwrap().shared();
        let n = cloud.len();
        let mut spec = ProblemSpec::scalar(n, 0.2);
        let a = angle_deg.to_radians();
        spec.parameters = vec![FieldChannel::vector("v", ChannelRole::Parameter, &vec![[a.cos(), a.sin()]; n])];
        for (k, kind) in cloud.boundary_kind.iter().enumerate() {
            if *kind == BoundaryKind::DirichletHole {
                spec.dirichlet[k] = 1.0;
            }
        }
        assemble_system(cx, &spec).unwrap()
    }

    fn solve(sys: &DiscreteSystem, theta: &MlpParams, rel_tol: f64) -> Vec<f64> {
        solve_from(sys, theta, rel_tol, &sys.initial_guess().unwrap())
    }

    fn solve_from(sys: &DiscreteSystem, theta: &MlpParams, rel_tol: f64, u0: &[f64]) -> Vec<f64> {
        let opts = SolverOptions { rel_tol, ..SolverOptions::default() };
        let k = FluxKernel::Learned(theta.clone());
        let (u, rep) = newton_solve_with(sys, &k, u0, &opts).unwrap();
        assert!(rep.converged, "{rep:?}");
        u
    }

    #[test]
    fn loss_examples() {
        let sys = ad_system(0.15, 0, 245.0);
        let n = sys.graph().num_nodes();
        let mut target = vec![0.0; n];
        sys.apply_dirichlet(&mut target);
        assert_eq!(loss(&sys, &target, &target).unwrap().loss, 0.0);
        let mut ones = vec![1.0; n];
        sys.apply_dirichlet(&mut ones);
        let lv = loss(&sys, &ones, &target).unwrap();
        assert_eq!(lv.loss, sys.unknowns.len() as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut oracle = 0.0;
        for &k in &sys.unknowns {
            oracle += (a[k] - b[k]).powi(2);
        }
        assert!((loss(&sys, &a, &b).unwrap().loss - oracle).abs() <= 1e-14 * oracle);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let sys = ad_system(0.15, 1, 245.0);
        let theta = MlpParams::with_architecture(6, 8, 2, 1, 0).unwrap();
        let u = solve(&sys, &theta, 1e-10);
        let g = implicit_gradient(&sys, &theta, &u, &vec![0.0; sys.num_unknowns()], 1e-8).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_state_is_rejected() {
        let sys = ad_system(0.15, 1, 245.0);
        let theta = MlpParams::with_architecture(6, 8, 2, 1, 0).unwrap();
        let u = vec![0.3; sys.graph().num_nodes()];
        let r = implicit_gradient(&sys, &theta, &u, &vec![1.0; sys.num_unknowns()], 1e-8);
        assert!(matches!(r, Err(Error::StaleSolution { .. })));
    }

    #[test]
    fn dead_unit_has_zero_gradient() {
        let sys = ad_system(0.15, 2, 245.0);
        let mut theta = MlpParams::with_architecture(6, 8, 2, 1, 4).unwrap();
        // hidden unit 3 of the first layer feeds nothing downstream
        let l1 = &mut theta.layers_mut()[1];
        for o in 0..l1.fan_out {
            l1.w[o * l1.fan_in + 3] = 0.0;
        }
        let u = solve(&sys, &theta, 1e-10);
        let mut target = u.clone();
        target.iter_mut().zip(sys.graph().kinds()).for_each(|(t, k)| {
            if !k.is_dirichlet() {
                *t += 0.1;
            }
        });
        let ct = loss_cotangent(&sys, &u, &target);
        let g = implicit_gradient(&sys, &theta, &u, &ct, 1e-8).unwrap();
        let l0 = &g.layers()[0];
        assert!(l0.w[3 * l0.fan_in..4 * l0.fan_in].iter().all(|&v| v == 0.0));
        assert_eq!(l0.b[3], 0.0);
        assert!(g.to_flat().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn implicit_gradient_matches_finite_differences() {
        let sys = ad_system(0.12, 3, 230.0);
        let theta = MlpParams::with_architecture(6, 8, 2, 1, 7).unwrap();
        let target = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut t: Vec<f64> = solve(&sys, &theta, 1e-10).iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
            sys.apply_dirichlet(&mut t);
            t
        };
        let u = solve(&sys, &theta, 1e-13);
        // re-solves continue from the base state so they track the same solution branch
        let loss_at = |p: &MlpParams| loss(&sys, &solve_from(&sys, p, 1e-13, &u), &target).unwrap().loss;
        let g = implicit_gradient(&sys, &theta, &u, &loss_cotangent(&sys, &u, &target), 1e-8)
            .unwrap()
            .to_flat();
        let flat = theta.to_flat();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..4 {
            let k = rng.gen_range(0..flat.len());
            let step = 1e-4;
            let mut p = theta.clone();
            let mut f = flat.clone();
            f[k] += step;
            p.set_flat(&f).unwrap();
            let lp = loss_at(&p);
            f[k] -= 2.0 * step;
            p.set_flat(&f).unwrap();
            let lm = loss_at(&p);
            let fd = (lp - lm) / (2.0 * step);
            assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "param {k}: fd {fd} vs {}", g[k]);
        }
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(v in proptest::collection::vec(-1e3f64..1e3, 1..50)) {
            let mut g = v.clone();
            let pre = clip_gradient(&mut g, 1.0);
            let post = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(post <= 1.0 + 1e-12);
            prop_assert!((pre - v.iter().map(|x| x * x).sum::<f64>().sqrt()).abs() <= 1e-12 * pre.max(1.0));
        }
    }

    fn instance(seed: u64) -> (TrainingInstance, MlpParams) {
        let sys = ad_system(0.15, seed, 245.0);
        let truth = analytic_solve(&sys);
        (TrainingInstance::new(sys, truth).unwrap(), MlpParams::with_architecture(6, 8, 2, 1, seed).unwrap())
    }

    fn analytic_solve(sys: &DiscreteSystem) -> Vec<f64> {
        let k = crate::flux::analytic_kernel("advection", 0.2).unwrap();
        crate::solver::newton_solve(sys, &k, &sys.initial_guess().unwrap()).unwrap().0
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (inst, theta) = instance(1);
        let cfg = TrainConfig { iterations: 3, learning_rate: 0.0, ..TrainConfig::default() };
        let out = train(&[inst], theta.clone(), &cfg).unwrap();
        assert_eq!(out.last, theta);
        assert_eq!(out.best, theta);
    }

    #[test]
    fn self_generated_target_is_a_fixed_point() {
        let sys = ad_system(0.15, 2, 245.0);
        let theta = MlpParams::with_architecture(6, 8, 2, 1, 2).unwrap();
        let u = solve(&sys, &theta, 1e-12);
        let inst = TrainingInstance::new(sys, u).unwrap();
        let cfg = TrainConfig { iterations: 1, solver_rel_tol: 1e-12, ..TrainConfig::default() };
        let out = train(&[inst], theta, &cfg).unwrap();
        assert!(out.log[0].loss < 1e-10, "{:?}", out.log[0]);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (inst, theta) = instance(3);
        let cfg = TrainConfig { iterations: 60, learning_rate: 1e-2, seed: 9, checkpoint_every: 20, ..TrainConfig::default() };
        let a = train(std::slice::from_ref(&inst), theta.clone(), &cfg).unwrap();
        let b = train(&[inst], theta, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.best, b.best);
        assert_eq!(a.checkpoints.len(), 3);
        assert!(a.best_loss < 0.5 * a.log[0].loss, "{} vs {}", a.best_loss, a.log[0].loss);
        assert!(a.log.iter().all(|r| r.converged));
        let mut buf = Vec::new();
        write_log(&a.log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,instance_id,loss,rel_l2,newton_iters,grad_norm_preclip"));
        assert_eq!(text.lines().count(), 61);
    }

    #[test]
    fn target_must_match_dirichlet_data() {
        let sys = ad_system(0.15, 0, 245.0);
        let n = sys.graph().num_nodes();
        assert!(matches!(TrainingInstance::new(sys, vec![0.0; n]), Err(Error::InconsistentSpec(_))));
    }

    fn linear_samples(n: usize, seed: u64) -> Samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xi: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let density = xi.chunks(3).map(|r| 0.5 * r[0] - 0.25 * r[1] + 0.1 * r[2] + 0.05).collect();
        Samples { width: 3, xi, density }
    }

    #[test]
    fn pretraining_fits_a_linear_map() {
        let theta = MlpParams::with_architecture(3, 8, 1, 1, 0).unwrap();
        let cfg = PretrainConfig { adam_iterations: 500, ..PretrainConfig::default() };
        let out = pretrain_kernel(&linear_samples(200, 1), &linear_samples(100, 2), theta, &cfg).unwrap();
        assert!(out.gamma_hat <= 1e-4, "{}", out.gamma_hat);
    }

    #[test]
    fn pretraining_stops_at_target() {
        let theta = MlpParams::with_architecture(3, 8, 1, 1, 0).unwrap();
        let cfg = PretrainConfig { target_gamma: Some(0.05), ..PretrainConfig::default() };
        let out = pretrain_kernel(&linear_samples(200, 1), &linear_samples(100, 2), theta, &cfg).unwrap();
        assert!(out.gamma_hat <= 0.05 && out.lm_steps == 0 && out.adam_steps < 3000);
    }

    #[test]
    fn pretraining_needs_samples() {
        let theta = MlpParams::with_architecture(3, 8, 1, 1, 0).unwrap();
        let empty = Samples { width: 3, xi: vec![], density: vec![] };
        let r = pretrain_kernel(&empty, &linear_samples(10, 2), theta, &PretrainConfig::default());
        assert!(matches!(r, Err(Error::NoSamples)));
    }
}
