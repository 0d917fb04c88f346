//! Variational (log-Laplace) formula:
//! `log int e^f dgamma_d = sup_U E[f(B_1 + U_1) - 0.5 ||U||^2]`.
//!
//! The supremum is approached from inside with parametric Markov policies and
//! compared against a direct Monte-Carlo estimate of the left-hand side.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::{combined_se, Estimate};
use crate::follmer::DriftFunction;
use crate::measure::{MeasureError, Mixture, MixtureSpec};
use crate::pathsim::{simulate, NoiseStream, SdeConfig, SimError};
use crate::rng;

/// Largest eigenvalue allowed for a quadratic functional is `1 - QUADRATIC_MARGIN`.
pub const QUADRATIC_MARGIN: f64 = 1e-3;
/// `f(Z)` above this aborts the log-Laplace estimate instead of overflowing.
pub const OVERFLOW_LIMIT: f64 = 700.0;

#[derive(Debug, Error)]
pub enum LaplaceError {
    #[error("quadratic functional needs max eigenvalue below {limit}, found {max_eigenvalue}")]
    QuadraticNotIntegrable { max_eigenvalue: f64, limit: f64 },
    #[error("quadratic matrix is not symmetric")]
    QuadraticNotSymmetric,
    #[error("{what} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("f(Z) = {value} exceeds {OVERFLOW_LIMIT}; exp would overflow")]
    OverflowRisk { value: f64 },
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Terminal functionals `f: R^d -> R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalSpec {
    /// `f(x) = a . x`
    Linear { a: Vec<f64> },
    /// `f(x) = 0.5 x^T Q x`
    Quadratic { q: Vec<Vec<f64>> },
    /// `f = log rho` for a mixture target.
    LogMixture { target: MixtureSpec },
}

#[derive(Debug, Clone)]
pub enum TerminalFunctional {
    Linear(Vec<f64>),
    Quadratic(Vec<Vec<f64>>),
    LogMixture(Mixture),
}

impl TerminalFunctional {
    pub fn new(spec: &FunctionalSpec) -> Result<Self, LaplaceError> {
        match spec {
            FunctionalSpec::Linear { a } => {
                if a.is_empty() {
                    return Err(LaplaceError::DimensionMismatch {
                        what: "linear coefficient",
                        expected: 1,
                        found: 0,
                    });
                }
                Ok(Self::Linear(a.clone()))
            }
            FunctionalSpec::Quadratic { q } => {
                let d = q.len();
                if d == 0 || q.iter().any(|r| r.len() != d) {
                    return Err(LaplaceError::DimensionMismatch {
                        what: "quadratic matrix",
                        expected: d.max(1),
                        found: q.iter().map(Vec::len).find(|&l| l != d).unwrap_or(0),
                    });
                }
                let m = DMatrix::from_fn(d, d, |i, j| q[i][j]);
                if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                    return Err(LaplaceError::QuadraticNotSymmetric);
                }
                let max_eig = SymmetricEigen::new(m).eigenvalues.max();
                let limit = 1.0 - QUADRATIC_MARGIN;
                if !(max_eig < limit) {
                    return Err(LaplaceError::QuadraticNotIntegrable {
                        max_eigenvalue: max_eig,
                        limit,
                    });
                }
                Ok(Self::Quadratic(q.clone()))
            }
            FunctionalSpec::LogMixture { target } => Ok(Self::LogMixture(Mixture::new(target)?)),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Linear(a) => a.len(),
            Self::Quadratic(q) => q.len(),
            Self::LogMixture(m) => m.dim(),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Self::Linear(a) => a.iter().zip(x).map(|(a, x)| a * x).sum(),
            Self::Quadratic(q) => {
                0.5 * q
                    .iter()
                    .zip(x)
                    .map(|(row, xi)| xi * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                    .sum::<f64>()
            }
            Self::LogMixture(m) => m.log_relative_density(x),
        }
    }

    /// `log int e^f dgamma_d` in closed form.
    pub fn log_laplace_exact(&self) -> f64 {
        match self {
            Self::Linear(a) => 0.5 * a.iter().map(|v| v * v).sum::<f64>(),
            Self::Quadratic(q) => {
                let d = q.len();
                let m = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 } - q[i][j]);
                -0.5 * SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.ln()).sum::<f64>()
            }
            // rho integrates to one against gamma_d
            Self::LogMixture(_) => 0.0,
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Linear(a) => a.clone(),
            Self::Quadratic(q) => q
                .iter()
                .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
            Self::LogMixture(m) => m.score(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Constant,
    Affine,
}

/// Markov drift policies.
///
/// `Affine` is `u(t, x) = A_j x + b_j` on the time piece `j = floor(t * pieces)`,
/// with `a` holding the `pieces` matrices row-major and `b` the offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyParams {
    Constant { c: Vec<f64> },
    Affine {
        dim: usize,
        pieces: usize,
        a: Vec<f64>,
        b: Vec<f64>,
    },
}

impl PolicyParams {
    pub fn zero(kind: PolicyKind, dim: usize, pieces: usize) -> Self {
        match kind {
            PolicyKind::Constant => Self::Constant { c: vec![0.0; dim] },
            PolicyKind::Affine => Self::Affine {
                dim,
                pieces,
                a: vec![0.0; pieces * dim * dim],
                b: vec![0.0; pieces * dim],
            },
        }
    }

    pub fn validate(&self) -> Result<(), LaplaceError> {
        match self {
            Self::Constant { c } if c.is_empty() => Err(LaplaceError::InvalidPolicy("empty constant drift".into())),
            Self::Constant { c } if c.iter().any(|v| !v.is_finite()) => {
                Err(LaplaceError::InvalidPolicy("non-finite parameter".into()))
            }
            Self::Constant { .. } => Ok(()),
            Self::Affine { dim, pieces, a, b } => {
                if *dim == 0 || *pieces == 0 {
                    return Err(LaplaceError::InvalidPolicy("dim and pieces must be positive".into()));
                }
                if a.len() != pieces * dim * dim || b.len() != pieces * dim {
                    return Err(LaplaceError::InvalidPolicy(format!(
                        "affine policy needs {} matrix and {} offset entries",
                        pieces * dim * dim,
                        pieces * dim
                    )));
                }
                if a.iter().chain(b).any(|v| !v.is_finite()) {
                    return Err(LaplaceError::InvalidPolicy("non-finite parameter".into()));
                }
                Ok(())
            }
        }
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            Self::Constant { .. } => PolicyKind::Constant,
            Self::Affine { .. } => PolicyKind::Affine,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Constant { c } => c.len(),
            Self::Affine { dim, .. } => *dim,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::Constant { c } => c.clone(),
            Self::Affine { a, b, .. } => a.iter().chain(b).copied().collect(),
        }
    }

    pub fn with_params(&self, theta: &[f64]) -> Self {
        match self {
            Self::Constant { .. } => Self::Constant { c: theta.to_vec() },
            Self::Affine { dim, pieces, a, .. } => Self::Affine {
                dim: *dim,
                pieces: *pieces,
                a: theta[..a.len()].to_vec(),
                b: theta[a.len()..].to_vec(),
            },
        }
    }

    fn piece(pieces: usize, t: f64) -> usize {
        ((t * pieces as f64) as usize).min(pieces - 1)
    }

    pub fn evaluate(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Constant { c } => out.copy_from_slice(c),
            Self::Affine { dim, pieces, a, b } => {
                let d = *dim;
                let j = Self::piece(*pieces, t);
                let aj = &a[j * d * d..(j + 1) * d * d];
                for i in 0..d {
                    out[i] = b[j * d + i] + (0..d).map(|k| aj[i * d + k] * x[k]).sum::<f64>();
                }
            }
        }
    }

    /// Offset `b(t)` of the affine form (the constant itself for `Constant`).
    pub fn offset_at(&self, t: f64) -> Vec<f64> {
        match self {
            Self::Constant { c } => c.clone(),
            Self::Affine { dim, pieces, b, .. } => {
                let j = Self::piece(*pieces, t);
                b[j * dim..(j + 1) * dim].to_vec()
            }
        }
    }
}

fn check_dims(f: &TerminalFunctional, policy: &PolicyParams) -> Result<(), LaplaceError> {
    policy.validate()?;
    if f.dim() != policy.dim() {
        return Err(LaplaceError::DimensionMismatch {
            what: "policy",
            expected: f.dim(),
            found: policy.dim(),
        });
    }
    Ok(())
}

/// `E[f(X_1) - energy]` under the policy drift.
pub fn objective_estimate(
    f: &TerminalFunctional,
    policy: &PolicyParams,
    cfg: &SdeConfig,
) -> Result<Estimate, LaplaceError> {
    check_dims(f, policy)?;
    let batch = simulate(&DriftFunction::ParametricPolicy(policy.clone()), cfg)?;
    let vals: Vec<f64> = batch
        .terminal_points
        .iter()
        .zip(&batch.energy)
        .map(|(x, e)| f.value(x) - e)
        .collect();
    Ok(Estimate::from_samples(&vals, cfg.seed))
}

/// `log mean exp(f(Z))` over standard Gaussian draws, with a delta-method
/// standard error.
pub fn log_laplace_mc(f: &TerminalFunctional, n: usize, seed: u64) -> Result<Estimate, LaplaceError> {
    let d = f.dim();
    let mut rng = rng::stream(seed, 0);
    let mut z = vec![0.0; d];
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        rng::fill_normal(&mut rng, &mut z);
        let v = f.value(&z);
        if v > OVERFLOW_LIMIT {
            return Err(LaplaceError::OverflowRisk { value: v });
        }
        vals.push(v);
    }
    let shift = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = vals.iter().map(|v| (v - shift).exp()).collect();
    let mean = Estimate::from_samples(&w, seed);
    Ok(Estimate {
        value: shift + mean.value.ln(),
        std_error: mean.std_error / mean.value,
        n_samples: n,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityGap {
    pub log_laplace: Estimate,
    pub objective: Estimate,
    /// `log_laplace - objective`.
    pub gap: f64,
    pub std_error: f64,
}

impl DualityGap {
    /// The variational objective never exceeds the log-Laplace value.
    pub fn respects_lower_bound(&self) -> bool {
        self.gap >= -3.0 * self.std_error
    }
}

pub fn duality_gap(
    f: &TerminalFunctional,
    policy: &PolicyParams,
    cfg: &SdeConfig,
) -> Result<DualityGap, LaplaceError> {
    let objective = objective_estimate(f, policy, cfg)?;
    let log_laplace = log_laplace_mc(f, cfg.n_paths, rng::derive_seed(cfg.seed, &[0x1a91ace]))?;
    Ok(DualityGap {
        log_laplace,
        objective,
        gap: log_laplace.value - objective.value,
        std_error: combined_se(&[log_laplace.std_error, objective.std_error]),
    })
}

/// Objective and its pathwise gradient with respect to the policy parameters
/// (reverse-mode through the Euler scheme, same noise as [`objective_estimate`]).
pub fn objective_gradient(
    f: &TerminalFunctional,
    policy: &PolicyParams,
    cfg: &SdeConfig,
) -> Result<(Estimate, Vec<f64>), LaplaceError> {
    check_dims(f, policy)?;
    cfg.validate()?;
    let d = cfg.dim;
    if d != f.dim() {
        return Err(LaplaceError::DimensionMismatch {
            what: "SDE config",
            expected: f.dim(),
            found: d,
        });
    }
    let n_params = policy.params().len();
    let per_path: Vec<(f64, Vec<f64>)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| path_gradient(f, policy, cfg, p))
        .collect();
    let vals: Vec<f64> = per_path.iter().map(|(v, _)| *v).collect();
    let mut grad = vec![0.0; n_params];
    for (_, g) in &per_path {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g /= cfg.n_paths as f64);
    Ok((Estimate::from_samples(&vals, cfg.seed), grad))
}

fn path_gradient(f: &TerminalFunctional, policy: &PolicyParams, cfg: &SdeConfig, path: usize) -> (f64, Vec<f64>) {
    let d = cfg.dim;
    let n = cfg.n_steps;
    let dt = cfg.dt();
    let mut noise = NoiseStream::new(cfg.seed, path as u64, n, d, 1);
    let mut xs = vec![0.0; (n + 1) * d];
    let mut us = vec![0.0; n * d];
    let mut db = vec![0.0; d];
    let mut energy = 0.0;
    for k in 0..n {
        let (head, tail) = xs.split_at_mut((k + 1) * d);
        let x = &head[k * d..];
        let u = &mut us[k * d..(k + 1) * d];
        policy.evaluate(cfg.time(k), x, u);
        noise.next_increment(&mut db);
        energy += 0.5 * u.iter().map(|v| v * v).sum::<f64>() * dt;
        for i in 0..d {
            tail[i] = x[i] + u[i] * dt + db[i];
        }
    }
    let terminal = &xs[n * d..];
    let value = f.value(terminal) - energy;
    let mut lambda = f.gradient(terminal);
    let mut grad = vec![0.0; policy.params().len()];
    match policy {
        PolicyParams::Constant { c } => {
            // u does not depend on x, so the adjoint stays at grad f(X_1)
            for i in 0..d {
                grad[i] = lambda[i] - c[i];
            }
        }
        PolicyParams::Affine { pieces, a, .. } => {
            let a_len = a.len();
            let mut next = vec![0.0; d];
            for k in (0..n).rev() {
                let j = PolicyParams::piece(*pieces, cfg.time(k));
                let aj = &a[j * d * d..(j + 1) * d * d];
                let x = &xs[k * d..(k + 1) * d];
                let u = &us[k * d..(k + 1) * d];
                // r = dJ/du_k / dt = lambda_{k+1} - u_k
                let r: Vec<f64> = (0..d).map(|i| lambda[i] - u[i]).collect();
                for i in 0..d {
                    grad[a_len + j * d + i] += dt * r[i];
                    for m in 0..d {
                        grad[j * d * d + i * d + m] += dt * r[i] * x[m];
                    }
                }
                for m in 0..d {
                    next[m] = lambda[m] + dt * (0..d).map(|i| aj[i * d + m] * r[i]).sum::<f64>();
                }
                lambda.copy_from_slice(&next);
            }
        }
    }
    (value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub step_size: f64,
    /// Paths per gradient step.
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizeStatus {
    Improved,
    /// Final objective is not above the initial one by more than one SE.
    NoImprovement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub policy: PolicyParams,
    pub objective: Estimate,
    pub initial_objective: Estimate,
    pub status: OptimizeStatus,
    pub trace: Vec<TraceRow>,
}

/// Stochastic gradient ascent with fresh common noise per iteration.
///
/// Affine pieces are updated with their gradient scaled by the number of
/// pieces, i.e. per unit of time. The returned policy is the average of the
/// second half of the iterates, re-evaluated on `cfg.n_paths` fresh paths.
pub fn optimize_policy(
    f: &TerminalFunctional,
    kind: PolicyKind,
    pieces: usize,
    cfg: &SdeConfig,
    opt: &OptimizerConfig,
) -> Result<OptimizeResult, LaplaceError> {
    if opt.iterations == 0 || opt.batch < 2 || !(opt.step_size > 0.0) {
        return Err(LaplaceError::InvalidPolicy(
            "optimizer needs iterations >= 1, batch >= 2 and a positive step size".into(),
        ));
    }
    let start = PolicyParams::zero(kind, f.dim(), pieces.max(1));
    let scale = match kind {
        PolicyKind::Constant => 1.0,
        PolicyKind::Affine => pieces.max(1) as f64,
    };
    let mut theta = start.params();
    let mut avg = vec![0.0; theta.len()];
    let tail_start = opt.iterations / 2;
    let mut trace = Vec::with_capacity(opt.iterations);
    for it in 0..opt.iterations {
        let it_cfg = SdeConfig {
            n_paths: opt.batch,
            seed: rng::derive_seed(cfg.seed, &[it as u64]),
            ..*cfg
        };
        let (obj, grad) = objective_gradient(f, &start.with_params(&theta), &it_cfg)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(LaplaceError::NonFiniteGradient { iteration: it });
        }
        trace.push(TraceRow {
            iteration: it,
            objective: obj.value,
            std_error: obj.std_error,
        });
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t += opt.step_size * scale * g;
        }
        if it >= tail_start {
            for (a, t) in avg.iter_mut().zip(&theta) {
                *a += t;
            }
        }
    }
    let n_tail = (opt.iterations - tail_start) as f64;
    avg.iter_mut().for_each(|a| *a /= n_tail);
    let policy = start.with_params(&avg);
    let eval_cfg = SdeConfig {
        seed: rng::derive_seed(cfg.seed, &[u64::MAX]),
        ..*cfg
    };
    let objective = objective_estimate(f, &policy, &eval_cfg)?;
    let initial_objective = objective_estimate(f, &start, &eval_cfg)?;
    let status = if objective.value > initial_objective.value + objective.std_error {
        OptimizeStatus::Improved
    } else {
        OptimizeStatus::NoImprovement
    };
    Ok(OptimizeResult {
        policy,
        objective,
        initial_objective,
        status,
        trace,
    })
}

pub fn write_trace_csv<W: std::io::Write>(trace: &[TraceRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "iteration,objective,std_error")?;
    for r in trace {
        writeln!(w, "{},{},{}", r.iteration, r.objective, r.std_error)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear() -> TerminalFunctional {
        TerminalFunctional::new(&FunctionalSpec::Linear { a: vec![1.0, 0.0] }).unwrap()
    }

    #[test]
    fn quadratic_integrability_is_enforced() {
        let err = TerminalFunctional::new(&FunctionalSpec::Quadratic {
            q: vec![vec![0.9995]],
        })
        .unwrap_err();
        assert!(matches!(err, LaplaceError::QuadraticNotIntegrable { .. }));
        assert!(TerminalFunctional::new(&FunctionalSpec::Quadratic { q: vec![vec![0.5]] }).is_ok());
    }

    #[test]
    fn zero_functional_has_exact_log_laplace() {
        let f = TerminalFunctional::new(&FunctionalSpec::Quadratic { q: vec![vec![0.0]] }).unwrap();
        let e = log_laplace_mc(&f, 1000, 2).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn overflow_is_reported() {
        let f = TerminalFunctional::new(&FunctionalSpec::Linear { a: vec![400.0] }).unwrap();
        assert!(matches!(log_laplace_mc(&f, 1000, 0), Err(LaplaceError::OverflowRisk { .. })));
    }

    #[test]
    fn policy_dimension_is_checked() {
        let cfg = SdeConfig::new(8, 10, 0, 2);
        let p = PolicyParams::Constant { c: vec![1.0] };
        assert!(objective_estimate(&linear(), &p, &cfg).is_err());
    }

    #[test]
    fn affine_policy_evaluates_piecewise() {
        let p = PolicyParams::Affine {
            dim: 1,
            pieces: 2,
            a: vec![1.0, -1.0],
            b: vec![0.5, 0.25],
        };
        let mut out = [0.0];
        p.evaluate(0.2, &[2.0], &mut out);
        assert_eq!(out[0], 2.5);
        p.evaluate(0.7, &[2.0], &mut out);
        assert_eq!(out[0], -1.75);
        assert_eq!(p.offset_at(0.99), vec![0.25]);
    }

    #[test]
    fn gradient_objective_matches_simulation() {
        let f = TerminalFunctional::new(&FunctionalSpec::Quadratic {
            q: vec![vec![0.3, 0.1], vec![0.1, -0.2]],
        })
        .unwrap();
        let p = PolicyParams::Affine {
            dim: 2,
            pieces: 3,
            a: (0..12).map(|i| 0.05 * i as f64 - 0.3).collect(),
            b: (0..6).map(|i| 0.1 * i as f64).collect(),
        };
        let cfg = SdeConfig::new(12, 50, 9, 2);
        let (obj, _) = objective_gradient(&f, &p, &cfg).unwrap();
        let direct = objective_estimate(&f, &p, &cfg).unwrap();
        assert!((obj.value - direct.value).abs() < 1e-12);
    }
}
