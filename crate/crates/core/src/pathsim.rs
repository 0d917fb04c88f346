//! Euler–Maruyama simulation of `X_t = B_t + int_0^t u_s(X) ds` on `[0, 1]`.
//!
//! The drift is evaluated at the left endpoint of every step, never at `t = 1`.
//! Path `i` draws its Brownian increments from stream `i` of the batch seed, and
//! per-node statistics are reduced over fixed-size blocks in index order, so a
//! batch is bit-identical under any thread count.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::Estimate;
use crate::follmer::{DriftError, DriftFunction, DriftInput, PathView};
use crate::rng::{self, StreamRng};

const BLOCK: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid SDE configuration: {0}")]
    InvalidConfig(String),
    #[error("drift evaluation failed on path {path} at step {step}: {source}")]
    DriftEvaluationFailure {
        path: usize,
        step: usize,
        source: DriftError,
    },
    #[error("non-finite state on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },
}

/// Uniform grid `t_k = k / n_steps` with `n_paths` independent paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdeConfig {
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub dim: usize,
}

impl SdeConfig {
    pub const DEFAULT_STEPS: usize = 512;
    pub const DEFAULT_PATHS: usize = 20_000;

    pub fn new(n_steps: usize, n_paths: usize, seed: u64, dim: usize) -> Self {
        Self {
            n_steps,
            n_paths,
            seed,
            dim,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_steps < 2 {
            return Err(SimError::InvalidConfig(format!(
                "n_steps must be at least 2, got {}",
                self.n_steps
            )));
        }
        if self.n_paths < 2 {
            return Err(SimError::InvalidConfig(format!(
                "n_paths must be at least 2, got {}",
                self.n_paths
            )));
        }
        if self.dim == 0 {
            return Err(SimError::InvalidConfig("dim must be positive".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.n_steps as f64
    }
}

/// Brownian increments of one path.
///
/// With `coarsen = c` each increment is the sum of `c` consecutive increments
/// of the fine grid with `n_steps * c` steps, so a coarse path and a fine path
/// with the same stream coincide at the coarse nodes.
pub struct NoiseStream {
    rng: StreamRng,
    sqrt_dt_fine: f64,
    coarsen: usize,
    z: Vec<f64>,
}

impl NoiseStream {
    pub fn new(seed: u64, path_id: u64, fine_steps: usize, dim: usize, coarsen: usize) -> Self {
        Self {
            rng: rng::stream(seed, path_id),
            sqrt_dt_fine: (1.0 / fine_steps as f64).sqrt(),
            coarsen,
            z: vec![0.0; dim],
        }
    }

    pub fn next_increment(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for _ in 0..self.coarsen {
            rng::fill_normal(&mut self.rng, &mut self.z);
            for (o, z) in out.iter_mut().zip(&self.z) {
                *o += self.sqrt_dt_fine * z;
            }
        }
    }
}

/// Recorded trajectory for the optional path dump.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub path_id: usize,
    /// `(n_steps + 1) x dim`, row-major.
    pub states: Vec<f64>,
    /// `n_steps x dim`, row-major.
    pub drifts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub config: SdeConfig,
    pub terminal_points: Vec<Vec<f64>>,
    pub brownian_endpoints: Vec<Vec<f64>>,
    /// `0.5 * sum_k |u_k|^2 dt` per path.
    pub energy: Vec<f64>,
    /// `-sum_k u_k . dB_k - 0.5 * sum_k |u_k|^2 dt` per path.
    pub girsanov_logweight: Vec<f64>,
    /// Mean drift over paths at each of the `n_steps` evaluation nodes.
    pub drift_means: Vec<Vec<f64>>,
    /// Standard error of each entry of `drift_means`.
    pub drift_std_errors: Vec<Vec<f64>>,
    pub trajectories: Vec<Trajectory>,
}

impl PathBatch {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn energy_estimate(&self) -> Estimate {
        Estimate::from_samples(&self.energy, self.config.seed)
    }
}

/// Extra knobs that are not part of the public configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    /// Sum this many fine increments per step (the fine grid has
    /// `n_steps * coarsen` steps).
    pub coarsen: usize,
    /// Record full trajectories of paths `0..record_paths`.
    pub record_paths: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            coarsen: 1,
            record_paths: 0,
        }
    }
}

struct PathResult {
    terminal: Vec<f64>,
    brownian: Vec<f64>,
    energy: f64,
    logweight: f64,
    trajectory: Option<Trajectory>,
}

/// Running per-node mean and sum of squared deviations.
#[derive(Clone)]
struct NodeStats {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl NodeStats {
    fn new(len: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, values: &[f64]) {
        self.count += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(values) {
            let delta = v - *m;
            *m += delta / self.count;
            *s += delta * (v - *m);
        }
    }

    fn merge(&mut self, other: &NodeStats) {
        if other.count == 0.0 {
            return;
        }
        let n = self.count + other.count;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * other.count / n;
            self.m2[i] += other.m2[i] + delta * delta * self.count * other.count / n;
        }
        self.count = n;
    }
}

fn simulate_path(
    drift: &DriftFunction,
    cfg: &SdeConfig,
    opts: &SimOptions,
    times: &[f64],
    path: usize,
    node_drifts: &mut [f64],
) -> Result<PathResult, SimError> {
    let d = cfg.dim;
    let dt = cfg.dt();
    let mut noise = NoiseStream::new(cfg.seed, path as u64, cfg.n_steps * opts.coarsen, d, opts.coarsen);
    let keep_history = drift.needs_history() || path < opts.record_paths;
    let mut history: Vec<f64> = if keep_history {
        Vec::with_capacity((cfg.n_steps + 1) * d)
    } else {
        Vec::new()
    };
    let mut x = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut db = vec![0.0; d];
    let mut energy = 0.0;
    let mut logweight = 0.0;
    if keep_history {
        history.extend_from_slice(&x);
    }
    for k in 0..cfg.n_steps {
        let view = if drift.needs_history() {
            Some(PathView {
                times: &times[..=k],
                states: &history,
                dim: d,
            })
        } else {
            None
        };
        let input = DriftInput {
            t: times[k],
            step: k,
            path_id: path as u64,
            x: &x,
            path: view,
        };
        drift
            .evaluate_input(&input, &mut u)
            .map_err(|source| SimError::DriftEvaluationFailure {
                path,
                step: k,
                source,
            })?;
        noise.next_increment(&mut db);
        let u2: f64 = u.iter().map(|v| v * v).sum();
        let u_db: f64 = u.iter().zip(&db).map(|(a, c)| a * c).sum();
        energy += 0.5 * u2 * dt;
        logweight += -u_db - 0.5 * u2 * dt;
        for i in 0..d {
            x[i] = x[i] + u[i] * dt + db[i];
            b[i] += db[i];
        }
        if x.iter().any(|v| !v.is_finite()) || !energy.is_finite() || !logweight.is_finite() {
            return Err(SimError::NonFiniteState { path, step: k + 1 });
        }
        node_drifts[k * d..(k + 1) * d].copy_from_slice(&u);
        if keep_history {
            history.extend_from_slice(&x);
        }
    }
    let trajectory = (path < opts.record_paths).then(|| Trajectory {
        path_id: path,
        states: history.clone(),
        drifts: node_drifts.to_vec(),
    });
    Ok(PathResult {
        terminal: x,
        brownian: b,
        energy,
        logweight,
        trajectory,
    })
}

pub fn simulate(drift: &DriftFunction, cfg: &SdeConfig) -> Result<PathBatch, SimError> {
    simulate_with(drift, cfg, &SimOptions::default())
}

pub fn simulate_with(drift: &DriftFunction, cfg: &SdeConfig, opts: &SimOptions) -> Result<PathBatch, SimError> {
    cfg.validate()?;
    if opts.coarsen == 0 {
        return Err(SimError::InvalidConfig("coarsen must be positive".into()));
    }
    if drift.dim() != cfg.dim {
        return Err(SimError::InvalidConfig(format!(
            "drift dimension {} does not match config dimension {}",
            drift.dim(),
            cfg.dim
        )));
    }
    let d = cfg.dim;
    let times: Vec<f64> = (0..=cfg.n_steps).map(|k| cfg.time(k)).collect();
    let n_blocks = cfg.n_paths.div_ceil(BLOCK);
    let blocks: Vec<Result<(Vec<PathResult>, NodeStats), SimError>> = (0..n_blocks)
        .into_par_iter()
        .map(|blk| {
            let start = blk * BLOCK;
            let end = (start + BLOCK).min(cfg.n_paths);
            let mut stats = NodeStats::new(cfg.n_steps * d);
            let mut node_drifts = vec![0.0; cfg.n_steps * d];
            let mut out = Vec::with_capacity(end - start);
            for p in start..end {
                out.push(simulate_path(drift, cfg, opts, &times, p, &mut node_drifts)?);
                stats.push(&node_drifts);
            }
            Ok((out, stats))
        })
        .collect();

    let mut stats = NodeStats::new(cfg.n_steps * d);
    let mut batch = PathBatch {
        config: *cfg,
        terminal_points: Vec::with_capacity(cfg.n_paths),
        brownian_endpoints: Vec::with_capacity(cfg.n_paths),
        energy: Vec::with_capacity(cfg.n_paths),
        girsanov_logweight: Vec::with_capacity(cfg.n_paths),
        drift_means: Vec::new(),
        drift_std_errors: Vec::new(),
        trajectories: Vec::new(),
    };
    for blk in blocks {
        let (paths, s) = blk?;
        stats.merge(&s);
        for p in paths {
            batch.terminal_points.push(p.terminal);
            batch.brownian_endpoints.push(p.brownian);
            batch.energy.push(p.energy);
            batch.girsanov_logweight.push(p.logweight);
            if let Some(t) = p.trajectory {
                batch.trajectories.push(t);
            }
        }
    }
    let n = cfg.n_paths as f64;
    for k in 0..cfg.n_steps {
        let row = k * d..(k + 1) * d;
        batch.drift_means.push(stats.mean[row.clone()].to_vec());
        batch.drift_std_errors.push(
            stats.m2[row]
                .iter()
                .map(|m2| (m2.max(0.0) / (n - 1.0)).sqrt() / n.sqrt())
                .collect(),
        );
    }
    Ok(batch)
}

/// Weighted mean of `exp(logweight) * g(X_1)`: an estimate of `E[g(B_1)]`
/// under the Wiener measure, whatever the drift.
pub fn girsanov_reweight<G: Fn(&[f64]) -> f64>(batch: &PathBatch, g: G) -> Estimate {
    let vals: Vec<f64> = batch
        .terminal_points
        .iter()
        .zip(&batch.girsanov_logweight)
        .map(|(x, lw)| lw.exp() * g(x))
        .collect();
    Estimate::from_samples(&vals, batch.config.seed)
}

/// Endpoints of driftless paths, identical to `simulate(Zero, cfg).terminal_points`.
pub fn brownian_endpoints(cfg: &SdeConfig) -> Result<Vec<Vec<f64>>, SimError> {
    cfg.validate()?;
    let d = cfg.dim;
    Ok((0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut noise = NoiseStream::new(cfg.seed, p as u64, cfg.n_steps, d, 1);
            let mut b = vec![0.0; d];
            let mut db = vec![0.0; d];
            for _ in 0..cfg.n_steps {
                noise.next_increment(&mut db);
                for i in 0..d {
                    b[i] += db[i];
                }
            }
            b
        })
        .collect())
}

/// CSV dump with columns `path_id, step, t, x_1..x_d, u_1..u_d`. The terminal
/// node has no drift evaluation and leaves the `u` columns empty.
pub fn write_paths_csv<W: Write>(batch: &PathBatch, mut w: W) -> std::io::Result<()> {
    let d = batch.dim();
    let cfg = &batch.config;
    let mut header = vec!["path_id".to_string(), "step".into(), "t".into()];
    header.extend((1..=d).map(|i| format!("x_{i}")));
    header.extend((1..=d).map(|i| format!("u_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for tr in &batch.trajectories {
        for k in 0..=cfg.n_steps {
            let mut row = vec![tr.path_id.to_string(), k.to_string(), cfg.time(k).to_string()];
            row.extend(tr.states[k * d..(k + 1) * d].iter().map(|v| v.to_string()));
            if k < cfg.n_steps {
                row.extend(tr.drifts[k * d..(k + 1) * d].iter().map(|v| v.to_string()));
            } else {
                row.extend(std::iter::repeat_n(String::new(), d));
            }
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}
