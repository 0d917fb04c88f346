//! Relative entropy as the minimal drift energy `E[0.5 ||U||^2]` of the bridge
//! drift, with martingale and terminal-law diagnostics.

use serde::{Deserialize, Serialize};

use crate::estimate::{standardized, Estimate};
use crate::follmer::{mixture_drift_closed, DriftError, DriftFunction};
use crate::measure::{MeasureError, Mixture, MixtureSpec};
use crate::pathsim::{simulate, simulate_with, PathBatch, SdeConfig, SimError, SimOptions};

#[derive(Debug, thiserror::Error)]
pub enum EntropyError {
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub energy_estimate: Estimate,
    /// Only for single Gaussians.
    pub closed_form: Option<f64>,
    /// Max over grid nodes of the standardized deviation of the mean drift from
    /// the mean of the target.
    pub martingale_max_dev: f64,
    /// Max standardized deviation of terminal first and second moments.
    pub terminal_moment_dev: f64,
    /// Energy on the full grid minus energy on the half grid (shared noise).
    pub bias_proxy: Option<f64>,
    pub config: SdeConfig,
}

impl EntropyReport {
    /// `|energy - reference| <= 3 SE + |bias proxy|`.
    pub fn agrees_with(&self, reference: f64) -> bool {
        let allowance = self.bias_proxy.map_or(0.0, f64::abs);
        (self.energy_estimate.value - reference).abs() <= 3.0 * self.energy_estimate.std_error + allowance
    }
}

fn report_from_batch(mixture: &Mixture, batch: &PathBatch) -> EntropyReport {
    EntropyReport {
        energy_estimate: batch.energy_estimate(),
        closed_form: mixture.relative_entropy_closed().ok(),
        martingale_max_dev: martingale_diagnostic(batch, mixture),
        terminal_moment_dev: terminal_law_check(batch, mixture),
        bias_proxy: None,
        config: batch.config,
    }
}

/// Runs the closed-form bridge drift of `spec` and reports its mean energy.
pub fn estimate_entropy(spec: &MixtureSpec, cfg: &SdeConfig) -> Result<EntropyReport, EntropyError> {
    let mixture = Mixture::new(spec)?;
    let drift = mixture_drift_closed(spec)?;
    let batch = simulate(&drift, cfg)?;
    Ok(report_from_batch(&mixture, &batch))
}

/// As [`estimate_entropy`], plus a second run on the half-resolution grid
/// driven by the same Brownian paths; the energy difference is the bias proxy.
pub fn estimate_entropy_with_bias(spec: &MixtureSpec, cfg: &SdeConfig) -> Result<EntropyReport, EntropyError> {
    let (report, _, _) = entropy_runs(spec, cfg, &DriftOverride::None)?;
    Ok(report)
}

/// Optional fault injection for the report pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftOverride {
    None,
    Scale(f64),
}

/// Fine and coarse batches with the report built from the fine one.
pub fn entropy_runs(
    spec: &MixtureSpec,
    cfg: &SdeConfig,
    fault: &DriftOverride,
) -> Result<(EntropyReport, PathBatch, PathBatch), EntropyError> {
    entropy_runs_recorded(spec, cfg, fault, 0)
}

pub fn entropy_runs_recorded(
    spec: &MixtureSpec,
    cfg: &SdeConfig,
    fault: &DriftOverride,
    record_paths: usize,
) -> Result<(EntropyReport, PathBatch, PathBatch), EntropyError> {
    let mixture = Mixture::new(spec)?;
    let mut drift = mixture_drift_closed(spec)?;
    if let DriftOverride::Scale(factor) = fault {
        drift = DriftFunction::Scaled {
            inner: Box::new(drift),
            factor: *factor,
        };
    }
    let fine = simulate_with(
        &drift,
        cfg,
        &SimOptions {
            coarsen: 1,
            record_paths,
        },
    )?;
    let coarse_cfg = SdeConfig {
        n_steps: cfg.n_steps / 2,
        ..*cfg
    };
    let coarse = simulate_with(
        &drift,
        &coarse_cfg,
        &SimOptions {
            coarsen: 2,
            record_paths: 0,
        },
    )?;
    let mut report = report_from_batch(&mixture, &fine);
    report.bias_proxy = Some(fine.energy_estimate().value - coarse.energy_estimate().value);
    Ok((report, fine, coarse))
}

/// Standardized deviation of `E[u_t]` from the mean of the target at every node
/// (max over coordinates).
pub fn martingale_profile(batch: &PathBatch, mixture: &Mixture) -> Vec<f64> {
    let target = mixture.mean();
    batch
        .drift_means
        .iter()
        .zip(&batch.drift_std_errors)
        .map(|(m, se)| {
            m.iter()
                .zip(se)
                .zip(&target)
                .map(|((mi, si), ti)| standardized(mi - ti, *si))
                .fold(0.0, f64::max)
        })
        .collect()
}

pub fn martingale_diagnostic(batch: &PathBatch, mixture: &Mixture) -> f64 {
    martingale_profile(batch, mixture).into_iter().fold(0.0, f64::max)
}

/// Empirical terminal moment against its exact value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub coordinate: usize,
    /// 1 for the mean, 2 for the raw second moment.
    pub order: u8,
    pub empirical: Estimate,
    pub exact: f64,
}

impl MomentCheck {
    pub fn deviation(&self) -> f64 {
        self.empirical.z_score(self.exact)
    }
}

pub fn terminal_moments(batch: &PathBatch, mixture: &Mixture) -> Vec<MomentCheck> {
    let mean = mixture.mean();
    let second = mixture.second_moments();
    let seed = batch.config.seed;
    let mut out = Vec::new();
    for j in 0..batch.dim() {
        let xs: Vec<f64> = batch.terminal_points.iter().map(|x| x[j]).collect();
        let x2: Vec<f64> = xs.iter().map(|v| v * v).collect();
        out.push(MomentCheck {
            coordinate: j,
            order: 1,
            empirical: Estimate::from_samples(&xs, seed),
            exact: mean[j],
        });
        out.push(MomentCheck {
            coordinate: j,
            order: 2,
            empirical: Estimate::from_samples(&x2, seed),
            exact: second[j],
        });
    }
    out
}

pub fn terminal_law_check(batch: &PathBatch, mixture: &Mixture) -> f64 {
    terminal_moments(batch, mixture)
        .iter()
        .map(MomentCheck::deviation)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_target_is_exactly_zero() {
        let cfg = SdeConfig::new(32, 500, 3, 2);
        let r = estimate_entropy(&MixtureSpec::standard(2), &cfg).unwrap();
        assert_eq!(r.energy_estimate.value, 0.0);
        assert_eq!(r.energy_estimate.std_error, 0.0);
        assert_eq!(r.martingale_max_dev, 0.0);
        assert_eq!(r.closed_form, Some(0.0));
    }

    #[test]
    fn shifted_target_energy_is_half_squared_mean() {
        let cfg = SdeConfig::new(32, 500, 3, 2);
        let r = estimate_entropy(&MixtureSpec::isotropic(vec![1.0, 0.0], 1.0), &cfg).unwrap();
        assert!((r.energy_estimate.value - 0.5).abs() < 1e-12);
        assert_eq!(r.martingale_max_dev, 0.0);
        assert!(r.terminal_moment_dev < 4.0);
    }
}
