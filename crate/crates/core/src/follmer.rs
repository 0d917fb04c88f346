//! Föllmer drifts.
//!
//! For a mixture target `nu` with `rho = dnu/dgamma_d` the bridge drift is
//! `u_t(x) = grad log P_{1-t} rho (x)`. With `K = t Sigma + (1 - t) I` each
//! component contributes the log-weight
//!
//! ```text
//! l_k(t, x) = log w_k - log det K / 2 + x.m - t |m|^2 / 2
//!             - (x - t m)^T K^{-1} (I - Sigma) (x - t m) / 2
//! ```
//!
//! and `log P_{1-t} rho (x) = logsumexp_k l_k(t, x)` exactly. The gradient is the
//! responsibility-weighted sum of `K^{-1} ((Sigma - I) x + m)`. Both expressions
//! stay finite on the closed interval `[0, 1]` and reduce to `log rho` and the
//! score at `t = 1`.
//!
//! Path densities of class S get a Monte-Carlo Clark–Ocone drift instead.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::{ratio_estimate, Estimate};
use crate::laplace::PolicyParams;
use crate::measure::{log_sum_exp, softmax, Gaussian, MeasureError, Mixture, MixtureSpec};
use crate::rng;

/// Every drift in this crate lives on the time horizon `[0, 1]`.
pub const HORIZON: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DriftError {
    #[error("time {t} outside [0, 1)")]
    TimeOutOfRange { t: f64 },
    #[error("inner sample count {n} is below 2")]
    InnerSampleCountTooSmall { n: usize },
    #[error("Lipschitz probe needs two distinct points")]
    DegenerateProbe,
    #[error("state has dimension {found}, drift expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("path-dependent drift evaluated without a path history")]
    MissingPathHistory,
    #[error("invalid class-S density: {0}")]
    InvalidClassS(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

fn check_time(t: f64) -> Result<(), DriftError> {
    if (0.0..HORIZON).contains(&t) {
        Ok(())
    } else {
        Err(DriftError::TimeOutOfRange { t })
    }
}

/// Read-only view of a path sampled on a time grid, up to the current node.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    pub times: &'a [f64],
    /// Row-major, one row of length `dim` per entry of `times`.
    pub states: &'a [f64],
    pub dim: usize,
}

impl PathView<'_> {
    /// Path value at `t`, linearly interpolated between grid nodes.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let d = self.dim;
        let n = self.times.len();
        let row = |i: usize| &self.states[i * d..(i + 1) * d];
        if t <= self.times[0] {
            return row(0).to_vec();
        }
        if t >= self.times[n - 1] {
            return row(n - 1).to_vec();
        }
        let hi = self.times.partition_point(|&s| s < t);
        let lo = hi - 1;
        let w = (t - self.times[lo]) / (self.times[hi] - self.times[lo]);
        row(lo)
            .iter()
            .zip(row(hi))
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    pub fn current(&self) -> &[f64] {
        let n = self.times.len();
        &self.states[(n - 1) * self.dim..n * self.dim]
    }
}

/// Everything a drift may look at when evaluated inside a simulation.
#[derive(Debug, Clone, Copy)]
pub struct DriftInput<'a> {
    pub t: f64,
    /// Index of the grid node, used to derive inner seeds.
    pub step: usize,
    pub path_id: u64,
    pub x: &'a [f64],
    pub path: Option<PathView<'a>>,
}

/// Drift for a single Gaussian target `N(m, Sigma)`: affine in `x`,
/// `u_t(x) = K_t^{-1} ((Sigma - I) x + m)`.
#[derive(Debug, Clone)]
pub struct AffineGaussianDrift {
    gaussian: Gaussian,
    mean_eig: Vec<f64>,
    standard: bool,
}

impl AffineGaussianDrift {
    pub fn new(spec: &MixtureSpec) -> Result<Self, DriftError> {
        let mixture = Mixture::new(spec)?;
        let gaussian = mixture.single()?.clone();
        let mut mean_eig = vec![0.0; gaussian.dim()];
        gaussian.to_eigen(&gaussian.mean, &mut mean_eig);
        Ok(Self {
            standard: mixture.is_standard(),
            gaussian,
            mean_eig,
        })
    }

    pub fn dim(&self) -> usize {
        self.gaussian.dim()
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        if self.standard {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        component_drift(&self.gaussian, &self.mean_eig, t, x, out);
    }
}

/// `K^{-1} ((Sigma - I) x + m)` computed in the eigenbasis of `Sigma`.
fn component_drift(g: &Gaussian, mean_eig: &[f64], t: f64, x: &[f64], out: &mut [f64]) {
    let d = g.dim();
    let s = 1.0 - t;
    let mut c = vec![0.0; d];
    g.to_eigen(x, &mut c);
    for j in 0..d {
        let l = g.eigvals[j];
        c[j] = ((l - 1.0) * c[j] + mean_eig[j]) / (t * l + s);
    }
    g.from_eigen(&c, out);
}

/// Closed-form bridge drift for a Gaussian mixture target.
#[derive(Debug, Clone)]
pub struct MixtureDrift {
    mixture: Mixture,
    mean_eig: Vec<Vec<f64>>,
    mean_sq: Vec<f64>,
}

impl MixtureDrift {
    pub fn new(spec: &MixtureSpec) -> Result<Self, DriftError> {
        let mixture = Mixture::new(spec)?;
        let mean_eig = mixture
            .components()
            .iter()
            .map(|g| {
                let mut me = vec![0.0; g.dim()];
                g.to_eigen(&g.mean, &mut me);
                me
            })
            .collect();
        let mean_sq = mixture
            .components()
            .iter()
            .map(|g| g.mean.iter().map(|m| m * m).sum())
            .collect();
        Ok(Self {
            mixture,
            mean_eig,
            mean_sq,
        })
    }

    pub fn mixture(&self) -> &Mixture {
        &self.mixture
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn component_log_weights(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let s = 1.0 - t;
        let d = self.dim();
        let mut y = vec![0.0; d];
        for (k, g) in self.mixture.components().iter().enumerate() {
            let me = &self.mean_eig[k];
            g.to_eigen(x, &mut y);
            let xm: f64 = x.iter().zip(&g.mean).map(|(a, b)| a * b).sum();
            let mut log_det_k = 0.0;
            let mut quad = 0.0;
            for j in 0..d {
                let l = g.eigvals[j];
                let kj = t * l + s;
                let yj = y[j] - t * me[j];
                log_det_k += kj.ln();
                quad += yj * yj * (1.0 - l) / kj;
            }
            out[k] = self.mixture.log_weights()[k] - 0.5 * log_det_k + xm
                - 0.5 * t * self.mean_sq[k]
                - 0.5 * quad;
        }
    }

    /// `log P_{1-t} rho (x)` in closed form, for `t` in `[0, 1]`.
    pub fn log_heat(&self, t: f64, x: &[f64]) -> f64 {
        if self.mixture.is_standard() {
            return 0.0;
        }
        let mut lw = vec![0.0; self.mixture.components().len()];
        self.component_log_weights(t, x, &mut lw);
        log_sum_exp(&lw)
    }

    /// `grad log P_{1-t} rho (x)` for `t` in `[0, 1]`.
    pub fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        if self.mixture.is_standard() {
            return;
        }
        let comps = self.mixture.components();
        if comps.len() == 1 {
            component_drift(&comps[0], &self.mean_eig[0], t, x, out);
            return;
        }
        let mut lw = vec![0.0; comps.len()];
        self.component_log_weights(t, x, &mut lw);
        let mut resp = vec![0.0; comps.len()];
        softmax(&lw, &mut resp);
        let mut v = vec![0.0; self.dim()];
        for (k, g) in comps.iter().enumerate() {
            component_drift(g, &self.mean_eig[k], t, x, &mut v);
            for (o, vi) in out.iter_mut().zip(&v) {
                *o += resp[k] * vi;
            }
        }
    }
}

/// Parametric form of a class-S path density
/// `Phi(x_1..x_n) = (1 - floor) q(x) / g(x) + floor`,
/// where `q` is a Gaussian mixture over the stacked marginals and `g` is the
/// Wiener law of `(w_{t_1}, .., w_{t_n})`. `Phi` integrates to one under the
/// Wiener measure and is bounded below by `floor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSSpec {
    pub times: Vec<f64>,
    /// Dimension of each marginal.
    pub dim: usize,
    /// Mixture over the stacked positive-time marginals, dimension `n * dim`.
    pub phi: MixtureSpec,
    pub floor: f64,
}

#[derive(Debug, Clone)]
pub struct ClassSDensity {
    times: Vec<f64>,
    dim: usize,
    q: Mixture,
    wiener: Gaussian,
    floor: f64,
}

impl ClassSDensity {
    /// Validates the parametric form. A marginal at `t = 0` is constant (every
    /// path starts at the origin), so a leading zero time is dropped and `phi`
    /// must cover only the positive times.
    pub fn new(spec: &ClassSSpec) -> Result<Self, DriftError> {
        let bad = |m: &str| Err(DriftError::InvalidClassS(m.to_string()));
        let times: Vec<f64> = spec.times.iter().copied().filter(|&t| t != 0.0).collect();
        if times.is_empty() {
            return bad("needs at least one positive time");
        }
        if spec.times.windows(2).any(|w| w[0] >= w[1]) {
            return bad("times must be strictly increasing");
        }
        if spec.times[0] < 0.0 || *times.last().unwrap() > HORIZON {
            return bad("times must lie in [0, 1]");
        }
        if !(spec.floor > 0.0 && spec.floor < 1.0) {
            return bad("floor must lie in (0, 1)");
        }
        if spec.dim == 0 || spec.phi.dim != times.len() * spec.dim {
            return bad("phi dimension must equal (number of positive times) * dim");
        }
        let q = Mixture::new(&spec.phi)?;
        let n = times.len();
        let nd = n * spec.dim;
        let d = spec.dim;
        let cov = DMatrix::from_fn(nd, nd, |a, b| {
            if a % d == b % d {
                times[a / d].min(times[b / d])
            } else {
                0.0
            }
        });
        let rows: Vec<Vec<f64>> = (0..nd).map(|i| cov.row(i).iter().copied().collect()).collect();
        let wiener = Gaussian::new(&vec![0.0; nd], &rows, 0)?;
        Ok(Self {
            times,
            dim: spec.dim,
            q,
            wiener,
            floor: spec.floor,
        })
    }

    /// Bridge density `(1 - floor) rho(x_1) + floor` at the single time 1.
    pub fn bridge(target: &MixtureSpec, floor: f64) -> Result<Self, DriftError> {
        Self::new(&ClassSSpec {
            times: vec![1.0],
            dim: target.dim,
            phi: target.clone(),
            floor,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// `Phi` and its full gradient over the stacked variable.
    pub fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let log_ratio = self.q.log_density(x) - self.wiener.log_density(x);
        let ratio = (1.0 - self.floor) * log_ratio.exp();
        self.q.grad_log_density(x, grad);
        let mut gw = vec![0.0; x.len()];
        self.wiener.grad_log_density(x, &mut gw);
        for (g, w) in grad.iter_mut().zip(&gw) {
            *g = ratio * (*g - w);
        }
        ratio + self.floor
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let log_ratio = self.q.log_density(x) - self.wiener.log_density(x);
        (1.0 - self.floor) * log_ratio.exp() + self.floor
    }
}

/// Monte-Carlo Clark–Ocone drift of a class-S density:
/// `E[sum_{i: t_i >= t} grad_i Phi] / E[Phi]` conditionally on the path up to `t`.
#[derive(Debug, Clone)]
pub struct ClarkOconeDrift {
    density: ClassSDensity,
    n_inner: usize,
    master_seed: u64,
}

impl ClarkOconeDrift {
    pub fn new(density: ClassSDensity, n_inner: usize, master_seed: u64) -> Result<Self, DriftError> {
        if n_inner < 2 {
            return Err(DriftError::InnerSampleCountTooSmall { n: n_inner });
        }
        Ok(Self {
            density,
            n_inner,
            master_seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.density.dim
    }

    pub fn density(&self) -> &ClassSDensity {
        &self.density
    }

    /// Drift with a per-coordinate standard error. Inner draws come from a
    /// stream derived from `(master seed, step, path_id)` and are shared between
    /// numerator and denominator.
    pub fn evaluate_with_error(
        &self,
        t: f64,
        step: usize,
        path_id: u64,
        x: &[f64],
        past: Option<&PathView<'_>>,
    ) -> Result<Vec<Estimate>, DriftError> {
        check_time(t)?;
        let d = self.dim();
        if x.len() != d {
            return Err(DriftError::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
        let times = &self.density.times;
        let n = times.len();
        let first_future = times.partition_point(|&ti| ti < t);
        let seed = rng::derive_seed(self.master_seed, &[step as u64, path_id]);
        if first_future == n {
            return Ok(vec![Estimate::exact(0.0, self.n_inner, seed); d]);
        }
        let mut stacked = vec![0.0; n * d];
        for i in 0..first_future {
            let p = past.ok_or(DriftError::MissingPathHistory)?;
            let v = p.value_at(times[i]);
            stacked[i * d..(i + 1) * d].copy_from_slice(&v);
        }
        let mut rng = rng::stream(seed, 0);
        let mut z = vec![0.0; d];
        let mut grad = vec![0.0; n * d];
        let mut num = vec![vec![0.0; self.n_inner]; d];
        let mut den = vec![0.0; self.n_inner];
        for j in 0..self.n_inner {
            let mut prev_t = t;
            let mut prev: Vec<f64> = x.to_vec();
            for i in first_future..n {
                let dt = times[i] - prev_t;
                rng::fill_normal(&mut rng, &mut z);
                for c in 0..d {
                    prev[c] += dt.sqrt() * z[c];
                }
                stacked[i * d..(i + 1) * d].copy_from_slice(&prev);
                prev_t = times[i];
            }
            den[j] = self.density.value_and_gradient(&stacked, &mut grad);
            for c in 0..d {
                num[c][j] = (first_future..n).map(|i| grad[i * d + c]).sum();
            }
        }
        Ok(num.iter().map(|nc| ratio_estimate(nc, &den, seed)).collect())
    }
}

/// A time-indexed vector field on `[0, 1) x R^d`.
#[derive(Debug, Clone)]
pub enum DriftFunction {
    Zero { dim: usize },
    AffineGaussian(AffineGaussianDrift),
    MixtureClosedForm(MixtureDrift),
    ClarkOconeMc(ClarkOconeDrift),
    ParametricPolicy(PolicyParams),
    /// A drift multiplied by a constant. Only used to inject deliberate faults.
    Scaled { inner: Box<DriftFunction>, factor: f64 },
}

impl DriftFunction {
    pub fn dim(&self) -> usize {
        match self {
            Self::Zero { dim } => *dim,
            Self::AffineGaussian(a) => a.dim(),
            Self::MixtureClosedForm(m) => m.dim(),
            Self::ClarkOconeMc(c) => c.dim(),
            Self::ParametricPolicy(p) => p.dim(),
            Self::Scaled { inner, .. } => inner.dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Zero { .. } => "zero",
            Self::AffineGaussian(_) => "affine_gaussian",
            Self::MixtureClosedForm(_) => "mixture_closed_form",
            Self::ClarkOconeMc(_) => "clark_ocone_mc",
            Self::ParametricPolicy(_) => "parametric_policy",
            Self::Scaled { .. } => "scaled",
        }
    }

    pub fn needs_history(&self) -> bool {
        match self {
            Self::ClarkOconeMc(_) => true,
            Self::Scaled { inner, .. } => inner.needs_history(),
            _ => false,
        }
    }

    /// Evaluates a Markov drift at `(t, x)`.
    pub fn evaluate(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), DriftError> {
        self.evaluate_input(
            &DriftInput {
                t,
                step: 0,
                path_id: 0,
                x,
                path: None,
            },
            out,
        )
    }

    pub fn evaluate_input(&self, input: &DriftInput<'_>, out: &mut [f64]) -> Result<(), DriftError> {
        check_time(input.t)?;
        let d = self.dim();
        if input.x.len() != d || out.len() != d {
            return Err(DriftError::DimensionMismatch {
                expected: d,
                found: input.x.len(),
            });
        }
        match self {
            Self::Zero { .. } => out.iter_mut().for_each(|o| *o = 0.0),
            Self::AffineGaussian(a) => a.eval(input.t, input.x, out),
            Self::MixtureClosedForm(m) => m.gradient(input.t, input.x, out),
            Self::ClarkOconeMc(c) => {
                let est = c.evaluate_with_error(
                    input.t,
                    input.step,
                    input.path_id,
                    input.x,
                    input.path.as_ref(),
                )?;
                for (o, e) in out.iter_mut().zip(est) {
                    *o = e.value;
                }
            }
            Self::ParametricPolicy(p) => p.evaluate(input.t, input.x, out),
            Self::Scaled { inner, factor } => {
                inner.evaluate_input(input, out)?;
                out.iter_mut().for_each(|o| *o *= factor);
            }
        }
        Ok(())
    }
}

/// Closed-form Föllmer drift of a mixture target.
pub fn mixture_drift_closed(spec: &MixtureSpec) -> Result<DriftFunction, DriftError> {
    Ok(DriftFunction::MixtureClosedForm(MixtureDrift::new(spec)?))
}

pub fn affine_gaussian_drift(spec: &MixtureSpec) -> Result<DriftFunction, DriftError> {
    Ok(DriftFunction::AffineGaussian(AffineGaussianDrift::new(spec)?))
}

pub fn clark_ocone_drift_mc(
    density: ClassSDensity,
    n_inner: usize,
    master_seed: u64,
) -> Result<DriftFunction, DriftError> {
    Ok(DriftFunction::ClarkOconeMc(ClarkOconeDrift::new(
        density,
        n_inner,
        master_seed,
    )?))
}

/// `P_s rho (x) = E[rho(x + sqrt(s) Z)]` by Monte Carlo; exact at `s = 0`.
pub fn heat_apply_mc(mixture: &Mixture, s: f64, x: &[f64], n: usize, seed: u64) -> Estimate {
    assert!(s >= 0.0, "heat semigroup time must be nonnegative");
    if s == 0.0 {
        return Estimate::exact(mixture.log_relative_density(x).exp(), n, seed);
    }
    let d = mixture.dim();
    let mut rng = rng::stream(seed, 0);
    let mut z = vec![0.0; d];
    let mut y = vec![0.0; d];
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            rng::fill_normal(&mut rng, &mut z);
            for i in 0..d {
                y[i] = x[i] + s.sqrt() * z[i];
            }
            mixture.log_relative_density(&y).exp()
        })
        .collect();
    Estimate::from_samples(&vals, seed)
}

/// `|u_t(x) - u_t(y)| / |x - y|` for a Markov drift.
pub fn drift_lipschitz_probe(drift: &DriftFunction, t: f64, x: &[f64], y: &[f64]) -> Result<f64, DriftError> {
    let dist: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if dist == 0.0 {
        return Err(DriftError::DegenerateProbe);
    }
    let d = drift.dim();
    let mut ux = vec![0.0; d];
    let mut uy = vec![0.0; d];
    drift.evaluate(t, x, &mut ux)?;
    drift.evaluate(t, y, &mut uy)?;
    let du: f64 = ux.iter().zip(&uy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(du / dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::ComponentSpec;

    fn eval(drift: &DriftFunction, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        drift.evaluate(t, x, &mut out).unwrap();
        out
    }

    fn bumps() -> MixtureSpec {
        MixtureSpec {
            dim: 2,
            components: vec![
                ComponentSpec {
                    weight: 0.3,
                    mean: vec![1.5, -0.5],
                    cov: vec![vec![0.6, 0.2], vec![0.2, 0.9]],
                },
                ComponentSpec {
                    weight: 0.7,
                    mean: vec![-1.0, 0.5],
                    cov: vec![vec![1.3, -0.1], vec![-0.1, 0.7]],
                },
            ],
        }
    }

    #[test]
    fn standard_target_has_zero_drift() {
        let drift = mixture_drift_closed(&MixtureSpec::standard(3)).unwrap();
        for t in [0.0, 0.4, 0.999] {
            assert_eq!(eval(&drift, t, &[1.0, -2.0, 0.5]), vec![0.0; 3]);
        }
    }

    #[test]
    fn isotropic_gaussian_matches_candidate_formula() {
        let m = [0.7, -0.3];
        let var = 0.5;
        let drift = mixture_drift_closed(&MixtureSpec::isotropic(m.to_vec(), var)).unwrap();
        for (t, x) in [(0.0, [1.0, 2.0]), (0.5, [-0.4, 0.1]), (0.9, [3.0, -1.0])] {
            let u = eval(&drift, t, &x);
            for i in 0..2 {
                let expected = ((var - 1.0) * x[i] + m[i]) / (1.0 + (var - 1.0) * t);
                assert!((u[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_covariance_gives_constant_drift() {
        let drift = mixture_drift_closed(&MixtureSpec::isotropic(vec![1.0, 0.0], 1.0)).unwrap();
        for t in [0.0, 0.3, 0.99] {
            let u = eval(&drift, t, &[5.0, -7.0]);
            assert!((u[0] - 1.0).abs() < 1e-14 && u[1].abs() < 1e-14);
        }
    }

    #[test]
    fn log_heat_endpoints() {
        let md = MixtureDrift::new(&bumps()).unwrap();
        let mix = Mixture::new(&bumps()).unwrap();
        let x = [0.3, -1.1];
        // t = 1: P_0 rho = rho
        assert!((md.log_heat(1.0, &x) - mix.log_relative_density(&x)).abs() < 1e-12);
        // t = 0: P_1 rho (x) = E_nu exp(x.y - |x|^2 / 2)
        let mut direct = 0.0;
        for c in &bumps().components {
            let xm = x[0] * c.mean[0] + x[1] * c.mean[1];
            let xsx: f64 = (0..2).map(|i| (0..2).map(|j| x[i] * c.cov[i][j] * x[j]).sum::<f64>()).sum();
            direct += c.weight * (xm + 0.5 * xsx - 0.5 * (x[0] * x[0] + x[1] * x[1])).exp();
        }
        assert!((md.log_heat(0.0, &x) - direct.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences_of_log_heat() {
        let md = MixtureDrift::new(&bumps()).unwrap();
        let h = 1e-5;
        for (t, x) in [(0.0, [0.2, 0.1]), (0.35, [-1.2, 0.8]), (0.97, [2.0, -0.4])] {
            let mut g = vec![0.0; 2];
            md.gradient(t, &x, &mut g);
            for i in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (md.log_heat(t, &xp) - md.log_heat(t, &xm)) / (2.0 * h);
                assert!((g[i] - fd).abs() < 1e-7 * (1.0 + fd.abs()), "t={t} i={i}");
            }
        }
    }

    #[test]
    fn drift_tends_to_score_at_terminal_time() {
        let md = MixtureDrift::new(&bumps()).unwrap();
        let mix = Mixture::new(&bumps()).unwrap();
        for x in [[0.0, 0.0], [1.0, -2.0], [-2.5, 1.5]] {
            let mut g = vec![0.0; 2];
            md.gradient(1.0 - 1e-6, &x, &mut g);
            let s = mix.score(&x);
            for i in 0..2 {
                assert!((g[i] - s[i]).abs() <= 1e-4 * s[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn time_one_is_rejected() {
        let drift = mixture_drift_closed(&bumps()).unwrap();
        let mut out = vec![0.0; 2];
        assert_eq!(
            drift.evaluate(1.0, &[0.0, 0.0], &mut out),
            Err(DriftError::TimeOutOfRange { t: 1.0 })
        );
        assert!(drift.evaluate(-0.1, &[0.0, 0.0], &mut out).is_err());
    }

    #[test]
    fn heat_at_time_zero_is_exact_density() {
        let mix = Mixture::new(&bumps()).unwrap();
        let e = heat_apply_mc(&mix, 0.0, &[0.4, 0.2], 10, 1);
        assert_eq!(e.std_error, 0.0);
        assert_eq!(e.value, mix.log_relative_density(&[0.4, 0.2]).exp());
        let std = Mixture::new(&MixtureSpec::standard(2)).unwrap();
        let e = heat_apply_mc(&std, 0.7, &[3.0, 1.0], 100, 1);
        assert_eq!((e.value, e.std_error), (1.0, 0.0));
    }

    #[test]
    fn lipschitz_probe_values() {
        let zero = DriftFunction::Zero { dim: 2 };
        assert_eq!(drift_lipschitz_probe(&zero, 0.5, &[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        let affine = affine_gaussian_drift(&MixtureSpec::isotropic(vec![0.0, 0.0], 0.5)).unwrap();
        let r = drift_lipschitz_probe(&affine, 0.0, &[0.3, -1.0], &[2.0, 0.5]).unwrap();
        assert!((r - 0.5).abs() < 1e-14);
        assert_eq!(
            drift_lipschitz_probe(&affine, 0.0, &[1.0, 1.0], &[1.0, 1.0]),
            Err(DriftError::DegenerateProbe)
        );
    }

    #[test]
    fn clark_ocone_constant_density_has_zero_drift() {
        // q = Wiener law of w_1 itself, so Phi == 1
        let density = ClassSDensity::bridge(&MixtureSpec::standard(2), 0.2).unwrap();
        let drift = ClarkOconeDrift::new(density, 50, 3).unwrap();
        let est = drift.evaluate_with_error(0.3, 1, 0, &[0.5, -0.5], None).unwrap();
        for e in est {
            assert!(e.value.abs() < 1e-12);
        }
    }

    #[test]
    fn clark_ocone_vanishes_after_last_time() {
        let d = 1;
        let spec = ClassSSpec {
            times: vec![0.25, 0.5],
            dim: d,
            phi: MixtureSpec::gaussian(vec![0.3, 0.8], vec![vec![0.4, 0.3], vec![0.3, 0.6]]),
            floor: 0.1,
        };
        let density = ClassSDensity::new(&spec).unwrap();
        let drift = ClarkOconeDrift::new(density, 10, 1).unwrap();
        let times = [0.0, 0.5, 0.6];
        let states = [0.0, 0.4, 0.7];
        let view = PathView {
            times: &times,
            states: &states,
            dim: 1,
        };
        let est = drift.evaluate_with_error(0.6, 2, 0, &[0.7], Some(&view)).unwrap();
        assert_eq!(est[0].value, 0.0);
        assert_eq!(est[0].std_error, 0.0);
    }

    #[test]
    fn clark_ocone_rejects_small_inner_count() {
        let density = ClassSDensity::bridge(&MixtureSpec::standard(1), 0.1).unwrap();
        assert_eq!(
            ClarkOconeDrift::new(density, 1, 0).unwrap_err(),
            DriftError::InnerSampleCountTooSmall { n: 1 }
        );
    }

    #[test]
    fn class_s_drops_zero_time() {
        let spec = ClassSSpec {
            times: vec![0.0, 1.0],
            dim: 1,
            phi: MixtureSpec::isotropic(vec![0.5], 1.0),
            floor: 0.05,
        };
        let density = ClassSDensity::new(&spec).unwrap();
        assert_eq!(density.times(), &[1.0]);
    }

    #[test]
    fn class_s_validation_errors() {
        let base = ClassSSpec {
            times: vec![0.5, 1.0],
            dim: 1,
            phi: MixtureSpec::isotropic(vec![0.0, 0.0], 1.0),
            floor: 0.1,
        };
        let mut s = base.clone();
        s.times = vec![0.5, 0.5];
        assert!(ClassSDensity::new(&s).is_err());
        let mut s = base.clone();
        s.floor = 0.0;
        assert!(ClassSDensity::new(&s).is_err());
        let mut s = base.clone();
        s.times = vec![0.5, 1.5];
        assert!(ClassSDensity::new(&s).is_err());
        let mut s = base;
        s.phi = MixtureSpec::standard(3);
        assert!(ClassSDensity::new(&s).is_err());
    }

    #[test]
    fn class_s_density_respects_floor() {
        let density = ClassSDensity::bridge(&MixtureSpec::isotropic(vec![3.0], 0.3), 0.05).unwrap();
        for x in [-50.0, -3.0, 0.0, 3.0, 50.0] {
            assert!(density.value(&[x]) >= 0.05);
        }
    }
}
