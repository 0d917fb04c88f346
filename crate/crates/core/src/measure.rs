//! Gaussian-mixture target laws on R^d and their divergence functionals.
//!
//! A mixture is specified by Lebesgue-density parameters. The density with
//! respect to the standard Gaussian, `rho = dnu/dgamma_d`, is always derived on
//! the fly in log space and never stored.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::Estimate;
use crate::rng;

pub const WEIGHT_SUM_TOL: f64 = 1e-12;
pub const MIN_COV_EIGENVALUE: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeasureError {
    #[error("mixture has dimension 0")]
    ZeroDimension,
    #[error("mixture has no components")]
    NoComponents,
    #[error("component {component}: weight {weight} is not strictly positive")]
    NonPositiveWeight { component: usize, weight: f64 },
    #[error("weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOL:e}")]
    WeightsNotNormalized { sum: f64 },
    #[error("component {component}: covariance is not symmetric positive definite (smallest eigenvalue {min_eigenvalue})")]
    CovNotPD { component: usize, min_eigenvalue: f64 },
    #[error("component {component}: {what} has size {found}, expected {expected}")]
    DimensionMismatch {
        component: usize,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("operation needs a single Gaussian, mixture has {components} components")]
    NotSingleGaussian { components: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// Finite Gaussian mixture on R^d given by weights, means and covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub dim: usize,
    pub components: Vec<ComponentSpec>,
}

impl MixtureSpec {
    pub fn standard(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], identity_rows(dim, 1.0))
    }

    pub fn gaussian(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Self {
        Self {
            dim: mean.len(),
            components: vec![ComponentSpec {
                weight: 1.0,
                mean,
                cov,
            }],
        }
    }

    /// `N(mean, variance * I)`.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Self {
        let d = mean.len();
        Self::gaussian(mean, identity_rows(d, variance))
    }

    /// Returns the spec unchanged when every invariant holds.
    pub fn validate(self) -> Result<Self, MeasureError> {
        Mixture::new(&self)?;
        Ok(self)
    }
}

pub(crate) fn identity_rows(dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..dim)
        .map(|i| (0..dim).map(|j| if i == j { scale } else { 0.0 }).collect())
        .collect()
}

/// A Gaussian factored through the eigendecomposition of its covariance.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    /// Row-major `d x d`; column `j` is the `j`-th unit eigenvector.
    pub eigvecs: Vec<f64>,
    pub eigvals: Vec<f64>,
    pub log_det: f64,
    pub cov: Vec<f64>,
}

impl Gaussian {
    pub fn new(mean: &[f64], cov: &[Vec<f64>], component: usize) -> Result<Self, MeasureError> {
        let d = mean.len();
        if cov.len() != d {
            return Err(MeasureError::DimensionMismatch {
                component,
                what: "covariance",
                expected: d,
                found: cov.len(),
            });
        }
        for row in cov {
            if row.len() != d {
                return Err(MeasureError::DimensionMismatch {
                    component,
                    what: "covariance row",
                    expected: d,
                    found: row.len(),
                });
            }
        }
        let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
        let scale = m.amax().max(1.0);
        let asym = (&m - m.transpose()).amax();
        let not_finite = m.iter().any(|v| !v.is_finite()) || mean.iter().any(|v| !v.is_finite());
        if not_finite || asym > SYMMETRY_TOL * scale {
            return Err(MeasureError::CovNotPD {
                component,
                min_eigenvalue: f64::NAN,
            });
        }
        let eig = SymmetricEigen::new(m.clone());
        let min_eig = eig.eigenvalues.min();
        if min_eig <= MIN_COV_EIGENVALUE {
            return Err(MeasureError::CovNotPD {
                component,
                min_eigenvalue: min_eig,
            });
        }
        let eigvecs = DMatrix::from_fn(d, d, |i, j| eig.eigenvectors[(i, j)]);
        Ok(Self {
            mean: mean.to_vec(),
            eigvecs: row_major(&eigvecs),
            eigvals: eig.eigenvalues.iter().copied().collect(),
            log_det: eig.eigenvalues.iter().map(|l| l.ln()).sum(),
            cov: row_major(&m),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Coordinates of `v` in the eigenbasis: `V^T v`.
    pub fn to_eigen(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..d).map(|i| self.eigvecs[i * d + j] * v[i]).sum();
        }
    }

    /// `V c` for eigen-coordinates `c`.
    pub fn from_eigen(&self, c: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..d).map(|j| self.eigvecs[i * d + j] * c[j]).sum();
        }
    }

    /// Lebesgue log-density.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let mut c = vec![0.0; d];
        self.to_eigen(&diff, &mut c);
        let quad: f64 = c.iter().zip(&self.eigvals).map(|(ci, l)| ci * ci / l).sum();
        -0.5 * quad - 0.5 * self.log_det - 0.5 * d as f64 * (2.0 * PI).ln()
    }

    /// Gradient of the Lebesgue log-density: `-Sigma^{-1}(x - m)`.
    pub fn grad_log_density(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let mut c = vec![0.0; d];
        self.to_eigen(&diff, &mut c);
        for (ci, l) in c.iter_mut().zip(&self.eigvals) {
            *ci = -*ci / l;
        }
        self.from_eigen(&c, out);
    }

    pub fn sample_into<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let mut z = vec![0.0; d];
        for (zj, l) in z.iter_mut().zip(&self.eigvals) {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            *zj = n * l.sqrt();
        }
        self.from_eigen(&z, out);
        for (o, m) in out.iter_mut().zip(&self.mean) {
            *o += m;
        }
    }

    /// `ent(N(m, Sigma) | gamma_d) = (tr Sigma + |m|^2 - d - log det Sigma) / 2`.
    pub fn relative_entropy(&self) -> f64 {
        let d = self.dim();
        let tr: f64 = self.eigvals.iter().sum();
        let m2: f64 = self.mean.iter().map(|v| v * v).sum();
        0.5 * (tr + m2 - d as f64 - self.log_det)
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax of `xs` written into `out`.
pub(crate) fn softmax(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn log_standard_gaussian(x: &[f64]) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    -0.5 * sq - 0.5 * x.len() as f64 * (2.0 * PI).ln()
}

/// A validated mixture with factored components.
#[derive(Debug, Clone)]
pub struct Mixture {
    spec: MixtureSpec,
    components: Vec<Gaussian>,
    log_weights: Vec<f64>,
    standard: bool,
}

impl Mixture {
    pub fn new(spec: &MixtureSpec) -> Result<Self, MeasureError> {
        if spec.dim == 0 {
            return Err(MeasureError::ZeroDimension);
        }
        if spec.components.is_empty() {
            return Err(MeasureError::NoComponents);
        }
        let mut components = Vec::with_capacity(spec.components.len());
        for (k, c) in spec.components.iter().enumerate() {
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(MeasureError::NonPositiveWeight {
                    component: k,
                    weight: c.weight,
                });
            }
            if c.mean.len() != spec.dim {
                return Err(MeasureError::DimensionMismatch {
                    component: k,
                    what: "mean",
                    expected: spec.dim,
                    found: c.mean.len(),
                });
            }
            components.push(Gaussian::new(&c.mean, &c.cov, k)?);
        }
        let sum: f64 = spec.components.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(MeasureError::WeightsNotNormalized { sum });
        }
        let d = spec.dim;
        let standard = spec.components.iter().all(|c| {
            c.mean.iter().all(|&m| m == 0.0)
                && (0..d).all(|i| (0..d).all(|j| c.cov[i][j] == if i == j { 1.0 } else { 0.0 }))
        });
        Ok(Self {
            spec: spec.clone(),
            log_weights: spec.components.iter().map(|c| c.weight.ln()).collect(),
            components,
            standard,
        })
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.spec.components[k].weight
    }

    pub fn is_single(&self) -> bool {
        self.components.len() == 1
    }

    pub fn single(&self) -> Result<&Gaussian, MeasureError> {
        if self.is_single() {
            Ok(&self.components[0])
        } else {
            Err(MeasureError::NotSingleGaussian {
                components: self.components.len(),
            })
        }
    }

    /// True when the mixture is exactly the standard Gaussian (every component
    /// is `N(0, I)`).
    pub fn is_standard(&self) -> bool {
        self.standard
    }

    /// Lebesgue log-density, reduced with log-sum-exp over components.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        if self.is_single() {
            return self.components[0].log_density(x);
        }
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_density(x))
            .collect();
        log_sum_exp(&terms)
    }

    /// `log rho(x) = log nu(x) - log gamma_d(x)`.
    pub fn log_relative_density(&self, x: &[f64]) -> f64 {
        if self.is_standard() {
            return 0.0;
        }
        self.log_density(x) - log_standard_gaussian(x)
    }

    /// Gradient of the Lebesgue log-density.
    pub fn grad_log_density(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let k = self.components.len();
        let mut logs = vec![0.0; k];
        for (l, (c, lw)) in logs.iter_mut().zip(self.components.iter().zip(&self.log_weights)) {
            *l = lw + c.log_density(x);
        }
        let mut resp = vec![0.0; k];
        softmax(&logs, &mut resp);
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut g = vec![0.0; d];
        for (c, r) in self.components.iter().zip(&resp) {
            c.grad_log_density(x, &mut g);
            for (o, gi) in out.iter_mut().zip(&g) {
                *o += r * gi;
            }
        }
    }

    /// `grad log rho(x) = grad log nu(x) + x`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        if self.is_standard() {
            return out;
        }
        self.grad_log_density(x, &mut out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o += xi;
        }
        out
    }

    /// i.i.d. draws: component by weight, then a Gaussian draw.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(seed, 0);
        (0..n).map(|_| self.sample_one(&mut rng)).collect()
    }

    pub fn sample_one<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let k = if self.is_single() {
            0
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.components.len() - 1;
            for (i, c) in self.spec.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let mut x = vec![0.0; self.dim()];
        self.components[k].sample_into(rng, &mut x);
        x
    }

    pub fn relative_entropy_closed(&self) -> Result<f64, MeasureError> {
        Ok(self.single()?.relative_entropy())
    }

    /// `E_nu[log rho]` by plain Monte Carlo.
    pub fn relative_entropy_mc(&self, n: usize, seed: u64) -> Estimate {
        let vals: Vec<f64> = self
            .sample(n, seed)
            .iter()
            .map(|x| self.log_relative_density(x))
            .collect();
        Estimate::from_samples(&vals, seed)
    }

    /// `E_nu |grad log rho|^2`.
    pub fn fisher_information_mc(&self, n: usize, seed: u64) -> Estimate {
        let vals: Vec<f64> = self
            .sample(n, seed)
            .iter()
            .map(|x| self.score(x).iter().map(|s| s * s).sum())
            .collect();
        Estimate::from_samples(&vals, seed)
    }

    /// Shannon entropy `-E_nu[log nu]` (Lebesgue density).
    pub fn shannon_entropy_mc(&self, n: usize, seed: u64) -> Estimate {
        let vals: Vec<f64> = self
            .sample(n, seed)
            .iter()
            .map(|x| -self.log_density(x))
            .collect();
        Estimate::from_samples(&vals, seed)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.spec.components {
            for (mi, ci) in m.iter_mut().zip(&c.mean) {
                *mi += c.weight * ci;
            }
        }
        m
    }

    /// Coordinatewise second moments `E x_j^2`.
    pub fn second_moments(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                self.spec
                    .components
                    .iter()
                    .map(|c| c.weight * (c.cov[j][j] + c.mean[j] * c.mean[j]))
                    .sum()
            })
            .collect()
    }

    /// Coordinatewise fourth moments `E x_j^4`, used for second-moment standard errors.
    pub fn fourth_moments(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                self.spec
                    .components
                    .iter()
                    .map(|c| {
                        let (m, v) = (c.mean[j], c.cov[j][j]);
                        c.weight * (m.powi(4) + 6.0 * m * m * v + 3.0 * v * v)
                    })
                    .sum()
            })
            .collect()
    }
}

/// Law of `cos(theta) * eta + sin(theta) * xi` for independent mixtures: the
/// mixture over component pairs with combined means and covariances.
pub fn rotate_combine(eta: &MixtureSpec, xi: &MixtureSpec, theta: f64) -> Result<MixtureSpec, MeasureError> {
    if eta.dim != xi.dim {
        return Err(MeasureError::DimensionMismatch {
            component: 0,
            what: "second mixture",
            expected: eta.dim,
            found: xi.dim,
        });
    }
    let (s, c) = theta.sin_cos();
    let d = eta.dim;
    let mut components = Vec::new();
    for a in &eta.components {
        for b in &xi.components {
            components.push(ComponentSpec {
                weight: a.weight * b.weight,
                mean: (0..d).map(|i| c * a.mean[i] + s * b.mean[i]).collect(),
                cov: (0..d)
                    .map(|i| {
                        (0..d)
                            .map(|j| c * c * a.cov[i][j] + s * s * b.cov[i][j])
                            .collect()
                    })
                    .collect(),
            });
        }
    }
    Ok(MixtureSpec { dim: d, components })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bumps() -> MixtureSpec {
        MixtureSpec {
            dim: 2,
            components: vec![
                ComponentSpec {
                    weight: 0.5,
                    mean: vec![2.0, 0.0],
                    cov: identity_rows(2, 1.0),
                },
                ComponentSpec {
                    weight: 0.5,
                    mean: vec![-2.0, 0.0],
                    cov: identity_rows(2, 1.0),
                },
            ],
        }
    }

    #[test]
    fn standard_gaussian_is_valid() {
        let spec = MixtureSpec::standard(1);
        assert_eq!(spec.clone().validate().unwrap(), spec);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let mut spec = two_bumps();
        spec.components[1].weight = 0.6;
        assert!(matches!(
            spec.validate(),
            Err(MeasureError::WeightsNotNormalized { .. })
        ));
    }

    #[test]
    fn non_positive_weight_names_component() {
        let mut spec = two_bumps();
        spec.components[0].weight = 0.0;
        spec.components[1].weight = 1.0;
        assert_eq!(
            spec.validate(),
            Err(MeasureError::NonPositiveWeight {
                component: 0,
                weight: 0.0
            })
        );
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let spec = MixtureSpec::gaussian(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, -0.1]]);
        match spec.validate() {
            Err(MeasureError::CovNotPD {
                component,
                min_eigenvalue,
            }) => {
                assert_eq!(component, 0);
                assert!((min_eigenvalue + 0.1).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_names_component() {
        let mut spec = two_bumps();
        spec.components[1].mean = vec![0.0];
        assert!(matches!(
            spec.validate(),
            Err(MeasureError::DimensionMismatch { component: 1, .. })
        ));
    }

    #[test]
    fn standard_target_has_flat_density_ratio() {
        let m = Mixture::new(&MixtureSpec::standard(3)).unwrap();
        for x in [[0.0, 0.0, 0.0], [1.0, -2.0, 5.0]] {
            assert_eq!(m.log_relative_density(&x), 0.0);
            assert_eq!(m.score(&x), vec![0.0; 3]);
        }
    }

    #[test]
    fn shifted_gaussian_log_ratio() {
        // log rho(x) = x - 1/2 for N(1, 1)
        let m = Mixture::new(&MixtureSpec::isotropic(vec![1.0], 1.0)).unwrap();
        for x in [-3.0, 0.0, 0.7, 4.0] {
            assert!((m.log_relative_density(&[x]) - (x - 0.5)).abs() < 1e-12);
            assert!((m.score(&[x])[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn narrow_gaussian_log_ratio_at_origin() {
        let m = Mixture::new(&MixtureSpec::isotropic(vec![0.0], 0.5)).unwrap();
        // ratio of normalizing constants, evaluated directly
        let nu0 = 1.0 / (2.0 * PI * 0.5f64).sqrt();
        let g0 = 1.0 / (2.0 * PI).sqrt();
        let expected = (nu0 / g0).ln();
        assert!((m.log_relative_density(&[0.0]) - expected).abs() < 1e-12);
        assert!((expected - 0.346_573_590_279_972_6).abs() < 1e-12);
    }

    #[test]
    fn closed_form_entropy_values() {
        let m = Mixture::new(&MixtureSpec::isotropic(vec![1.0, 0.0], 1.0)).unwrap();
        assert!((m.relative_entropy_closed().unwrap() - 0.5).abs() < 1e-15);
        let m = Mixture::new(&MixtureSpec::isotropic(vec![0.0], 0.5)).unwrap();
        let expected = 0.5 * (0.5 - 1.0 - 0.5f64.ln());
        assert!((m.relative_entropy_closed().unwrap() - expected).abs() < 1e-15);
        assert!(matches!(
            Mixture::new(&two_bumps()).unwrap().relative_entropy_closed(),
            Err(MeasureError::NotSingleGaussian { components: 2 })
        ));
    }

    #[test]
    fn far_points_do_not_underflow() {
        let m = Mixture::new(&two_bumps()).unwrap();
        let x = [60.0, -45.0];
        assert!(m.log_density(&x).is_finite());
        assert!(m.log_relative_density(&x).is_finite());
        assert!(m.score(&x).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn standard_entropy_mc_is_exactly_zero() {
        let m = Mixture::new(&MixtureSpec::standard(2)).unwrap();
        let e = m.relative_entropy_mc(1000, 5);
        assert_eq!(e.value, 0.0);
        assert_eq!(e.std_error, 0.0);
        assert_eq!(m.fisher_information_mc(1000, 5).value, 0.0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = Mixture::new(&two_bumps()).unwrap();
        assert_eq!(m.sample(50, 9), m.sample(50, 9));
        assert_ne!(m.sample(50, 9), m.sample(50, 10));
    }

    #[test]
    fn rotate_combine_of_gaussians_is_gaussian() {
        let a = MixtureSpec::isotropic(vec![1.0], 2.0);
        let b = MixtureSpec::isotropic(vec![-1.0], 0.5);
        let theta = 0.3f64;
        let c = rotate_combine(&a, &b, theta).unwrap();
        assert_eq!(c.components.len(), 1);
        let (s, co) = theta.sin_cos();
        assert!((c.components[0].mean[0] - (co - s)).abs() < 1e-15);
        assert!((c.components[0].cov[0][0] - (2.0 * co * co + 0.5 * s * s)).abs() < 1e-15);
    }
}
