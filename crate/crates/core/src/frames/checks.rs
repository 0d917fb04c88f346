use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{frame_validate, FrameError, FrameSpec, InequalityReport, Quantity, Relation};
use crate::entropy::{entropy_runs, DriftOverride, EntropyError};
use crate::estimate::{combined_se, Estimate};
use crate::follmer::{mixture_drift_closed, DriftFunction};
use crate::measure::{rotate_combine, Gaussian, Mixture, MixtureSpec};
use crate::pathsim::{NoiseStream, SdeConfig, SimError};
use crate::rng;

impl From<EntropyError> for FrameError {
    fn from(e: EntropyError) -> Self {
        match e {
            EntropyError::Measure(m) => FrameError::Measure(m),
            EntropyError::Sim(s) => FrameError::Sim(s),
            EntropyError::Drift(d) => FrameError::Drift(d),
        }
    }
}

fn single(spec: &MixtureSpec, what: &str) -> Result<Gaussian, FrameError> {
    let m = Mixture::new(spec)?;
    if !m.is_single() {
        return Err(FrameError::NotSingleGaussian(what.to_string()));
    }
    Ok(m.components()[0].clone())
}

/// Exact `W_2^2(N(m, S), gamma_d) = |m|^2 + sum_j (sqrt(lambda_j) - 1)^2`.
pub fn gaussian_w2_squared(g: &Gaussian) -> f64 {
    let m2: f64 = g.mean.iter().map(|v| v * v).sum();
    m2 + g.eigvals.iter().map(|l| (l.sqrt() - 1.0).powi(2)).sum::<f64>()
}

/// `T_2^2 <= 2 ent` with the coupling `(B, B + U)` of the bridge drift.
///
/// For a single Gaussian the left side is the exact `W_2^2`; otherwise it is
/// the coupling cost `E|X_1 - B_1|^2`, which is pathwise below `2 * energy`.
pub fn talagrand_check(spec: &MixtureSpec, cfg: &SdeConfig) -> Result<InequalityReport, FrameError> {
    let mixture = Mixture::new(spec)?;
    let (report, fine, _) = entropy_runs(spec, cfg, &DriftOverride::None)?;
    let twice: Vec<f64> = fine.energy.iter().map(|e| 2.0 * e).collect();
    let rhs = Estimate::from_samples(&twice, cfg.seed);
    let allowance = 2.0 * report.bias_proxy.unwrap_or(0.0);
    let out = if mixture.is_single() {
        let lhs = gaussian_w2_squared(&mixture.components()[0]);
        InequalityReport::new("talagrand", Quantity::Exact(lhs), Quantity::Estimate(rhs), Relation::LessEq)
    } else {
        let cost: Vec<f64> = fine
            .terminal_points
            .iter()
            .zip(&fine.brownian_endpoints)
            .map(|(x, b)| x.iter().zip(b).map(|(a, c)| (a - c).powi(2)).sum())
            .collect();
        let slack: Vec<f64> = twice.iter().zip(&cost).map(|(t, c)| t - c).collect();
        InequalityReport::with_margin_se(
            "talagrand",
            Quantity::Estimate(Estimate::from_samples(&cost, cfg.seed)),
            Quantity::Estimate(rhs),
            Relation::LessEq,
            Estimate::from_samples(&slack, cfg.seed).std_error,
        )
    };
    Ok(out.allow(allowance))
}

/// `ent(nu | gamma) <= 0.5 I(nu | gamma)`.
pub fn lsi_check(spec: &MixtureSpec, n: usize, seed: u64) -> Result<InequalityReport, FrameError> {
    let mixture = Mixture::new(spec)?;
    let pts = mixture.sample(n, seed);
    let half_fisher: Vec<f64> = pts
        .iter()
        .map(|x| 0.5 * mixture.score(x).iter().map(|s| s * s).sum::<f64>())
        .collect();
    let rhs = Estimate::from_samples(&half_fisher, seed);
    if let Ok(h) = mixture.relative_entropy_closed() {
        return Ok(InequalityReport::new("lsi", Quantity::Exact(h), Quantity::Estimate(rhs), Relation::LessEq));
    }
    let log_ratio: Vec<f64> = pts.iter().map(|x| mixture.log_relative_density(x)).collect();
    let slack: Vec<f64> = half_fisher.iter().zip(&log_ratio).map(|(f, l)| f - l).collect();
    Ok(InequalityReport::with_margin_se(
        "lsi",
        Quantity::Estimate(Estimate::from_samples(&log_ratio, seed)),
        Quantity::Estimate(rhs),
        Relation::LessEq,
        Estimate::from_samples(&slack, seed).std_error,
    ))
}

/// `S(cos t eta + sin t xi) >= cos^2 t S(eta) + sin^2 t S(xi)` for each angle.
///
/// At `t = 0` the combined law is `eta` itself and is estimated from the same
/// draws as `S(eta)`.
pub fn epi_check(
    eta: &MixtureSpec,
    xi: &MixtureSpec,
    thetas: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<InequalityReport>, FrameError> {
    let eta_m = Mixture::new(eta)?;
    let xi_m = Mixture::new(xi)?;
    if eta_m.dim() != xi_m.dim() {
        return Err(FrameError::Mismatch {
            what: "dimension of xi".into(),
            expected: eta_m.dim(),
            found: xi_m.dim(),
        });
    }
    let eta_seed = rng::derive_seed(seed, &[1]);
    let s_eta = eta_m.shannon_entropy_mc(n, eta_seed);
    let s_xi = xi_m.shannon_entropy_mc(n, rng::derive_seed(seed, &[2]));
    thetas
        .iter()
        .enumerate()
        .map(|(idx, &theta)| {
            let (c2, s2) = (theta.cos().powi(2), theta.sin().powi(2));
            let lhs = if theta == 0.0 {
                s_eta
            } else {
                let combined = Mixture::new(&rotate_combine(eta, xi, theta)?)?;
                combined.shannon_entropy_mc(n, rng::derive_seed(seed, &[3, idx as u64]))
            };
            let rhs = Estimate {
                value: c2 * s_eta.value + s2 * s_xi.value,
                std_error: combined_se(&[c2 * s_eta.std_error, s2 * s_xi.std_error]),
                n_samples: n,
                seed,
            };
            let se = if theta == 0.0 {
                // identical estimator input on both sides
                0.0
            } else {
                combined_se(&[lhs.std_error, rhs.std_error])
            };
            let mut r = InequalityReport::with_margin_se(
                &format!("epi/theta_{idx}"),
                Quantity::Estimate(lhs),
                Quantity::Estimate(rhs),
                Relation::GreaterEq,
                se,
            );
            r.notes.push(format!("theta = {theta}"));
            Ok(r)
        })
        .collect()
}

fn check_frame_dim(frame: &FrameSpec, d: usize) -> Result<(), FrameError> {
    frame_validate(frame)?;
    if frame.ambient_dim != d {
        return Err(FrameError::Mismatch {
            what: "target dimension".into(),
            expected: frame.ambient_dim,
            found: d,
        });
    }
    Ok(())
}

/// Law of `P_i X` in the basis of `E_i` for `X ~ g`.
pub fn project_gaussian(frame: &FrameSpec, i: usize, g: &Gaussian) -> Result<Gaussian, FrameError> {
    let basis = &frame.items[i].basis;
    let d = g.dim();
    let mean = frame.coords(i, &g.mean);
    let cov: Vec<Vec<f64>> = basis
        .iter()
        .map(|u| {
            let su: Vec<f64> = g.cov.chunks(d).map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum()).collect();
            basis.iter().map(|v| v.iter().zip(&su).map(|(a, b)| a * b).sum()).collect()
        })
        .collect();
    Ok(Gaussian::new(&mean, &cov, i)?)
}

/// `ent(nu | gamma_d) >= sum_i c_i ent(nu o P_i^{-1} | gamma_{E_i})`, exact for
/// Gaussian `nu`.
pub fn bl_superadditivity_check(frame: &FrameSpec, spec: &MixtureSpec) -> Result<InequalityReport, FrameError> {
    let g = single(spec, "target")?;
    check_frame_dim(frame, g.dim())?;
    let lhs = g.relative_entropy();
    let mut rhs = 0.0;
    for i in 0..frame.len() {
        rhs += frame.weight(i) * project_gaussian(frame, i, &g)?.relative_entropy();
    }
    Ok(InequalityReport::new(
        "bl_superadditivity",
        Quantity::Exact(lhs),
        Quantity::Exact(rhs),
        Relation::GreaterEq,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReversedBlOutcome {
    /// `ent(law Y_1) <= sum_i c_i ent(nu_i)`.
    pub entropy: InequalityReport,
    /// Pathwise `|| sum_i c_i U_i ||^2 <= sum_i c_i ||U_i||^2` on the worst path.
    pub energy_chain: InequalityReport,
    pub chain_min_margin: f64,
    pub fitted_mean: Vec<f64>,
    pub fitted_cov: Vec<Vec<f64>>,
    /// `0.5 E||U_i||^2` for each item.
    pub item_energies: Vec<Estimate>,
}

struct RblPath {
    y: Vec<f64>,
    combined_energy: f64,
    weighted_energy: f64,
    energies: Vec<f64>,
}

/// Coupled bridge processes `X_i = P_i B + U_i` on each `E_i`, all driven by
/// one ambient Brownian motion, combined as `Y = B + sum_i c_i U_i`.
pub fn reversed_bl_check(
    frame: &FrameSpec,
    targets: &[MixtureSpec],
    cfg: &SdeConfig,
) -> Result<ReversedBlOutcome, FrameError> {
    cfg.validate()?;
    check_frame_dim(frame, cfg.dim)?;
    if targets.len() != frame.len() {
        return Err(FrameError::Mismatch {
            what: "number of targets".into(),
            expected: frame.len(),
            found: targets.len(),
        });
    }
    let mut drifts = Vec::with_capacity(targets.len());
    let mut rhs = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let g = single(t, &format!("target {i}"))?;
        if g.dim() != frame.rank(i) {
            return Err(FrameError::Mismatch {
                what: format!("dimension of target {i}"),
                expected: frame.rank(i),
                found: g.dim(),
            });
        }
        rhs += frame.weight(i) * g.relative_entropy();
        drifts.push(mixture_drift_closed(t)?);
    }
    let paths: Vec<RblPath> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| rbl_path(frame, &drifts, cfg, p))
        .collect::<Result<_, _>>()?;

    let d = cfg.dim;
    let n = paths.len();
    let ys: Vec<&[f64]> = paths.iter().map(|p| p.y.as_slice()).collect();
    let fit = gaussian_fit_entropy(&ys, cfg.seed);
    let all_zero = paths.iter().all(|p| p.combined_energy == 0.0);
    let item_energies: Vec<Estimate> = (0..frame.len())
        .map(|i| {
            let e: Vec<f64> = paths.iter().map(|p| p.energies[i]).collect();
            Estimate::from_samples(&e, cfg.seed)
        })
        .collect();
    let weighted_energy: f64 = item_energies
        .iter()
        .enumerate()
        .map(|(i, e)| frame.weight(i) * e.value)
        .sum();
    let mut entropy = if all_zero {
        let mut r = InequalityReport::new("reversed_bl", Quantity::Exact(0.0), Quantity::Exact(rhs), Relation::LessEq);
        r.notes.push("combined drift vanishes on every path".into());
        r
    } else {
        InequalityReport::new(
            "reversed_bl",
            Quantity::Estimate(fit.entropy),
            Quantity::Exact(rhs),
            Relation::LessEq,
        )
        .allow((weighted_energy - rhs).abs())
    };
    entropy.notes.push(format!("{n} paths, {d}-dimensional Gaussian fit"));

    let (worst, chain_min_margin) = paths
        .iter()
        .enumerate()
        .map(|(k, p)| (k, p.weighted_energy - p.combined_energy))
        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    let energy_chain = InequalityReport::new(
        "energy_chain",
        Quantity::Exact(paths[worst].combined_energy),
        Quantity::Exact(paths[worst].weighted_energy),
        Relation::LessEq,
    );
    Ok(ReversedBlOutcome {
        entropy,
        energy_chain,
        chain_min_margin,
        fitted_mean: fit.mean,
        fitted_cov: fit.cov,
        item_energies,
    })
}

fn rbl_path(frame: &FrameSpec, drifts: &[DriftFunction], cfg: &SdeConfig, path: usize) -> Result<RblPath, FrameError> {
    let d = cfg.dim;
    let dt = cfg.dt();
    let mut noise = NoiseStream::new(cfg.seed, path as u64, cfg.n_steps, d, 1);
    let mut db = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut xs: Vec<Vec<f64>> = (0..frame.len()).map(|i| vec![0.0; frame.rank(i)]).collect();
    let mut us: Vec<Vec<f64>> = xs.clone();
    let mut big_u = vec![0.0; d];
    let mut energies = vec![0.0; frame.len()];
    let mut combined_energy = 0.0;
    let mut weighted_energy = 0.0;
    for k in 0..cfg.n_steps {
        let t = cfg.time(k);
        noise.next_increment(&mut db);
        let mut v = vec![0.0; d];
        let mut weighted = 0.0;
        for i in 0..frame.len() {
            drifts[i].evaluate(t, &xs[i], &mut us[i])?;
            let u2: f64 = us[i].iter().map(|x| x * x).sum();
            energies[i] += 0.5 * u2 * dt;
            weighted += frame.weight(i) * u2;
            let c = frame.weight(i);
            for (vj, ej) in v.iter_mut().zip(frame.embed(i, &us[i])) {
                *vj += c * ej;
            }
            let dbi = frame.coords(i, &db);
            for ((x, u), w) in xs[i].iter_mut().zip(&us[i]).zip(&dbi) {
                *x += u * dt + w;
            }
        }
        combined_energy += 0.5 * v.iter().map(|x| x * x).sum::<f64>() * dt;
        weighted_energy += 0.5 * weighted * dt;
        for j in 0..d {
            b[j] += db[j];
            big_u[j] += v[j] * dt;
        }
    }
    if xs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(FrameError::Sim(SimError::NonFiniteState {
            path,
            step: cfg.n_steps,
        }));
    }
    Ok(RblPath {
        y: b.iter().zip(&big_u).map(|(a, c)| a + c).collect(),
        combined_energy,
        weighted_energy,
        energies,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    /// Relative entropy of `N(mean, cov)` against `gamma_d`, with a
    /// delta-method standard error.
    pub entropy: Estimate,
}

pub fn gaussian_fit_entropy(ys: &[&[f64]], seed: u64) -> GaussianFit {
    let n = ys.len();
    let d = ys[0].len();
    let mut mean = DVector::<f64>::zeros(d);
    for y in ys {
        for j in 0..d {
            mean[j] += y[j];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for y in ys {
        let c = DVector::from_fn(d, |j, _| y[j] - mean[j]);
        cov += &c * c.transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov.clone());
    let log_det: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
    let value = 0.5 * (mean.norm_squared() + cov.trace() - d as f64 - log_det);
    let inv = eig.eigenvectors.clone()
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l))
        * eig.eigenvectors.transpose();
    let k = DMatrix::<f64>::identity(d, d) - inv;
    let infl: Vec<f64> = ys
        .iter()
        .map(|y| {
            let c = DVector::from_fn(d, |j, _| y[j] - mean[j]);
            mean.dot(&c) + 0.5 * c.dot(&(&k * &c))
        })
        .collect();
    let se = Estimate::from_samples(&infl, seed).std_error;
    GaussianFit {
        mean: mean.iter().copied().collect(),
        cov: (0..d).map(|i| (0..d).map(|j| cov[(i, j)]).collect()).collect(),
        entropy: Estimate {
            value,
            std_error: se,
            n_samples: n,
            seed,
        },
    }
}

/// `F(s) = exp(a . s + 0.5 s^T Q s)` on `E_i` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianFactor {
    pub a: Vec<f64>,
    pub q: Vec<Vec<f64>>,
}

impl GaussianFactor {
    pub fn constant_one(k: usize) -> Self {
        Self {
            a: vec![0.0; k],
            q: vec![vec![0.0; k]; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn log_value(&self, s: &[f64]) -> f64 {
        let lin: f64 = self.a.iter().zip(s).map(|(a, x)| a * x).sum();
        let quad: f64 = self
            .q
            .iter()
            .zip(s)
            .map(|(row, si)| si * row.iter().zip(s).map(|(q, x)| q * x).sum::<f64>())
            .sum();
        lin + 0.5 * quad
    }

    /// `log int F d gamma_k = -0.5 log|I - Q| + 0.5 a^T (I - Q)^{-1} a`.
    pub fn log_integral(&self, item: usize) -> Result<f64, FrameError> {
        let k = self.dim();
        if self.q.len() != k || self.q.iter().any(|r| r.len() != k) {
            return Err(FrameError::Mismatch {
                what: format!("factor {item} quadratic part"),
                expected: k,
                found: self.q.len(),
            });
        }
        let m = DMatrix::from_fn(k, k, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            id - 0.5 * (self.q[i][j] + self.q[j][i])
        });
        let eig = SymmetricEigen::new(m);
        let min = eig.eigenvalues.min();
        if !(min > 0.0) {
            return Err(FrameError::NonIntegrableFactor {
                item,
                min_eigenvalue: min,
            });
        }
        let a = DVector::from_column_slice(&self.a);
        let w = eig.eigenvectors.transpose() * a;
        let quad: f64 = w.iter().zip(eig.eigenvalues.iter()).map(|(wi, l)| wi * wi / l).sum();
        let log_det: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
        Ok(-0.5 * log_det + 0.5 * quad)
    }
}

/// `int prod_i F_i(P_i x)^{c_i} dgamma_d <= prod_i (int F_i dgamma_{E_i})^{c_i}`.
pub fn bl_functional_check(
    frame: &FrameSpec,
    factors: &[GaussianFactor],
    n: usize,
    seed: u64,
) -> Result<InequalityReport, FrameError> {
    frame_validate(frame)?;
    if factors.len() != frame.len() {
        return Err(FrameError::Mismatch {
            what: "number of factors".into(),
            expected: frame.len(),
            found: factors.len(),
        });
    }
    let mut log_rhs = 0.0;
    for (i, f) in factors.iter().enumerate() {
        if f.dim() != frame.rank(i) {
            return Err(FrameError::Mismatch {
                what: format!("dimension of factor {i}"),
                expected: frame.rank(i),
                found: f.dim(),
            });
        }
        log_rhs += frame.weight(i) * f.log_integral(i)?;
    }
    let d = frame.ambient_dim;
    let mut rng = rng::stream(seed, 0);
    let mut z = vec![0.0; d];
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            rng::fill_normal(&mut rng, &mut z);
            let log: f64 = factors
                .iter()
                .enumerate()
                .map(|(i, f)| frame.weight(i) * f.log_value(&frame.coords(i, &z)))
                .sum();
            log.exp()
        })
        .collect();
    Ok(InequalityReport::new(
        "bl_functional",
        Quantity::Estimate(Estimate::from_samples(&vals, seed)),
        Quantity::Exact(log_rhs.exp()),
        Relation::LessEq,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::Verdict;

    #[test]
    fn bl_standard_target_is_zero_both_sides() {
        let r = bl_superadditivity_check(&FrameSpec::mercedes_benz(), &MixtureSpec::standard(2)).unwrap();
        assert_eq!(r.lhs.value(), 0.0);
        assert!(r.rhs.value().abs() < 1e-15);
        assert_eq!(r.verdict, Verdict::WithinNoise);
    }

    #[test]
    fn bl_parseval_aligned_mean_is_equality() {
        let r = bl_superadditivity_check(
            &FrameSpec::mercedes_benz(),
            &MixtureSpec::isotropic(vec![1.0, 0.0], 1.0),
        )
        .unwrap();
        assert!((r.lhs.value() - 0.5).abs() < 1e-15);
        assert!((r.rhs.value() - 0.5).abs() < 1e-12);
        assert_eq!(r.verdict, Verdict::WithinNoise);
    }

    #[test]
    fn bl_rejects_mixtures() {
        let spec: MixtureSpec = serde_json::from_str(
            r#"{"dim":2,"components":[
                {"weight":0.5,"mean":[1,0],"cov":[[1,0],[0,1]]},
                {"weight":0.5,"mean":[-1,0],"cov":[[1,0],[0,1]]}]}"#,
        )
        .unwrap();
        assert!(matches!(
            bl_superadditivity_check(&FrameSpec::mercedes_benz(), &spec),
            Err(FrameError::NotSingleGaussian(_))
        ));
    }

    #[test]
    fn factor_integral_closed_form() {
        let f = GaussianFactor {
            a: vec![0.0],
            q: vec![vec![-0.5]],
        };
        assert!((f.log_integral(0).unwrap() + 0.5 * 1.5f64.ln()).abs() < 1e-15);
        let bad = GaussianFactor {
            a: vec![0.0],
            q: vec![vec![1.0]],
        };
        assert!(matches!(bad.log_integral(3), Err(FrameError::NonIntegrableFactor { item: 3, .. })));
    }

    #[test]
    fn constant_factors_give_one() {
        let frame = FrameSpec::mercedes_benz();
        let factors = vec![GaussianFactor::constant_one(1); 3];
        let r = bl_functional_check(&frame, &factors, 100, 1).unwrap();
        assert_eq!(r.lhs.value(), 1.0);
        assert_eq!(r.rhs.value(), 1.0);
    }

    #[test]
    fn reversed_bl_standard_targets() {
        let cfg = SdeConfig::new(16, 200, 5, 2);
        let out = reversed_bl_check(&FrameSpec::mercedes_benz(), &vec![MixtureSpec::standard(1); 3], &cfg).unwrap();
        assert_eq!(out.entropy.lhs.value(), 0.0);
        assert_eq!(out.entropy.rhs.value(), 0.0);
        assert_eq!(out.chain_min_margin, 0.0);
    }

    #[test]
    fn w2_of_shifted_gaussian() {
        let g = Gaussian::new(&[1.0, 2.0], &[vec![1.0, 0.0], vec![0.0, 4.0]], 0).unwrap();
        assert!((gaussian_w2_squared(&g) - 6.0).abs() < 1e-12);
    }
}
