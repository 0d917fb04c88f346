#![allow(dead_code)]

use gaussrep::measure::{ComponentSpec, MixtureSpec};

pub fn gaussian(mean: &[f64], cov: &[&[f64]]) -> MixtureSpec {
    MixtureSpec::gaussian(mean.to_vec(), cov.iter().map(|r| r.to_vec()).collect())
}

/// Targets used throughout: `N((1,0), I)`, `N(0, I/2)`, `N((1,0), I/2)`.
pub fn gaussian_targets() -> Vec<(&'static str, MixtureSpec)> {
    vec![
        ("N((1,0),I)", MixtureSpec::isotropic(vec![1.0, 0.0], 1.0)),
        ("N(0,I/2)", MixtureSpec::isotropic(vec![0.0, 0.0], 0.5)),
        ("N((1,0),I/2)", MixtureSpec::isotropic(vec![1.0, 0.0], 0.5)),
    ]
}

pub fn symmetric_mixture() -> MixtureSpec {
    gaussrep::report::symmetric_mixture(&[1.0, 0.0], 0.5)
}

pub fn skewed_mixture() -> MixtureSpec {
    MixtureSpec {
        dim: 2,
        components: vec![
            ComponentSpec {
                weight: 0.3,
                mean: vec![1.2, -0.4],
                cov: vec![vec![0.6, 0.15], vec![0.15, 0.9]],
            },
            ComponentSpec {
                weight: 0.7,
                mean: vec![-0.5, 0.3],
                cov: vec![vec![1.1, -0.1], vec![-0.1, 0.7]],
            },
        ],
    }
}

/// `(1 - eps) nu + eps gamma_d`.
pub fn floored(spec: &MixtureSpec, eps: f64) -> MixtureSpec {
    let d = spec.dim;
    let mut components: Vec<ComponentSpec> = spec
        .components
        .iter()
        .map(|c| ComponentSpec {
            weight: (1.0 - eps) * c.weight,
            ..c.clone()
        })
        .collect();
    components.push(ComponentSpec {
        weight: eps,
        mean: vec![0.0; d],
        cov: (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect(),
    });
    MixtureSpec { dim: d, components }
}

/// Independent density of a mixture in one or two dimensions.
pub fn pdf(spec: &MixtureSpec, x: &[f64]) -> f64 {
    spec.components
        .iter()
        .map(|c| match spec.dim {
            1 => {
                let v = c.cov[0][0];
                let z = x[0] - c.mean[0];
                c.weight * (-0.5 * z * z / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
            }
            2 => {
                let (a, b, d) = (c.cov[0][0], c.cov[0][1], c.cov[1][1]);
                let det = a * d - b * b;
                let (u, w) = (x[0] - c.mean[0], x[1] - c.mean[1]);
                let q = (d * u * u - 2.0 * b * u * w + a * w * w) / det;
                c.weight * (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
            }
            _ => panic!("oracle density only covers d <= 2"),
        })
        .sum()
}

pub fn std_normal_pdf(x: &[f64]) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    (-0.5 * r2).exp() / (2.0 * std::f64::consts::PI).powf(x.len() as f64 / 2.0)
}

/// Composite Simpson nodes and weights on `[a, b]` with `n` (even) intervals.
pub fn simpson(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    assert!(n % 2 == 0);
    let h = (b - a) / n as f64;
    (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            (a + i as f64 * h, w * h / 3.0)
        })
        .collect()
}

/// `KL(nu | gamma_d)` by tensor Simpson quadrature on `[-10, 10]^d`.
pub fn kl_quadrature(spec: &MixtureSpec, nodes: usize) -> f64 {
    let rule = simpson(-10.0, 10.0, nodes);
    let mut total = 0.0;
    let term = |x: &[f64]| {
        let p = pdf(spec, x);
        if p > 0.0 {
            p * (p / std_normal_pdf(x)).ln()
        } else {
            0.0
        }
    };
    match spec.dim {
        1 => {
            for &(x, w) in &rule {
                total += w * term(&[x]);
            }
        }
        2 => {
            for &(x, wx) in &rule {
                for &(y, wy) in &rule {
                    total += wx * wy * term(&[x, y]);
                }
            }
        }
        _ => panic!("quadrature oracle only covers d <= 2"),
    }
    total
}

/// Fisher information `E |grad log(nu / gamma)|^2` in one dimension, by
/// quadrature with centered differences of the oracle density.
pub fn fisher_quadrature_1d(spec: &MixtureSpec, nodes: usize) -> f64 {
    let h = 1e-5;
    simpson(-12.0, 12.0, nodes)
        .into_iter()
        .map(|(x, w)| {
            let lr = |y: f64| (pdf(spec, &[y]) / std_normal_pdf(&[y])).ln();
            let s = (lr(x + h) - lr(x - h)) / (2.0 * h);
            w * pdf(spec, &[x]) * s * s
        })
        .sum()
}

/// `P_s rho(x) = int rho(x + sqrt(s) z) phi(z) dz` in one dimension.
pub fn heat_quadrature_1d(spec: &MixtureSpec, s: f64, x: f64, nodes: usize) -> f64 {
    simpson(-12.0, 12.0, nodes)
        .into_iter()
        .map(|(z, w)| {
            let y = x + s.sqrt() * z;
            w * pdf(spec, &[y]) / std_normal_pdf(&[y]) * std_normal_pdf(&[z])
        })
        .sum()
}
