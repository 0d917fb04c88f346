//! Weighted projection frames `sum_i c_i P_i = I` and the inequality suite.

mod checks;
mod report;

pub use checks::*;
pub use report::{classify, InequalityReport, Quantity, Relation, Verdict};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::follmer::DriftError;
use crate::measure::MeasureError;
use crate::pathsim::SimError;
use crate::rng;

pub const FRAME_TOL: f64 = 1e-10;
pub const PROJECTION_TOL: f64 = 1e-12;
pub const PARSEVAL_PROBES: usize = 100;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame has no items")]
    Empty,
    #[error("item {item}: weight {weight} is not positive")]
    NonPositiveWeight { item: usize, weight: f64 },
    #[error("item {item}: {what} has length {found}, expected {expected}")]
    DimensionMismatch {
        item: usize,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("sum of c_i P_i differs from the identity by {frobenius_error} (Frobenius)")]
    FrameConditionViolated { frobenius_error: f64 },
    #[error("item {item} is not an orthogonal projection (error {error})")]
    NotAProjection { item: usize, error: f64 },
    #[error("Parseval identity fails with relative error {relative_error}")]
    ParsevalFailed { relative_error: f64 },
    #[error("{0} must be a single Gaussian")]
    NotSingleGaussian(String),
    #[error("factor {item} is not integrable: I - Q has eigenvalue {min_eigenvalue}")]
    NonIntegrableFactor { item: usize, min_eigenvalue: f64 },
    #[error("{what}: expected {expected}, found {found}")]
    Mismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Drift(#[from] DriftError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameItem {
    pub weight: f64,
    /// Orthonormal columns spanning `E_i`, each of length `ambient_dim`.
    pub basis: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub ambient_dim: usize,
    pub items: Vec<FrameItem>,
}

impl FrameSpec {
    /// Coordinate axes of `R^d` with unit weights.
    pub fn coordinate_axes(d: usize) -> Self {
        Self {
            ambient_dim: d,
            items: (0..d)
                .map(|i| {
                    let mut e = vec![0.0; d];
                    e[i] = 1.0;
                    FrameItem {
                        weight: 1.0,
                        basis: vec![e],
                    }
                })
                .collect(),
        }
    }

    /// Three lines in the plane at 90, 210 and 330 degrees, weights 2/3.
    pub fn mercedes_benz() -> Self {
        Self {
            ambient_dim: 2,
            items: [90.0f64, 210.0, 330.0]
                .iter()
                .map(|deg| {
                    let a = deg.to_radians();
                    FrameItem {
                        weight: 2.0 / 3.0,
                        basis: vec![vec![a.cos(), a.sin()]],
                    }
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.items[i].weight
    }

    pub fn rank(&self, i: usize) -> usize {
        self.items[i].basis.len()
    }

    /// Coordinates of `P_i x` in the basis of `E_i`.
    pub fn coords(&self, i: usize, x: &[f64]) -> Vec<f64> {
        self.items[i]
            .basis
            .iter()
            .map(|b| b.iter().zip(x).map(|(a, c)| a * c).sum())
            .collect()
    }

    /// Ambient vector with coordinates `s` in `E_i`.
    pub fn embed(&self, i: usize, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ambient_dim];
        for (b, si) in self.items[i].basis.iter().zip(s) {
            for (o, bj) in out.iter_mut().zip(b) {
                *o += si * bj;
            }
        }
        out
    }

    pub fn project(&self, i: usize, x: &[f64]) -> Vec<f64> {
        self.embed(i, &self.coords(i, x))
    }

    /// Dense `P_i`, row-major.
    pub fn projection_matrix(&self, i: usize) -> Vec<f64> {
        let d = self.ambient_dim;
        let mut p = vec![0.0; d * d];
        for b in &self.items[i].basis {
            for r in 0..d {
                for c in 0..d {
                    p[r * d + c] += b[r] * b[c];
                }
            }
        }
        p
    }

    fn check_shapes(&self) -> Result<(), FrameError> {
        if self.items.is_empty() {
            return Err(FrameError::Empty);
        }
        for (i, item) in self.items.iter().enumerate() {
            if !(item.weight > 0.0) || !item.weight.is_finite() {
                return Err(FrameError::NonPositiveWeight {
                    item: i,
                    weight: item.weight,
                });
            }
            if item.basis.is_empty() {
                return Err(FrameError::DimensionMismatch {
                    item: i,
                    what: "basis",
                    expected: 1,
                    found: 0,
                });
            }
            for b in &item.basis {
                if b.len() != self.ambient_dim {
                    return Err(FrameError::DimensionMismatch {
                        item: i,
                        what: "basis vector",
                        expected: self.ambient_dim,
                        found: b.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub frobenius_error: f64,
    pub max_projection_error: f64,
    pub max_parseval_error: f64,
}

/// Checks the frame condition, that every `P_i` is an orthogonal projection,
/// and `|x|^2 = sum_i c_i |P_i x|^2` on random probes.
pub fn frame_validate(frame: &FrameSpec) -> Result<FrameDiagnostics, FrameError> {
    frame.check_shapes()?;
    let d = frame.ambient_dim;
    let mut max_projection_error: f64 = 0.0;
    let mut sum = vec![0.0; d * d];
    for i in 0..frame.len() {
        let p = frame.projection_matrix(i);
        let mut err: f64 = 0.0;
        for r in 0..d {
            for c in 0..d {
                let p2: f64 = (0..d).map(|k| p[r * d + k] * p[k * d + c]).sum();
                err = err.max((p2 - p[r * d + c]).abs()).max((p[r * d + c] - p[c * d + r]).abs());
            }
        }
        if err > PROJECTION_TOL {
            return Err(FrameError::NotAProjection { item: i, error: err });
        }
        max_projection_error = max_projection_error.max(err);
        for (s, v) in sum.iter_mut().zip(&p) {
            *s += frame.weight(i) * v;
        }
    }
    let frobenius_error = (0..d * d)
        .map(|k| {
            let id = if k / d == k % d { 1.0 } else { 0.0 };
            (sum[k] - id).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    if frobenius_error > FRAME_TOL {
        return Err(FrameError::FrameConditionViolated { frobenius_error });
    }
    let mut rng = rng::stream(0x9a75e7a1, 0);
    let mut x = vec![0.0; d];
    let mut max_parseval_error: f64 = 0.0;
    for _ in 0..PARSEVAL_PROBES {
        rng::fill_normal(&mut rng, &mut x);
        let n2: f64 = x.iter().map(|v| v * v).sum();
        let split: f64 = (0..frame.len())
            .map(|i| frame.weight(i) * frame.coords(i, &x).iter().map(|v| v * v).sum::<f64>())
            .sum();
        max_parseval_error = max_parseval_error.max((n2 - split).abs() / n2);
    }
    if max_parseval_error > FRAME_TOL {
        return Err(FrameError::ParsevalFailed {
            relative_error: max_parseval_error,
        });
    }
    Ok(FrameDiagnostics {
        frobenius_error,
        max_projection_error,
        max_parseval_error,
    })
}

/// `|sum_i c_i x_i|^2 <= sum_i c_i |x_i|^2` for `x_i` in `E_i`.
///
/// Points outside `E_i` are projected first and a note is attached.
pub fn cauchy_schwarz_probe(frame: &FrameSpec, points: &[Vec<f64>]) -> Result<InequalityReport, FrameError> {
    frame_validate(frame)?;
    if points.len() != frame.len() {
        return Err(FrameError::Mismatch {
            what: "number of points".into(),
            expected: frame.len(),
            found: points.len(),
        });
    }
    let d = frame.ambient_dim;
    let mut notes = Vec::new();
    let mut combo = vec![0.0; d];
    let mut rhs = 0.0;
    for (i, x) in points.iter().enumerate() {
        if x.len() != d {
            return Err(FrameError::Mismatch {
                what: format!("point {i}"),
                expected: d,
                found: x.len(),
            });
        }
        let px = frame.project(i, x);
        let off: f64 = px.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if off > 1e-12 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt()) {
            notes.push(format!("point {i} was projected onto E_{i} (distance {off:e})"));
        }
        let c = frame.weight(i);
        rhs += c * px.iter().map(|v| v * v).sum::<f64>();
        for (o, v) in combo.iter_mut().zip(&px) {
            *o += c * v;
        }
    }
    let lhs: f64 = combo.iter().map(|v| v * v).sum();
    let mut report = InequalityReport::new(
        "cauchy_schwarz",
        Quantity::Exact(lhs),
        Quantity::Exact(rhs),
        Relation::LessEq,
    );
    report.notes = notes;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mercedes_benz_is_a_frame() {
        let diag = frame_validate(&FrameSpec::mercedes_benz()).unwrap();
        assert!(diag.frobenius_error < 1e-15);
    }

    #[test]
    fn half_weights_violate_frame_condition() {
        let mut f = FrameSpec::coordinate_axes(2);
        f.items.iter_mut().for_each(|it| it.weight = 0.5);
        assert!(matches!(frame_validate(&f), Err(FrameError::FrameConditionViolated { .. })));
    }

    #[test]
    fn non_unit_basis_is_not_a_projection() {
        let mut f = FrameSpec::coordinate_axes(2);
        f.items[0].basis[0] = vec![2.0, 0.0];
        assert!(matches!(frame_validate(&f), Err(FrameError::NotAProjection { item: 0, .. })));
    }

    #[test]
    fn cauchy_schwarz_axes_equality() {
        let r = cauchy_schwarz_probe(&FrameSpec::coordinate_axes(2), &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(r.lhs.value(), 2.0);
        assert_eq!(r.rhs.value(), 2.0);
        assert_eq!(r.verdict, Verdict::WithinNoise);
        assert!(r.notes.is_empty());
    }

    #[test]
    fn off_subspace_points_are_projected_with_a_note() {
        let r = cauchy_schwarz_probe(&FrameSpec::coordinate_axes(2), &[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(r.notes.len(), 1);
        assert_eq!(r.lhs.value(), 2.0);
    }
}
