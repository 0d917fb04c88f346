use nalgebra::DMatrix;
use proptest::prelude::*;

use gaussrep::estimate::Estimate;
use gaussrep::follmer::{mixture_drift_closed, MixtureDrift};
use gaussrep::frames::{
    bl_superadditivity_check, cauchy_schwarz_probe, classify, frame_validate, FrameItem, FrameSpec, Verdict,
};
use gaussrep::measure::{rotate_combine, ComponentSpec, Mixture, MeasureError, MixtureSpec};

fn orthogonal(d: usize, entries: &[f64]) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |i, j| entries[i * d + j]);
    m.qr().q()
}

/// Random frame: the columns of two random orthogonal matrices split into
/// consecutive groups, each group weighted 1/2.
fn random_frame(d: usize, entries: &[f64], cut: usize) -> FrameSpec {
    let mut items = Vec::new();
    for (k, chunk) in entries.chunks(d * d).take(2).enumerate() {
        let q = orthogonal(d, chunk);
        let cols: Vec<Vec<f64>> = (0..d).map(|j| q.column(j).iter().copied().collect()).collect();
        let split = if k == 0 { cut.clamp(1, d) } else { d };
        items.push(FrameItem {
            weight: 0.5,
            basis: cols[..split].to_vec(),
        });
        if split < d {
            items.push(FrameItem {
                weight: 0.5,
                basis: cols[split..].to_vec(),
            });
        }
    }
    FrameSpec { ambient_dim: d, items }
}

fn spd(d: usize, entries: &[f64], shift: f64) -> Vec<Vec<f64>> {
    let a = DMatrix::from_fn(d, d, |i, j| entries[i * d + j]);
    let s = &a * a.transpose() + DMatrix::identity(d, d) * shift;
    (0..d).map(|i| (0..d).map(|j| s[(i, j)]).collect()).collect()
}

fn random_mixture(d: usize, raw_weights: &[f64], means: &[f64], covs: &[f64]) -> MixtureSpec {
    let total: f64 = raw_weights.iter().sum();
    MixtureSpec {
        dim: d,
        components: raw_weights
            .iter()
            .enumerate()
            .map(|(k, w)| ComponentSpec {
                weight: w / total,
                mean: means[k * d..(k + 1) * d].to_vec(),
                cov: spd(d, &covs[k * d * d..(k + 1) * d * d], 0.2),
            })
            .collect(),
    }
}

fn mixture_strategy() -> impl Strategy<Value = MixtureSpec> {
    (1usize..=3, 1usize..=3).prop_flat_map(|(d, k)| {
        (
            prop::collection::vec(0.1f64..1.0, k),
            prop::collection::vec(-2.0f64..2.0, k * d),
            prop::collection::vec(-1.0f64..1.0, k * d * d),
        )
            .prop_map(move |(w, m, c)| random_mixture(d, &w, &m, &c))
    })
}

fn frame_strategy() -> impl Strategy<Value = FrameSpec> {
    (2usize..=4).prop_flat_map(|d| {
        (prop::collection::vec(-1.0f64..1.0, 2 * d * d), 1usize..=d)
            .prop_map(move |(e, cut)| random_frame(d, &e, cut))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_mixtures_validate(spec in mixture_strategy()) {
        prop_assert!(spec.clone().validate().is_ok());
        prop_assert!(Mixture::new(&spec).is_ok());
    }

    #[test]
    fn rescaled_weights_are_rejected(spec in mixture_strategy(), factor in 1.01f64..2.0) {
        let mut bad = spec;
        bad.components.iter_mut().for_each(|c| c.weight *= factor);
        let rejected = matches!(
            bad.validate(),
            Err(MeasureError::WeightsNotNormalized { .. }) | Err(MeasureError::NonPositiveWeight { .. })
        );
        prop_assert!(rejected);
    }

    #[test]
    fn negative_eigenvalue_is_rejected(spec in mixture_strategy(), k in 0usize..3) {
        let mut bad = spec;
        let k = k % bad.components.len();
        bad.components[k].cov[0][0] = -0.1;
        let err = bad.validate();
        let names_component = matches!(err, Err(MeasureError::CovNotPD { component, .. }) if component == k);
        prop_assert!(names_component);
    }

    #[test]
    fn sampling_depends_only_on_seed(spec in mixture_strategy(), seed in any::<u64>()) {
        let m = Mixture::new(&spec).unwrap();
        prop_assert_eq!(m.sample(50, seed), m.sample(50, seed));
    }

    #[test]
    fn standard_error_is_sample_sd_over_root_n(xs in prop::collection::vec(-10.0f64..10.0, 2..200)) {
        let e = Estimate::from_samples(&xs, 0);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assert!((e.value - mean).abs() < 1e-12);
        prop_assert!((e.std_error - (var / n).sqrt()).abs() < 1e-12);
        prop_assert_eq!(e.n_samples, xs.len());
    }

    #[test]
    fn random_frames_satisfy_parseval(frame in frame_strategy()) {
        let diag = frame_validate(&frame).unwrap();
        prop_assert!(diag.max_parseval_error <= 1e-10);
        prop_assert!(diag.frobenius_error <= 1e-10);
    }

    #[test]
    fn cauchy_schwarz_margin_is_nonnegative(frame in frame_strategy(), pts in prop::collection::vec(-3.0f64..3.0, 64)) {
        let d = frame.ambient_dim;
        let points: Vec<Vec<f64>> = (0..frame.len())
            .map(|i| frame.project(i, &pts[(i * d) % 48..(i * d) % 48 + d]))
            .collect();
        let r = cauchy_schwarz_probe(&frame, &points).unwrap();
        prop_assert!(r.margin >= -1e-12 * (1.0 + r.rhs.value()));
        prop_assert_ne!(r.verdict, Verdict::ViolationFlagged);
    }

    #[test]
    fn common_vector_gives_cauchy_schwarz_equality(frame in frame_strategy(), v in prop::collection::vec(-3.0f64..3.0, 4)) {
        let v = &v[..frame.ambient_dim];
        let points: Vec<Vec<f64>> = (0..frame.len()).map(|i| frame.project(i, v)).collect();
        let r = cauchy_schwarz_probe(&frame, &points).unwrap();
        prop_assert!(r.margin.abs() <= 1e-12 * (1.0 + r.rhs.value()));
    }

    #[test]
    fn bl_superadditivity_holds_for_random_gaussians(
        frame in frame_strategy(),
        mean in prop::collection::vec(-2.0f64..2.0, 4),
        cov in prop::collection::vec(-1.0f64..1.0, 16),
    ) {
        let d = frame.ambient_dim;
        let spec = MixtureSpec::gaussian(mean[..d].to_vec(), spd(d, &cov[..d * d], 0.1));
        let r = bl_superadditivity_check(&frame, &spec).unwrap();
        prop_assert!(r.margin >= -1e-10, "margin {}", r.margin);
    }

    #[test]
    fn verdict_matches_threshold(margin in -5.0f64..5.0, se in 0.0f64..1.0, allowance in 0.0f64..1.0) {
        let tol = 3.0 * se + allowance + 1e-12 * 3.0;
        let v = classify(margin, se, allowance, 1.0, 1.0);
        let expected = if margin > tol {
            Verdict::HoldsWithMargin
        } else if margin >= -tol {
            Verdict::WithinNoise
        } else {
            Verdict::ViolationFlagged
        };
        prop_assert_eq!(v, expected);
    }

    #[test]
    fn standard_target_has_zero_drift_everywhere(d in 1usize..4, t in 0.0f64..0.999, x in prop::collection::vec(-5.0f64..5.0, 3)) {
        let drift = mixture_drift_closed(&MixtureSpec::standard(d)).unwrap();
        let mut u = vec![1.0; d];
        drift.evaluate(t, &x[..d], &mut u).unwrap();
        prop_assert!(u.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn drift_at_time_zero_is_mean(spec in mixture_strategy()) {
        // u_0(0) = grad log P_1 rho (0) = E_nu[X]
        let drift = MixtureDrift::new(&spec).unwrap();
        let mut u = vec![0.0; spec.dim];
        drift.gradient(0.0, &vec![0.0; spec.dim], &mut u);
        let mean = Mixture::new(&spec).unwrap().mean();
        for (a, b) in u.iter().zip(&mean) {
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn rotation_by_zero_is_identity(eta in mixture_strategy()) {
        let xi = MixtureSpec::standard(eta.dim);
        let combined = rotate_combine(&eta, &xi, 0.0).unwrap();
        let m = Mixture::new(&combined).unwrap();
        let e = Mixture::new(&eta).unwrap();
        for x in e.sample(5, 1) {
            prop_assert!((m.log_density(&x) - e.log_density(&x)).abs() < 1e-10);
        }
    }
}
