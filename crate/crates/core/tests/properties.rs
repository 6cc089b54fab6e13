use ndarray::{Array2, Axis};
use proptest::prelude::*;

use ffuse_core::refine::correlate;
use ffuse_core::{
    batch_refine_loss, cross_correlation, downsample, generate_pair, mean_normalize,
    mean_var_normalize, refine_loss, CorrelationMatrix, FeatureMatrix, SynthSpec,
};

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Array2<f64>> {
    (2..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-100.0..100.0f64, r * c)
            .prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

fn pair(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (2..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        let side = move || {
            prop::collection::vec(-10.0..10.0f64, r * c)
                .prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
        };
        (side(), side())
    })
}

fn correlation_entries() -> impl Strategy<Value = CorrelationMatrix> {
    (1..=6usize).prop_flat_map(|k| {
        prop::collection::vec(-1.0..=1.0f64, k * k).prop_map(move |v| {
            CorrelationMatrix::new(Array2::from_shape_vec((k, k), v).unwrap()).unwrap()
        })
    })
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, d| m.max(d.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mean_normalize_is_idempotent(x in matrix(20, 6)) {
        let x = FeatureMatrix::new(x, 20.0).unwrap();
        let once = mean_normalize(&x).unwrap();
        let twice = mean_normalize(&once).unwrap();
        prop_assert!(max_abs_diff(once.data(), twice.data()) < 1e-10);
        for m in once.data().mean_axis(Axis(0)).unwrap() {
            prop_assert!(m.abs() < 1e-10);
        }
    }

    #[test]
    fn mean_var_normalize_gives_unit_variance(x in matrix(20, 6)) {
        let x = FeatureMatrix::new(x, 20.0).unwrap();
        let z = mean_var_normalize(&x).unwrap();
        for (col, raw) in z.data().axis_iter(Axis(1)).zip(x.data().axis_iter(Axis(1))) {
            let spread = raw.iter().cloned().fold(f64::MIN, f64::max)
                - raw.iter().cloned().fold(f64::MAX, f64::min);
            let var = col.mapv(|v| v * v).mean().unwrap();
            if spread > 1e-6 {
                prop_assert!((var - 1.0).abs() < 1e-9, "variance {var}");
            } else {
                prop_assert!(var == 0.0);
            }
        }
    }

    #[test]
    fn average_pooling_preserves_column_means(
        windows in 1..=12usize,
        r in 1..=4usize,
        cols in 1..=5usize,
        seed in any::<u64>(),
    ) {
        let spec = SynthSpec { frames: windows * r, dims_u: cols, dims_v: 1, paired_dims: 1, seed, ..SynthSpec::default() };
        let (x, _) = generate_pair(&spec).unwrap();
        let x = FeatureMatrix::new(x.into_data(), 10.0).unwrap();
        let y = downsample(&x, 10.0 * r as f64).unwrap();
        prop_assert_eq!(y.frames(), windows);
        let before = x.data().mean_axis(Axis(0)).unwrap();
        let after = y.data().mean_axis(Axis(0)).unwrap();
        prop_assert!(max_abs_diff(&before.insert_axis(Axis(0)), &after.insert_axis(Axis(0))) < 1e-10);
    }

    #[test]
    fn correlations_are_bounded((u, v) in pair(30, 5)) {
        let c = correlate(u.view(), v.view()).unwrap().c;
        for x in c.iter() {
            prop_assert!(x.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn correlation_ignores_positive_scale_and_shift(
        (u, v) in pair(30, 4),
        scale in 0.01..50.0f64,
        shift in -100.0..100.0f64,
    ) {
        let base = correlate(u.view(), v.view()).unwrap().c;
        let moved = u.mapv(|x| scale * x + shift);
        let c = correlate(moved.view(), v.view()).unwrap().c;
        prop_assert!(max_abs_diff(&base, &c) < 1e-9);
    }

    #[test]
    fn refine_loss_is_monotone_in_epsilon(c in correlation_entries(), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(refine_loss(&c, lo) >= refine_loss(&c, hi));
    }

    #[test]
    fn refine_loss_at_zero_is_squared_frobenius_norm(c in correlation_entries()) {
        let frob = c.data().mapv(|v| v * v).sum();
        prop_assert!((refine_loss(&c, 0.0) - frob).abs() <= 1e-12 * frob.max(1.0));
    }

    #[test]
    fn refine_loss_is_never_negative(c in correlation_entries(), eps in 0.0..1.0f64) {
        prop_assert!(refine_loss(&c, eps) >= 0.0);
    }
}

#[test]
fn batch_loss_is_the_mean_over_utterances() {
    let mut batch = Vec::new();
    let mut expected = 0.0;
    for seed in 0..4 {
        let spec = SynthSpec {
            frames: 200,
            dims_u: 4,
            dims_v: 4,
            paired_dims: 4,
            rho: 0.2 * seed as f64,
            seed,
            ..SynthSpec::default()
        };
        let (u, v) = generate_pair(&spec).unwrap();
        expected += refine_loss(&cross_correlation(&u, &v).unwrap(), 0.1) / 4.0;
        batch.push((u, v));
    }
    let got = batch_refine_loss(&batch, 0.1).unwrap();
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn generation_is_seeded() {
    let spec = SynthSpec {
        frames: 500,
        dims_u: 6,
        dims_v: 5,
        paired_dims: 3,
        seed: 17,
        ..SynthSpec::default()
    };
    let (u1, v1) = generate_pair(&spec).unwrap();
    let (u2, v2) = generate_pair(&spec).unwrap();
    assert_eq!(u1, u2);
    assert_eq!(v1, v2);

    let (u3, _) = generate_pair(&SynthSpec { seed: 18, ..spec }).unwrap();
    assert_ne!(u1, u3);
}
