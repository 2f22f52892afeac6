//! Property-based invariants over the dataset, region, layer, and metric
//! operations.

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use evcp_core::dataset::{chronological_split, interpolate_linear};
use evcp_core::evaluation::metrics;
use evcp_core::layers::{gumbel_softmax, NoiseMode};
use evcp_core::region::{tfidf, PoiCorpus};
use evcp_core::tape::Tape;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Splits are a partition of [0, T) with the 6:1:3 floor rounding.
    #[test]
    fn split_partitions_the_axis(t in 10usize..50_000) {
        let s = chronological_split(t, (6, 1, 3)).unwrap();
        prop_assert_eq!(s.train.start, 0);
        prop_assert_eq!(s.train.end, s.val.start);
        prop_assert_eq!(s.val.end, s.test.start);
        prop_assert_eq!(s.test.end, t);
        prop_assert_eq!(s.train.len(), t * 6 / 10);
        prop_assert_eq!(s.val.len(), t / 10);
    }

    /// Linear interpolation reproduces affine signals exactly.
    #[test]
    fn interpolation_exact_on_affine(a in -100.0f64..100.0, b in -5.0f64..5.0, n in 3usize..20) {
        let times: Vec<usize> = (0..n).map(|i| i * 6).collect();
        let values: Vec<f64> = times.iter().map(|&t| a + b * t as f64).collect();
        let out_len = times[n - 1] + 1;
        let dense = interpolate_linear(&times, &values, out_len).unwrap();
        for (t, v) in dense.iter().enumerate() {
            let want = a + b * t as f64;
            prop_assert!((v - want).abs() < 1e-9 * (1.0 + want.abs()), "t={} v={} want={}", t, v, want);
        }
    }

    /// Tempered softmax rows are stochastic and shift-invariant (zero noise).
    #[test]
    fn gumbel_rows_stochastic_and_shift_invariant(
        scores in proptest::collection::vec(-5.0f64..5.0, 2..9),
        shift in -10.0f64..10.0,
        temp in 0.05f64..10.0,
    ) {
        let n = scores.len();
        let mut t = Tape::new();
        let s = t.leaf(ndarray::Array1::from(scores.clone()).into_dyn());
        let shifted_scores: Vec<f64> = scores.iter().map(|v| v + shift).collect();
        let s2 = t.leaf(ndarray::Array1::from(shifted_scores).into_dyn());
        let w1 = gumbel_softmax(&mut t, s, temp, NoiseMode::Zero).unwrap();
        let w2 = gumbel_softmax(&mut t, s2, temp, NoiseMode::Zero).unwrap();
        let sum: f64 = t.value(w1).iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        for i in 0..n {
            let (a, b) = (t.value(w1)[[i]], t.value(w2)[[i]]);
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-9, "shift invariance: {} vs {}", a, b);
        }
    }

    /// Sampled gumbel rows stay stochastic for any seed.
    #[test]
    fn gumbel_sampled_rows_sum_to_one(seed in any::<u64>(), temp in 0.2f64..5.0) {
        let mut t = Tape::new();
        let s = t.leaf(Array2::from_shape_fn((8, 6), |(i, j)| (i as f64 - j as f64) * 0.3).into_dyn());
        let w = gumbel_softmax(&mut t, s, temp, NoiseMode::Sampled { seed }).unwrap();
        for row in t.value(w).rows() {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    /// Scaling one area's POI counts by a positive integer leaves its TF-IDF
    /// row unchanged (tf is a ratio, document frequencies are untouched).
    #[test]
    fn tfidf_row_scale_invariance(
        rows in proptest::collection::vec(proptest::collection::vec(0u64..20, 4), 3..8),
        scale in 2u64..9,
        pick in 0usize..8,
    ) {
        // ensure every area has at least one POI
        let mut counts: Vec<Vec<u64>> = rows;
        for r in counts.iter_mut() {
            if r.iter().all(|&v| v == 0) {
                r[0] = 1;
            }
        }
        let n = counts.len();
        let k = counts[0].len();
        let pick = pick % n;
        let flat: Vec<u64> = counts.iter().flatten().cloned().collect();
        let base = PoiCorpus {
            counts: Array2::from_shape_vec((n, k), flat).unwrap(),
            categories: (0..k).map(|i| format!("c{i}")).collect(),
            area_ids: (0..n).map(|i| format!("a{i}")).collect(),
        };
        let mut scaled = base.clone();
        scaled.counts.row_mut(pick).mapv_inplace(|v| v * scale);
        let (u1, u2) = (tfidf(&base).unwrap(), tfidf(&scaled).unwrap());
        for c in 0..k {
            prop_assert!((u1.scores[[pick, c]] - u2.scores[[pick, c]]).abs() < 1e-12);
        }
    }

    /// Scaling predictions and targets by c > 0 scales RMSE/MAE by c and
    /// leaves RAE and R2 unchanged.
    #[test]
    fn metrics_scale_consistency(seed in any::<u64>(), c in 0.01f64..50.0) {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pred = Array3::from_shape_fn((5, 3, 2), |_| rng.random_range(0.0..1.0));
        let tgt = Array3::from_shape_fn((5, 3, 2), |_| rng.random_range(0.0..1.0));
        let r1 = metrics(&pred, &tgt, &[1, 2], 5).unwrap();
        let r2 = metrics(&pred.mapv(|v| c * v), &tgt.mapv(|v| c * v), &[1, 2], 5).unwrap();
        for (a, b) in r1.horizons.iter().zip(&r2.horizons) {
            prop_assert!((a.rmse * c - b.rmse).abs() < 1e-9 * (1.0 + b.rmse));
            prop_assert!((a.mae * c - b.mae).abs() < 1e-9 * (1.0 + b.mae));
            prop_assert!((a.rae.unwrap() - b.rae.unwrap()).abs() < 1e-9);
            prop_assert!((a.r2.unwrap() - b.r2.unwrap()).abs() < 1e-7);
        }
    }

    /// R2 is at most 1, with equality only for a perfect fit.
    #[test]
    fn r2_bounded_above(seed in any::<u64>()) {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pred = Array3::from_shape_fn((6, 2, 1), |_| rng.random_range(0.0..1.0));
        let tgt = Array3::from_shape_fn((6, 2, 1), |_| rng.random_range(0.0..1.0));
        let r = metrics(&pred, &tgt, &[1], 5).unwrap();
        let r2 = r.horizons[0].r2.unwrap();
        prop_assert!(r2 <= 1.0);
        if (r2 - 1.0).abs() < 1e-12 {
            for (p, t) in pred.iter().zip(tgt.iter()) {
                prop_assert!((p - t).abs() < 1e-9);
            }
        }
    }
}

/// Window-count formula against brute-force enumeration for every admissible
/// range length up to 200 (plus shorter rejections).
#[test]
fn window_count_formula_vs_enumeration() {
    use evcp_core::dataset::{make_windows, CovariateSeries, DemandSeries};
    let t = 260usize;
    let demand = DemandSeries {
        values: Array2::from_shape_fn((2, t), |(a, s)| ((a + s) as f64 * 0.003) % 1.0),
        area_ids: vec!["x".into(), "y".into()],
        step_minutes: 5,
        start_time: "2024-01-01T00:00".into(),
    };
    let cov = CovariateSeries {
        price: Array2::zeros((2, t)),
        temperature: Array2::zeros((2, t)),
    };
    let tau = 7;
    let horizons = [3usize, 5];
    for len in 1..=200usize {
        let range = 20..20 + len;
        let result = make_windows(&demand, &cov, &range, tau, &horizons);
        let brute: Vec<usize> = (range.start..range.end)
            .filter(|&anchor| anchor + 1 >= range.start + tau && anchor + 5 < range.end)
            .collect();
        match result {
            Ok(batch) => {
                assert_eq!(batch.len(), brute.len(), "len {len}");
                assert_eq!(batch.len(), len - tau - 5 + 1);
                assert_eq!(batch.anchors, brute);
            }
            Err(_) => assert!(brute.is_empty(), "len {len} should admit windows"),
        }
    }
}
