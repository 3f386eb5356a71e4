//! Property-based checks of metric, scoring, objective and configuration invariants.

mod common;

use ndarray::Array2;
use proptest::prelude::*;

use dinolab::metrics::{aupro, auroc, average_precision, f1_max};
use dinolab::objective::{plain_cosine_loss, GroupPair};
use dinolab::runtime::RunConfig;
use dinolab::scoring::{image_score, object_score, token_map};

fn labelled(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2..max).prop_flat_map(|n| {
        (prop::collection::vec(0u32..40, n), prop::collection::vec(0u8..2, n)).prop_map(|(s, mut l)| {
            l[0] = 0;
            l[1] = 1;
            (s.into_iter().map(|v| v as f64 / 40.0).collect(), l)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ranking_metrics_ignore_monotone_transforms((scores, labels) in labelled(48)) {
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() * 7.0 - 2.0).collect();
        for metric in [auroc, average_precision, f1_max] {
            let (a, b) = (metric(&scores, &labels).unwrap(), metric(&warped, &labels).unwrap());
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn negating_scores_complements_auroc(perm in Just((0..30).collect::<Vec<u32>>()).prop_shuffle(), seed in 0u64..1000) {
        let scores: Vec<f64> = perm.iter().map(|&v| v as f64).collect();
        let labels: Vec<u8> = (0..30).map(|i| ((i as u64 * 7 + seed) % 3 == 0) as u8).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let total = auroc(&scores, &labels).unwrap() + auroc(&neg, &labels).unwrap();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_metrics_agree_with_oracles((scores, labels) in labelled(64)) {
        prop_assert!((auroc(&scores, &labels).unwrap() - common::auroc_pairs(&scores, &labels)).abs() < 1e-9);
        prop_assert!((average_precision(&scores, &labels).unwrap() - common::ap_steps(&scores, &labels)).abs() < 1e-9);
        prop_assert!((f1_max(&scores, &labels).unwrap() - common::f1_scan(&scores, &labels)).abs() < 1e-9);
    }

    #[test]
    fn single_region_aupro_at_full_range_is_pixel_auroc(
        h in 3usize..12, w in 3usize..12,
        y0 in 0usize..3, x0 in 0usize..3, rh in 1usize..4, rw in 1usize..4,
        values in prop::collection::vec(0u32..16, 144),
    ) {
        let mask = Array2::from_shape_fn((h, w), |(y, x)| y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw);
        prop_assume!(mask.iter().any(|&b| b) && mask.iter().any(|&b| !b));
        let map = Array2::from_shape_fn((h, w), |(y, x)| values[y * w + x] as f32 / 16.0);
        let pro = aupro(&[map.view()], &[mask.view()], 1.0).unwrap();
        let scores: Vec<f64> = map.iter().map(|&v| v as f64).collect();
        let labels: Vec<u8> = mask.iter().map(|&b| b as u8).collect();
        let roc = auroc(&scores, &labels).unwrap();
        prop_assert!((pro - roc).abs() < 1e-9, "aupro {pro} vs auroc {roc}");
    }

    #[test]
    fn raising_a_pixel_never_lowers_the_image_score(
        values in prop::collection::vec(0.0f32..1.0, 64), idx in 0usize..64, bump in 0.0f32..2.0, z in 0.5f64..100.0,
    ) {
        let map = Array2::from_shape_vec((8, 8), values).unwrap();
        let mut raised = map.clone();
        raised[[idx / 8, idx % 8]] += bump;
        prop_assert!(image_score(raised.view(), z).unwrap() >= image_score(map.view(), z).unwrap());
    }

    #[test]
    fn object_score_ignores_view_order(
        a in prop::collection::vec(0.0f32..1.0, 30), b in prop::collection::vec(0.0f32..1.0, 30), z in 1.0f64..50.0,
    ) {
        let (ma, mb) = (Array2::from_shape_vec((5, 6), a).unwrap(), Array2::from_shape_vec((5, 6), b).unwrap());
        let ab = object_score(&[ma.view(), mb.view()], z).unwrap();
        let ba = object_score(&[mb.view(), ma.view()], z).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn token_maps_and_losses_stay_in_range(
        t in prop::collection::vec(-3.0f32..3.0, 48), r in prop::collection::vec(-3.0f32..3.0, 48),
    ) {
        let (t, r) = (Array2::from_shape_vec((12, 4), t).unwrap(), Array2::from_shape_vec((12, 4), r).unwrap());
        let map = token_map(&[(t.view(), r.view())], (3, 4)).unwrap();
        prop_assert!(map.iter().all(|&v| (0.0..=2.0).contains(&v)));
        let loss = plain_cosine_loss(&[GroupPair { target: t.clone(), recon: r.clone() }], 3).unwrap().loss;
        prop_assert!((0.0..=2.0 + 1e-12).contains(&loss));
        let own = plain_cosine_loss(&[GroupPair { target: t.clone(), recon: t.clone() }], 3).unwrap().loss;
        prop_assert!(own.abs() < 1e-6);
    }

    #[test]
    fn numeric_overrides_land_on_their_keys(iters in 1u64..100_000, rate in 0.0f64..0.99) {
        let cfg = RunConfig::from_toml("", &[
            format!("train.total_iters={iters}"),
            format!("bottleneck.dropout_rate={rate}"),
        ]).unwrap();
        prop_assert_eq!(cfg.train.total_iters, iters);
        prop_assert_eq!(cfg.bottleneck.dropout_rate, rate);
    }
}

#[test]
fn overrides_accept_strings_enums_and_lists() {
    let cfg = RunConfig::from_toml(
        "",
        &[
            "encoder.weight_id=toy:depth=12".into(),
            "objective.scheme=group4".into(),
            "encoder.layers=[2,3,4,5,6,7,8,9]".into(),
            "data.preset=\"visa\"".into(),
        ],
    )
    .unwrap();
    assert_eq!(cfg.encoder.weight_id, "toy:depth=12");
    assert_eq!(cfg.encoder.layers.as_deref(), Some(&[2, 3, 4, 5, 6, 7, 8, 9][..]));
    assert_eq!(cfg.train.total_iters, 40_000);
    assert!(cfg.to_toml().unwrap().contains("group4"));
}

#[test]
fn unknown_or_malformed_overrides_are_rejected() {
    for bad in ["train.no_such_key=1", "nosection.x=1", "train.total_iters", "train.batch_size=\"many\""] {
        assert!(RunConfig::from_toml("", &[bad.to_string()]).is_err(), "{bad} accepted");
    }
}
