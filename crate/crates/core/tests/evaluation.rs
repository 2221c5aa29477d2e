use std::collections::BTreeMap;

use driftseg_core::data::{synth_domain, benchmark_domains, Sample};
use driftseg_core::evaluation::*;
use driftseg_core::model::{Model, ModelConfig};
use driftseg_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-pixel brute force: counts of (gt == a && pred == b).
fn oracle_counts(pred: &[u8], gt: &[u8]) -> [[u64; 5]; 5] {
    let mut out = [[0u64; 5]; 5];
    for a in 0..5u8 {
        for b in 0..5u8 {
            out[a as usize][b as usize] = pred.iter().zip(gt).filter(|(&p, &g)| g == a && p == b).count() as u64;
        }
    }
    out
}

fn oracle_f1(pred: &[u8], gt: &[u8], in_class: impl Fn(u8) -> bool) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fneg = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        match (in_class(g), in_class(p)) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fneg += 1.0,
            _ => {}
        }
    }
    if tp + fp + fneg == 0.0 {
        1.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fneg)
    }
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    // Skewed toward background and sometimes missing classes entirely.
    let allowed: Vec<u8> = (0..5).filter(|_| rng.gen_bool(0.8)).collect();
    let allowed = if allowed.is_empty() { vec![0] } else { allowed };
    (0..n).map(|_| allowed[rng.gen_range(0..allowed.len())]).collect()
}

#[test]
fn thousand_random_pairs_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let gt = random_mask(&mut rng, 256);
        let pred = random_mask(&mut rng, 256);
        let cm = ConfusionMatrix::from_masks(&pred, &gt).unwrap();
        assert_eq!(cm.counts, oracle_counts(&pred, &gt));
        let loc = oracle_f1(&pred, &gt, |c| c > 0);
        assert!((loc_f1(&cm) - loc).abs() <= 1e-12);
        let per: Vec<f64> = (1..5u8).map(|k| oracle_f1(&pred, &gt, |c| c == k)).collect();
        for k in 1..5 {
            assert!((f1(&cm, k) - per[k - 1]).abs() <= 1e-12);
        }
        let hm = 4.0 / per.iter().map(|f| 1.0 / f.max(1e-6)).sum::<f64>();
        assert!((dmg_f1(&cm) - hm).abs() <= 1e-12);
        assert!((xview2(loc_f1(&cm), dmg_f1(&cm)) - (0.3 * loc + 0.7 * hm)).abs() <= 1e-12);
    }
}

#[test]
fn confusion_examples() {
    let gt = vec![0, 1, 2, 3, 4, 4];
    let cm = ConfusionMatrix::from_masks(&gt, &gt).unwrap();
    for a in 0..5 {
        for b in 0..5 {
            assert_eq!(cm.counts[a][b] > 0, a == b);
        }
    }
    let cm = ConfusionMatrix::from_masks(&[4; 7], &[0; 7]).unwrap();
    assert_eq!(cm.counts[0][4], 7);
    assert_eq!(cm.total(), 7);
    assert!(matches!(ConfusionMatrix::from_masks(&[5], &[0]), Err(Error::OutOfRange(_))));
    assert!(ConfusionMatrix::from_masks(&[0, 1], &[0]).is_err());
}

#[test]
fn f1_examples() {
    // TP=1, FP=1, FN=1 for class 2.
    let cm = ConfusionMatrix::from_masks(&[2, 2, 0], &[2, 0, 2]).unwrap();
    assert_eq!(f1(&cm, 2), 0.5);
    assert_eq!(f1(&cm, 3), 1.0);
    assert_eq!(f1_with(&cm, 3, AbsentClassRule::Excluded), None);
    let all_building = ConfusionMatrix::from_masks(&[0; 4], &[1, 2, 3, 4]).unwrap();
    assert_eq!(loc_f1(&all_building), 0.0);
    assert!(dmg_f1(&all_building) < 1e-5);
    assert_eq!(xview2(1.0, 1.0), 1.0);
}

#[test]
fn dmg_and_xview2_example() {
    assert!((harmonic_damage(&[Some(0.5); 4], 1e-6) - 0.5).abs() < 1e-15);
    assert!((xview2(0.8, 0.5) - 0.59).abs() < 1e-12);
    assert!(harmonic_damage(&[Some(0.0), Some(0.9), Some(0.9), Some(0.9)], 1e-6) < 1e-5);
    assert_eq!(harmonic_damage(&[None, Some(0.5), None, None], 1e-6), 0.5);
}

#[test]
fn gap_and_gain_reproduce_printed_values() {
    assert!((gap(0.74, 0.44) - 0.30).abs() < 1e-12);
    assert!((gain(0.59, 0.44) - 0.15).abs() < 1e-12);
    assert_eq!(gap(0.37, 0.37), 0.0);
}

#[test]
fn fold_summary_examples() {
    let s = fold_summary(&[0.5, 0.6, 0.7]).unwrap();
    assert!((s.mean - 0.6).abs() < 1e-12);
    assert!((s.std - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((s.std - 0.0816).abs() < 1e-4);
    assert_eq!(fold_summary(&[0.6, 0.6, 0.6]).unwrap().std, 0.0);
    assert_eq!(fold_summary(&[0.4]).unwrap().std, 0.0);
    assert!(fold_summary(&[]).is_err());
}

#[test]
fn report_json_round_trip() {
    let cm = ConfusionMatrix::from_masks(&[0, 1, 2, 2], &[0, 1, 2, 3]).unwrap();
    let r = MetricsReport::from_confusion("fold1", cm, &ScoreConfig::default());
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
}

fn tiny_data() -> Vec<Sample> {
    let specs = benchmark_domains();
    let mut out = synth_domain(&specs[0], 3, 32, 32).unwrap();
    out.extend(synth_domain(&specs[2], 2, 32, 32).unwrap());
    out
}

#[test]
fn evaluating_own_predictions_scores_one() {
    let model = Model::<f32>::build_two_stream(&ModelConfig::new(2, 4), 5).unwrap();
    let data = tiny_data();
    let refs: Vec<&Sample> = data.iter().collect();
    let preds = predict(&model, &refs, 2).unwrap();
    let relabeled: Vec<Sample> = data
        .iter()
        .zip(preds)
        .map(|(s, p)| Sample { mask: p, ..s.clone() })
        .collect();
    let refs: Vec<&Sample> = relabeled.iter().collect();
    let r = evaluate(ModelViews::Shared(&model), &refs, "self", 4, &ScoreConfig::default()).unwrap();
    assert_eq!((r.loc_f1, r.dmg_f1, r.xview2), (1.0, 1.0, 1.0));
    assert_eq!(r.domains.len(), 2);
    assert_eq!(r.n_pixels, 5 * 32 * 32);
}

#[test]
fn evaluation_is_batch_and_order_invariant() {
    let model = Model::<f32>::build_two_stream(&ModelConfig::new(2, 4), 6).unwrap();
    let data = tiny_data();
    let mut refs: Vec<&Sample> = data.iter().collect();
    let a = evaluate(ModelViews::Shared(&model), &refs, "x", 1, &ScoreConfig::default()).unwrap();
    refs.reverse();
    let b = evaluate(ModelViews::Shared(&model), &refs, "x", 3, &ScoreConfig::default()).unwrap();
    assert_eq!(a, b);
    let merged = merge(a.domains.values().map(|r| &r.confusion));
    assert_eq!(merged, a.confusion);
}

#[test]
fn per_domain_views_require_every_domain() {
    let model = Model::<f32>::build_two_stream(&ModelConfig::new(2, 4), 6).unwrap();
    let data = tiny_data();
    let refs: Vec<&Sample> = data.iter().collect();
    let mut views = BTreeMap::new();
    views.insert(data[0].domain_id.clone(), model.clone());
    let err = evaluate(ModelViews::PerDomain(&views), &refs, "x", 2, &ScoreConfig::default()).unwrap_err();
    assert!(matches!(err, Error::MissingDomainView(_)));
    views.insert(data[4].domain_id.clone(), model.clone());
    let per = evaluate(ModelViews::PerDomain(&views), &refs, "x", 2, &ScoreConfig::default()).unwrap();
    let shared = evaluate(ModelViews::Shared(&model), &refs, "x", 2, &ScoreConfig::default()).unwrap();
    assert_eq!(per, shared);
}

fn cm_strategy() -> impl Strategy<Value = ConfusionMatrix> {
    prop::array::uniform5(prop::array::uniform5(0u64..50)).prop_map(|counts| ConfusionMatrix { counts })
}

proptest! {
    #[test]
    fn scores_are_bounded(cm in cm_strategy()) {
        let r = MetricsReport::from_confusion("p", cm, &ScoreConfig::default());
        for v in [r.loc_f1, r.dmg_f1, r.xview2] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let per: Vec<f64> = r.f1_per_class.iter().map(|f| f.unwrap()).collect();
        let lo = per.iter().cloned().fold(f64::INFINITY, f64::min).max(1e-6);
        let hi = per.iter().cloned().fold(0.0, f64::max);
        let mean = per.iter().map(|f| f.max(1e-6)).sum::<f64>() / 4.0;
        prop_assert!(r.dmg_f1 >= lo - 1e-12 && r.dmg_f1 <= hi.max(1e-6) + 1e-12);
        prop_assert!(r.dmg_f1 <= mean + 1e-12);
    }

    #[test]
    fn merge_is_order_free(a in cm_strategy(), b in cm_strategy(), c in cm_strategy()) {
        prop_assert_eq!(merge([&a, &b, &c]), merge([&c, &a, &b]));
        prop_assert_eq!(merge([&a, &ConfusionMatrix::new()]), a);
    }

    #[test]
    fn per_image_merge_equals_concatenation(seed in any::<u64>(), images in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..images).map(|_| (random_mask(&mut rng, 64), random_mask(&mut rng, 64))).collect();
        let cms: Vec<ConfusionMatrix> = pairs.iter().map(|(p, g)| ConfusionMatrix::from_masks(p, g).unwrap()).collect();
        let all_p: Vec<u8> = pairs.iter().flat_map(|(p, _)| p.clone()).collect();
        let all_g: Vec<u8> = pairs.iter().flat_map(|(_, g)| g.clone()).collect();
        prop_assert_eq!(merge(&cms), ConfusionMatrix::from_masks(&all_p, &all_g).unwrap());
    }

    #[test]
    fn gap_is_bounded(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let g = gap(a, b);
        prop_assert!((-1.0..=1.0).contains(&g));
    }
}
