// SPDX-License-Identifier: Apache-2.0

use cmprobe::actstore::{Label, ScoreSet, Split, UtteranceRecord};
use cmprobe::evalkit::compute_eer;
use cmprobe::fusekit::{calibrate, cllr, fit_calibration, fit_fusion, fuse_lr, FusionConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn records(n: usize) -> Vec<UtteranceRecord> {
    (0..2 * n)
        .map(|i| UtteranceRecord {
            utt_id: format!("t{i:07}"),
            path: String::new(),
            label: if i < n { Label::Bonafide } else { Label::Spoof },
            corpus: "fuse".into(),
            attack: String::new(),
            split: Split::Fusion,
        })
        .collect()
}

/// Scores drawn from N(+1, 2) for bona fide and N(-1, 2) for spoof, whose
/// log-likelihood ratio is the score itself.
fn true_llrs(recs: &[UtteranceRecord], seed: u64) -> ScoreSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 2f64.sqrt()).unwrap();
    ScoreSet::from_pairs(
        "llr",
        recs.iter().map(|r| {
            let mean = if r.label == Label::Bonafide { 1.0 } else { -1.0 };
            (r.utt_id.clone(), mean + noise.sample(&mut rng))
        }),
    )
    .unwrap()
}

#[test]
fn calibrated_llrs_are_left_alone() {
    let recs = records(50_000);
    let s = true_llrs(&recs, 1);
    let config = FusionConfig::default();
    let cal = fit_calibration(&s, &recs, &config).unwrap();
    assert!((cal.a - 1.0).abs() <= 0.1 && cal.b.abs() <= 0.1, "{cal:?}");
    assert!(!cal.negative_scale());
    let model = fit_fusion(std::slice::from_ref(&s), &recs, &config).unwrap();
    assert!((model.alpha[0] - 1.0).abs() <= 0.1 && model.beta.abs() <= 0.1);

    let scaled = s.map("x10", |v| 10.0 * v);
    let cal10 = fit_calibration(&scaled, &recs, &config).unwrap();
    assert!((cal10.a - 0.1).abs() <= 0.02, "{cal10:?}");

    let flipped: Vec<UtteranceRecord> = recs
        .iter()
        .map(|r| UtteranceRecord {
            label: r.label.swapped(),
            ..r.clone()
        })
        .collect();
    let neg = fit_calibration(&s, &flipped, &config).unwrap();
    assert!(neg.negative_scale());
}

#[test]
fn duplicate_and_constant_systems_add_nothing() {
    let recs = records(2_000);
    let s = true_llrs(&recs, 2).map("a", |v| 0.7 * v + 0.3);
    let config = FusionConfig::default();
    let single = fuse_lr(&fit_fusion(std::slice::from_ref(&s), &recs, &config).unwrap(), &[s.clone()]).unwrap();
    let single_eer = compute_eer(&single, &recs).unwrap();

    let twin = s.map("b", |v| v);
    let both = [s.clone(), twin];
    let fused = fuse_lr(&fit_fusion(&both, &recs, &config).unwrap(), &both).unwrap();
    assert!((compute_eer(&fused, &recs).unwrap() - single_eer).abs() <= 1e-9);
    // Equal up to the small coefficient penalty, which splits across the twins.
    for (id, v) in &fused.entries {
        assert!((v - single.entries[id]).abs() < 1e-4);
    }

    let constant = s.map("c", |_| 4.0);
    let with_constant = [s.clone(), constant];
    let m = fit_fusion(&with_constant, &recs, &config).unwrap();
    let fused = fuse_lr(&m, &with_constant).unwrap();
    assert!((compute_eer(&fused, &recs).unwrap() - single_eer).abs() <= 1e-9);
}

#[test]
fn calibration_keeps_eer() {
    let recs = records(500);
    let s = true_llrs(&recs, 3).map("s", |v| 3.0 * v - 2.0);
    let cal = fit_calibration(&s, &recs, &FusionConfig::default()).unwrap();
    assert!(cal.a > 0.0);
    let calibrated = calibrate(&cal, &s).unwrap();
    assert_eq!(compute_eer(&calibrated, &recs).unwrap(), compute_eer(&s, &recs).unwrap());
}

#[test]
fn fits_are_bit_reproducible() {
    let recs = records(300);
    let a = true_llrs(&recs, 4);
    let b = true_llrs(&recs, 5).map("other", |v| -0.5 * v + 1.0);
    let config = FusionConfig::default();
    let m1 = fit_fusion(&[a.clone(), b.clone()], &recs, &config).unwrap();
    let m2 = fit_fusion(&[b, a], &recs, &config).unwrap();
    assert_eq!(serde_json::to_string(&m1).unwrap(), serde_json::to_string(&m2).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn adding_a_system_never_hurts(seed in 0u64..1_000, scale in 0.1f64..3.0, shift in -2.0f64..2.0) {
        let recs = records(150);
        let base = true_llrs(&recs, seed).map("base", |v| scale * v + shift);
        let extra = true_llrs(&recs, seed + 10_000).map("extra", |v| 0.5 * v);
        let config = FusionConfig::default();
        let small = fit_fusion(std::slice::from_ref(&base), &recs, &config).unwrap();
        let both = [base.clone(), extra];
        let large = fit_fusion(&both, &recs, &config).unwrap();
        let c_small = cllr(&fuse_lr(&small, &[base]).unwrap(), &recs, 0.5).unwrap();
        let c_large = cllr(&fuse_lr(&large, &both).unwrap(), &recs, 0.5).unwrap();
        prop_assert!(c_large <= c_small + 1e-6, "{c_large} > {c_small}");
    }
}
