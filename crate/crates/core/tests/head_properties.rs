// SPDX-License-Identifier: Apache-2.0

use cmprobe::actstore::ActivationTensor;
use cmprobe::heads::{init_params, mhfa_forward, mp_forward, softmax, HeadConfig, HeadKind, HeadParams};
use proptest::prelude::*;

fn tensor_strategy(layers: usize, feat: usize) -> impl Strategy<Value = ActivationTensor> {
    (1usize..9).prop_flat_map(move |frames| {
        prop::collection::vec(-5.0f32..5.0, layers * frames * feat)
            .prop_map(move |v| ActivationTensor::new(layers, frames, feat, v).unwrap())
    })
}

fn perturbed_mhfa(seed: u64, layers: usize, feat: usize) -> cmprobe::heads::MhfaParams {
    let mut p = init_params(HeadConfig::new(8, 2, layers, feat), HeadKind::Mhfa, seed).unwrap();
    let flat: Vec<f64> = p.to_flat().iter().enumerate().map(|(i, v)| v + ((i * 31 % 13) as f64 - 6.0) / 10.0).collect();
    p.set_flat(&flat).unwrap();
    match p {
        HeadParams::Mhfa(m) => m,
        _ => unreachable!(),
    }
}

proptest! {
    #[test]
    fn attention_columns_sum_to_one(z in tensor_strategy(3, 4), seed in 0u64..50) {
        let p = perturbed_mhfa(seed, 3, 4);
        let tr = mhfa_forward(&z, &p).unwrap();
        let h = p.config.n_heads;
        for head in 0..h {
            let s: f64 = (0..tr.n_frames).map(|t| tr.attn[t * h + head]).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        prop_assert!(tr.attn.iter().chain(&tr.keys).chain(&tr.vals).all(|v| v.is_finite()));
    }

    #[test]
    fn layer_weights_sum_to_one(raw in prop::collection::vec(-30.0f64..30.0, 1..50)) {
        let w = softmax(&raw);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn mp_is_exactly_frame_permutation_invariant(z in tensor_strategy(1, 5), seed in 0u64..50, rot in 0usize..8) {
        let HeadParams::MeanPool(p) = init_params(HeadConfig::new(6, 1, 1, 5), HeadKind::Mp, seed).unwrap() else { unreachable!() };
        let t = z.n_frames();
        let mut order: Vec<usize> = (0..t).rev().collect();
        order.rotate_left(rot % t);
        let zp = z.gather(&[0], &order).unwrap();
        let a = mp_forward(z.layer(0), &p).unwrap();
        let b = mp_forward(zp.layer(0), &p).unwrap();
        prop_assert_eq!(a.logit.to_bits(), b.logit.to_bits());
        prop_assert_eq!(a.embedding, b.embedding);
    }

    #[test]
    fn mhfa_is_frame_permutation_equivariant(z in tensor_strategy(3, 4), seed in 0u64..50, rot in 0usize..8) {
        let p = perturbed_mhfa(seed, 3, 4);
        let t = z.n_frames();
        let mut order: Vec<usize> = (0..t).rev().collect();
        order.rotate_left(rot % t);
        let zp = z.gather(&[0, 1, 2], &order).unwrap();
        let a = mhfa_forward(&z, &p).unwrap();
        let b = mhfa_forward(&zp, &p).unwrap();
        let (d, h) = (p.config.embed_dim, p.config.n_heads);
        for (new_t, &old_t) in order.iter().enumerate() {
            for j in 0..d {
                prop_assert!((a.keys[old_t * d + j] - b.keys[new_t * d + j]).abs() < 1e-12);
                prop_assert!((a.vals[old_t * d + j] - b.vals[new_t * d + j]).abs() < 1e-12);
            }
            for k in 0..h {
                prop_assert!((a.attn[old_t * h + k] - b.attn[new_t * h + k]).abs() < 1e-12);
            }
        }
        for (x, y) in a.embedding.iter().zip(&b.embedding) {
            prop_assert!((x - y).abs() < 1e-10);
        }
        prop_assert!((a.logit - b.logit).abs() < 1e-10);
    }
}
