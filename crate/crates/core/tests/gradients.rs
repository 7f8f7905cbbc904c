// SPDX-License-Identifier: Apache-2.0

mod common;

use cmprobe::heads::{loss_and_grad, Example, HeadKind};
use common::{finite_difference_grad, random_instance};

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

#[test]
fn weighted_examples_match_finite_differences() {
    for kind in [HeadKind::Mp, HeadKind::Mhfa] {
        for seed in 100..110 {
            let mut inst = random_instance(kind, seed);
            inst.targets[0] = 1.0;
            let batch: Vec<Example<'_>> = inst
                .batch()
                .into_iter()
                .map(|mut ex| {
                    if ex.target == 1.0 {
                        ex.weight = 2.5;
                    }
                    ex
                })
                .collect();
            let (_, grads) = loss_and_grad(&batch, &inst.params).unwrap();
            let base = inst.params.to_flat();
            let loss_at = |flat: &[f64]| {
                let mut p = inst.params.clone();
                p.set_flat(flat).unwrap();
                loss_and_grad(&batch, &p).unwrap().0
            };
            for (i, a) in grads.to_flat().into_iter().enumerate() {
                let (mut plus, mut minus) = (base.clone(), base.clone());
                plus[i] += 1e-5;
                minus[i] -= 1e-5;
                let n = (loss_at(&plus) - loss_at(&minus)) / 2e-5;
                assert!(rel_err(a, n) < 1e-6, "{kind:?} seed {seed} coord {i}: {a} vs {n}");
            }
        }
    }
}

#[test]
fn unweighted_instances_match_finite_differences() {
    for kind in [HeadKind::Mp, HeadKind::Mhfa] {
        for seed in 200..210 {
            let inst = random_instance(kind, seed);
            let (_, grads) = loss_and_grad(&inst.batch(), &inst.params).unwrap();
            let fd = finite_difference_grad(&inst, 1e-5);
            for (i, (a, n)) in grads.to_flat().iter().zip(&fd).enumerate() {
                assert!(rel_err(*a, *n) < 1e-6, "{kind:?} seed {seed} coord {i}: {a} vs {n}");
            }
        }
    }
}

#[test]
fn attention_bias_gradient_vanishes() {
    // Softmax over frames ignores a per-head constant.
    for seed in 0..5 {
        let inst = random_instance(HeadKind::Mhfa, seed);
        let (_, grads) = loss_and_grad(&inst.batch(), &inst.params).unwrap();
        let cmprobe::heads::HeadParams::Mhfa(g) = grads else { unreachable!() };
        assert!(g.attn_bias.iter().all(|v| v.abs() < 1e-12));
    }
}
