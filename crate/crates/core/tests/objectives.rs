mod common;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ruig::codec::{build_target_sequence, BBox, Role, Variant};
use ruig::model::{build_memory, decode, sample_on_tape, Bound, KvCache, SampleOptions};
use ruig::objectives::{assign_rewards, ce_loss, pg_loss, score_samples, Baseline};
use ruig::tensor::{Graph, Tensor};

use common::*;

fn opts(variant: Variant, k: usize, forced: bool) -> SampleOptions {
    SampleOptions {
        k,
        force_structural: forced,
        format: variant.format(),
        digits: 2,
    }
}

/// Parameter gradients of the PG loss with log-probs from the sampling pass
/// (`rescore = false`) or from a separate teacher-forced pass.
fn pg_grads(
    variant: Variant,
    forced: bool,
    rescore: bool,
) -> (Vec<Vec<f64>>, BTreeMap<String, Vec<f64>>) {
    let cfg = tiny();
    let store = params(&cfg, 3);
    let image = random_image(&cfg, 4);
    let gt = BBox::from_array([2, 1, 9, 6]);
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &store, true);
    let mem = build_memory(&mut g, &p, &cfg, &image).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (samples, tape) = sample_on_tape(
        &mut g,
        &p,
        &cfg,
        &mem,
        &words(&[0, 5]),
        opts(variant, 6, forced),
        &mut rng,
    )
    .unwrap();
    let logps = if rescore {
        score_samples(&mut g, &p, &cfg, &mem, &samples, forced).unwrap()
    } else {
        tape
    };
    let values: Vec<Vec<f64>> = logps.iter().map(|&v| g.value(v).data().to_vec()).collect();
    for (s, v) in samples.iter().zip(&values) {
        assert_eq!(s.logprobs.len(), v.len());
        for (a, b) in s.logprobs.iter().zip(v) {
            assert!((a - b).abs() < 1e-10, "recorded {a} vs tape {b}");
        }
    }
    let rewards: Vec<_> = samples
        .iter()
        .map(|s| assign_rewards(s, &gt, variant, 16, 8, 2))
        .collect();
    let loss = pg_loss(&mut g, &logps, &rewards, Baseline::None).unwrap();
    let mut grads = g.backward(loss).unwrap();
    let named = p
        .iter()
        .map(|(n, &v)| (n.clone(), grads.take(v).unwrap()))
        .collect();
    (values, named)
}

#[test]
fn sampling_pass_logprobs_match_rescoring() {
    for (variant, forced) in [
        (Variant::BBox, true),
        (Variant::BBox, false),
        (Variant::CenterPoint, true),
    ] {
        let (va, ga) = pg_grads(variant, forced, false);
        let (vb, gb) = pg_grads(variant, forced, true);
        for (a, b) in va.iter().flatten().zip(vb.iter().flatten()) {
            assert!(
                (a - b).abs() < 1e-10,
                "{variant} forced={forced}: {a} vs {b}"
            );
        }
        for (name, a) in &ga {
            let b = &gb[name];
            for (x, y) in a.iter().zip(b) {
                assert!(
                    (x - y).abs() <= 1e-9 * (1.0 + x.abs()),
                    "{name}: {x} vs {y}"
                );
            }
        }
    }
}

#[test]
fn structural_positions_get_exactly_zero_gradient() {
    let cfg = tiny();
    let store = params(&cfg, 1);
    let image = random_image(&cfg, 2);
    let gt = BBox::from_array([0, 0, 15, 7]);
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &store, false);
    let mem = build_memory(&mut g, &p, &cfg, &image).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (samples, _) = sample_on_tape(
        &mut g,
        &p,
        &cfg,
        &mem,
        &words(&[1]),
        opts(Variant::BBox, 64, true),
        &mut rng,
    )
    .unwrap();

    let mut h = Graph::new();
    let leaves: Vec<_> = samples
        .iter()
        .map(|s| {
            h.leaf(
                Tensor::new(vec![s.logprobs.len(), 1], s.logprobs.clone())
                    .unwrap()
                    .with_grad(),
            )
        })
        .collect();
    let rewards: Vec<_> = samples
        .iter()
        .map(|s| assign_rewards(s, &gt, Variant::BBox, 16, 8, 2))
        .collect();
    assert!(
        rewards.iter().any(|r| r.score > 0.0),
        "need a rewarded sample"
    );
    let loss = pg_loss(&mut h, &leaves, &rewards, Baseline::Mean).unwrap();
    let grads = h.backward(loss).unwrap();
    for (s, &leaf) in samples.iter().zip(&leaves) {
        let gr = grads.get(leaf).unwrap();
        for (i, role) in s.target.roles().iter().enumerate() {
            if *role != Role::CoordValue {
                assert_eq!(gr[i], 0.0, "position {i} ({role:?})");
            }
        }
    }
}

#[test]
fn corrupting_instruction_logits_changes_nothing() {
    let cfg = tiny();
    let store = params(&cfg, 8);
    let image = random_image(&cfg, 9);
    let y = build_target_sequence(
        &words(&[2, 3, 4]),
        &BBox::from_array([1, 2, 8, 7]),
        Variant::BBox,
        2,
    )
    .unwrap();
    let target = y.tail(1);
    let rows = y.len() - 1;

    let run = |corrupt: bool| {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &store, true);
        let mem = build_memory(&mut g, &p, &cfg, &image).unwrap();
        let mut logits = decode(
            &mut g,
            &p,
            &cfg,
            &mem,
            &[y.ids()[..rows].to_vec()],
            &mut KvCache::new(),
        )
        .unwrap();
        if corrupt {
            let v = cfg.vocab_size;
            let noise: Vec<f64> = (0..rows * v)
                .map(|i| {
                    let r = i / v;
                    if target.roles()[r] == Role::Instruction {
                        ((i * 7919) % 1000) as f64 - 500.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let c = g.constant(vec![rows, v], noise).unwrap();
            logits = g.add(logits, c).unwrap();
        }
        let loss = ce_loss(&mut g, logits, &target).unwrap();
        let value = g.value(loss).item();
        let mut grads = g.backward(loss).unwrap();
        let named: BTreeMap<String, Vec<f64>> = p
            .iter()
            .map(|(n, &v)| (n.clone(), grads.take(v).unwrap()))
            .collect();
        (value, named)
    };
    let (a, ga) = run(false);
    let (b, gb) = run(true);
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}
