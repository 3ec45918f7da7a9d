mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidqa::assembly::{AssembledSequence, FeatureKind, Payload, Segment};
use vidqa::model::{cross_entropy, loss, Model, ModelConfig, Mode, Precision};
use vidqa::Error;

fn scrambled_micro(seed: u64) -> Model<f64> {
    let mut m = Model::new(micro_config()).unwrap();
    scramble(&mut m, 0.4, seed);
    m
}

#[test]
fn gradients_match_central_differences() {
    for seed in 0..3 {
        let model = scrambled_micro(seed);
        let (err, at) = max_gradient_error(&model, &micro_sequence(), 1e-4);
        assert!(err < 1e-4, "seed {seed}: {err:e} at {at}");
    }
}

#[test]
fn gradients_match_with_two_layers_and_fixed_dropout() {
    // Dropout masks come from a freshly seeded rng, so every loss evaluation sees the same mask.
    let cfg = ModelConfig {
        n_layers: 2,
        dropout_rate: 0.3,
        ..micro_config()
    };
    let mut model = Model::new(cfg).unwrap();
    scramble(&mut model, 0.4, 11);
    let seq = micro_sequence();
    let run = |m: &Model<f64>| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        m.forward(&seq.slots, Mode::Train(&mut rng)).unwrap()
    };
    let (err, at) = max_gradient_error_with(&model, &seq, 1e-4, run);
    assert!(err < 1e-4, "{err:e} at {at}");
}

#[test]
fn forward_matches_reference_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n_layers in 1..=2 {
        let cfg = ModelConfig {
            n_layers,
            d_model: 12,
            n_heads: 3,
            d_ff: 20,
            ..micro_config()
        };
        let mut model = Model::new(cfg.clone()).unwrap();
        scramble(&mut model, 0.5, n_layers as u64);
        let slots = random_slots(&mut rng, 7, &cfg);
        let trace = model.forward(&slots, Mode::Eval).unwrap();
        let want = reference_forward(&cfg, &model.params, &slots);
        for t in 0..slots.len() {
            for (a, b) in trace.logits_row(t).iter().zip(&want.logits[t]) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn hand_set_two_slot_forward() {
    // d_model 2, one head, every block weight zero: blocks become identity and
    // the logits are layer-normed embeddings against the token table.
    let cfg = ModelConfig {
        d_model: 2,
        n_layers: 1,
        n_heads: 1,
        d_ff: 2,
        max_seq_len: 2,
        ..micro_config()
    };
    let mut model: Model<f64> = Model::new(cfg.clone()).unwrap();
    for t in model.params.tensors_mut() {
        t.data.iter_mut().for_each(|x| *x = 0.0);
    }
    let p = &mut model.params;
    p.ln_f_gain.data = vec![1.0, 1.0];
    p.token_embedding.row_mut(13).copy_from_slice(&[1.0, 0.0]);
    p.token_embedding.row_mut(14).copy_from_slice(&[0.0, 2.0]);
    p.position_embedding.row_mut(1).copy_from_slice(&[0.5, 0.5]);
    let slots = vec![tok(13, Segment::Question, 0), tok(14, Segment::Question, 1)];
    let trace = model.forward(&slots, Mode::Eval).unwrap();
    // Slot 0 = (1, 0): mean 0.5, var 0.25 → LN = (0.5, -0.5) / sqrt(0.25 + eps).
    // Slot 1 = (0.5, 2.5): mean 1.5, var 1 → LN = (-1, 1) / sqrt(1 + eps).
    let r0 = 0.5 / (0.25f64 + 1e-5).sqrt();
    let r1 = 1.0 / (1.0f64 + 1e-5).sqrt();
    let row0 = trace.logits_row(0);
    let row1 = trace.logits_row(1);
    assert!((row0[13] - r0).abs() < 1e-12);
    assert!((row0[14] + 2.0 * r0).abs() < 1e-12);
    assert!((row1[13] + r1).abs() < 1e-12);
    assert!((row1[14] - 2.0 * r1).abs() < 1e-12);
    assert!(row0[..13].iter().all(|&x| x == 0.0));
}

#[test]
fn causality_is_bitwise() {
    let cfg = ModelConfig {
        precision: Precision::F32,
        ..micro_config()
    };
    let model: Model<f32> = Model::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let slots = random_slots(&mut rng, 8, &cfg);
        let t = rng.random_range(0..7);
        let mut changed = slots.clone();
        let tail = random_slots(&mut rng, 8, &cfg);
        changed[t + 1..].clone_from_slice(&tail[t + 1..]);
        let a = model.forward(&slots, Mode::Eval).unwrap();
        let b = model.forward(&changed, Mode::Eval).unwrap();
        for s in 0..=t {
            let bits = |r: &[f32]| r.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.logits_row(s)), bits(b.logits_row(s)));
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let model = scrambled_micro(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let slots = random_slots(&mut rng, 8, &model.config);
    let trace = model.forward(&slots, Mode::Eval).unwrap();
    for h in 0..2 {
        let att = trace.attention(0, h);
        for i in 0..8 {
            let row = &att[i * 8..(i + 1) * 8];
            assert!((row[..=i].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row[i + 1..].iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let model = scrambled_micro(5);
    let seq = micro_sequence();
    let a = model.forward(&seq.slots, Mode::Eval).unwrap().logits;
    let b = model.forward(&seq.slots, Mode::Eval).unwrap().logits;
    assert_eq!(a, b);
}

#[test]
fn embed_structure() {
    let model = scrambled_micro(6);
    let p = &model.params;
    let d = 8;
    let zero = vec![feat(FeatureKind::Video, vec![0.0; 3], 0)];
    let row = model.embed(&zero, &mut Mode::Eval).unwrap();
    for j in 0..d {
        let want = p.video_bias.data[j] + p.segment_embedding.row(0)[j] + p.position_embedding.row(0)[j];
        assert!((row[j] - want).abs() < 1e-15);
    }

    let same = vec![tok(14, Segment::Question, 2), tok(14, Segment::Question, 5)];
    let rows = model.embed(&same, &mut Mode::Eval).unwrap();
    for j in 0..d {
        let delta = p.position_embedding.row(5)[j] - p.position_embedding.row(2)[j];
        assert!((rows[d + j] - rows[j] - delta).abs() < 1e-12);
    }

    let v = vec![0.3, -0.7, 1.9];
    let single = model.embed(&[feat(FeatureKind::Video, v.clone(), 0)], &mut Mode::Eval).unwrap();
    let doubled = model
        .embed(&[feat(FeatureKind::Video, v.iter().map(|x| 2.0 * x).collect(), 0)], &mut Mode::Eval)
        .unwrap();
    let base = &zero_row(&model);
    for j in 0..d {
        assert!(((doubled[j] - base[j]) - 2.0 * (single[j] - base[j])).abs() < 1e-12);
    }
}

fn zero_row(model: &Model<f64>) -> Vec<f64> {
    model
        .embed(&[feat(FeatureKind::Video, vec![0.0; 3], 0)], &mut Mode::Eval)
        .unwrap()
}

#[test]
fn swapping_slots_with_their_positions_permutes_rows() {
    let model = scrambled_micro(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let slots = random_slots(&mut rng, 6, &model.config);
        let (i, j) = (rng.random_range(0..6), rng.random_range(0..6));
        let mut swapped = slots.clone();
        swapped.swap(i, j);
        let a = model.embed(&slots, &mut Mode::Eval).unwrap();
        let b = model.embed(&swapped, &mut Mode::Eval).unwrap();
        let key = |rows: &[f64]| {
            let mut v: Vec<Vec<u64>> = rows.chunks(8).map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
            v.sort();
            v
        };
        assert_eq!(key(&a), key(&b));
    }
}

#[test]
fn embed_rejects_bad_input() {
    let model = scrambled_micro(8);
    let too_long = vec![tok(4, Segment::Question, 0); 9];
    assert!(matches!(model.embed(&too_long, &mut Mode::Eval), Err(Error::Overflow { .. })));
    let bad_id = vec![tok(16, Segment::Question, 0)];
    assert!(matches!(model.embed(&bad_id, &mut Mode::Eval), Err(Error::TokenOutOfRange { .. })));
    let bad_dim = vec![feat(FeatureKind::Bbox, vec![0.0; 2], 0)];
    assert!(matches!(model.embed(&bad_dim, &mut Mode::Eval), Err(Error::Shape(_))));
}

#[test]
fn loss_special_cases() {
    let seq = micro_sequence();
    let v = 16;
    let uniform = vec![0.0; seq.len() * v];
    assert!((cross_entropy(&uniform, v, &seq).unwrap() - (v as f64).ln()).abs() < 1e-12);

    let mut confident = vec![0.0; seq.len() * v];
    confident[3 * v + 15] = 60.0;
    confident[4 * v + 1] = 60.0;
    assert!(cross_entropy(&confident, v, &seq).unwrap() < 1e-20);

    // Two loss positions, hand logits over a 16-way vocab:
    //   row 3: target 15 has logit 2, token 0 has logit 1, rest 0
    //     → -log(e² / (e² + e + 14))
    //   row 4: target 1 has logit -1, rest 0 → -log(e⁻¹ / (e⁻¹ + 15))
    let mut hand = vec![0.0; seq.len() * v];
    hand[3 * v + 15] = 2.0;
    hand[3 * v] = 1.0;
    hand[4 * v + 1] = -1.0;
    let e = std::f64::consts::E;
    let l3 = (e * e + e + 14.0).ln() - 2.0;
    let l4 = (1.0 / e + 15.0).ln() + 1.0;
    assert!((cross_entropy(&hand, v, &seq).unwrap() - (l3 + l4) / 2.0).abs() < 1e-12);

    let none = AssembledSequence {
        loss_mask: vec![false; 6],
        targets: vec![None; 6],
        ..seq
    };
    assert!(matches!(cross_entropy(&uniform, v, &none), Err(Error::NoTargets(_))));
}

#[test]
fn single_target_gradient_is_softmax_minus_onehot_through_head() {
    let model = scrambled_micro(9);
    let mut seq = micro_sequence();
    seq.loss_mask[4] = false;
    seq.targets[4] = None;
    let trace = model.forward(&seq.slots, Mode::Eval).unwrap();
    let g = model.backward(&trace, &seq).unwrap();
    let reference = reference_forward(&model.config, &model.params, &seq.slots);
    let logits = &reference.logits[3];
    let out = &reference.final_out[3];
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let delta: Vec<f64> = (0..16)
        .map(|v| logits[v].exp() / z - if v == 15 { 1.0 } else { 0.0 })
        .collect();
    // Rows never used as inputs receive only the output-head term delta_v · out.
    let input_ids = [13usize, 14, 15, 1];
    for v in (0..16).filter(|v| !input_ids.contains(v)) {
        for j in 0..8 {
            assert!((g.token_embedding.row(v)[j] - delta[v] * out[j]).abs() < 1e-12);
        }
    }
    // ln_f bias gradient is Eᵀ delta.
    for j in 0..8 {
        let want: f64 = (0..16).map(|v| delta[v] * model.params.token_embedding.row(v)[j]).sum();
        assert!((g.ln_f_bias.data[j] - want).abs() < 1e-12);
    }
}

#[test]
fn unused_rows_get_no_input_gradient() {
    let model = scrambled_micro(10);
    let seq = micro_sequence();
    let trace = model.forward(&seq.slots, Mode::Eval).unwrap();
    let g = model.backward(&trace, &seq).unwrap();
    for pos in seq.len()..8 {
        assert!(g.position_embedding.row(pos).iter().all(|&x| x == 0.0));
    }
    let used: Vec<usize> = seq.slots.iter().map(|s| s.segment.code()).collect();
    for code in (0..Segment::COUNT).filter(|c| !used.contains(c)) {
        assert!(g.segment_embedding.row(code).iter().all(|&x| x == 0.0));
    }
    // Both adapters and all three tables do receive gradient.
    assert!(g.video_weight.data.iter().any(|&x| x != 0.0));
    assert!(g.bbox_weight.data.iter().any(|&x| x != 0.0));
    assert!(g.segment_embedding.data.iter().any(|&x| x != 0.0));
    assert!(g.position_embedding.data.iter().any(|&x| x != 0.0));
    assert!(matches!(&seq.slots[0].payload, Payload::Feature { .. }));
}

#[test]
fn f32_and_f64_paths_agree() {
    let m64 = scrambled_micro(12);
    let cfg32 = ModelConfig {
        precision: Precision::F32,
        ..m64.config.clone()
    };
    let m32: Model<f32> = Model::from_params(cfg32, m64.params.convert(&m64.config)).unwrap();
    let seq = micro_sequence();
    let l64 = loss(&m64.forward(&seq.slots, Mode::Eval).unwrap(), &seq).unwrap();
    let l32 = loss(&m32.forward(&seq.slots, Mode::Eval).unwrap(), &seq).unwrap();
    assert!((l64 - l32).abs() < 1e-4, "{l64} {l32}");
}
