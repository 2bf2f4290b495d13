use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::experts::{moe_layer_forward, ExpertIds, MoeIds};
use super::*;
use crate::numerics::{AdamParams, Tape};

fn tiny_cfg(vocab: usize) -> ModelConfig {
    ModelConfig { vocab, d_model: 16, n_heads: 2, context: 16, top_k: 2, base_width: 32 }
}

fn batch(seqs: &[&[usize]]) -> Vec<Vec<usize>> {
    seqs.iter().map(|s| s.to_vec()).collect()
}

/// Register an expert with the given weights on a tape (biases zero).
fn fixed_expert(tape: &mut Tape, w1: Tensor, w2: Tensor) -> ExpertIds {
    let width = w1.cols();
    let d = w1.rows();
    ExpertIds {
        w1: tape.leaf(w1),
        b1: tape.leaf(Tensor::zeros(1, width)),
        w2: tape.leaf(w2),
        b2: tape.leaf(Tensor::zeros(1, d)),
    }
}

fn expert_mlp(x: &Tensor, w1: &Tensor, w2: &Tensor) -> Tensor {
    let mut h = x.matmul(w1).unwrap();
    for v in h.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    h.matmul(w2).unwrap()
}

#[test]
fn moe_forward_k1_uses_single_expert_with_gate_one() {
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w1s: Vec<Tensor> =
        (0..EXPERTS_PER_LAYER).map(|_| Tensor::randn(d, 6, 0.5, &mut rng)).collect();
    let w2s: Vec<Tensor> =
        (0..EXPERTS_PER_LAYER).map(|_| Tensor::randn(6, d, 0.5, &mut rng)).collect();

    // strictly positive token representations make a +10 column dominate
    let mut pos_x = Tensor::randn(5, d, 1.0, &mut rng);
    for v in pos_x.data_mut() {
        *v = v.abs() + 0.1;
    }

    let mut tape = Tape::new();
    let xn = tape.constant(pos_x.clone());
    let mut router_cols = Vec::new();
    for s in 0..EXPERTS_PER_LAYER {
        let col = if s == 3 { Tensor::filled(d, 1, 10.0) } else { Tensor::filled(d, 1, -10.0) };
        router_cols.push(tape.leaf(col));
    }
    let experts: Vec<ExpertIds> = w1s
        .iter()
        .zip(&w2s)
        .map(|(w1, w2)| fixed_expert(&mut tape, w1.clone(), w2.clone()))
        .collect();
    let ids = MoeIds { router_cols, experts };
    let (y, records) = moe_layer_forward(&mut tape, xn, &ids, 0, 1);

    for tok in &records.tokens {
        assert_eq!(tok.picks, vec![3]);
        assert_eq!(tok.gates, vec![1.0]);
    }
    let want = expert_mlp(&pos_x, &w1s[3], &w2s[3]);
    for (a, b) in tape.value(y).data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn moe_forward_identical_experts_with_even_gates_match_single_expert() {
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w1 = Tensor::randn(d, 5, 0.5, &mut rng);
    let w2 = Tensor::randn(5, d, 0.5, &mut rng);
    let mut pos_x = Tensor::randn(6, d, 1.0, &mut rng);
    for v in pos_x.data_mut() {
        *v = v.abs() + 0.1;
    }

    let mut tape = Tape::new();
    let xn = tape.constant(pos_x.clone());
    let mut router_cols = Vec::new();
    for s in 0..EXPERTS_PER_LAYER {
        // slots 5 and 6 tie at the top; everything else far below
        let col = if s == 5 || s == 6 {
            Tensor::filled(d, 1, 10.0)
        } else {
            Tensor::filled(d, 1, -10.0)
        };
        router_cols.push(tape.leaf(col));
    }
    let mut experts = Vec::new();
    for s in 0..EXPERTS_PER_LAYER {
        let (ew1, ew2) = if s == 5 || s == 6 {
            (w1.clone(), w2.clone())
        } else {
            (Tensor::randn(d, 5, 0.5, &mut rng), Tensor::randn(5, d, 0.5, &mut rng))
        };
        experts.push(fixed_expert(&mut tape, ew1, ew2));
    }
    let ids = MoeIds { router_cols, experts };
    let (y, records) = moe_layer_forward(&mut tape, xn, &ids, 0, 2);

    for tok in &records.tokens {
        assert_eq!(tok.picks, vec![5, 6], "tie must break to the lowest slot indices");
        assert!((tok.gates[0] - 0.5).abs() < 1e-12);
        assert!((tok.gates[1] - 0.5).abs() < 1e-12);
    }
    let want = expert_mlp(&pos_x, &w1, &w2);
    for (a, b) in tape.value(y).data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-12, "50/50 gates over identical experts must reproduce one");
    }
}

#[test]
fn forward_logits_shape_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::new(tiny_cfg(11), &mut rng).unwrap();
    let xs = batch(&[&[1, 2, 3, 4, 5, 6], &[6, 5, 4, 3, 2, 1]]);
    let (l1, _) = model.forward_logits(&xs).unwrap();
    let (l2, _) = model.forward_logits(&xs).unwrap();
    assert_eq!(l1.shape(), (12, 11));
    assert_eq!(l1, l2, "same tokens, same weights: bit-identical logits");
}

#[test]
fn forward_rejects_out_of_vocab_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::new(tiny_cfg(8), &mut rng).unwrap();
    let err = model.forward_logits(&batch(&[&[1, 2, 9]]));
    assert!(matches!(err, Err(crate::Error::Config(_))));
}

#[test]
fn untrained_model_loss_is_near_ln_v() {
    let vocab = 13;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = Model::new(tiny_cfg(vocab), &mut rng).unwrap();
    // > 1000 tokens across several deterministic batches
    let mut total = 0.0;
    let mut batches = 0;
    for b in 0..6 {
        let xs: Vec<Vec<usize>> =
            (0..12).map(|r| (0..16).map(|i| (b * 31 + r * 7 + i * 3) % vocab).collect()).collect();
        let ys: Vec<Vec<usize>> =
            xs.iter().map(|s| s.iter().map(|&v| (v + 1) % vocab).collect()).collect();
        total += model.eval_loss(&xs, &ys).unwrap();
        batches += 1;
    }
    let mean = total / batches as f64;
    let ln_v = (vocab as f64).ln();
    assert!((mean - ln_v).abs() / ln_v < 0.2, "init loss {} too far from ln V {}", mean, ln_v);
}

#[test]
fn train_step_reduces_loss_on_repetitive_corpus() {
    let vocab = 7;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ModelConfig { vocab, d_model: 16, n_heads: 2, context: 12, top_k: 2, base_width: 32 };
    let mut model = Model::new(cfg, &mut rng).unwrap();
    let hp = AdamParams { lr: 3e-3, ..AdamParams::default() };
    let corpus: Vec<usize> = (0..400).map(|i| i % vocab).collect();
    let mut losses = Vec::new();
    for step in 0..200 {
        let xs: Vec<Vec<usize>> =
            (0..4).map(|r| corpus[(step * 4 + r * 13) % 100..][..12].to_vec()).collect();
        let ys: Vec<Vec<usize>> = (0..4)
            .map(|r| corpus[(step * 4 + r * 13) % 100 + 1..][..12].to_vec())
            .collect();
        let out = model.train_step(&xs, &ys, &hp, step as u64).unwrap();
        losses.push(out.mean_loss);
    }
    let early: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let late: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(late < early * 0.7, "loss did not drop: {} -> {}", early, late);
}

#[test]
fn dormant_experts_stay_bit_identical_through_a_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = Model::new(tiny_cfg(9), &mut rng).unwrap();
    // 3 tokens with k=2 touch at most 6 of 8 slots per layer
    let xs = batch(&[&[1, 2, 3]]);
    let ys = batch(&[&[2, 3, 4]]);
    let (_, records) = model.forward_loss(&xs, &ys).unwrap();

    let mut dormant: Vec<(usize, usize)> = Vec::new();
    for layer_rec in &records.layers {
        for slot in 0..EXPERTS_PER_LAYER {
            let touched = layer_rec.tokens.iter().any(|t| t.picks.contains(&slot));
            if !touched {
                dormant.push((layer_rec.layer, slot));
            }
        }
    }
    assert!(dormant.len() >= 4, "expected several dormant slots, got {}", dormant.len());

    let before: Vec<(Vec<f64>, Vec<f64>, u64)> = dormant
        .iter()
        .map(|&(l, s)| {
            (
                model.expert(l, s).w1.value.data().to_vec(),
                model.moe_layer(l).router_cols[s].value.data().to_vec(),
                model.expert(l, s).params_hash(),
            )
        })
        .collect();

    model.train_step(&xs, &ys, &AdamParams::default(), 0).unwrap();

    for (&(l, s), (w1, col, hash)) in dormant.iter().zip(&before) {
        assert_eq!(model.expert(l, s).w1.value.data(), &w1[..], "dormant expert weights moved");
        assert_eq!(
            model.moe_layer(l).router_cols[s].value.data(),
            &col[..],
            "dormant router column moved"
        );
        assert_eq!(model.expert(l, s).params_hash(), *hash);
    }
}

#[test]
fn identical_sequences_get_identical_routing() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = Model::new(tiny_cfg(9), &mut rng).unwrap();
    let seq = vec![1usize, 2, 3, 4, 5, 6, 7, 8];
    let xs = vec![seq.clone(), seq.clone()];
    let (_, records) = model.forward_logits(&xs).unwrap();
    for layer_rec in &records.layers {
        let t = seq.len();
        for i in 0..t {
            let a = &layer_rec.tokens[i];
            let b = &layer_rec.tokens[t + i];
            assert_eq!(a.picks, b.picks);
            assert_eq!(a.gates, b.gates);
            assert_eq!(a.probs, b.probs);
        }
    }
}

#[test]
fn gate_weights_sum_to_one_for_every_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = Model::new(tiny_cfg(9), &mut rng).unwrap();
    let xs = batch(&[&[0, 1, 2, 3, 4, 5, 6, 7], &[8, 7, 6, 5, 4, 3, 2, 1]]);
    let (_, records) = model.forward_logits(&xs).unwrap();
    for layer_rec in &records.layers {
        for tok in &layer_rec.tokens {
            assert!((tok.gates.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&tok.margin));
            assert!((tok.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn replace_expert_assigns_fresh_increasing_ids() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = Model::new(tiny_cfg(9), &mut rng).unwrap();
    assert_eq!(model.next_expert_id(), 16);
    let a = model.replace_expert(0, 2, &[16, 32], 100, &mut rng);
    let b = model.replace_expert(1, 5, &[16, 32], 100, &mut rng);
    assert_eq!(b, a + 1);
    assert_eq!(model.expert(0, 2).id, a);
    assert_eq!(model.expert(0, 2).age_market_steps, 0);
    assert_eq!(model.expert(0, 2).birth_step, 100);

    // same seed and call sequence reproduce identical newborn weights
    let mut rng1 = ChaCha8Rng::seed_from_u64(11);
    let mut rng2 = ChaCha8Rng::seed_from_u64(11);
    let mut m1 = Model::new(tiny_cfg(9), &mut rng1).unwrap();
    let mut m2 = Model::new(tiny_cfg(9), &mut rng2).unwrap();
    m1.replace_expert(0, 0, &[16, 32, 48], 5, &mut rng1);
    m2.replace_expert(0, 0, &[16, 32, 48], 5, &mut rng2);
    assert_eq!(m1.expert(0, 0).w1.value, m2.expert(0, 0).w1.value);
    assert_eq!(m1.expert(0, 0).width, m2.expert(0, 0).width);
}
