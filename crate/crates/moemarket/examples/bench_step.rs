//! Dev timing probe: forward vs backward cost at full run scale.

use std::time::Instant;

use moemarket::data::{generate_synthetic_domain, sample_batch, SynthKind, Vocab};
use moemarket::model::{Model, ModelConfig};
use moemarket::numerics::AdamParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let prose = generate_synthetic_domain(SynthKind::ProseLike, 11, 50_000);
    let code = generate_synthetic_domain(SynthKind::CodeLike, 12, 50_000);
    let vocab = Vocab::build(&[prose.clone(), code]).unwrap();
    let ids = vocab.encode(&prose.corpus).unwrap();
    println!("vocab {}", vocab.size());

    let cfg = ModelConfig {
        vocab: vocab.size(),
        d_model: 128,
        n_heads: 4,
        context: 128,
        top_k: 2,
        base_width: 256,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(cfg, &mut rng).unwrap();
    let hp = AdamParams::default();
    let (xs, ys) = sample_batch(&ids, &mut rng, 128, 16).unwrap();

    let t = Instant::now();
    for _ in 0..5 {
        model.forward_loss(&xs, &ys).unwrap();
    }
    println!("forward_loss: {:.1} ms", t.elapsed().as_secs_f64() * 200.0);

    let t = Instant::now();
    for _ in 0..5 {
        model.loss_and_grads(&xs, &ys).unwrap();
    }
    println!("loss_and_grads: {:.1} ms", t.elapsed().as_secs_f64() * 200.0);

    let t = Instant::now();
    for s in 0..5 {
        model.train_step(&xs, &ys, &hp, s).unwrap();
    }
    println!("train_step: {:.1} ms", t.elapsed().as_secs_f64() * 200.0);
}
