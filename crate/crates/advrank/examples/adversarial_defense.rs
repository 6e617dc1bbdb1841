//! Adversarial training for ranking: during training, every triplet is
//! replaced by its maximum-shift adversarial counterpart, so the model
//! learns embeddings that barely move under attack. This example hardens
//! a small synthetic model and compares it with its vanilla twin. For the
//! full-size digit model, use the CLI's `defend` subcommand (it takes a
//! few minutes).

use advrank::attack::{run_attack, AttackContext, AttackKind, AttackSpec, AttackTarget, Budget};
use advrank::data::{make_synthetic, SyntheticSpec};
use advrank::defense::{harden, DefenseConfig};
use advrank::metrics::Metric;
use advrank::model::{train, Architecture, EmbeddingModel, TrainConfig};

fn base_config() -> TrainConfig {
    let mut cfg = TrainConfig::new(Architecture::mlp("demo", &[16, 16, 8]), Metric::Cosine);
    cfg.epochs = 12;
    cfg.seed = 3;
    cfg
}

fn mean_shift(model: &EmbeddingModel, images: &[f32], epsilon: f32) -> f32 {
    let ctx = AttackContext::new(model, images, None).expect("corpus embeds");
    let spec = AttackSpec::new(AttackKind::MaxShift, vec![], Budget::from_epsilon(epsilon));
    let shifts: Vec<f32> = (0..20)
        .map(|i| run_attack(&ctx, &AttackTarget::Corpus(i * 7), &spec).unwrap().shift)
        .collect();
    shifts.iter().sum::<f32>() / shifts.len() as f32
}

fn main() {
    let data = make_synthetic(&SyntheticSpec {
        classes: 4,
        per_class: 80,
        dim: 16,
        std: 0.05,
        seed: 7,
    });

    let (vanilla, _) = train(&data, &base_config()).expect("vanilla training succeeds");
    // same data, same schedule, same seeds; only the triplets differ
    let cfg = DefenseConfig::new(base_config());
    let (defended, history) = harden(&data, &cfg).expect("hardening succeeds");
    println!("defended epoch losses: {:?}", history.epoch_loss);
    assert!(defended.defense().is_some(), "checkpoint carries the defense tag");

    let eps = cfg.inner.epsilon;
    let v = mean_shift(&vanilla, &data.images, eps);
    let d = mean_shift(&defended, &data.images, eps);
    println!("mean worst-case embedding shift at eps={eps}:");
    println!("  vanilla  {v:.4}");
    println!("  defended {d:.4}  ({:.0}% of vanilla)", 100.0 * d / v);

    // the suppressed shift blunts an actual ranking attack
    let vctx = AttackContext::new(&vanilla, &data.images, None).unwrap();
    let dctx = AttackContext::new(&defended, &data.images, None).unwrap();
    let spec = AttackSpec::new(AttackKind::CaPlus, vec![200], Budget::from_epsilon(eps));
    let target = AttackTarget::Corpus(5);
    let vout = run_attack(&vctx, &target, &spec).unwrap();
    let dout = run_attack(&dctx, &target, &spec).unwrap();
    println!(
        "CA+ rank gain: vanilla {:.3} -> {:.3}, defended {:.3} -> {:.3}",
        vout.before.mean, vout.after.mean, dout.before.mean, dout.after.mean
    );
}
