//! Smallest end-to-end run: train an embedding model on synthetic
//! clusters, mount a candidate-raising attack, and watch a random image
//! take over the top of someone else's ranking. Runs in a few seconds.

use advrank::attack::{run_attack, AttackContext, AttackKind, AttackSpec, AttackTarget, Budget};
use advrank::data::{make_synthetic, SyntheticSpec};
use advrank::metrics::{recall_at_1, Metric};
use advrank::model::{train, Architecture, TrainConfig};

fn main() {
    // four gaussian clusters in 16 dimensions stand in for image classes
    let data = make_synthetic(&SyntheticSpec {
        classes: 4,
        per_class: 100,
        dim: 16,
        std: 0.05,
        seed: 7,
    });

    let mut cfg = TrainConfig::new(Architecture::mlp("demo", &[16, 16, 8]), Metric::Cosine);
    cfg.epochs = 6;
    cfg.seed = 3;
    let (model, history) = train(&data, &cfg).expect("training succeeds");
    println!("epoch losses: {:?}", history.epoch_loss);

    let index = model
        .index(&data.images, Some(data.labels.clone()))
        .expect("indexing succeeds");
    println!("recall@1: {:.3}", recall_at_1(&index).expect("labels present"));

    // raise item 5 in the ranking of item 200 (a different class)
    let ctx = AttackContext::new(&model, &data.images, None).expect("corpus embeds");
    let spec = AttackSpec::new(AttackKind::CaPlus, vec![200], Budget::from_epsilon(0.1));
    let out = run_attack(&ctx, &AttackTarget::Corpus(5), &spec).expect("attack runs");
    println!(
        "CA+ at epsilon 0.1: normalized rank {:.3} -> {:.3} (embedding shift {:.4})",
        out.before.mean, out.after.mean, out.shift
    );
}
