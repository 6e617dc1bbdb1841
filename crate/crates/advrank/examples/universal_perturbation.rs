//! Image-agnostic attack: one shared perturbation, optimized on a small
//! sample of images, that raises whatever it is added to in a chosen
//! query's ranking — including images it never saw during optimization.

use std::path::{Path, PathBuf};

use advrank::attack::{
    run_attack, AttackContext, AttackKind, AttackSpec, AttackTarget, Budget,
};
use advrank::data::Dataset;
use advrank::harness::run_universal;
use advrank::metrics::Metric;
use advrank::model::{train, Architecture, TrainConfig};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits28")
}

fn main() {
    let train_data = Dataset::load_dir(&data_dir(), "train").expect("digit dataset present");
    let cfg = TrainConfig::new(Architecture::baseline(), Metric::Cosine);
    let (model, _) = train(&train_data, &cfg).expect("training succeeds");
    let corpus = Dataset::load_dir(&data_dir(), "test").expect("test split").take(1000);

    // optimize on 5% of the corpus, evaluate on a disjoint 5%
    let run = run_universal(
        "demo", &model, &corpus, AttackKind::CaPlus, 0.1, 1, 0.05, 0,
    )
    .expect("universal attack runs");
    println!(
        "shared CA+ perturbation over {} optimization targets (eps 0.1):",
        run.seen_targets.len()
    );
    println!(
        "  seen   rank {:.1}% -> {:.1}%",
        100.0 * run.seen.rank_before.unwrap(),
        100.0 * run.seen.rank_after.unwrap()
    );
    println!(
        "  unseen rank {:.1}% -> {:.1}%  (never optimized against)",
        100.0 * run.unseen.rank_before.unwrap(),
        100.0 * run.unseen.rank_after.unwrap()
    );

    // a dedicated per-image attack is at least as strong on its own target
    let ctx = AttackContext::new(&model, &corpus.images, None).unwrap();
    let item = run.seen_targets[0];
    let spec = AttackSpec::new(AttackKind::CaPlus, vec![corpus.len() - 1], Budget::from_epsilon(0.1));
    let per_image = run_attack(&ctx, &AttackTarget::Corpus(item), &spec).unwrap();
    println!(
        "per-image CA+ on one of those targets: {:.1}% -> {:.1}%",
        100.0 * per_image.before.mean,
        100.0 * per_image.after.mean
    );
}
