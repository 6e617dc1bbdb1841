//! Query attacks: perturb the query image so that chosen candidates rise
//! (QA+) or sink (QA-) in its result list, while a semantics-preserving
//! term keeps the query's original neighbors pinned near the top. The
//! weight xi trades attack strength against that camouflage.

use std::path::{Path, PathBuf};

use advrank::attack::{run_attack, AttackContext, AttackKind, AttackSpec, AttackTarget, Budget};
use advrank::data::{sample_counterparts, Dataset, Polarity};
use advrank::metrics::Metric;
use advrank::model::{train, Architecture, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits28")
}

fn main() {
    let train_data = Dataset::load_dir(&data_dir(), "train").expect("digit dataset present");
    let cfg = TrainConfig::new(Architecture::baseline(), Metric::Cosine);
    let (model, _) = train(&train_data, &cfg).expect("training succeeds");

    let corpus = Dataset::load_dir(&data_dir(), "test").expect("test split").take(1000);
    let ctx = AttackContext::new(&model, &corpus.images, None).expect("corpus embeds");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let query = 17;

    // QA+: pull an unrelated candidate into the query's top results
    let target = sample_counterparts(ctx.index(), query, Polarity::Raise, 1, &mut rng).unwrap();
    println!("QA+ with one unrelated candidate, epsilon 0.3:");
    for xi in [0.0, 1.0, 100.0] {
        let mut spec =
            AttackSpec::new(AttackKind::QaPlus, target.clone(), Budget::from_epsilon(0.3));
        spec.xi = xi;
        spec.sp_count = 5; // pin the query's original top five
        let out = run_attack(&ctx, &AttackTarget::Corpus(query), &spec).unwrap();
        println!(
            "  xi={xi:<5} candidate {:.1}% -> {:.1}%   top-5 neighbors {:.1}% -> {:.1}%",
            100.0 * out.before.mean,
            100.0 * out.after.mean,
            100.0 * out.sp_before.unwrap().mean,
            100.0 * out.sp_after.unwrap().mean,
        );
    }

    // QA-: push the query's own nearest neighbor out of sight
    let near = sample_counterparts(ctx.index(), query, Polarity::Lower, 1, &mut rng).unwrap();
    let mut spec = AttackSpec::new(AttackKind::QaMinus, near, Budget::from_epsilon(0.3));
    spec.xi = 100.0;
    spec.sp_count = 5;
    let out = run_attack(&ctx, &AttackTarget::Corpus(query), &spec).unwrap();
    println!(
        "QA- xi=100: neighbor {:.1}% -> {:.1}%   top-5 neighbors {:.1}% -> {:.1}%",
        100.0 * out.before.mean,
        100.0 * out.after.mean,
        100.0 * out.sp_before.unwrap().mean,
        100.0 * out.sp_after.unwrap().mean,
    );
}
