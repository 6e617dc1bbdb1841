//! Distance-sum attacks: instead of the rank-aware hinge, directly
//! minimize the query-candidate distances (raising) or maximize them
//! (lowering). Simpler objective, usually a weaker attack — the hinge
//! spends its budget only where ranks are actually contested.

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

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let budget = Budget::from_epsilon(0.05); // a tight budget separates the two

    // raising a candidate for three queries: hinge vs distance-sum
    let candidate = 7;
    let queries =
        sample_counterparts(ctx.index(), candidate, Polarity::Raise, 3, &mut rng).unwrap();
    for kind in [AttackKind::CaPlus, AttackKind::DistCaPlus] {
        let spec = AttackSpec::new(kind, queries.clone(), budget);
        let out = run_attack(&ctx, &AttackTarget::Corpus(candidate), &spec).unwrap();
        println!(
            "{:<12} rank {:.1}% -> {:.1}%",
            kind.label(),
            100.0 * out.before.mean,
            100.0 * out.after.mean
        );
    }

    // hiding a query's neighbors: hinge vs distance-sum
    let query = 31;
    let near = sample_counterparts(ctx.index(), query, Polarity::Lower, 3, &mut rng).unwrap();
    for kind in [AttackKind::QaMinus, AttackKind::DistQaMinus] {
        let mut spec = AttackSpec::new(kind, near.clone(), budget);
        if kind == AttackKind::QaMinus {
            spec.xi = 0.0; // bare objective, same as the distance variant
            spec.sp_count = 0;
        }
        let out = run_attack(&ctx, &AttackTarget::Corpus(query), &spec).unwrap();
        println!(
            "{:<12} rank {:.1}% -> {:.1}%",
            kind.label(),
            100.0 * out.before.mean,
            100.0 * out.after.mean
        );
    }
}
