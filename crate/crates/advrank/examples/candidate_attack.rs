//! Candidate attacks: perturb a candidate image so that chosen queries
//! suddenly rank it near the top (CA+) or lose it entirely (CA-). The
//! queries themselves are untouched; only the candidate's pixels move,
//! and only within an l-infinity ball.

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
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let candidate = 42;

    // CA+: the candidate invades the rankings of two unrelated queries
    let queries =
        sample_counterparts(ctx.index(), candidate, Polarity::Raise, 2, &mut rng).unwrap();
    for epsilon in [0.01, 0.1, 0.3] {
        let spec =
            AttackSpec::new(AttackKind::CaPlus, queries.clone(), Budget::from_epsilon(epsilon));
        let out = run_attack(&ctx, &AttackTarget::Corpus(candidate), &spec).unwrap();
        println!(
            "CA+ eps={epsilon:<4} rank {:.1}% -> {:.1}%  (shift {:.3})",
            100.0 * out.before.mean,
            100.0 * out.after.mean,
            out.shift
        );
    }

    // CA-: the candidate flees queries that currently rank it at the top
    let near = sample_counterparts(ctx.index(), candidate, Polarity::Lower, 2, &mut rng).unwrap();
    let spec = AttackSpec::new(AttackKind::CaMinus, near, Budget::from_epsilon(0.1));
    let out = run_attack(&ctx, &AttackTarget::Corpus(candidate), &spec).unwrap();
    println!(
        "CA- eps=0.1  rank {:.1}% -> {:.1}%  (shift {:.3})",
        100.0 * out.before.mean,
        100.0 * out.after.mean,
        out.shift
    );

    // the perturbation respects the pixel box and the epsilon ball
    let x0 = ctx.image(candidate);
    let max_dev = out
        .adversarial
        .iter()
        .zip(x0)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("max pixel deviation {:.4} (budget 0.1)", max_dev);
}
