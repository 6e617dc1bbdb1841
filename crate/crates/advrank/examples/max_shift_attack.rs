//! The maximum-shift attack: an untargeted perturbation that drags an
//! image's embedding as far as the budget allows. It names no queries and
//! no candidates; its only score is the embedding-space displacement.
//! These worst-case displacements are what the defense trains against.

use std::path::{Path, PathBuf};

use advrank::attack::{run_attack, AttackContext, AttackKind, AttackSpec, AttackTarget, Budget};
use advrank::data::Dataset;
use advrank::metrics::Metric;
use advrank::model::{train, Architecture, TrainConfig};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits28")
}

fn main() {
    let train_data = Dataset::load_dir(&data_dir(), "train").expect("digit dataset present");
    let cfg = TrainConfig::new(Architecture::baseline(), Metric::Cosine);
    let (model, _) = train(&train_data, &cfg).expect("training succeeds");

    let corpus = Dataset::load_dir(&data_dir(), "test").expect("test split").take(500);
    let ctx = AttackContext::new(&model, &corpus.images, None).expect("corpus embeds");

    // a larger budget can only reach farther: shift grows with epsilon
    println!("embedding shift of image 3 under growing budgets:");
    let mut last = 0.0;
    for epsilon in [0.01, 0.03, 0.1, 0.3] {
        let spec = AttackSpec::new(AttackKind::MaxShift, vec![], Budget::from_epsilon(epsilon));
        let out = run_attack(&ctx, &AttackTarget::Corpus(3), &spec).unwrap();
        println!("  eps={epsilon:<5} shift {:.4}", out.shift);
        assert!(out.shift >= last, "shift is monotone in the budget");
        last = out.shift;
    }

    // the loss trace is the shift objective climbing, iteration by iteration
    let spec = AttackSpec::new(AttackKind::MaxShift, vec![], Budget::from_epsilon(0.1));
    let out = run_attack(&ctx, &AttackTarget::Corpus(3), &spec).unwrap();
    println!(
        "trace at eps=0.1: starts {:.4}, ends {:.4} over {} iterations",
        out.loss_trace.first().unwrap(),
        out.loss_trace.last().unwrap(),
        out.loss_trace.len()
    );

    // mean shift over a handful of images, the defense's before/after gauge
    let mean = (0..20)
        .map(|i| {
            let spec =
                AttackSpec::new(AttackKind::MaxShift, vec![], Budget::from_epsilon(0.3));
            run_attack(&ctx, &AttackTarget::Corpus(i), &spec).unwrap().shift
        })
        .sum::<f32>()
        / 20.0;
    println!("mean worst-case shift at eps=0.3 over 20 images: {mean:.4}");
}
