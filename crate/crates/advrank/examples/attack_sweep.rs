//! The full experiment grid in miniature: every attack kind at several
//! budgets and counterpart counts, aggregated over independent trials
//! into one deterministic CSV. The CLI's `attack` subcommand is this at
//! full scale.

use std::path::{Path, PathBuf};

use advrank::attack::AttackKind;
use advrank::data::Dataset;
use advrank::harness::{run_attack_sweep, SweepPlan};
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

    let plan = SweepPlan {
        kinds: AttackKind::RANKED.to_vec(),
        epsilons: vec![0.03, 0.3],
        wm: vec![1, 5],
        trials: 25,
        seed: 0,
        ..SweepPlan::default()
    };
    let models = vec![("baseline".to_string(), model)];
    let table = run_attack_sweep(&models, &corpus, &plan).expect("sweep runs");

    print!("{}", table.to_text());
    assert!(!table.has_errors());

    // the same plan, twice: byte-identical output
    let again = run_attack_sweep(&models, &corpus, &plan).expect("sweep runs");
    assert_eq!(table.to_csv(), again.to_csv());
    println!("\nsweep is deterministic: second run produced identical CSV bytes");
}
