//! Black-box transfer: adversarial images crafted against one model keep
//! some of their power against a different architecture the attacker
//! never saw. The matrix below crafts on the row model and evaluates on
//! the column model; the diagonal is the white-box attack.

use std::path::{Path, PathBuf};

use advrank::attack::AttackKind;
use advrank::data::Dataset;
use advrank::harness::{run_transfer, ResultTable};
use advrank::metrics::Metric;
use advrank::model::{train, Architecture, TrainConfig};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits28")
}

fn main() {
    let train_data = Dataset::load_dir(&data_dir(), "train").expect("digit dataset present");

    // two distinct architectures trained on the same data
    let (wide, _) =
        train(&train_data, &TrainConfig::new(Architecture::baseline(), Metric::Cosine))
            .expect("training succeeds");
    let (deep, _) =
        train(&train_data, &TrainConfig::new(Architecture::alternate(), Metric::Cosine))
            .expect("training succeeds");

    let corpus = Dataset::load_dir(&data_dir(), "test").expect("test split").take(1000);
    let models = vec![("wide".to_string(), wide), ("deep".to_string(), deep)];
    let matrix =
        run_transfer(&models, &corpus, AttackKind::CaPlus, 0.3, 1, 40, 0).expect("transfer runs");

    print!("{}", ResultTable::from_rows(matrix.rows()).to_text());
    let diag = matrix.cells[0][0];
    let off = matrix.cells[0][1];
    let baseline = matrix.baseline[1];
    println!(
        "\nwhite-box {:.1}%, transferred {:.1}%, unattacked {:.1}%: \
         the transferred attack lands between the two",
        100.0 * diag,
        100.0 * off,
        100.0 * baseline
    );
}
