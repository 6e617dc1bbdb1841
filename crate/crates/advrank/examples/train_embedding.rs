//! Train the baseline digit embedder with the triplet loss and save a
//! checkpoint that the other examples (and the CLI) can reuse.

use std::path::{Path, PathBuf};

use advrank::data::Dataset;
use advrank::metrics::{recall_at_1, Metric};
use advrank::model::{train, Architecture, EmbeddingModel, TrainConfig};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits28")
}

fn main() {
    let data = Dataset::load_dir(&data_dir(), "train").expect("digit dataset present");
    let cfg = TrainConfig::new(Architecture::baseline(), Metric::Cosine);
    println!("training `{}` on {} images...", cfg.arch.name, data.len());
    let (model, history) = train(&data, &cfg).expect("training succeeds");
    for (epoch, loss) in history.epoch_loss.iter().enumerate() {
        println!("epoch {epoch}: mean triplet loss {loss:.4}");
    }

    // clean retrieval quality on a 2000-image held-out corpus
    let corpus = Dataset::load_dir(&data_dir(), "test").expect("test split").take(2000);
    let index = model
        .index(&corpus.images, Some(corpus.labels.clone()))
        .expect("indexing succeeds");
    println!("recall@1 on {} held-out images: {:.4}", corpus.len(), recall_at_1(&index).unwrap());

    let out = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../out");
    std::fs::create_dir_all(&out).expect("output directory");
    let path = out.join("vanilla.ckpt");
    model.save(&path).expect("checkpoint written");
    println!("wrote {}", path.display());

    // checkpoints round-trip exactly
    let reloaded = EmbeddingModel::load(&path).expect("checkpoint reads back");
    assert_eq!(reloaded.embed_slice(corpus.image(0)), model.embed_slice(corpus.image(0)));
}
