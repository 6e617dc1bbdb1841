//! The dataset layer: classic big-endian IDX image/label files (gzip or
//! plain), written and read back bit-exactly, plus the synthetic-cluster
//! generator used by the fast examples and tests.

use advrank::data::{make_synthetic, write_idx_images, write_idx_labels, Dataset, SyntheticSpec};

fn main() {
    let dir = std::env::temp_dir().join("advrank_idx_demo");
    std::fs::create_dir_all(&dir).expect("temp dir");

    // render a synthetic dataset into 6x6 "images" and write IDX files
    let data = make_synthetic(&SyntheticSpec {
        classes: 3,
        per_class: 20,
        dim: 36,
        std: 0.05,
        seed: 1,
    });
    let images_path = dir.join("demo-images-idx3-ubyte");
    let labels_path = dir.join("demo-labels-idx1-ubyte");
    let pixels: Vec<u8> = data.images.iter().map(|&v| (v * 255.0).round() as u8).collect();
    write_idx_images(&images_path, &pixels, data.len(), 6, 6).expect("images written");
    write_idx_labels(&labels_path, &data.labels).expect("labels written");
    println!(
        "wrote {} images to {}",
        data.len(),
        images_path.display()
    );

    let back = Dataset::load_idx(&images_path, &labels_path).expect("files read back");
    assert_eq!(back.len(), data.len());
    assert_eq!(back.dim, data.dim);
    assert_eq!(back.labels, data.labels);
    // u8 quantization is the only loss on the round trip
    let max_err = back
        .images
        .iter()
        .zip(&data.images)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("round-trip max pixel error {:.5} (u8 quantization bound {:.5})", max_err, 0.5 / 255.0);
    assert!(max_err <= 0.5 / 255.0 + f32::EPSILON);

    // corrupted headers are rejected, not misread
    let mut bytes = std::fs::read(&images_path).expect("file readable");
    bytes[3] = 0x01; // image magic says labels
    let bad = dir.join("bad-images-idx3-ubyte");
    std::fs::write(&bad, &bytes).expect("file written");
    match Dataset::load_idx(&bad, &labels_path) {
        Err(e) => println!("corrupted magic rejected: {e}"),
        Ok(_) => panic!("corrupted file must not parse"),
    }
}
