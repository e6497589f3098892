//! Regenerates the bundled datasets under `data/`. Output is deterministic,
//! so rerunning never changes the files.

use std::path::PathBuf;

use advreg::synthetic::{real_estate_like, wine_quality_like};

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"));
    std::fs::create_dir_all(&dir).expect("create output directory");
    wine_quality_like()
        .write_csv(&dir.join("wine_quality.csv"))
        .expect("write wine_quality.csv");
    real_estate_like()
        .write_csv(&dir.join("real_estate.csv"))
        .expect("write real_estate.csv");
    println!("wrote {}/wine_quality.csv and {}/real_estate.csv", dir.display(), dir.display());
}
