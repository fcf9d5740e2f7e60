//! Generates a synthetic dataset, splits it and writes it as CSV.
//!
//! Usage: cargo run --example synthetic_data -- [out_dir]

use disengcd::dataset::{generate_synthetic, load_dataset, split, write_dataset, SplitSpec, SyntheticSpec};

fn main() -> disengcd::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic_data".into());
    let spec = SyntheticSpec::default();
    let (dataset, truth) = generate_synthetic(&spec)?;
    println!(
        "{} students, {} exercises, {} concepts, {} logs",
        dataset.n_students(),
        dataset.n_exercises(),
        dataset.n_concepts(),
        dataset.logs().len()
    );
    let correct = dataset.logs().iter().filter(|l| l.response == 1).count();
    println!("correct rate {:.3}", correct as f64 / dataset.logs().len() as f64);
    println!("student 0 mastery {:?}", truth.mastery.row(0));

    let splits = split(&dataset, &SplitSpec::default())?;
    println!(
        "split sizes train {} / val {} / test {}",
        splits.train.logs().len(),
        splits.val.logs().len(),
        splits.test.logs().len()
    );

    let dir = std::path::Path::new(&out);
    write_dataset(&dataset, dir)?;
    let back = load_dataset(
        &dir.join("logs.csv"),
        &dir.join("q.csv"),
        Some(&dir.join("dependency.csv")),
        &Default::default(),
    )?;
    println!("reloaded {} logs from {}", back.logs().len(), dir.display());
    Ok(())
}
