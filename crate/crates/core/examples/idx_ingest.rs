//! Runs a short experiment on MNIST-format IDX files.
//!
//! ```text
//! cargo run --release --example idx_ingest -- TRAIN_IMAGES TRAIN_LABELS TEST_IMAGES TEST_LABELS
//! ```
//!
//! Without arguments a small synthetic IDX pair is written to the temp
//! directory and used instead.

use std::error::Error;
use std::path::{Path, PathBuf};

use fera_sim::data::synth_dataset;
use fera_sim::harness::{run_experiment, DataConfig, ExperimentConfig};

fn write_pair(dir: &Path, name: &str, seed: u64) -> Result<(PathBuf, PathBuf), Box<dyn Error>> {
    let ds = synth_dataset(seed, 4, 400, 36)?;
    let mut img = vec![0, 0, 8, 3];
    img.extend((ds.len() as u32).to_be_bytes());
    img.extend(6u32.to_be_bytes());
    img.extend(6u32.to_be_bytes());
    for i in 0..ds.len() {
        img.extend(ds.inputs().row(i).iter().map(|&x| (x * 255.0).round() as u8));
    }
    let mut lbl = vec![0, 0, 8, 1];
    lbl.extend((ds.len() as u32).to_be_bytes());
    lbl.extend(ds.labels().iter().map(|&l| l as u8));
    let (ip, lp) = (dir.join(format!("{name}-images.idx3")), dir.join(format!("{name}-labels.idx1")));
    std::fs::write(&ip, img)?;
    std::fs::write(&lp, lbl)?;
    Ok((ip, lp))
}

fn main() -> Result<(), Box<dyn Error>> {
    let args: Vec<PathBuf> = std::env::args_os().skip(1).map(PathBuf::from).collect();
    let paths = if args.len() == 4 {
        args
    } else {
        let dir = std::env::temp_dir().join("fera-idx-example");
        std::fs::create_dir_all(&dir)?;
        let (a, b) = write_pair(&dir, "train", 1)?;
        let (c, d) = write_pair(&dir, "test", 2)?;
        println!("using generated IDX files in {}", dir.display());
        vec![a, b, c, d]
    };
    let cfg = ExperimentConfig {
        rounds: 20,
        warmup_rounds: 10,
        data: DataConfig::Idx {
            train_images: paths[0].clone(),
            train_labels: paths[1].clone(),
            test_images: paths[2].clone(),
            test_labels: paths[3].clone(),
        },
        ..ExperimentConfig::desk_benchmark(0)
    };
    let report = run_experiment(&cfg)?;
    for r in report.records.iter().step_by(5) {
        println!("round {:3}  MA {:.4}  BA {:.4}", r.round, r.ma, r.ba);
    }
    println!("final MA {:.4}  BA {:.4}", report.summary.final_ma, report.summary.final_ba);
    Ok(())
}
