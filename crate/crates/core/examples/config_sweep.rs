//! Builds a sweep grid from dotted-key axes, prints each cell's TOML diff
//! against the base config, and runs the cells into a temp directory.
//!
//! ```text
//! cargo run --release --example config_sweep
//! ```

use fera_sim::harness::{run_sweep, sweep_cells, ExperimentConfig, SweepAxis};

fn main() -> fera_sim::Result<()> {
    let mut base = ExperimentConfig::desk_benchmark(0);
    base.rounds = 30;
    base.warmup_rounds = 10;
    let axes: Vec<SweepAxis> = ["filter.tau_comb=0.4,0.6", "aggregator.kind=fedavg,fera"]
        .iter()
        .map(|s| s.parse())
        .collect::<fera_sim::Result<_>>()?;

    let base_toml = base.to_toml_string();
    for cell in sweep_cells(&base, &axes)? {
        let cell_toml = cell.config.to_toml_string();
        let changed: Vec<&str> = cell_toml.lines().filter(|l| !base_toml.lines().any(|b| b == *l)).collect();
        println!("{}: {changed:?}", cell.label);
    }

    let dir = std::env::temp_dir().join("fera-sweep-example");
    for (cell, s) in run_sweep(&base, &axes, &dir)? {
        println!("{:<40} MA {:.4}  BA {:.4}", cell.label, s.final_ma, s.final_ba);
    }
    println!("outputs in {}", dir.display());
    Ok(())
}
