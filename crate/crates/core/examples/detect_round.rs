//! Steps the desk benchmark into its attack window and prints the per-client
//! scores and filter decisions for one round that samples an attacker.
//!
//! ```text
//! cargo run --release --example detect_round
//! ```

use fera_sim::harness::{ExperimentConfig, Simulation};

fn main() -> fera_sim::Result<()> {
    let cfg = ExperimentConfig::desk_benchmark(0);
    let warmup = cfg.warmup_rounds;
    let mut sim = Simulation::new(cfg)?;
    for _ in 0..warmup {
        sim.run_round()?;
    }
    let out = loop {
        let out = sim.run_round()?;
        if out.record.malicious.iter().any(|&m| m) {
            break out;
        }
    };
    let r = &out.record;
    let (m, det) = (r.metrics.as_ref().unwrap(), r.detection.as_ref().unwrap());
    println!("round {}  MA {:.4}  BA {:.4}", r.round, r.ma, r.ba);
    println!(
        "{:>6} {:>5} {:>9} {:>9} {:>7} {:>6} {:>7} {:>6} {:>5} {:>5} {:>5}",
        "client", "bad", "sigma", "delta", "s_comb", "das", "mutual", "r", "cons", "norm", "alpha"
    );
    for k in 0..m.len() {
        println!(
            "{:>6} {:>5} {:>9.3e} {:>9.3e} {:>7.3} {:>6.3} {:>7.3} {:>6.2} {:>5} {:>5} {:>5.2}",
            r.sampled[k],
            r.malicious[k],
            m.sigma[k],
            m.delta[k],
            m.s_comb[k],
            m.das[k],
            m.mutual_sim[k],
            m.r[k],
            det.flagged_consistency.contains(&k),
            det.flagged_norm.contains(&k),
            det.alpha[k]
        );
    }
    Ok(())
}
