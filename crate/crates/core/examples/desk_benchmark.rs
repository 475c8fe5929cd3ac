//! Compares undefended FedAvg, Multi-Krum, coordinate-wise median and FeRA
//! on the desk benchmark under a BadNet attack, plus a clean FedAvg run.
//!
//! ```text
//! cargo run --release --example desk_benchmark -- [seeds]
//! ```

use fera_sim::attacks::AttackKind;
use fera_sim::baselines::AggregatorKind;
use fera_sim::harness::{run_experiment, ExperimentConfig};

fn main() -> fera_sim::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let arms = [
        ("fedavg/no-attack", AggregatorKind::Fedavg, AttackKind::None),
        ("fedavg/badnet", AggregatorKind::Fedavg, AttackKind::Badnet),
        ("multikrum/badnet", AggregatorKind::Multikrum { f: None, m: None }, AttackKind::Badnet),
        ("median/badnet", AggregatorKind::CoordwiseMedian, AttackKind::Badnet),
        ("fera/badnet", AggregatorKind::Fera, AttackKind::Badnet),
    ];
    println!("{:<18} {:>6} {:>8} {:>8} {:>9} {:>7} {:>7}", "arm", "seed", "MA", "BA", "precision", "TPR", "FPR");
    for (name, aggregator, kind) in arms {
        for seed in 0..seeds {
            let mut cfg = ExperimentConfig::desk_benchmark(seed);
            cfg.aggregator = aggregator;
            cfg.attack.kind = kind;
            let s = run_experiment(&cfg)?.summary;
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
            println!(
                "{:<18} {:>6} {:>8.4} {:>8.4} {:>9} {:>7} {:>7}",
                name, seed, s.final_ma, s.final_ba, f(s.mean_precision), f(s.mean_tpr), f(s.mean_fpr)
            );
        }
    }
    Ok(())
}
