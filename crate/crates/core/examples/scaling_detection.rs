//! Model-replacement scaling attack on the desk benchmark: undefended
//! FedAvg against FeRA's norm-inflation filter.
//!
//! ```text
//! cargo run --release --example scaling_detection -- [scale]
//! ```

use fera_sim::attacks::AttackKind;
use fera_sim::baselines::AggregatorKind;
use fera_sim::harness::{run_experiment, ExperimentConfig};

fn main() -> fera_sim::Result<()> {
    let scale: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let mut cfg = ExperimentConfig::desk_benchmark(0);
    cfg.attack.kind = AttackKind::Scaling;
    cfg.attack.scale_factor = Some(scale);
    for aggregator in [AggregatorKind::Fedavg, AggregatorKind::Fera] {
        cfg.aggregator = aggregator;
        let report = run_experiment(&cfg)?;
        let norm_flags: (usize, usize, usize, usize) = report
            .records
            .iter()
            .filter(|r| r.attack_active)
            .filter_map(|r| r.detection.as_ref().map(|d| (r, d)))
            .fold((0, 0, 0, 0), |acc, (r, d)| {
                let flagged: Vec<usize> = d.flagged_norm.iter().map(|&k| r.sampled[k]).collect();
                let c = r.confusion_for(&flagged);
                (acc.0 + c.tp, acc.1 + c.fp, acc.2 + c.tn, acc.3 + c.fn_)
            });
        let s = &report.summary;
        println!("{:<8} scale {scale}: MA {:.4}  BA {:.4}", aggregator.name(), s.final_ma, s.final_ba);
        if aggregator == AggregatorKind::Fera {
            let (tp, fp, tn, fn_) = norm_flags;
            println!(
                "  norm filter: TPR {:.3}  FPR {:.3}  ({tp} tp, {fp} fp, {tn} tn, {fn_} fn)",
                tp as f64 / (tp + fn_).max(1) as f64,
                fp as f64 / (fp + tn).max(1) as f64
            );
        }
    }
    Ok(())
}
