//! FeRA against BadNet under different data splits and root sets: the
//! default label-skewed split with a test-set root, then an IID split with
//! a test-set root and with a uniform-noise root.
//!
//! ```text
//! cargo run --release --example root_variants -- [seeds]
//! ```

use fera_sim::harness::{run_experiment, ExperimentConfig, RootSource};

fn main() -> fera_sim::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let variants = [
        ("dirichlet/test-root", false, RootSource::Test),
        ("iid/test-root", true, RootSource::Test),
        ("iid/noise-root", true, RootSource::Ood),
    ];
    for (name, iid, root) in variants {
        for seed in 0..seeds {
            let mut cfg = ExperimentConfig::desk_benchmark(seed);
            cfg.iid = iid;
            cfg.root_source = root;
            let s = run_experiment(&cfg)?.summary;
            let f = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.3}"));
            println!(
                "{name:<20} seed {seed}  MA {:.4}  BA {:.4}  TPR {}  FPR {}",
                s.final_ma,
                s.final_ba,
                f(s.mean_tpr),
                f(s.mean_fpr)
            );
        }
    }
    Ok(())
}
