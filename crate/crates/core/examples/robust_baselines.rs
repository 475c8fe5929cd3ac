//! FedAvg, Multi-Krum and coordinate-wise median on a toy round where one
//! of seven clients submits a far-off update.
//!
//! ```text
//! cargo run --release --example robust_baselines
//! ```

use fera_sim::baselines::{coordwise_median, fedavg, multi_krum_aggregate};
use fera_sim::nn::{FlatParams, LayerShape};
use fera_sim::ClientUpdate;

fn params(v: &[f64]) -> FlatParams {
    FlatParams::new(v.to_vec(), vec![LayerShape { d_in: 0, d_out: v.len() }]).unwrap()
}

fn main() -> fera_sim::Result<()> {
    let global = params(&[0.0, 0.0, 0.0]);
    let mut updates: Vec<ClientUpdate> = (0..6)
        .map(|i| {
            let t = i as f64 * 0.02;
            ClientUpdate {
                params: params(&[1.0 + t, -0.5 - t, 0.2 + t]),
                num_samples: 100,
            }
        })
        .collect();
    updates.push(ClientUpdate {
        params: params(&[-20.0, 30.0, 15.0]),
        num_samples: 100,
    });

    println!("fedavg            {:.3?}", fedavg(&updates, &global, 1.0)?.values());
    let (mk, kept) = multi_krum_aggregate(&updates, &global, 1, 5, 1.0)?;
    println!("multi-krum (f=1)  {:.3?}  kept {kept:?}", mk.values());
    println!("coord-wise median {:.3?}", coordwise_median(&updates, &global, 1.0)?.values());
    Ok(())
}
