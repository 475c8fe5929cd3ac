//! Label skew of Dirichlet partitions at several concentrations, and what
//! a BadNet trigger does to a client's data.
//!
//! ```text
//! cargo run --release --example partition_and_poison
//! ```

use fera_sim::data::{backdoor_test_set, dirichlet_partition, inject_trigger, synth_dataset, TriggerSpec};

fn main() -> fera_sim::Result<()> {
    let ds = synth_dataset(3, 4, 300, 32)?;
    for alpha in [0.1, 0.5, 1e6] {
        let plan = dirichlet_partition(&ds, 6, alpha, 11)?;
        println!("alpha = {alpha}");
        for (c, idx) in plan.client_indices.iter().enumerate() {
            let hist = ds.subset(idx)?.class_histogram();
            println!("  client {c}: {:4} samples, per class {hist:?}", idx.len());
        }
    }

    let trigger = TriggerSpec::corner_patch(ds.dim(), 0.2);
    let client = ds.subset(&(0..100).collect::<Vec<_>>())?;
    let poisoned = inject_trigger(&client, &trigger, 5)?;
    let changed: Vec<usize> = (0..client.len())
        .filter(|&i| client.inputs().row(i) != poisoned.inputs().row(i) || client.labels()[i] != poisoned.labels()[i])
        .collect();
    println!(
        "\ntrigger on coordinates {:?} -> label {}: {} of {} rows stamped",
        trigger.coordinates,
        trigger.target_label,
        changed.len(),
        client.len()
    );
    let row = changed[0];
    println!("  before: {:.2?}", &client.inputs().row(row)[28..]);
    println!("  after:  {:.2?}", &poisoned.inputs().row(row)[28..]);

    let bd = backdoor_test_set(&ds, &trigger)?.expect("non-target rows exist");
    println!("backdoor test set: {} rows, all relabelled to {}", bd.len(), trigger.target_label);
    Ok(())
}
