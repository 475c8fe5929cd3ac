//! Trains the desk-benchmark MLP centrally on synthetic blobs and
//! round-trips a checkpoint.
//!
//! ```text
//! cargo run --release --example train_mlp
//! ```

use fera_sim::data::synth_dataset;
use fera_sim::nn::{evaluate, sgd_epoch, FlatParams, MlpModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fera_sim::Result<()> {
    let train = synth_dataset(1, 4, 500, 32)?;
    let test = synth_dataset(2, 4, 200, 32)?;
    let dims = [32, 64, 32, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = MlpModel::init(&dims, &mut rng)?;
    println!("{} parameters, representation width {}", model.params().len(), model.feature_dim());
    for epoch in 1..=10 {
        model = sgd_epoch(&model, train.as_batch(), 0.1, 16, &mut rng)?;
        let (loss, _) = model.loss_and_gradient(train.as_batch())?;
        println!(
            "epoch {epoch:2}  train loss {loss:.4}  test acc {:.4}",
            evaluate(&model, test.as_batch())?
        );
    }

    let bytes = model.params().to_bytes();
    let restored = MlpModel::from_params(&dims, FlatParams::from_bytes(&bytes)?)?;
    assert_eq!(restored.params(), model.params());
    println!("checkpoint: {} bytes, restored model identical", bytes.len());
    Ok(())
}
