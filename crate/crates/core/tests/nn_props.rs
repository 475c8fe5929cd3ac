use fera_sim::data::synth_dataset;
use fera_sim::linalg::Matrix;
use fera_sim::nn::{evaluate, sgd_epoch, Batch, FlatParams, MlpModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_net(rng: &mut ChaCha8Rng) -> MlpModel {
    let depth = rng.random_range(0..=3);
    let mut dims = vec![rng.random_range(1..=5)];
    for _ in 0..depth {
        dims.push(rng.random_range(2..=5));
    }
    dims.push(rng.random_range(2..=4));
    let init = MlpModel::init(&dims, rng).unwrap();
    let theta = (0..init.params().len()).map(|_| StandardNormal.sample(rng)).collect();
    init.with_params(init.params().with_values(theta).unwrap()).unwrap()
}

fn random_batch(model: &MlpModel, rng: &mut ChaCha8Rng) -> Batch {
    let d = model.dims()[0];
    let rows = rng.random_range(1..=5);
    let x = (0..rows * d).map(|_| StandardNormal.sample(rng)).collect();
    let y = (0..rows).map(|_| rng.random_range(0..model.num_classes())).collect();
    Batch::new(Matrix::new(rows, d, x).unwrap(), y).unwrap()
}

/// Smallest |pre-activation| over hidden units, from a plain re-implementation
/// of the forward pass.
fn closest_to_kink(model: &MlpModel, batch: &Batch) -> f64 {
    let rows = batch.len();
    let mut a = batch.inputs.data().to_vec();
    let v = model.params().values();
    let shapes = model.params().shapes();
    let mut off = 0;
    let mut closest = f64::INFINITY;
    for (l, s) in shapes.iter().enumerate() {
        let (w, b) = v[off..off + s.param_count()].split_at(s.d_in * s.d_out);
        off += s.param_count();
        let mut z = vec![0.0; rows * s.d_out];
        for r in 0..rows {
            for j in 0..s.d_out {
                z[r * s.d_out + j] = b[j] + (0..s.d_in).map(|i| a[r * s.d_in + i] * w[i * s.d_out + j]).sum::<f64>();
            }
        }
        if l + 1 < shapes.len() {
            closest = closest.min(z.iter().map(|t| t.abs()).fold(f64::INFINITY, f64::min));
        }
        a = z.into_iter().map(|t| t.max(0.0)).collect();
    }
    closest
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_net(&mut rng);
        let batch = random_batch(&model, &mut rng);
        // central differences straddle the ReLU kink when a unit sits this close
        prop_assume!(closest_to_kink(&model, &batch) > 1e-3);
        let (_, grad) = model.loss_and_gradient(&batch).unwrap();
        let base = model.params().values().to_vec();
        let loss = |v: Vec<f64>| {
            model
                .with_params(model.params().with_values(v).unwrap())
                .unwrap()
                .loss_and_gradient(&batch)
                .unwrap()
                .0
        };
        for (k, g) in grad.iter().enumerate() {
            let (mut p, mut m) = (base.clone(), base.clone());
            p[k] += 1e-5;
            m[k] -= 1e-5;
            let fd = (loss(p) - loss(m)) / 2e-5;
            prop_assert!((fd - g).abs() < 1e-4, "param {}: fd {} vs {}", k, fd, g);
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_net(&mut rng);
        let bytes = model.params().to_bytes();
        prop_assert_eq!(&FlatParams::from_bytes(&bytes).unwrap(), model.params());
        prop_assert!(FlatParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

#[test]
fn forward_and_sgd_are_bitwise_reproducible() {
    let data = synth_dataset(3, 3, 40, 12).unwrap();
    let model = MlpModel::init(&[12, 16, 8, 3], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let a = model.forward(data.inputs()).unwrap();
    let b = model.forward(data.inputs()).unwrap();
    assert_eq!(a.logits.data(), b.logits.data());
    assert_eq!(a.penultimate.data(), b.penultimate.data());

    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut m = model.clone();
        for _ in 0..3 {
            m = sgd_epoch(&m, data.as_batch(), 0.1, 8, &mut rng).unwrap();
        }
        m
    };
    let (x, y) = (run(), run());
    let bits = |m: &MlpModel| m.params().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&x), bits(&y));
}

#[test]
fn penultimate_width_follows_feature_dim() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Matrix::new(5, 32, vec![0.5; 160]).unwrap();
    for d in [16, 32, 64, 128] {
        let model = MlpModel::init(&[32, 64, d, 4], &mut rng).unwrap();
        assert_eq!(model.feature_dim(), d);
        let out = model.forward(&x).unwrap();
        assert_eq!((out.penultimate.rows(), out.penultimate.cols()), (5, d));
        assert_eq!(out.logits.cols(), 4);
    }
}

#[test]
fn two_class_blobs_reach_95_percent() {
    let train = synth_dataset(10, 2, 200, 16).unwrap();
    let test = synth_dataset(11, 2, 200, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut model = MlpModel::init(&[16, 32, 2], &mut rng).unwrap();
    for _ in 0..50 {
        model = sgd_epoch(&model, train.as_batch(), 0.1, 16, &mut rng).unwrap();
    }
    let acc = evaluate(&model, test.as_batch()).unwrap();
    assert!(acc >= 0.95, "held-out accuracy {acc}");
}
