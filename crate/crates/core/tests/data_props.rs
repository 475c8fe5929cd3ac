use std::collections::BTreeSet;

use fera_sim::data::{
    backdoor_test_set, dirichlet_partition, iid_partition, inject_trigger, load_idx, make_root, synth_dataset,
    Dataset, TriggerSpec,
};
use proptest::prelude::*;

fn proportions(hist: &[usize]) -> Vec<f64> {
    let total: usize = hist.iter().sum();
    hist.iter().map(|&h| h as f64 / total as f64).collect()
}

fn client_histogram(ds: &Dataset, idx: &[usize]) -> Vec<usize> {
    let mut h = vec![0; ds.num_classes()];
    for &i in idx {
        h[ds.labels()[i]] += 1;
    }
    h
}

#[test]
fn huge_alpha_matches_global_histogram() {
    let ds = synth_dataset(0, 4, 400, 8).unwrap();
    let global = proportions(&ds.class_histogram());
    for seed in 0..10 {
        let plan = dirichlet_partition(&ds, 10, 1e6, seed).unwrap();
        for idx in &plan.client_indices {
            let local = proportions(&client_histogram(&ds, idx));
            for (l, g) in local.iter().zip(&global) {
                assert!((l - g).abs() <= 0.2 * g, "seed {seed}: {local:?} vs {global:?}");
            }
        }
    }
}

#[test]
fn tiny_alpha_concentrates_clients() {
    let ds = synth_dataset(1, 4, 400, 8).unwrap();
    let concentrated = (0..10)
        .filter(|&seed| {
            let plan = dirichlet_partition(&ds, 10, 0.01, seed).unwrap();
            plan.client_indices.iter().any(|idx| {
                let h = client_histogram(&ds, idx);
                *h.iter().max().unwrap() as f64 >= 0.8 * idx.len() as f64
            })
        })
        .count();
    assert!(concentrated >= 8, "only {concentrated} of 10 seeds");
}

/// Plain logistic regression by full-batch gradient descent.
fn logistic_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let d = train.dim();
    let mut w = vec![0.0; d + 1];
    for _ in 0..500 {
        let mut g = vec![0.0; d + 1];
        for i in 0..train.len() {
            let x = train.inputs().row(i);
            let z = w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - train.labels()[i] as f64;
            for j in 0..d {
                g[j] += err * x[j];
            }
            g[d] += err;
        }
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj -= 0.5 * gj / train.len() as f64;
        }
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.inputs().row(i);
            let z = w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            (z > 0.0) as usize == test.labels()[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn blobs_are_linearly_separable() {
    let train = synth_dataset(5, 2, 200, 16).unwrap();
    let test = synth_dataset(6, 2, 200, 16).unwrap();
    let acc = logistic_accuracy(&train, &test);
    assert!(acc >= 0.9, "logistic accuracy {acc}");
}

#[test]
fn synth_values_are_unit_interval_and_balanced() {
    let ds = synth_dataset(2, 3, 50, 12).unwrap();
    assert!(ds.inputs().data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(ds.class_histogram(), vec![50, 50, 50]);
    assert_eq!(synth_dataset(9, 5, 1, 8).unwrap().len(), 5);
}

fn idx_images(images: &[[u8; 4]]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    b.extend((images.len() as u32).to_be_bytes());
    b.extend(2u32.to_be_bytes());
    b.extend(2u32.to_be_bytes());
    for img in images {
        b.extend(img);
    }
    b
}

#[test]
fn idx_files_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let images = [[0, 255, 51, 102], [1, 2, 3, 4], [255, 255, 0, 0]];
    std::fs::write(dir.path().join("img"), idx_images(&images)).unwrap();
    let mut labels = vec![0, 0, 8, 1];
    labels.extend(3u32.to_be_bytes());
    labels.extend([2, 0, 1]);
    std::fs::write(dir.path().join("lbl"), &labels).unwrap();
    let ds = load_idx(&dir.path().join("img"), &dir.path().join("lbl")).unwrap();
    assert_eq!(ds.labels(), &[2, 0, 1]);
    for (r, img) in images.iter().enumerate() {
        let expect: Vec<f64> = img.iter().map(|&p| p as f64 / 255.0).collect();
        assert_eq!(ds.inputs().row(r), expect.as_slice());
    }

    std::fs::write(dir.path().join("short"), &idx_images(&images)[..20]).unwrap();
    assert!(load_idx(&dir.path().join("short"), &dir.path().join("lbl")).is_err());
    assert!(load_idx(&dir.path().join("missing"), &dir.path().join("lbl")).is_err());
}

#[test]
fn root_is_a_seeded_subset() {
    let test = synth_dataset(4, 4, 25, 8).unwrap();
    let a = make_root(&test, 64, 3).unwrap();
    assert_eq!(a, make_root(&test, 64, 3).unwrap());
    let rows: BTreeSet<Vec<u64>> = (0..a.len())
        .map(|i| a.inputs().row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(rows.len(), 64);
    let full = make_root(&test, test.len(), 0).unwrap();
    let mut x = full.labels().to_vec();
    x.sort_unstable();
    let mut y = test.labels().to_vec();
    y.sort_unstable();
    assert_eq!(x, y);
    assert!(make_root(&test, test.len() + 1, 0).is_err());
}

#[test]
fn backdoor_set_is_vacuous_for_target_only_data() {
    let ds = synth_dataset(4, 2, 10, 8).unwrap();
    let zeros: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == 0).collect();
    let only_target = ds.subset(&zeros).unwrap();
    let spec = TriggerSpec::corner_patch(8, 0.5);
    assert!(backdoor_test_set(&only_target, &spec).unwrap().is_none());
    let full = backdoor_test_set(&ds, &spec).unwrap().unwrap();
    assert_eq!(full.len(), 10);
    assert!(full.labels().iter().all(|&l| l == 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dirichlet_is_a_partition(
        seed in any::<u64>(),
        clients in 2usize..25,
        alpha in prop::sample::select(vec![0.01, 0.1, 0.5, 1.0, 10.0, 1e6]),
    ) {
        let ds = synth_dataset(seed, 3, 30, 8).unwrap();
        let plan = dirichlet_partition(&ds, clients, alpha, seed).unwrap();
        prop_assert_eq!(plan.client_indices.len(), clients);
        let mut all: Vec<usize> = plan.client_indices.iter().flatten().copied().collect();
        prop_assert!(plan.client_indices.iter().all(|c| !c.is_empty()));
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn iid_is_a_partition(seed in any::<u64>(), n in 10usize..200, clients in 2usize..10) {
        let plan = iid_partition(n, clients, seed).unwrap();
        let mut all: Vec<usize> = plan.client_indices.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes = plan.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn trigger_touches_exactly_floor_fraction(seed in any::<u64>(), per_class in 1usize..60, f in 0.01f64..=1.0) {
        let ds = synth_dataset(seed, 3, per_class, 8).unwrap();
        let spec = TriggerSpec::corner_patch(8, f);
        let out = inject_trigger(&ds, &spec, seed).unwrap();
        let expected = (f * ds.len() as f64).floor() as usize;
        let stamped = (0..ds.len())
            .filter(|&i| out.inputs().row(i)[5..] == [1.0, 1.0, 1.0] && out.labels()[i] == 0)
            .count();
        let untouched = (0..ds.len())
            .filter(|&i| out.inputs().row(i) == ds.inputs().row(i) && out.labels()[i] == ds.labels()[i])
            .count();
        prop_assert!(stamped >= expected);
        prop_assert!(untouched >= ds.len() - expected);
        if f == 1.0 {
            prop_assert!(out.labels().iter().all(|&l| l == 0));
        }
        prop_assert_eq!(out, inject_trigger(&ds, &spec, seed).unwrap());
    }
}
