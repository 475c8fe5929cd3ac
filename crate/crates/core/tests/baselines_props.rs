use fera_sim::baselines::{coordwise_median, fedavg, krum_scores, multi_krum, multi_krum_aggregate};
use fera_sim::fera::ClientUpdate;
use fera_sim::nn::{FlatParams, LayerShape};
use proptest::prelude::*;

fn fp(v: Vec<f64>) -> FlatParams {
    let n = v.len();
    FlatParams::new(v, vec![LayerShape { d_in: 0, d_out: n }]).unwrap()
}

fn clients(min: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (min..12, 1usize..6).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec((-20i32..20).prop_map(f64::from), d), n),
            prop::collection::vec(1usize..40, n),
        )
    })
}

fn updates(vs: &[Vec<f64>], sizes: &[usize]) -> Vec<ClientUpdate> {
    vs.iter()
        .zip(sizes)
        .map(|(v, &n)| ClientUpdate { params: fp(v.clone()), num_samples: n })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn krum_is_translation_invariant((vs, sizes) in clients(5), shift in prop::collection::vec(-50i32..50, 6)) {
        let f = (vs.len() - 3) / 2;
        let m = vs.len() - f;
        let moved: Vec<Vec<f64>> = vs
            .iter()
            .map(|v| v.iter().zip(&shift).map(|(x, s)| x + *s as f64).collect())
            .collect();
        let a: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        let b: Vec<&[f64]> = moved.iter().map(Vec::as_slice).collect();
        prop_assert_eq!(krum_scores(&a, f).unwrap(), krum_scores(&b, f).unwrap());
        prop_assert_eq!(
            multi_krum(&updates(&vs, &sizes), f, m).unwrap(),
            multi_krum(&updates(&moved, &sizes), f, m).unwrap()
        );
    }

    #[test]
    fn median_is_bounded_coordinatewise((vs, sizes) in clients(1), eta in 0.1f64..1.0) {
        let d = vs[0].len();
        let global = fp(vec![0.5; d]);
        let out = coordwise_median(&updates(&vs, &sizes), &global, eta).unwrap();
        for j in 0..d {
            let col: Vec<f64> = vs.iter().map(|v| v[j] - 0.5).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let step = (out.values()[j] - 0.5) / eta;
            prop_assert!(step >= lo - 1e-9 && step <= hi + 1e-9);
        }
    }

    #[test]
    fn fedavg_is_the_weighted_mean((vs, sizes) in clients(1), eta in 0.1f64..1.0) {
        let d = vs[0].len();
        let global = fp(vec![1.0; d]);
        let out = fedavg(&updates(&vs, &sizes), &global, eta).unwrap();
        let total: usize = sizes.iter().sum();
        for j in 0..d {
            let mean: f64 = vs.iter().zip(&sizes).map(|(v, &n)| n as f64 * (v[j] - 1.0)).sum::<f64>() / total as f64;
            prop_assert!((out.values()[j] - (1.0 + eta * mean)).abs() <= 1e-9);
        }
    }

    #[test]
    fn multi_krum_selects_m_clients((vs, sizes) in clients(5)) {
        let f = 1;
        let m = vs.len() - f;
        let d = vs[0].len();
        let (out, sel) = multi_krum_aggregate(&updates(&vs, &sizes), &fp(vec![0.0; d]), f, m, 1.0).unwrap();
        prop_assert_eq!(sel.len(), m);
        prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
        for j in 0..d {
            let mean = sel.iter().map(|&i| vs[i][j]).sum::<f64>() / m as f64;
            prop_assert!((out.values()[j] - mean).abs() <= 1e-9);
        }
    }
}

#[test]
fn krum_drops_a_far_attacker() {
    let mut vs: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64 * 0.01, 1.0]).collect();
    vs.push(vec![100.0, -100.0]);
    let sel = multi_krum(&updates(&vs, &[1; 10]), 1, 9).unwrap();
    assert_eq!(sel, (0..9).collect::<Vec<_>>());
}
