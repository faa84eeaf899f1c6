mod common;

use common::*;
use numcore::Tensor;
use proptest::prelude::*;
use salvit::msa::{self, attention_mask, sim, AttentionConfig, Kernel, SimVariant};

fn variants() -> impl Strategy<Value = SimVariant> {
    prop_oneof![
        Just(SimVariant::Dot),
        Just(SimVariant::Arithmetic),
        Just(msa::harmonic()),
    ]
}

fn saliency(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0], n)
}

fn case(seed: u64, cfg: &AttentionConfig, l: usize, d: usize) -> (Tensor, numcore::ParamStore) {
    let mut r = rng(seed);
    let store = attention_store(&mut r, "a", d, l, cfg);
    (uniform(&mut r, &[l * l, d], 1.0), store)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masking_bias_is_non_negative(m in saliency(9), variant in variants()) {
        let mt = attention_mask(&m, variant).unwrap();
        prop_assert!(mt.data().iter().all(|&v| 1.0 - v >= 0.0));
    }

    #[test]
    fn sim_is_symmetric_and_permutation_equivariant(
        m in saliency(7),
        variant in variants(),
        perm in Just((0..7).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let s = sim(&m, variant).unwrap();
        prop_assert_eq!(&s, &s.transpose2().unwrap());
        let pm: Vec<f64> = perm.iter().map(|&i| m[i]).collect();
        let sp = sim(&pm, variant).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                prop_assert_eq!(sp.at2(i, j), s.at2(perm[i], perm[j]));
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_for_any_mask(seed in any::<u64>(), m in saliency(9), j in 0.0f64..1e4) {
        let cfg = AttentionConfig { j, ..softmax_cfg(2, 4) };
        let (x, store) = case(seed, &cfg, 3, 8);
        let (_, a) = soft(&x, &m, &cfg, &store);
        for row in a.data().chunks_exact(9) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rbf_entries_in_unit_interval(seed in any::<u64>(), m in saliency(9), j in 0.0f64..50.0) {
        // A positive learned bias can lift an unnormalized entry above 1.
        let cfg = AttentionConfig { j, heads: 2, head_dim: 4, use_pe: false, ..Default::default() };
        let (x, store) = case(seed, &cfg, 3, 8);
        let (_, a) = soft(&x, &m, &cfg, &store);
        prop_assert!(a.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn unit_saliency_recovers_vanilla(seed in any::<u64>(), rbf in any::<bool>(), pe in any::<bool>()) {
        let kernel = if rbf { Kernel::Rbf } else { Kernel::Softmax };
        let cfg = AttentionConfig { kernel, use_pe: pe, ..softmax_cfg(2, 4) };
        let (x, store) = case(seed, &cfg, 3, 8);
        let (z, a) = soft(&x, &[1.0; 9], &cfg, &store);
        let (zv, av) = vanilla_sa(&x, &cfg, &store, "a");
        prop_assert!(z.max_abs_diff(&zv) < 1e-12);
        let flat: Vec<f64> = av.into_iter().flatten().flatten().collect();
        prop_assert!(a.data().iter().zip(&flat).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn attention_is_continuous_in_saliency(seed in any::<u64>(), m in prop::collection::vec(0.01f64..0.99, 9), rbf in any::<bool>()) {
        let kernel = if rbf { Kernel::Rbf } else { Kernel::Softmax };
        let cfg = AttentionConfig { kernel, ..softmax_cfg(2, 4) };
        let (x, store) = case(seed, &cfg, 3, 8);
        let (_, a) = soft(&x, &m, &cfg, &store);
        let shifted: Vec<f64> = m.iter().map(|v| v + 1e-6).collect();
        let (_, b) = soft(&x, &shifted, &cfg, &store);
        prop_assert!(a.max_abs_diff(&b) < 1e-3);
    }

    #[test]
    fn off_diagonal_mass_non_increasing_in_j(seed in any::<u64>()) {
        let mut prev = f64::INFINITY;
        for j in [0.0, 1.0, 10.0, 100.0, 1e4] {
            let cfg = AttentionConfig { j, ..softmax_cfg(2, 4) };
            let (x, store) = case(seed, &cfg, 3, 8);
            let (_, a) = soft(&x, &[0.0; 9], &cfg, &store);
            let n = 9;
            let mass: f64 = (0..2 * n)
                .map(|r| a.data()[r * n..(r + 1) * n].iter().enumerate().filter(|(c, _)| *c != r % n).map(|(_, v)| v).sum::<f64>())
                .sum();
            prop_assert!(mass <= prev + 1e-12);
            prev = mass;
        }
    }

    #[test]
    fn large_j_matches_hard_oracle(seed in any::<u64>(), m in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0)], 9)) {
        let cfg = AttentionConfig { j: 1e4, ..softmax_cfg(2, 4) };
        let (x, store) = case(seed, &cfg, 3, 8);
        let (z, _) = soft(&x, &m, &cfg, &store);
        let hard = msa::hard_msa_oracle(&x, &m, &cfg, &store, "a").unwrap();
        prop_assert!(z.max_abs_diff(&hard) < 1e-3);
    }
}

#[test]
fn zero_bias_table_matches_no_pe() {
    let cfg = softmax_cfg(2, 4);
    let (x, mut store) = case(3, &cfg, 3, 8);
    store.insert("a.pe", Tensor::zeros(&[2, 25]));
    let m = [0.2, 0.9, 1.0, 0.0, 0.4, 0.6, 0.3, 0.8, 0.5];
    let (z, a) = soft(&x, &m, &cfg, &store);
    let (z0, a0) = soft(&x, &m, &AttentionConfig { use_pe: false, ..cfg.clone() }, &store);
    assert_eq!(z, z0);
    assert_eq!(a, a0);
}

#[test]
fn unit_saliency_hard_oracle_is_vanilla() {
    let cfg = softmax_cfg(2, 4);
    let (x, store) = case(11, &cfg, 3, 8);
    let hard = msa::hard_msa_oracle(&x, &[1.0; 9], &cfg, &store, "a").unwrap();
    let (zv, _) = vanilla_sa(&x, &cfg, &store, "a");
    assert!(hard.max_abs_diff(&zv) < 1e-12);
}

#[test]
fn zero_saliency_large_j_isolates_tokens() {
    let cfg = AttentionConfig { j: 1e4, ..softmax_cfg(2, 4) };
    let (x, store) = case(5, &cfg, 3, 8);
    let (_, a) = soft(&x, &[0.0; 9], &cfg, &store);
    assert!(max_off_diagonal(&a) < 1e-3);
}
