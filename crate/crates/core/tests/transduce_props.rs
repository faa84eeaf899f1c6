use proptest::prelude::*;
use salvit::fskd;
use salvit::transduce::{self, Candidate};

fn vecs(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), n)
}

fn inductive(skrs: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    skrs.iter().map(|s| fskd::prototypes(&[s.clone()]).unwrap().remove(0).1).collect()
}

proptest! {
    #[test]
    fn assignment_on_simplex(phi in prop::collection::vec(-3.0f64..3.0, 5), protos in vecs(4, 5), sigma in 0.01f64..3.0) {
        let p = transduce::assign_prob(&phi, &protos, sigma).unwrap();
        prop_assert_eq!(p.len(), 4);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_kappa_is_inductive(
        skrs in prop::collection::vec(vecs(3, 4), 3),
        selected in prop::collection::vec(vecs(5, 4), 3),
        sigma in 0.05f64..2.0,
        normalize in any::<bool>(),
    ) {
        let protos = inductive(&skrs);
        let refined = transduce::refine(&protos, &skrs, &selected, 1.0, sigma, normalize).unwrap();
        prop_assert_eq!(refined, protos);
    }

    #[test]
    fn refinement_ignores_candidate_order(
        skrs in prop::collection::vec(vecs(2, 4), 2),
        selected in prop::collection::vec(vecs(6, 4), 2),
        kappa in 0.0f64..1.0,
        normalize in any::<bool>(),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let protos = inductive(&skrs);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = selected.clone();
        shuffled.iter_mut().for_each(|s| s.shuffle(&mut rng));
        let a = transduce::refine(&protos, &skrs, &selected, kappa, 0.5, normalize).unwrap();
        let b = transduce::refine(&protos, &skrs, &shuffled, kappa, 0.5, normalize).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn no_candidates_gives_support_mean(skrs in prop::collection::vec(vecs(3, 4), 2), kappa in 0.0f64..=1.0) {
        let protos = inductive(&skrs);
        let refined = transduce::refine(&protos, &skrs, &[vec![], vec![]], kappa, 0.3, true).unwrap();
        for (x, y) in refined.iter().flatten().zip(protos.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn refine_worked_example() {
    let c = transduce::refine(&[vec![0.0, 0.0]], &[vec![vec![0.0, 0.0]]], &[vec![vec![1.0, 0.0]]], 0.8, 0.05, false).unwrap();
    assert!((c[0][0] - 0.2).abs() < 1e-15 && c[0][1] == 0.0);
}

#[test]
fn assignment_ratio_example() {
    let sigma: f64 = 0.3;
    let far = 2.0 * sigma * sigma * 9f64.ln();
    let p = transduce::assign_prob(&[0.0, 0.0], &[vec![0.0, 0.0], vec![far, 0.0]], sigma).unwrap();
    assert!((p[0] - 0.9).abs() < 1e-12 && (p[1] - 0.1).abs() < 1e-12);
}

#[test]
fn selection_keeps_highest_scores() {
    let cand = |score: f64, query: usize| Candidate {
        feature: vec![score],
        score,
        query,
        ty: 0,
        rank: 0,
        x: [0.0; 2],
    };
    let list = [cand(0.9, 0), cand(0.5, 1), cand(0.7, 2)];
    let mut picked = transduce::select_top_eta(&list, 2);
    picked.sort();
    assert_eq!(picked, vec![0, 2]);
}

#[test]
fn gt_oracle_with_no_correct_candidate_is_inductive() {
    let skrs = vec![vec![vec![0.5, -1.0]], vec![vec![2.0, 0.0]]];
    let protos = inductive(&skrs);
    let cands = vec![
        vec![Candidate { feature: vec![9.0, 9.0], score: 0.8, query: 0, ty: 0, rank: 0, x: [0.0; 2] }],
        vec![],
    ];
    let cfg = transduce::TransductiveConfig { eta: 1, z: 1, ..Default::default() };
    let c = transduce::refine_gt_oracle(&protos, &skrs, &cands, |_| false, &cfg).unwrap();
    assert_eq!(c, protos);
}
