use numcore::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use salvit::encoder::{self, Ablation, EncoderConfig};
use salvit::morph::{self, MorphConfig};
use salvit::msa::AttentionConfig;
use salvit::saliency::SaliencyMap;

fn small(ablation: Ablation) -> EncoderConfig {
    EncoderConfig {
        image: 16,
        patch: 4,
        backbone: [4, 6],
        d_raw: 8,
        d_vit: 8,
        ffn_hidden: 12,
        ablation,
        attention: AttentionConfig { heads: 2, head_dim: 4, ..Default::default() },
        morph: MorphConfig { d_e: 4, hidden: 5, ..Default::default() },
        ..Default::default()
    }
}

proptest! {
    #[test]
    fn exponent_bounded(theta in -1e3f64..1e3, rho1 in 0.8f64..5.0) {
        let cfg = MorphConfig { rho1, ..Default::default() };
        let (_, tt) = morph::mcm_power(&[0.5], theta, &cfg).unwrap();
        prop_assert!((0.0..=rho1).contains(&tt));
    }

    #[test]
    fn power_dilates_below_one_and_erodes_above(
        m in prop::collection::vec(0.0f64..=1.0, 16),
        theta in -8.0f64..8.0,
    ) {
        let cfg = MorphConfig::default();
        let (out, tt) = morph::mcm_power(&m, theta, &cfg).unwrap();
        for (o, v) in out.iter().zip(&m) {
            prop_assert!((0.0..=1.0).contains(o));
            if tt < 1.0 {
                prop_assert!(o >= v);
            } else if tt > 1.0 {
                prop_assert!(o <= v);
            }
        }
    }

    #[test]
    fn regularizer_zero_inside_dead_zone(t in 0.0f64..2.0) {
        let cfg = MorphConfig::default();
        let r = morph::morph_reg(t, &cfg);
        prop_assert!(r >= 0.0);
        prop_assert_eq!(r == 0.0, (t - 0.7).powi(2) <= 0.05);
    }
}

#[test]
fn fixed_unit_exponent_reproduces_no_ml() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let full = small(Ablation::Full);
    let mut store = ParamStore::new();
    encoder::init_params(&mut store, &mut rng, &full).unwrap();
    for name in ["block0.attn.wo", "block0.ffn.w2"] {
        let shape = store.get(name).unwrap().shape().to_vec();
        store.insert(name, ParamStore::trunc_normal(&mut rng, &shape, 0.3));
    }
    let side = full.image;
    let rgb: Vec<f64> = (0..side * side * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    let sal = SaliencyMap::new(side, side, (0..side * side).map(|i| ((i * 13) % 17) as f64 / 16.0).collect()).unwrap();
    // The MPG output layer starts at zero, so theta = 0 and the exponent is rho1 / 2 = 1.
    assert_eq!(store.get("block0.mpg.w2").unwrap(), &Tensor::zeros(&[5, 1]));
    let a = encoder::encode(&rgb, &sal, &store, &full).unwrap();
    let b = encoder::encode(&rgb, &sal, &store, &small(Ablation::NoMl)).unwrap();
    assert_eq!(a, b);
}
