use numcore::ParamStore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salvit::encoder::{self, Ablation, EncoderConfig};
use salvit::morph::MorphConfig;
use salvit::msa::AttentionConfig;
use salvit::saliency::SaliencyMap;

fn cfg(ablation: Ablation, use_pe: bool) -> EncoderConfig {
    EncoderConfig {
        image: 48,
        patch: 8,
        backbone: [4, 6],
        d_raw: 8,
        d_vit: 8,
        ffn_hidden: 12,
        ablation,
        attention: AttentionConfig { heads: 2, head_dim: 4, use_pe, ..Default::default() },
        morph: MorphConfig { d_e: 4, hidden: 5, ..Default::default() },
        ..Default::default()
    }
}

/// Initialized parameters with the zero-initialized output layers
/// randomized so that every block contributes.
fn store(seed: u64, c: &EncoderConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    encoder::init_params(&mut s, &mut rng, c).unwrap();
    for name in ["block0.attn.wo", "block0.ffn.w2", "block0.mpg.w2", "block0.attn.pe"] {
        if let Some(t) = s.get(name) {
            let shape = t.shape().to_vec();
            s.insert(name, ParamStore::trunc_normal(&mut rng, &shape, 0.5));
        }
    }
    s
}

/// Black image with a textured object filling the tokens `[r0, r0 + 2) x [c0, c0 + 2)`.
fn object(seed: u64, side: usize, patch: usize, r0: usize, c0: usize) -> (Vec<f64>, SaliencyMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex: Vec<f64> = (0..4 * patch * patch * 3).map(|_| rng.gen()).collect();
    let stex: Vec<f64> = (0..4 * patch * patch).map(|_| rng.gen()).collect();
    let mut rgb = vec![0.0; side * side * 3];
    let mut sal = vec![0.0; side * side];
    let w = 2 * patch;
    for y in 0..w {
        for x in 0..w {
            let p = (r0 * patch + y) * side + c0 * patch + x;
            rgb[3 * p..3 * p + 3].copy_from_slice(&tex[3 * (y * w + x)..3 * (y * w + x) + 3]);
            sal[p] = stex[y * w + x];
        }
    }
    (rgb, SaliencyMap::new(side, side, sal).unwrap())
}

/// Shifting the object by one token down and right shifts the output
/// tokens the same way.
fn check_shift(c: &EncoderConfig, seed: u64, r0: usize, c0: usize) -> Result<(), TestCaseError> {
    let s = store(seed, c);
    let (l, side) = (c.grid(), c.image);
    let (rgb, sal) = object(seed, side, c.patch, r0, c0);
    let (rgb2, sal2) = object(seed, side, c.patch, r0 + 1, c0 + 1);
    let a = encoder::encode(&rgb, &sal, &s, c).unwrap();
    let b = encoder::encode(&rgb2, &sal2, &s, c).unwrap();
    for r in 0..l - 1 {
        for col in 0..l - 1 {
            let (i, j) = (r * l + col, (r + 1) * l + col + 1);
            let diff = a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(diff < 1e-9, "token ({r}, {col}) differs by {diff}");
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn vanilla_vit_ignores_saliency(seed in any::<u64>(), noise in prop::collection::vec(0.0f64..=1.0, 48 * 48)) {
        let c = cfg(Ablation::VanillaVit, true);
        let s = store(seed, &c);
        let (rgb, sal) = object(seed, 48, 8, 1, 2);
        let a = encoder::encode(&rgb, &sal, &s, &c).unwrap();
        let b = encoder::encode(&rgb, &SaliencyMap::new(48, 48, noise).unwrap(), &s, &c).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn translation_equivariant_without_pe(seed in any::<u64>(), r0 in 0usize..4, c0 in 0usize..4, vanilla in any::<bool>()) {
        let c = cfg(if vanilla { Ablation::VanillaVit } else { Ablation::NoMl }, false);
        check_shift(&c, seed, r0, c0)?;
    }

    // The SEM's zero padding sees activity spread from the object, so with
    // the morphology learner the object must stay clear of the border.
    #[test]
    fn translation_equivariant_with_morphology(seed in any::<u64>()) {
        let c = EncoderConfig { image: 72, ..cfg(Ablation::Full, false) };
        check_shift(&c, seed, 3, 3)?;
    }
}

#[test]
fn encode_is_deterministic() {
    let c = cfg(Ablation::Full, true);
    let s = store(4, &c);
    let (rgb, sal) = object(4, 48, 8, 2, 2);
    assert_eq!(encoder::encode(&rgb, &sal, &s, &c).unwrap(), encoder::encode(&rgb, &sal, &s, &c).unwrap());
}
