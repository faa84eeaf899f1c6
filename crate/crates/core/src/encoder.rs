//! Feature encoder: a strided convolutional backbone producing raw tokens,
//! cascaded SalViT blocks sharing one SEM, and the channelwise ensemble
//! `[F_raw; F_1; ...; F_T]`.

use numcore::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{dim, param, Result};
use crate::morph::{self, MorphConfig, MpgNames};
use crate::msa::{self, AttentionConfig, MsaNames};
use crate::saliency::{downscale, SaliencyMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// Fixed exponent 1: the raw downscaled map drives the mask.
    NoMl,
    /// No relative-position bias.
    NoPe,
    /// Drop the backbone tokens from the output.
    VitOnly,
    /// Backbone tokens only.
    CnnOnly,
    /// Saliency forced to 1 (plain ViT block).
    VanillaVit,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoMl,
        Ablation::NoPe,
        Ablation::VitOnly,
        Ablation::CnnOnly,
        Ablation::VanillaVit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMl => "no_ml",
            Ablation::NoPe => "no_pe",
            Ablation::VitOnly => "vit_only",
            Ablation::CnnOnly => "cnn_only",
            Ablation::VanillaVit => "vanilla_vit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    fn uses_blocks(self) -> bool {
        self != Ablation::CnnOnly
    }

    fn uses_ml(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoPe | Ablation::VitOnly)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Square input side in pixels.
    pub image: usize,
    pub patch: usize,
    /// Backbone intermediate widths.
    pub backbone: [usize; 2],
    pub d_raw: usize,
    pub d_vit: usize,
    /// Number of SalViT blocks.
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub ablation: Ablation,
    /// Layer-normalize backbone tokens before concatenation.
    pub ln_raw: bool,
    pub attention: AttentionConfig,
    pub morph: MorphConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image: 96,
            patch: 16,
            backbone: [32, 64],
            d_raw: 64,
            d_vit: 64,
            blocks: 1,
            ffn_hidden: 128,
            ablation: Ablation::Full,
            ln_raw: false,
            attention: AttentionConfig::default(),
            morph: MorphConfig::default(),
        }
    }
}

pub const LN_EPS: f64 = 1e-6;

impl EncoderConfig {
    /// Token grid side.
    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Output channels.
    pub fn out_dim(&self) -> usize {
        match self.ablation {
            Ablation::CnnOnly => self.d_raw,
            Ablation::VitOnly => self.d_vit,
            _ => self.d_raw + self.d_vit,
        }
    }

    /// The attention settings after applying the ablation.
    pub fn effective_attention(&self) -> AttentionConfig {
        let mut a = self.attention.clone();
        if self.ablation == Ablation::NoPe {
            a.use_pe = false;
        }
        a
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch % 4 != 0 || self.image % self.patch != 0 || self.image == 0 {
            return param(format!(
                "image side {} must be a positive multiple of the patch size {} (itself a multiple of 4)",
                self.image, self.patch
            ));
        }
        if self.blocks == 0 || self.d_vit % self.blocks != 0 {
            return param(format!("d_vit {} is not divisible by {} blocks", self.d_vit, self.blocks));
        }
        if self.d_raw == 0 || self.ffn_hidden == 0 || self.backbone.contains(&0) {
            return param("encoder widths must be positive");
        }
        self.attention.validate()?;
        self.morph.validate()
    }
}

fn conv_names(prefix: &str, i: usize) -> (String, String) {
    (format!("{prefix}.conv{i}.w"), format!("{prefix}.conv{i}.b"))
}

pub fn block_prefix(t: usize) -> String {
    format!("block{t}")
}

pub fn init_params(store: &mut ParamStore, rng: &mut impl Rng, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    let k0 = cfg.patch / 4;
    let shapes = [
        [k0, k0, 3, cfg.backbone[0]],
        [2, 2, cfg.backbone[0], cfg.backbone[1]],
        [2, 2, cfg.backbone[1], cfg.d_raw],
    ];
    for (i, s) in shapes.iter().enumerate() {
        let (w, b) = conv_names("backbone", i);
        store.insert(w, ParamStore::he_normal(rng, s, s[0] * s[1] * s[2]));
        store.insert(b, Tensor::zeros(&[s[3]]));
    }
    if cfg.ln_raw {
        store.insert("raw_ln.g", Tensor::ones(&[cfg.d_raw]));
        store.insert("raw_ln.b", Tensor::zeros(&[cfg.d_raw]));
    }
    if !cfg.ablation.uses_blocks() {
        return Ok(());
    }
    if cfg.ablation.uses_ml() {
        morph::init_sem(store, rng, cfg.patch, cfg.morph.d_e);
    }
    let d = cfg.d_raw;
    let per = cfg.d_vit / cfg.blocks;
    for t in 0..cfg.blocks {
        let p = block_prefix(t);
        init_block(store, rng, &p, d, cfg.grid(), cfg.ffn_hidden, &cfg.attention);
        if cfg.ablation.uses_ml() {
            morph::init_mpg(store, rng, &format!("{p}.mpg"), d, &cfg.morph);
        }
        store.insert(format!("{p}.out_ln.g"), Tensor::ones(&[d]));
        store.insert(format!("{p}.out_ln.b"), Tensor::zeros(&[d]));
        store.insert(format!("{p}.out_fc.w"), ParamStore::trunc_normal(rng, &[d, per], 0.02));
        store.insert(format!("{p}.out_fc.b"), Tensor::zeros(&[per]));
    }
    Ok(())
}

/// Block parameters. The attention output projection and the second FFN
/// layer start at zero, so a fresh block is the identity.
pub fn init_block(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize, l: usize, hidden: usize, attn: &AttentionConfig) {
    store.insert(format!("{prefix}.ln1.g"), Tensor::ones(&[d]));
    store.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.ln2.g"), Tensor::ones(&[d]));
    store.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[d]));
    msa::init_params(store, rng, &format!("{prefix}.attn"), d, l, attn, true);
    store.insert(format!("{prefix}.ffn.w1"), ParamStore::trunc_normal(rng, &[d, hidden], 0.02));
    store.insert(format!("{prefix}.ffn.b1"), Tensor::zeros(&[hidden]));
    store.insert(format!("{prefix}.ffn.w2"), Tensor::zeros(&[hidden, d]));
    store.insert(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d]));
}

/// Strided convolution stack over `[B, H, W, 3]`, giving `[B * l * l, d_raw]`.
pub fn backbone_var<'g>(rgb: Var<'g>, store: &ParamStore, cfg: &EncoderConfig) -> Result<Var<'g>> {
    let g = rgb.graph();
    let s = rgb.shape();
    if s.len() != 4 || s[1] != cfg.image || s[2] != cfg.image || s[3] != 3 {
        return dim(format!("backbone input {s:?} is not [B, {0}, {0}, 3]", cfg.image));
    }
    let strides = [cfg.patch / 4, 2, 2];
    let mut h = rgb;
    for (i, &st) in strides.iter().enumerate() {
        let (w, b) = conv_names("backbone", i);
        h = h.conv2d(&g.param(store, &w)?, &g.param(store, &b)?, st, 0)?;
        if i + 1 < strides.len() {
            h = h.relu();
        }
    }
    let o = h.shape();
    Ok(h.reshape(&[o[0] * o[1] * o[2], o[3]])?)
}

pub fn backbone(rgb: &[f64], store: &ParamStore, cfg: &EncoderConfig) -> Result<Tensor> {
    let g = Graph::new();
    let x = g.constant(Tensor::new(&[1, cfg.image, cfg.image, 3], rgb.to_vec())?);
    Ok((*backbone_var(x, store, cfg)?.value()).clone())
}

/// Pre-norm residual block: `Z' = MSA(LN(Z), m) + Z`, `Z'' = FFN(LN(Z')) + Z'`.
pub fn salvit_block_var<'g>(
    z: Var<'g>,
    m: Var<'g>,
    attn: &AttentionConfig,
    store: &ParamStore,
    prefix: &str,
) -> Result<(Var<'g>, Vec<Var<'g>>)> {
    let g = z.graph();
    let p = |s: &str| g.param(store, &format!("{prefix}.{s}"));
    let h = z.layer_norm(&p("ln1.g")?, &p("ln1.b")?, LN_EPS)?;
    let out = msa::soft_msa_var(h, m, attn, store, &MsaNames::new(&format!("{prefix}.attn")))?;
    let z1 = out.z.add(&z)?;
    let h = z1.layer_norm(&p("ln2.g")?, &p("ln2.b")?, LN_EPS)?;
    let f = h
        .linear(&p("ffn.w1")?, Some(&p("ffn.b1")?))?
        .gelu()
        .linear(&p("ffn.w2")?, Some(&p("ffn.b2")?))?;
    Ok((f.add(&z1)?, out.attention))
}

pub fn salvit_block(z: &Tensor, m: &[f64], attn: &AttentionConfig, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let g = Graph::new();
    let (out, _) = salvit_block_var(g.constant(z.clone()), g.constant(Tensor::vector(m.to_vec())), attn, store, prefix)?;
    Ok((*out.value()).clone())
}

/// One image as seen by the encoder.
#[derive(Clone, Debug)]
pub struct EncoderInput<'a> {
    /// `side x side x 3`, channels last.
    pub rgb: &'a [f64],
    pub sal: &'a SaliencyMap,
    /// Tokens whose backbone features are zeroed (row-major, length `l * l`).
    pub feature_mask: Option<&'a [bool]>,
}

pub struct EncoderOutput<'g> {
    /// `[B * n, out_dim]`, images stacked in input order.
    pub features: Var<'g>,
    /// Exponents `theta~`, one per image per block (empty without ML).
    pub theta_tilde: Vec<Var<'g>>,
    /// Token saliency fed to each block, per image then block.
    pub masks: Vec<Var<'g>>,
    /// Attention of the last block, per image then head.
    pub attention: Vec<Vec<Var<'g>>>,
}

/// Encodes a batch of images on graph `g`.
pub fn encode_var<'g>(g: &'g Graph, inputs: &[EncoderInput<'_>], store: &ParamStore, cfg: &EncoderConfig) -> Result<EncoderOutput<'g>> {
    cfg.validate()?;
    let side = cfg.image;
    let (l, n) = (cfg.grid(), cfg.tokens());
    let batch = inputs.len();
    if batch == 0 {
        return dim("encoder called on an empty batch");
    }
    let mut rgb = Vec::with_capacity(batch * side * side * 3);
    for inp in inputs {
        if inp.rgb.len() != side * side * 3 || inp.sal.width() != side || inp.sal.height() != side {
            return dim(format!("image is not {side}x{side}"));
        }
        rgb.extend_from_slice(inp.rgb);
    }
    let mut raw = backbone_var(g.constant(Tensor::new(&[batch, side, side, 3], rgb)?), store, cfg)?;
    if inputs.iter().any(|i| i.feature_mask.is_some()) {
        let mut keep = Vec::with_capacity(batch * n);
        for inp in inputs {
            match inp.feature_mask {
                Some(fm) if fm.len() == n => keep.extend(fm.iter().map(|&z| if z { 0.0 } else { 1.0 })),
                Some(fm) => return dim(format!("feature mask of {} for {n} tokens", fm.len())),
                None => keep.extend(std::iter::repeat(1.0).take(n)),
            }
        }
        raw = raw.mul_col(&g.constant(Tensor::vector(keep)))?;
    }
    let raw_out = if cfg.ln_raw {
        raw.layer_norm(&g.param(store, "raw_ln.g")?, &g.param(store, "raw_ln.b")?, LN_EPS)?
    } else {
        raw
    };
    let mut out = EncoderOutput {
        features: raw_out,
        theta_tilde: Vec::new(),
        masks: Vec::new(),
        attention: Vec::new(),
    };
    if !cfg.ablation.uses_blocks() {
        return Ok(out);
    }

    let attn = cfg.effective_attention();
    let f_sal = if cfg.ablation.uses_ml() {
        let mut stack = Vec::with_capacity(batch * side * side * 4);
        for inp in inputs {
            stack.extend_from_slice(morph::sem_input(inp.rgb, inp.sal.values(), side)?.data());
        }
        let x = g.constant(Tensor::new(&[batch, side, side, 4], stack)?);
        Some(morph::sem_embed_var(x, store, cfg.patch)?)
    } else {
        None
    };

    let mut vit_parts: Vec<Var<'g>> = Vec::with_capacity(cfg.blocks);
    let mut per_image_tokens: Vec<Var<'g>> = (0..batch)
        .map(|b| raw.slice_rows(b * n, (b + 1) * n))
        .collect::<std::result::Result<_, _>>()?;
    let m_down: Vec<Vec<f64>> = inputs
        .iter()
        .map(|inp| downscale(inp.sal, l))
        .collect::<Result<_>>()?;
    for t in 0..cfg.blocks {
        let prefix = block_prefix(t);
        let mut next = Vec::with_capacity(batch);
        for b in 0..batch {
            let z = per_image_tokens[b];
            let m = match cfg.ablation {
                Ablation::VanillaVit => g.constant(Tensor::ones(&[n])),
                Ablation::NoMl => g.constant(Tensor::vector(m_down[b].clone())),
                _ => {
                    let fs = f_sal.expect("SEM present with ML").slice_rows(b * n, (b + 1) * n)?;
                    let theta = morph::mpg_theta_var(z, fs, store, &MpgNames::new(&format!("{prefix}.mpg")))?;
                    let (m, tt) = morph::mcm_power_var(g.constant(Tensor::vector(m_down[b].clone())), theta, &cfg.morph)?;
                    out.theta_tilde.push(tt);
                    m
                }
            };
            out.masks.push(m);
            let (zb, attention) = salvit_block_var(z, m, &attn, store, &prefix)?;
            if t + 1 == cfg.blocks {
                out.attention.push(attention);
            }
            next.push(zb);
        }
        per_image_tokens = next;
        let stacked = Var::concat_rows(&per_image_tokens)?;
        let p = |s: &str| g.param(store, &format!("{prefix}.{s}"));
        let f = stacked
            .layer_norm(&p("out_ln.g")?, &p("out_ln.b")?, LN_EPS)?
            .linear(&p("out_fc.w")?, Some(&p("out_fc.b")?))?;
        vit_parts.push(f);
    }
    let mut parts = Vec::with_capacity(cfg.blocks + 1);
    if cfg.ablation != Ablation::VitOnly {
        parts.push(out.features);
    }
    parts.extend(vit_parts);
    out.features = Var::concat_cols(&parts)?;
    Ok(out)
}

/// Plain evaluation of [`encode_var`] for one image: `[l * l, out_dim]`.
pub fn encode(rgb: &[f64], sal: &SaliencyMap, store: &ParamStore, cfg: &EncoderConfig) -> Result<Tensor> {
    let g = Graph::new();
    let out = encode_var(&g, &[EncoderInput { rgb, sal, feature_mask: None }], store, cfg)?;
    Ok((*out.features.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            image: 16,
            patch: 4,
            backbone: [4, 6],
            d_raw: 8,
            d_vit: 8,
            ffn_hidden: 12,
            attention: AttentionConfig { heads: 2, head_dim: 4, ..Default::default() },
            morph: MorphConfig { d_e: 4, hidden: 5, ..Default::default() },
            ..Default::default()
        }
    }

    fn image(seed: u64, side: usize) -> (Vec<f64>, SaliencyMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = (0..side * side * 3).map(|_| rng.gen::<f64>()).collect();
        let sal = SaliencyMap::new(side, side, (0..side * side).map(|_| rng.gen::<f64>()).collect()).unwrap();
        (rgb, sal)
    }

    #[test]
    fn backbone_shapes_and_zero_weights() {
        let cfg = small();
        let mut store = ParamStore::new();
        init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &cfg).unwrap();
        let (rgb, _) = image(2, 16);
        assert_eq!(backbone(&rgb, &store, &cfg).unwrap().shape(), &[16, 8]);
        for i in 0..3 {
            let (w, b) = conv_names("backbone", i);
            store.get_mut(&w).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
            store.get_mut(&b).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(backbone(&rgb, &store, &cfg).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(backbone(&rgb[..10], &store, &cfg).is_err());
    }

    #[test]
    fn fresh_block_is_identity() {
        let cfg = small();
        let mut store = ParamStore::new();
        init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &cfg).unwrap();
        let z = Tensor::new(&[16, 8], (0..128).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let out = salvit_block(&z, &[0.4; 16], &cfg.attention, &store, "block0").unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn output_width_per_ablation() {
        let (rgb, sal) = image(3, 16);
        for ab in Ablation::ALL {
            let cfg = EncoderConfig { ablation: ab, ..small() };
            let mut store = ParamStore::new();
            init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &cfg).unwrap();
            let e = encode(&rgb, &sal, &store, &cfg).unwrap();
            assert_eq!(e.shape(), &[16, cfg.out_dim()], "{}", ab.name());
        }
        assert_eq!(small().out_dim(), 16);
    }

    #[test]
    fn cnn_only_equals_backbone() {
        let cfg = EncoderConfig { ablation: Ablation::CnnOnly, ..small() };
        let mut store = ParamStore::new();
        init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(4), &cfg).unwrap();
        let (rgb, sal) = image(5, 16);
        assert_eq!(encode(&rgb, &sal, &store, &cfg).unwrap(), backbone(&rgb, &store, &cfg).unwrap());
    }

    #[test]
    fn rejects_inconsistent_config() {
        assert!(EncoderConfig { image: 18, ..small() }.validate().is_err());
        assert!(EncoderConfig { d_vit: 7, blocks: 2, ..small() }.validate().is_err());
        assert!(EncoderConfig { patch: 6, image: 18, ..small() }.validate().is_err());
    }
}
