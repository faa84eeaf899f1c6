//! Run configuration: every module's settings in one line-based
//! `key = value` file with dotted section keys. The canonical rendering is
//! hashed to identify runs.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::data::DataConfig;
use super::sample::KeypointSet;
use crate::encoder::{Ablation, EncoderConfig};
use crate::error::{Error, Result};
use crate::fskd::{FskdConfig, ModelConfig};
use crate::msa::{Kernel, SimVariant, HARMONIC_EPS};
use crate::robust::{AlignMode, LossWeights, MaskStrategy, OcclusionKind, OcclusionSpec};
use crate::transduce::TransductiveConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    pub lr: f64,
    pub k: usize,
    pub queries: usize,
    pub aux: bool,
    pub log_every: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 3000,
            lr: 1e-4,
            k: 1,
            queries: 1,
            aux: true,
            log_every: 100,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaaConfig {
    pub strategy: MaskStrategy,
    pub align: AlignMode,
    /// Treat the clean view as a constant target in the alignment loss.
    pub detach_clean: bool,
}

impl Default for MaaConfig {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::default(),
            align: AlignMode::None,
            detach_clean: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub k: usize,
    pub queries: usize,
    pub keypoints: KeypointSet,
    pub tau: f64,
    /// Seed of the evaluation episode stream, shared across compared models.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            k: 1,
            queries: 1,
            keypoints: KeypointSet::Novel,
            tau: 0.1,
            seed: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub unseen: Vec<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub maa: MaaConfig,
    pub eval: EvalConfig,
    pub transduce: TransductiveConfig,
    pub occlusion: OcclusionSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            seed: 0,
            unseen: vec![data.species - 1],
            data,
            model: ModelConfig {
                encoder: EncoderConfig::default(),
                fskd: FskdConfig::default(),
            },
            train: TrainConfig::default(),
            maa: MaaConfig::default(),
            eval: EvalConfig::default(),
            transduce: TransductiveConfig::default(),
            occlusion: OcclusionSpec::default(),
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn sim_name(s: SimVariant) -> &'static str {
    match s {
        SimVariant::Dot => "dot",
        SimVariant::Harmonic { .. } => "harmonic",
        SimVariant::Arithmetic => "arithmetic",
    }
}

fn kernel_name(k: Kernel) -> &'static str {
    match k {
        Kernel::Softmax => "softmax",
        Kernel::Rbf => "rbf",
    }
}

impl RunConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let e = &self.model.encoder;
        let a = &e.attention;
        let m = &e.morph;
        let f = &self.model.fskd;
        let t = &self.train;
        let x = &self.maa;
        let v = &self.eval;
        let r = &self.transduce;
        let o = &self.occlusion;
        let harmonic_eps = match a.sim {
            SimVariant::Harmonic { eps } => eps,
            _ => HARMONIC_EPS,
        };
        vec![
            ("seed", self.seed.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.species", d.species.to_string()),
            ("data.images_per_species", d.images_per_species.to_string()),
            ("data.diffusion_scale", d.diffusion_scale.to_string()),
            ("data.blur_sigma", d.blur_sigma.to_string()),
            ("data.clutter_min", d.clutter.0.to_string()),
            ("data.clutter_max", d.clutter.1.to_string()),
            ("data.unseen", list(&self.unseen)),
            ("encoder.image", e.image.to_string()),
            ("encoder.patch", e.patch.to_string()),
            ("encoder.backbone", list(&e.backbone)),
            ("encoder.d_raw", e.d_raw.to_string()),
            ("encoder.d_vit", e.d_vit.to_string()),
            ("encoder.blocks", e.blocks.to_string()),
            ("encoder.ffn_hidden", e.ffn_hidden.to_string()),
            ("encoder.ablation", e.ablation.name().to_string()),
            ("encoder.ln_raw", e.ln_raw.to_string()),
            ("attention.kernel", kernel_name(a.kernel).to_string()),
            ("attention.heads", a.heads.to_string()),
            ("attention.head_dim", a.head_dim.to_string()),
            ("attention.beta", a.beta.to_string()),
            ("attention.j", a.j.to_string()),
            ("attention.use_pe", a.use_pe.to_string()),
            ("attention.sim", sim_name(a.sim).to_string()),
            ("attention.harmonic_eps", harmonic_eps.to_string()),
            ("attention.rbf_normalize", a.rbf_normalize.to_string()),
            ("attention.qk_norm", a.qk_norm.to_string()),
            ("morph.rho1", m.rho1.to_string()),
            ("morph.rho2", m.rho2.to_string()),
            ("morph.rho3", m.rho3.to_string()),
            ("morph.d_e", m.d_e.to_string()),
            ("morph.hidden", m.hidden.to_string()),
            ("fskd.scales", list(&f.scales)),
            ("fskd.dv", f.dv.to_string()),
            ("fskd.pool_sigma", f.pool_sigma.to_string()),
            ("fskd.omega_eps", f.omega_eps.to_string()),
            ("fskd.desc_dim", f.desc_dim.to_string()),
            ("fskd.desc_convs", f.desc_convs.to_string()),
            ("train.episodes", t.episodes.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.k", t.k.to_string()),
            ("train.queries", t.queries.to_string()),
            ("train.aux", t.aux.to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("train.lambda_ms", t.weights.ms.to_string()),
            ("train.lambda_reg", t.weights.reg.to_string()),
            ("train.lambda_aln", t.weights.aln.to_string()),
            ("maa.mask_rgb", x.strategy.mask_rgb.to_string()),
            ("maa.mask_sal", x.strategy.mask_sal.to_string()),
            ("maa.mask_feat", x.strategy.mask_feat.to_string()),
            ("maa.min_patches", x.strategy.min_patches.to_string()),
            ("maa.max_patches", x.strategy.max_patches.to_string()),
            ("maa.align", x.align.name().to_string()),
            ("maa.detach_clean", x.detach_clean.to_string()),
            ("eval.episodes", v.episodes.to_string()),
            ("eval.k", v.k.to_string()),
            ("eval.queries", v.queries.to_string()),
            ("eval.keypoints", v.keypoints.name().to_string()),
            ("eval.tau", v.tau.to_string()),
            ("eval.seed", v.seed.to_string()),
            ("transduce.w", r.w.to_string()),
            ("transduce.eta", r.eta.to_string()),
            ("transduce.kappa", r.kappa.to_string()),
            ("transduce.sigma", r.sigma.to_string()),
            ("transduce.z", r.z.to_string()),
            ("transduce.normalize", r.normalize.to_string()),
            ("occlusion.kind", o.kind.name().to_string()),
            ("occlusion.area_min", o.area.0.to_string()),
            ("occlusion.area_max", o.area.1.to_string()),
            ("occlusion.aspect_min", o.aspect.0.to_string()),
            ("occlusion.aspect_max", o.aspect.1.to_string()),
            ("occlusion.p", o.p.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.model.encoder;
        let f = &mut self.model.fskd;
        let bad = |what: &str| Error::Config(format!("{key}: unknown {what} '{v}'"));
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.species" => self.data.species = parse(key, v)?,
            "data.images_per_species" => self.data.images_per_species = parse(key, v)?,
            "data.diffusion_scale" => self.data.diffusion_scale = parse(key, v)?,
            "data.blur_sigma" => self.data.blur_sigma = parse(key, v)?,
            "data.clutter_min" => self.data.clutter.0 = parse(key, v)?,
            "data.clutter_max" => self.data.clutter.1 = parse(key, v)?,
            "data.unseen" => self.unseen = parse_list(key, v)?,
            "encoder.image" => e.image = parse(key, v)?,
            "encoder.patch" => e.patch = parse(key, v)?,
            "encoder.backbone" => {
                let b: Vec<usize> = parse_list(key, v)?;
                e.backbone = b.try_into().map_err(|_| Error::Config(format!("{key}: expected two widths")))?;
            }
            "encoder.d_raw" => e.d_raw = parse(key, v)?,
            "encoder.d_vit" => e.d_vit = parse(key, v)?,
            "encoder.blocks" => e.blocks = parse(key, v)?,
            "encoder.ffn_hidden" => e.ffn_hidden = parse(key, v)?,
            "encoder.ablation" => e.ablation = Ablation::parse(v).ok_or_else(|| bad("ablation"))?,
            "encoder.ln_raw" => e.ln_raw = parse(key, v)?,
            "attention.kernel" => {
                e.attention.kernel = match v {
                    "softmax" => Kernel::Softmax,
                    "rbf" => Kernel::Rbf,
                    _ => return Err(bad("kernel")),
                }
            }
            "attention.heads" => e.attention.heads = parse(key, v)?,
            "attention.head_dim" => e.attention.head_dim = parse(key, v)?,
            "attention.beta" => e.attention.beta = parse(key, v)?,
            "attention.j" => e.attention.j = parse(key, v)?,
            "attention.use_pe" => e.attention.use_pe = parse(key, v)?,
            "attention.sim" => {
                let eps = match e.attention.sim {
                    SimVariant::Harmonic { eps } => eps,
                    _ => HARMONIC_EPS,
                };
                e.attention.sim = match v {
                    "dot" => SimVariant::Dot,
                    "harmonic" => SimVariant::Harmonic { eps },
                    "arithmetic" => SimVariant::Arithmetic,
                    _ => return Err(bad("similarity")),
                }
            }
            "attention.harmonic_eps" => {
                let eps = parse(key, v)?;
                if let SimVariant::Harmonic { eps: cur } = &mut e.attention.sim {
                    *cur = eps;
                }
            }
            "attention.rbf_normalize" => e.attention.rbf_normalize = parse(key, v)?,
            "attention.qk_norm" => e.attention.qk_norm = parse(key, v)?,
            "morph.rho1" => e.morph.rho1 = parse(key, v)?,
            "morph.rho2" => e.morph.rho2 = parse(key, v)?,
            "morph.rho3" => e.morph.rho3 = parse(key, v)?,
            "morph.d_e" => e.morph.d_e = parse(key, v)?,
            "morph.hidden" => e.morph.hidden = parse(key, v)?,
            "fskd.scales" => f.scales = parse_list(key, v)?,
            "fskd.dv" => f.dv = parse(key, v)?,
            "fskd.pool_sigma" => f.pool_sigma = parse(key, v)?,
            "fskd.omega_eps" => f.omega_eps = parse(key, v)?,
            "fskd.desc_dim" => f.desc_dim = parse(key, v)?,
            "fskd.desc_convs" => f.desc_convs = parse(key, v)?,
            "train.episodes" => self.train.episodes = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.k" => self.train.k = parse(key, v)?,
            "train.queries" => self.train.queries = parse(key, v)?,
            "train.aux" => self.train.aux = parse(key, v)?,
            "train.log_every" => self.train.log_every = parse(key, v)?,
            "train.lambda_ms" => self.train.weights.ms = parse(key, v)?,
            "train.lambda_reg" => self.train.weights.reg = parse(key, v)?,
            "train.lambda_aln" => self.train.weights.aln = parse(key, v)?,
            "maa.mask_rgb" => self.maa.strategy.mask_rgb = parse(key, v)?,
            "maa.mask_sal" => self.maa.strategy.mask_sal = parse(key, v)?,
            "maa.mask_feat" => self.maa.strategy.mask_feat = parse(key, v)?,
            "maa.min_patches" => self.maa.strategy.min_patches = parse(key, v)?,
            "maa.max_patches" => self.maa.strategy.max_patches = parse(key, v)?,
            "maa.align" => self.maa.align = AlignMode::parse(v).ok_or_else(|| bad("alignment mode"))?,
            "maa.detach_clean" => self.maa.detach_clean = parse(key, v)?,
            "eval.episodes" => self.eval.episodes = parse(key, v)?,
            "eval.k" => self.eval.k = parse(key, v)?,
            "eval.queries" => self.eval.queries = parse(key, v)?,
            "eval.keypoints" => self.eval.keypoints = KeypointSet::parse(v).ok_or_else(|| bad("keypoint set"))?,
            "eval.tau" => self.eval.tau = parse(key, v)?,
            "eval.seed" => self.eval.seed = parse(key, v)?,
            "transduce.w" => self.transduce.w = parse(key, v)?,
            "transduce.eta" => self.transduce.eta = parse(key, v)?,
            "transduce.kappa" => self.transduce.kappa = parse(key, v)?,
            "transduce.sigma" => self.transduce.sigma = parse(key, v)?,
            "transduce.z" => self.transduce.z = parse(key, v)?,
            "transduce.normalize" => self.transduce.normalize = parse(key, v)?,
            "occlusion.kind" => self.occlusion.kind = OcclusionKind::parse(v).ok_or_else(|| bad("occlusion kind"))?,
            "occlusion.area_min" => self.occlusion.area.0 = parse(key, v)?,
            "occlusion.area_max" => self.occlusion.area.1 = parse(key, v)?,
            "occlusion.aspect_min" => self.occlusion.aspect.0 = parse(key, v)?,
            "occlusion.aspect_max" => self.occlusion.aspect.1 = parse(key, v)?,
            "occlusion.p" => self.occlusion.p = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults. `#` starts a
    /// comment; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short run identifier derived from the hash.
    pub fn run_id(&self) -> String {
        self.hash()[..12].to_string()
    }

    /// The dataset settings with the encoder's image side.
    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            image: self.model.encoder.image,
            ..self.data.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.transduce.validate()?;
        self.occlusion.validate()?;
        let s = &self.maa.strategy;
        if s.min_patches > s.max_patches {
            return Err(Error::Config(format!("maa patch range {}..{} is empty", s.min_patches, s.max_patches)));
        }
        if self.maa.align != AlignMode::None && !s.any() {
            return Err(Error::Config("an alignment loss needs at least one masking flag".into()));
        }
        if self.unseen.iter().any(|&u| u >= self.data.species) || self.unseen.len() >= self.data.species {
            return Err(Error::Config(format!("unseen species {:?} invalid for {} species", self.unseen, self.data.species)));
        }
        if self.train.k == 0 || self.train.queries == 0 || self.eval.k == 0 || self.eval.queries == 0 {
            return Err(Error::Config("episodes need at least one support and one query".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.train.lr)));
        }
        Ok(())
    }
}
