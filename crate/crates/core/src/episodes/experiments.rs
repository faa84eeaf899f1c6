//! Multi-seed experiment drivers: encoder ablations and MAA comparisons.

use super::config::RunConfig;
use super::data::Dataset;
use super::eval::{evaluate, EvalOptions};
use super::metrics::{mean_std, MetricsLog};
use super::sample::SpeciesSplit;
use super::train::train;
use crate::encoder::Ablation;
use crate::error::Result;
use crate::fskd::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: Vec<u64>,
    /// Novel-keypoint PCK per seed.
    pub pck: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl VariantSummary {
    pub fn new(variant: &str, seeds: Vec<u64>, pck: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&pck);
        Self {
            variant: variant.to_string(),
            seeds,
            pck,
            mean,
            std,
        }
    }
}

/// Trains `cfg` (seed included) and evaluates it on the unseen species.
pub fn train_and_eval(cfg: &RunConfig, data: &Dataset, variant: &str, log: &mut MetricsLog) -> Result<(Model, f64)> {
    let out = train(cfg, data, variant, log)?;
    let split = SpeciesSplit::new(cfg.data.species, cfg.unseen.clone())?;
    let r = evaluate(&out.model, data, &split, &EvalOptions::from_config(cfg))?;
    log.log(variant, cfg.seed, out.steps as u64, "pck", r.pck)?;
    log.log(variant, cfg.seed, out.steps as u64, "ne", r.ne)?;
    log.flush()?;
    Ok((out.model, r.pck))
}

/// Trains and evaluates every encoder variant for every seed. `keep`
/// receives each trained model.
pub fn ablation(
    base: &RunConfig,
    data: &Dataset,
    variants: &[Ablation],
    seeds: &[u64],
    log: &mut MetricsLog,
    mut keep: impl FnMut(Ablation, u64, Model),
) -> Result<Vec<VariantSummary>> {
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut pck = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.encoder.ablation = v;
            let (model, p) = train_and_eval(&cfg, data, v.name(), log)?;
            log::info!("{} seed {seed}: pck {p:.2}", v.name());
            pck.push(p);
            keep(v, seed, model);
        }
        let s = VariantSummary::new(v.name(), seeds.to_vec(), pck);
        log.log(v.name(), 0, 0, "pck_mean", s.mean)?;
        log.log(v.name(), 0, 0, "pck_std", s.std)?;
        out.push(s);
    }
    log.flush()?;
    Ok(out)
}
