//! Episodic training: one episode per optimizer step, optional masked view
//! with an alignment loss, periodic metric logging.

use numcore::optim::Adam;
use numcore::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::data::Dataset;
use super::metrics::MetricsLog;
use super::sample::{keypoints_for, sample_episode, Episode, EpisodeSpec, SpeciesSplit};
use crate::encoder::EncoderInput;
use crate::error::{Error, Result};
use crate::fskd::{self, Keypoint, Model};
use crate::morph;
use crate::robust::{self, AlignMode, MaskedView};
use crate::saliency::SaliencyMap;

/// One image ready for the encoder.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub rgb: Vec<f64>,
    pub sal: SaliencyMap,
    /// Keypoints of the episode's types, in episode order.
    pub keypoints: Vec<Keypoint>,
    pub bbox: [f64; 4],
}

impl Prepared {
    pub fn input(&self) -> EncoderInput<'_> {
        EncoderInput {
            rgb: &self.rgb,
            sal: &self.sal,
            feature_mask: None,
        }
    }

    pub fn box_size(&self) -> (f64, f64) {
        (self.bbox[2] - self.bbox[0], self.bbox[3] - self.bbox[1])
    }
}

pub fn prepare(data: &Dataset, index: usize, types: &[usize]) -> Result<Prepared> {
    let s = data.render(index);
    Ok(Prepared {
        sal: s.input_saliency(&data.cfg)?,
        keypoints: keypoints_for(&s, types),
        bbox: s.bbox,
        rgb: s.rgb,
    })
}

pub fn prepare_episode(data: &Dataset, ep: &Episode) -> Result<(Vec<Prepared>, Vec<Prepared>)> {
    let s = ep.supports.iter().map(|&i| prepare(data, i, &ep.types)).collect::<Result<_>>()?;
    let q = ep.queries.iter().map(|&i| prepare(data, i, &ep.types)).collect::<Result<_>>()?;
    Ok((s, q))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub l_ms: f64,
    pub l_cls: f64,
    pub l_os: f64,
    pub l_reg: f64,
    pub l_aln: Option<f64>,
    pub theta_mean: Option<f64>,
}

fn mean_var<'g>(g: &'g Graph, parts: &[Var<'g>]) -> Result<Var<'g>> {
    if parts.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let rows: Vec<Var<'g>> = parts.iter().map(|v| v.reshape(&[1, 1])).collect::<std::result::Result<_, _>>()?;
    Ok(Var::concat_rows(&rows)?.mean())
}

fn diagnostics(fwd: &fskd::MultiForward<'_>) -> String {
    let thetas: Vec<f64> = fwd.encoded.theta_tilde.iter().map(|t| t.value().item()).collect();
    let masks: Vec<(f64, f64)> = fwd
        .encoded
        .masks
        .iter()
        .map(|m| {
            let v = m.value();
            let d = v.data();
            (d.iter().cloned().fold(f64::INFINITY, f64::min), d.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        })
        .collect();
    let attn: Vec<bool> = fwd.encoded.attention.iter().flatten().map(|a| a.value().is_finite()).collect();
    format!("theta~ {thetas:?}; mask (min, max) {masks:?}; attention finite per head {attn:?}")
}

/// One optimizer step on an episode. `mask_rng` drives training-time
/// masking and is untouched when masking is off.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    supports: &[Prepared],
    queries: &[Prepared],
    cfg: &RunConfig,
    mask_rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<StepStats> {
    let maa = &cfg.maa;
    let patch = model.cfg.encoder.patch;
    let masked: Option<Vec<MaskedView>> = if maa.strategy.any() {
        Some(
            queries
                .iter()
                .map(|q| robust::mask_train(&q.rgb, &q.sal, patch, &maa.strategy, mask_rng))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let support_inputs: Vec<EncoderInput<'_>> = supports.iter().map(Prepared::input).collect();
    let support_kps: Vec<Vec<Keypoint>> = supports.iter().map(|s| s.keypoints.clone()).collect();
    let clean: Vec<EncoderInput<'_>> = queries.iter().map(Prepared::input).collect();
    let occluded: Vec<EncoderInput<'_>> = match &masked {
        Some(views) => views
            .iter()
            .map(|v| EncoderInput {
                rgb: &v.rgb,
                sal: &v.sal,
                feature_mask: v.feature_mask.as_deref(),
            })
            .collect(),
        None => clean.clone(),
    };
    let two_views = masked.is_some() && maa.align.needs_clean_view();
    let views: Vec<&[EncoderInput<'_>]> = if two_views { vec![&occluded, &clean] } else { vec![&occluded] };

    let g = Graph::new();
    let fwd = fskd::forward_views(&g, model, &support_inputs, &support_kps, &views)?;
    let targets: Vec<Option<[f64; 2]>> = queries
        .iter()
        .flat_map(|q| fwd.types.iter().map(move |&t| q.keypoints[t]).map(|k| k.visible.then_some(k.x)))
        .collect();
    let (l0, dv, eps) = (model.l0(), model.cfg.fskd.dv, model.cfg.fskd.omega_eps);
    let per_scale = fskd::losses_var(&fwd.views[0].heads, &targets, l0, dv, eps)?;
    let l_ms = fskd::multiscale_loss(&per_scale)?;
    let l_cls = mean_var(&g, &per_scale.iter().map(|p| p.0).collect::<Vec<_>>())?;
    let l_os = mean_var(&g, &per_scale.iter().map(|p| p.1).collect::<Vec<_>>())?;
    let l_reg = if fwd.encoded.theta_tilde.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let rows: Vec<Var<'_>> = fwd.encoded.theta_tilde.iter().map(|t| t.reshape(&[1, 1])).collect::<std::result::Result<_, _>>()?;
        morph::morph_reg_var(Var::concat_rows(&rows)?, &model.cfg.encoder.morph)
    };

    let l_aln = match (&masked, maa.align) {
        (None, _) | (_, AlignMode::None) => None,
        (Some(_), AlignMode::ProbKl) => Some(robust::prob_kl_var(&fwd.views[1].heads, &fwd.views[0].heads, maa.detach_clean)?),
        (Some(_), AlignMode::FeatL1 | AlignMode::FeatL2) => {
            let mut clean_f = fwd.views[1].query_features;
            if maa.detach_clean {
                clean_f = g.constant((*clean_f.value()).clone());
            }
            Some(robust::feat_dist_var(clean_f, fwd.views[0].query_features, maa.align == AlignMode::FeatL2)?)
        }
        (Some(_), AlignMode::FeatMmd) => Some(robust::feat_mmd_var(
            fwd.views[1].query_features,
            fwd.views[0].query_features,
            model.cfg.encoder.tokens(),
        )?),
        (Some(_), AlignMode::NonOcclLoss) => {
            let clean_scales = fskd::losses_var(&fwd.views[1].heads, &targets, l0, dv, eps)?;
            Some(fskd::multiscale_loss(&clean_scales)?)
        }
        (Some(views), AlignMode::Recon) => {
            let n = model.cfg.encoder.tokens();
            let side = model.cfg.encoder.image;
            let mut rows = Vec::new();
            let mut want = Vec::new();
            for (q, v) in views.iter().enumerate() {
                for &c in &v.patches {
                    rows.push(q * n + c);
                    want.push(robust::patch_pixels(&queries[q].rgb, side, patch, c));
                }
            }
            if rows.is_empty() {
                None
            } else {
                Some(robust::recon_var(fwd.views[0].query_features, &rows, &want, &model.params)?)
            }
        }
    };
    let total = robust::total_loss_var(l_ms, l_reg, l_aln, &cfg.train.weights)?;
    let loss = total.value().item();
    if !loss.is_finite() {
        return Err(Error::NanLoss { step, detail: diagnostics(&fwd) });
    }
    let stats = StepStats {
        loss,
        l_ms: l_ms.value().item(),
        l_cls: l_cls.value().item(),
        l_os: l_os.value().item(),
        l_reg: l_reg.value().item(),
        l_aln: l_aln.map(|a| a.value().item()),
        theta_mean: (!fwd.encoded.theta_tilde.is_empty())
            .then(|| fwd.encoded.theta_tilde.iter().map(|t| t.value().item()).sum::<f64>() / fwd.encoded.theta_tilde.len() as f64),
    };
    let grads = g.backward(total)?.params();
    if !grads.is_finite() {
        return Err(Error::NanLoss { step, detail: format!("non-finite gradients; {}", diagnostics(&fwd)) });
    }
    opt.step(&mut model.params, &grads);
    Ok(stats)
}

/// A freshly initialized model for `cfg`, including the reconstruction head
/// when that alignment is selected.
pub fn init_model(cfg: &RunConfig) -> Result<Model> {
    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    if cfg.maa.align == AlignMode::Recon {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7265_636f_6e00);
        robust::init_recon(&mut model.params, &mut rng, cfg.model.encoder.out_dim(), cfg.model.encoder.patch);
    }
    Ok(model)
}

pub struct TrainOutcome {
    pub model: Model,
    pub last: StepStats,
    pub steps: usize,
}

/// Trains on seen species and base (plus auxiliary) keypoints for
/// `cfg.train.episodes` episodes. Logged values are running means over
/// each logging window.
pub fn train(cfg: &RunConfig, data: &Dataset, variant: &str, log: &mut MetricsLog) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = SpeciesSplit::new(cfg.data.species, cfg.unseen.clone())?;
    let mut model = init_model(cfg)?;
    let mut opt = Adam::new(cfg.train.lr);
    let mut ep_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let spec = EpisodeSpec::train(cfg.train.k, cfg.train.queries, cfg.train.aux);
    let every = cfg.train.log_every.max(1);
    let mut window = Vec::with_capacity(every);
    let mut last = StepStats::default();
    for step in 0..cfg.train.episodes {
        let ep = sample_episode(data, &split, &spec, &mut ep_rng)?;
        let (s, q) = prepare_episode(data, &ep)?;
        last = train_step(&mut model, &mut opt, &s, &q, cfg, &mut mask_rng, step)?;
        window.push(last);
        if window.len() == every || step + 1 == cfg.train.episodes {
            let m = |f: fn(&StepStats) -> f64| window.iter().map(f).sum::<f64>() / window.len() as f64;
            let seed = cfg.seed;
            let at = step as u64 + 1;
            log.log(variant, seed, at, "loss", m(|s| s.loss))?;
            log.log(variant, seed, at, "l_ms", m(|s| s.l_ms))?;
            log.log(variant, seed, at, "l_cls", m(|s| s.l_cls))?;
            log.log(variant, seed, at, "l_os", m(|s| s.l_os))?;
            log.log(variant, seed, at, "l_reg", m(|s| s.l_reg))?;
            if last.l_aln.is_some() {
                log.log(variant, seed, at, "l_aln", m(|s| s.l_aln.unwrap_or(0.0)))?;
            }
            if last.theta_mean.is_some() {
                log.log(variant, seed, at, "theta_tilde", m(|s| s.theta_mean.unwrap_or(0.0)))?;
            }
            log::info!("{variant} seed {seed} step {at}: loss {:.4} l_ms {:.4}", m(|s| s.loss), m(|s| s.l_ms));
            window.clear();
        }
    }
    log.flush()?;
    Ok(TrainOutcome {
        model,
        last,
        steps: cfg.train.episodes,
    })
}
