//! Evaluation on unseen-species episodes: inductive PCK, transductive
//! refinement comparison, test-time occlusion and saliency-failure sweeps.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::data::Dataset;
use super::metrics::{self, pck, pck_score};
use super::sample::{sample_episode, EpisodeSpec, KeypointSet, SpeciesSplit};
use super::train::{prepare_episode, Prepared};
use crate::encoder::EncoderInput;
use crate::error::Result;
use crate::fskd::{self, Keypoint, Model};
use crate::robust::{self, OcclusionSpec};
use crate::saliency::{self, FailureMode};
use crate::transduce::{self, Method, TransductiveConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub episodes: usize,
    pub k: usize,
    pub queries: usize,
    pub keypoints: KeypointSet,
    pub tau: f64,
    pub seed: u64,
    /// Test-time occlusion of the query images.
    pub occlusion: Option<OcclusionSpec>,
    /// Saliency failure applied to every image of the episode.
    pub failure: Option<(FailureMode, f64)>,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            episodes: cfg.eval.episodes,
            k: cfg.eval.k,
            queries: cfg.eval.queries,
            keypoints: cfg.eval.keypoints,
            tau: cfg.eval.tau,
            seed: cfg.eval.seed,
            occlusion: None,
            failure: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub episode: usize,
    pub query: usize,
    pub keypoint: usize,
    pub x: [f64; 2],
    pub sigma: [f64; 4],
    pub score: f64,
    pub correct: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalResult {
    pub pck: f64,
    pub ne: f64,
    pub evaluated: usize,
    /// Per keypoint id: (correct, total).
    pub per_type: BTreeMap<usize, (usize, usize)>,
    pub rows: Vec<PredictionRow>,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "episode,query,keypoint,x,y,s_xx,s_xy,s_yx,s_yy,score,correct")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.episode, r.query, r.keypoint, r.x[0], r.x[1], r.sigma[0], r.sigma[1], r.sigma[2], r.sigma[3], r.score, r.correct as u8
        )?;
    }
    f.flush()?;
    Ok(())
}

fn apply_failure(p: &mut Prepared, failure: Option<(FailureMode, f64)>) -> Result<()> {
    if let Some((mode, t)) = failure {
        p.sal = saliency::simulate_failure(&p.sal, mode, t)?;
    }
    Ok(())
}

fn inputs(ps: &[Prepared]) -> Vec<EncoderInput<'_>> {
    ps.iter().map(Prepared::input).collect()
}

fn kps(ps: &[Prepared]) -> Vec<Vec<Keypoint>> {
    ps.iter().map(|p| p.keypoints.clone()).collect()
}

/// Samples the evaluation episodes of `opts` and prepares their images with
/// occlusion and saliency failures applied. Every model evaluated with the
/// same options sees the same episodes and occluders.
fn episodes<'a>(
    data: &'a Dataset,
    split: &SpeciesSplit,
    opts: &EvalOptions,
) -> impl Iterator<Item = Result<(super::sample::Episode, Vec<Prepared>, Vec<Prepared>)>> + 'a {
    let spec = EpisodeSpec::test(opts.k, opts.queries, opts.keypoints);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let split = split.clone();
    let opts = opts.clone();
    (0..opts.episodes).map(move |e| {
        let ep = sample_episode(data, &split, &spec, &mut rng)?;
        let (mut s, mut q) = prepare_episode(data, &ep)?;
        if let Some(occ) = &opts.occlusion {
            let mut orng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6f63_636c ^ (e as u64).wrapping_mul(0x9e37_79b9));
            for p in q.iter_mut() {
                let (rgb, sal) = robust::occlude_query(&p.rgb, &p.sal, &p.keypoints, p.bbox, occ, &mut orng)?;
                p.rgb = rgb;
                p.sal = sal;
            }
        }
        for p in s.iter_mut().chain(q.iter_mut()) {
            apply_failure(p, opts.failure)?;
        }
        Ok((ep, s, q))
    })
}

/// Inductive evaluation: PCK over every visible query keypoint.
pub fn evaluate(model: &Model, data: &Dataset, split: &SpeciesSplit, opts: &EvalOptions) -> Result<EvalResult> {
    let mut out = EvalResult::default();
    let mut ne_sum = 0.0;
    let mut flags = Vec::new();
    for (e, item) in episodes(data, split, opts).enumerate() {
        let (ep, s, q) = item?;
        let (types, dets) = fskd::detect_episode(model, &inputs(&s), &kps(&s), &inputs(&q))?;
        for (qi, query) in q.iter().enumerate() {
            for (ti, &t) in types.iter().enumerate() {
                let gt = query.keypoints[t];
                if !gt.visible {
                    continue;
                }
                let d = dets[qi * types.len() + ti];
                let ok = pck(d.prediction.x, gt.x, query.box_size(), opts.tau);
                flags.push(ok);
                ne_sum += metrics::ne(d.prediction.x, gt.x, (model.l0(), model.l0()));
                let id = ep.types[t];
                let entry = out.per_type.entry(id).or_insert((0, 0));
                entry.0 += ok as usize;
                entry.1 += 1;
                out.rows.push(PredictionRow {
                    episode: e,
                    query: qi,
                    keypoint: id,
                    x: d.prediction.x,
                    sigma: d.prediction.sigma,
                    score: d.score,
                    correct: ok,
                });
            }
        }
    }
    out.evaluated = flags.len();
    out.pck = pck_score(&flags);
    out.ne = if flags.is_empty() { 0.0 } else { ne_sum / flags.len() as f64 };
    Ok(out)
}

/// PCK of each refinement method over transductive episodes with
/// `cfg.z` unlabelled queries each.
pub fn evaluate_transductive(
    model: &Model,
    data: &Dataset,
    split: &SpeciesSplit,
    opts: &EvalOptions,
    cfg: &TransductiveConfig,
) -> Result<Vec<(Method, f64)>> {
    cfg.validate()?;
    let opts = EvalOptions { queries: cfg.z, ..opts.clone() };
    let mut flags: BTreeMap<&'static str, Vec<bool>> = BTreeMap::new();
    for item in episodes(data, split, &opts) {
        let (_, s, q) = item?;
        let correct = |query: usize, t: usize, x: [f64; 2]| {
            let gt = q[query].keypoints[t];
            gt.visible && pck(x, gt.x, q[query].box_size(), opts.tau)
        };
        let res = transduce::run_episode(model, &inputs(&s), &kps(&s), &inputs(&q), cfg, Some(&correct))?;
        for (method, dets) in &res.detections {
            let list = flags.entry(method.name()).or_default();
            for (qi, query) in q.iter().enumerate() {
                for (ti, &t) in res.types.iter().enumerate() {
                    let gt = query.keypoints[t];
                    if gt.visible {
                        list.push(pck(dets[qi * res.types.len() + ti].prediction.x, gt.x, query.box_size(), opts.tau));
                    }
                }
            }
        }
    }
    Ok(Method::ALL
        .iter()
        .filter_map(|m| flags.get(m.name()).map(|f| (*m, pck_score(f))))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FailureRow {
    pub mode: FailureMode,
    pub threshold: f64,
    /// Mean IoU of the degraded saliency against the ground truth, over
    /// the evaluated query images.
    pub mean_iou: f64,
    pub pck: f64,
}

/// PCK under thresholded saliency for each of `thresholds` (ascending) and
/// under reversed saliency.
pub fn failure_sweep(model: &Model, data: &Dataset, split: &SpeciesSplit, opts: &EvalOptions, thresholds: &[f64]) -> Result<Vec<FailureRow>> {
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    let runs = sorted
        .iter()
        .map(|&t| (FailureMode::Threshold, t))
        .chain(std::iter::once((FailureMode::Reverse, 0.0)));
    for (mode, t) in runs {
        let o = EvalOptions { failure: Some((mode, t)), ..opts.clone() };
        let r = evaluate(model, data, split, &o)?;
        let mut ious = Vec::new();
        let spec = EpisodeSpec::test(opts.k, opts.queries, opts.keypoints);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.episodes {
            let ep = sample_episode(data, split, &spec, &mut rng)?;
            for &i in &ep.queries {
                let s = data.render(i);
                let degraded = saliency::simulate_failure(&s.input_saliency(&data.cfg)?, mode, t)?;
                ious.push(saliency::mean_iou(&degraded.threshold(0.5), &s.raw_saliency().threshold(0.5))?);
            }
        }
        rows.push(FailureRow {
            mode,
            threshold: t,
            mean_iou: ious.iter().sum::<f64>() / ious.len().max(1) as f64,
            pck: r.pck,
        });
    }
    Ok(rows)
}

/// PCK at each test-time occlusion probability in `levels`.
pub fn occlusion_sweep(
    model: &Model,
    data: &Dataset,
    split: &SpeciesSplit,
    opts: &EvalOptions,
    spec: &OcclusionSpec,
    levels: &[f64],
) -> Result<Vec<(f64, f64)>> {
    levels
        .iter()
        .map(|&p| {
            let occ = OcclusionSpec { p, ..spec.clone() };
            occ.validate()?;
            let o = EvalOptions { occlusion: Some(occ), ..opts.clone() };
            Ok((p, evaluate(model, data, split, &o)?.pck))
        })
        .collect()
}

pub fn write_failure_csv(path: &Path, rows: &[FailureRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "mode,threshold,mean_iou,pck")?;
    for r in rows {
        let mode = match r.mode {
            FailureMode::Threshold => "threshold",
            FailureMode::Reverse => "reverse",
        };
        writeln!(f, "{mode},{},{},{}", r.threshold, r.mean_iou, r.pck)?;
    }
    f.flush()?;
    Ok(())
}
