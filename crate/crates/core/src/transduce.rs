//! Transductive inference: harvest pseudo-labelled keypoints from unlabelled
//! queries, keep the most confident ones per type and fold them into the
//! prototypes before detecting again.

use numcore::{Graph, Tensor};

use crate::encoder::{self, EncoderInput};
use crate::error::{param, Error, Result};
use crate::fskd::{self, Detection, Keypoint, Model, ScaleHeads};

#[derive(Clone, Debug, PartialEq)]
pub struct TransductiveConfig {
    /// Candidates per query and type.
    pub w: usize,
    /// Candidates kept per type.
    pub eta: usize,
    pub kappa: f64,
    pub sigma: f64,
    /// Unlabelled queries per episode.
    pub z: usize,
    /// Length-normalize features before the soft assignment.
    pub normalize: bool,
}

impl Default for TransductiveConfig {
    fn default() -> Self {
        Self {
            w: 2,
            eta: 20,
            kappa: 0.8,
            sigma: 0.05,
            z: 60,
            normalize: true,
        }
    }
}

impl TransductiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return param(format!("kappa = {} outside [0, 1]", self.kappa));
        }
        if !(self.sigma > 0.0) {
            return param(format!("sigma = {} must be positive", self.sigma));
        }
        if self.w == 0 || self.z == 0 {
            return param("W and Z must be at least 1");
        }
        if self.eta > self.z * self.w {
            return param(format!("eta = {} exceeds Z * W = {}", self.eta, self.z * self.w));
        }
        Ok(())
    }
}

/// A pseudo-labelled query keypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub feature: Vec<f64>,
    /// Grid probability at the finest scale.
    pub score: f64,
    pub query: usize,
    /// Index into the episode's kept types.
    pub ty: usize,
    /// 0 for the most probable cell of its query.
    pub rank: usize,
    /// Predicted position in pixels.
    pub x: [f64; 2],
}

/// Indices of the `w` most probable cells, ties to the lowest index.
pub fn top_w_cells(probs: &[f64], w: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(w);
    idx
}

/// Harvests the top-`w` cells of every `(query, type)` row at the finest
/// scale and pools query features at their decoded positions. Returns one
/// candidate list per type.
pub fn harvest(
    heads: &[ScaleHeads<'_>],
    query_features: &Tensor,
    ntypes: usize,
    model: &Model,
    w: usize,
) -> Result<Vec<Vec<Candidate>>> {
    if w == 0 {
        return param("W must be at least 1");
    }
    let cfg = &model.cfg;
    let l = cfg.encoder.grid();
    let n = l * l;
    let finest = cfg.finest_scale();
    let head = heads
        .iter()
        .find(|h| h.s == finest)
        .ok_or_else(|| Error::Contract("no head at the finest scale".into()))?;
    let rows = head.logits.shape()[0];
    let queries = rows / ntypes;
    let cell = model.l0() / finest as f64;
    let d = query_features.cols();
    let mut out = vec![Vec::new(); ntypes];
    for q in 0..queries {
        let feats = Tensor::new(&[n, d], query_features.data()[q * n * d..(q + 1) * n * d].to_vec())?;
        for (t, list) in out.iter_mut().enumerate() {
            let maps = fskd::scale_maps(std::slice::from_ref(head), q * ntypes + t);
            let m = &maps[0];
            for (rank, c) in top_w_cells(&m.probs, w).into_iter().enumerate() {
                let (gx, gy) = ((c % finest) as f64, (c / finest) as f64);
                let x = [
                    cell * (gx + 0.5 + 0.5 * m.offsets[2 * c]),
                    cell * (gy + 0.5 + 0.5 * m.offsets[2 * c + 1]),
                ];
                let feature = fskd::skr(&feats, l, cfg.encoder.patch, &Keypoint::visible(x[0], x[1]), cfg.fskd.pool_sigma)?;
                list.push(Candidate { feature, score: m.probs[c], query: q, ty: t, rank, x });
            }
        }
    }
    Ok(out)
}

/// Indices of the `eta` best candidates by score, ties broken by
/// `(query, rank)`. Asking for more than exist returns all of them.
pub fn select_top_eta(candidates: &[Candidate], eta: usize) -> Vec<usize> {
    if eta > candidates.len() {
        log::warn!("eta = {eta} exceeds the {} available candidates; keeping all", candidates.len());
    }
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ca, cb) = (&candidates[a], &candidates[b]);
        cb.score
            .total_cmp(&ca.score)
            .then((ca.query, ca.rank).cmp(&(cb.query, cb.rank)))
    });
    idx.truncate(eta);
    idx
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

/// Soft assignment `p_n ∝ exp(-||phi - c_n|| / (2 sigma^2))`.
pub fn assign_prob(phi: &[f64], prototypes: &[Vec<f64>], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return param(format!("sigma = {sigma} must be positive"));
    }
    let logits: Vec<f64> = prototypes
        .iter()
        .map(|c| -phi.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / (2.0 * sigma * sigma))
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - top).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Refined prototypes from support representations `skrs[n]` and selected
/// candidate features `selected[n]`, with assignment probabilities taken
/// against the unrefined `prototypes`.
pub fn refine(
    prototypes: &[Vec<f64>],
    skrs: &[Vec<Vec<f64>>],
    selected: &[Vec<Vec<f64>>],
    kappa: f64,
    sigma: f64,
    normalize: bool,
) -> Result<Vec<Vec<f64>>> {
    if !(0.0..=1.0).contains(&kappa) {
        return param(format!("kappa = {kappa} outside [0, 1]"));
    }
    if skrs.len() != prototypes.len() || selected.len() != prototypes.len() {
        return param("prototype, support and candidate sets disagree on the number of types");
    }
    let anchors: Vec<Vec<f64>> = if normalize {
        prototypes.iter().map(|c| normalized(c)).collect()
    } else {
        prototypes.to_vec()
    };
    let mut out = Vec::with_capacity(prototypes.len());
    for (n, shots) in skrs.iter().enumerate() {
        if shots.is_empty() {
            return Err(Error::Contract(format!("type {n} has no support representation")));
        }
        let d = shots[0].len();
        let mut sum_s = vec![0.0; d];
        for phi in shots {
            sum_s.iter_mut().zip(phi).for_each(|(a, b)| *a += b);
        }
        let mut sum_q = vec![0.0; d];
        let mut mass = 0.0;
        for phi in &selected[n] {
            let key = if normalize { normalized(phi) } else { phi.clone() };
            let p = assign_prob(&key, &anchors, sigma)?[n];
            mass += p;
            sum_q.iter_mut().zip(phi).for_each(|(a, b)| *a += p * b);
        }
        let denom = kappa * shots.len() as f64 + (1.0 - kappa) * mass;
        if !(denom > 0.0) {
            out.push(sum_s.iter().map(|s| s / shots.len() as f64).collect());
            continue;
        }
        out.push(
            sum_s
                .iter()
                .zip(&sum_q)
                .map(|(s, q)| (kappa * s + (1.0 - kappa) * q) / denom)
                .collect(),
        );
    }
    Ok(out)
}

/// Unweighted mean of each type's support representations and selected
/// candidates.
pub fn refine_avg_baseline(skrs: &[Vec<Vec<f64>>], selected: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    skrs.iter()
        .zip(selected)
        .enumerate()
        .map(|(n, (s, q))| {
            let all: Vec<Vec<f64>> = s.iter().chain(q).cloned().collect();
            if s.is_empty() {
                return Err(Error::Contract(format!("type {n} has no support representation")));
            }
            Ok(fskd::prototypes(&[all])?.remove(0).1)
        })
        .collect()
}

/// Ground-truth oracle: keeps only candidates whose position `correct`
/// accepts, then selects and refines as usual.
pub fn refine_gt_oracle(
    prototypes: &[Vec<f64>],
    skrs: &[Vec<Vec<f64>>],
    candidates: &[Vec<Candidate>],
    correct: impl Fn(&Candidate) -> bool,
    cfg: &TransductiveConfig,
) -> Result<Vec<Vec<f64>>> {
    let selected: Vec<Vec<Vec<f64>>> = candidates
        .iter()
        .map(|list| {
            let good: Vec<Candidate> = list.iter().filter(|c| correct(c)).cloned().collect();
            let eta = cfg.eta.min(good.len());
            select_top_eta(&good, eta).into_iter().map(|i| good[i].feature.clone()).collect()
        })
        .collect();
    refine(prototypes, skrs, &selected, cfg.kappa, cfg.sigma, cfg.normalize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Inductive,
    Avg,
    Soft,
    GtOracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Inductive, Method::Avg, Method::Soft, Method::GtOracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::Inductive => "inductive",
            Method::Avg => "avg",
            Method::Soft => "soft",
            Method::GtOracle => "gt_oracle",
        }
    }
}

/// Detections of every method on one episode, rows ordered query-major.
pub struct TransductiveResult {
    pub types: Vec<usize>,
    pub detections: Vec<(Method, Vec<Detection>)>,
}

/// Runs inductive detection, harvests candidates, and re-detects with each
/// refined prototype set. `correct(query, type, x)` enables the oracle.
pub fn run_episode(
    model: &Model,
    supports: &[EncoderInput<'_>],
    support_kps: &[Vec<Keypoint>],
    queries: &[EncoderInput<'_>],
    cfg: &TransductiveConfig,
    correct: Option<&dyn Fn(usize, usize, [f64; 2]) -> bool>,
) -> Result<TransductiveResult> {
    let mcfg = &model.cfg;
    let (l, patch) = (mcfg.encoder.grid(), mcfg.encoder.patch);
    let n = l * l;
    let g = Graph::new();
    let mut inputs = supports.to_vec();
    inputs.extend_from_slice(queries);
    let features = encoder::encode_var(&g, &inputs, &model.params, &mcfg.encoder)?.features.value();
    let d = features.cols();
    let block = |i: usize| Tensor::new(&[n, d], features.data()[i * n * d..(i + 1) * n * d].to_vec());

    let ntypes_all = support_kps.first().map_or(0, Vec::len);
    let mut types = Vec::new();
    let mut skrs = Vec::new();
    for t in 0..ntypes_all {
        let mut shots = Vec::new();
        for (k, kps) in support_kps.iter().enumerate() {
            if kps[t].visible {
                shots.push(fskd::skr(&block(k)?, l, patch, &kps[t], mcfg.fskd.pool_sigma)?);
            }
        }
        if !shots.is_empty() {
            types.push(t);
            skrs.push(shots);
        }
    }
    let inductive: Vec<Vec<f64>> = fskd::prototypes(&skrs)?.into_iter().map(|(_, c)| c).collect();

    let ks = supports.len() * n * d;
    let qf = Tensor::new(&[queries.len() * n, d], features.data()[ks..].to_vec())?;
    let detect = |protos: &[Vec<f64>]| -> Result<(Vec<Detection>, Vec<Vec<Candidate>>)> {
        let g = Graph::new();
        let p = g.constant(Tensor::from_rows(protos)?);
        let heads = fskd::detect_var(g.constant(qf.clone()), p, model)?;
        let dets = fskd::detections(&heads, model);
        let cands = harvest(&heads, &qf, protos.len(), model, cfg.w)?;
        Ok((dets, cands))
    };
    let (ind_dets, candidates) = detect(&inductive)?;
    let selected: Vec<Vec<Vec<f64>>> = candidates
        .iter()
        .map(|list| select_top_eta(list, cfg.eta).into_iter().map(|i| list[i].feature.clone()).collect())
        .collect();

    let mut detections = vec![(Method::Inductive, ind_dets)];
    let avg = refine_avg_baseline(&skrs, &selected)?;
    detections.push((Method::Avg, detect(&avg)?.0));
    let soft = refine(&inductive, &skrs, &selected, cfg.kappa, cfg.sigma, cfg.normalize)?;
    detections.push((Method::Soft, detect(&soft)?.0));
    if let Some(ok) = correct {
        let oracle = refine_gt_oracle(&inductive, &skrs, &candidates, |c| ok(c.query, types[c.ty], c.x), cfg)?;
        detections.push((Method::GtOracle, detect(&oracle)?.0));
    }
    Ok(TransductiveResult { types, detections })
}
