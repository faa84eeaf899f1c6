//! Few-shot keypoint detection head: support keypoint representations and
//! prototypes, channelwise modulation of query features, a convolutional
//! descriptor, and multi-scale grid localization with a per-cell precision
//! matrix.
//!
//! Grid cells are indexed `(gx, gy)` and flattened row-major as
//! `gy * S + gx`. Offsets are stored per cell as `(ox, oy)`; latent
//! covariances per cell as a row-major `2 x d_v` block.

use std::rc::Rc;

use numcore::graph::precision_from_latent;
use numcore::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, EncoderConfig, EncoderInput, EncoderOutput};
use crate::error::{dim, param, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    /// `(x, y)` in pixels of the square-padded image.
    pub x: [f64; 2],
    pub visible: bool,
}

impl Keypoint {
    pub fn visible(x: f64, y: f64) -> Self {
        Self { x: [x, y], visible: true }
    }

    pub fn hidden() -> Self {
        Self { x: [0.0, 0.0], visible: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FskdConfig {
    pub scales: Vec<usize>,
    pub dv: usize,
    /// Gaussian pooling bandwidth in grid cells.
    pub pool_sigma: f64,
    /// Stabilizer added to every precision matrix.
    pub omega_eps: f64,
    pub desc_dim: usize,
    /// Number of stride-2 3x3 convolutions in the descriptor.
    pub desc_convs: usize,
}

impl Default for FskdConfig {
    fn default() -> Self {
        Self {
            scales: vec![8, 12, 16],
            dv: 4,
            pool_sigma: 1.0,
            omega_eps: 1e-6,
            desc_dim: 64,
            desc_convs: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fskd: FskdConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let f = &self.fskd;
        if f.scales.is_empty() || f.scales.contains(&0) {
            return param("at least one positive localization scale is required");
        }
        if f.dv < 2 || f.desc_dim == 0 {
            return param(format!("d_v = {} must be >= 2 and the descriptor width positive", f.dv));
        }
        if !(f.omega_eps > 0.0) || !(f.pool_sigma >= 0.0) {
            return param("precision stabilizer must be positive and pooling sigma non-negative");
        }
        Ok(())
    }

    /// Side of the descriptor's final grid.
    pub fn descriptor_side(&self) -> usize {
        let mut s = self.encoder.grid();
        for _ in 0..self.fskd.desc_convs {
            s = (s + 2 - 3) / 2 + 1;
        }
        s
    }

    pub fn descriptor_len(&self) -> usize {
        let s = self.descriptor_side();
        s * s * self.fskd.desc_dim
    }

    /// The finest localization scale (largest `S`).
    pub fn finest_scale(&self) -> usize {
        *self.fskd.scales.iter().max().expect("validated scales")
    }
}

/// Normalized Gaussian pooling weights over an `l x l` grid centered at a
/// pixel position. `sigma = 0` selects the nearest cell.
pub fn skr_weights(l: usize, patch: usize, x: [f64; 2], sigma: f64) -> Vec<f64> {
    let u = [x[0] / patch as f64, x[1] / patch as f64];
    let d2: Vec<f64> = (0..l * l)
        .map(|c| {
            let (cy, cx) = ((c / l) as f64, (c % l) as f64);
            (cx + 0.5 - u[0]).powi(2) + (cy + 0.5 - u[1]).powi(2)
        })
        .collect();
    let best = d2.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = if sigma > 0.0 {
        d2.iter().map(|&d| (-(d - best) / (2.0 * sigma * sigma)).exp()).collect()
    } else {
        let first = d2.iter().position(|&d| d == best).expect("non-empty grid");
        (0..l * l).map(|c| if c == first { 1.0 } else { 0.0 }).collect()
    };
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Support keypoint representation: Gaussian-pooled feature `[d]` from
/// token features `[l * l, d]`.
pub fn skr(features: &Tensor, l: usize, patch: usize, kp: &Keypoint, sigma: f64) -> Result<Vec<f64>> {
    if !kp.visible {
        return Err(Error::Contract("representation requested for an invisible keypoint".into()));
    }
    if features.rows() != l * l {
        return dim(format!("{} feature rows for a {l}x{l} grid", features.rows()));
    }
    let w = skr_weights(l, patch, kp.x, sigma);
    let d = features.cols();
    let mut out = vec![0.0; d];
    for (c, &wc) in w.iter().enumerate() {
        for (o, f) in out.iter_mut().zip(features.row(c)) {
            *o += wc * f;
        }
    }
    Ok(out)
}

/// Mean of the visible shots per type. Types without a shot are dropped;
/// the result pairs each kept type index with its prototype.
pub fn prototypes(shots: &[Vec<Vec<f64>>]) -> Result<Vec<(usize, Vec<f64>)>> {
    let out: Vec<(usize, Vec<f64>)> = shots
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .map(|(n, s)| {
            let mut c = vec![0.0; s[0].len()];
            for phi in s {
                c.iter_mut().zip(phi).for_each(|(a, b)| *a += b);
            }
            c.iter_mut().for_each(|v| *v /= s.len() as f64);
            (n, c)
        })
        .collect();
    if out.is_empty() {
        return Err(Error::Contract("no keypoint type has a visible support shot".into()));
    }
    Ok(out)
}

/// `F_att(p) = E_q(p) * c` at every cell.
pub fn modulate(features: &Tensor, c: &[f64]) -> Result<Tensor> {
    if features.cols() != c.len() {
        return dim(format!("{} feature channels against a {}-dim prototype", features.cols(), c.len()));
    }
    let d = c.len();
    let data = features.data().iter().enumerate().map(|(i, v)| v * c[i % d]).collect();
    Ok(Tensor::new(features.shape(), data)?)
}

fn desc_names(i: usize) -> (String, String) {
    (format!("desc.conv{i}.w"), format!("desc.conv{i}.b"))
}

fn head_names(s: usize, branch: &str) -> (String, String) {
    (format!("head.s{s}.{branch}.w"), format!("head.s{s}.{branch}.b"))
}

/// Latent bias giving `Omega = I` before training: rows `(1, 1, ...)` and
/// `(1, -1, ...)` of a `2 x d_v` block.
fn identity_latent(dv: usize) -> Vec<f64> {
    let mut q = vec![1.0; 2 * dv];
    for c in 0..dv {
        if c % 2 == 1 {
            q[dv + c] = -1.0;
        }
    }
    q
}

pub fn init_head_params(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) {
    let d = cfg.encoder.out_dim();
    let k = cfg.fskd.desc_dim;
    let (w, b) = desc_names(0);
    store.insert(w, ParamStore::he_normal(rng, &[1, 1, d, k], d));
    store.insert(b, Tensor::zeros(&[k]));
    for i in 1..=cfg.fskd.desc_convs {
        let (w, b) = desc_names(i);
        store.insert(w, ParamStore::he_normal(rng, &[3, 3, k, k], 9 * k));
        store.insert(b, Tensor::zeros(&[k]));
    }
    let len = cfg.descriptor_len();
    let dv = cfg.fskd.dv;
    for &s in &cfg.fskd.scales {
        let cells = s * s;
        let (w, b) = head_names(s, "cls");
        store.insert(w, ParamStore::trunc_normal(rng, &[len, cells], 0.02));
        store.insert(b, Tensor::zeros(&[cells]));
        let (w, b) = head_names(s, "off");
        store.insert(w, ParamStore::trunc_normal(rng, &[len, 2 * cells], 0.02));
        store.insert(b, Tensor::zeros(&[2 * cells]));
        let (w, b) = head_names(s, "cov");
        store.insert(w, ParamStore::trunc_normal(rng, &[len, 2 * dv * cells], 0.02));
        let q = identity_latent(dv);
        store.insert(b, Tensor::vector((0..cells).flat_map(|_| q.iter().copied()).collect()));
    }
}

/// Descriptor over `[B, l, l, D]`: a 1x1 projection followed by stride-2
/// 3x3 convolutions, flattened to `[B, len]`.
pub fn descriptor_var<'g>(f_att: Var<'g>, store: &ParamStore, cfg: &ModelConfig) -> Result<Var<'g>> {
    let g = f_att.graph();
    let (w, b) = desc_names(0);
    let mut h = f_att.conv2d(&g.param(store, &w)?, &g.param(store, &b)?, 1, 0)?;
    for i in 1..=cfg.fskd.desc_convs {
        h = h.relu();
        let (w, b) = desc_names(i);
        h = h.conv2d(&g.param(store, &w)?, &g.param(store, &b)?, 2, 1)?;
    }
    let s = h.shape();
    Ok(h.reshape(&[s[0], s[1..].iter().product()])?)
}

pub fn descriptor(f_att: &Tensor, store: &ParamStore, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let l = cfg.encoder.grid();
    let g = Graph::new();
    let x = g.constant(f_att.clone().reshape(&[1, l, l, f_att.cols()])?);
    Ok(descriptor_var(x, store, cfg)?.value().data().to_vec())
}

/// Raw head outputs for one scale, one row per descriptor.
#[derive(Clone, Copy)]
pub struct ScaleHeads<'g> {
    pub s: usize,
    /// `[B, S^2]`
    pub logits: Var<'g>,
    /// `[B, 2 S^2]`, tanh-squashed.
    pub offsets: Var<'g>,
    /// `[B, 2 d_v S^2]`
    pub latent: Var<'g>,
}

pub fn localize_var<'g>(psi: Var<'g>, store: &ParamStore, cfg: &ModelConfig) -> Result<Vec<ScaleHeads<'g>>> {
    let g = psi.graph();
    let head = |s: usize, branch: &str| -> Result<Var<'g>> {
        let (w, b) = head_names(s, branch);
        Ok(psi.linear(&g.param(store, &w)?, Some(&g.param(store, &b)?))?)
    };
    cfg.fskd
        .scales
        .iter()
        .map(|&s| {
            Ok(ScaleHeads {
                s,
                logits: head(s, "cls")?,
                offsets: head(s, "off")?.tanh(),
                latent: head(s, "cov")?,
            })
        })
        .collect()
}

/// Localization maps of one descriptor at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleMap {
    pub s: usize,
    /// `S^2` probabilities.
    pub probs: Vec<f64>,
    /// `S^2 x 2` offsets in `(-1, 1)`.
    pub offsets: Vec<f64>,
    /// `S^2 x 2 d_v` latent covariances.
    pub latent: Vec<f64>,
}

pub type LocalizationOutput = Vec<ScaleMap>;

impl ScaleMap {
    /// Precision at a cell, stabilized by `eps I`.
    pub fn omega(&self, cell: usize, dv: usize, eps: f64) -> [f64; 4] {
        precision_from_latent(&self.latent[cell * 2 * dv..(cell + 1) * 2 * dv], dv, eps)
    }

    /// First cell of maximal probability.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Reads row `row` of evaluated heads into plain maps.
pub fn scale_maps(heads: &[ScaleHeads<'_>], row: usize) -> LocalizationOutput {
    heads
        .iter()
        .map(|h| {
            let logits = h.logits.value();
            let mut probs = vec![0.0; h.s * h.s];
            numcore::func::softmax_rows(&Tensor::new(&[1, h.s * h.s], logits.row(row).to_vec()).expect("row"))
                .data()
                .iter()
                .zip(probs.iter_mut())
                .for_each(|(a, b)| *b = *a);
            ScaleMap {
                s: h.s,
                probs,
                offsets: h.offsets.value().row(row).to_vec(),
                latent: h.latent.value().row(row).to_vec(),
            }
        })
        .collect()
}

pub fn localize(psi: &[f64], store: &ParamStore, cfg: &ModelConfig) -> Result<LocalizationOutput> {
    let g = Graph::new();
    let x = g.constant(Tensor::new(&[1, psi.len()], psi.to_vec())?);
    Ok(scale_maps(&localize_var(x, store, cfg)?, 0))
}

/// Ground-truth cell `(gx, gy)` and offset for position `x` at scale `s`.
pub fn encode_target(x: [f64; 2], s: usize, l0: f64) -> ([usize; 2], [f64; 2]) {
    let mut g = [0usize; 2];
    let mut o = [0.0; 2];
    for a in 0..2 {
        let u = x[a] * s as f64 / l0;
        let cell = (u.floor().max(0.0) as usize).min(s - 1);
        g[a] = cell;
        o[a] = 2.0 * (u - cell as f64 - 0.5);
    }
    (g, o)
}

/// One scale's vote: cell, offset and precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleVote {
    pub s: usize,
    pub g: [usize; 2],
    pub o: [f64; 2],
    pub omega: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointPrediction {
    pub x: [f64; 2],
    /// Row-major 2x2 covariance.
    pub sigma: [f64; 4],
}

fn invert2(m: [f64; 4]) -> Option<[f64; 4]> {
    let det = m[0] * m[3] - m[1] * m[2];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    Some([m[3] / det, -m[1] / det, -m[2] / det, m[0] / det])
}

/// Averages per-scale positions and rescaled covariances. Scales with a
/// degenerate precision are left out of the covariance; if all are
/// degenerate the covariance is `l0^2 I`.
pub fn decode_votes(votes: &[ScaleVote], l0: f64) -> KeypointPrediction {
    let ns = votes.len() as f64;
    let mut x = [0.0; 2];
    let mut sigma = [0.0; 4];
    let mut usable = 0;
    for v in votes {
        let cell = l0 / v.s as f64;
        for a in 0..2 {
            x[a] += cell * (v.g[a] as f64 + 0.5 + 0.5 * v.o[a]) / ns;
        }
        if let Some(cov) = invert2(v.omega) {
            usable += 1;
            for (s, c) in sigma.iter_mut().zip(cov) {
                *s += cell * cell * c / (4.0 * ns);
            }
        }
    }
    if usable == 0 {
        sigma = [l0 * l0, 0.0, 0.0, l0 * l0];
    }
    KeypointPrediction { x, sigma }
}

/// Argmax cell per scale, its offset and stabilized precision.
pub fn decode(out: &LocalizationOutput, l0: f64, dv: usize, eps: f64) -> KeypointPrediction {
    let votes: Vec<ScaleVote> = out
        .iter()
        .map(|m| {
            let cell = m.argmax();
            ScaleVote {
                s: m.s,
                g: [cell % m.s, cell / m.s],
                o: [m.offsets[2 * cell], m.offsets[2 * cell + 1]],
                omega: m.omega(cell, dv, eps),
            }
        })
        .collect();
    decode_votes(&votes, l0)
}

/// Per-row targets in flat-index form for one scale.
struct ScaleTargets {
    cls: Vec<usize>,
    off: Vec<usize>,
    lat: Vec<usize>,
    o_hat: Vec<f64>,
}

fn scale_targets(rows: &[(usize, [f64; 2])], s: usize, dv: usize, l0: f64) -> ScaleTargets {
    let cells = s * s;
    let mut t = ScaleTargets { cls: vec![], off: vec![], lat: vec![], o_hat: vec![] };
    for &(r, x) in rows {
        let (g, o) = encode_target(x, s, l0);
        let cell = g[1] * s + g[0];
        t.cls.push(r * cells + cell);
        t.off.extend([r * 2 * cells + 2 * cell, r * 2 * cells + 2 * cell + 1]);
        t.lat.extend((0..2 * dv).map(|c| r * 2 * dv * cells + 2 * dv * cell + c));
        t.o_hat.extend(o);
    }
    t
}

/// Localization losses over the rows with a target, for every scale:
/// `(L_cls, L_os)` per scale. `targets[r]` is the ground truth of row `r`.
pub fn losses_var<'g>(
    heads: &[ScaleHeads<'g>],
    targets: &[Option<[f64; 2]>],
    l0: f64,
    dv: usize,
    eps: f64,
) -> Result<Vec<(Var<'g>, Var<'g>)>> {
    let rows: Vec<(usize, [f64; 2])> = targets.iter().enumerate().filter_map(|(r, t)| t.map(|x| (r, x))).collect();
    if rows.is_empty() {
        return Err(Error::Contract("localization loss without a visible target".into()));
    }
    let m = rows.len();
    heads
        .iter()
        .map(|h| {
            let g = h.logits.graph();
            let t = scale_targets(&rows, h.s, dv, l0);
            let lcls = h
                .logits
                .log_softmax_rows()
                .gather(Rc::new(t.cls), &[m])?
                .mean()
                .neg();
            let o = h.offsets.gather(Rc::new(t.off), &[m, 2])?;
            let diff = o.sub(&g.constant(Tensor::new(&[m, 2], t.o_hat)?))?;
            let q = h.latent.gather(Rc::new(t.lat), &[m, 2 * dv])?;
            let los = q.gauss_nll(&diff, dv, eps)?.mean();
            Ok((lcls, los))
        })
        .collect()
}

/// `L_ms`: mean over scales of `L_cls + L_os`.
pub fn multiscale_loss<'g>(per_scale: &[(Var<'g>, Var<'g>)]) -> Result<Var<'g>> {
    let terms: Vec<Var<'g>> = per_scale.iter().map(|(a, b)| a.add(b)).collect::<std::result::Result<_, _>>()?;
    let stacked = Var::concat_rows(
        &terms.iter().map(|t| t.reshape(&[1, 1])).collect::<std::result::Result<Vec<_>, _>>()?,
    )?;
    Ok(stacked.mean())
}

/// `(L_cls, L_os)` of a single plain output against `x_hat`.
pub fn losses(out: &LocalizationOutput, x_hat: [f64; 2], l0: f64, dv: usize, eps: f64) -> Result<Vec<(f64, f64)>> {
    out.iter()
        .map(|m| {
            let (g, o_hat) = encode_target(x_hat, m.s, l0);
            let cell = g[1] * m.s + g[0];
            let lcls = -m.probs[cell].ln();
            let om = m.omega(cell, dv, eps);
            let det = om[0] * om[3] - om[1] * om[2];
            if !(det > 0.0) {
                return Err(Error::Contract(format!("singular precision at scale {}", m.s)));
            }
            let d = [m.offsets[2 * cell] - o_hat[0], m.offsets[2 * cell + 1] - o_hat[1]];
            let maha = d[0] * (om[0] * d[0] + om[1] * d[1]) + d[1] * (om[2] * d[0] + om[3] * d[1]);
            Ok((lcls, 0.5 * (maha - det.ln())))
        })
        .collect()
}

/// Parameters and architecture of the whole detector.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init_params(&mut params, &mut rng, &cfg.encoder)?;
        init_head_params(&mut params, &mut rng, &cfg);
        Ok(Self { cfg, params })
    }

    pub fn l0(&self) -> f64 {
        self.cfg.encoder.image as f64
    }
}

/// Everything recorded by one episode's forward pass.
pub struct EpisodeForward<'g> {
    pub encoded: EncoderOutput<'g>,
    /// Episode type indices that had at least one visible support shot.
    pub types: Vec<usize>,
    /// `[N, D]`
    pub prototypes: Var<'g>,
    /// `[Q * n, D]`
    pub query_features: Var<'g>,
    /// Rows ordered query-major: `q * N + t`.
    pub heads: Vec<ScaleHeads<'g>>,
}

impl EpisodeForward<'_> {
    pub fn row(&self, query: usize, t: usize) -> usize {
        query * self.types.len() + t
    }
}

/// Prototype pooling matrix `[N, K * n]` for support keypoints
/// `support_kps[k][type]`.
fn pooling_matrix(cfg: &ModelConfig, support_kps: &[Vec<Keypoint>]) -> Result<(Vec<usize>, Tensor)> {
    let l = cfg.encoder.grid();
    let n = l * l;
    let k = support_kps.len();
    let ntypes = support_kps.first().map_or(0, Vec::len);
    if support_kps.iter().any(|s| s.len() != ntypes) {
        return dim("support images disagree on the number of keypoint types");
    }
    let kept: Vec<usize> = (0..ntypes)
        .filter(|&t| support_kps.iter().any(|s| s[t].visible))
        .collect();
    if kept.is_empty() {
        return Err(Error::Contract("no keypoint type has a visible support shot".into()));
    }
    let mut a = vec![0.0; kept.len() * k * n];
    for (row, &t) in kept.iter().enumerate() {
        let shots: Vec<usize> = (0..k).filter(|&s| support_kps[s][t].visible).collect();
        for &s in &shots {
            let w = skr_weights(l, cfg.encoder.patch, support_kps[s][t].x, cfg.fskd.pool_sigma);
            for (c, wc) in w.iter().enumerate() {
                a[row * k * n + s * n + c] += wc / shots.len() as f64;
            }
        }
    }
    let pool = Tensor::new(&[kept.len(), k * n], a)?;
    Ok((kept, pool))
}

/// Modulates each query's features by every prototype and runs the
/// descriptor and localization heads.
pub fn detect_var<'g>(query_features: Var<'g>, prototypes: Var<'g>, model: &Model) -> Result<Vec<ScaleHeads<'g>>> {
    let cfg = &model.cfg;
    let l = cfg.encoder.grid();
    let n = l * l;
    let d = query_features.cols();
    let queries = query_features.shape()[0] / n;
    let ntypes = prototypes.shape()[0];
    let mut parts = Vec::with_capacity(queries);
    for q in 0..queries {
        let e = query_features.slice_rows(q * n, (q + 1) * n)?;
        parts.push(e.modulate(&prototypes)?.reshape(&[ntypes * n, d])?);
    }
    let f_att = Var::concat_rows(&parts)?.reshape(&[queries * ntypes, l, l, d])?;
    let psi = descriptor_var(f_att, &model.params, cfg)?;
    localize_var(psi, &model.params, cfg)
}

/// Query features and heads of one view of the query set.
pub struct ViewForward<'g> {
    /// `[Q * n, D]`
    pub query_features: Var<'g>,
    /// Rows ordered query-major: `q * N + t`.
    pub heads: Vec<ScaleHeads<'g>>,
}

/// Forward pass over supports and several views of the queries (for
/// example clean and masked), sharing one encoder batch and one prototype
/// set.
pub struct MultiForward<'g> {
    pub encoded: EncoderOutput<'g>,
    pub types: Vec<usize>,
    pub prototypes: Var<'g>,
    pub views: Vec<ViewForward<'g>>,
}

pub fn forward_views<'g>(
    g: &'g Graph,
    model: &Model,
    supports: &[EncoderInput<'_>],
    support_kps: &[Vec<Keypoint>],
    views: &[&[EncoderInput<'_>]],
) -> Result<MultiForward<'g>> {
    if supports.len() != support_kps.len() || supports.is_empty() || views.is_empty() || views.iter().any(|v| v.is_empty()) {
        return dim(format!(
            "{} supports with {} keypoint sets and query views of sizes {:?}",
            supports.len(),
            support_kps.len(),
            views.iter().map(|v| v.len()).collect::<Vec<_>>()
        ));
    }
    let n = model.cfg.encoder.tokens();
    let (types, pool) = pooling_matrix(&model.cfg, support_kps)?;
    let mut inputs = supports.to_vec();
    for v in views {
        inputs.extend_from_slice(v);
    }
    let encoded = encoder::encode_var(g, &inputs, &model.params, &model.cfg.encoder)?;
    let ks = supports.len() * n;
    let prototypes = g.constant(pool).matmul(&encoded.features.slice_rows(0, ks)?)?;
    let mut start = ks;
    let mut out = Vec::with_capacity(views.len());
    for v in views {
        let query_features = encoded.features.slice_rows(start, start + v.len() * n)?;
        start += v.len() * n;
        let heads = detect_var(query_features, prototypes, model)?;
        out.push(ViewForward { query_features, heads });
    }
    Ok(MultiForward {
        encoded,
        types,
        prototypes,
        views: out,
    })
}

/// Full episode forward: encodes supports and queries in one batch, pools
/// prototypes from the support keypoints and localizes every type in every
/// query.
pub fn forward_episode<'g>(
    g: &'g Graph,
    model: &Model,
    supports: &[EncoderInput<'_>],
    support_kps: &[Vec<Keypoint>],
    queries: &[EncoderInput<'_>],
) -> Result<EpisodeForward<'g>> {
    let mut f = forward_views(g, model, supports, support_kps, &[queries])?;
    let view = f.views.remove(0);
    Ok(EpisodeForward {
        encoded: f.encoded,
        types: f.types,
        prototypes: f.prototypes,
        query_features: view.query_features,
        heads: view.heads,
    })
}

/// A detection with its confidence (max probability at the finest scale).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub prediction: KeypointPrediction,
    pub score: f64,
}

/// Decodes every `(query, type)` row of evaluated heads.
pub fn detections(heads: &[ScaleHeads<'_>], model: &Model) -> Vec<Detection> {
    let rows = heads.first().map_or(0, |h| h.logits.shape()[0]);
    let finest = model.cfg.finest_scale();
    (0..rows)
        .map(|r| {
            let maps = scale_maps(heads, r);
            let score = maps
                .iter()
                .find(|m| m.s == finest)
                .map_or(0.0, |m| m.probs.iter().cloned().fold(0.0, f64::max));
            Detection {
                prediction: decode(&maps, model.l0(), model.cfg.fskd.dv, model.cfg.fskd.omega_eps),
                score,
            }
        })
        .collect()
}

/// Inductive detection: one prediction per kept type per query, rows
/// ordered query-major, with the kept type indices.
pub fn detect_episode(
    model: &Model,
    supports: &[EncoderInput<'_>],
    support_kps: &[Vec<Keypoint>],
    queries: &[EncoderInput<'_>],
) -> Result<(Vec<usize>, Vec<Detection>)> {
    let g = Graph::new();
    let fwd = forward_episode(&g, model, supports, support_kps, queries)?;
    Ok((fwd.types.clone(), detections(&fwd.heads, model)))
}
