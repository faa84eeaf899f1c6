//! Occlusion at test time, random foreground masking at training time, and
//! the alignment losses tying the clean and masked views together.

use std::collections::VecDeque;

use numcore::{Graph, ParamStore, Tensor, Var};
use rand::seq::index;
use rand::Rng;

use crate::error::{dim, param, Error, Result};
use crate::fskd::{Keypoint, ScaleHeads};
use crate::saliency::SaliencyMap;

pub const GRAY: f64 = 0.5;
pub const KL_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OcclusionKind {
    GrayBox,
    AvgPixelBox,
    BackgroundCrop,
}

impl OcclusionKind {
    pub const ALL: [OcclusionKind; 3] = [OcclusionKind::GrayBox, OcclusionKind::AvgPixelBox, OcclusionKind::BackgroundCrop];

    pub fn name(self) -> &'static str {
        match self {
            OcclusionKind::GrayBox => "gray_box",
            OcclusionKind::AvgPixelBox => "avg_pixel_box",
            OcclusionKind::BackgroundCrop => "background_crop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionSpec {
    pub kind: OcclusionKind,
    /// Box area as a fraction of the object box area.
    pub area: (f64, f64),
    /// Width over height.
    pub aspect: (f64, f64),
    /// Probability of occluding each visible query keypoint.
    pub p: f64,
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        Self {
            kind: OcclusionKind::GrayBox,
            area: (0.01, 0.04),
            aspect: (0.7, 1.4),
            p: 0.0,
        }
    }
}

impl OcclusionSpec {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.area;
        let (r0, r1) = self.aspect;
        if !(a0 > 0.0 && a0 <= a1 && r0 > 0.0 && r0 <= r1 && (0.0..=1.0).contains(&self.p)) {
            return param(format!("invalid occlusion ranges {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxSample {
    pub ratio: f64,
    pub aspect: f64,
    pub w: f64,
    pub h: f64,
}

/// Draws box dimensions for an object box of area `object_area`.
pub fn sample_box(spec: &OcclusionSpec, object_area: f64, rng: &mut impl Rng) -> BoxSample {
    let ratio = rng.gen_range(spec.area.0..=spec.area.1);
    let aspect = rng.gen_range(spec.aspect.0..=spec.aspect.1);
    let area = ratio * object_area;
    BoxSample {
        ratio,
        aspect,
        w: (area * aspect).sqrt(),
        h: (area / aspect).sqrt(),
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` of a box centered at `c`, at least
/// one pixel wide and clipped to the image.
fn pixel_rect(c: [f64; 2], w: f64, h: f64, side: usize) -> [usize; 4] {
    let span = |center: f64, len: f64| {
        let lo = (center - len / 2.0).round().clamp(0.0, side as f64 - 1.0) as usize;
        let hi = ((center + len / 2.0).round().clamp(0.0, side as f64) as usize).max(lo + 1);
        (lo, hi)
    };
    let (x0, x1) = span(c[0], w);
    let (y0, y1) = span(c[1], h);
    [x0, y0, x1, y1]
}

/// Largest 4-connected region of background pixels (`saliency < 0.5`).
fn largest_background(sal: &SaliencyMap) -> Vec<bool> {
    let (w, h) = (sal.width(), sal.height());
    let bg: Vec<bool> = sal.values().iter().map(|&v| v < 0.5).collect();
    let mut label = vec![usize::MAX; w * h];
    let mut best = (0, usize::MAX);
    let mut queue = VecDeque::new();
    let mut next = 0;
    for start in 0..w * h {
        if !bg[start] || label[start] != usize::MAX {
            continue;
        }
        let mut size = 0;
        label[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if bg[q] && label[q] == usize::MAX {
                    label[q] = next;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        if size > best.0 {
            best = (size, next);
        }
        next += 1;
    }
    label.iter().map(|&l| l != usize::MAX && l == best.1).collect()
}

/// Top-left corners of every `bw x bh` window lying inside `region`.
fn interior_windows(region: &[bool], side: usize, bw: usize, bh: usize) -> Vec<(usize, usize)> {
    if bw > side || bh > side {
        return Vec::new();
    }
    let stride = side + 1;
    let mut integral = vec![0usize; stride * stride];
    for y in 0..side {
        for x in 0..side {
            integral[(y + 1) * stride + x + 1] = region[y * side + x] as usize + integral[y * stride + x + 1]
                + integral[(y + 1) * stride + x]
                - integral[y * stride + x];
        }
    }
    let mut out = Vec::new();
    for y in 0..=side - bh {
        for x in 0..=side - bw {
            let s = integral[(y + bh) * stride + x + bw] + integral[y * stride + x]
                - integral[y * stride + x + bw]
                - integral[(y + bh) * stride + x];
            if s == bw * bh {
                out.push((x, y));
            }
        }
    }
    out
}

/// Occludes a box centered at `kp` whose size is drawn relative to the
/// object box `[x0, y0, x1, y1]`.
pub fn occlude_test(
    rgb: &[f64],
    sal: &SaliencyMap,
    kp: &Keypoint,
    object: [f64; 4],
    spec: &OcclusionSpec,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, SaliencyMap)> {
    if !kp.visible {
        return Err(Error::Contract("occlusion centered at an invisible keypoint".into()));
    }
    let side = sal.width();
    if sal.height() != side || rgb.len() != 3 * side * side {
        return dim(format!("{} rgb values for a {}x{} saliency map", rgb.len(), side, sal.height()));
    }
    let area = (object[2] - object[0]) * (object[3] - object[1]);
    let b = sample_box(spec, area, rng);
    let [x0, y0, x1, y1] = pixel_rect(kp.x, b.w, b.h, side);
    let mut out = rgb.to_vec();
    let mut s = sal.values().to_vec();

    let mut kind = spec.kind;
    let mut source = None;
    if kind == OcclusionKind::BackgroundCrop {
        let windows = interior_windows(&largest_background(sal), side, x1 - x0, y1 - y0);
        if windows.is_empty() {
            log::warn!("no background window of {}x{} px; falling back to a gray box", x1 - x0, y1 - y0);
            kind = OcclusionKind::GrayBox;
        } else {
            source = Some(windows[rng.gen_range(0..windows.len())]);
        }
    }
    let fill: [f64; 3] = match kind {
        OcclusionKind::AvgPixelBox => {
            let mut m = [0.0; 3];
            for px in rgb.chunks_exact(3) {
                m.iter_mut().zip(px).for_each(|(a, b)| *a += b);
            }
            m.map(|v| v / (side * side) as f64)
        }
        _ => [GRAY; 3],
    };
    for y in y0..y1 {
        for x in x0..x1 {
            let p = y * side + x;
            match source {
                Some((sx, sy)) => {
                    let q = (sy + y - y0) * side + sx + x - x0;
                    out[3 * p..3 * p + 3].copy_from_slice(&rgb[3 * q..3 * q + 3]);
                    s[p] = sal.values()[q];
                }
                None => {
                    out[3 * p..3 * p + 3].copy_from_slice(&fill);
                    s[p] = 0.0;
                }
            }
        }
    }
    Ok((out, SaliencyMap::new(side, side, s)?))
}

/// Occludes each visible keypoint independently with probability `spec.p`.
pub fn occlude_query(
    rgb: &[f64],
    sal: &SaliencyMap,
    kps: &[Keypoint],
    object: [f64; 4],
    spec: &OcclusionSpec,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, SaliencyMap)> {
    let mut cur = (rgb.to_vec(), sal.clone());
    for kp in kps.iter().filter(|k| k.visible) {
        if spec.p > 0.0 && rng.gen_bool(spec.p) {
            cur = occlude_test(&cur.0, &cur.1, kp, object, spec, rng)?;
        }
    }
    Ok(cur)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskStrategy {
    pub mask_rgb: bool,
    pub mask_sal: bool,
    pub mask_feat: bool,
    pub min_patches: usize,
    pub max_patches: usize,
}

impl Default for MaskStrategy {
    fn default() -> Self {
        Self {
            mask_rgb: false,
            mask_sal: false,
            mask_feat: false,
            min_patches: 2,
            max_patches: 12,
        }
    }
}

impl MaskStrategy {
    pub fn any(&self) -> bool {
        self.mask_rgb || self.mask_sal || self.mask_feat
    }
}

/// A masked copy of one training image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedView {
    pub rgb: Vec<f64>,
    pub sal: SaliencyMap,
    /// Per token, `true` where backbone features are zeroed.
    pub feature_mask: Option<Vec<bool>>,
    /// Masked token indices, ascending.
    pub patches: Vec<usize>,
}

/// Masks between `min_patches` and `max_patches` tokens drawn uniformly
/// among those whose mean saliency is at least 0.5.
pub fn mask_train(rgb: &[f64], sal: &SaliencyMap, patch: usize, strategy: &MaskStrategy, rng: &mut impl Rng) -> Result<MaskedView> {
    let side = sal.width();
    if side % patch != 0 || sal.height() != side || rgb.len() != 3 * side * side {
        return dim(format!("{}x{} image does not tile into {patch}-px patches", side, sal.height()));
    }
    let l = side / patch;
    let mut out = MaskedView {
        rgb: rgb.to_vec(),
        sal: sal.clone(),
        feature_mask: None,
        patches: Vec::new(),
    };
    if !strategy.any() {
        return Ok(out);
    }
    let fg: Vec<usize> = (0..l * l)
        .filter(|&c| {
            let (cy, cx) = (c / l, c % l);
            let mut s = 0.0;
            for y in cy * patch..(cy + 1) * patch {
                for x in cx * patch..(cx + 1) * patch {
                    s += sal.get(x, y);
                }
            }
            s / (patch * patch) as f64 >= 0.5
        })
        .collect();
    let want = rng.gen_range(strategy.min_patches..=strategy.max_patches);
    let take = want.min(fg.len());
    let mut patches: Vec<usize> = index::sample(rng, fg.len(), take).into_iter().map(|i| fg[i]).collect();
    patches.sort_unstable();
    let mut s = sal.values().to_vec();
    for &c in &patches {
        let (cy, cx) = (c / l, c % l);
        for y in cy * patch..(cy + 1) * patch {
            for x in cx * patch..(cx + 1) * patch {
                let p = y * side + x;
                if strategy.mask_rgb {
                    out.rgb[3 * p..3 * p + 3].fill(GRAY);
                }
                if strategy.mask_sal {
                    s[p] = 0.0;
                }
            }
        }
    }
    out.sal = SaliencyMap::new(side, side, s)?;
    if strategy.mask_feat {
        let mut m = vec![false; l * l];
        patches.iter().for_each(|&c| m[c] = true);
        out.feature_mask = Some(m);
    }
    out.patches = patches;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMode {
    None,
    ProbKl,
    FeatL1,
    FeatL2,
    FeatMmd,
    Recon,
    NonOcclLoss,
}

impl AlignMode {
    pub const ALL: [AlignMode; 7] = [
        AlignMode::None,
        AlignMode::ProbKl,
        AlignMode::FeatL1,
        AlignMode::FeatL2,
        AlignMode::FeatMmd,
        AlignMode::Recon,
        AlignMode::NonOcclLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlignMode::None => "none",
            AlignMode::ProbKl => "prob_kl",
            AlignMode::FeatL1 => "feat_l1",
            AlignMode::FeatL2 => "feat_l2",
            AlignMode::FeatMmd => "feat_mmd",
            AlignMode::Recon => "recon",
            AlignMode::NonOcclLoss => "non_occl_loss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Whether the clean view must be run through the detector as well.
    pub fn needs_clean_view(self) -> bool {
        !matches!(self, AlignMode::None | AlignMode::Recon)
    }
}

/// `KL[P || Q]` with both clamped at `KL_CLAMP` inside the logarithms.
pub fn prob_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.max(KL_CLAMP).ln() - b.max(KL_CLAMP).ln()))
        .sum()
}

fn kl_rows<'g>(p: Var<'g>, q: Var<'g>) -> Result<Var<'g>> {
    let rows = p.shape()[0] as f64;
    let diff = p.clamp_min(KL_CLAMP).log().sub(&q.clamp_min(KL_CLAMP).log())?;
    Ok(p.mul(&diff)?.sum().scale(1.0 / rows))
}

/// Probability-map KL averaged over rows and scales. With `detach` the
/// clean view is treated as a constant target.
pub fn prob_kl_var<'g>(clean: &[ScaleHeads<'g>], occluded: &[ScaleHeads<'g>], detach: bool) -> Result<Var<'g>> {
    if clean.len() != occluded.len() || clean.is_empty() {
        return dim("clean and occluded views disagree on the scales");
    }
    let g = clean[0].logits.graph();
    let mut total: Option<Var<'g>> = None;
    for (c, o) in clean.iter().zip(occluded) {
        let mut p = c.logits.softmax_rows();
        if detach {
            p = g.constant((*p.value()).clone());
        }
        let kl = kl_rows(p, o.logits.softmax_rows())?;
        total = Some(match total {
            Some(t) => t.add(&kl)?,
            None => kl,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / clean.len() as f64))
}

/// Mean absolute (`squared = false`) or squared elementwise difference.
pub fn feat_dist_var<'g>(e: Var<'g>, e_occ: Var<'g>, squared: bool) -> Result<Var<'g>> {
    let d = e.sub(&e_occ)?;
    Ok(if squared { d.square().mean() } else { d.abs().mean() })
}

pub fn feat_dist(e: &[f64], e_occ: &[f64], squared: bool) -> f64 {
    let s: f64 = e
        .iter()
        .zip(e_occ)
        .map(|(a, b)| if squared { (a - b).powi(2) } else { (a - b).abs() })
        .sum();
    s / e.len() as f64
}

/// Kernel width `2 h^2` with `h` the median pairwise distance of the pooled
/// rows, kept on the graph so the loss is differentiated exactly. Falls
/// back to `h = 1` when the median vanishes.
fn median_width<'g>(x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    let g = x.graph();
    let z = Var::concat_rows(&[x, y])?;
    let d2 = z.pairwise_sqdist(&z)?;
    let n = d2.shape()[0];
    let vals = d2.value();
    let mut upper: Vec<usize> = (0..n).flat_map(|i| (i + 1..n).map(move |j| i * n + j)).collect();
    if upper.is_empty() {
        return Ok(g.constant(Tensor::scalar(2.0)));
    }
    upper.sort_by(|&a, &b| vals.data()[a].total_cmp(&vals.data()[b]));
    let at = upper[upper.len() / 2];
    if vals.data()[at] <= 0.0 {
        return Ok(g.constant(Tensor::scalar(2.0)));
    }
    Ok(d2.gather(std::rc::Rc::new(vec![at]), &[1])?.scale(2.0))
}

fn mmd_graph<'g>(x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    let g = x.graph();
    let inv = median_width(x, y)?.pow_scalar(&g.constant(Tensor::scalar(-1.0)))?.neg();
    let k = |a: &Var<'g>, b: &Var<'g>| -> Result<Var<'g>> { Ok(a.pairwise_sqdist(b)?.mul_scalar(&inv)?.exp().mean()) };
    Ok(k(&x, &x)?.add(&k(&y, &y)?)?.sub(&k(&x, &y)?.scale(2.0))?)
}

/// Biased squared MMD with a Gaussian kernel between the token sets of each
/// image, averaged over images of `tokens` rows each.
pub fn feat_mmd_var<'g>(e: Var<'g>, e_occ: Var<'g>, tokens: usize) -> Result<Var<'g>> {
    let rows = e.shape()[0];
    if rows != e_occ.shape()[0] || tokens == 0 || rows % tokens != 0 {
        return dim(format!("{rows} and {} feature rows in images of {tokens} tokens", e_occ.shape()[0]));
    }
    let images = rows / tokens;
    let mut total: Option<Var<'g>> = None;
    for i in 0..images {
        let m = mmd_graph(e.slice_rows(i * tokens, (i + 1) * tokens)?, e_occ.slice_rows(i * tokens, (i + 1) * tokens)?)?;
        total = Some(match total {
            Some(t) => t.add(&m)?,
            None => m,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / images as f64))
}

pub fn feat_mmd(x: &Tensor, y: &Tensor) -> Result<f64> {
    let g = Graph::new();
    Ok(mmd_graph(g.constant(x.clone()), g.constant(y.clone()))?.value().item())
}

pub fn init_recon(store: &mut ParamStore, rng: &mut impl Rng, d: usize, patch: usize) {
    store.insert("recon.w", ParamStore::trunc_normal(rng, &[d, patch * patch * 3], 0.02));
    store.insert("recon.b", Tensor::zeros(&[patch * patch * 3]));
}

/// Pixels of token `c` in patch-raster order.
pub fn patch_pixels(rgb: &[f64], side: usize, patch: usize, c: usize) -> Vec<f64> {
    let l = side / patch;
    let (cy, cx) = (c / l, c % l);
    let mut out = Vec::with_capacity(patch * patch * 3);
    for y in cy * patch..(cy + 1) * patch {
        let start = 3 * (y * side + cx * patch);
        out.extend_from_slice(&rgb[start..start + 3 * patch]);
    }
    out
}

/// Mean absolute error of a linear head predicting the clean pixels of the
/// masked tokens from the occluded-view features. `rows` index feature
/// rows; `targets` hold the matching clean patches.
pub fn recon_var<'g>(features_occ: Var<'g>, rows: &[usize], targets: &[Vec<f64>], store: &ParamStore) -> Result<Var<'g>> {
    let g = features_occ.graph();
    if rows.is_empty() || rows.len() != targets.len() {
        return dim(format!("{} masked rows with {} targets", rows.len(), targets.len()));
    }
    let d = features_occ.cols();
    let idx: Vec<usize> = rows.iter().flat_map(|&r| (0..d).map(move |c| r * d + c)).collect();
    let picked = features_occ.gather(std::rc::Rc::new(idx), &[rows.len(), d])?;
    let pred = picked.linear(&g.param(store, "recon.w")?, Some(&g.param(store, "recon.b")?))?;
    let target = g.constant(Tensor::from_rows(targets)?);
    Ok(pred.sub(&target)?.abs().mean())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ms: f64,
    pub reg: f64,
    pub aln: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ms: 0.5, reg: 0.5, aln: 0.1 }
    }
}

pub fn total_loss(l_ms: f64, l_reg: f64, l_aln: Option<f64>, w: &LossWeights) -> f64 {
    w.ms * l_ms + w.reg * l_reg + l_aln.map_or(0.0, |a| w.aln * a)
}

pub fn total_loss_var<'g>(l_ms: Var<'g>, l_reg: Var<'g>, l_aln: Option<Var<'g>>, w: &LossWeights) -> Result<Var<'g>> {
    let mut t = l_ms.scale(w.ms).add(&l_reg.scale(w.reg))?;
    if let Some(a) = l_aln {
        t = t.add(&a.scale(w.aln))?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(side: usize) -> (Vec<f64>, SaliencyMap) {
        let rgb: Vec<f64> = (0..3 * side * side).map(|i| (i % 7) as f64 / 7.0).collect();
        let sal: Vec<f64> = (0..side * side)
            .map(|p| if (p % side) >= side / 4 && (p % side) < 3 * side / 4 && p / side >= side / 4 && p / side < 3 * side / 4 { 1.0 } else { 0.0 })
            .collect();
        (rgb, SaliencyMap::new(side, side, sal).unwrap())
    }

    #[test]
    fn zero_probability_leaves_inputs_unchanged() {
        let (rgb, sal) = scene(32);
        let spec = OcclusionSpec::default();
        let kps = [Keypoint::visible(16.0, 16.0)];
        let (r, s) = occlude_query(&rgb, &sal, &kps, [8.0, 8.0, 24.0, 24.0], &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(r, rgb);
        assert_eq!(s, sal);
    }

    #[test]
    fn box_ratios_within_bounds() {
        let spec = OcclusionSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let b = sample_box(&spec, 1000.0, &mut rng);
            assert!((0.01..=0.04).contains(&b.ratio) && (0.7..=1.4).contains(&b.aspect));
            assert!(((b.w * b.h) / 1000.0 - b.ratio).abs() < 1e-12);
        }
    }

    #[test]
    fn gray_box_fills_exactly() {
        let (rgb, sal) = scene(32);
        let spec = OcclusionSpec { area: (0.04, 0.04), aspect: (1.0, 1.0), p: 1.0, ..Default::default() };
        let (r, s) = occlude_test(&rgb, &sal, &Keypoint::visible(16.0, 16.0), [0.0, 0.0, 30.0, 30.0], &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // 0.04 * 900 = 36 -> a 6x6 box at [13, 19).
        for y in 0..32 {
            for x in 0..32 {
                let p = y * 32 + x;
                let inside = (13..19).contains(&x) && (13..19).contains(&y);
                if inside {
                    assert_eq!(&r[3 * p..3 * p + 3], &[0.5, 0.5, 0.5]);
                    assert_eq!(s.values()[p], 0.0);
                } else {
                    assert_eq!(&r[3 * p..3 * p + 3], &rgb[3 * p..3 * p + 3]);
                }
            }
        }
    }

    #[test]
    fn background_crop_copies_background() {
        let (rgb, sal) = scene(32);
        let spec = OcclusionSpec { kind: OcclusionKind::BackgroundCrop, area: (0.04, 0.04), aspect: (1.0, 1.0), p: 1.0 };
        let (_, s) = occlude_test(&rgb, &sal, &Keypoint::visible(16.0, 16.0), [0.0, 0.0, 30.0, 30.0], &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((13..19).all(|y| (13..19).all(|x| s.values()[y * 32 + x] == 0.0)));
        // No background at all: falls back to gray.
        let full = SaliencyMap::filled(32, 32, 1.0).unwrap();
        let (r, _) = occlude_test(&rgb, &full, &Keypoint::visible(16.0, 16.0), [0.0, 0.0, 30.0, 30.0], &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(&r[3 * (16 * 32 + 16)..3 * (16 * 32 + 16) + 3], &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn mask_train_contracts() {
        let (rgb, sal) = scene(32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let off = mask_train(&rgb, &sal, 4, &MaskStrategy::default(), &mut rng).unwrap();
        assert_eq!(off.rgb, rgb);
        assert_eq!(off.sal, sal);
        let feat_only = MaskStrategy { mask_feat: true, ..Default::default() };
        for _ in 0..50 {
            let v = mask_train(&rgb, &sal, 4, &feat_only, &mut rng).unwrap();
            assert_eq!(v.rgb, rgb);
            assert_eq!(v.sal, sal);
            assert!((2..=12).contains(&v.patches.len()));
            assert_eq!(v.feature_mask.unwrap().iter().filter(|&&b| b).count(), v.patches.len());
        }
    }

    #[test]
    fn kl_examples() {
        assert!((prob_kl(&[1.0, 0.0], &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(prob_kl(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, Some(0.0), &w), 0.0);
        assert!((total_loss(2.0, 0.0, Some(1.0), &w) - 1.1).abs() < 1e-15);
        assert_eq!(total_loss(2.0, 0.4, None, &w), total_loss(2.0, 0.4, Some(0.0), &w));
    }

    #[test]
    fn identical_views_have_zero_distance() {
        let x = Tensor::new(&[3, 2], vec![0.1, 0.5, -0.3, 0.2, 0.9, -1.0]).unwrap();
        assert_eq!(feat_mmd(&x, &x).unwrap(), 0.0);
        assert_eq!(feat_dist(x.data(), x.data(), true), 0.0);
        assert_eq!(feat_dist(x.data(), x.data(), false), 0.0);
    }
}
