//! Morphology learner: a saliency embedding module (SEM), a parameter
//! generator (MPG) predicting one exponent per image, and power
//! normalization of the token saliency (MCM).

use numcore::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{dim, param, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MorphConfig {
    /// Upper bound of the exponent.
    pub rho1: f64,
    /// Desired exponent center.
    pub rho2: f64,
    /// Half-width (squared) of the regularizer's dead zone.
    pub rho3: f64,
    /// SEM embedding width.
    pub d_e: usize,
    /// MPG hidden width.
    pub hidden: usize,
}

impl Default for MorphConfig {
    fn default() -> Self {
        Self {
            rho1: 2.0,
            rho2: 0.7,
            rho3: 0.05,
            d_e: 32,
            hidden: 32,
        }
    }
}

impl MorphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho1 > 0.0 && self.rho2 > 0.0 && self.rho2 < self.rho1 && self.rho3 >= 0.0) {
            return param(format!(
                "morphology bounds rho1={} rho2={} rho3={} violate rho1 > rho2 > 0, rho3 >= 0",
                self.rho1, self.rho2, self.rho3
            ));
        }
        if self.d_e == 0 || self.hidden == 0 {
            return param("morphology widths must be positive");
        }
        Ok(())
    }
}

const SEM_LAYERS: usize = 5;

fn sem_names(i: usize) -> (String, String) {
    (format!("sem.conv{i}.w"), format!("sem.conv{i}.b"))
}

/// One large-stride convolution (kernel = stride = `patch`), three 3x3
/// convolutions and a 1x1 projection, all of width `d_e`.
pub fn init_sem(store: &mut ParamStore, rng: &mut impl Rng, patch: usize, d_e: usize) {
    let shapes = [
        [patch, patch, 4, d_e],
        [3, 3, d_e, d_e],
        [3, 3, d_e, d_e],
        [3, 3, d_e, d_e],
        [1, 1, d_e, d_e],
    ];
    for (i, s) in shapes.iter().enumerate() {
        let (w, b) = sem_names(i);
        store.insert(w, ParamStore::he_normal(rng, s, s[0] * s[1] * s[2]));
        store.insert(b, Tensor::zeros(&[d_e]));
    }
}

/// SEM over a `[B, H, W, 4]` stack of `[sal; rgb]`, giving `[B * l * l, d_e]`
/// with tokens row-major within each image.
pub fn sem_embed_var<'g>(input: Var<'g>, store: &ParamStore, patch: usize) -> Result<Var<'g>> {
    let g = input.graph();
    let shape = input.shape();
    if shape.len() != 4 || shape[3] != 4 {
        return dim(format!("SEM input {shape:?} is not [B, H, W, 4]"));
    }
    let mut h = input;
    for i in 0..SEM_LAYERS {
        let (w, b) = sem_names(i);
        let (stride, pad) = match i {
            0 => (patch, 0),
            4 => (1, 0),
            _ => (1, 1),
        };
        h = h.conv2d(&g.param(store, &w)?, &g.param(store, &b)?, stride, pad)?;
        if i + 1 < SEM_LAYERS {
            h = h.relu();
        }
    }
    let s = h.shape();
    Ok(h.reshape(&[s[0] * s[1] * s[2], s[3]])?)
}

/// Stacks one image as a `[1, H, W, 4]` SEM input (`sal` first, then RGB).
pub fn sem_input(rgb: &[f64], sal: &[f64], side: usize) -> Result<Tensor> {
    if rgb.len() != side * side * 3 || sal.len() != side * side {
        return dim(format!("{} rgb and {} saliency values for a {side}x{side} image", rgb.len(), sal.len()));
    }
    let mut data = Vec::with_capacity(side * side * 4);
    for p in 0..side * side {
        data.push(sal[p]);
        data.extend_from_slice(&rgb[3 * p..3 * p + 3]);
    }
    Ok(Tensor::new(&[1, side, side, 4], data)?)
}

pub fn sem_embed(rgb: &[f64], sal: &[f64], side: usize, store: &ParamStore, patch: usize) -> Result<Tensor> {
    let g = Graph::new();
    let x = g.constant(sem_input(rgb, sal, side)?);
    Ok((*sem_embed_var(x, store, patch)?.value()).clone())
}

#[derive(Clone, Debug)]
pub struct MpgNames {
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

impl MpgNames {
    pub fn new(prefix: &str) -> Self {
        Self {
            w1: format!("{prefix}.w1"),
            b1: format!("{prefix}.b1"),
            w2: format!("{prefix}.w2"),
            b2: format!("{prefix}.b2"),
        }
    }
}

/// The output layer starts at zero so that the initial exponent is
/// `rho1 * sigmoid(0)`.
pub fn init_mpg(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize, cfg: &MorphConfig) {
    let n = MpgNames::new(prefix);
    store.insert(&n.w1, ParamStore::trunc_normal(rng, &[d + cfg.d_e, cfg.hidden], 0.02));
    store.insert(&n.b1, Tensor::zeros(&[cfg.hidden]));
    store.insert(&n.w2, Tensor::zeros(&[cfg.hidden, 1]));
    store.insert(&n.b2, Tensor::zeros(&[1]));
}

/// `theta = W2 GELU(W1 GAP([F_sal; P]) + b1) + b2` as a one-element var.
pub fn mpg_theta_var<'g>(p: Var<'g>, f_sal: Var<'g>, store: &ParamStore, names: &MpgNames) -> Result<Var<'g>> {
    let g = p.graph();
    let (pr, sr) = (p.shape()[0], f_sal.shape()[0]);
    if pr != sr {
        return dim(format!("{pr} patch tokens against {sr} saliency embeddings"));
    }
    let pooled = Var::concat_cols(&[f_sal, p])?.mean_rows();
    let width = pooled.numel();
    let h = pooled
        .reshape(&[1, width])?
        .linear(&g.param(store, &names.w1)?, Some(&g.param(store, &names.b1)?))?
        .gelu();
    let theta = h.linear(&g.param(store, &names.w2)?, Some(&g.param(store, &names.b2)?))?;
    Ok(theta.reshape(&[1])?)
}

pub fn mpg_theta(p: &Tensor, f_sal: &Tensor, store: &ParamStore, prefix: &str) -> Result<f64> {
    let g = Graph::new();
    let t = mpg_theta_var(g.constant(p.clone()), g.constant(f_sal.clone()), store, &MpgNames::new(prefix))?;
    Ok(t.value().item())
}

/// `theta~ = rho1 sigmoid(theta)`, `m = M_down ^ theta~` (with `0 ^ e = 0`).
pub fn mcm_power_var<'g>(m_down: Var<'g>, theta: Var<'g>, cfg: &MorphConfig) -> Result<(Var<'g>, Var<'g>)> {
    let tt = theta.sigmoid().scale(cfg.rho1);
    Ok((m_down.pow_scalar(&tt)?, tt))
}

pub fn mcm_power(m_down: &[f64], theta: f64, cfg: &MorphConfig) -> Result<(Vec<f64>, f64)> {
    if let Some(v) = m_down.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return param(format!("downscaled saliency {v} outside [0, 1]"));
    }
    let tt = cfg.rho1 / (1.0 + (-theta).exp());
    let m = m_down.iter().map(|&v| if v > 0.0 { v.powf(tt) } else { 0.0 }).collect();
    Ok((m, tt))
}

/// `max((theta~ - rho2)^2 - rho3, 0)` per element of `theta_tilde`, averaged.
pub fn morph_reg_var<'g>(theta_tilde: Var<'g>, cfg: &MorphConfig) -> Var<'g> {
    theta_tilde.add_scalar(-cfg.rho2).square().add_scalar(-cfg.rho3).relu().mean()
}

pub fn morph_reg(theta_tilde: f64, cfg: &MorphConfig) -> f64 {
    ((theta_tilde - cfg.rho2).powi(2) - cfg.rho3).max(0.0)
}
