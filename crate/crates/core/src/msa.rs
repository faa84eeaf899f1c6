//! Saliency-masked multi-head self-attention.
//!
//! Logits of head `h` are `phi(Q_h, K_h) + B_h - (11^T - M)J`, where `M` is
//! the attention mask built from token saliencies `m` and `B_h` is an
//! optional learnable relative-position bias. The softmax kernel normalizes
//! rows; the RBF kernel uses `exp` of the logits directly.

use std::rc::Rc;

use numcore::graph::mask_matrix;
use numcore::{func, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{dim, param, Error, Result};

pub use numcore::MaskVariant as SimVariant;

pub const HARMONIC_EPS: f64 = 1e-8;

/// The default saliency interaction: harmonic mean with `eps = 1e-8`.
pub fn harmonic() -> SimVariant {
    SimVariant::Harmonic { eps: HARMONIC_EPS }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Softmax,
    Rbf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub kernel: Kernel,
    pub heads: usize,
    pub head_dim: usize,
    /// Temperature.
    pub beta: f64,
    /// Masking degree.
    pub j: f64,
    pub use_pe: bool,
    pub sim: SimVariant,
    /// Row-normalize RBF attention (off by default).
    pub rbf_normalize: bool,
    /// l2-normalize query and key rows before the similarity.
    pub qk_norm: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::Rbf,
            heads: 4,
            head_dim: 16,
            beta: 1.0,
            j: 1.0,
            use_pe: true,
            sim: harmonic(),
            rbf_normalize: false,
            qk_norm: false,
        }
    }
}

impl AttentionConfig {
    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return param("attention needs at least one head of positive width");
        }
        if !(self.beta > 0.0) {
            return param(format!("temperature {} must be positive", self.beta));
        }
        if !(self.j >= 0.0) {
            return param(format!("masking degree {} must be non-negative", self.j));
        }
        if let SimVariant::Harmonic { eps } = self.sim {
            if !(eps > 0.0 && eps <= 1e-6) {
                return param(format!("harmonic epsilon {eps} outside (0, 1e-6]"));
            }
        }
        Ok(())
    }
}

fn check_saliency(m: &[f64]) -> Result<()> {
    match m.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => param(format!("token saliency {v} outside [0, 1]")),
        None => Ok(()),
    }
}

/// Saliency interaction matrix. The harmonic denominator is
/// `max(m_i + m_j, eps)`, so cells where both saliencies vanish are 0.
pub fn sim(m: &[f64], variant: SimVariant) -> Result<Tensor> {
    check_saliency(m)?;
    let n = m.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (m[i], m[j]);
            out[i * n + j] = match variant {
                SimVariant::Dot => a * b,
                SimVariant::Arithmetic => 0.5 * (a + b),
                SimVariant::Harmonic { eps } => 2.0 * a * b / (a + b).max(eps),
            };
        }
    }
    Ok(Tensor::new(&[n, n], out)?)
}

/// `SIM(m) + I - Diag(m)`. The diagonal is exactly 1 for the harmonic and
/// arithmetic variants and `m_i^2 + 1 - m_i` for the dot variant.
pub fn attention_mask(m: &[f64], variant: SimVariant) -> Result<Tensor> {
    check_saliency(m)?;
    Ok(mask_matrix(m, variant))
}

/// Side of a square token grid, or an error when `n` is not a square.
pub fn grid_side(n: usize) -> Result<usize> {
    let l = (n as f64).sqrt().round() as usize;
    if l * l != n || n == 0 {
        return dim(format!("{n} tokens do not form a square grid"));
    }
    Ok(l)
}

/// Flat indices into a `[heads, (2l-1)^2]` bias table so that entry
/// `(h, i, j)` reads the bias for the displacement from token `i` to `j`.
pub fn relative_index(l: usize, head: usize) -> Vec<usize> {
    let span = 2 * l - 1;
    let n = l * l;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (iy, ix) = (i / l, i % l);
        for j in 0..n {
            let (jy, jx) = (j / l, j % l);
            let dy = jy + l - 1 - iy;
            let dx = jx + l - 1 - ix;
            idx.push(head * span * span + dy * span + dx);
        }
    }
    idx
}

/// The `n x n` relative-position bias of one head.
pub fn positional_bias(n: usize, table: &Tensor, head: usize) -> Result<Tensor> {
    let l = grid_side(n)?;
    let span = 2 * l - 1;
    if table.numel() < (head + 1) * span * span {
        return dim(format!("bias table of {} entries for head {head} of a {l}x{l} grid", table.numel()));
    }
    let data = relative_index(l, head).iter().map(|&k| table.data()[k]).collect();
    Ok(Tensor::new(&[n, n], data)?)
}

/// Parameter names for one attention module.
#[derive(Clone, Debug)]
pub struct MsaNames {
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub wo: String,
    pub pe: String,
}

impl MsaNames {
    pub fn new(prefix: &str) -> Self {
        Self {
            wq: format!("{prefix}.wq"),
            wk: format!("{prefix}.wk"),
            wv: format!("{prefix}.wv"),
            wo: format!("{prefix}.wo"),
            pe: format!("{prefix}.pe"),
        }
    }
}

/// Truncated-normal projections, zero output projection when `zero_out`,
/// zero bias table.
pub fn init_params(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize, l: usize, cfg: &AttentionConfig, zero_out: bool) {
    let names = MsaNames::new(prefix);
    let inner = cfg.inner_dim();
    store.insert(&names.wq, ParamStore::trunc_normal(rng, &[d, inner], 0.02));
    store.insert(&names.wk, ParamStore::trunc_normal(rng, &[d, inner], 0.02));
    store.insert(&names.wv, ParamStore::trunc_normal(rng, &[d, inner], 0.02));
    let wo = if zero_out {
        Tensor::zeros(&[inner, d])
    } else {
        ParamStore::trunc_normal(rng, &[inner, d], 0.02)
    };
    store.insert(&names.wo, wo);
    let span = 2 * l - 1;
    store.insert(&names.pe, Tensor::zeros(&[cfg.heads, span * span]));
}

pub struct MsaOutput<'g> {
    pub z: Var<'g>,
    /// One `n x n` attention matrix per head.
    pub attention: Vec<Var<'g>>,
}

fn l2_rows<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let g = x.graph();
    let ones = g.constant(Tensor::ones(&[x.cols(), 1]));
    let half = g.constant(Tensor::scalar(-0.5));
    let inv = x.square().matmul(&ones)?.add_scalar(1e-12).pow_scalar(&half)?;
    let inv = inv.reshape(&[inv.numel()])?;
    Ok(x.mul_col(&inv)?)
}

/// Soft masked self-attention on one token set `x: [n, d]` with saliency
/// `m: [n]`, recorded on the graph of `x`.
pub fn soft_msa_var<'g>(
    x: Var<'g>,
    m: Var<'g>,
    cfg: &AttentionConfig,
    store: &ParamStore,
    names: &MsaNames,
) -> Result<MsaOutput<'g>> {
    let g = x.graph();
    let n = x.shape()[0];
    if m.numel() != n {
        return dim(format!("{} saliencies for {n} tokens", m.numel()));
    }
    let mut q = x.matmul(&g.param(store, &names.wq)?)?;
    let mut k = x.matmul(&g.param(store, &names.wk)?)?;
    let v = x.matmul(&g.param(store, &names.wv)?)?;
    if cfg.qk_norm {
        q = l2_rows(q)?;
        k = l2_rows(k)?;
    }
    let mask_bias = m.attention_mask(cfg.sim)?.add_scalar(-1.0).scale(cfg.j);
    let table = if cfg.use_pe { Some(g.param(store, &names.pe)?) } else { None };
    let l = if cfg.use_pe { grid_side(n)? } else { 0 };
    let scale = 1.0 / (cfg.beta * (cfg.head_dim as f64).sqrt());

    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (a, b) = (h * cfg.head_dim, (h + 1) * cfg.head_dim);
        let (qh, kh, vh) = (q.slice_cols(a, b)?, k.slice_cols(a, b)?, v.slice_cols(a, b)?);
        let phi = match cfg.kernel {
            Kernel::Softmax => qh.matmul_t(&kh, false, true)?.scale(scale),
            Kernel::Rbf => qh.pairwise_dist(&kh)?.scale(-0.5 * scale),
        };
        let mut logits = phi;
        if let Some(table) = table {
            let bias = table.gather(Rc::new(relative_index(l, h)), &[n, n])?;
            logits = logits.add(&bias)?;
        }
        let logits = logits.add(&mask_bias)?;
        if !logits.value().is_finite() {
            return Err(Error::NanLogits { head: h });
        }
        let attn = match (cfg.kernel, cfg.rbf_normalize) {
            (Kernel::Softmax, _) | (Kernel::Rbf, true) => logits.softmax_rows(),
            (Kernel::Rbf, false) => logits.exp(),
        };
        heads.push(attn.matmul(&vh)?);
        attention.push(attn);
    }
    let z = Var::concat_cols(&heads)?.matmul(&g.param(store, &names.wo)?)?;
    Ok(MsaOutput { z, attention })
}

/// Plain evaluation of [`soft_msa_var`]: returns `Z [n, d]` and the
/// attention `[heads, n, n]`.
pub fn soft_msa(x: &Tensor, m: &[f64], cfg: &AttentionConfig, store: &ParamStore, prefix: &str) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    check_saliency(m)?;
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let mv = g.constant(Tensor::vector(m.to_vec()));
    let out = soft_msa_var(xv, mv, cfg, store, &MsaNames::new(prefix))?;
    let n = m.len();
    let mut a = Vec::with_capacity(cfg.heads * n * n);
    for h in &out.attention {
        a.extend_from_slice(h.value().data());
    }
    Ok(((*out.z.value()).clone(), Tensor::new(&[cfg.heads, n, n], a)?))
}

/// Hard-masked attention on a binary saliency vector: salient rows attend
/// only to salient tokens (renormalized for the softmax kernel); non-salient
/// rows copy their own value.
pub fn hard_msa_oracle(x: &Tensor, m: &[f64], cfg: &AttentionConfig, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    if let Some(v) = m.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return param(format!("hard masking needs binary saliency, got {v}"));
    }
    let names = MsaNames::new(prefix);
    let get = |name: &str| -> Result<&Tensor> {
        store.get(name).ok_or_else(|| Error::Param(format!("missing parameter `{name}`")))
    };
    let q = func::linear(x, get(&names.wq)?, None)?;
    let k = func::linear(x, get(&names.wk)?, None)?;
    let v = func::linear(x, get(&names.wv)?, None)?;
    let n = x.rows();
    let dh = cfg.head_dim;
    let inner = cfg.inner_dim();
    let scale = 1.0 / (cfg.beta * (dh as f64).sqrt());
    let mut mixed = vec![0.0; n * inner];
    for h in 0..cfg.heads {
        let bias = if cfg.use_pe { Some(positional_bias(n, get(&names.pe)?, h)?) } else { None };
        for i in 0..n {
            let mut row = vec![0.0; n];
            if m[i] == 1.0 {
                let qi = &q.row(i)[h * dh..(h + 1) * dh];
                for j in (0..n).filter(|&j| m[j] == 1.0) {
                    let kj = &k.row(j)[h * dh..(h + 1) * dh];
                    let mut phi = match cfg.kernel {
                        Kernel::Softmax => qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale,
                        Kernel::Rbf => {
                            -0.5 * scale * qi.iter().zip(kj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                        }
                    };
                    if let Some(b) = &bias {
                        phi += b.at2(i, j);
                    }
                    row[j] = phi;
                }
                let salient: Vec<usize> = (0..n).filter(|&j| m[j] == 1.0).collect();
                if cfg.kernel == Kernel::Softmax || cfg.rbf_normalize {
                    let mx = salient.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = salient.iter().map(|&j| (row[j] - mx).exp()).sum();
                    for &j in &salient {
                        row[j] = (row[j] - mx).exp() / total;
                    }
                } else {
                    for &j in &salient {
                        row[j] = row[j].exp();
                    }
                }
            } else {
                row[i] = 1.0;
            }
            for c in 0..dh {
                mixed[i * inner + h * dh + c] = (0..n).map(|j| row[j] * v.at2(j, h * dh + c)).sum();
            }
        }
    }
    Ok(func::linear(&Tensor::new(&[n, inner], mixed)?, get(&names.wo)?, None)?)
}
