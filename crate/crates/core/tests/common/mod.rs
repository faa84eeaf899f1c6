#![allow(dead_code)]

use numcore::{ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use salvit::msa::{self, AttentionConfig, Kernel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Attention parameters with O(1) projections and a random bias table, so
/// that logits are far from uniform.
pub fn attention_store(rng: &mut impl Rng, prefix: &str, d: usize, l: usize, cfg: &AttentionConfig) -> ParamStore {
    let mut store = ParamStore::new();
    let inner = cfg.inner_dim();
    let s = 1.0 / (d as f64).sqrt();
    store.insert(&format!("{prefix}.wq"), uniform(rng, &[d, inner], 2.0 * s));
    store.insert(&format!("{prefix}.wk"), uniform(rng, &[d, inner], 2.0 * s));
    store.insert(&format!("{prefix}.wv"), uniform(rng, &[d, inner], s));
    store.insert(&format!("{prefix}.wo"), uniform(rng, &[inner, d], s));
    let span = 2 * l - 1;
    store.insert(&format!("{prefix}.pe"), uniform(rng, &[cfg.heads, span * span], 1.0));
    store
}

fn project(x: &Tensor, w: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| (0..w.cols()).map(|c| (0..x.cols()).map(|k| x.at2(i, k) * w.at2(k, c)).sum()).collect())
        .collect()
}

/// Unmasked multi-head attention written with plain loops: per head,
/// `kernel(q_i, k_j) + B_ij` followed by a row softmax (softmax kernel) or
/// `exp` (unnormalized RBF), then `A V` concatenated and projected.
pub fn vanilla_sa(x: &Tensor, cfg: &AttentionConfig, store: &ParamStore, prefix: &str) -> (Tensor, Vec<Vec<Vec<f64>>>) {
    let get = |s: &str| store.get(&format!("{prefix}.{s}")).unwrap();
    let (q, k, v) = (project(x, get("wq")), project(x, get("wk")), project(x, get("wv")));
    let n = x.rows();
    let dh = cfg.head_dim;
    let scale = 1.0 / (cfg.beta * (dh as f64).sqrt());
    let l = (n as f64).sqrt().round() as usize;
    let span = 2 * l - 1;
    let table = get("pe");
    let mut mixed = vec![vec![0.0; cfg.inner_dim()]; n];
    let mut attn = Vec::new();
    for h in 0..cfg.heads {
        let cols = h * dh..(h + 1) * dh;
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let phi = match cfg.kernel {
                    Kernel::Softmax => cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale,
                    Kernel::Rbf => -0.5 * scale * cols.clone().map(|c| (q[i][c] - k[j][c]).powi(2)).sum::<f64>().sqrt(),
                };
                let bias = if cfg.use_pe {
                    let dy = (j / l) as isize - (i / l) as isize + l as isize - 1;
                    let dx = (j % l) as isize - (i % l) as isize + l as isize - 1;
                    table.data()[h * span * span + dy as usize * span + dx as usize]
                } else {
                    0.0
                };
                a[i][j] = phi + bias;
            }
            if cfg.kernel == Kernel::Softmax || cfg.rbf_normalize {
                let mx = a[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = a[i].iter().map(|v| (v - mx).exp()).sum();
                a[i].iter_mut().for_each(|v| *v = (*v - mx).exp() / z);
            } else {
                a[i].iter_mut().for_each(|v| *v = v.exp());
            }
            for c in cols.clone() {
                mixed[i][c] = (0..n).map(|j| a[i][j] * v[j][c]).sum();
            }
        }
        attn.push(a);
    }
    let z = project(&Tensor::from_rows(&mixed).unwrap(), get("wo"));
    (Tensor::from_rows(&z).unwrap(), attn)
}

/// Largest off-diagonal row mass of the attention `[heads, n, n]`.
pub fn max_off_diagonal(a: &Tensor) -> f64 {
    let n = a.shape()[1];
    let mut worst: f64 = 0.0;
    for h in 0..a.shape()[0] {
        for i in 0..n {
            let row = &a.data()[(h * n + i) * n..(h * n + i + 1) * n];
            worst = worst.max(row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum());
        }
    }
    worst
}

pub fn softmax_cfg(heads: usize, head_dim: usize) -> AttentionConfig {
    AttentionConfig {
        kernel: Kernel::Softmax,
        heads,
        head_dim,
        ..Default::default()
    }
}

pub fn soft(x: &Tensor, m: &[f64], cfg: &AttentionConfig, store: &ParamStore) -> (Tensor, Tensor) {
    msa::soft_msa(x, m, cfg, store, "a").unwrap()
}
