//! Finite-difference checks of every differentiable component, each at a
//! number of random points. Shared by the `gradcheck` subcommand and the
//! test suites.

use numcore::gradcheck::{grad_check_params, grad_check_report, Coverage, GradReport};
use numcore::{NumError, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::fskd::{self, FskdConfig, ModelConfig, ScaleHeads};
use crate::morph::{self, MorphConfig, MpgNames};
use crate::msa::{self, AttentionConfig, Kernel, MsaNames};
use crate::robust;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub const CHECKS: [&str; 13] = [
    "soft_msa_softmax",
    "soft_msa_rbf",
    "morph_chain",
    "salvit_block",
    "descriptor",
    "l_cls",
    "l_os",
    "align_prob_kl",
    "align_feat_l1",
    "align_feat_l2",
    "align_feat_mmd",
    "align_non_occl_loss",
    "align_recon",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst relative error over all points, inputs and parameters.
    pub max_rel_error: f64,
    pub points: usize,
    pub coordinates: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn to_num(e: Error) -> NumError {
    match e {
        Error::Num(n) => n,
        other => NumError::Invalid(other.to_string()),
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).expect("shape matches data")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Redraws every parameter uniformly in `(-scale, scale)` so that
/// zero-initialized tensors are exercised too.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let t = store.get_mut(&name).expect("listed name");
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

/// A scalar with a generic gradient: a fixed random projection of `v`.
fn project<'g>(v: Var<'g>, weights: &Tensor) -> Result<Var<'g>> {
    let g = v.graph();
    let flat = v.reshape(&[1, v.numel()])?;
    Ok(flat.mul(&g.constant(weights.clone().reshape(&[1, v.numel()])?))?.sum())
}

/// A differentiable scalar of some inputs and parameters.
trait Case {
    fn inputs(&self) -> &[Tensor];
    fn store(&self) -> &ParamStore;
    fn eval<'g>(&self, v: &[Var<'g>], store: &ParamStore) -> Result<Var<'g>>;
}

fn check_case(c: &impl Case, cov: Coverage) -> Result<Vec<GradReport>> {
    let mut out = vec![grad_check_report(|_g, v| c.eval(v, c.store()).map_err(to_num), c.inputs(), STEP, Coverage::All)?];
    if !c.store().is_empty() {
        out.push(grad_check_params(
            c.store(),
            |g, s| {
                let v: Vec<Var<'_>> = c.inputs().iter().map(|t| g.constant(t.clone())).collect();
                c.eval(&v, s).map_err(to_num)
            },
            STEP,
            cov,
        )?);
    }
    Ok(out)
}

struct Msa {
    cfg: AttentionConfig,
    store: ParamStore,
    names: MsaNames,
    inputs: Vec<Tensor>,
    w: Tensor,
}

impl Msa {
    fn new(rng: &mut ChaCha8Rng, kernel: Kernel) -> Self {
        let (l, d) = (2, 5);
        let cfg = AttentionConfig {
            kernel,
            heads: 2,
            head_dim: 3,
            j: 2.0,
            use_pe: true,
            ..AttentionConfig::default()
        };
        let mut store = ParamStore::new();
        msa::init_params(&mut store, rng, "a", d, l, &cfg, false);
        randomize(&mut store, rng, 0.8);
        let inputs = vec![randn(rng, &[l * l, d], 1.0), uniform(rng, &[l * l], 0.1, 0.95)];
        let w = randn(rng, &[l * l * d], 1.0);
        Self { cfg, store, names: MsaNames::new("a"), inputs, w }
    }
}

impl Case for Msa {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn eval<'g>(&self, v: &[Var<'g>], store: &ParamStore) -> Result<Var<'g>> {
        project(msa::soft_msa_var(v[0], v[1], &self.cfg, store, &self.names)?.z, &self.w)
    }
}

/// SEM -> MPG -> MCM, plus the regularizer on the exponent.
struct MorphChain {
    cfg: MorphConfig,
    patch: usize,
    store: ParamStore,
    names: MpgNames,
    inputs: Vec<Tensor>,
    w: Tensor,
}

impl MorphChain {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let (patch, side, d) = (4, 8, 3);
        let cfg = MorphConfig { d_e: 4, hidden: 5, ..MorphConfig::default() };
        let n = (side / patch) * (side / patch);
        let mut store = ParamStore::new();
        morph::init_sem(&mut store, rng, patch, cfg.d_e);
        morph::init_mpg(&mut store, rng, "mpg", d, &cfg);
        randomize(&mut store, rng, 0.5);
        let inputs = vec![
            uniform(rng, &[1, side, side, 4], 0.0, 1.0),
            randn(rng, &[n, d], 1.0),
            uniform(rng, &[n], 0.05, 1.0),
        ];
        let w = randn(rng, &[n], 1.0);
        Self { cfg, patch, store, names: MpgNames::new("mpg"), inputs, w }
    }
}

impl Case for MorphChain {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn eval<'g>(&self, v: &[Var<'g>], store: &ParamStore) -> Result<Var<'g>> {
        let f_sal = morph::sem_embed_var(v[0], store, self.patch)?;
        let theta = morph::mpg_theta_var(v[1], f_sal, store, &self.names)?;
        let (m, tt) = morph::mcm_power_var(v[2], theta, &self.cfg)?;
        Ok(project(m, &self.w)?.add(&morph::morph_reg_var(tt, &self.cfg))?)
    }
}

struct Block {
    attn: AttentionConfig,
    store: ParamStore,
    inputs: Vec<Tensor>,
    w: Tensor,
}

impl Block {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let (l, d) = (2, 6);
        let attn = AttentionConfig { heads: 2, head_dim: 3, ..AttentionConfig::default() };
        let mut store = ParamStore::new();
        encoder::init_block(&mut store, rng, "b", d, l, 7, &attn);
        randomize(&mut store, rng, 0.5);
        let inputs = vec![randn(rng, &[l * l, d], 1.0), uniform(rng, &[l * l], 0.1, 0.95)];
        let w = randn(rng, &[l * l * d], 1.0);
        Self { attn, store, inputs, w }
    }
}

impl Case for Block {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn eval<'g>(&self, v: &[Var<'g>], store: &ParamStore) -> Result<Var<'g>> {
        project(encoder::salvit_block_var(v[0], v[1], &self.attn, store, "b")?.0, &self.w)
    }
}

struct Descriptor {
    cfg: ModelConfig,
    store: ParamStore,
    inputs: Vec<Tensor>,
    w: Tensor,
}

impl Descriptor {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                image: 16,
                patch: 4,
                d_raw: 3,
                d_vit: 2,
                ..EncoderConfig::default()
            },
            fskd: FskdConfig {
                scales: vec![2],
                desc_dim: 3,
                desc_convs: 1,
                ..FskdConfig::default()
            },
        };
        let mut store = ParamStore::new();
        fskd::init_head_params(&mut store, rng, &cfg);
        let keep: Vec<String> = store.names().filter(|n| n.starts_with("desc.")).cloned().collect();
        let mut desc = ParamStore::new();
        for n in keep {
            desc.insert(&n, store.get(&n).expect("listed name").clone());
        }
        randomize(&mut desc, rng, 0.5);
        let l = cfg.encoder.grid();
        let inputs = vec![randn(rng, &[2, l, l, cfg.encoder.out_dim()], 1.0)];
        let w = randn(rng, &[2 * cfg.descriptor_len()], 1.0);
        Self { cfg, store: desc, inputs, w }
    }
}

impl Case for Descriptor {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn eval<'g>(&self, v: &[Var<'g>], store: &ParamStore) -> Result<Var<'g>> {
        project(fskd::descriptor_var(v[0], store, &self.cfg)?, &self.w)
    }
}

const LOSS_SCALES: [usize; 2] = [2, 3];
const LOSS_L0: f64 = 12.0;
const LOSS_DV: usize = 2;
const LOSS_EPS: f64 = 1e-6;

/// Raw head outputs for `rows` descriptors: per scale logits, pre-tanh
/// offsets and latent covariances.
fn head_inputs(rng: &mut ChaCha8Rng, rows: usize) -> Vec<Tensor> {
    LOSS_SCALES
        .iter()
        .flat_map(|&s| {
            let n = s * s;
            vec![
                randn(rng, &[rows, n], 1.5),
                randn(rng, &[rows, 2 * n], 1.0),
                randn(rng, &[rows, 2 * LOSS_DV * n], 1.0),
            ]
        })
        .collect()
}

fn heads<'g>(v: &[Var<'g>]) -> Vec<ScaleHeads<'g>> {
    LOSS_SCALES
        .iter()
        .enumerate()
        .map(|(i, &s)| ScaleHeads {
            s,
            logits: v[3 * i],
            offsets: v[3 * i + 1].tanh(),
            latent: v[3 * i + 2],
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
enum LossKind {
    Cls,
    Os,
    Ms,
}

struct Loss {
    kind: LossKind,
    targets: Vec<Option<[f64; 2]>>,
    inputs: Vec<Tensor>,
    store: ParamStore,
}

impl Loss {
    fn new(rng: &mut ChaCha8Rng, kind: LossKind) -> Self {
        let targets = vec![
            Some([rng.gen_range(0.0..LOSS_L0), rng.gen_range(0.0..LOSS_L0)]),
            None,
            Some([rng.gen_range(0.0..LOSS_L0), rng.gen_range(0.0..LOSS_L0)]),
        ];
        Self {
            kind,
            inputs: head_inputs(rng, targets.len()),
            targets,
            store: ParamStore::new(),
        }
    }
}

impl Case for Loss {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn eval<'g>(&self, v: &[Var<'g>], _: &ParamStore) -> Result<Var<'g>> {
        let per_scale = fskd::losses_var(&heads(v), &self.targets, LOSS_L0, LOSS_DV, LOSS_EPS)?;
        if self.kind == LossKind::Ms {
            return fskd::multiscale_loss(&per_scale);
        }
        let mut total: Option<Var<'g>> = None;
        for (cls, os) in per_scale {
            let term = if self.kind == LossKind::Cls { cls } else { os };
            total = Some(match total {
                None => term,
                Some(t) => t.add(&term)?,
            });
        }
        Ok(total.expect("two scales"))
    }
}

/// Clean and occluded views of the same heads.
struct ProbKl {
    inputs: Vec<Tensor>,
    store: ParamStore,
}

impl Case for ProbKl {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn eval<'g>(&self, v: &[Var<'g>], _: &ParamStore) -> Result<Var<'g>> {
        let half = v.len() / 2;
        robust::prob_kl_var(&heads(&v[..half]), &heads(&v[half..]), false)
    }
}

#[derive(Clone, Copy)]
enum FeatKind {
    L1,
    L2,
    Mmd,
}

struct Feat {
    kind: FeatKind,
    tokens: usize,
    inputs: Vec<Tensor>,
    store: ParamStore,
}

impl Case for Feat {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn eval<'g>(&self, v: &[Var<'g>], _: &ParamStore) -> Result<Var<'g>> {
        match self.kind {
            FeatKind::L1 => robust::feat_dist_var(v[0], v[1], false),
            FeatKind::L2 => robust::feat_dist_var(v[0], v[1], true),
            FeatKind::Mmd => robust::feat_mmd_var(v[0], v[1], self.tokens),
        }
    }
}

struct Recon {
    rows: Vec<usize>,
    targets: Vec<Vec<f64>>,
    inputs: Vec<Tensor>,
    store: ParamStore,
}

impl Recon {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let (patch, d, n) = (2, 5, 6);
        let mut store = ParamStore::new();
        robust::init_recon(&mut store, rng, d, patch);
        randomize(&mut store, rng, 0.5);
        let rows = vec![1, 4, 5];
        let targets = rows.iter().map(|_| (0..patch * patch * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        Self {
            rows,
            targets,
            inputs: vec![randn(rng, &[n, d], 1.0)],
            store,
        }
    }
}

impl Case for Recon {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn eval<'g>(&self, v: &[Var<'g>], store: &ParamStore) -> Result<Var<'g>> {
        robust::recon_var(v[0], &self.rows, &self.targets, store)
    }
}

fn one_point(name: &str, rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let all = Coverage::All;
    match name {
        "soft_msa_softmax" => check_case(&Msa::new(rng, Kernel::Softmax), all),
        "soft_msa_rbf" => check_case(&Msa::new(rng, Kernel::Rbf), all),
        "morph_chain" => check_case(&MorphChain::new(rng), Coverage::Strided(24)),
        "salvit_block" => check_case(&Block::new(rng), all),
        "descriptor" => check_case(&Descriptor::new(rng), Coverage::Strided(40)),
        "l_cls" => check_case(&Loss::new(rng, LossKind::Cls), all),
        "l_os" => check_case(&Loss::new(rng, LossKind::Os), all),
        "align_non_occl_loss" => check_case(&Loss::new(rng, LossKind::Ms), all),
        "align_prob_kl" => {
            let mut inputs = head_inputs(rng, 3);
            inputs.extend(head_inputs(rng, 3));
            check_case(&ProbKl { inputs, store: ParamStore::new() }, all)
        }
        "align_feat_l1" | "align_feat_l2" | "align_feat_mmd" => {
            let kind = match name {
                "align_feat_l1" => FeatKind::L1,
                "align_feat_l2" => FeatKind::L2,
                _ => FeatKind::Mmd,
            };
            let case = Feat {
                kind,
                tokens: 4,
                inputs: vec![randn(rng, &[8, 3], 1.0), randn(rng, &[8, 3], 1.0)],
                store: ParamStore::new(),
            };
            check_case(&case, all)
        }
        "align_recon" => check_case(&Recon::new(rng), all),
        other => Err(Error::Config(format!("unknown gradient check '{other}'"))),
    }
}

/// Runs check `name` at `points` random points drawn from `seed`.
pub fn run(name: &str, seed: u64, points: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CheckOutcome {
        name: name.to_string(),
        max_rel_error: 0.0,
        points,
        coordinates: 0,
    };
    for _ in 0..points {
        for r in one_point(name, &mut rng)? {
            out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
            out.coordinates += r.checked;
        }
    }
    Ok(out)
}

pub fn run_all(seed: u64, points: usize) -> Result<Vec<CheckOutcome>> {
    CHECKS.iter().map(|c| run(c, seed, points)).collect()
}
