//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Numeric arguments select criteria, e.g.
//! `cargo test -p salvit --test acceptance -- 1 5 7`.

mod common;

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use numcore::optim::Adam;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salvit::encoder::Ablation;
use salvit::episodes::config::RunConfig;
use salvit::episodes::data::Dataset;
use salvit::episodes::eval::{self, EvalOptions};
use salvit::episodes::experiments::{self, VariantSummary};
use salvit::episodes::metrics::{mean_std, pck, MetricsLog};
use salvit::episodes::sample::{sample_episode, EpisodeSpec, SpeciesSplit};
use salvit::episodes::train::{init_model, prepare_episode, train_step, Prepared};
use salvit::fskd::{self, Model, ScaleMap, ScaleVote};
use salvit::gradsuite;
use salvit::morph::{self, MorphConfig};
use salvit::msa::{self, AttentionConfig, Kernel};
use salvit::transduce::{self, Method};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(t: Instant, limit: Duration, o: Outcome) -> Outcome {
    let took = t.elapsed();
    let detail = format!("{}; {:.1?} (limit {:?})", o.detail, took, limit);
    outcome(o.pass && took < limit, detail)
}

fn benchmark() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.conf");
    RunConfig::load(&path).expect("configs/benchmark.conf")
}

fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| Dataset::generate(benchmark().data_config()).unwrap())
}

fn split(cfg: &RunConfig) -> SpeciesSplit {
    SpeciesSplit::new(cfg.data.species, cfg.unseen.clone()).unwrap()
}

// Criteria 1-3: masked attention limits.

fn random_attention(r: &mut ChaCha8Rng, kernel: Kernel, use_pe: bool, j: f64) -> (AttentionConfig, numcore::Tensor, numcore::ParamStore) {
    let cfg = AttentionConfig {
        kernel,
        use_pe,
        j,
        heads: 2,
        head_dim: 4,
        ..Default::default()
    };
    let l = 3;
    let store = attention_store(r, "a", 8, l, &cfg);
    (cfg, uniform(r, &[l * l, 8], 1.0), store)
}

fn vanilla_recovery() -> Outcome {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for draw in 0..20 {
        let kernel = if draw % 2 == 0 { Kernel::Softmax } else { Kernel::Rbf };
        let j = r.gen_range(0.0..100.0);
        let (cfg, x, store) = random_attention(&mut r, kernel, draw % 4 < 2, j);
        let (z, a) = soft(&x, &[1.0; 9], &cfg, &store);
        let (z0, a0) = vanilla_sa(&x, &cfg, &store, "a");
        worst = worst.max(z.max_abs_diff(&z0));
        for (v, w) in a.data().iter().zip(a0.iter().flatten().flatten()) {
            worst = worst.max((v - w).abs());
        }
    }
    outcome(worst <= 1e-12, format!("max |soft(m=1) - vanilla| = {worst:.2e} over 20 draws"))
}

fn identity_limit() -> Outcome {
    let mut r = rng(102);
    let js = [0.0, 1.0, 10.0, 100.0, 1e4];
    let mut monotone = true;
    let mut last_mass: f64 = 0.0;
    for _ in 0..10 {
        let mut prev = f64::INFINITY;
        let seed: u64 = r.gen();
        for &j in &js {
            let (cfg, x, store) = random_attention(&mut rng(seed), Kernel::Softmax, true, j);
            let (_, a) = soft(&x, &[0.0; 9], &cfg, &store);
            let mass = max_off_diagonal(&a);
            monotone &= mass <= prev;
            prev = mass;
        }
        last_mass = last_mass.max(prev);
    }
    outcome(
        monotone && last_mass < 1e-3,
        format!("off-diagonal mass at J=1e4 {last_mass:.2e}, non-increasing in J: {monotone}"),
    )
}

fn hard_mask_oracle() -> Outcome {
    let mut r = rng(103);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let use_pe = r.gen_bool(0.5);
        let (cfg, x, store) = random_attention(&mut r, Kernel::Softmax, use_pe, 1e4);
        let mut m: Vec<f64> = (0..9).map(|_| f64::from(u8::from(r.gen_bool(0.5)))).collect();
        m[r.gen_range(0..9)] = 1.0;
        let (z, _) = soft(&x, &m, &cfg, &store);
        let hard = msa::hard_msa_oracle(&x, &m, &cfg, &store, "a").unwrap();
        worst = worst.max(z.max_abs_diff(&hard));
    }
    outcome(worst <= 1e-3, format!("max |soft(J=1e4) - hard| = {worst:.2e} over 50 cases"))
}

// Criterion 4.

fn gradient_suite() -> Outcome {
    let results = gradsuite::run_all(4, 10).unwrap();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {:.2e}", r.name, r.max_rel_error))
        .collect();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    outcome(
        failed.is_empty(),
        format!("{} checks, worst relative error {worst:.2e}; failed: {failed:?}", results.len()),
    )
}

// Criterion 5.

fn round_trip() -> Outcome {
    const DV: usize = 4;
    let l0 = 384.0;
    let q: Vec<f64> = (0..2 * DV).map(|i| if i < DV || i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let mut r = rng(105);
    let mut worst: f64 = 0.0;
    for &s in &[4usize, 8, 12, 16, 24] {
        for _ in 0..200 {
            let x = [r.gen_range(0.0..l0), r.gen_range(0.0..l0)];
            let (g, o) = fskd::encode_target(x, s, l0);
            let cell = g[1] * s + g[0];
            let mut probs = vec![0.1 / (s * s - 1) as f64; s * s];
            probs[cell] = 0.9;
            let mut offsets = vec![0.0; 2 * s * s];
            offsets[2 * cell..2 * cell + 2].copy_from_slice(&o);
            let map = ScaleMap {
                s,
                probs,
                offsets,
                latent: q.iter().cycle().take(2 * DV * s * s).copied().collect(),
            };
            let p = fskd::decode(&vec![map], l0, DV, 1e-6);
            worst = worst.max((p.x[0] - x[0]).abs()).max((p.x[1] - x[1]).abs());
        }
    }
    let vote = ScaleVote {
        s: 12,
        g: [3, 5],
        o: [0.0, 0.0],
        omega: [1.0, 0.0, 0.0, 1.0],
    };
    let p = fskd::decode_votes(&[vote], l0);
    let example = p.x == [112.0, 176.0] && p.sigma == [256.0, 0.0, 0.0, 256.0];
    outcome(
        worst <= 1e-9 && example,
        format!("round-trip error {worst:.2e}; example x={:?} sigma={:?}", p.x, p.sigma),
    )
}

// Criterion 6.

fn morphology() -> Outcome {
    let cfg = MorphConfig::default();
    let mut r = rng(106);
    let mut bounded = true;
    for _ in 0..100_000 {
        let theta = r.gen_range(-50.0..50.0) * r.gen::<f64>().powi(3);
        let (_, tt) = morph::mcm_power(&[0.5], theta, &cfg).unwrap();
        bounded &= (0.0..=cfg.rho1).contains(&tt);
    }
    for theta in [f64::MAX, f64::MIN, 1e300, -1e300] {
        let (_, tt) = morph::mcm_power(&[0.5], theta, &cfg).unwrap();
        bounded &= (0.0..=cfg.rho1).contains(&tt);
    }
    let half = cfg.rho3.sqrt();
    let boundary = morph::morph_reg(cfg.rho2 + half, &cfg) == 0.0
        && morph::morph_reg(cfg.rho2 - half, &cfg) == 0.0
        && morph::morph_reg(cfg.rho2 + half + 1e-6, &cfg) > 0.0
        && morph::morph_reg(cfg.rho2 - half - 1e-6, &cfg) > 0.0;
    let mut monotone = true;
    for _ in 0..1000 {
        let m: Vec<f64> = (0..36).map(|_| r.gen::<f64>()).collect();
        let (a, ta) = morph::mcm_power(&m, r.gen_range(-6.0..6.0), &cfg).unwrap();
        let (b, tb) = morph::mcm_power(&m, r.gen_range(-6.0..6.0), &cfg).unwrap();
        for i in 0..m.len() {
            // Larger exponents erode: pointwise non-increasing in theta~.
            if ta <= tb {
                monotone &= a[i] >= b[i];
            }
            if ta < 1.0 {
                monotone &= a[i] >= m[i];
            }
            if ta > 1.0 {
                monotone &= a[i] <= m[i];
            }
        }
    }
    outcome(
        bounded && boundary && monotone,
        format!("theta~ bounded: {bounded}; dead-zone boundary exact: {boundary}; dilation/erosion monotone: {monotone}"),
    )
}

// Criterion 7.

fn transductive_algebra() -> Outcome {
    let mut r = rng(107);
    let vecs = |r: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..6).map(|_| r.gen_range(-2.0..2.0)).collect()).collect() };
    let mut bitwise = true;
    let mut simplex = true;
    for _ in 0..100 {
        let skrs: Vec<Vec<Vec<f64>>> = (0..3).map(|_| vecs(&mut r, 2)).collect();
        let protos: Vec<Vec<f64>> = skrs.iter().map(|s| fskd::prototypes(&[s.clone()]).unwrap().remove(0).1).collect();
        let selected: Vec<Vec<Vec<f64>>> = (0..3).map(|_| vecs(&mut r, 4)).collect();
        let refined = transduce::refine(&protos, &skrs, &selected, 1.0, 0.5, r.gen()).unwrap();
        bitwise &= refined == protos;
        let phi = vecs(&mut r, 1).remove(0);
        let p = transduce::assign_prob(&phi, &protos, r.gen_range(0.01..3.0)).unwrap();
        simplex &= p.iter().all(|v| (0.0..=1.0).contains(v)) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-12;
    }
    let c = transduce::refine(&[vec![0.0, 0.0]], &[vec![vec![0.0, 0.0]]], &[vec![vec![1.0, 0.0]]], 0.8, 0.05, false).unwrap();
    let example = (c[0][0] - 0.2).abs() < 1e-15 && c[0][1] == 0.0;
    outcome(
        bitwise && simplex && example,
        format!("kappa=1 bitwise: {bitwise}; simplex: {simplex}; worked example c* = {:?}", c[0]),
    )
}

// Criterion 8.

fn overfit() -> Outcome {
    let cfg = benchmark();
    let data = dataset();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let ep = sample_episode(data, &split(&cfg), &EpisodeSpec::train(1, 1, false), &mut r).unwrap();
    let (s, q) = prepare_episode(data, &ep).unwrap();
    let mut model = init_model(&cfg).unwrap();
    let mut opt = Adam::new(cfg.train.lr);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(0);
    let mut best = (0.0, f64::INFINITY, 0);
    for step in 0..2000 {
        let st = train_step(&mut model, &mut opt, &s, &q, &cfg, &mut mask_rng, step).unwrap();
        if step % 50 == 49 {
            let acc = episode_pck(&model, &s, &q);
            let l_ms = st.l_ms;
            if acc == 100.0 && l_ms < 0.05 {
                return outcome(true, format!("PCK 100% and L_ms {l_ms:.4} after {} steps", step + 1));
            }
            if acc > best.0 || (acc == best.0 && l_ms < best.1) {
                best = (acc, l_ms, step + 1);
            }
        }
    }
    outcome(false, format!("best PCK {:.1}% with L_ms {:.4} at step {}", best.0, best.1, best.2))
}

fn episode_pck(model: &Model, s: &[Prepared], q: &[Prepared]) -> f64 {
    let si: Vec<_> = s.iter().map(Prepared::input).collect();
    let sk: Vec<_> = s.iter().map(|p| p.keypoints.clone()).collect();
    let qi: Vec<_> = q.iter().map(Prepared::input).collect();
    let (types, dets) = fskd::detect_episode(model, &si, &sk, &qi).unwrap();
    let mut flags = Vec::new();
    for (qn, query) in q.iter().enumerate() {
        for (ti, &t) in types.iter().enumerate() {
            let gt = query.keypoints[t];
            if gt.visible {
                flags.push(pck(dets[qn * types.len() + ti].prediction.x, gt.x, query.box_size(), 0.1));
            }
        }
    }
    100.0 * flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

// Criteria 9-12 share trained models.

struct Trained {
    summary: VariantSummary,
    models: Vec<Model>,
    minutes_per_variant: f64,
}

fn train_variant(cfg: &RunConfig, name: &str) -> Trained {
    let t = Instant::now();
    let mut log = MetricsLog::memory(&cfg.run_id(), "acceptance");
    let mut models = Vec::new();
    let mut pcks = Vec::new();
    for &seed in &SEEDS {
        let mut c = cfg.clone();
        c.seed = seed;
        let (model, p) = experiments::train_and_eval(&c, dataset(), name, &mut log).unwrap();
        eprintln!("  {name} seed {seed}: novel PCK {p:.2} ({:.1?})", t.elapsed());
        models.push(model);
        pcks.push(p);
    }
    Trained {
        summary: VariantSummary::new(name, SEEDS.to_vec(), pcks),
        models,
        minutes_per_variant: t.elapsed().as_secs_f64() / 60.0,
    }
}

fn variant(v: Ablation) -> &'static Trained {
    static FULL: OnceLock<Trained> = OnceLock::new();
    static VIT: OnceLock<Trained> = OnceLock::new();
    static CNN: OnceLock<Trained> = OnceLock::new();
    static NO_ML: OnceLock<Trained> = OnceLock::new();
    let cell = match v {
        Ablation::Full => &FULL,
        Ablation::VanillaVit => &VIT,
        Ablation::CnnOnly => &CNN,
        Ablation::NoMl => &NO_ML,
        other => panic!("no cached runs for {}", other.name()),
    };
    cell.get_or_init(|| {
        let mut cfg = benchmark();
        cfg.model.encoder.ablation = v;
        train_variant(&cfg, v.name())
    })
}

fn describe(t: &Trained) -> String {
    format!("{} {:.2} ± {:.2}", t.summary.variant, t.summary.mean, t.summary.std)
}

fn ablation() -> Outcome {
    let full = variant(Ablation::Full);
    let others: Vec<&Trained> = [Ablation::VanillaVit, Ablation::CnnOnly, Ablation::NoMl].into_iter().map(variant).collect();
    let beats = |o: &Trained| {
        let sigma = full.summary.std.max(o.summary.std);
        full.summary.mean - o.summary.mean > sigma
    };
    let best_baseline = if others[0].summary.mean >= others[1].summary.mean { others[0] } else { others[1] };
    let pass = beats(best_baseline) && beats(others[2]);
    let slowest = std::iter::once(full).chain(others.iter().copied()).map(|t| t.minutes_per_variant).fold(0.0, f64::max);
    outcome(
        pass && slowest < 30.0,
        format!(
            "{}; {}; {}; {}; slowest variant {slowest:.1} min",
            describe(full),
            describe(others[0]),
            describe(others[1]),
            describe(others[2])
        ),
    )
}

fn transductive() -> Outcome {
    let t = Instant::now();
    let full = variant(Ablation::Full);
    let mut cfg = benchmark();
    cfg.transduce.z = 20;
    cfg.transduce.w = 2;
    cfg.transduce.eta = 10;
    let mut per_method: Vec<Vec<f64>> = vec![Vec::new(); Method::ALL.len()];
    for model in &full.models {
        let res = eval::evaluate_transductive(model, dataset(), &split(&cfg), &EvalOptions::from_config(&cfg), &cfg.transduce).unwrap();
        for (m, p) in res {
            per_method[Method::ALL.iter().position(|x| *x == m).unwrap()].push(p);
        }
    }
    let stats: Vec<(f64, f64)> = per_method.iter().map(|p| mean_std(p)).collect();
    let [ind, avg, soft, oracle] = [stats[0], stats[1], stats[2], stats[3]];
    let sigma = ind.1;
    let pass = oracle.0 >= soft.0 && soft.0 >= avg.0 && avg.0 >= ind.0 - sigma;
    let o = outcome(
        pass,
        format!(
            "gt_oracle {:.2}, soft {:.2}, avg {:.2}, inductive {:.2} (sigma {:.2})",
            oracle.0, soft.0, avg.0, ind.0, sigma
        ),
    );
    within(t, Duration::from_secs(600), o)
}

fn occlusion() -> Outcome {
    let t = Instant::now();
    let plain = variant(Ablation::Full);
    let mut cfg = benchmark();
    cfg.apply("maa.mask_rgb = true\nmaa.mask_sal = true\nmaa.align = prob_kl\n").unwrap();
    let maa = train_variant(&cfg, "maa");
    let sweep = |models: &[Model]| -> (Vec<f64>, Vec<f64>) {
        let mut at0 = Vec::new();
        let mut at1 = Vec::new();
        for m in models {
            let r = eval::occlusion_sweep(m, dataset(), &split(&cfg), &EvalOptions::from_config(&cfg), &cfg.occlusion, &[0.0, 1.0]).unwrap();
            at0.push(r[0].1);
            at1.push(r[1].1);
        }
        (at0, at1)
    };
    let (p0, p1) = sweep(&plain.models);
    let (m0, m1) = sweep(&maa.models);
    let ((p0m, p0s), (p1m, p1s), (m0m, m0s), (m1m, m1s)) = (mean_std(&p0), mean_std(&p1), mean_std(&m0), mean_std(&m1));
    let severe = m1m - p1m > p1s.max(m1s);
    let tie = (m0m - p0m).abs() <= p0s.max(m0s);
    let o = outcome(
        severe && tie,
        format!(
            "100% occlusion: maa {m1m:.2} ± {m1s:.2} vs plain {p1m:.2} ± {p1s:.2}; 0%: maa {m0m:.2} ± {m0s:.2} vs plain {p0m:.2} ± {p0s:.2}; maa training {:.1} min",
            maa.minutes_per_variant
        ),
    );
    within(t, Duration::from_secs(40 * 60), o)
}

fn saliency_failure() -> Outcome {
    let t = Instant::now();
    let cfg = benchmark();
    let model = &variant(Ablation::Full).models[0];
    let thresholds: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let rows = eval::failure_sweep(model, dataset(), &split(&cfg), &EvalOptions::from_config(&cfg), &thresholds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("saliency_failure.csv");
    eval::write_failure_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    let header = lines.next() == Some("mode,threshold,mean_iou,pck");
    let parsed: Vec<(String, f64, f64, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    let finite = parsed.iter().all(|r| r.1.is_finite() && r.2.is_finite() && r.3.is_finite() && (0.0..=100.0).contains(&r.3));
    let ts: Vec<f64> = parsed.iter().filter(|r| r.0 == "threshold").map(|r| r.1).collect();
    let monotone = ts.len() == thresholds.len() && ts.windows(2).all(|w| w[0] < w[1]);
    let reversed = parsed.iter().filter(|r| r.0 == "reverse").count() == 1;
    let summary: Vec<String> = parsed.iter().map(|r| format!("{}@{}:{:.1}", r.0, r.1, r.3)).collect();
    let o = outcome(
        header && finite && monotone && reversed,
        format!("{} rows, header ok {header}, finite {finite}, thresholds ascending {monotone}; {}", parsed.len(), summary.join(" ")),
    );
    within(t, Duration::from_secs(600), o)
}

type Criterion = (usize, &'static str, Option<Duration>, fn() -> Outcome);

const CRITERIA: [Criterion; 12] = [
    (1, "vanilla recovery", Some(Duration::from_secs(5)), vanilla_recovery),
    (2, "identity limit", Some(Duration::from_secs(5)), identity_limit),
    (3, "hard-mask oracle", Some(Duration::from_secs(10)), hard_mask_oracle),
    (4, "gradient suite", Some(Duration::from_secs(120)), gradient_suite),
    (5, "decode/encode round trip", Some(Duration::from_secs(1)), round_trip),
    (6, "morphology", Some(Duration::from_secs(5)), morphology),
    (7, "transductive algebra", Some(Duration::from_secs(1)), transductive_algebra),
    (8, "end-to-end overfit", Some(Duration::from_secs(600)), overfit),
    (9, "encoder ablation ordering", None, ablation),
    (10, "transductive refinement ordering", None, transductive),
    (11, "occlusion robustness", None, occlusion),
    (12, "saliency-failure sweep", None, saliency_failure),
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, limit, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        eprintln!("criterion {id} ({name}): running");
        let t = Instant::now();
        let mut o = run();
        if let Some(limit) = limit {
            o = within(t, limit, o);
        }
        println!("criterion {id:>2} {:4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
