use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use salvit::encoder::Ablation;
use salvit::episodes::config::RunConfig;
use salvit::episodes::data::Dataset;
use salvit::episodes::eval::{self, EvalOptions};
use salvit::episodes::experiments;
use salvit::episodes::metrics::MetricsLog;
use salvit::episodes::persistence;
use salvit::episodes::sample::SpeciesSplit;
use salvit::episodes::train;
use salvit::fskd::Model;
use salvit::gradsuite;

#[derive(Parser)]
#[command(name = "salvit", version, about = "Saliency-guided ViT few-shot keypoint detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Line-based `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; metrics are appended to `<out>/metrics.csv`.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct FromCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Defaults to `<out>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Export the synthetic dataset as PPM images, saliency files and CSVs.
    GenData(Common),
    /// Train on seen species and base keypoints; writes `model.ckpt`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "salvit")]
        variant: String,
    },
    /// Inductive evaluation on the unseen species.
    Eval {
        #[command(flatten)]
        ck: FromCheckpoint,
        /// Write per-keypoint predictions to `<out>/predictions.csv`.
        #[arg(long)]
        predictions: bool,
    },
    /// Compare inductive, averaged, soft-assignment and oracle refinement.
    Transduce(FromCheckpoint),
    /// PCK under test-time occlusion, or the saliency-failure sweep.
    OccludeEval {
        #[command(flatten)]
        ck: FromCheckpoint,
        /// Occlusion probabilities to evaluate.
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
        levels: Vec<f64>,
        /// Run the thresholding/reversal sweep instead, writing
        /// `<out>/saliency_failure.csv`.
        #[arg(long)]
        saliency_failure: bool,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        thresholds: Vec<f64>,
    },
    /// Finite-difference gradient checks of every differentiable component.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        points: usize,
        /// Restrict to these checks.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Train and evaluate encoder variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "full,vanilla_vit,cnn_only,no_ml")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metrics(c: &Common, cfg: &RunConfig, sub: &str) -> Result<MetricsLog> {
    Ok(MetricsLog::append(&c.out.join("metrics.csv"), &cfg.run_id(), sub)?)
}

/// Model and configuration from a checkpoint. Settings from `--config`
/// apply on top, except the architecture, which the checkpoint fixes.
fn load_model(ck: &FromCheckpoint) -> Result<(Model, RunConfig)> {
    let path = ck.checkpoint.clone().unwrap_or_else(|| ck.common.out.join("model.ckpt"));
    let (model, mut cfg) = persistence::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(p) = &ck.common.config {
        cfg.apply(&std::fs::read_to_string(p)?)?;
        if cfg.model != model.cfg {
            log::warn!("architecture keys in {} ignored; using the checkpoint's", p.display());
            cfg.model = model.cfg.clone();
        }
    }
    if let Some(s) = ck.common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok((model, cfg))
}

fn split(cfg: &RunConfig) -> Result<SpeciesSplit> {
    Ok(SpeciesSplit::new(cfg.data.species, cfg.unseen.clone())?)
}

fn write_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), format!("# run {}\n{}", cfg.hash(), cfg.to_text()))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let data = Dataset::generate(cfg.data_config())?;
            let dir = c.out.join("data");
            data.export(&dir)?;
            println!("wrote {} images to {}", data.len(), dir.display());
        }
        Command::Train { common, variant } => {
            let cfg = load_config(&common)?;
            write_config(&common.out, &cfg)?;
            let data = Dataset::generate(cfg.data_config())?;
            let mut log = metrics(&common, &cfg, "train")?;
            let out = train::train(&cfg, &data, &variant, &mut log)?;
            let path = common.out.join("model.ckpt");
            persistence::save(&path, &out.model, &cfg, out.steps)?;
            println!("trained {} episodes, final loss {:.4}; checkpoint {}", out.steps, out.last.loss, path.display());
        }
        Command::Eval { ck, predictions } => {
            let (model, cfg) = load_model(&ck)?;
            let data = Dataset::generate(cfg.data_config())?;
            let r = eval::evaluate(&model, &data, &split(&cfg)?, &EvalOptions::from_config(&cfg))?;
            let mut log = metrics(&ck.common, &cfg, "eval")?;
            log.log("inductive", cfg.seed, 0, "pck", r.pck)?;
            log.log("inductive", cfg.seed, 0, "ne", r.ne)?;
            for (id, (ok, n)) in &r.per_type {
                log.log("inductive", cfg.seed, 0, &format!("pck_kp{id}"), 100.0 * *ok as f64 / *n as f64)?;
            }
            log.flush()?;
            if predictions {
                eval::write_predictions(&ck.common.out.join("predictions.csv"), &r.rows)?;
            }
            println!("PCK@{} {:.2} over {} keypoints, NE {:.4}", cfg.eval.tau, r.pck, r.evaluated, r.ne);
        }
        Command::Transduce(ck) => {
            let (model, cfg) = load_model(&ck)?;
            let data = Dataset::generate(cfg.data_config())?;
            let res = eval::evaluate_transductive(&model, &data, &split(&cfg)?, &EvalOptions::from_config(&cfg), &cfg.transduce)?;
            let mut log = metrics(&ck.common, &cfg, "transduce")?;
            for (m, pck) in &res {
                log.log(m.name(), cfg.seed, 0, "pck", *pck)?;
                println!("{:12} PCK {pck:.2}", m.name());
            }
            log.flush()?;
        }
        Command::OccludeEval {
            ck,
            levels,
            saliency_failure,
            thresholds,
        } => {
            let (model, cfg) = load_model(&ck)?;
            let data = Dataset::generate(cfg.data_config())?;
            let opts = EvalOptions::from_config(&cfg);
            let mut log = metrics(&ck.common, &cfg, "occlude-eval")?;
            if saliency_failure {
                let rows = eval::failure_sweep(&model, &data, &split(&cfg)?, &opts, &thresholds)?;
                let path = ck.common.out.join("saliency_failure.csv");
                eval::write_failure_csv(&path, &rows)?;
                for r in &rows {
                    println!("{:?} {:.2}: IoU {:.3} PCK {:.2}", r.mode, r.threshold, r.mean_iou, r.pck);
                }
                println!("wrote {}", path.display());
            } else {
                for (p, pck) in eval::occlusion_sweep(&model, &data, &split(&cfg)?, &opts, &cfg.occlusion, &levels)? {
                    log.log(cfg.occlusion.kind.name(), cfg.seed, 0, &format!("pck_occ{p}"), pck)?;
                    println!("{} p={p}: PCK {pck:.2}", cfg.occlusion.kind.name());
                }
            }
            log.flush()?;
        }
        Command::Gradcheck { common, points, only } => {
            let cfg = load_config(&common)?;
            let names: Vec<String> = if only.is_empty() {
                gradsuite::CHECKS.iter().map(|s| s.to_string()).collect()
            } else {
                only
            };
            let mut log = metrics(&common, &cfg, "gradcheck")?;
            let mut failed = 0;
            for n in &names {
                let r = gradsuite::run(n, cfg.seed, points)?;
                log.log(n, cfg.seed, 0, "max_rel_error", r.max_rel_error)?;
                println!(
                    "{:22} {:.3e} over {} coordinates  {}",
                    n,
                    r.max_rel_error,
                    r.coordinates,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                failed += usize::from(!r.passed());
            }
            log.flush()?;
            if failed > 0 {
                bail!("{failed} gradient checks above {}", gradsuite::TOLERANCE);
            }
        }
        Command::Ablate { common, variants, seeds } => {
            let cfg = load_config(&common)?;
            write_config(&common.out, &cfg)?;
            let vs = variants
                .iter()
                .map(|v| Ablation::parse(v).with_context(|| format!("unknown variant '{v}'")))
                .collect::<Result<Vec<_>>>()?;
            let data = Dataset::generate(cfg.data_config())?;
            let mut log = metrics(&common, &cfg, "ablate")?;
            let rows = experiments::ablation(&cfg, &data, &vs, &seeds, &mut log, |_, _, _| ())?;
            for r in &rows {
                println!("{:12} PCK {:.2} ± {:.2}  {:?}", r.variant, r.mean, r.std, r.pck);
            }
        }
    }
    Ok(())
}
