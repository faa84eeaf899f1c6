//! Checkpoints carrying the full run configuration, so evaluation rebuilds
//! the architecture without the original config file.

use std::path::Path;

use numcore::checkpoint::Checkpoint;
use numcore::GELU_FORM;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::fskd::Model;

const CONFIG_PREFIX: &str = "cfg.";

pub fn to_checkpoint(model: &Model, cfg: &RunConfig, steps: usize) -> Checkpoint {
    let mut meta = vec![
        ("gelu".to_string(), GELU_FORM.to_string()),
        ("run_hash".to_string(), cfg.hash()),
        ("steps".to_string(), steps.to_string()),
    ];
    let mut stored = cfg.clone();
    stored.model = model.cfg.clone();
    meta.extend(stored.entries().into_iter().map(|(k, v)| (format!("{CONFIG_PREFIX}{k}"), v)));
    Checkpoint {
        meta,
        params: model.params.clone(),
    }
}

pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Model, RunConfig)> {
    if let Some(g) = ck.meta_value("gelu") {
        if g != GELU_FORM {
            return Err(Error::Format(format!("checkpoint GELU form '{g}' differs from '{GELU_FORM}'")));
        }
    }
    let text: String = ck
        .meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(CONFIG_PREFIX).map(|k| format!("{k} = {v}\n")))
        .collect();
    if text.is_empty() {
        return Err(Error::Format("checkpoint has no configuration".into()));
    }
    let cfg = RunConfig::parse(&text)?;
    let model = Model {
        cfg: cfg.model.clone(),
        params: ck.params.clone(),
    };
    Ok((model, cfg))
}

pub fn save(path: &Path, model: &Model, cfg: &RunConfig, steps: usize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(to_checkpoint(model, cfg, steps).save(path)?)
}

pub fn load(path: &Path) -> Result<(Model, RunConfig)> {
    from_checkpoint(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_restores_architecture() {
        let mut cfg = RunConfig::default();
        cfg.apply("encoder.ablation = no_pe\nfskd.scales = 8,12\nencoder.d_vit = 32").unwrap();
        let model = Model::init(cfg.model.clone(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model, &cfg, 5).unwrap();
        let (back, bcfg) = load(&path).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(bcfg, cfg);
        for (name, t) in model.params.iter() {
            assert!(back.params.get(name).unwrap().max_abs_diff(t) < 1e-6);
        }
    }
}
