//! Checkpoint directory: `manifest.json` plus one tensor file per parameter
//! and running statistic, and the PCA model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PcaModel;
use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::ops::norm::RunningStats;
use crate::params::ParamKind;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub name: String,
    pub channels: usize,
    pub mean_file: String,
    pub var_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub network: NetworkConfig,
    /// Full run configuration echo.
    pub config: serde_json::Value,
    pub epoch: usize,
    pub best_miou: f64,
    pub params: Vec<ParamRecord>,
    pub stats: Vec<StatsRecord>,
    pub pca: Option<String>,
}

fn file_name(name: &str, suffix: &str) -> String {
    format!("{}{suffix}.tensor", name.replace(['/', '\\'], "_"))
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &Model,
    pca: Option<&PcaModel>,
    config: serde_json::Value,
    epoch: usize,
    best_miou: f64,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("params"))?;
    let mut params = Vec::new();
    for e in model.store.entries() {
        let file = format!("params/{}", file_name(&e.name, ""));
        e.value.save(dir.join(&file))?;
        params.push(ParamRecord {
            name: e.name.clone(),
            kind: e.kind,
            shape: e.value.shape().to_vec(),
            file,
        });
    }
    let mut stats = Vec::new();
    for (name, s) in model.store.stats_entries() {
        let (mean_file, var_file) = (
            format!("params/{}", file_name(name, ".running_mean")),
            format!("params/{}", file_name(name, ".running_var")),
        );
        s.mean.save(dir.join(&mean_file))?;
        s.var.save(dir.join(&var_file))?;
        stats.push(StatsRecord {
            name: name.clone(),
            channels: s.mean.len(),
            mean_file,
            var_file,
        });
    }
    let pca_file = match pca {
        Some(p) => {
            fs::write(dir.join("pca.json"), serde_json::to_string_pretty(p)?)?;
            Some("pca.json".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        network: model.net.cfg.clone(),
        config,
        epoch,
        best_miou,
        params,
        stats,
        pca: pca_file,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(dir.as_ref().join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuilds the network from the manifest, audits every name and shape
/// against it, then loads the stored values.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, Option<PcaModel>, Manifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(manifest.network.clone(), 0)?;
    let mismatch = |msg: String| Error::precondition("load_checkpoint", msg);
    if manifest.params.len() != model.store.len() {
        return Err(mismatch(format!(
            "checkpoint has {} parameters, configuration builds {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    for (rec, e) in manifest.params.iter().zip(model.store.entries()) {
        if rec.name != e.name || rec.shape != e.value.shape() || rec.kind != e.kind {
            return Err(mismatch(format!(
                "parameter `{}` {:?} does not match `{}` {:?}",
                rec.name,
                rec.shape,
                e.name,
                e.value.shape()
            )));
        }
    }
    if manifest.stats.len() != model.store.stats_entries().len() {
        return Err(mismatch("running statistics count differs".into()));
    }
    for (rec, e) in manifest.params.iter().zip(model.store.entries_mut()) {
        let t = Tensor::load(dir.join(&rec.file))?;
        if t.shape() != rec.shape.as_slice() {
            return Err(mismatch(format!("file for `{}` has shape {:?}", rec.name, t.shape())));
        }
        e.value = t;
    }
    for (rec, (name, slot)) in manifest.stats.iter().zip(model.store.stats_entries_mut()) {
        if &rec.name != name || rec.channels != slot.mean.len() {
            return Err(mismatch(format!("running statistics `{}` do not match `{name}`", rec.name)));
        }
        let s = RunningStats {
            mean: Tensor::load(dir.join(&rec.mean_file))?,
            var: Tensor::load(dir.join(&rec.var_file))?,
        };
        if s.mean.len() != rec.channels || s.var.len() != rec.channels {
            return Err(mismatch(format!("running statistics `{name}` have the wrong length")));
        }
        *slot = s;
    }
    let pca = match &manifest.pca {
        Some(f) => Some(serde_json::from_str(&fs::read_to_string(dir.join(f))?)?),
        None => None,
    };
    Ok((model, pca, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Modules;
    use crate::wtbc::{KernelSet, WtbcConfig};

    fn cfg() -> NetworkConfig {
        NetworkConfig {
            bands: 3,
            classes: 2,
            widths: [8, 16],
            modules: Modules::default(),
            wtbc: WtbcConfig {
                levels: 1,
                kernels: KernelSet::K3,
                ..WtbcConfig::default()
            },
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn round_trip_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(cfg(), 9).unwrap();
        model.store.stats_entries_mut()[0].1.mean.data_mut()[0] = 0.75;
        save_checkpoint(dir.path(), &model, None, serde_json::json!({"seed": 9}), 3, 0.5).unwrap();
        let (back, pca, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.store, model.store);
        assert!(pca.is_none());
        assert_eq!((manifest.epoch, manifest.config["seed"].as_u64()), (3, Some(9)));
    }

    #[test]
    fn shape_audit_rejects_edited_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(cfg(), 1).unwrap();
        save_checkpoint(dir.path(), &model, None, serde_json::Value::Null, 0, 0.0).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.params[0].shape[0] += 1;
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("does not match"), "{err}");
    }
}
