//! Run configuration: a JSON file with every field optional, then command-line
//! overrides on top.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use cwssnet::data::SynthConfig;
use cwssnet::network::NetworkConfig;
use cwssnet::pipeline::{DataConfig, Experiment};
use cwssnet::train::{OptimizerKind, TrainConfig};
use cwssnet::wavelet::WaveletFamily;
use cwssnet::wtbc::KernelSet;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives scene synthesis, initialization, the patch split and shuffling.
    pub seed: u64,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    /// Input scene; the synthetic scene is generated when absent.
    pub cube: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Number of consecutive seeds, starting at the run seed.
    pub seeds: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { seeds: 3 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
            cube: None,
            checkpoint: None,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .context(Failure::Config)?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .context(Failure::Config)
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            data: self.data.clone(),
            network: self.network.clone(),
            train: TrainConfig {
                seed: self.seed,
                ..self.train.clone()
            },
        }
    }

    /// Aligns the nested seed with the run seed and checks consistency.
    pub fn finalize(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.experiment().validate().context(Failure::Config)?;
        if self.cube.is_none() && self.synth.classes != self.network.classes {
            return Err(anyhow::anyhow!(
                "synthetic scene has {} classes but the network predicts {}",
                self.synth.classes,
                self.network.classes
            ))
            .context(Failure::Config);
        }
        if self.ablation.seeds == 0 {
            return Err(anyhow::anyhow!("ablation needs at least one seed")).context(Failure::Config);
        }
        Ok(self)
    }

    /// The configuration as embedded in artifacts. The output directory is
    /// left out so that a rerun elsewhere writes identical bytes.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("configuration serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("out");
        }
        v
    }
}

fn parse_serde<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Per-command flags; each one, when given, replaces the file value.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Input cube file.
    #[arg(long)]
    pub cube: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// adamw or adam.
    #[arg(long, value_parser = parse_serde::<OptimizerKind>)]
    pub optimizer: Option<OptimizerKind>,
    /// Weight-penalty coefficient.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// PCA bands fed to the network.
    #[arg(long)]
    pub bands: Option<usize>,
    /// Wavelet decomposition levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// haar or db2.
    #[arg(long, value_parser = parse_serde::<WaveletFamily>)]
    pub wavelet: Option<WaveletFamily>,
    /// 3x3, 5x5 or 3x3+5x5.
    #[arg(long)]
    pub kernels: Option<KernelSet>,
    #[arg(long)]
    pub no_mca: bool,
    #[arg(long)]
    pub no_wtbc: bool,
    #[arg(long)]
    pub no_fusion: bool,
    /// Seeds per ablation setting.
    #[arg(long)]
    pub ablation_seeds: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        if self.cube.is_some() {
            cfg.cube = self.cube.clone();
        }
        if self.checkpoint.is_some() {
            cfg.checkpoint = self.checkpoint.clone();
        }
        set(&mut cfg.train.epochs, &self.epochs);
        set(&mut cfg.train.lr, &self.lr);
        set(&mut cfg.train.batch_size, &self.batch_size);
        set(&mut cfg.train.optimizer, &self.optimizer);
        set(&mut cfg.train.lambda, &self.lambda);
        set(&mut cfg.data.patch_size, &self.patch_size);
        set(&mut cfg.data.stride, &self.stride);
        set(&mut cfg.network.bands, &self.bands);
        set(&mut cfg.network.wtbc.levels, &self.levels);
        set(&mut cfg.network.wtbc.family, &self.wavelet);
        set(&mut cfg.network.wtbc.kernels, &self.kernels);
        set(&mut cfg.ablation.seeds, &self.ablation_seeds);
        cfg.network.modules.mca &= !self.no_mca;
        cfg.network.modules.wtbc &= !self.no_wtbc;
        cfg.network.modules.fusion &= !self.no_fusion;
    }
}
