//! Run configuration, checkpoints and the on-disk training driver.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baseline::CriticParams;
use crate::env::{EnvConfig, SearchEnv, SynthDataset};
use crate::error::{Error, Result};
use crate::metrics::{write_row, MetricsRow};
use crate::policy::{FeatureLayout, PolicyParams};
use crate::trainer::{train, Algorithm, TrainConfig};
use crate::types::MasTopology;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const CONFIG_FILE: &str = "config.toml";

fn default_topology() -> MasTopology {
    MasTopology::search_chain(6, 4, 10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Dataset generation seed; the training seed when absent.
    #[serde(default)]
    pub dataset_seed: Option<u64>,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default = "default_topology")]
    pub topology: MasTopology,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: None,
            dataset_seed: None,
            env: EnvConfig::default(),
            topology: default_topology(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset_seed.unwrap_or(self.train.seed)
    }

    pub fn build_env(&self) -> Result<SearchEnv> {
        let data = SynthDataset::generate(self.env.clone(), self.dataset_seed())?;
        SearchEnv::new(data, self.topology.clone())
    }

    /// Short run label: algorithm, plus strategy for MHGPO.
    pub fn label(&self) -> String {
        match self.train.algorithm {
            Algorithm::Mappo => "mappo".into(),
            Algorithm::Mhgpo => format!("mhgpo-{}", self.train.plan.strategy.label()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub step: usize,
    pub layout: FeatureLayout,
    pub n_roles: usize,
    pub topology: MasTopology,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub critic: Option<CriticParams>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Self = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        if ckpt.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Checkpoint("non-finite weights".into()));
        }
        Ok(ckpt)
    }

    pub fn params(&self) -> Result<PolicyParams> {
        PolicyParams::from_weights(self.layout, self.n_roles, self.weights.clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Environment for evaluating this checkpoint on `data`.
    pub fn env_for(&self, data: SynthDataset) -> Result<SearchEnv> {
        let env = SearchEnv::new(data, self.topology.clone())?;
        if env.layout() != self.layout {
            return Err(Error::Checkpoint(format!(
                "checkpoint layout {:?} does not match dataset layout {:?}",
                self.layout,
                env.layout()
            )));
        }
        Ok(env)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub out_dir: PathBuf,
    pub last: Option<MetricsRow>,
}

#[derive(Serialize)]
struct Timing {
    step: usize,
    wall_ms: f64,
}

/// Train and write metrics, timings, checkpoint, dataset and config to `out_dir`.
pub fn run_to_dir(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    let env = cfg.build_env()?;
    env.data.save(&out_dir.join(DATASET_FILE))?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    let mut metrics = BufWriter::new(File::create(out_dir.join(METRICS_FILE))?);
    let mut timing = BufWriter::new(File::create(out_dir.join(TIMING_FILE))?);
    let mut last = None;
    let mut clock = Instant::now();
    let outcome = train(&cfg.train, &env, |row| {
        write_row(&mut metrics, row)?;
        let t = Timing {
            step: row.step,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        };
        serde_json::to_writer(&mut timing, &t)?;
        timing.write_all(b"\n")?;
        clock = Instant::now();
        last = Some(row.clone());
        Ok(())
    })?;
    metrics.flush()?;
    timing.flush()?;
    Checkpoint {
        algorithm: cfg.train.algorithm,
        seed: cfg.train.seed,
        step: outcome.steps,
        layout: outcome.params.layout(),
        n_roles: outcome.params.n_roles(),
        topology: cfg.topology.clone(),
        weights: outcome.params.weights().to_vec(),
        critic: outcome.critic,
    }
    .save(&out_dir.join(CHECKPOINT_FILE))?;
    Ok(RunSummary {
        steps: outcome.steps,
        out_dir: out_dir.to_path_buf(),
        last,
    })
}
