//! Run configuration, manifests, single-run pipeline, grids and correlation
//! reports.

mod grid;
mod pipeline;
mod report;

pub use grid::{run_grid, GridAxes, GridCell, GridConfig, GridOutcome, AGGREGATE_COLUMNS};
pub use pipeline::{evaluate_run, run_single, train_run, Evaluation, RunMetrics, TrainedRun};
pub use report::{report, CorrelationRow, Report, COMPLEXITY_COLUMNS};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::gmm::{sample_gmm, sample_gmm_truncated, Dataset, GmmSpec};
use crate::io::{read_json, sha256_file, sha256_hex, write_json};
use crate::model::MlpArch;
use crate::optim::{OptimizerConfig, SgldConfig};
use crate::rng::Streams;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SCORELAB_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleConfig {
    Cosine {
        #[serde(rename = "N")]
        n: usize,
        s: f64,
        ratio_cap: f64,
    },
    Uniform {
        horizon: f64,
        #[serde(rename = "N")]
        n: usize,
    },
}

impl ScheduleConfig {
    pub fn cosine(n: usize) -> Self {
        ScheduleConfig::Cosine {
            n,
            s: crate::diffusion::DEFAULT_COSINE_OFFSET,
            ratio_cap: crate::diffusion::DEFAULT_RATIO_CAP,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match *self {
            ScheduleConfig::Cosine { n, s, ratio_cap } => NoiseSchedule::cosine(n, s, ratio_cap),
            ScheduleConfig::Uniform { horizon, n } => NoiseSchedule::uniform(horizon, n),
        }
    }

    /// Same family with `n` steps.
    pub fn with_steps(&self, n: usize) -> Self {
        match *self {
            ScheduleConfig::Cosine { s, ratio_cap, .. } => ScheduleConfig::Cosine { n, s, ratio_cap },
            ScheduleConfig::Uniform { horizon, .. } => ScheduleConfig::Uniform { horizon, n },
        }
    }
}

/// Network shape; dimension and horizon come from the data and schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    pub time_embed_dim: usize,
    pub time_activation: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let a = MlpArch::new(1, 1.0);
        Self {
            n_blocks: a.n_blocks,
            hidden: a.hidden,
            time_embed_dim: a.time_embed_dim,
            time_activation: a.time_activation,
        }
    }
}

impl ArchConfig {
    pub fn build(&self, d: usize, horizon: f64) -> MlpArch {
        MlpArch {
            n_blocks: self.n_blocks,
            hidden: self.hidden,
            time_embed_dim: self.time_embed_dim,
            time_activation: self.time_activation,
            ..MlpArch::new(d, horizon)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McBudget {
    /// `(t, G)` draws per datapoint when measuring train and test epsilon losses.
    pub eval_draws: usize,
    /// Draws per cell for decompositions and bound reports.
    pub decompose: usize,
    /// Generated and reference samples for the W2 metric; 0 disables it.
    pub w2_samples: usize,
}

impl Default for McBudget {
    fn default() -> Self {
        Self {
            eval_draws: 10,
            decompose: 64,
            w2_samples: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryOptions {
    /// Continuation steps recorded after training.
    pub steps: usize,
    /// Seed of the fixed evaluation draws; defaults to a value derived from the run seed.
    #[serde(default)]
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSettings {
    pub tau: f64,
    pub delta: f64,
    /// Uniform loss bound `B` for the trajectory bounds.
    pub loss_bound: f64,
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self {
            tau: 1.0,
            delta: 0.05,
            loss_bound: 1.0,
        }
    }
}

fn default_inference_steps() -> usize {
    100
}

/// Everything needed to reproduce one training run and its evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub spec: GmmSpec,
    /// Training set to use instead of sampling `n` points from `spec`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub n: usize,
    #[serde(default)]
    pub truncated: bool,
    pub schedule: ScheduleConfig,
    #[serde(default = "default_inference_steps")]
    pub inference_steps: usize,
    #[serde(default)]
    pub arch: ArchConfig,
    pub optimizer: OptimizerConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub mc: McBudget,
    #[serde(default)]
    pub trajectory: Option<TrajectoryOptions>,
    #[serde(default)]
    pub bounds: BoundSettings,
}

impl RunConfig {
    /// Nine-component mixture, cosine schedule with 200 training steps, full-batch
    /// SGLD for 20k steps, 3 seeds, 200 recorded continuation steps. The loss
    /// bound is the epsilon loss of the zero network, `d = 4`.
    pub fn desk_default(n: usize, eta: f64, beta: f64) -> Self {
        Self {
            spec: GmmSpec::nine_component(0),
            dataset: None,
            n,
            truncated: false,
            schedule: ScheduleConfig::cosine(200),
            inference_steps: 100,
            arch: ArchConfig::default(),
            optimizer: OptimizerConfig::Sgld(SgldConfig::new(eta, beta, n, 20_000)),
            seeds: vec![0, 1, 2],
            mc: McBudget::default(),
            trajectory: Some(TrajectoryOptions {
                steps: 200,
                noise_seed: None,
            }),
            bounds: BoundSettings {
                loss_bound: 4.0,
                ..BoundSettings::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if let Some(p) = &self.dataset {
            if !p.exists() {
                return bad(format!("dataset {} does not exist", p.display()));
            }
        }
        if self.inference_steps == 0 {
            return bad("inference_steps must be positive".into());
        }
        if self.mc.eval_draws < 2 || self.mc.decompose < 2 {
            return bad("Monte Carlo budgets need at least 2 draws".into());
        }
        self.optimizer.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        self.arch_for(&self.schedule.build()?).validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn arch_for(&self, schedule: &NoiseSchedule) -> MlpArch {
        self.arch.build(self.spec.d, schedule.horizon())
    }

    /// Training set for `seed`: the configured file, or `n` draws from stream
    /// family `("train-data", 0)`.
    pub fn train_data(&self, seed: u64) -> Result<Dataset> {
        if let Some(p) = &self.dataset {
            let data = Dataset::load(p)?;
            if data.d() != self.spec.d {
                return Err(Error::Config(format!("dataset dimension {} vs spec {}", data.d(), self.spec.d)));
            }
            return Ok(data);
        }
        self.draw(&Streams::new(seed).derive("train-data", 0))
    }

    /// Held-out set of the same size from the disjoint family `("test-data", 0)`.
    pub fn test_data(&self, seed: u64, n: usize) -> Result<Dataset> {
        let streams = Streams::new(seed).derive("test-data", 0);
        if self.truncated {
            sample_gmm_truncated(&self.spec, n, &streams)
        } else {
            sample_gmm(&self.spec, n, &streams)
        }
    }

    fn draw(&self, streams: &Streams) -> Result<Dataset> {
        if self.truncated {
            sample_gmm_truncated(&self.spec, self.n, streams)
        } else {
            sample_gmm(&self.spec, self.n, streams)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: Self = read_json(path).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command invocation. Everything except `timing` is a function
/// of the inputs; `content_hash` covers exactly that part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub input_hashes: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, Artifact>,
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
    pub timing: BTreeMap<String, f64>,
    pub content_hash: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            version: VERSION.to_string(),
            command: command.to_string(),
            config,
            seed,
            input_hashes: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            notes: BTreeMap::new(),
            timing: BTreeMap::new(),
            content_hash: String::new(),
        }
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.input_hashes.insert(name.to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Hash an artifact already written to `dir/relative`.
    pub fn add_artifact(&mut self, name: &str, dir: &Path, relative: &str) -> Result<()> {
        let sha256 = sha256_file(&dir.join(relative))?;
        self.artifacts.insert(
            name.to_string(),
            Artifact {
                path: PathBuf::from(relative),
                sha256,
            },
        );
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.notes.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    fn compute_hash(&self) -> Result<String> {
        let mut stable = self.clone();
        stable.timing.clear();
        stable.content_hash.clear();
        Ok(sha256_hex(&serde_json::to_vec(&stable)?))
    }

    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.content_hash = self.compute_hash()?;
        write_json(path, self)
    }
}

/// Output root: the explicit path, else `$SCORELAB_OUT`, else `./out`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_validation() {
        let c = RunConfig::desk_default(512, 1e-3, 1e6);
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);

        let mut bad = c.clone();
        bad.seeds.clear();
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = c.clone();
        bad.dataset = Some(PathBuf::from("/nonexistent/data.bin"));
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn train_and_test_sets_differ() {
        let c = RunConfig::desk_default(16, 1e-3, 1e6);
        let a = c.train_data(0).unwrap();
        let b = c.test_data(0, 16).unwrap();
        assert_ne!(a.points(), b.points());
        assert_eq!(a.points(), c.train_data(0).unwrap().points());
    }

    #[test]
    fn manifest_hash_ignores_timing() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = RunManifest::new("train", serde_json::json!({"n": 3}), Some(1));
        a.timing.insert("train".into(), 1.0);
        a.write(&dir.path().join("a.json")).unwrap();
        let mut b = RunManifest::new("train", serde_json::json!({"n": 3}), Some(1));
        b.timing.insert("train".into(), 2.5);
        b.write(&dir.path().join("b.json")).unwrap();
        assert_eq!(a.content_hash, b.content_hash);
    }
}
