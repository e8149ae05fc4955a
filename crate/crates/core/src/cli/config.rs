use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::nn::PolicyConfig;
use crate::render::BenchOptions;
use crate::rollout::{BatchConfig, FpsOptions, TrainSpec};
use crate::scene::GeneratorSpec;
use crate::train::TrainConfig;

/// Scenes generated in memory instead of read from a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub count: usize,
    pub seed: u64,
    pub spec: GeneratorSpec,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 16,
            seed: 0,
            spec: GeneratorSpec::default(),
        }
    }
}

/// Where training (and evaluation) scenes come from: a manifest written by
/// `gen-scenes`, or scenes generated on the fly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenesConfig {
    pub manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub generate: Option<GenerateConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub envs: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            envs: 16,
            episodes: 64,
            seed: 1_000_003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderBenchSection {
    pub batch_sizes: Vec<usize>,
    pub resolutions: Vec<usize>,
    pub trace_length: usize,
    pub trace_seed: u64,
    pub options: BenchOptions,
}

impl Default for RenderBenchSection {
    fn default() -> Self {
        Self {
            batch_sizes: vec![1, 4, 16, 64, 256],
            resolutions: vec![64],
            trace_length: 1024,
            trace_seed: 0,
            options: BenchOptions::default(),
        }
    }
}

/// The full parameter tree of a run. Every field has a default, so a file
/// only lists what it changes; the resolved tree is written next to the
/// run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub total_frames: u64,
    pub checkpoint_every: u64,
    pub scenes: ScenesConfig,
    pub batch: BatchConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub bench: FpsOptions,
    pub render_bench: RenderBenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = TrainSpec::default();
        Self {
            output_dir: PathBuf::from("runs/default"),
            seed: spec.seed,
            total_frames: spec.total_frames,
            checkpoint_every: spec.checkpoint_every,
            scenes: ScenesConfig::default(),
            batch: spec.batch,
            policy: spec.policy,
            train: spec.train,
            eval: EvalSection::default(),
            bench: FpsOptions::default(),
            render_bench: RenderBenchSection::default(),
        }
    }
}

impl RunConfig {
    pub fn spec(&self) -> TrainSpec {
        TrainSpec {
            batch: self.batch.clone(),
            policy: self.policy.clone(),
            train: self.train.clone(),
            total_frames: self.total_frames,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
        }
    }

    /// Every violated constraint across all sections.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.spec().problems();
        if self.scenes.manifest.is_some() && self.scenes.generate.is_some() {
            p.push("scenes: set only one of scenes.manifest and scenes.generate".into());
        }
        if let Some(g) = &self.scenes.generate {
            if g.count == 0 {
                p.push("scenes.generate.count must be positive".into());
            }
            if let Err(e) = g.spec.validate() {
                p.push(format!("scenes.generate.spec: {e}"));
            }
        }
        if self.eval.envs == 0 || self.eval.episodes == 0 {
            p.push("eval.envs and eval.episodes must be positive".into());
        }
        if self.bench.inference_batches == 0 {
            p.push("bench.inference_batches must be positive".into());
        }
        let rb = &self.render_bench;
        if rb.batch_sizes.is_empty() || rb.batch_sizes.contains(&0) {
            p.push("render_bench.batch_sizes must be non-empty and positive".into());
        }
        if rb.resolutions.is_empty() || rb.resolutions.contains(&0) {
            p.push("render_bench.resolutions must be non-empty and positive".into());
        }
        if rb.trace_length == 0 {
            p.push("render_bench.trace_length must be positive".into());
        }
        p
    }

    /// [`RunConfig::problems`] plus the requirement of a scene source.
    pub fn training_problems(&self) -> Vec<String> {
        let mut p = self.problems();
        if self.scenes.manifest.is_none() && self.scenes.generate.is_none() {
            p.push("scenes: one of scenes.manifest or scenes.generate is required".into());
        }
        p
    }

    pub fn validate_for_training(&self) -> Result<(), CliError> {
        let p = self.training_problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(p))
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(p))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(vec![e.to_string()]))
    }

    /// Reads and parses a config file without validating it.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(p) => {
                CliError::Config(p.into_iter().map(|m| format!("{}: {m}", path.display())).collect())
            }
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}
