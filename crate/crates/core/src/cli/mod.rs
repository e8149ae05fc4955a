//! Command implementations behind the `bps` binary, and the configuration
//! tree they read. Each command writes its resolved configuration and its
//! results as files in the output directory.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{EvalSection, GenerateConfig, RenderBenchSection, RunConfig, ScenesConfig};

use crate::render::{camera_trace, render_bench, BenchRow, RenderError};
use crate::rollout::{
    evaluate, fps_benchmark, load_checkpoint_policy, train_run, Agent, EvalConfig, EvalReport, FpsReport,
    MetricsRecord, RolloutError, RunSummary, SceneSet,
};
use crate::scene::{
    generate_scene, load_scene, save_scene, DirectorySource, GeneratedSource, GeneratorSpec, SceneAsset, SceneError,
    SceneId,
};

/// Environment variable overriding every worker-count setting.
pub const WORKERS_ENV: &str = "BPS_WORKERS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

impl CliError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for configuration errors, 3 for faults while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Rollout(RolloutError::Config(_)) => 2,
            _ => 3,
        }
    }
}

/// Sets the value at a dotted `path` (for example `batch.envs`) in a parsed
/// configuration tree. `value` is read as a TOML literal, or as a string
/// when it does not parse as one.
pub fn set_override(tree: &mut toml::Table, path: &str, value: &str) -> Result<(), CliError> {
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(vec![format!("malformed override key `{path}`")]));
    }
    let mut node = tree;
    for k in &keys[..keys.len() - 1] {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(CliError::Config(vec![format!(
                    "override `{path}`: `{k}` is not a table"
                )]))
            }
        };
    }
    node.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

/// Parses a configuration file (or the defaults when `path` is `None`),
/// applies `key=value` overrides and the worker-count variable, and
/// validates the result.
pub fn resolve_config(
    path: Option<&Path>,
    overrides: &[String],
    workers_env: Option<&str>,
) -> Result<RunConfig, CliError> {
    let mut tree: toml::Table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(CliError::io(p))?;
            toml::from_str(&text).map_err(|e| CliError::Config(vec![format!("{}: {e}", p.display())]))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(vec![format!("override `{o}` is not of the form key=value")]))?;
        set_override(&mut tree, k.trim(), v.trim())?;
    }
    let mut cfg: RunConfig = tree
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(vec![e.to_string()]))?;
    if let Some(w) = workers_env {
        let n: usize =
            w.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                CliError::Config(vec![format!("{WORKERS_ENV} must be a positive integer, got `{w}`")])
            })?;
        cfg.batch.sim_workers = n;
        cfg.batch.render_workers = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("records serialize");
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

fn prepare_output(cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let path = dir.join(format!("{command}.config.toml"));
    fs::write(&path, cfg.to_toml()).map_err(CliError::io(&path))?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub id: SceneId,
    pub seed: u64,
}

/// List of scene files with their content hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: String,
    pub generator: GeneratorSpec,
    pub base_seed: u64,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(CliError::io(path))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))
    }

    /// Scene source over the manifest's files, which live next to it.
    pub fn scene_set(&self, manifest_path: &Path) -> SceneSet {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let entries = self.scenes.iter().map(|e| (e.id, dir.join(&e.file)));
        SceneSet {
            source: Arc::new(DirectorySource::new(entries)),
            ids: self.scenes.iter().map(|e| e.id).collect(),
        }
    }

    pub fn load_assets(&self, manifest_path: &Path) -> Result<Vec<Arc<SceneAsset>>, CliError> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        self.scenes
            .iter()
            .map(|e| {
                let a = load_scene(dir.join(&e.file))?;
                if a.id() != e.id {
                    return Err(CliError::Scene(SceneError::Corrupt {
                        stored: e.id,
                        computed: a.id(),
                    }));
                }
                Ok(Arc::new(a))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenScenesOptions {
    pub count: usize,
    pub seed: u64,
    pub spec: GeneratorSpec,
    /// Scenes held out for evaluation, taken from the end of the sequence.
    pub val_count: usize,
    pub out_dir: PathBuf,
}

/// Per-scene generator seed.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Writes `scene_%04d.bsc` files plus `manifest.json`, `train.json` and
/// `val.json` into `out_dir`.
pub fn gen_scenes(opts: &GenScenesOptions) -> Result<Manifest, CliError> {
    let mut problems = Vec::new();
    if opts.count == 0 {
        problems.push("count must be positive".to_string());
    }
    if opts.val_count >= opts.count && opts.val_count > 0 {
        problems.push(format!(
            "val_count ({}) must leave training scenes out of {}",
            opts.val_count, opts.count
        ));
    }
    if let Err(e) = opts.spec.validate() {
        problems.push(e.to_string());
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    fs::create_dir_all(&opts.out_dir).map_err(CliError::io(&opts.out_dir))?;
    let mut entries = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let seed = scene_seed(opts.seed, i);
        let asset = generate_scene(seed, &opts.spec)?;
        let file = format!("scene_{i:04}.bsc");
        save_scene(&asset, opts.out_dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            id: asset.id(),
            seed,
        });
    }
    let manifest = |split: &str, scenes: &[ManifestEntry]| Manifest {
        split: split.to_string(),
        generator: opts.spec.clone(),
        base_seed: opts.seed,
        scenes: scenes.to_vec(),
    };
    let cut = opts.count - opts.val_count;
    let train_ids: std::collections::BTreeSet<SceneId> = entries[..cut].iter().map(|e| e.id).collect();
    let val: Vec<ManifestEntry> = entries[cut..]
        .iter()
        .filter(|e| !train_ids.contains(&e.id))
        .cloned()
        .collect();
    write_json(&opts.out_dir.join("train.json"), &manifest("train", &entries[..cut]))?;
    write_json(&opts.out_dir.join("val.json"), &manifest("val", &val))?;
    let all = manifest("all", &entries);
    write_json(&opts.out_dir.join("manifest.json"), &all)?;
    Ok(all)
}

fn training_scenes(cfg: &RunConfig) -> Result<SceneSet, CliError> {
    if let Some(path) = &cfg.scenes.manifest {
        return Ok(Manifest::load(path)?.scene_set(path));
    }
    let g = cfg
        .scenes
        .generate
        .as_ref()
        .ok_or_else(|| CliError::Config(vec!["scenes: no scene source configured".into()]))?;
    let assets = (0..g.count)
        .map(|i| generate_scene(scene_seed(g.seed, i), &g.spec))
        .collect::<Result<Vec<_>, _>>()?;
    let source = GeneratedSource::new(assets);
    let ids = source.ids();
    Ok(SceneSet {
        source: Arc::new(source),
        ids,
    })
}

/// Trains according to `cfg`, resuming from `output_dir/checkpoint` when
/// asked and one exists. Evaluates the final policy on `scenes.eval_manifest`
/// when set.
pub fn train(cfg: &RunConfig, resume: bool, on_iteration: impl FnMut(&MetricsRecord)) -> Result<RunSummary, CliError> {
    cfg.validate_for_training()?;
    let dir = prepare_output(cfg, "train")?;
    let scenes = training_scenes(cfg)?;
    let summary = train_run(&cfg.spec(), scenes, Some(&dir), resume, on_iteration)?;
    if let (Some(manifest), Some(cp)) = (&cfg.scenes.eval_manifest, &summary.checkpoint) {
        let report = eval_checkpoint(cp, manifest, &cfg.eval)?;
        write_json(&dir.join("eval.json"), &report)?;
    }
    Ok(summary)
}

fn eval_checkpoint(checkpoint: &Path, manifest: &Path, section: &EvalSection) -> Result<EvalReport, CliError> {
    let (policy, spec) = load_checkpoint_policy(checkpoint)?;
    let assets = Manifest::load(manifest)?.load_assets(manifest)?;
    let cfg = EvalConfig {
        envs: section.envs,
        episodes: section.episodes,
        seed: section.seed,
        batch: spec.batch,
    };
    Ok(evaluate(Agent::Greedy(&policy), &assets, &cfg)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Policy,
    Oracle,
    Random,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub agent: AgentKind,
    /// Required for the policy agent.
    pub checkpoint: Option<PathBuf>,
    pub manifest: PathBuf,
}

/// Evaluates an agent on the scenes of a manifest, writing `eval.json`.
pub fn eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<EvalReport, CliError> {
    let dir = prepare_output(cfg, "eval")?;
    let report = match opts.agent {
        AgentKind::Policy => {
            let cp = opts
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Config(vec!["eval: the policy agent needs a checkpoint".into()]))?;
            eval_checkpoint(cp, &opts.manifest, &cfg.eval)?
        }
        kind => {
            let assets = Manifest::load(&opts.manifest)?.load_assets(&opts.manifest)?;
            let ecfg = EvalConfig {
                envs: cfg.eval.envs,
                episodes: cfg.eval.episodes,
                seed: cfg.eval.seed,
                batch: cfg.batch.clone(),
            };
            let agent = match kind {
                AgentKind::Oracle => Agent::Oracle,
                AgentKind::Random => Agent::Random(cfg.eval.seed),
                _ => Agent::Stop,
            };
            evaluate(agent, &assets, &ecfg)?
        }
    };
    write_json(&dir.join("eval.json"), &report)?;
    Ok(report)
}

/// End-to-end throughput benchmark, writing `bench.json`.
pub fn bench(cfg: &RunConfig) -> Result<FpsReport, CliError> {
    cfg.validate_for_training()?;
    let dir = prepare_output(cfg, "bench")?;
    let report = fps_benchmark(&cfg.spec(), training_scenes(cfg)?, &cfg.bench)?;
    write_json(&dir.join("bench.json"), &report)?;
    Ok(report)
}

/// Renderer-only benchmark over one scene, writing `render_bench.json`.
/// Without a scene file the first configured scene is used.
pub fn render_bench_cmd(cfg: &RunConfig, scene: Option<&Path>) -> Result<Vec<BenchRow>, CliError> {
    let dir = prepare_output(cfg, "render_bench")?;
    let asset = match scene {
        Some(p) => Arc::new(load_scene(p)?),
        None => {
            let set = training_scenes(cfg)?;
            let id = *set
                .ids
                .first()
                .ok_or_else(|| CliError::Config(vec!["render-bench: no scenes available".into()]))?;
            Arc::new(set.source.load(id)?)
        }
    };
    let rb = &cfg.render_bench;
    let trace = camera_trace(&asset, rb.trace_length, rb.trace_seed);
    let rows = render_bench(asset, &trace, &rb.batch_sizes, &rb.resolutions, &rb.options)?;
    write_json(&dir.join("render_bench.json"), &rows)?;
    Ok(rows)
}

/// Table with one row per (resolution, batch size).
pub fn format_render_table(rows: &[BenchRow]) -> String {
    let mut s = format!("{:>6} {:>6} {:>8} {:>12}\n", "batch", "res", "frames", "fps");
    for r in rows {
        s.push_str(&format!(
            "{:>6} {:>6} {:>8} {:>12.1}\n",
            r.batch, r.resolution, r.frames, r.fps_median
        ));
    }
    s
}
