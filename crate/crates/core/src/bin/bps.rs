use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use batchsim::cli::{self, AgentKind, CliError, EvalOptions, GenScenesOptions, RunConfig, WORKERS_ENV};
use batchsim::scene::GeneratorSpec;

#[derive(Parser)]
#[command(
    name = "bps",
    version,
    about = "Batch simulation and rendering for navigation agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; defaults apply to everything it omits.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set batch.envs=128`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set output_dir=...`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(d) = &self.output_dir {
            overrides.push(format!("output_dir={:?}", d.display().to_string()));
        }
        let workers = std::env::var(WORKERS_ENV).ok();
        Ok(cli::resolve_config(
            self.config.as_deref(),
            &overrides,
            workers.as_deref(),
        )?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentArg {
    Policy,
    Oracle,
    Random,
    Stop,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scene files with a manifest and a train/val split.
    GenScenes {
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scenes held out for evaluation.
        #[arg(long, default_value_t = 4)]
        val_count: usize,
        /// TOML file with generator parameters.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "scenes")]
        out_dir: PathBuf,
    },
    /// Train a policy.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate an agent on held-out scenes.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Scene manifest, usually `val.json` from gen-scenes.
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, value_enum, default_value = "policy")]
        agent: AgentArg,
        /// Checkpoint directory for the policy agent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// End-to-end frames-per-second benchmark with a stage breakdown.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Renderer-only throughput over batch sizes.
    RenderBench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Scene file; defaults to the first configured scene.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScenes {
            count,
            seed,
            val_count,
            spec,
            out_dir,
        } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str::<GeneratorSpec>(&text)
                        .map_err(|e| CliError::Config(vec![format!("{}: {e}", p.display())]))?
                }
                None => GeneratorSpec::default(),
            };
            let m = cli::gen_scenes(&GenScenesOptions {
                count,
                seed,
                spec,
                val_count,
                out_dir: out_dir.clone(),
            })?;
            println!("wrote {} scenes to {}", m.scenes.len(), out_dir.display());
        }
        Command::Train { cfg, resume } => {
            let cfg = cfg.resolve()?;
            let total = cfg.spec().iterations();
            let s = cli::train(&cfg, resume, |r| {
                println!(
                    "iter {:>5}/{total} frames {:>9} fps {:>8.1} loss {:>8.4} lr {:.2e} trust {:.3} success {}",
                    r.iteration,
                    r.frames,
                    r.fps,
                    r.loss,
                    r.lr,
                    r.mean_trust_ratio,
                    r.train_success.map_or("-".into(), |s| format!("{s:.2}"))
                )
            })?;
            println!("trained {} iterations, {} frames", s.iterations, s.frames);
        }
        Command::Eval {
            cfg,
            scenes,
            agent,
            checkpoint,
        } => {
            let cfg = cfg.resolve()?;
            let agent = match agent {
                AgentArg::Policy => AgentKind::Policy,
                AgentArg::Oracle => AgentKind::Oracle,
                AgentArg::Random => AgentKind::Random,
                AgentArg::Stop => AgentKind::Stop,
            };
            let r = cli::eval(
                &cfg,
                &EvalOptions {
                    agent,
                    checkpoint,
                    manifest: scenes,
                },
            )?;
            println!(
                "episodes {}  Success {:.3}  SPL {:.3}  score {:.3}  steps {:.1}",
                r.episodes, r.success, r.spl, r.score, r.mean_steps
            );
        }
        Command::Bench { cfg } => {
            let cfg = cfg.resolve()?;
            let r = cli::bench(&cfg)?;
            let b = r.breakdown;
            println!("envs {} frames {} fps {:.1}", r.envs, r.frames, r.fps);
            println!(
                "per frame: sim+render {:.1} us, inference {:.1} us, learning {:.1} us ({:.0}% of wall clock)",
                b.sim_render_us,
                b.inference_us,
                b.learning_us,
                100.0 * r.accounted
            );
        }
        Command::RenderBench { cfg, scene } => {
            let cfg = cfg.resolve()?;
            let rows = cli::render_bench_cmd(&cfg, scene.as_deref())?;
            print!("{}", cli::format_render_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<CliError>() {
            Some(cli_err) => {
                eprintln!("error: {cli_err}");
                ExitCode::from(cli_err.exit_code() as u8)
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(3)
            }
        },
    }
}
