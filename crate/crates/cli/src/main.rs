use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use seenflow::config::{load_config, PipelineConfig, TrainConfig};
use seenflow::pipeline::Pipeline;

/// Visibility-aware TSDF scene completion and generation.
#[derive(Parser, Debug)]
#[command(name = "seenflow", version)]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed used by the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (overrides `paths.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate procedural scenes, depth frames and layouts.
    Synth,
    /// Fuse depth frames into TSDF volumes.
    Fuse {
        /// Fraction of frames kept; repeatable. Defaults to `data.keep_fractions`.
        #[arg(long = "keep-fraction")]
        keep_fraction: Vec<f64>,
    },
    /// Train the masked VAE.
    TrainVae {
        #[arg(long)]
        steps: Option<usize>,
        /// Train the ablation that treats Unknown voxels as observed.
        #[arg(long)]
        unmasked: bool,
    },
    /// Train the layout-conditioned flow model.
    TrainFlow {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune the control branch on degraded scans.
    TrainControl {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long = "keep-fraction", default_value_t = 0.5)]
        keep_fraction: f64,
    },
    /// Complete a degraded scan.
    Complete {
        #[arg(long)]
        scene: usize,
        #[arg(long = "keep-fraction", default_value_t = 0.5)]
        keep_fraction: f64,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Generate a scene from its layout alone.
    Generate {
        #[arg(long)]
        scene: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Compute metrics for completions and append them to metrics.jsonl.
    Eval {
        #[arg(long)]
        scene: usize,
        #[arg(long = "keep-fraction", default_value_t = 0.5)]
        keep_fraction: f64,
        /// Sampler seeds of the completions to evaluate (two for TMD).
        #[arg(long = "sample-seed", num_args = 1.., default_values_t = [0u64, 1])]
        sample_seeds: Vec<u64>,
    },
}

#[derive(Args, Debug)]
struct SamplerArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "cfg-scale")]
    cfg_scale: Option<f64>,
    /// Sample with the null layout condition.
    #[arg(long = "no-layout")]
    no_layout: bool,
}

fn override_train(t: &mut TrainConfig, steps: Option<usize>, seed: Option<u64>) {
    if let Some(s) = steps {
        t.steps = s;
        t.warmup = t.warmup.min(s);
    }
    if let Some(s) = seed {
        t.seed = s;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    let threads = cli.threads.unwrap_or(0);
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("building the worker pool")?;

    match cli.command {
        Command::Synth => {
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            let n = Pipeline::new(cfg)?.synth()?;
            info!("wrote {n} scenes");
        }
        Command::Fuse { keep_fraction } => {
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            let keeps = if keep_fraction.is_empty() { cfg.data.keep_fractions.clone() } else { keep_fraction };
            if let Some(k) = keeps.iter().find(|k| !(**k > 0.0 && **k <= 1.0)) {
                bail!("--keep-fraction must be in (0, 1], got {k}");
            }
            for p in Pipeline::new(cfg)?.fuse(&keeps)? {
                println!("{}", p.display());
            }
        }
        Command::TrainVae { steps, unmasked } => {
            override_train(&mut cfg.train.vae, steps, cli.seed);
            println!("{}", Pipeline::new(cfg)?.train_vae(!unmasked)?.display());
        }
        Command::TrainFlow { steps } => {
            override_train(&mut cfg.train.flow, steps, cli.seed);
            println!("{}", Pipeline::new(cfg)?.train_flow()?.display());
        }
        Command::TrainControl { steps, keep_fraction } => {
            override_train(&mut cfg.train.control, steps, cli.seed);
            println!("{}", Pipeline::new(cfg)?.train_control(keep_fraction)?.display());
        }
        Command::Complete { scene, keep_fraction, sampler } => {
            let p = Pipeline::new(cfg)?;
            let opts = sample_options(&p, &sampler, cli.seed);
            let (vol, mesh) = p.complete(scene, keep_fraction, &opts)?;
            info!("completed: {} known voxels, {} triangles", vol.known_count(), mesh.triangles.len());
            println!("{}", p.dirs.completion_stem(scene, keep_fraction, opts.seed).display());
        }
        Command::Generate { scene, sampler } => {
            let p = Pipeline::new(cfg)?;
            let opts = sample_options(&p, &sampler, cli.seed);
            let (_, mesh, tiles) = p.generate(scene, &opts)?;
            info!("generated {} triangles from {tiles} tiles", mesh.triangles.len());
            println!("{}", p.dirs.generation_stem(scene, opts.seed).display());
        }
        Command::Eval { scene, keep_fraction, sample_seeds } => {
            let p = Pipeline::new(cfg)?;
            for r in p.eval(scene, keep_fraction, &sample_seeds)? {
                println!("{}", format_record(&r));
            }
        }
    }
    Ok(())
}

fn sample_options(p: &Pipeline, args: &SamplerArgs, seed: Option<u64>) -> seenflow::pipeline::SampleOptions {
    let mut o = p.sample_options();
    if let Some(s) = args.steps {
        o.steps = s;
    }
    if let Some(c) = args.cfg_scale {
        o.cfg_scale = c;
    }
    if let Some(s) = seed {
        o.seed = s;
    }
    o.use_layout = !args.no_layout;
    o
}

fn format_record(r: &seenflow::eval::MetricRecord) -> String {
    let value = r.value.map_or("null".to_string(), |v| format!("{v:.6e}"));
    let tags: Vec<String> = r.tags.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("{} {} [{}] {}", r.metric, value, r.convention, tags.join(" "))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEENFLOW_LOG", "info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
