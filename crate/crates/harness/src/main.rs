use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use applenet_core::datagen::{build_split, write_dump};
use applenet_harness::report::{output_root, sweep_dir_name, write_sweep, Report, RunResult};
use applenet_harness::sweep::{run_sweep, SweepAxis};
use applenet_harness::train::{run_experiment, BackboneCache};
use applenet_harness::ExperimentConfig;
use clap::{Parser, Subcommand};

/// Prompt-learning experiments on synthetic multi-domain scenes.
///
/// Results go under $APPLENET_OUT (default ./runs).
#[derive(Parser)]
#[command(name = "applenet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one config over its seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Vary one ablation axis of a config, one row per value.
    Sweep {
        /// shots, context_length, cls_position, attention_modules, ms_layers, crp_toggle or init_mode
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the images of one protocol split as a dataset dump.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Split seed; the first config seed when omitted.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print summary tables of every result below a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => {
            let cfg = load(&config)?;
            let record = run_experiment(&cfg, &BackboneCache::new())?;
            let result = RunResult::new(cfg, record)?;
            let dir = output_root().join(result.dir_name());
            result.write(&dir)?;
            print!("{}", Report { runs: vec![result], sweeps: vec![] }.render());
            println!("wrote {}", dir.display());
        }
        Command::Sweep { axis, config } => {
            let axis: SweepAxis = axis.parse()?;
            let cfg = load(&config)?;
            let result = run_sweep(axis, &cfg, &BackboneCache::new())?;
            let dir = output_root().join(sweep_dir_name(&result));
            write_sweep(&result, &dir)?;
            print!("{}", Report { runs: vec![], sweeps: vec![result] }.render());
            println!("wrote {}", dir.display());
        }
        Command::GenData { out, config, seed } => {
            let cfg = match config {
                Some(p) => load(&p)?,
                None => ExperimentConfig::default(),
            };
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let prepared = BackboneCache::new().get(&cfg)?;
            let (split, data) = build_split(
                cfg.protocol,
                &cfg.data,
                cfg.shots,
                seed,
                &prepared.world,
                &prepared.backbone.text,
            )?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_dump(&out, &split, &data, prepared.world.shape())?;
            println!(
                "wrote {} train and {} evaluation images to {}",
                data.train.len(),
                data.evals.iter().map(|e| e.data.len()).sum::<usize>(),
                out.display()
            );
        }
        Command::Report { input } => {
            print!("{}", Report::collect(&input)?.render());
        }
    }
    Ok(())
}
