use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tats::gradsuite::{run_suite, MODULES};
use tats::io::checkpoint::Checkpoint;
use tats::io::clip::save_clip;
use tats::sampler::sample_visible;
use tats::synth::generate_dataset;
use tats::trainer::{evaluate_sampler, held_out_seed, model_from_checkpoint, pretrain};
use tats::viz::export_visualization;
use tats::TrainConfig;

/// Trajectory-aware adaptive token sampling for masked video pretraining.
#[derive(Parser)]
#[command(name = "tats", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Joint autoencoder and sampler pretraining on synthetic clips.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/tats")]
        out: PathBuf,
        /// Stop after this many steps (overrides `max_steps`).
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Motion hit rate of a trained sampler against uniform masking.
    EvalSampler {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 64)]
        clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks on toy instances.
    Gradcheck {
        /// One of the suite names, or `all`.
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Probability, mask, frame and attention images for one held-out clip.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes synthetic clips as TATSCLIP files plus their motion masks.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, seed, out, max_steps } => {
            let mut cfg = TrainConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = max_steps {
                cfg.max_steps = m;
            }
            let outputs = pretrain(&cfg, &out)?;
            println!("metrics: {}", outputs.metrics.display());
            println!("checkpoint: {}", outputs.checkpoint.display());
        }
        Command::EvalSampler { ckpt, clips, seed } => {
            let model = model_from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let r = evaluate_sampler(&model, clips, seed)?;
            println!("hit_rate_tats={}", r.hit_rate_tats);
            println!("hit_rate_random={}", r.hit_rate_random);
            println!("ratio={}", r.ratio());
            println!("entropy={}", r.entropy);
        }
        Command::Gradcheck { module } => {
            let names: Vec<&str> = if module == "all" { MODULES.to_vec() } else { vec![module.as_str()] };
            let mut max = 0.0f64;
            for m in names {
                let r = run_suite(m)?;
                println!("{m}: max relative error {:e}", r.max_rel_error);
                max = max.max(r.max_rel_error);
            }
            println!("max relative error {max:e}");
            if max > 1e-4 {
                bail!("gradient check above tolerance 1e-4");
            }
        }
        Command::Visualize { ckpt, out, clip, seed } => {
            let model = model_from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let cfg = &model.cfg;
            let data = generate_dataset(&cfg.scene(), &model.tok, clip + 1, held_out_seed(cfg))?;
            let scene = &data[clip].0;
            let view = model.view(&scene.clip)?;
            let mask = sample_visible(&view.policy, cfg.mask_ratio, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let heat = model.heatmap(&view)?;
            let files = export_visualization(&out, &scene.clip, &model.tok, &view.policy, &mask, Some(&heat))?;
            for p in [Some(files.probabilities), Some(files.mask), Some(files.frames), files.heatmap].into_iter().flatten() {
                println!("{}", p.display());
            }
        }
        Command::GenData { config, count, seed, out } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p).with_context(|| format!("reading {}", p.display()))?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.data_seed = s;
            }
            fs::create_dir_all(&out)?;
            let data = generate_dataset(&cfg.scene(), &cfg.tokenizer(), count, cfg.data_seed)?;
            let mut labels = fs::File::create(out.join("motion.txt"))?;
            for (i, (scene, motion)) in data.iter().enumerate() {
                save_clip(&out.join(format!("clip_{i:05}.tatsclip")), &scene.clip)?;
                let bits: String = motion.iter().map(|&m| if m { '1' } else { '0' }).collect();
                writeln!(labels, "clip_{i:05} {} {bits}", scene.direction)?;
            }
            println!("wrote {count} clips to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
