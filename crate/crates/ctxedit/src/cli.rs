//! Command-line surface: dataset generation, training, editing, evaluation,
//! and checkpoint inspection.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::editor::GuidanceConfig;
use crate::error::{PipelineError, PipelineResult};
use crate::image::Image;
use crate::kvrecord::KvRecord;
use crate::metrics::{evaluate, RunReport};
use crate::model::Pipeline;
use crate::trainer::{train_phase, Phase, TrainConfig};
use crate::vocab::SEP;
use crate::world::{build_split, load_episode, load_split, SplitCounts};

#[derive(Debug, Parser)]
#[command(
    name = "ctxedit",
    about = "Context-aware instruction-guided image editing on synthetic scenes",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val/test episode files.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        train: usize,
        #[arg(long, default_value_t = 32)]
        val: usize,
        #[arg(long, default_value_t = 64)]
        test: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run one training phase (main, surrogate, or refine).
    Train {
        #[arg(long)]
        phase: String,
        /// Optional key = value config file; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Input checkpoint (required for surrogate and refine).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Report path; defaults to the checkpoint path with `.report`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Edit an episode (or a raw image plus instructions).
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode file to edit.
        #[arg(long)]
        episode: Option<PathBuf>,
        /// Raw PPM image (requires --instructions).
        #[arg(long)]
        image: Option<PathBuf>,
        /// Semicolon-separated instruction list for --image.
        #[arg(long)]
        instructions: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.5)]
        s_img: f64,
        #[arg(long, default_value_t = 7.5)]
        s_text: f64,
    },
    /// Evaluate a checkpoint on a split and write a report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.5)]
        s_img: f64,
        #[arg(long, default_value_t = 7.5)]
        s_text: f64,
    },
    /// Print a parameter summary of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

pub fn run(cli: Cli) -> PipelineResult<()> {
    match cli.command {
        Command::GenData {
            seed,
            train,
            val,
            test,
            out_dir,
        } => {
            let written = build_split(SplitCounts { train, val, test }, seed, &out_dir)?;
            println!("wrote {} files under {}", written.len(), out_dir.display());
            Ok(())
        }
        Command::Train {
            phase,
            config,
            data_dir,
            out,
            from,
            report,
        } => cmd_train(&phase, config.as_deref(), &data_dir, &out, from.as_deref(), report),
        Command::Edit {
            checkpoint,
            episode,
            image,
            instructions,
            out_dir,
            seed,
            s_img,
            s_text,
        } => cmd_edit(
            &checkpoint,
            episode.as_deref(),
            image.as_deref(),
            instructions.as_deref(),
            &out_dir,
            seed,
            GuidanceConfig { s_img, s_text },
        ),
        Command::Eval {
            checkpoint,
            data_dir,
            split,
            report,
            seed,
            s_img,
            s_text,
        } => {
            let pipe = Pipeline::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let episodes = load_split(&data_dir, &split)?;
            let metrics = evaluate(&pipe, &episodes, GuidanceConfig { s_img, s_text }, seed)?;
            let mut rep = RunReport::new("eval");
            rep.set("checkpoint", checkpoint.display());
            rep.set("split", &split);
            rep.set("seed", seed);
            rep.set("s_img", s_img);
            rep.set("s_text", s_text);
            rep.set_metrics(&metrics);
            rep.save(&report)?;
            println!(
                "eval {}: l1 {:.4} token_accuracy {:.4} iou {:.4}",
                split, metrics.l1, metrics.token_accuracy, metrics.iou
            );
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            println!("phase: {}", ck.phase);
            println!("blocks: {}", ck.blocks.len());
            let mut total = 0usize;
            for (name, shape, data) in &ck.blocks {
                println!("  {name}  {shape:?}  {}", data.len());
                total += data.len();
            }
            println!("total parameters: {total}");
            Ok(())
        }
    }
}

fn cmd_train(
    phase_name: &str,
    config: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    from: Option<&Path>,
    report_path: Option<PathBuf>,
) -> PipelineResult<()> {
    let phase = Phase::from_name(phase_name)
        .ok_or_else(|| PipelineError::Config(format!("unknown phase {phase_name:?}")))?;
    let cfg = match config {
        Some(p) => TrainConfig::from_config_text(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    let train_eps = load_split(data_dir, "train")?;
    let val_eps = load_split(data_dir, "val")?;

    let mut pipe = match (phase.prerequisite(), from) {
        (None, _) => Pipeline::seeded(cfg.seed)?,
        (Some(want), Some(path)) => {
            let ck = Checkpoint::load(path)?;
            if ck.phase != want {
                return Err(PipelineError::PhaseOrder {
                    detail: format!(
                        "{} phase requires a {want} checkpoint, got {:?}",
                        phase.name(),
                        ck.phase
                    ),
                });
            }
            Pipeline::from_checkpoint(&ck)?
        }
        (Some(want), None) => {
            return Err(PipelineError::PhaseOrder {
                detail: format!("{} phase requires --from with a {want} checkpoint", phase.name()),
            });
        }
    };

    let outcome = train_phase(&mut pipe, phase, &cfg, &train_eps, &val_eps)?;
    pipe.to_checkpoint(phase.name()).save(out)?;

    let mut rep = RunReport::new("train");
    rep.set("phase", phase.name());
    for (k, v) in cfg.echo() {
        rep.set(&k, v);
    }
    for p in &outcome.trace {
        let tag = format!("trace_{:05}", p.step);
        rep.set(&format!("{tag}_total"), p.total);
        rep.set(&format!("{tag}_token_ce"), p.token_ce);
        rep.set(&format!("{tag}_broadcast_ce"), p.broadcast_ce);
        rep.set(&format!("{tag}_dice"), p.dice);
        rep.set(&format!("{tag}_bce"), p.bce);
        rep.set(&format!("{tag}_noise"), p.noise);
        rep.set(&format!("{tag}_surrogate"), p.surrogate_term);
    }
    if let Some(v) = outcome.surrogate_val_mse {
        rep.set("surrogate_val_mse", v);
    }
    if let Some(v) = outcome.surrogate_val_baseline {
        rep.set("surrogate_val_baseline", v);
    }
    let report_path = report_path.unwrap_or_else(|| out.with_extension("report"));
    rep.save(&report_path)?;
    println!(
        "{} phase done: checkpoint {}, report {}",
        phase.name(),
        out.display(),
        report_path.display()
    );
    Ok(())
}

fn cmd_edit(
    checkpoint: &Path,
    episode: Option<&Path>,
    image: Option<&Path>,
    instructions: Option<&str>,
    out_dir: &Path,
    seed: u64,
    cfg: GuidanceConfig,
) -> PipelineResult<()> {
    let pipe = Pipeline::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    std::fs::create_dir_all(out_dir)?;

    let (scene_image, instruction_texts): (Image, Vec<String>) = match (episode, image) {
        (Some(path), None) => {
            let ep = load_episode(path)?;
            let texts = ep.instructions.iter().map(|i| i.text.clone()).collect();
            (ep.scene.image, texts)
        }
        (None, Some(img_path)) => {
            let img = Image::from_ppm(&std::fs::read(img_path)?)?;
            let list = instructions.ok_or_else(|| {
                PipelineError::Config("--image requires --instructions".into())
            })?;
            let texts: Vec<String> = list
                .split(';')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if texts.is_empty() {
                return Err(PipelineError::ZeroInstructions);
            }
            (img, texts)
        }
        _ => {
            return Err(PipelineError::Config(
                "provide exactly one of --episode or --image".into(),
            ))
        }
    };

    let prompt_text = instruction_texts
        .iter()
        .map(|t| format!("{t} {SEP}"))
        .collect::<Vec<_>>()
        .join(" ");
    let prompt = crate::vocab::tokenize(&prompt_text)?;
    let inf = pipe.infer(&scene_image, &prompt, cfg, seed)?;

    std::fs::write(out_dir.join("edited.ppm"), inf.edited.to_ppm())?;
    let labels_text: String = inf
        .labels
        .iter()
        .map(|l| if l.editable() { "MASK\n" } else { "NEG\n" })
        .collect();
    std::fs::write(out_dir.join("labels.txt"), labels_text)?;
    for (i, mask) in inf.masks.iter().enumerate() {
        std::fs::write(out_dir.join(format!("mask_{i}.pgm")), mask.to_pgm())?;
    }
    let mut manifest = KvRecord::new();
    manifest.set("seed", seed);
    manifest.set("s_img", cfg.s_img);
    manifest.set("s_text", cfg.s_text);
    manifest.set("schedule_steps", pipe.editor.schedule.steps());
    for t in 0..pipe.editor.schedule.steps() {
        manifest.set(&format!("alpha_bar_{t}"), pipe.editor.schedule.alpha_bar(t));
    }
    manifest.set("instruction_count", instruction_texts.len());
    for (i, t) in instruction_texts.iter().enumerate() {
        manifest.set(&format!("instruction_{i}"), t);
    }
    std::fs::write(
        out_dir.join("run_manifest.kv"),
        manifest.to_bytes("ctxedit-run-v1"),
    )?;
    println!(
        "edited image and {} masks written to {}",
        inf.masks.len(),
        out_dir.display()
    );
    Ok(())
}
