use clap::{Args, Parser, Subcommand, ValueEnum};
use densespot::trainer::TrainPhase;
use densespot_cli::{
    cmd_eval, cmd_infer, cmd_synth, cmd_train, CliError, InferRequest, RunConfig, RunOptions,
    Split, TrainRequest,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "densespot", version, about = "Dense-anchor action spotting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// One thread and no wall-clock values in outputs.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Confidence,
    Displacement,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic features and labels.
    Synth {
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        num_test: Option<usize>,
    },
    /// Train the confidence or the displacement model.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        sam_rho: Option<f64>,
        #[arg(long)]
        mixup_alpha: Option<f64>,
        #[arg(long)]
        chunks_per_epoch: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Checkpoint and stop after this epoch.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Run both models over full videos and write detections.
    Infer {
        #[arg(long)]
        conf_ckpt: Option<PathBuf>,
        #[arg(long)]
        disp_ckpt: Option<PathBuf>,
        /// Skip the displacement consolidation step.
        #[arg(long)]
        no_displacements: bool,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        stride_s: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Print chunks per second.
        #[arg(long)]
        time: bool,
    },
    /// Score detections against the labels.
    Eval {
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Tolerance presets (repeatable): standard, tight.
        #[arg(long = "preset")]
        presets: Vec<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.common.out_dir {
        cfg.paths.out_dir = Some(d.clone());
    }
    let threads = if cli.common.deterministic {
        Some(1)
    } else {
        cli.common.threads
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let opts = RunOptions {
        deterministic: cli.common.deterministic,
    };
    match cli.command {
        Command::Synth { videos, num_test } => {
            if let Some(v) = videos {
                cfg.synth.num_videos = v;
            }
            if let Some(n) = num_test {
                cfg.synth.num_test = n;
            }
            let s = cmd_synth(&cfg)?;
            println!("videos: {}", s.videos.len());
            for (name, n) in cfg.class_names().iter().zip(&s.actions_per_class) {
                println!("{name}: {n} actions");
            }
        }
        Command::Train {
            phase,
            epochs,
            lr,
            weight_decay,
            sam_rho,
            mixup_alpha,
            chunks_per_epoch,
            batch_size,
            resume,
            stop_after,
        } => {
            let phase = match phase {
                PhaseArg::Confidence => TrainPhase::Confidence,
                PhaseArg::Displacement => TrainPhase::Displacement,
            };
            let o = cfg.optim_mut(phase);
            epochs.inspect(|&v| o.epochs = v);
            lr.inspect(|&v| o.lr0 = v);
            weight_decay.inspect(|&v| o.wd0 = v);
            sam_rho.inspect(|&v| o.sam_rho = v);
            mixup_alpha.inspect(|&v| o.mixup_alpha = v);
            chunks_per_epoch.inspect(|&v| o.chunks_per_epoch = v);
            batch_size.inspect(|&v| o.batch_size = v);
            let req = TrainRequest {
                phase,
                resume,
                stop_after,
            };
            let s = cmd_train(&cfg, &req, &opts)?;
            if let Some(last) = s.log.last() {
                println!(
                    "{phase}: {} epochs, final loss {:.6}",
                    s.epochs_run, last.loss
                );
            }
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Infer {
            conf_ckpt,
            disp_ckpt,
            no_displacements,
            split,
            stride_s,
            output,
            time,
        } => {
            if stride_s.is_some() {
                cfg.infer.stride_s = stride_s;
            }
            let out = cfg.out_dir();
            let req = InferRequest {
                conf_ckpt: conf_ckpt.unwrap_or_else(|| out.join("confidence.ckpt")),
                disp_ckpt: Some(disp_ckpt.unwrap_or_else(|| out.join("displacement.ckpt"))),
                use_displacements: !no_displacements,
                split: match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                    SplitArg::All => Split::All,
                },
                output: output.unwrap_or_else(|| out.join("detections.json")),
                stride_anchors: None,
            };
            let s = cmd_infer(&cfg, &req)?;
            println!(
                "{} detections in {} videos -> {}",
                s.detections,
                s.videos,
                req.output.display()
            );
            if time {
                println!("chunks/second: {:.1}", s.chunks_per_second());
            }
        }
        Command::Eval {
            detections,
            labels,
            presets,
            output,
        } => {
            if labels.is_some() {
                cfg.paths.labels = labels;
            }
            if !presets.is_empty() {
                cfg.eval.presets = presets;
                cfg.eval.custom.clear();
            }
            let dets = detections.unwrap_or_else(|| cfg.out_dir().join("detections.json"));
            let s = cmd_eval(&cfg, &dets, output.as_deref())?;
            print!("{}", s.summary_lines());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("densespot: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
