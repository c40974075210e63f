#![allow(dead_code)]

use densespot::netcore::Trunk;
use densespot::trainer::TrainPhase;
use densespot_cli::{cmd_synth, cmd_train, RunConfig, RunOptions, TrainRequest};
use std::path::Path;
use std::process::{Command, Output};

/// Small enough to train for a few epochs in well under a second.
pub fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.paths.out_dir = Some(out.to_path_buf());
    cfg.data.chunk_len_s = 16.0;
    cfg.synth.num_videos = 4;
    cfg.synth.num_test = 1;
    cfg.synth.video_len_s = 120.0;
    cfg.synth.feature_dim = 8;
    cfg.model.trunk = Some(Trunk::Unet {
        levels: 2,
        base_width: 8,
    });
    cfg.model.mlp_widths = [16, 16];
    for phase in [TrainPhase::Confidence, TrainPhase::Displacement] {
        let o = cfg.optim_mut(phase);
        o.epochs = 5;
        o.chunks_per_epoch = 8;
        o.batch_size = 4;
        o.checkpoint_every = 2;
    }
    cfg
}

pub fn train(cfg: &RunConfig, phase: TrainPhase) {
    let req = TrainRequest {
        phase,
        resume: false,
        stop_after: None,
    };
    cmd_train(
        cfg,
        &req,
        &RunOptions {
            deterministic: true,
        },
    )
    .unwrap();
}

/// Synthetic data plus both trained phases.
pub fn trained(cfg: &RunConfig) {
    cmd_synth(cfg).unwrap();
    train(cfg, TrainPhase::Confidence);
    train(cfg, TrainPhase::Displacement);
}

pub fn write_config(cfg: &RunConfig, path: &Path) {
    std::fs::write(path, cfg.to_toml()).unwrap();
}

pub fn run_bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densespot"))
        .args(args)
        .output()
        .unwrap()
}
