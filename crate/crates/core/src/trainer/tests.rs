use super::*;
use crate::netcore::Trunk;
use crate::seqdata::{generate_synthetic, SyntheticSpec};
use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;

fn tiny_model() -> ModelConfig {
    ModelConfig::new(
        Trunk::Unet {
            levels: 2,
            base_width: 8,
        },
        2,
        16,
        4,
    )
}

fn tiny_data() -> TrainData {
    let spec = SyntheticSpec {
        num_videos: 3,
        video_len_s: 60.0,
        num_classes: 2,
        actions_per_class_per_min: 4.0,
        feature_dim: 4,
        ..SyntheticSpec::default()
    };
    let videos = generate_synthetic(&spec)
        .unwrap()
        .into_iter()
        .map(|v| TrainVideo {
            sequence: v.sequence,
            actions: v.actions,
        })
        .collect();
    TrainData {
        videos,
        chunk: ChunkSpec::new(8.0, 2.0, 2),
        radius: RadiusConfig::default(),
    }
}

fn tiny_optim(epochs: usize) -> OptimConfig {
    OptimConfig {
        epochs,
        chunks_per_epoch: 8,
        batch_size: 4,
        checkpoint_every: 2,
        ..OptimConfig::confidence()
    }
}

#[test]
fn zero_epochs_returns_initial_params() {
    let model = tiny_model();
    let init = Network::new(&model).unwrap().init_params(5);
    let out = train_from(
        TrainPhase::Confidence,
        &tiny_data(),
        &model,
        &tiny_optim(0),
        1,
        TrainStart::fresh(init.clone()),
        |_| panic!("no epochs"),
    )
    .unwrap();
    assert_eq!(out.params, init);
    assert!(out.log.is_empty());
    assert_eq!(out.state.step, 0);
}

#[test]
fn fixed_seed_is_bit_identical() {
    let a = train(
        TrainPhase::Confidence,
        &tiny_data(),
        &tiny_model(),
        &tiny_optim(3),
        11,
    )
    .unwrap();
    let b = train(
        TrainPhase::Confidence,
        &tiny_data(),
        &tiny_model(),
        &tiny_optim(3),
        11,
    )
    .unwrap();
    let la: Vec<u64> = a.log.iter().map(|e| e.loss.to_bits()).collect();
    let lb: Vec<u64> = b.log.iter().map(|e| e.loss.to_bits()).collect();
    assert_eq!(la, lb);
    assert_eq!(a.params, b.params);
    let c = train(
        TrainPhase::Confidence,
        &tiny_data(),
        &tiny_model(),
        &tiny_optim(3),
        12,
    )
    .unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn thread_count_does_not_change_result() {
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                train(
                    TrainPhase::Displacement,
                    &tiny_data(),
                    &tiny_model(),
                    &OptimConfig {
                        mixup_alpha: 0.0,
                        ..tiny_optim(2)
                    },
                    3,
                )
                .unwrap()
            })
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.params, b.params);
    assert_eq!(a.log[1].loss.to_bits(), b.log[1].loss.to_bits());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let model = tiny_model();
    let data = tiny_data();
    let init = Network::new(&model).unwrap().init_params(9);
    let full = train_from(
        TrainPhase::Confidence,
        &data,
        &model,
        &tiny_optim(4),
        2,
        TrainStart::fresh(init.clone()),
        |_| Ok(()),
    )
    .unwrap();

    let mut saved = None;
    let _ = train_from(
        TrainPhase::Confidence,
        &data,
        &model,
        &tiny_optim(4),
        2,
        TrainStart::fresh(init),
        |ev| {
            if ev.log.epoch == 2 {
                saved = Some((ev.params.clone(), ev.state.clone()));
                return Err(TrainError::Callback("stop".into()));
            }
            Ok(())
        },
    );
    let (params, state) = saved.unwrap();
    let resumed = train_from(
        TrainPhase::Confidence,
        &data,
        &model,
        &tiny_optim(4),
        2,
        TrainStart {
            params,
            state,
            completed_epochs: 2,
        },
        |_| Ok(()),
    )
    .unwrap();
    assert_eq!(resumed.log.len(), 2);
    assert_eq!(resumed.log[0].epoch, 3);
    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.log[1].loss.to_bits(), full.log[3].loss.to_bits());
}

#[test]
fn checkpoint_flags_follow_interval_and_end() {
    let mut flags = Vec::new();
    let model = tiny_model();
    let init = Network::new(&model).unwrap().init_params(1);
    train_from(
        TrainPhase::Confidence,
        &tiny_data(),
        &model,
        &OptimConfig {
            checkpoint_every: 2,
            ..tiny_optim(5)
        },
        0,
        TrainStart::fresh(init),
        |ev| {
            flags.push((ev.log.epoch, ev.checkpoint));
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(
        flags,
        vec![(1, false), (2, true), (3, false), (4, true), (5, true)]
    );
}

#[test]
fn logged_schedule_is_linear_decay() {
    let out = train(
        TrainPhase::Confidence,
        &tiny_data(),
        &tiny_model(),
        &tiny_optim(3),
        0,
    )
    .unwrap();
    let lrs: Vec<f64> = out.log.iter().map(|e| e.lr).collect();
    for (got, want) in lrs.iter().zip([1e-3, 1e-3 * (1.0 - 0.495), 1e-5]) {
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
    for e in &out.log {
        assert_eq!(e.phase, TrainPhase::Confidence);
        assert!((e.lr / 1e-3 - e.wd / 1e-3).abs() < 1e-15);
    }
}

#[test]
fn nan_input_aborts_with_last_good_state() {
    let model = tiny_model();
    let mut data = tiny_data();
    for v in &mut data.videos {
        v.sequence.features.fill(f64::NAN);
    }
    let init = Network::new(&model).unwrap().init_params(4);
    let err = train_from(
        TrainPhase::Confidence,
        &data,
        &model,
        &tiny_optim(2),
        0,
        TrainStart::fresh(init.clone()),
        |_| Ok(()),
    )
    .unwrap_err();
    match err {
        TrainError::Aborted {
            epoch, last_good, ..
        } => {
            assert_eq!(epoch, 1);
            assert_eq!(last_good.0, init);
            assert_eq!(last_good.1.step, 0);
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn displacement_phase_rejects_mixup() {
    let err = train(
        TrainPhase::Displacement,
        &tiny_data(),
        &tiny_model(),
        &tiny_optim(1),
        0,
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::Config(_)));
}

#[test]
fn phases_touch_disjoint_heads() {
    let model = tiny_model();
    let net = Network::new(&model).unwrap();
    let params = net.init_params(3);
    let data = tiny_data();
    let sampler = ChunkSampler::new(&data).unwrap();
    let mut rng = epoch_rng(0, 1);
    let optim = OptimConfig {
        mixup_alpha: 0.0,
        ..tiny_optim(1)
    };
    for (phase, silent) in [
        (TrainPhase::Displacement, true),
        (TrainPhase::Confidence, false),
    ] {
        let batch = sampler.batch(phase, &optim, &mut rng).unwrap();
        let (_, g) = batch_loss_grad(&net, &params, &batch).unwrap();
        for name in net.head_param_names(silent) {
            assert!(g.get(&name).iter().all(|&v| v == 0.0), "{phase}: {name}");
        }
        let other = net.head_param_names(!silent);
        assert!(
            g.get(&other[0]).iter().any(|&v| v != 0.0),
            "{phase}: {}",
            other[0]
        );
    }
}

#[test]
fn batch_gradient_is_mean_of_samples() {
    let model = tiny_model();
    let net = Network::new(&model).unwrap();
    let params = net.init_params(8);
    let data = tiny_data();
    let sampler = ChunkSampler::new(&data).unwrap();
    let optim = OptimConfig {
        batch_size: 7,
        ..tiny_optim(1)
    };
    let batch = sampler
        .batch(TrainPhase::Confidence, &optim, &mut epoch_rng(1, 1))
        .unwrap();
    let (loss, grad) = batch_loss_grad(&net, &params, &batch).unwrap();
    let mut want_loss = 0.0;
    let mut want = params.zeros_like();
    for s in batch.iter().rev() {
        let (l, g) = batch_loss_grad(&net, &params, std::slice::from_ref(s)).unwrap();
        want_loss += l / 7.0;
        want.add_scaled(1.0 / 7.0, &g);
    }
    assert!((loss - want_loss).abs() <= 1e-12 * want_loss.abs());
    for ((_, a), (_, b)) in grad.iter().zip(want.iter()) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}

/// Flat textbook Adam with decoupled decay.
struct FlatAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl FlatAdam {
    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64, wd: f64) {
        self.t += 1;
        for i in 0..p.len() {
            self.m[i] = 0.9 * self.m[i] + 0.1 * g[i];
            self.v[i] = 0.999 * self.v[i] + 0.001 * g[i] * g[i];
            let mh = self.m[i] / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v[i] / (1.0 - 0.999f64.powi(self.t));
            let old = p[i];
            p[i] = old - lr * mh / (vh.sqrt() + 1e-8) - lr * wd * old;
        }
    }
}

#[test]
fn adam_matches_flat_oracle_on_ten_parameters() {
    // L = ½ Σ a_i (p_i - c_i)², split over two tensors.
    let a: Vec<f64> = (0..10).map(|i| 0.5 + i as f64 * 0.3).collect();
    let c: Vec<f64> = (0..10).map(|i| (i as f64 * 1.7).sin()).collect();
    let grad_of = |p: &[f64]| -> Vec<f64> { (0..10).map(|i| a[i] * (p[i] - c[i])).collect() };
    let to_params = |p: &[f64]| {
        let mut m = ModelParams::new();
        m.insert(
            "u",
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), p[..4].to_vec()).unwrap(),
        );
        m.insert(
            "v",
            ArrayD::from_shape_vec(IxDyn(&[6]), p[4..].to_vec()).unwrap(),
        );
        m
    };
    let flatten = |m: &ModelParams| -> Vec<f64> {
        m.iter()
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .collect()
    };

    let mut flat = vec![0.0; 10];
    let mut oracle = FlatAdam {
        m: vec![0.0; 10],
        v: vec![0.0; 10],
        t: 0,
    };
    let mut params = to_params(&flat);
    let mut state = AdamState::new(&params);
    for step in 1..=25 {
        let (lr, wd) = (0.05, if step > 10 { 0.01 } else { 0.0 });
        let g = grad_of(&flat);
        oracle.step(&mut flat, &g, lr, wd);
        sam_step(
            &mut params,
            &mut state,
            0.0,
            lr,
            wd,
            &AdamConfig::default(),
            |p| Ok((0.0, to_params(&grad_of(&flatten(p))))),
        )
        .unwrap();
        for (x, y) in flatten(&params).iter().zip(&flat) {
            assert!(
                (x - y).abs() <= 1e-6 * y.abs().max(1e-12),
                "step {step}: {x} vs {y}"
            );
        }
    }
}

#[test]
fn mixup_extremes() {
    let a = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64);
    let b = Array2::from_shape_fn((3, 2), |(i, j)| -((i + j) as f64));
    assert_eq!(mix_pair(&a, &b, 1.0), a);
    let half = mix_pair(&a, &b, 0.5);
    for ((h, x), y) in half.iter().zip(a.iter()).zip(b.iter()) {
        assert_eq!(*h, (x + y) / 2.0);
    }
}

#[test]
fn mixup_lambda_mean() {
    // Beta(α, α) has mean ½ and variance 1/(4(2α+1)).
    let alpha = 0.2;
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mean = (0..n)
        .map(|_| sample_mixup_lambda(alpha, &mut rng).unwrap())
        .sum::<f64>()
        / n as f64;
    let sd = (1.0 / (4.0 * (2.0 * alpha + 1.0)) / n as f64).sqrt();
    assert!(
        (mean - 0.5).abs() < 3.0 * sd,
        "mean {mean}, 3σ {}",
        3.0 * sd
    );
    assert!(sample_mixup_lambda(0.0, &mut rng).is_err());
    assert!(sample_mixup_lambda(-1.0, &mut rng).is_err());
}

#[test]
fn mixup_batch_keeps_soft_targets_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch: Vec<(Array2<f64>, Array2<f64>)> = (0..5)
        .map(|i| {
            (
                Array2::from_elem((4, 2), i as f64),
                Array2::from_shape_fn((4, 3), |(t, k)| ((t + k + i) % 2) as f64),
            )
        })
        .collect();
    let mixed = mixup_batch(&batch, 0.2, &mut rng).unwrap();
    assert_eq!(mixed.len(), 5);
    for (x, c) in &mixed {
        assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Rows of x are convex combinations of two constants in [0, 4].
        assert!(x.iter().all(|&v| (0.0..=4.0).contains(&v)));
    }
    assert!(mixup_batch(&batch[..1], 0.2, &mut rng).is_err());
    assert!(mixup_batch(&batch, 0.0, &mut rng).is_err());
}

#[test]
fn sampler_prefers_long_videos() {
    let mut data = tiny_data();
    data.videos.truncate(2);
    let long = data.videos[0].sequence.features.clone();
    let short = long.slice(ndarray::s![..long.nrows() / 3, ..]).to_owned();
    data.videos[0].sequence.features = long.mapv(|_| 1.0);
    data.videos[1].sequence.features = short.mapv(|_| 2.0);
    let sampler = ChunkSampler::new(&data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 6000;
    let from_long = (0..n)
        .filter(|_| sampler.sample(&mut rng).0[[0, 0]] == 1.0)
        .count();
    // Expected share 3/4, binomial sd ≈ 0.0056.
    let share = from_long as f64 / n as f64;
    assert!((share - 0.75).abs() < 0.017, "share {share}");
}

proptest! {
    #[test]
    fn lr_and_wd_schedules_stay_proportional(lr0 in 1e-6f64..1.0, wd0 in 1e-6f64..1.0, epochs in 1usize..2000, frac in 0.0f64..1.0) {
        let e = 1 + ((epochs - 1) as f64 * frac) as usize;
        let lr = linear_decay(lr0, e, epochs).unwrap();
        let wd = linear_decay(wd0, e, epochs).unwrap();
        prop_assert!((lr / lr0 - wd / wd0).abs() < 1e-12);
        prop_assert!(lr <= lr0 && lr >= lr0 / 100.0 * (1.0 - 1e-12));
    }
}
