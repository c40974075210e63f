use crate::config::RunConfig;
use crate::tiling::TiledPlan;
use crate::CliError;
use densespot::evalmap::{average_map, results_csv, GroundTruth, MapReport, VideoEval};
use densespot::netcore::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, ModelParams, Network,
};
use densespot::postproc::{
    read_detection_list, spot, write_detection_list, Detection, DetectionRecord,
};
use densespot::seqdata::{
    generate_synthetic, load_features, read_label_records, write_labels, FeatureSequence,
    LabelRecord,
};
use densespot::trainer::{
    train_from, AdamState, EpochLog, TrainData, TrainError, TrainPhase, TrainStart, TrainVideo,
};
use ndarray::{s, Array2};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Flags shared by every command.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Writes 0 for wall-clock fields so repeated runs are byte-identical.
    pub deterministic: bool,
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    densespot::fsio::write_atomic(path, text.as_bytes())
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_list(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Summary printed by `synth`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub videos: Vec<String>,
    pub actions_per_class: Vec<usize>,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary, CliError> {
    cfg.validate()?;
    let spec = cfg.synthetic_spec();
    if cfg.synth.num_test > spec.num_videos {
        return Err(CliError::Config(format!(
            "num_test {} exceeds num_videos {}",
            cfg.synth.num_test, spec.num_videos
        )));
    }
    let videos = generate_synthetic(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    let names = cfg.class_names();
    let feat_dir = cfg.features_dir();
    create_dir(&feat_dir)?;
    let mut labels = BTreeMap::new();
    let mut counts = vec![0; spec.num_classes];
    for v in &videos {
        let id = &v.sequence.video_id;
        densespot::seqdata::write_feature_bin(
            &feat_dir.join(format!("{id}.feat")),
            &v.sequence.features,
        )
        .map_err(|e| CliError::Io(e.to_string()))?;
        let recs: Vec<(String, i64)> = v
            .events
            .iter()
            .map(|&(time, k)| {
                counts[k] += 1;
                (names[k].clone(), (time * 1000.0).round() as i64)
            })
            .collect();
        labels.insert(id.clone(), recs);
    }
    let labels_path = cfg.labels_path();
    if let Some(dir) = labels_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_labels(&labels_path, &labels).map_err(|e| CliError::Io(e.to_string()))?;
    let ids: Vec<String> = videos.iter().map(|v| v.sequence.video_id.clone()).collect();
    if cfg.synth.num_test > 0 {
        let split = ids.len() - cfg.synth.num_test;
        let list = |ids: &[String]| ids.iter().map(|i| format!("{i}\n")).collect::<String>();
        write_text(&train_list_path(cfg), &list(&ids[..split]))?;
        write_text(&test_list_path(cfg), &list(&ids[split..]))?;
    }
    Ok(SynthSummary {
        videos: ids,
        actions_per_class: counts,
    })
}

fn train_list_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths
        .train_list
        .clone()
        .unwrap_or_else(|| cfg.out_dir().join("train.txt"))
}

fn test_list_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths
        .test_list
        .clone()
        .unwrap_or_else(|| cfg.out_dir().join("test.txt"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

/// Video ids of a split: the configured list file when one exists, else
/// every video in the label file.
pub fn split_ids(
    cfg: &RunConfig,
    split: Split,
    records: &[LabelRecord],
) -> Result<Vec<String>, CliError> {
    let list = match split {
        Split::Train => Some(train_list_path(cfg)),
        Split::Test => Some(test_list_path(cfg)),
        Split::All => None,
    };
    match list {
        Some(p) if p.exists() => read_list(&p),
        Some(p) if split == Split::Train && cfg.paths.train_list.is_some() => {
            Err(CliError::Io(format!("{}: not found", p.display())))
        }
        Some(p) if split == Split::Test && cfg.paths.test_list.is_some() => {
            Err(CliError::Io(format!("{}: not found", p.display())))
        }
        _ => {
            let ids: BTreeSet<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
            Ok(ids.into_iter().map(String::from).collect())
        }
    }
}

fn feature_path(cfg: &RunConfig, id: &str) -> Result<PathBuf, CliError> {
    let dir = cfg.features_dir();
    for ext in ["feat", "csv"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(CliError::Io(format!(
        "no feature file for video {id:?} in {}",
        dir.display()
    )))
}

pub fn load_video(cfg: &RunConfig, id: &str) -> Result<FeatureSequence, CliError> {
    load_features(&feature_path(cfg, id)?, cfg.data.feature_rate_hz, id)
        .map_err(CliError::from_data)
}

fn labels_by_video(
    cfg: &RunConfig,
    records: &[LabelRecord],
) -> Result<BTreeMap<String, Vec<(f64, usize)>>, CliError> {
    let names = cfg.class_names();
    let index: HashMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut out: BTreeMap<String, Vec<(f64, usize)>> = BTreeMap::new();
    for r in records {
        let k = *index.get(r.label.as_str()).ok_or_else(|| {
            CliError::Config(format!(
                "unknown label {:?} in video {}",
                r.label, r.video_id
            ))
        })?;
        out.entry(r.video_id.clone())
            .or_default()
            .push((r.position_ms as f64 / 1000.0, k));
    }
    Ok(out)
}

/// Features and anchor-level labels of a split.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<TrainVideo>, CliError> {
    let records = read_label_records(&cfg.labels_path()).map_err(CliError::from_data)?;
    let ids = split_ids(cfg, split, &records)?;
    let mut videos = Vec::with_capacity(ids.len());
    let mut lengths = HashMap::new();
    for id in &ids {
        let seq = load_video(cfg, id)?;
        lengths.insert(id.clone(), seq.len());
        videos.push(seq);
    }
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let records: Vec<LabelRecord> = records
        .into_iter()
        .filter(|r| wanted.contains(r.video_id.as_str()))
        .collect();
    let mut labels = densespot::seqdata::labels_from_records(
        &records,
        cfg.data.feature_rate_hz,
        &cfg.class_names(),
        Some(&lengths),
    )
    .map_err(CliError::from_data)?;
    Ok(videos
        .into_iter()
        .map(|sequence| {
            let actions = labels.remove(&sequence.video_id).unwrap_or_default();
            TrainVideo { sequence, actions }
        })
        .collect())
}

pub fn checkpoint_path(cfg: &RunConfig, phase: TrainPhase) -> PathBuf {
    cfg.out_dir().join(format!("{phase}.ckpt"))
}

fn optimizer_path(cfg: &RunConfig, phase: TrainPhase) -> PathBuf {
    cfg.out_dir().join(format!("{phase}.optim.ckpt"))
}

pub fn manifest_path(cfg: &RunConfig, phase: TrainPhase) -> PathBuf {
    cfg.out_dir().join(format!("{phase}.manifest"))
}

pub fn metrics_path(cfg: &RunConfig, phase: TrainPhase) -> PathBuf {
    cfg.out_dir().join(format!("{phase}_metrics.csv"))
}

/// Sidecar next to each checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub phase: TrainPhase,
    pub epoch: usize,
    pub config_hash: String,
    pub seed: u64,
    pub adam_step: u64,
}

impl Manifest {
    pub fn encode(&self) -> String {
        format!(
            "phase={}\nepoch={}\nconfig_hash={}\nseed={}\nadam_step={}\n",
            self.phase, self.epoch, self.config_hash, self.seed, self.adam_step
        )
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("manifest line {}: expected key=value", i + 1))
            })?;
            map.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| CliError::Config(format!("manifest lacks {k}")))
        };
        let num = |k: &str| -> Result<u64, CliError> {
            get(k)?
                .parse()
                .map_err(|e| CliError::Config(format!("manifest {k}: {e}")))
        };
        let phase = match get("phase")? {
            "confidence" => TrainPhase::Confidence,
            "displacement" => TrainPhase::Displacement,
            other => return Err(CliError::Config(format!("manifest phase {other:?}"))),
        };
        Ok(Self {
            phase,
            epoch: num("epoch")? as usize,
            config_hash: get("config_hash")?.to_string(),
            seed: num("seed")?,
            adam_step: num("adam_step")?,
        })
    }
}

fn encode_state(state: &AdamState) -> Vec<u8> {
    let mut p = ModelParams::new();
    for (prefix, src) in [("m", &state.m), ("v", &state.v)] {
        for (name, t) in src.iter() {
            p.insert(format!("{prefix}/{name}"), t.clone());
        }
    }
    encode_checkpoint(&p)
}

fn decode_state(bytes: &[u8], step: u64) -> Result<AdamState, CliError> {
    let p =
        decode_checkpoint(bytes).map_err(|e| CliError::Config(format!("optimizer state: {e}")))?;
    let mut m = ModelParams::new();
    let mut v = ModelParams::new();
    for (name, t) in p.iter() {
        match name.split_once('/') {
            Some(("m", rest)) => m.insert(rest, t.clone()),
            Some(("v", rest)) => v.insert(rest, t.clone()),
            _ => {
                return Err(CliError::Config(format!(
                    "optimizer state has stray tensor {name:?}"
                )))
            }
        };
    }
    Ok(AdamState { m, v, step })
}

pub const METRICS_HEADER: &str = "epoch,phase,loss,lr,wd,wall_seconds";

fn metrics_row(e: &EpochLog, deterministic: bool) -> String {
    let wall = if deterministic { 0.0 } else { e.wall_seconds };
    format!(
        "{},{},{:e},{:e},{:e},{:.3}\n",
        e.epoch, e.phase, e.loss, e.lr, e.wd, wall
    )
}

/// Parses the loss column of a metrics CSV, by epoch.
pub fn read_metrics(path: &Path) -> Result<Vec<(usize, f64)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || {
            CliError::Config(format!(
                "{} line {}: malformed metrics row",
                path.display(),
                i + 1
            ))
        };
        if f.len() != 6 {
            return Err(bad());
        }
        out.push((
            f[0].parse().map_err(|_| bad())?,
            f[2].parse().map_err(|_| bad())?,
        ));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub log: Vec<EpochLog>,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug)]
pub struct TrainRequest {
    pub phase: TrainPhase,
    /// Continue from the phase's checkpoint, optimizer state and manifest
    /// in the output directory.
    pub resume: bool,
    /// Checkpoint and stop after this epoch, as if interrupted.
    pub stop_after: Option<usize>,
}

/// Trains one phase.
pub fn cmd_train(
    cfg: &RunConfig,
    req: &TrainRequest,
    opts: &RunOptions,
) -> Result<TrainSummary, CliError> {
    let phase = req.phase;
    cfg.validate()?;
    let optim = cfg.optim(phase).clone();
    let videos = load_split(cfg, Split::Train)?;
    if videos.is_empty() {
        return Err(CliError::Config("no training videos".into()));
    }
    let dim = videos[0].sequence.dim();
    if let Some(v) = videos.iter().find(|v| v.sequence.dim() != dim) {
        return Err(CliError::Config(format!(
            "video {} has {} features, expected {dim}",
            v.sequence.video_id,
            v.sequence.dim()
        )));
    }
    let model = cfg.model_config(dim);
    let net = Network::new(&model).map_err(|e| CliError::Config(e.to_string()))?;
    let hash = cfg.phase_hash(phase);
    let out_dir = cfg.out_dir();
    create_dir(&out_dir)?;

    let mut rows: Vec<String> = Vec::new();
    let start = if req.resume {
        let text = std::fs::read_to_string(manifest_path(cfg, phase))
            .map_err(|e| CliError::Io(format!("manifest: {e}")))?;
        let m = Manifest::parse(&text)?;
        if m.phase != phase || m.config_hash != hash || m.seed != cfg.seed {
            return Err(CliError::Config(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        let params = load_checkpoint(&checkpoint_path(cfg, phase))
            .map_err(|e| CliError::Io(e.to_string()))?;
        net.check_params(&params)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let bytes = std::fs::read(optimizer_path(cfg, phase))
            .map_err(|e| CliError::Io(format!("optimizer state: {e}")))?;
        let state = decode_state(&bytes, m.adam_step)?;
        let metrics = std::fs::read_to_string(metrics_path(cfg, phase))
            .map_err(|e| CliError::Io(format!("metrics: {e}")))?;
        rows = metrics
            .lines()
            .skip(1)
            .take(m.epoch)
            .map(|l| format!("{l}\n"))
            .collect();
        TrainStart {
            params,
            state,
            completed_epochs: m.epoch,
        }
    } else {
        let init_seed = cfg.seed
            ^ match phase {
                TrainPhase::Confidence => 0x636f_6e66,
                TrainPhase::Displacement => 0x6469_7370,
            };
        TrainStart::fresh(net.init_params(init_seed))
    };

    let data = TrainData {
        videos,
        chunk: cfg.chunk_spec(),
        radius: cfg.radius(),
    };
    let save = |params: &ModelParams,
                state: &AdamState,
                epoch: usize,
                rows: &[String]|
     -> Result<(), CliError> {
        densespot::netcore::save_checkpoint(&checkpoint_path(cfg, phase), params)
            .map_err(|e| CliError::Io(e.to_string()))?;
        densespot::fsio::write_atomic(&optimizer_path(cfg, phase), &encode_state(state))
            .map_err(|e| CliError::Io(e.to_string()))?;
        let manifest = Manifest {
            phase,
            epoch,
            config_hash: hash.clone(),
            seed: cfg.seed,
            adam_step: state.step,
        };
        write_text(&manifest_path(cfg, phase), &manifest.encode())?;
        write_text(
            &metrics_path(cfg, phase),
            &format!("{METRICS_HEADER}\n{}", rows.concat()),
        )
    };

    let completed = start.completed_epochs;
    let mut io_error = None;
    let mut stopped = Vec::new();
    let result = train_from(phase, &data, &model, &optim, cfg.seed, start, |ev| {
        rows.push(metrics_row(ev.log, opts.deterministic));
        stopped.push(ev.log.clone());
        let stop = req.stop_after == Some(ev.log.epoch);
        if ev.checkpoint || stop {
            if let Err(e) = save(ev.params, ev.state, ev.log.epoch, &rows) {
                io_error = Some(e);
                return Err(TrainError::Callback("checkpoint write failed".into()));
            }
        }
        if stop {
            return Err(TrainError::Callback("stopped".into()));
        }
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    match result {
        Err(TrainError::Callback(m)) if m == "stopped" => Ok(TrainSummary {
            epochs_run: stopped.len(),
            log: stopped,
            checkpoint: checkpoint_path(cfg, phase),
        }),
        Ok(out) => {
            let last = completed.max(optim.epochs);
            save(&out.params, &out.state, last, &rows)?;
            Ok(TrainSummary {
                epochs_run: out.log.len(),
                log: out.log,
                checkpoint: checkpoint_path(cfg, phase),
            })
        }
        Err(TrainError::Aborted {
            epoch,
            last_good,
            source,
        }) => {
            rows.truncate(epoch - 1);
            save(&last_good.0, &last_good.1, epoch - 1, &rows)?;
            Err(CliError::Numeric(format!(
                "{phase} training aborted in epoch {epoch}: {source}"
            )))
        }
        Err(TrainError::Config(m)) => Err(CliError::Config(m)),
        Err(TrainError::Model(e)) => Err(CliError::Config(e.to_string())),
        Err(e) => Err(CliError::Numeric(e.to_string())),
    }
}

/// Loads a checkpoint and checks it against the network layout.
pub fn load_model(path: &Path, net: &Network) -> Result<ModelParams, CliError> {
    let p = load_checkpoint(path).map_err(|e| match e {
        densespot::netcore::CheckpointError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Config(other.to_string()),
    })?;
    net.check_params(&p)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(p)
}

/// Raw outputs over a whole video: each tile's outputs cropped to its
/// valid region and written into the full-length grids.
pub fn infer_video(
    seq: &FeatureSequence,
    plan: &TiledPlan,
    conf: (&Network, &ModelParams),
    disp: Option<(&Network, &ModelParams)>,
) -> Result<(Array2<f64>, Array2<f64>), CliError> {
    let k = conf.0.config().num_classes;
    let len = plan.chunk_len;
    let mut logits = Array2::zeros((plan.total, k));
    let mut displacement = Array2::zeros((plan.total, k));
    let empty = densespot::seqdata::ActionSet::default();
    for tile in &plan.tiles {
        let (x, _) = densespot::seqdata::extract_chunk(seq, &empty, len, tile.start);
        let lo = tile.valid.start - tile.start;
        let hi = tile.valid.end - tile.start;
        let c = conf
            .0
            .forward(conf.1, &x)
            .map_err(|e| CliError::Config(e.to_string()))?;
        logits
            .slice_mut(s![tile.valid.clone(), ..])
            .assign(&c.conf_logits.slice(s![lo..hi, ..]));
        if let Some((net, p)) = disp {
            let d = net
                .forward(p, &x)
                .map_err(|e| CliError::Config(e.to_string()))?;
            displacement
                .slice_mut(s![tile.valid.clone(), ..])
                .assign(&d.disp.slice(s![lo..hi, ..]));
        }
    }
    Ok((logits, displacement))
}

#[derive(Clone, Debug)]
pub struct InferRequest {
    pub conf_ckpt: PathBuf,
    pub disp_ckpt: Option<PathBuf>,
    pub use_displacements: bool,
    pub split: Split,
    pub output: PathBuf,
    /// Overrides the configured stride, in anchors.
    pub stride_anchors: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct InferSummary {
    pub videos: usize,
    pub detections: usize,
    pub chunks: usize,
    pub seconds: f64,
}

impl InferSummary {
    pub fn chunks_per_second(&self) -> f64 {
        self.chunks as f64 / self.seconds.max(1e-9)
    }
}

pub fn cmd_infer(cfg: &RunConfig, req: &InferRequest) -> Result<InferSummary, CliError> {
    cfg.validate()?;
    let records = read_label_records(&cfg.labels_path()).map_err(CliError::from_data)?;
    let ids = split_ids(cfg, req.split, &records)?;
    let seqs: Vec<FeatureSequence> = ids
        .iter()
        .map(|id| load_video(cfg, id))
        .collect::<Result<_, _>>()?;
    let dim = match seqs.first() {
        Some(s) => s.dim(),
        None => cfg.synth.feature_dim,
    };
    let model = cfg.model_config(dim);
    let net = Network::new(&model).map_err(|e| CliError::Config(e.to_string()))?;
    let conf_params = load_model(&req.conf_ckpt, &net)?;
    let disp_params = match (&req.disp_ckpt, req.use_displacements) {
        (Some(p), true) => Some(load_model(p, &net)?),
        (None, true) => {
            return Err(CliError::Config(
                "displacement checkpoint required unless displacements are disabled".into(),
            ))
        }
        (_, false) => None,
    };
    let chunk = cfg.chunk_spec().chunk_len_anchors;
    let stride = match (req.stride_anchors, cfg.infer.stride_s) {
        (Some(s), _) => s,
        (None, Some(s)) => (s * cfg.data.feature_rate_hz).round() as usize,
        (None, None) => (chunk / 2).max(1),
    };
    let names = cfg.class_names();
    let mut records_out = Vec::new();
    let mut chunks = 0;
    let t0 = Instant::now();
    for seq in &seqs {
        if seq.dim() != dim {
            return Err(CliError::Config(format!(
                "video {} has {} features, expected {dim}",
                seq.video_id,
                seq.dim()
            )));
        }
        let plan = TiledPlan::new(seq.len(), chunk, stride)?;
        chunks += plan.tiles.len();
        let (logits, disp) = infer_video(
            seq,
            &plan,
            (&net, &conf_params),
            disp_params.as_ref().map(|p| (&net, p)),
        )?;
        let dets = spot(
            &logits,
            &disp,
            cfg.data.feature_rate_hz,
            &cfg.postproc,
            req.use_displacements,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        for d in &dets {
            records_out.push(
                DetectionRecord::from_detection(&seq.video_id, d, &names)
                    .map_err(|e| CliError::Config(e.to_string()))?,
            );
        }
    }
    let seconds = t0.elapsed().as_secs_f64();
    if let Some(dir) = req.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_detection_list(&req.output, &records_out).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(InferSummary {
        videos: seqs.len(),
        detections: records_out.len(),
        chunks,
        seconds,
    })
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub reports: Vec<MapReport>,
    pub csv: String,
}

impl EvalSummary {
    /// Average-mAP of a tolerance set, in percent.
    pub fn average_percent(&self, set_name: &str) -> Option<f64> {
        self.reports
            .iter()
            .find(|r| r.set_name == set_name)
            .map(|r| 100.0 * r.average)
    }

    pub fn summary_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            let _ = writeln!(
                out,
                "average-mAP ({}): {:.1}",
                r.set_name,
                100.0 * r.average
            );
        }
        out
    }
}

/// Scores a detection file against the labels of the test split (every
/// labelled video when there is no test list).
pub fn cmd_eval(
    cfg: &RunConfig,
    detections: &Path,
    output: Option<&Path>,
) -> Result<EvalSummary, CliError> {
    cfg.validate()?;
    let sets = cfg.tolerance_sets()?;
    let records = read_label_records(&cfg.labels_path()).map_err(CliError::from_data)?;
    let ids = split_ids(cfg, Split::Test, &records)?;
    let gt = labels_by_video(cfg, &records)?;
    let dets = read_detection_list(detections).map_err(|e| match e {
        densespot::postproc::PostprocError::Data(d) => CliError::from_data(d),
        other => CliError::Config(other.to_string()),
    })?;
    let names = cfg.class_names();
    let index: HashMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut by_video: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for r in &dets {
        let k = *index.get(r.label.as_str()).ok_or_else(|| {
            CliError::Config(format!("unknown label {:?} in detections", r.label))
        })?;
        by_video
            .entry(r.video_id.as_str())
            .or_default()
            .push(Detection {
                time_s: r.time_ms as f64 / 1000.0,
                class_k: k,
                confidence: r.confidence,
            });
    }
    let videos: Vec<VideoEval> = ids
        .iter()
        .map(|id| VideoEval {
            detections: by_video.remove(id.as_str()).unwrap_or_default(),
            ground_truth: gt
                .get(id)
                .map(|v| {
                    v.iter()
                        .map(|&(time_s, class_k)| GroundTruth { time_s, class_k })
                        .collect()
                })
                .unwrap_or_default(),
        })
        .collect();
    let reports = sets
        .iter()
        .map(|s| {
            average_map(&videos, cfg.data.num_classes, s)
                .map_err(|e| CliError::Config(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let csv = results_csv(&reports, &names);
    let path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir().join("results.csv"));
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_text(&path, &csv)?;
    Ok(EvalSummary { reports, csv })
}
