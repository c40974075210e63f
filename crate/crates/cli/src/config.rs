//! Run configuration, read from a TOML document.

use crate::CliError;
use densespot::evalmap::ToleranceSet;
use densespot::netcore::{ModelConfig, Trunk};
use densespot::postproc::PostprocConfig;
use densespot::seqdata::{ChunkSpec, SyntheticSpec};
use densespot::targets::RadiusConfig;
use densespot::trainer::{OptimConfig, TrainPhase};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: Option<PathBuf>,
    /// Directory holding `<video_id>.feat` or `<video_id>.csv`.
    pub features_dir: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Files listing one video id per line.
    pub train_list: Option<PathBuf>,
    pub test_list: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub feature_rate_hz: f64,
    pub num_classes: usize,
    /// Label names by class index; `class_{k}` when empty.
    pub classes: Vec<String>,
    pub chunk_len_s: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            feature_rate_hz: 2.0,
            num_classes: 3,
            classes: Vec::new(),
            chunk_len_s: 112.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_videos: usize,
    /// The last `num_test` videos go to the test list.
    pub num_test: usize,
    pub video_len_s: f64,
    pub actions_per_class_per_min: f64,
    pub bump_width_s: f64,
    pub noise_sigma: f64,
    pub feature_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            num_videos: s.num_videos,
            num_test: 0,
            video_len_s: s.video_len_s,
            actions_per_class_per_min: s.actions_per_class_per_min,
            bump_width_s: s.bump_width_s,
            noise_sigma: s.noise_sigma,
            feature_dim: s.feature_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Defaults to a u-net sized for the chunk length.
    pub trunk: Option<Trunk>,
    pub mlp_widths: [usize; 2],
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            trunk: None,
            mlp_widths: [256, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub confidence: OptimConfig,
    pub displacement: OptimConfig,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            confidence: OptimConfig::confidence(),
            displacement: OptimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadiusSection {
    pub r_c_s: f64,
    pub r_d_s: f64,
}

impl Default for RadiusSection {
    fn default() -> Self {
        Self {
            r_c_s: 3.0,
            r_d_s: 6.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Chunk stride; half a chunk when unset.
    pub stride_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Preset names (`standard`, `tight`) or custom sets.
    pub presets: Vec<String>,
    pub custom: Vec<ToleranceSet>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            presets: vec!["standard".into(), "tight".into()],
            custom: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub radius: RadiusSection,
    pub postproc: PostprocConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("run"))
    }

    pub fn features_dir(&self) -> PathBuf {
        self.paths
            .features_dir
            .clone()
            .unwrap_or_else(|| self.out_dir().join("features"))
    }

    pub fn labels_path(&self) -> PathBuf {
        self.paths
            .labels
            .clone()
            .unwrap_or_else(|| self.out_dir().join("labels.json"))
    }

    pub fn class_names(&self) -> Vec<String> {
        if self.data.classes.is_empty() {
            (0..self.data.num_classes)
                .map(SyntheticSpec::class_name)
                .collect()
        } else {
            self.data.classes.clone()
        }
    }

    pub fn chunk_spec(&self) -> ChunkSpec {
        ChunkSpec::new(
            self.data.chunk_len_s,
            self.data.feature_rate_hz,
            self.data.num_classes,
        )
    }

    pub fn radius(&self) -> RadiusConfig {
        RadiusConfig::new(
            self.radius.r_c_s,
            self.radius.r_d_s,
            self.data.feature_rate_hz,
        )
    }

    pub fn trunk(&self) -> Trunk {
        self.model
            .trunk
            .clone()
            .unwrap_or_else(|| Trunk::unet_for_chunk(self.chunk_spec().chunk_len_anchors))
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            trunk: self.trunk(),
            num_classes: self.data.num_classes,
            chunk_len: self.chunk_spec().chunk_len_anchors,
            input_dim,
            mlp_widths: self.model.mlp_widths,
        }
    }

    pub fn optim(&self, phase: TrainPhase) -> &OptimConfig {
        match phase {
            TrainPhase::Confidence => &self.optim.confidence,
            TrainPhase::Displacement => &self.optim.displacement,
        }
    }

    pub fn optim_mut(&mut self, phase: TrainPhase) -> &mut OptimConfig {
        match phase {
            TrainPhase::Confidence => &mut self.optim.confidence,
            TrainPhase::Displacement => &mut self.optim.displacement,
        }
    }

    pub fn tolerance_sets(&self) -> Result<Vec<ToleranceSet>, CliError> {
        let mut sets = Vec::new();
        for name in &self.eval.presets {
            sets.push(
                ToleranceSet::preset(name).ok_or_else(|| {
                    CliError::Config(format!("unknown tolerance preset {name:?}"))
                })?,
            );
        }
        for s in &self.eval.custom {
            sets.push(
                ToleranceSet::new(s.name.clone(), s.deltas_s.clone())
                    .map_err(|e| CliError::Config(e.to_string()))?,
            );
        }
        if sets.is_empty() {
            return Err(CliError::Config("no tolerance sets selected".into()));
        }
        Ok(sets)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_videos: self.synth.num_videos,
            video_len_s: self.synth.video_len_s,
            num_classes: self.data.num_classes,
            actions_per_class_per_min: self.synth.actions_per_class_per_min,
            bump_width_s: self.synth.bump_width_s,
            noise_sigma: self.synth.noise_sigma,
            feature_rate_hz: self.data.feature_rate_hz,
            feature_dim: self.synth.feature_dim,
            seed: self.seed,
        }
    }

    /// Checks everything that does not need the data on disk.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = &self.data;
        if !(d.feature_rate_hz > 0.0 && d.feature_rate_hz.is_finite()) {
            return bad(format!(
                "feature_rate_hz must be positive, got {}",
                d.feature_rate_hz
            ));
        }
        if d.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if !d.classes.is_empty() && d.classes.len() != d.num_classes {
            return bad(format!(
                "{} class names for {} classes",
                d.classes.len(),
                d.num_classes
            ));
        }
        if !(self.radius.r_c_s >= 0.0 && self.radius.r_d_s >= 0.0) {
            return bad("radii must be non-negative".into());
        }
        let chunk = self.chunk_spec();
        chunk
            .validate(self.trunk().unet_levels())
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.model_config(1)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        for phase in [TrainPhase::Confidence, TrainPhase::Displacement] {
            self.optim(phase)
                .validate(phase)
                .map_err(|e| CliError::Config(format!("{phase} phase: {e}")))?;
        }
        self.postproc
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(s) = self.infer.stride_s {
            let stride = (s * d.feature_rate_hz).round();
            if !(stride >= 1.0 && stride as usize <= chunk.chunk_len_anchors) {
                return bad(format!(
                    "stride_s {s} must give between 1 anchor and one chunk"
                ));
            }
        }
        self.tolerance_sets()?;
        Ok(())
    }

    /// Hex SHA-256 of what determines a training phase: data, model,
    /// radii and that phase's optimizer settings.
    pub fn phase_hash(&self, phase: TrainPhase) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            data: &'a DataConfig,
            model: &'a ModelSection,
            radius: &'a RadiusSection,
            optim: &'a OptimConfig,
            phase: TrainPhase,
        }
        let key = Key {
            data: &self.data,
            model: &self.model,
            radius: &self.radius,
            optim: self.optim(phase),
            phase,
        };
        let text = toml::to_string(&key).expect("hash key serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.optim.confidence.mixup_alpha, 0.2);
        assert_eq!(c.optim.displacement.mixup_alpha, 0.0);
        assert_eq!(c.chunk_spec().chunk_len_anchors, 224);
        assert_eq!(
            c.trunk(),
            Trunk::Unet {
                levels: 5,
                base_width: 64
            }
        );
        c.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.seed = 17;
        c.model.trunk = Some(Trunk::te_small());
        c.infer.stride_s = Some(28.0);
        c.eval
            .custom
            .push(ToleranceSet::new("mine", vec![0.5, 1.5]).unwrap());
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(
            back.phase_hash(TrainPhase::Confidence),
            c.phase_hash(TrainPhase::Confidence)
        );
    }

    #[test]
    fn sections_parse() {
        let c = RunConfig::from_toml(
            r#"
seed = 4
[data]
chunk_len_s = 56
num_classes = 2
classes = ["goal", "card"]
[model.trunk]
kind = "unet"
levels = 3
base_width = 16
[optim.displacement]
epochs = 7
"#,
        )
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.class_names(), vec!["goal", "card"]);
        assert_eq!(
            c.trunk(),
            Trunk::Unet {
                levels: 3,
                base_width: 16
            }
        );
        assert_eq!(c.optim.displacement.epochs, 7);
        assert_eq!(c.optim.displacement.mixup_alpha, 0.0);
        c.validate().unwrap();
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[data]\nfeature_rate_hz = \"fast\"").is_err());
        let reject = |text: &str| RunConfig::from_toml(text).unwrap().validate().unwrap_err();
        assert!(matches!(
            reject("[optim.displacement]\nmixup_alpha = 0.2"),
            CliError::Config(_)
        ));
        assert!(matches!(
            reject("[data]\nchunk_len_s = 3"),
            CliError::Config(_)
        ));
        assert!(matches!(
            reject("[data]\nnum_classes = 2\nclasses = [\"a\"]"),
            CliError::Config(_)
        ));
        assert!(matches!(
            reject("[postproc]\nnms_window_s = 0"),
            CliError::Config(_)
        ));
        assert!(matches!(
            reject("[eval]\npresets = [\"loose\"]"),
            CliError::Config(_)
        ));
        assert!(matches!(
            reject("[infer]\nstride_s = 500"),
            CliError::Config(_)
        ));
        assert!(matches!(
            reject("[model.trunk]\nkind = \"transformer\"\nlayers = 1\nembed = 10\nheads = 3"),
            CliError::Config(_)
        ));
    }

    #[test]
    fn hash_tracks_phase_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.optim.displacement.lr0 = 5e-4;
        assert_eq!(
            a.phase_hash(TrainPhase::Confidence),
            b.phase_hash(TrainPhase::Confidence)
        );
        assert_ne!(
            a.phase_hash(TrainPhase::Displacement),
            b.phase_hash(TrainPhase::Displacement)
        );
        assert_eq!(a.phase_hash(TrainPhase::Confidence).len(), 64);
    }
}
