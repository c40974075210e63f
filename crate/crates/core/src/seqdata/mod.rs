//! Feature sequences, ground-truth actions, chunk sampling and data files.

mod io;
mod synth;

pub use io::{
    decode_feature_bin, encode_feature_bin, labels_from_records, load_features, load_labels,
    parse_feature_csv, parse_label_document, read_label_records, write_feature_bin, write_labels,
    LabelRecord, FEATURE_MAGIC,
};
pub use synth::{class_templates, generate_synthetic, SyntheticSpec, SyntheticVideo};

use ndarray::{s, Array2};
use rand::Rng;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("unknown label {label:?} in {context}")]
    UnknownLabel { label: String, context: String },
    #[error("invalid data: {0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        DataError::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}

/// Per-timestep features of one whole video.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    /// `[T_total × P]`, one row per timestep.
    pub features: Array2<f64>,
    pub feature_rate_hz: f64,
    pub video_id: String,
}

impl FeatureSequence {
    pub fn new(
        features: Array2<f64>,
        feature_rate_hz: f64,
        video_id: impl Into<String>,
    ) -> Result<Self, DataError> {
        let video_id = video_id.into();
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(DataError::Invalid(format!(
                "{video_id}: feature matrix must be non-empty, got {:?}",
                features.dim()
            )));
        }
        if !(feature_rate_hz.is_finite() && feature_rate_hz > 0.0) {
            return Err(DataError::Invalid(format!(
                "{video_id}: feature rate must be positive, got {feature_rate_hz}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!(
                "{video_id}: non-finite feature value"
            )));
        }
        Ok(Self {
            features,
            feature_rate_hz,
            video_id,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.feature_rate_hz
    }
}

/// A ground-truth action: anchor index and class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Action {
    pub index: usize,
    pub class: usize,
}

impl Action {
    pub fn new(index: usize, class: usize) -> Self {
        Self { index, class }
    }
}

/// Set of ground-truth actions, kept sorted by `(index, class)` with
/// duplicates collapsed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ActionSet {
    actions: Vec<Action>,
}

impl ActionSet {
    pub fn new(actions: impl IntoIterator<Item = Action>) -> Self {
        let mut actions: Vec<Action> = actions.into_iter().collect();
        actions.sort_unstable();
        actions.dedup();
        Self { actions }
    }

    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self::new(pairs.iter().map(|&(t, k)| Action::new(t, k)))
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn insert(&mut self, action: Action) {
        if let Err(pos) = self.actions.binary_search(&action) {
            self.actions.insert(pos, action);
        }
    }

    /// Sorted anchor indices of the actions of class `k`.
    pub fn indices_of_class(&self, k: usize) -> Vec<usize> {
        self.actions
            .iter()
            .filter(|a| a.class == k)
            .map(|a| a.index)
            .collect()
    }

    pub fn validate(&self, len: usize, num_classes: usize) -> Result<(), DataError> {
        for a in &self.actions {
            if a.index >= len || a.class >= num_classes {
                return Err(DataError::Invalid(format!(
                    "action {a:?} outside grid {len}×{num_classes}"
                )));
            }
        }
        Ok(())
    }
}

impl FromIterator<Action> for ActionSet {
    fn from_iter<I: IntoIterator<Item = Action>>(iter: I) -> Self {
        Self::new(iter)
    }
}

/// Chunk geometry used for training and tiled inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChunkSpec {
    pub chunk_len_anchors: usize,
    pub chunk_len_seconds: f64,
    pub num_classes: usize,
}

impl ChunkSpec {
    pub fn new(chunk_len_seconds: f64, feature_rate_hz: f64, num_classes: usize) -> Self {
        let t = crate::round_half_away(chunk_len_seconds * feature_rate_hz).max(0.0) as usize;
        Self {
            chunk_len_anchors: t,
            chunk_len_seconds,
            num_classes,
        }
    }

    /// Checks the chunk length against a u-net with `levels` contractions.
    pub fn validate(&self, unet_levels: Option<usize>) -> Result<(), DataError> {
        let t = self.chunk_len_anchors;
        if t < 8 {
            return Err(DataError::Invalid(format!(
                "chunk length {t} anchors is below 8"
            )));
        }
        if let Some(levels) = unet_levels {
            let div = 1usize << levels;
            if !t.is_multiple_of(div) {
                return Err(DataError::Invalid(format!(
                    "chunk length {t} not divisible by 2^{levels}"
                )));
            }
        }
        Ok(())
    }
}

/// Milliseconds → anchor index, rounded half away from zero, clipped to
/// `[0, len-1]` when `len` is known.
pub fn ms_to_anchor(position_ms: i64, feature_rate_hz: f64, len: Option<usize>) -> usize {
    // Multiply first: ms·f is exact for dyadic rates, so exact .5 cases survive the division.
    let idx = crate::round_half_away(position_ms as f64 * feature_rate_hz / 1000.0).max(0.0);
    let idx = idx as usize;
    match len {
        Some(n) if n > 0 => idx.min(n - 1),
        _ => idx,
    }
}

/// Seconds → anchor index (half away from zero, no clipping below 0).
pub fn seconds_to_anchor(seconds: f64, feature_rate_hz: f64) -> usize {
    crate::round_half_away(seconds * feature_rate_hz).max(0.0) as usize
}

pub fn anchor_to_seconds(index: usize, feature_rate_hz: f64) -> f64 {
    index as f64 / feature_rate_hz
}

/// Uniformly samples a chunk start in `[0, T_total-1]` and extracts it.
pub fn sample_chunk<R: Rng + ?Sized>(
    seq: &FeatureSequence,
    labels: &ActionSet,
    spec: &ChunkSpec,
    rng: &mut R,
) -> (Array2<f64>, ActionSet) {
    let start = rng.random_range(0..seq.len());
    extract_chunk(seq, labels, spec.chunk_len_anchors, start)
}

/// Copies rows `start..start+len` (zero rows past the end of the video) and
/// re-indexes the actions that fall inside the window.
pub fn extract_chunk(
    seq: &FeatureSequence,
    labels: &ActionSet,
    len: usize,
    start: usize,
) -> (Array2<f64>, ActionSet) {
    let total = seq.len();
    let mut chunk = Array2::<f64>::zeros((len, seq.dim()));
    if start < total {
        let end = (start + len).min(total);
        chunk
            .slice_mut(s![..end - start, ..])
            .assign(&seq.features.slice(s![start..end, ..]));
    }
    let end = start + len;
    let actions = labels
        .actions()
        .iter()
        .filter(|a| a.index >= start && a.index < end)
        .map(|a| Action::new(a.index - start, a.class));
    (chunk, ActionSet::new(actions))
}
