//! From raw outputs to detections: displacement consolidation, then
//! per-class NMS.

use crate::seqdata::DataError;
use crate::targets::sigmoid;
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub time_s: f64,
    pub class_k: usize,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocConfig {
    /// Total suppression window; anchors within half of it are suppressed.
    pub nms_window_s: f64,
    pub keep_threshold: f64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            nms_window_s: 20.0,
            keep_threshold: 0.0,
        }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<(), PostprocError> {
        if !(self.nms_window_s > 0.0 && self.nms_window_s.is_finite()) {
            return Err(PostprocError::Config(format!(
                "nms_window_s must be positive, got {}",
                self.nms_window_s
            )));
        }
        if !self.keep_threshold.is_finite() {
            return Err(PostprocError::Config(
                "keep_threshold must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Suppression radius in whole anchors at rate `f`.
    pub fn radius_anchors(&self, feature_rate_hz: f64) -> usize {
        (self.nms_window_s / 2.0 * feature_rate_hz + 1e-9).floor() as usize
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PostprocError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("invalid postprocessing configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Moves each confidence to `clip(round(t - D̂[t,k]))`, keeping the maximum
/// where several land on the same anchor. Anchors nobody lands on get 0.
pub fn consolidate(conf: &Array2<f64>, disp: &Array2<f64>) -> Result<Array2<f64>, PostprocError> {
    if conf.dim() != disp.dim() {
        return Err(PostprocError::Shape(conf.dim(), disp.dim()));
    }
    let (len, k) = conf.dim();
    let mut out = Array2::<f64>::zeros((len, k));
    if len == 0 {
        return Ok(out);
    }
    for ((t, c), &d) in disp.indexed_iter() {
        let target = crate::round_half_away(t as f64 - d);
        // NaN displacements stay in place.
        let u = if target.is_nan() {
            t
        } else {
            target.clamp(0.0, (len - 1) as f64) as usize
        };
        let v = conf[[t, c]];
        if v > out[[u, c]] {
            out[[u, c]] = v;
        }
    }
    Ok(out)
}

/// Greedy NMS on one class column; returns `(anchor, confidence)` in
/// selection order.
pub fn nms_column(
    column: ArrayView1<'_, f64>,
    radius: usize,
    keep_threshold: f64,
) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..column.len())
        .filter(|&t| column[t] > keep_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        column[b]
            .partial_cmp(&column[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut suppressed = vec![false; column.len()];
    let mut picked = Vec::new();
    for t in order {
        if suppressed[t] {
            continue;
        }
        picked.push((t, column[t]));
        let lo = t.saturating_sub(radius);
        let hi = (t + radius).min(column.len() - 1);
        suppressed[lo..=hi].iter_mut().for_each(|s| *s = true);
    }
    picked
}

/// Per-class NMS. Detections are ordered by class, then by selection.
pub fn nms_per_class(
    conf: &Array2<f64>,
    feature_rate_hz: f64,
    cfg: &PostprocConfig,
    time_offset_s: f64,
) -> Vec<Detection> {
    let radius = cfg.radius_anchors(feature_rate_hz);
    let mut out = Vec::new();
    for (k, column) in conf.columns().into_iter().enumerate() {
        for (t, c) in nms_column(column, radius, cfg.keep_threshold) {
            out.push(Detection {
                time_s: t as f64 / feature_rate_hz + time_offset_s,
                class_k: k,
                confidence: c,
            });
        }
    }
    out
}

/// Logistic, then consolidation when `use_displacements`, then NMS.
pub fn spot(
    conf_logits: &Array2<f64>,
    disp: &Array2<f64>,
    feature_rate_hz: f64,
    cfg: &PostprocConfig,
    use_displacements: bool,
) -> Result<Vec<Detection>, PostprocError> {
    cfg.validate()?;
    let conf = conf_logits.mapv(sigmoid);
    let conf = if use_displacements {
        consolidate(&conf, disp)?
    } else {
        conf
    };
    Ok(nms_per_class(&conf, feature_rate_hz, cfg, 0.0))
}

/// One line of a detection list file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub video_id: String,
    pub time_ms: i64,
    pub label: String,
    pub confidence: f64,
}

impl DetectionRecord {
    pub fn from_detection(
        video_id: &str,
        d: &Detection,
        class_names: &[String],
    ) -> Result<Self, PostprocError> {
        let label = class_names
            .get(d.class_k)
            .ok_or_else(|| PostprocError::Config(format!("no name for class {}", d.class_k)))?;
        Ok(Self {
            video_id: video_id.to_string(),
            time_ms: crate::round_half_away(d.time_s * 1000.0) as i64,
            label: label.clone(),
            confidence: d.confidence,
        })
    }
}

/// Sorts by video, time, label, then descending confidence.
pub fn sort_records(records: &mut [DetectionRecord]) {
    records.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(a.time_ms.cmp(&b.time_ms))
            .then(a.label.cmp(&b.label))
            .then(b.confidence.total_cmp(&a.confidence))
    });
}

/// Parses a detection list: a JSON array of records with non-negative
/// times and confidences in `[0, 1]`.
pub fn parse_detection_list(text: &str) -> Result<Vec<DetectionRecord>, PostprocError> {
    let records: Vec<DetectionRecord> =
        serde_json::from_str(text).map_err(|e| DataError::Parse {
            context: format!("detection list line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
    for (i, r) in records.iter().enumerate() {
        if r.time_ms < 0 {
            return Err(
                DataError::Invalid(format!("detection {i}: negative time {}", r.time_ms)).into(),
            );
        }
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(DataError::Invalid(format!(
                "detection {i}: confidence {} outside [0, 1]",
                r.confidence
            ))
            .into());
        }
    }
    Ok(records)
}

pub fn encode_detection_list(records: &[DetectionRecord]) -> String {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    serde_json::to_string_pretty(&sorted).expect("detection records always serialize")
}

pub fn write_detection_list(path: &Path, records: &[DetectionRecord]) -> Result<(), PostprocError> {
    let mut text = encode_detection_list(records);
    text.push('\n');
    crate::fsio::write_atomic(path, text.as_bytes()).map_err(|source| {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

pub fn read_detection_list(path: &Path) -> Result<Vec<DetectionRecord>, PostprocError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_detection_list(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqdata::ActionSet;
    use crate::targets::{make_confidence_targets, make_displacement_targets, RadiusConfig};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    /// Scatter-max by scanning every source for every destination.
    fn brute_consolidate(conf: &Array2<f64>, disp: &Array2<f64>) -> Array2<f64> {
        let (len, k) = conf.dim();
        Array2::from_shape_fn((len, k), |(u, c)| {
            let mut best = 0.0f64;
            for t in 0..len {
                let target = (t as f64 - disp[[t, c]])
                    .round()
                    .max(0.0)
                    .min((len - 1) as f64);
                if target == u as f64 {
                    best = best.max(conf[[t, c]]);
                }
            }
            best
        })
    }

    /// Repeated arg-max over the surviving anchors.
    fn brute_nms(conf: &Array2<f64>, f: f64, cfg: &PostprocConfig) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for k in 0..conf.ncols() {
            let mut alive: Vec<bool> = vec![true; conf.nrows()];
            loop {
                let mut best: Option<usize> = None;
                for t in 0..conf.nrows() {
                    if alive[t] && best.is_none_or(|b| conf[[t, k]] > conf[[b, k]]) {
                        best = Some(t);
                    }
                }
                let Some(b) = best else { break };
                if conf[[b, k]] <= cfg.keep_threshold {
                    break;
                }
                out.push((k, b));
                for t in 0..conf.nrows() {
                    if (t as f64 - b as f64).abs() <= cfg.nms_window_s / 2.0 * f {
                        alive[t] = false;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_displacement_is_identity() {
        let conf = array![[0.1, 0.5], [0.9, 0.2], [0.3, 0.0]];
        assert_eq!(consolidate(&conf, &Array2::zeros((3, 2))).unwrap(), conf);
    }

    #[test]
    fn single_anchor_moves() {
        let mut conf = Array2::zeros((8, 1));
        conf[[5, 0]] = 0.9;
        let mut disp = Array2::zeros((8, 1));
        disp[[5, 0]] = 2.0;
        let out = consolidate(&conf, &disp).unwrap();
        assert_eq!(out[[3, 0]], 0.9);
        assert_eq!(out[[5, 0]], 0.0);
    }

    #[test]
    fn displacement_rounds_half_away_and_clips() {
        let conf = array![[0.4], [0.6], [0.7], [0.8]];
        let disp = array![[5.0], [0.5], [-0.5], [-9.0]];
        let out = consolidate(&conf, &disp).unwrap();
        // 0 → clip(-5) = 0; 1 → round(0.5) = 1; 2 → round(2.5) = 3; 3 → clip(12) = 3.
        assert_eq!(out, array![[0.4], [0.6], [0.0], [0.8]]);
    }

    #[test]
    fn consolidate_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let conf = Array2::from_shape_simple_fn((32, 4), || rng.random::<f64>());
            let disp = Array2::from_shape_simple_fn((32, 4), || rng.random_range(-12.0..12.0));
            assert_eq!(
                consolidate(&conf, &disp).unwrap(),
                brute_consolidate(&conf, &disp)
            );
        }
    }

    #[test]
    fn nms_window_examples() {
        let f = 2.0;
        let cfg = PostprocConfig::default();
        let mut conf = Array2::zeros((200, 1));
        conf[[20, 0]] = 0.9;
        conf[[80, 0]] = 0.8;
        assert_eq!(nms_per_class(&conf, f, &cfg, 0.0).len(), 2);
        conf[[80, 0]] = 0.0;
        conf[[30, 0]] = 0.8;
        let d = nms_per_class(&conf, f, &cfg, 0.0);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].time_s, 10.0);
        assert_eq!(d[0].confidence, 0.9);
    }

    #[test]
    fn nms_radius_is_inclusive() {
        let cfg = PostprocConfig::default();
        let mut conf = Array2::zeros((60, 1));
        conf[[0, 0]] = 0.9;
        conf[[20, 0]] = 0.8;
        conf[[41, 0]] = 0.7;
        let times: Vec<f64> = nms_per_class(&conf, 2.0, &cfg, 100.0)
            .iter()
            .map(|d| d.time_s)
            .collect();
        assert_eq!(times, vec![100.0, 120.5]);
    }

    #[test]
    fn nms_ties_go_to_earliest() {
        let mut conf = Array2::zeros((10, 1));
        conf[[3, 0]] = 0.5;
        conf[[4, 0]] = 0.5;
        let d = nms_per_class(&conf, 1.0, &PostprocConfig::default(), 0.0);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].time_s, 3.0);
    }

    #[test]
    fn nms_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..200 {
            let len = rng.random_range(1..60);
            let k = rng.random_range(1..4);
            // Coarse levels force plenty of ties.
            let conf =
                Array2::from_shape_simple_fn((len, k), || rng.random_range(0..6) as f64 / 5.0);
            let cfg = PostprocConfig {
                nms_window_s: rng.random_range(0.5..12.0),
                keep_threshold: if case % 3 == 0 { 0.3 } else { 0.0 },
            };
            let f = [1.0, 2.0, 2.5][case % 3];
            let got: Vec<(usize, usize)> = nms_per_class(&conf, f, &cfg, 0.0)
                .iter()
                .map(|d| (d.class_k, (d.time_s * f).round() as usize))
                .collect();
            assert_eq!(got, brute_nms(&conf, f, &cfg), "case {case}");
        }
    }

    #[test]
    fn ablation_skips_consolidation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Array2::from_shape_simple_fn((40, 3), || rng.random_range(-4.0..4.0));
        let disp = Array2::from_shape_simple_fn((40, 3), || rng.random_range(-5.0..5.0));
        let cfg = PostprocConfig::default();
        let a = spot(&logits, &disp, 2.0, &cfg, false).unwrap();
        let b = nms_per_class(&logits.mapv(sigmoid), 2.0, &cfg, 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_logits_give_no_detections() {
        let logits = Array2::from_elem((30, 2), f64::NEG_INFINITY);
        assert!(spot(
            &logits,
            &Array2::zeros((30, 2)),
            2.0,
            &PostprocConfig::default(),
            true
        )
        .unwrap()
        .is_empty());
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(spot(&empty, &empty, 2.0, &PostprocConfig::default(), true)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn perfect_outputs_land_on_actions() {
        // Confidence high near each action, displacement pointing at it.
        let g = ActionSet::from_pairs(&[(30, 0), (100, 1), (170, 0)]);
        let r = RadiusConfig::default();
        let c = make_confidence_targets(&g, 200, 2, &r);
        let (d, _) = make_displacement_targets(&g, 200, 2, &r);
        let logits = c.mapv(|v| if v > 0.5 { logit(0.95) } else { logit(0.01) });
        let dets = spot(&logits, &d, 2.0, &PostprocConfig::default(), true).unwrap();
        let mut found: Vec<(usize, usize)> = dets
            .iter()
            .filter(|d| d.confidence > 0.5)
            .map(|d| ((d.time_s * 2.0).round() as usize, d.class_k))
            .collect();
        found.sort();
        assert_eq!(found, vec![(30, 0), (100, 1), (170, 0)]);
    }

    #[test]
    fn detection_list_round_trip() {
        let names = vec!["goal".to_string(), "card".to_string()];
        let dets = [
            Detection {
                time_s: 12.5,
                class_k: 1,
                confidence: 0.75,
            },
            Detection {
                time_s: 3.0004,
                class_k: 0,
                confidence: 0.5,
            },
        ];
        let records: Vec<DetectionRecord> = dets
            .iter()
            .map(|d| DetectionRecord::from_detection("v1", d, &names).unwrap())
            .collect();
        let text = encode_detection_list(&records);
        let back = parse_detection_list(&text).unwrap();
        assert_eq!(back[0].time_ms, 3000);
        assert_eq!(back[1].label, "card");
        assert_eq!(back[1].time_ms, 12500);
        assert!(parse_detection_list(
            r#"[{"video_id":"a","time_ms":-1,"label":"x","confidence":0.5}]"#
        )
        .is_err());
        assert!(parse_detection_list(
            r#"[{"video_id":"a","time_ms":1,"label":"x","confidence":1.5}]"#
        )
        .is_err());
        assert!(parse_detection_list(r#"[{"video_id":"a","time_ms":1,"label":"x"}]"#).is_err());
        assert!(parse_detection_list("[]").unwrap().is_empty());
    }

    fn action_sets() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        // Same-class actions stay more than a suppression window apart, so
        // every action survives NMS on its own.
        (1usize..4, 1usize..6).prop_flat_map(|(k, n)| {
            let len = 60 * n + 40;
            (
                Just(len),
                proptest::collection::vec((0usize..n, 0..k), 1..=n * k),
            )
                .prop_map(|(len, slots)| {
                    let pairs = slots
                        .into_iter()
                        .map(|(slot, c)| (20 + 60 * slot + 3 * c, c))
                        .collect();
                    (len, pairs)
                })
        })
    }

    proptest! {
        #[test]
        fn targets_are_recovered_exactly((len, pairs) in action_sets()) {
            let g = ActionSet::from_pairs(&pairs);
            let k = pairs.iter().map(|p| p.1).max().unwrap() + 1;
            let r = RadiusConfig::default();
            let c = make_confidence_targets(&g, len, k, &r);
            let (d, mask) = make_displacement_targets(&g, len, k, &r);
            let d = Array2::from_shape_fn(d.dim(), |ix| if mask[ix] { d[ix] } else { 0.0 });
            let logits = c.mapv(|v| if v > 0.5 { 10.0 } else { -10.0 });
            let dets = spot(&logits, &d, 2.0, &PostprocConfig::default(), true).unwrap();
            let mut got: Vec<(usize, usize)> = dets
                .iter()
                .filter(|d| d.confidence > 0.5)
                .map(|d| ((d.time_s * 2.0).round() as usize, d.class_k))
                .collect();
            got.sort();
            let want: Vec<(usize, usize)> = g.actions().iter().map(|a| (a.index, a.class)).collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn nms_spacing_and_mass(
            vals in proptest::collection::vec(0.0f64..1.0, 2..120),
            window in 0.5f64..30.0,
            f in prop_oneof![Just(1.0), Just(2.0), Just(2.5), Just(25.0)],
        ) {
            let conf = Array2::from_shape_vec((vals.len(), 1), vals).unwrap();
            let cfg = PostprocConfig { nms_window_s: window, keep_threshold: 0.0 };
            let dets = nms_per_class(&conf, f, &cfg, 0.0);
            for (i, a) in dets.iter().enumerate() {
                for b in &dets[i + 1..] {
                    prop_assert!((a.time_s - b.time_s).abs() > window / 2.0 - 1e-9);
                }
            }
            let disp = conf.mapv(|v| (v - 0.5) * 20.0);
            let cons = consolidate(&conf, &disp).unwrap();
            prop_assert!(cons.iter().cloned().fold(0.0, f64::max) <= conf.iter().cloned().fold(0.0, f64::max));
        }

        #[test]
        fn raising_the_maximum_keeps_it(
            vals in proptest::collection::vec(0.0f64..1.0, 2..80),
            bump in 0.0f64..0.5,
        ) {
            let mut conf = Array2::from_shape_vec((vals.len(), 1), vals).unwrap();
            let cfg = PostprocConfig { nms_window_s: 6.0, keep_threshold: 0.0 };
            let dets = nms_per_class(&conf, 2.0, &cfg, 0.0);
            if let Some(top) = dets.first() {
                let t = (top.time_s * 2.0).round() as usize;
                conf[[t, 0]] = (conf[[t, 0]] + bump).min(1.0);
                let again = nms_per_class(&conf, 2.0, &cfg, 0.0);
                prop_assert!(again.iter().any(|d| (d.time_s * 2.0).round() as usize == t));
            }
        }
    }
}
