//! Tolerance-based spotting metrics: per-class AP at tolerance δ, mAP, and
//! average-mAP over a set of tolerances.

use crate::postproc::Detection;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("invalid tolerance set: {0}")]
    Tolerance(String),
    #[error("no ground-truth actions in any class")]
    NoGroundTruth,
    #[error("class {class} out of range for {num_classes} classes")]
    Class { class: usize, num_classes: usize },
    #[error("results csv line {line}: {message}")]
    Csv { line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToleranceSet {
    pub name: String,
    pub deltas_s: Vec<f64>,
}

impl ToleranceSet {
    pub fn new(name: impl Into<String>, deltas_s: Vec<f64>) -> Result<Self, EvalError> {
        if deltas_s.is_empty() {
            return Err(EvalError::Tolerance("no tolerances".into()));
        }
        if deltas_s.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(EvalError::Tolerance("tolerances must be positive".into()));
        }
        if deltas_s.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::Tolerance(
                "tolerances must be strictly ascending".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            deltas_s,
        })
    }

    /// δ = 5, 10, …, 60 s.
    pub fn standard() -> Self {
        Self {
            name: "standard".into(),
            deltas_s: (1..=12).map(|i| 5.0 * i as f64).collect(),
        }
    }

    /// δ = 1, 2, …, 5 s.
    pub fn tight() -> Self {
        Self {
            name: "tight".into(),
            deltas_s: (1..=5).map(|i| i as f64).collect(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "standard" => Some(Self::standard()),
            "tight" => Some(Self::tight()),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub time_s: f64,
    pub class_k: usize,
}

/// Outcome of matching one video's detections.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Index into the ground truth claimed by each detection (input order).
    pub matched: Vec<Option<usize>>,
    /// Ground-truth count per class, sized to the largest class seen.
    pub num_gt: Vec<usize>,
}

impl MatchResult {
    pub fn is_tp(&self, i: usize) -> bool {
        self.matched[i].is_some()
    }
}

/// Confidence ranking: higher first, ties to the earlier time, then to the
/// earlier input position.
pub fn rank_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then(
                dets[a]
                    .time_s
                    .partial_cmp(&dets[b].time_s)
                    .unwrap_or(Ordering::Equal),
            )
            .then(a.cmp(&b))
    });
    order
}

/// Greedy matching in confidence order. Each detection claims the closest
/// unmatched same-class ground truth within `delta_s` (ties to the earlier
/// one) and is a false positive when none is left.
pub fn match_detections(dets: &[Detection], gt: &[GroundTruth], delta_s: f64) -> MatchResult {
    let classes = dets
        .iter()
        .map(|d| d.class_k + 1)
        .chain(gt.iter().map(|g| g.class_k + 1))
        .max()
        .unwrap_or(0);
    let mut num_gt = vec![0; classes];
    for g in gt {
        num_gt[g.class_k] += 1;
    }
    // Same-class ground truth sorted by time, so ties resolve to the earlier one.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, g) in gt.iter().enumerate() {
        by_class[g.class_k].push(i);
    }
    for list in &mut by_class {
        list.sort_by(|&a, &b| {
            gt[a]
                .time_s
                .partial_cmp(&gt[b].time_s)
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
    }
    let mut taken = vec![false; gt.len()];
    let mut matched = vec![None; dets.len()];
    for i in rank_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for &j in &by_class[d.class_k] {
            if taken[j] {
                continue;
            }
            let dist = (gt[j].time_s - d.time_s).abs();
            if dist <= delta_s && best.is_none_or(|(_, b)| dist < b) {
                best = Some((j, dist));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            matched[i] = Some(j);
        }
    }
    MatchResult { matched, num_gt }
}

/// All-points interpolated AP of a ranked TP/FP sequence: the sum over true
/// positives of the recall step times the best precision at that recall or
/// beyond. `None` when there is no ground truth.
pub fn average_precision(ranked_tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (i, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let ap = ranked_tp
        .iter()
        .zip(&precision)
        .filter(|(hit, _)| **hit)
        .fold(0.0, |acc, (_, p)| acc + p / num_gt as f64);
    Some(ap)
}

/// Detections and ground truth of one video.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VideoEval {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaResult {
    pub delta_s: f64,
    /// AP per class; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub set_name: String,
    pub per_delta: Vec<DeltaResult>,
    pub average: f64,
}

/// Per-class AP at one tolerance, matching per video and ranking the pooled
/// detections of each class.
pub fn class_aps(
    videos: &[VideoEval],
    num_classes: usize,
    delta_s: f64,
) -> Result<Vec<Option<f64>>, EvalError> {
    // (confidence, time, video, index, tp) per class.
    let mut pooled: Vec<Vec<(f64, f64, usize, usize, bool)>> = vec![Vec::new(); num_classes];
    let mut num_gt = vec![0usize; num_classes];
    for (v, video) in videos.iter().enumerate() {
        let bad = video
            .detections
            .iter()
            .map(|d| d.class_k)
            .chain(video.ground_truth.iter().map(|g| g.class_k))
            .find(|&k| k >= num_classes);
        if let Some(class) = bad {
            return Err(EvalError::Class { class, num_classes });
        }
        let m = match_detections(&video.detections, &video.ground_truth, delta_s);
        for (k, n) in m.num_gt.iter().enumerate() {
            num_gt[k] += n;
        }
        for (i, d) in video.detections.iter().enumerate() {
            pooled[d.class_k].push((d.confidence, d.time_s, v, i, m.is_tp(i)));
        }
    }
    Ok(pooled
        .into_iter()
        .zip(num_gt)
        .map(|(mut entries, n)| {
            entries.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
                    .then((a.2, a.3).cmp(&(b.2, b.3)))
            });
            let flags: Vec<bool> = entries.iter().map(|e| e.4).collect();
            average_precision(&flags, n)
        })
        .collect())
}

/// mAP at every tolerance of the set and their mean. Classes without any
/// ground truth are left out of the mean.
pub fn average_map(
    videos: &[VideoEval],
    num_classes: usize,
    tolerances: &ToleranceSet,
) -> Result<MapReport, EvalError> {
    let mut per_delta = Vec::with_capacity(tolerances.deltas_s.len());
    for &delta_s in &tolerances.deltas_s {
        let per_class = class_aps(videos, num_classes, delta_s)?;
        let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
        if scored.is_empty() {
            return Err(EvalError::NoGroundTruth);
        }
        let map = scored.iter().sum::<f64>() / scored.len() as f64;
        per_delta.push(DeltaResult {
            delta_s,
            per_class,
            map,
        });
    }
    let average = per_delta.iter().map(|d| d.map).sum::<f64>() / per_delta.len() as f64;
    Ok(MapReport {
        set_name: tolerances.name.clone(),
        per_delta,
        average,
    })
}

/// Results table with header `delta_s,class,value`: one row per scored
/// class and tolerance, an `ALL` row per tolerance, and an `AVERAGE` row per
/// report.
pub fn results_csv(reports: &[MapReport], class_names: &[String]) -> String {
    let mut out = String::from("delta_s,class,value\n");
    for r in reports {
        for d in &r.per_delta {
            for (k, ap) in d.per_class.iter().enumerate() {
                if let Some(ap) = ap {
                    let name = class_names.get(k).cloned().unwrap_or_else(|| k.to_string());
                    let _ = writeln!(out, "{},{},{}", d.delta_s, name, ap);
                }
            }
            let _ = writeln!(out, "{},ALL,{}", d.delta_s, d.map);
        }
        let _ = writeln!(out, "AVERAGE,{},{}", r.set_name, r.average);
    }
    out
}

/// One parsed row of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    /// Tolerance in seconds, or `None` for `AVERAGE` rows.
    pub delta_s: Option<f64>,
    pub class: String,
    pub value: f64,
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "delta_s,class,value")) => {}
        _ => {
            return Err(EvalError::Csv {
                line: 1,
                message: "missing header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| EvalError::Csv {
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        let [delta, class, value] = fields[..] else {
            return Err(bad(format!("expected 3 fields, got {}", fields.len())));
        };
        let delta_s = match delta {
            "AVERAGE" => None,
            d => Some(
                d.parse::<f64>()
                    .map_err(|e| bad(format!("delta {d:?}: {e}")))?,
            ),
        };
        let value = value
            .parse::<f64>()
            .map_err(|e| bad(format!("value {value:?}: {e}")))?;
        rows.push(ResultRow {
            delta_s,
            class: class.to_string(),
            value,
        });
    }
    Ok(rows)
}
