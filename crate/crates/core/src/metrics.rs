//! Detection evaluation: suppression, greedy matching, recall, precision,
//! NFPs, FROC, and recall against kept or removed annotations.
//!
//! Greedy matching visits detections by descending score, so whether a
//! detection is a true positive depends only on higher-scored detections.
//! One matching pass therefore gives exact counts at every score threshold,
//! which is what [`Sweep`] exploits.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::ImageClass;
use crate::model::Output;
use crate::sim::{iou, Bbox};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub scene_id: usize,
    pub bbox: Bbox,
    pub score: f64,
}

/// One anchor's raw model output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawPrediction {
    pub scene_id: usize,
    pub anchor: Bbox,
    pub output: Output,
}

/// How FROC levels are read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrocLevels {
    /// Each level is a mean number of false positives per NP scene.
    #[default]
    FpPerImage,
    /// Each level is an NFPs score; level `s` means `W = 100 - s`.
    NfpsScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub nms_iou: f64,
    pub match_iou: f64,
    pub min_precision: f64,
    /// Detections scoring below this are dropped before suppression.
    pub score_floor: f64,
    pub froc_levels: Vec<f64>,
    pub froc_mode: FrocLevels,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            nms_iou: 0.5,
            match_iou: 0.3,
            min_precision: 0.2,
            score_floor: 0.05,
            froc_levels: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            froc_mode: FrocLevels::FpPerImage,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("nms_iou", self.nms_iou),
            ("match_iou", self.match_iou),
            ("min_precision", self.min_precision),
            ("score_floor", self.score_floor),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, "must lie in [0, 1]"));
            }
        }
        if self.froc_levels.is_empty() || self.froc_levels.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::invalid("froc_levels", "need at least one finite nonnegative level"));
        }
        Ok(())
    }
}

fn by_score_desc(a: &DetectionResult, b: &DetectionResult) -> Ordering {
    b.score.total_cmp(&a.score)
}

/// Decodes offsets, keeps scores at or above `threshold`, and suppresses,
/// per scene, any box overlapping a higher-scored kept box with IoU at or
/// above `nms_iou`. Output is sorted by descending score (stable).
pub fn decode_and_suppress(preds: &[RawPrediction], threshold: f64, nms_iou: f64) -> Vec<DetectionResult> {
    let mut cands: Vec<DetectionResult> = preds
        .iter()
        .map(|p| DetectionResult {
            scene_id: p.scene_id,
            bbox: p.anchor.decode(&p.output.offsets),
            score: crate::loss::sigmoid(p.output.logit),
        })
        .filter(|d| d.score >= threshold)
        .collect();
    cands.sort_by(by_score_desc);
    suppress(cands, nms_iou)
}

/// Greedy suppression of score-sorted detections.
pub fn suppress(sorted: Vec<DetectionResult>, nms_iou: f64) -> Vec<DetectionResult> {
    let mut kept_by_scene: BTreeMap<usize, Vec<Bbox>> = BTreeMap::new();
    let mut kept = Vec::new();
    for d in sorted {
        let boxes = kept_by_scene.entry(d.scene_id).or_default();
        if boxes.iter().all(|b| iou(b, &d.bbox) < nms_iou) {
            boxes.push(d.bbox);
            kept.push(d);
        }
    }
    kept
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// False positives on each NP scene that was evaluated.
    pub np_fp: BTreeMap<usize, usize>,
}

/// Matches score-sorted detections of one scene to its ground truth; each
/// detection claims the unmatched box with the highest IoU at or above
/// `iou_thr`. Returns the true-positive flag of each detection in input
/// order.
pub fn match_scene(sorted: &[&DetectionResult], gts: &[Bbox], iou_thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    sorted
        .iter()
        .map(|d| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|&(j, _)| !taken[j])
                .map(|(j, g)| (j, iou(&d.bbox, g)))
                .filter(|&(_, v)| v >= iou_thr)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Ground truth of one evaluated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTruth {
    pub scene_id: usize,
    pub class: ImageClass,
    pub boxes: Vec<Bbox>,
}

/// Detections in evaluation order with their true-positive flags.
fn flag_detections<'a>(
    dets: &'a [DetectionResult],
    truths: &[SceneTruth],
    iou_thr: f64,
) -> Vec<(&'a DetectionResult, bool)> {
    let mut order: Vec<&DetectionResult> = dets.iter().collect();
    order.sort_by(|a, b| by_score_desc(a, b));
    let mut per_scene: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in order.iter().enumerate() {
        per_scene.entry(d.scene_id).or_default().push(i);
    }
    let mut flags = vec![false; order.len()];
    for t in truths {
        if let Some(idx) = per_scene.get(&t.scene_id) {
            let scene_dets: Vec<&DetectionResult> = idx.iter().map(|&i| order[i]).collect();
            for (&i, f) in idx.iter().zip(match_scene(&scene_dets, &t.boxes, iou_thr)) {
                flags[i] = f;
            }
        }
    }
    order.into_iter().zip(flags).collect()
}

/// Matches detections to the ground truth of `truths`; detections on scenes
/// not listed are ignored.
pub fn match_detections(dets: &[DetectionResult], truths: &[SceneTruth], iou_thr: f64) -> MatchReport {
    let known: BTreeMap<usize, &SceneTruth> = truths.iter().map(|t| (t.scene_id, t)).collect();
    let scoped: Vec<DetectionResult> = dets.iter().filter(|d| known.contains_key(&d.scene_id)).copied().collect();
    let flagged = flag_detections(&scoped, truths, iou_thr);
    let tp = flagged.iter().filter(|(_, f)| *f).count();
    let mut np_fp: BTreeMap<usize, usize> = truths
        .iter()
        .filter(|t| t.class == ImageClass::Normal)
        .map(|t| (t.scene_id, 0))
        .collect();
    for (d, f) in &flagged {
        if !f {
            if let Some(c) = np_fp.get_mut(&d.scene_id) {
                *c += 1;
            }
        }
    }
    let n_gt: usize = truths.iter().map(|t| t.boxes.len()).sum();
    MatchReport {
        tp,
        fp: flagged.len() - tp,
        fn_: n_gt - tp,
        np_fp,
    }
}

/// Conditions under which a metric was defined by convention rather than
/// by its formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Flag {
    RecallUndefined,
    PrecisionUndefined,
    PrecisionFloorUnmet,
    NoDetections,
    TRecallUndefined,
    RRecallUndefined,
}

impl Flag {
    const ALL: [Flag; 6] = [
        Flag::RecallUndefined,
        Flag::PrecisionUndefined,
        Flag::PrecisionFloorUnmet,
        Flag::NoDetections,
        Flag::TRecallUndefined,
        Flag::RRecallUndefined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Flag::RecallUndefined => "recall_undefined",
            Flag::PrecisionUndefined => "precision_undefined",
            Flag::PrecisionFloorUnmet => "precision_floor_unmet",
            Flag::NoDetections => "no_detections",
            Flag::TRecallUndefined => "t_recall_undefined",
            Flag::RRecallUndefined => "r_recall_undefined",
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Flag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Flag> {
        Flag::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid("flag", format!("unknown flag `{s}`")))
    }
}

/// `TP / (TP + FN)`, or 0 with a flag when there is no ground truth.
pub fn recall(r: &MatchReport) -> (f64, Option<Flag>) {
    ratio(r.tp, r.tp + r.fn_, Flag::RecallUndefined)
}

/// `TP / (TP + FP)`, or 0 with a flag when there are no detections.
pub fn precision(r: &MatchReport) -> (f64, Option<Flag>) {
    ratio(r.tp, r.tp + r.fp, Flag::PrecisionUndefined)
}

fn ratio(num: usize, den: usize, flag: Flag) -> (f64, Option<Flag>) {
    if den == 0 {
        (0.0, Some(flag))
    } else {
        (num as f64 / den as f64, None)
    }
}

/// `max(100 - W, 0)` for a mean of `W` detections per NP scene.
pub fn nfps_from_w(w: f64) -> f64 {
    (100.0 - w).max(0.0)
}

/// NFPs of the detections scoring at or above `threshold`.
pub fn nfps(dets: &[DetectionResult], np_scenes: &[usize], threshold: f64) -> Result<f64> {
    if np_scenes.is_empty() {
        return Err(Error::NoNormalScenes);
    }
    let count = dets
        .iter()
        .filter(|d| d.score >= threshold && np_scenes.contains(&d.scene_id))
        .count();
    Ok(nfps_from_w(count as f64 / np_scenes.len() as f64))
}

/// Counts at one score threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    /// Mean detections per NP scene.
    pub w: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Exact counts at every distinct score threshold from one matching pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    /// Descending score order; `points[k]` keeps every detection scoring at
    /// or above `points[k].threshold`. The final point has an infinite
    /// threshold and keeps nothing.
    pub points: Vec<SweepPoint>,
    pub n_gt: usize,
    pub n_np: usize,
}

impl Sweep {
    pub fn new(dets: &[DetectionResult], truths: &[SceneTruth], iou_thr: f64) -> Result<Sweep> {
        let np: BTreeMap<usize, ()> = truths
            .iter()
            .filter(|t| t.class == ImageClass::Normal)
            .map(|t| (t.scene_id, ()))
            .collect();
        if np.is_empty() {
            return Err(Error::NoNormalScenes);
        }
        let known: BTreeMap<usize, ()> = truths.iter().map(|t| (t.scene_id, ())).collect();
        let scoped: Vec<DetectionResult> = dets.iter().filter(|d| known.contains_key(&d.scene_id)).copied().collect();
        let flagged = flag_detections(&scoped, truths, iou_thr);
        let n_gt: usize = truths.iter().map(|t| t.boxes.len()).sum();
        let n_np = np.len();
        let point = |threshold, tp: usize, fp: usize, np_count: usize| SweepPoint {
            threshold,
            tp,
            fp,
            w: np_count as f64 / n_np as f64,
            recall: ratio(tp, n_gt, Flag::RecallUndefined).0,
            precision: ratio(tp, tp + fp, Flag::PrecisionUndefined).0,
        };
        let mut points = vec![point(f64::INFINITY, 0, 0, 0)];
        let (mut tp, mut fp, mut np_count) = (0, 0, 0);
        for (k, (d, is_tp)) in flagged.iter().enumerate() {
            if *is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            np_count += np.contains_key(&d.scene_id) as usize;
            let last_of_tie = flagged.get(k + 1).map_or(true, |(next, _)| next.score != d.score);
            if last_of_tie {
                points.push(point(d.score, tp, fp, np_count));
            }
        }
        points.reverse();
        Ok(Sweep { points, n_gt, n_np })
    }

    /// Lowest-threshold point, i.e. the one keeping every detection.
    pub fn lowest(&self) -> &SweepPoint {
        &self.points[0]
    }

    /// Counts at an arbitrary threshold.
    pub fn at(&self, threshold: f64) -> &SweepPoint {
        self.points
            .iter()
            .find(|p| p.threshold >= threshold)
            .expect("sweep ends with an infinite threshold")
    }

    /// Largest recall over thresholds whose `W` does not exceed `max_w`.
    pub fn recall_at_w(&self, max_w: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.w <= max_w)
            .map(|p| p.recall)
            .fold(0.0, f64::max)
    }

    pub fn froc(&self, levels: &[f64], mode: FrocLevels) -> f64 {
        let sum: f64 = levels
            .iter()
            .map(|&l| match mode {
                FrocLevels::FpPerImage => l,
                FrocLevels::NfpsScore => 100.0 - l,
            })
            .map(|w| self.recall_at_w(w))
            .sum();
        sum / levels.len() as f64
    }

    /// Lowest threshold with precision at least `min_precision`; otherwise
    /// the (lowest) threshold of maximum precision, flagged.
    pub fn operating_point(&self, min_precision: f64) -> (SweepPoint, Option<Flag>) {
        let finite = &self.points[..self.points.len() - 1];
        if finite.is_empty() {
            return (self.points[0], Some(Flag::NoDetections));
        }
        if let Some(p) = finite.iter().find(|p| p.precision >= min_precision) {
            return (*p, None);
        }
        let best = finite
            .iter()
            .fold(finite[0], |acc, p| if p.precision > acc.precision { *p } else { acc });
        (best, Some(Flag::PrecisionFloorUnmet))
    }
}

/// Recall against kept and against removed annotations of training scenes,
/// each from its own matching pass over detections at or above `threshold`.
pub fn t_r_recall(
    dets: &[DetectionResult],
    kept: &[SceneTruth],
    removed: &[SceneTruth],
    threshold: f64,
    iou_thr: f64,
) -> ((f64, Option<Flag>), (f64, Option<Flag>)) {
    let above: Vec<DetectionResult> = dets.iter().filter(|d| d.score >= threshold).copied().collect();
    let t = recall(&match_detections(&above, kept, iou_thr));
    let r = recall(&match_detections(&above, removed, iou_thr));
    (
        (t.0, t.1.map(|_| Flag::TRecallUndefined)),
        (r.0, r.1.map(|_| Flag::RRecallUndefined)),
    )
}

/// Metrics of one evaluated run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall: f64,
    pub precision: f64,
    pub nfps: f64,
    pub froc: f64,
    pub t_recall: f64,
    pub r_recall: f64,
    pub threshold: f64,
    pub flags: Vec<Flag>,
}

impl MetricsReport {
    /// Evaluates test detections against full ground truth and, when given,
    /// training detections against kept and removed annotations at the test
    /// operating threshold.
    pub fn evaluate(
        test_dets: &[DetectionResult],
        test_truth: &[SceneTruth],
        training: Option<(&[DetectionResult], &[SceneTruth], &[SceneTruth])>,
        cfg: &MetricsConfig,
    ) -> Result<MetricsReport> {
        let sweep = Sweep::new(test_dets, test_truth, cfg.match_iou)?;
        let (op, op_flag) = sweep.operating_point(cfg.min_precision);
        let mut flags: Vec<Flag> = op_flag.into_iter().collect();
        if sweep.n_gt == 0 {
            flags.push(Flag::RecallUndefined);
        }
        if op.tp + op.fp == 0 {
            flags.push(Flag::PrecisionUndefined);
        }
        let mut report = MetricsReport {
            recall: op.recall,
            precision: op.precision,
            nfps: nfps_from_w(op.w),
            froc: sweep.froc(&cfg.froc_levels, cfg.froc_mode),
            t_recall: 0.0,
            r_recall: 0.0,
            threshold: if op.threshold.is_finite() { op.threshold } else { 1.0 },
            flags: Vec::new(),
        };
        match training {
            Some((dets, kept, removed)) => {
                let (t, r) = t_r_recall(dets, kept, removed, report.threshold, cfg.match_iou);
                report.t_recall = t.0;
                report.r_recall = r.0;
                flags.extend(t.1);
                flags.extend(r.1);
            }
            None => flags.extend([Flag::TRecallUndefined, Flag::RRecallUndefined]),
        }
        flags.sort();
        flags.dedup();
        report.flags = flags;
        Ok(report)
    }

    pub fn has(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }

    /// One `key = value` line per field, in a fixed order.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        for (k, v) in self.numeric_fields() {
            writeln!(out, "{k} = {v}")?;
        }
        let flags: Vec<&str> = self.flags.iter().map(|f| f.name()).collect();
        writeln!(out, "flags = {}", flags.join(","))?;
        Ok(())
    }

    fn numeric_fields(&self) -> [(&'static str, f64); 7] {
        [
            ("recall", self.recall),
            ("precision", self.precision),
            ("nfps", self.nfps),
            ("froc", self.froc),
            ("t_recall", self.t_recall),
            ("r_recall", self.r_recall),
            ("threshold", self.threshold),
        ]
    }

    pub fn read_from(input: impl BufRead, file: &str) -> Result<MetricsReport> {
        let mut values: BTreeMap<String, String> = BTreeMap::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                file: file.to_string(),
                line: i + 1,
                reason: "expected `key = value`".into(),
            })?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        let parse_err = |reason: String| Error::Parse {
            file: file.to_string(),
            line: 0,
            reason,
        };
        let num = |k: &str| -> Result<f64> {
            values
                .get(k)
                .ok_or_else(|| parse_err(format!("missing key `{k}`")))?
                .parse()
                .map_err(|e| parse_err(format!("key `{k}`: {e}")))
        };
        let flags = match values.get("flags").map(String::as_str) {
            None | Some("") => Vec::new(),
            Some(s) => s.split(',').map(str::parse).collect::<Result<Vec<Flag>>>()?,
        };
        Ok(MetricsReport {
            recall: num("recall")?,
            precision: num("precision")?,
            nfps: num("nfps")?,
            froc: num("froc")?,
            t_recall: num("t_recall")?,
            r_recall: num("r_recall")?,
            threshold: num("threshold")?,
            flags,
        })
    }
}
