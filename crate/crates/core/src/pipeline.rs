//! One experiment run: split, corrupt, train, detect, evaluate.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::harmonizer::{GradientHistogram, Partition};
use crate::label::ImageClass;
use crate::metrics::{decode_and_suppress, DetectionResult, MetricsConfig, MetricsReport, RawPrediction, SceneTruth};
use crate::model::Mlp;
use crate::objective::LossSpec;
use crate::sim::{
    build_anchor_grid, corrupt_annotations, mix_seed, rng_for, AnchorPool, Corpus, CorruptionSpec, RemovedAnnotation,
    Scene, SceneSpec,
};
use crate::train::{pool_histograms, train, TrainConfig, TrainLog};

/// Assigns every scene a fold in `0..k`, dealing shuffled AP scenes and
/// shuffled NP scenes round-robin so each fold gets near-equal counts of
/// both. NP scenes continue the deal where AP scenes stopped.
pub fn kfold_split(scenes: &[Scene], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > scenes.len() {
        return Err(Error::InvalidFolds {
            folds: k,
            scenes: scenes.len(),
        });
    }
    let mut rng = rng_for(seed, 0xF01D);
    let mut folds = vec![0; scenes.len()];
    let mut next = 0;
    for class in [ImageClass::Abnormal, ImageClass::Normal] {
        let mut idx: Vec<usize> = (0..scenes.len()).filter(|&i| scenes[i].class == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(folds)
}

/// What varies between runs of one experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSpec {
    pub loss: LossSpec,
    pub eta: f64,
    pub seed: u64,
    pub test_fold: usize,
}

/// Corruption and training streams derived from the run seed. The
/// corruption stream ignores the loss, so every loss sees the same missing
/// annotations.
pub fn corruption_seed(seed: u64) -> u64 {
    mix_seed(seed, 0xE7A)
}

pub fn training_seed(seed: u64) -> u64 {
    mix_seed(seed, 0x7A1)
}

pub struct RunOutcome {
    pub report: MetricsReport,
    pub model: Mlp,
    pub log: TrainLog,
    /// Three-way and two-way histograms over the training pool after
    /// training.
    pub final_histograms: BTreeMap<Partition, GradientHistogram>,
    pub removed: Vec<RemovedAnnotation>,
    /// Share of training anchors whose given label differs from the ideal.
    pub anchor_corruption_rate: f64,
}

/// Runs the model over every anchor of `scenes` and keeps suppressed
/// detections scoring at least `cfg.score_floor`.
pub fn detect(model: &Mlp, scenes: &[&Scene], spec: &SceneSpec, cfg: &MetricsConfig) -> Result<Vec<DetectionResult>> {
    let mut raw = Vec::new();
    for scene in scenes {
        let grid = build_anchor_grid(scene.extent, spec);
        for (i, anchor) in grid.iter().enumerate() {
            let features = crate::sim::extract_features(scene, anchor, i, spec);
            raw.push(RawPrediction {
                scene_id: scene.id,
                anchor: *anchor,
                output: model.forward(&features)?,
            });
        }
    }
    Ok(decode_and_suppress(&raw, cfg.score_floor, cfg.nms_iou))
}

fn truths<'a>(scenes: &[&'a Scene], boxes: impl Fn(&'a Scene) -> Vec<crate::sim::Bbox>) -> Vec<SceneTruth> {
    scenes
        .iter()
        .map(|s| SceneTruth {
            scene_id: s.id,
            class: s.class,
            boxes: boxes(s),
        })
        .collect()
}

/// Trains on every fold but `run.test_fold` after dropping a share `eta` of
/// its annotations, then evaluates on the held-out fold against complete
/// ground truth and on the training scenes against kept and removed
/// annotations.
pub fn run(
    corpus: &Corpus,
    folds: &[usize],
    run: &RunSpec,
    train_cfg: &TrainConfig,
    metrics_cfg: &MetricsConfig,
) -> Result<RunOutcome> {
    if folds.len() != corpus.scenes.len() {
        return Err(Error::LengthMismatch {
            left: "folds",
            left_len: folds.len(),
            right: "scenes",
            right_len: corpus.scenes.len(),
        });
    }
    let mut test: Vec<&Scene> = Vec::new();
    let mut train_scenes: Vec<Scene> = Vec::new();
    for (scene, &fold) in corpus.scenes.iter().zip(folds) {
        if fold == run.test_fold {
            test.push(scene);
        } else {
            train_scenes.push(scene.clone());
        }
    }
    if test.is_empty() || train_scenes.is_empty() {
        return Err(Error::invalid("test_fold", format!("fold {} leaves an empty split", run.test_fold)));
    }
    let (corrupted, removed) = corrupt_annotations(
        &train_scenes,
        CorruptionSpec {
            eta: run.eta,
            seed: corruption_seed(run.seed),
        },
    )?;
    let pool = AnchorPool::from_scenes(&corrupted, &corpus.spec);
    let cfg = TrainConfig {
        seed: training_seed(run.seed),
        ..train_cfg.clone()
    };
    let (model, log) = train(&pool, &run.loss, &cfg)?;
    let final_histograms = pool_histograms(&model, &pool, cfg.hist_bins)?;
    let anchor_corruption_rate = pool.anchors.iter().filter(|a| a.is_corrupted()).count() as f64 / pool.len() as f64;

    let test_dets = detect(&model, &test, &corpus.spec, metrics_cfg)?;
    let test_truth = truths(&test, |s| s.gt_boxes.clone());
    let train_refs: Vec<&Scene> = corrupted.iter().collect();
    let train_dets = detect(&model, &train_refs, &corpus.spec, metrics_cfg)?;
    let kept = truths(&train_refs, |s| s.annotated_boxes().copied().collect());
    let dropped = truths(&train_refs, |s| s.removed_boxes().copied().collect());
    let report = MetricsReport::evaluate(
        &test_dets,
        &test_truth,
        Some((&train_dets, &kept, &dropped)),
        metrics_cfg,
    )?;
    Ok(RunOutcome {
        report,
        model,
        log,
        final_histograms,
        removed,
        anchor_corruption_rate,
    })
}
