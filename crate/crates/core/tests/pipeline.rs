use dghm::metrics::{match_detections, recall, MetricsConfig, SceneTruth};
use dghm::objective::LossSpec;
use dghm::pipeline::{detect, kfold_split, run, RunSpec};
use dghm::sim::{generate_corpus, AnchorPool, CorpusSpec, Scene, SceneSpec};
use dghm::train::TrainConfig;
use dghm::{Error, ImageClass};

fn corpus(ap: usize, np: usize, scene: SceneSpec) -> dghm::sim::Corpus {
    generate_corpus(&CorpusSpec {
        ap_scenes: ap,
        np_scenes: np,
        seed: 5,
        scene,
    })
    .unwrap()
}

#[test]
fn ten_and_ten_into_five_folds() {
    let c = corpus(10, 10, SceneSpec::default());
    let folds = kfold_split(&c.scenes, 5, 1).unwrap();
    for f in 0..5 {
        let of = |class| c.scenes.iter().zip(&folds).filter(|(s, &g)| g == f && s.class == class).count();
        assert_eq!((of(ImageClass::Abnormal), of(ImageClass::Normal)), (2, 2));
    }
    assert_eq!(folds, kfold_split(&c.scenes, 5, 1).unwrap());
}

#[test]
fn leave_one_out_and_too_many_folds() {
    let c = corpus(3, 3, SceneSpec::default());
    let mut folds = kfold_split(&c.scenes, 6, 0).unwrap();
    folds.sort_unstable();
    assert_eq!(folds, vec![0, 1, 2, 3, 4, 5]);
    assert!(matches!(kfold_split(&c.scenes, 7, 0), Err(Error::InvalidFolds { .. })));
    assert!(matches!(kfold_split(&c.scenes, 1, 0), Err(Error::InvalidFolds { .. })));
}

/// Balanced accuracy of a logistic-regression probe fit by full-batch
/// gradient descent on standardized features.
fn probe_accuracy(pool: &AnchorPool) -> f64 {
    let dim = pool.anchors[0].features.len();
    let n = pool.anchors.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for a in &pool.anchors {
        for k in 0..dim {
            mean[k] += a.features[k] / n;
        }
    }
    for a in &pool.anchors {
        for k in 0..dim {
            sd[k] += (a.features[k] - mean[k]).powi(2) / n;
        }
    }
    let x: Vec<Vec<f64>> = pool
        .anchors
        .iter()
        .map(|a| (0..dim).map(|k| (a.features[k] - mean[k]) / sd[k].sqrt().max(1e-9)).collect())
        .collect();
    let y: Vec<f64> = pool.anchors.iter().map(|a| a.ideal_p_star.as_f64()).collect();
    let pos = y.iter().sum::<f64>();
    // class-balanced weights so the rare positives count
    let w: Vec<f64> = y.iter().map(|&t| if t > 0.5 { 0.5 / pos } else { 0.5 / (n - pos) }).collect();
    let mut theta = vec![0.0; dim + 1];
    for _ in 0..500 {
        let mut grad = vec![0.0; dim + 1];
        for i in 0..x.len() {
            let z = theta[dim] + (0..dim).map(|k| theta[k] * x[i][k]).sum::<f64>();
            let r = w[i] * (1.0 / (1.0 + (-z).exp()) - y[i]);
            for k in 0..dim {
                grad[k] += r * x[i][k];
            }
            grad[dim] += r;
        }
        for k in 0..=dim {
            theta[k] -= 2.0 * grad[k];
        }
    }
    let (mut tp, mut tn) = (0.0, 0.0);
    for i in 0..x.len() {
        let z = theta[dim] + (0..dim).map(|k| theta[k] * x[i][k]).sum::<f64>();
        if (z > 0.0) == (y[i] > 0.5) {
            if y[i] > 0.5 {
                tp += 1.0
            } else {
                tn += 1.0
            }
        }
    }
    0.5 * (tp / pos + tn / (n - pos))
}

#[test]
fn hard_examples_lower_separability() {
    let easy = SceneSpec {
        hard_fraction: 0.0,
        ..SceneSpec::default()
    };
    let hard = SceneSpec {
        hard_fraction: 1.0,
        ..SceneSpec::default()
    };
    let pool = |spec: &SceneSpec| {
        let c = corpus(12, 4, spec.clone());
        AnchorPool::from_scenes(&c.scenes, spec)
    };
    let (easy_acc, hard_acc) = (probe_accuracy(&pool(&easy)), probe_accuracy(&pool(&hard)));
    assert!(easy_acc > 0.95, "{easy_acc}");
    assert!(hard_acc < easy_acc - 0.05, "easy {easy_acc}, hard {hard_acc}");

    // without noise or distractors, every hard positive's signal stays
    // below one half
    let quiet = SceneSpec {
        feature_noise: 0.0,
        distractors_per_scene: [0, 0],
        ..hard
    };
    let p = pool(&quiet);
    assert!(!p.positives.is_empty());
    for &i in &p.positives {
        assert!(p.anchors[i].features[0] < 0.5);
    }
}

fn clean_separable() -> SceneSpec {
    SceneSpec {
        feature_noise: 0.0,
        hard_fraction: 0.0,
        distractors_per_scene: [0, 0],
        ..SceneSpec::default()
    }
}

fn train_truths<'a>(c: &'a dghm::sim::Corpus, folds: &[usize], test_fold: usize) -> (Vec<&'a Scene>, Vec<SceneTruth>) {
    let scenes: Vec<&Scene> = c.scenes.iter().zip(folds).filter(|(_, &f)| f != test_fold).map(|(s, _)| s).collect();
    let truths = scenes
        .iter()
        .map(|s| SceneTruth {
            scene_id: s.id,
            class: s.class,
            boxes: s.gt_boxes.clone(),
        })
        .collect();
    (scenes, truths)
}

#[test]
fn ce_learns_a_noiseless_corpus() {
    let c = corpus(16, 16, clean_separable());
    let folds = kfold_split(&c.scenes, 4, 0).unwrap();
    let spec = RunSpec {
        loss: LossSpec::Ce,
        eta: 0.0,
        seed: 0,
        test_fold: 0,
    };
    let metrics = MetricsConfig::default();
    let out = run(&c, &folds, &spec, &TrainConfig::default(), &metrics).unwrap();
    assert!(out.report.t_recall >= 0.95, "{:?}", out.report);
    assert!(out.report.has(dghm::metrics::Flag::RRecallUndefined));
    assert_eq!(out.anchor_corruption_rate, 0.0);

    // with nothing removed, T-recall is plain recall on the training scenes
    let (scenes, truths) = train_truths(&c, &folds, 0);
    let dets: Vec<_> = detect(&out.model, &scenes, &c.spec, &metrics)
        .unwrap()
        .into_iter()
        .filter(|d| d.score >= out.report.threshold)
        .collect();
    let plain = recall(&match_detections(&dets, &truths, metrics.match_iou)).0;
    assert_eq!(plain, out.report.t_recall);
}

#[test]
fn runs_are_reproducible() {
    let c = corpus(8, 8, SceneSpec::default());
    let folds = kfold_split(&c.scenes, 4, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batches_per_epoch: 30,
        ..TrainConfig::default()
    };
    let spec = RunSpec {
        loss: LossSpec::Harmonized(Default::default()),
        eta: 0.5,
        seed: 3,
        test_fold: 1,
    };
    let a = run(&c, &folds, &spec, &cfg, &MetricsConfig::default()).unwrap();
    let b = run(&c, &folds, &spec, &cfg, &MetricsConfig::default()).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.report, b.report);
    assert_eq!(a.removed, b.removed);
    assert!(a.anchor_corruption_rate > 0.0);
    assert!(!a.removed.is_empty());
}
