//! Synthetic partially annotated detection scenes.
//!
//! An abnormal (AP) scene holds a handful of axis-aligned objects; a normal
//! (NP) scene holds none. Both kinds carry distractor blobs that light up
//! the signal channel without being objects. Annotations on objects can be
//! dropped globally at a rate `eta`; anchors are then labelled by IoU against
//! the annotations that remain, so a dropped object turns its anchors into
//! hidden false negatives in the AP-negative partition.
//!
//! Every random draw is keyed by `(master seed, scene id)` or
//! `(scene seed, anchor index)`, so generation, corruption and feature
//! extraction are reproducible bit for bit and independent of iteration
//! order.

use std::io::{BufRead, Write};

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{ImageClass, Label};

/// IoU at or above which an anchor is assigned to a box.
pub const POSITIVE_IOU: f64 = 0.5;

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(a, b))
}

/// Axis-aligned box in centre/size form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Bbox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Bbox { cx, cy, w, h }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Clips the box to `[0, width] x [0, height]`. Returns `None` when
    /// nothing of it remains inside.
    pub fn clip(&self, width: f64, height: f64) -> Option<Bbox> {
        let x0 = self.x0().max(0.0);
        let x1 = self.x1().min(width);
        let y0 = self.y0().max(0.0);
        let y1 = self.y1().min(height);
        (x1 > x0 && y1 > y0)
            .then(|| Bbox::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0))
    }

    /// Offsets `(tx, ty, tw, th)` that move this anchor onto `target`.
    pub fn encode(&self, target: &Bbox) -> [f64; 4] {
        [
            (target.cx - self.cx) / self.w,
            (target.cy - self.cy) / self.h,
            (target.w / self.w).ln(),
            (target.h / self.h).ln(),
        ]
    }

    /// Inverse of [`Bbox::encode`].
    pub fn decode(&self, offsets: &[f64; 4]) -> Bbox {
        // keep exp() finite for wild offsets from an untrained head
        let tw = offsets[2].clamp(-4.0, 4.0);
        let th = offsets[3].clamp(-4.0, 4.0);
        Bbox::new(
            self.cx + offsets[0] * self.w,
            self.cy + offsets[1] * self.h,
            self.w * tw.exp(),
            self.h * th.exp(),
        )
    }
}

/// Intersection over union. Degenerate boxes have IoU 0 with everything.
pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Geometry and appearance of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub extent: [f64; 2],
    /// Inclusive range of objects per AP scene.
    pub objects_per_ap_scene: [usize; 2],
    /// Range of object widths and heights (each drawn independently).
    pub object_size: [f64; 2],
    /// Inclusive range of distractor blobs per scene, AP and NP alike.
    pub distractors_per_scene: [usize; 2],
    pub anchor_stride: f64,
    /// One anchor of each `[w, h]` per grid position.
    pub anchor_shapes: Vec<[f64; 2]>,
    /// Standard deviation of the noise on the signal and cue channels.
    pub feature_noise: f64,
    /// Fraction of objects whose appearance is attenuated.
    pub hard_fraction: f64,
    /// Signal multiplier applied to hard objects.
    pub hard_attenuation: f64,
    /// Peak signal of a distractor relative to an easy object.
    pub distractor_amplitude: f64,
    /// Extra feature dimensions carrying pure per-anchor noise.
    pub noise_dims: usize,
    /// IoU interval over which the signal ramps from 0 to full strength;
    /// `[0, 1]` makes it linear in IoU.
    pub signal_ramp: [f64; 2],
    /// When set, object and distractor centres sit on anchor-grid positions
    /// displaced by at most this much along each axis.
    pub lattice_jitter: Option<f64>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            extent: [64.0, 64.0],
            objects_per_ap_scene: [2, 6],
            object_size: [11.0, 13.0],
            distractors_per_scene: [1, 3],
            anchor_stride: 4.0,
            anchor_shapes: vec![[12.0, 12.0]],
            feature_noise: 0.15,
            hard_fraction: 0.3,
            hard_attenuation: 0.35,
            distractor_amplitude: 0.6,
            noise_dims: 8,
            signal_ramp: [0.35, 0.55],
            lattice_jitter: None,
        }
    }
}

/// Number of feature channels before the pure-noise dimensions: signal,
/// morphology, and four box cues.
pub const BASE_FEATURES: usize = 6;

impl SceneSpec {
    pub fn feature_dim(&self) -> usize {
        BASE_FEATURES + self.noise_dims
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.extent;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Geometry(format!("extent {w}x{h} must be positive")));
        }
        let [lo, hi] = self.objects_per_ap_scene;
        if lo > hi {
            return Err(Error::invalid("objects_per_ap_scene", "empty range"));
        }
        let [dlo, dhi] = self.distractors_per_scene;
        if dlo > dhi {
            return Err(Error::invalid("distractors_per_scene", "empty range"));
        }
        let [smin, smax] = self.object_size;
        if !(smin > 0.0 && smin <= smax) {
            return Err(Error::invalid("object_size", "need 0 < min <= max"));
        }
        if smax > w || smax > h {
            return Err(Error::Geometry(format!(
                "objects up to {smax} do not fit in a {w}x{h} extent"
            )));
        }
        if !(self.anchor_stride > 0.0) {
            return Err(Error::invalid("anchor_stride", "must be positive"));
        }
        if self.anchor_shapes.is_empty() || self.anchor_shapes.iter().any(|s| !(s[0] > 0.0 && s[1] > 0.0)) {
            return Err(Error::invalid("anchor_shapes", "need at least one positive shape"));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(Error::invalid("hard_fraction", "must lie in [0, 1]"));
        }
        let [r0, r1] = self.signal_ramp;
        if !(0.0 <= r0 && r0 < r1 && r1 <= 1.0) {
            return Err(Error::invalid("signal_ramp", "need 0 <= start < end <= 1"));
        }
        if self.lattice_jitter.is_some_and(|j| !(j >= 0.0)) {
            return Err(Error::invalid("lattice_jitter", "must be nonnegative"));
        }
        if self.feature_noise < 0.0 {
            return Err(Error::invalid("feature_noise", "must be nonnegative"));
        }
        Ok(())
    }
}

/// One synthetic image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub class: ImageClass,
    pub extent: [f64; 2],
    /// Seed of this scene's private random stream.
    pub seed: u64,
    pub gt_boxes: Vec<Bbox>,
    /// Whether each ground-truth box still carries its annotation.
    pub annotated: Vec<bool>,
    /// Whether each ground-truth box has an attenuated appearance.
    pub hard: Vec<bool>,
    pub distractors: Vec<Bbox>,
}

impl Scene {
    pub fn annotated_boxes(&self) -> impl Iterator<Item = &Bbox> {
        self.gt_boxes
            .iter()
            .zip(&self.annotated)
            .filter_map(|(b, &a)| a.then_some(b))
    }

    pub fn removed_boxes(&self) -> impl Iterator<Item = &Bbox> {
        self.gt_boxes
            .iter()
            .zip(&self.annotated)
            .filter_map(|(b, &a)| (!a).then_some(b))
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn random_box(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Bbox {
    let [smin, smax] = spec.object_size;
    let w = uniform(rng, smin, smax);
    let h = uniform(rng, smin, smax);
    let Some(jitter) = spec.lattice_jitter else {
        let cx = uniform(rng, 0.5 * w, spec.extent[0] - 0.5 * w);
        let cy = uniform(rng, 0.5 * h, spec.extent[1] - 0.5 * h);
        return Bbox::new(cx, cy, w, h);
    };
    let mut on_lattice = |len: f64, size: f64| {
        let lo = 0.5 * size;
        let hi = len - 0.5 * size;
        let sites: Vec<f64> = grid_axis(len, spec.anchor_stride)
            .filter(|c| (lo..=hi).contains(c))
            .collect();
        let centre = if sites.is_empty() {
            0.5 * len
        } else {
            sites[rng.gen_range(0..sites.len())]
        };
        (centre + uniform(rng, -jitter, jitter)).clamp(lo, hi)
    };
    let cx = on_lattice(spec.extent[0], w);
    let cy = on_lattice(spec.extent[1], h);
    Bbox::new(cx, cy, w, h)
}

/// Anchor centres along one axis: as many stride steps as fit, centred.
fn grid_axis(len: f64, stride: f64) -> impl Iterator<Item = f64> {
    let n = ((len / stride).floor() as usize).max(1);
    let offset = 0.5 * (len - (n - 1) as f64 * stride);
    (0..n).map(move |k| offset + k as f64 * stride)
}

/// Draws one scene from its own seeded stream.
pub fn generate_scene(spec: &SceneSpec, class: ImageClass, id: usize, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gt_boxes = Vec::new();
    let mut hard = Vec::new();
    if class == ImageClass::Abnormal {
        let [lo, hi] = spec.objects_per_ap_scene;
        let n = rng.gen_range(lo..=hi);
        for _ in 0..n {
            gt_boxes.push(random_box(&mut rng, spec));
            hard.push(rng.gen_bool(spec.hard_fraction));
        }
    }
    let [dlo, dhi] = spec.distractors_per_scene;
    let nd = rng.gen_range(dlo..=dhi);
    let distractors = (0..nd).map(|_| random_box(&mut rng, spec)).collect();
    Ok(Scene {
        id,
        class,
        extent: spec.extent,
        seed,
        annotated: vec![true; gt_boxes.len()],
        gt_boxes,
        hard,
        distractors,
    })
}

/// A generated corpus: `ap_scenes` abnormal scenes followed by `np_scenes`
/// normal ones, ids in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: SceneSpec,
    pub seed: u64,
    pub scenes: Vec<Scene>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub ap_scenes: usize,
    pub np_scenes: usize,
    pub seed: u64,
    pub scene: SceneSpec,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            ap_scenes: 64,
            np_scenes: 64,
            seed: 42,
            scene: SceneSpec::default(),
        }
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.scene.validate()?;
    let classes = std::iter::repeat(ImageClass::Abnormal)
        .take(spec.ap_scenes)
        .chain(std::iter::repeat(ImageClass::Normal).take(spec.np_scenes));
    let scenes = classes
        .enumerate()
        .map(|(id, class)| generate_scene(&spec.scene, class, id, mix_seed(spec.seed, id as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        spec: spec.scene.clone(),
        seed: spec.seed,
        scenes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub eta: f64,
    pub seed: u64,
}

/// An annotation dropped by [`corrupt_annotations`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RemovedAnnotation {
    pub scene_id: usize,
    pub box_index: usize,
}

/// Drops exactly `round(eta * total)` annotations, chosen uniformly over the
/// whole corpus. For a fixed seed the removed set only grows with `eta`.
pub fn corrupt_annotations(
    scenes: &[Scene],
    spec: CorruptionSpec,
) -> Result<(Vec<Scene>, Vec<RemovedAnnotation>)> {
    if !(0.0..=1.0).contains(&spec.eta) {
        return Err(Error::invalid("eta", format!("{} not in [0, 1]", spec.eta)));
    }
    let mut all: Vec<RemovedAnnotation> = scenes
        .iter()
        .flat_map(|s| {
            (0..s.gt_boxes.len()).map(move |box_index| RemovedAnnotation {
                scene_id: s.id,
                box_index,
            })
        })
        .collect();
    let drop = (spec.eta * all.len() as f64).round() as usize;
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xC0_22)));
    let mut removed = all[..drop].to_vec();
    removed.sort();
    let mut out = scenes.to_vec();
    for scene in &mut out {
        scene.annotated.iter_mut().for_each(|a| *a = true);
    }
    for r in &removed {
        let scene = out
            .iter_mut()
            .find(|s| s.id == r.scene_id)
            .expect("removed annotation refers to a listed scene");
        scene.annotated[r.box_index] = false;
    }
    Ok((out, removed))
}

/// Regular grid of anchors covering the extent, centred, with one anchor per
/// shape at each position. Ordered row-major by position, then by shape.
pub fn build_anchor_grid(extent: [f64; 2], spec: &SceneSpec) -> Vec<Bbox> {
    let axis = |len: f64| grid_axis(len, spec.anchor_stride);
    let mut out = Vec::new();
    for cy in axis(extent[1]) {
        for cx in axis(extent[0]) {
            for &[w, h] in &spec.anchor_shapes {
                out.push(Bbox::new(cx, cy, w, h));
            }
        }
    }
    out
}

/// An anchor with its features and both the given and the ideal label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledAnchor {
    pub scene_id: usize,
    pub anchor_index: usize,
    pub anchor: Bbox,
    pub features: Vec<f64>,
    /// Label from the annotations that survived corruption.
    pub p_star: Label,
    /// Label from every ground-truth box.
    pub ideal_p_star: Label,
    pub class: ImageClass,
    /// Offsets to the best-matching annotated box, for positives.
    pub target: Option<[f64; 4]>,
}

impl LabeledAnchor {
    /// Given label disagrees with the ideal one.
    pub fn is_corrupted(&self) -> bool {
        self.p_star != self.ideal_p_star
    }
}

fn best_match<'a>(anchor: &Bbox, boxes: impl Iterator<Item = &'a Bbox>) -> Option<(f64, &'a Bbox)> {
    boxes
        .map(|b| (iou(anchor, b), b))
        .fold(None, |best, cur| match best {
            Some((v, _)) if v >= cur.0 => best,
            _ => Some(cur),
        })
}

/// Labels every anchor of a scene by IoU and attaches its features.
pub fn assign_labels(anchors: &[Bbox], scene: &Scene, spec: &SceneSpec) -> Vec<LabeledAnchor> {
    anchors
        .iter()
        .enumerate()
        .map(|(anchor_index, anchor)| {
            let ideal = best_match(anchor, scene.gt_boxes.iter())
                .map_or(false, |(v, _)| v >= POSITIVE_IOU);
            let given = best_match(anchor, scene.annotated_boxes()).filter(|(v, _)| *v >= POSITIVE_IOU);
            LabeledAnchor {
                scene_id: scene.id,
                anchor_index,
                anchor: *anchor,
                features: extract_features(scene, anchor, anchor_index, spec),
                p_star: Label::from(given.is_some()),
                ideal_p_star: Label::from(ideal),
                class: scene.class,
                target: given.map(|(_, b)| anchor.encode(b)),
            }
        })
        .collect()
}

impl SceneSpec {
    /// Monotone map from IoU to signal strength, smooth-stepped over
    /// `signal_ramp`.
    pub fn ramp(&self, v: f64) -> f64 {
        let [r0, r1] = self.signal_ramp;
        let t = ((v - r0) / (r1 - r0)).clamp(0.0, 1.0);
        if self.signal_ramp == [0.0, 1.0] {
            t
        } else {
            t * t * (3.0 - 2.0 * t)
        }
    }
}

/// Synthetic appearance of one anchor.
///
/// Channel layout:
/// - 0: signal, the strongest of `amp * r(IoU)` over objects (amp is
///   `hard_attenuation` for hard objects, 1 otherwise) and
///   `distractor_amplitude * r(IoU)` over distractors, where `r` ramps
///   smoothly from 0 to 1 across `signal_ramp`;
/// - 1: morphology, `amp * r(IoU)` over objects only, at half the
///   noise-free contrast of the signal channel;
/// - 2..6: the offsets from the anchor to its best-overlapping object,
///   scaled by `r` of that IoU;
/// - the rest: unit-variance noise.
///
/// Channels 0..6 carry Gaussian noise of standard deviation
/// `feature_noise`. All draws come from a stream keyed by the scene seed
/// and anchor index.
pub fn extract_features(scene: &Scene, anchor: &Bbox, anchor_index: usize, spec: &SceneSpec) -> Vec<f64> {
    let mut rng = rng_for(scene.seed, anchor_index as u64 + 1);
    let mut gauss = move || -> f64 {
        // Box-Muller keeps the stream independent of external crates' sampler changes
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let object = scene
        .gt_boxes
        .iter()
        .zip(&scene.hard)
        .map(|(b, &hard)| {
            let amp = if hard { spec.hard_attenuation } else { 1.0 };
            (spec.ramp(iou(anchor, b)), amp, b)
        })
        .fold(None::<(f64, f64, &Bbox)>, |best, cur| match best {
            Some(b) if b.0 >= cur.0 => Some(b),
            _ => Some(cur),
        });
    let object_signal = object.map_or(0.0, |(v, amp, _)| amp * v);
    let distractor_signal = scene
        .distractors
        .iter()
        .map(|d| spec.distractor_amplitude * spec.ramp(iou(anchor, d)))
        .fold(0.0, f64::max);
    let sigma = spec.feature_noise;
    let mut features = Vec::with_capacity(spec.feature_dim());
    features.push(object_signal.max(distractor_signal) + sigma * gauss());
    features.push(0.5 * object_signal + sigma * gauss());
    let cues = object.map_or([0.0; 4], |(v, _, b)| {
        let t = anchor.encode(b);
        [v * t[0], v * t[1], v * t[2], v * t[3]]
    });
    for c in cues {
        features.push(c + sigma * gauss());
    }
    for _ in 0..spec.noise_dims {
        features.push(gauss());
    }
    features
}

/// Every labelled anchor of a set of scenes, indexed by sampling stratum.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AnchorPool {
    pub anchors: Vec<LabeledAnchor>,
    pub positives: Vec<usize>,
    pub ap_negatives: Vec<usize>,
    pub np_negatives: Vec<usize>,
}

impl AnchorPool {
    pub fn from_scenes<'a>(scenes: impl IntoIterator<Item = &'a Scene>, spec: &SceneSpec) -> Self {
        let mut pool = AnchorPool::default();
        for scene in scenes {
            let grid = build_anchor_grid(scene.extent, spec);
            for anchor in assign_labels(&grid, scene, spec) {
                pool.push(anchor);
            }
        }
        pool
    }

    pub fn push(&mut self, anchor: LabeledAnchor) {
        let i = self.anchors.len();
        match (anchor.p_star, anchor.class) {
            (Label::Positive, _) => self.positives.push(i),
            (Label::Negative, ImageClass::Abnormal) => self.ap_negatives.push(i),
            (Label::Negative, ImageClass::Normal) => self.np_negatives.push(i),
        }
        self.anchors.push(anchor);
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn negatives(&self) -> usize {
        self.ap_negatives.len() + self.np_negatives.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub batch_size: usize,
    /// Share of positives in a full batch (1:3 gives 0.25).
    pub positive_fraction: f64,
    /// Share of negatives drawn from AP scenes. `None` draws uniformly from
    /// all negatives.
    pub ap_negative_share: Option<f64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            batch_size: 8,
            positive_fraction: 0.25,
            ap_negative_share: None,
        }
    }
}

/// Indices into the pool for one mini-batch, and whether the positive quota
/// could not be met.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniBatch {
    pub indices: Vec<usize>,
    pub short_of_positives: bool,
}

fn pick(rng: &mut ChaCha8Rng, from: &[usize], k: usize, out: &mut Vec<usize>) {
    let k = k.min(from.len());
    out.extend(index::sample(rng, from.len(), k).into_iter().map(|i| from[i]));
}

/// Draws a 1:3 positive/negative mini-batch without replacement.
///
/// With fewer positives than the quota, every available positive is used
/// with three times as many negatives; with none, the batch is filled with
/// negatives.
pub fn sample_minibatch(pool: &AnchorPool, cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> MiniBatch {
    let want_pos = (cfg.batch_size as f64 * cfg.positive_fraction).round() as usize;
    let have_pos = pool.positives.len();
    let ratio = (1.0 - cfg.positive_fraction) / cfg.positive_fraction.max(f64::MIN_POSITIVE);
    let (n_pos, n_neg, short) = if have_pos >= want_pos {
        (want_pos, cfg.batch_size - want_pos, false)
    } else if have_pos == 0 {
        warn!("no positives in pool; drawing an all-negative batch");
        (0, cfg.batch_size, true)
    } else {
        warn!("only {have_pos} positives for a quota of {want_pos}");
        (have_pos, (have_pos as f64 * ratio).round() as usize, true)
    };
    let mut indices = Vec::with_capacity(n_pos + n_neg);
    pick(rng, &pool.positives, n_pos, &mut indices);
    match cfg.ap_negative_share {
        None => {
            let total = pool.negatives();
            let k = n_neg.min(total);
            let split = pool.ap_negatives.len();
            for i in index::sample(rng, total, k) {
                indices.push(if i < split {
                    pool.ap_negatives[i]
                } else {
                    pool.np_negatives[i - split]
                });
            }
        }
        Some(share) => {
            let mut n_ap = (n_neg as f64 * share).round() as usize;
            n_ap = n_ap.min(pool.ap_negatives.len());
            let n_np = (n_neg - n_ap).min(pool.np_negatives.len());
            // top up from AP negatives if NP negatives ran out
            let n_ap = (n_neg - n_np).min(pool.ap_negatives.len());
            pick(rng, &pool.ap_negatives, n_ap, &mut indices);
            pick(rng, &pool.np_negatives, n_np, &mut indices);
        }
    }
    MiniBatch {
        indices,
        short_of_positives: short,
    }
}

/// Writes the corpus as line records:
///
/// ```text
/// scene <id> <AP|NP> <seed> <width> <height> <n_boxes> <n_distractors>
/// box <index> <cx> <cy> <w> <h> <annotated 0|1> <hard 0|1>
/// distractor <index> <cx> <cy> <w> <h>
/// ```
///
/// Floats use the shortest representation that round-trips exactly.
pub fn write_corpus_records(scenes: &[Scene], mut out: impl Write) -> Result<()> {
    for s in scenes {
        writeln!(
            out,
            "scene {} {} {} {} {} {} {}",
            s.id,
            s.class.tag(),
            s.seed,
            s.extent[0],
            s.extent[1],
            s.gt_boxes.len(),
            s.distractors.len()
        )?;
        for (i, b) in s.gt_boxes.iter().enumerate() {
            writeln!(
                out,
                "box {} {} {} {} {} {} {}",
                i,
                b.cx,
                b.cy,
                b.w,
                b.h,
                u8::from(s.annotated[i]),
                u8::from(s.hard[i])
            )?;
        }
        for (i, d) in s.distractors.iter().enumerate() {
            writeln!(out, "distractor {} {} {} {} {}", i, d.cx, d.cy, d.w, d.h)?;
        }
    }
    Ok(())
}

pub fn read_corpus_records(input: impl BufRead, file: &str) -> Result<Vec<Scene>> {
    let mut scenes: Vec<Scene> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let err = |reason: &str| Error::Parse {
            file: file.to_string(),
            line: n + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| -> Result<f64> {
            fields
                .get(i)
                .and_then(|f| f.parse::<f64>().ok())
                .ok_or_else(|| err("bad number"))
        };
        let int = |i: usize| -> Result<u64> {
            fields
                .get(i)
                .and_then(|f| f.parse::<u64>().ok())
                .ok_or_else(|| err("bad integer"))
        };
        match fields.first().copied() {
            None => continue,
            Some("scene") => {
                let class = fields
                    .get(2)
                    .and_then(|t| ImageClass::from_tag(t))
                    .ok_or_else(|| err("bad image class"))?;
                scenes.push(Scene {
                    id: int(1)? as usize,
                    class,
                    seed: int(3)?,
                    extent: [num(4)?, num(5)?],
                    gt_boxes: Vec::new(),
                    annotated: Vec::new(),
                    hard: Vec::new(),
                    distractors: Vec::new(),
                });
            }
            Some("box") => {
                let scene = scenes.last_mut().ok_or_else(|| err("box before scene"))?;
                scene.gt_boxes.push(Bbox::new(num(2)?, num(3)?, num(4)?, num(5)?));
                scene.annotated.push(int(6)? == 1);
                scene.hard.push(int(7)? == 1);
            }
            Some("distractor") => {
                let scene = scenes.last_mut().ok_or_else(|| err("distractor before scene"))?;
                scene.distractors.push(Bbox::new(num(2)?, num(3)?, num(4)?, num(5)?));
            }
            Some(other) => return Err(err(&format!("unknown record `{other}`"))),
        }
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small_corpus(eta: f64) -> (Vec<Scene>, Vec<RemovedAnnotation>) {
        let spec = CorpusSpec {
            ap_scenes: 12,
            np_scenes: 6,
            seed: 5,
            scene: SceneSpec::default(),
        };
        let corpus = generate_corpus(&spec).unwrap();
        corrupt_annotations(&corpus.scenes, CorruptionSpec { eta, seed: 9 }).unwrap()
    }

    #[test]
    fn iou_values() {
        let a = Bbox::new(1.0, 1.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Bbox::new(10.0, 10.0, 2.0, 2.0)), 0.0);
        assert_relative_eq!(iou(&a, &Bbox::new(2.0, 1.0, 2.0, 2.0)), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn encode_decode_inverse() {
        let anchor = Bbox::new(10.0, 12.0, 8.0, 6.0);
        let target = Bbox::new(11.5, 10.0, 9.0, 7.5);
        let back = anchor.decode(&anchor.encode(&target));
        assert_relative_eq!(back.cx, target.cx, epsilon = 1e-12);
        assert_relative_eq!(back.h, target.h, epsilon = 1e-12);
    }

    #[test]
    fn scenes() {
        let spec = SceneSpec::default();
        let np = generate_scene(&spec, ImageClass::Normal, 0, 3).unwrap();
        assert!(np.gt_boxes.is_empty());
        let a = generate_scene(&spec, ImageClass::Abnormal, 1, 17).unwrap();
        let b = generate_scene(&spec, ImageClass::Abnormal, 1, 17).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.annotated, vec![true; a.gt_boxes.len()]);
        let three = SceneSpec {
            objects_per_ap_scene: [3, 3],
            ..SceneSpec::default()
        };
        let s = generate_scene(&three, ImageClass::Abnormal, 2, 99).unwrap();
        assert_eq!(s.gt_boxes.len(), 3);
        for b in &s.gt_boxes {
            assert!(b.w > 0.0 && b.h > 0.0);
            assert!(b.x0() >= 0.0 && b.x1() <= 64.0 && b.y0() >= 0.0 && b.y1() <= 64.0);
        }
    }

    #[test]
    fn impossible_geometry_is_rejected() {
        let spec = SceneSpec {
            object_size: [70.0, 80.0],
            ..SceneSpec::default()
        };
        assert!(matches!(
            generate_scene(&spec, ImageClass::Abnormal, 0, 1),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn corruption_counts() {
        let (clean, removed) = small_corpus(0.0);
        assert!(removed.is_empty());
        assert!(clean.iter().all(|s| s.annotated.iter().all(|&a| a)));

        let (all_gone, removed) = small_corpus(1.0);
        let total: usize = all_gone.iter().map(|s| s.gt_boxes.len()).sum();
        assert_eq!(removed.len(), total);
        assert!(all_gone.iter().all(|s| s.annotated.iter().all(|&a| !a)));

        let scenes: Vec<Scene> = (0..5)
            .map(|id| {
                let mut s = generate_scene(
                    &SceneSpec {
                        objects_per_ap_scene: [2, 2],
                        ..SceneSpec::default()
                    },
                    ImageClass::Abnormal,
                    id,
                    id as u64,
                )
                .unwrap();
                s.id = id;
                s
            })
            .collect();
        let spec = CorruptionSpec { eta: 0.5, seed: 4 };
        let (_, r1) = corrupt_annotations(&scenes, spec).unwrap();
        let (_, r2) = corrupt_annotations(&scenes, spec).unwrap();
        assert_eq!(r1.len(), 5);
        assert_eq!(r1, r2);
        assert!(corrupt_annotations(&scenes, CorruptionSpec { eta: 1.5, seed: 0 }).is_err());
    }

    #[test]
    fn anchor_grid_counts() {
        let spec = SceneSpec {
            anchor_stride: 5.0,
            anchor_shapes: vec![[2.0, 2.0]],
            ..SceneSpec::default()
        };
        let grid = build_anchor_grid([10.0, 10.0], &spec);
        assert_eq!(grid.len(), 4);
        assert_eq!((grid[0].cx, grid[0].cy), (2.5, 2.5));
        let wide = SceneSpec {
            anchor_stride: 20.0,
            ..spec.clone()
        };
        assert_eq!(build_anchor_grid([10.0, 10.0], &wide).len(), 1);
        let two = SceneSpec {
            anchor_shapes: vec![[2.0, 2.0], [4.0, 4.0]],
            ..spec
        };
        assert_eq!(build_anchor_grid([10.0, 10.0], &two).len(), 8);
    }

    fn scene_with(boxes: Vec<Bbox>, annotated: Vec<bool>, class: ImageClass) -> Scene {
        Scene {
            id: 0,
            class,
            extent: [64.0, 64.0],
            seed: 1,
            hard: vec![false; boxes.len()],
            gt_boxes: boxes,
            annotated,
            distractors: vec![],
        }
    }

    #[test]
    fn label_assignment_cases() {
        let spec = SceneSpec::default();
        let anchor = Bbox::new(20.0, 20.0, 10.0, 10.0);
        // overlap of 7.5 x 10 gives IoU 75 / 125 = 0.6
        let object = Bbox::new(22.5, 20.0, 10.0, 10.0);
        assert_relative_eq!(iou(&anchor, &object), 0.6, epsilon = 1e-12);

        let annotated = scene_with(vec![object], vec![true], ImageClass::Abnormal);
        let a = &assign_labels(&[anchor], &annotated, &spec)[0];
        assert_eq!((a.p_star, a.ideal_p_star), (Label::Positive, Label::Positive));
        assert!(a.target.is_some());

        let dropped = scene_with(vec![object], vec![false], ImageClass::Abnormal);
        let a = &assign_labels(&[anchor], &dropped, &spec)[0];
        assert_eq!((a.p_star, a.ideal_p_star), (Label::Negative, Label::Positive));
        assert!(a.target.is_none());

        let normal = scene_with(vec![], vec![], ImageClass::Normal);
        let grid = build_anchor_grid(normal.extent, &spec);
        for a in assign_labels(&grid, &normal, &spec) {
            assert_eq!(a.p_star, Label::Negative);
            assert_eq!(a.class.attribute(), 0);
        }
    }

    #[test]
    fn noiseless_background_feature() {
        let spec = SceneSpec {
            feature_noise: 0.0,
            distractors_per_scene: [0, 0],
            ..SceneSpec::default()
        };
        let scene = scene_with(vec![Bbox::new(50.0, 50.0, 12.0, 12.0)], vec![true], ImageClass::Abnormal);
        let far = Bbox::new(6.0, 6.0, 12.0, 12.0);
        let f = extract_features(&scene, &far, 0, &spec);
        assert_eq!(f.len(), spec.feature_dim());
        assert_eq!(&f[..BASE_FEATURES], &[0.0; BASE_FEATURES]);
        assert_eq!(f, extract_features(&scene, &far, 0, &spec));
    }

    #[test]
    fn full_hard_fraction_attenuates_every_positive() {
        let spec = SceneSpec {
            hard_fraction: 1.0,
            feature_noise: 0.0,
            ..SceneSpec::default()
        };
        let corpus = generate_corpus(&CorpusSpec {
            ap_scenes: 8,
            np_scenes: 0,
            seed: 3,
            scene: spec.clone(),
        })
        .unwrap();
        let pool = AnchorPool::from_scenes(&corpus.scenes, &spec);
        assert!(!pool.positives.is_empty());
        for &i in &pool.positives {
            // object part of the morphology channel is at most attenuation * 1 / 2
            assert!(pool.anchors[i].features[1] <= 0.5 * spec.hard_attenuation + 1e-12);
        }
    }

    #[test]
    fn minibatch_composition() {
        let (scenes, _) = small_corpus(0.0);
        let spec = SceneSpec::default();
        let pool = AnchorPool::from_scenes(&scenes, &spec);
        let cfg = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_minibatch(&pool, &cfg, &mut rng);
        let pos = batch
            .indices
            .iter()
            .filter(|&&i| pool.anchors[i].p_star.is_positive())
            .count();
        assert_eq!((pos, batch.indices.len() - pos), (2, 6));
        assert!(!batch.short_of_positives);

        let again = sample_minibatch(&pool, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(batch, again);

        let mut no_pos = pool.clone();
        no_pos.positives.clear();
        let b = sample_minibatch(&no_pos, &cfg, &mut rng);
        assert!(b.short_of_positives);
        assert_eq!(b.indices.len(), 8);

        let mut one_pos = pool.clone();
        one_pos.positives.truncate(1);
        let b = sample_minibatch(&one_pos, &cfg, &mut rng);
        assert_eq!(b.indices.len(), 4);

        let balanced = SamplingConfig {
            batch_size: 64,
            ap_negative_share: Some(0.5),
            ..cfg
        };
        let b = sample_minibatch(&pool, &balanced, &mut rng);
        let from_np = b
            .indices
            .iter()
            .filter(|&&i| pool.anchors[i].class == ImageClass::Normal)
            .count();
        assert_eq!(from_np, 24);
    }

    #[test]
    fn records_round_trip() {
        let (scenes, _) = small_corpus(0.4);
        let mut buf = Vec::new();
        write_corpus_records(&scenes, &mut buf).unwrap();
        let back = read_corpus_records(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, scenes);
    }

    #[test]
    fn corruption_only_flips_ap_negatives() {
        let (scenes, _) = small_corpus(0.6);
        let pool = AnchorPool::from_scenes(&scenes, &SceneSpec::default());
        let mut corrupted = 0;
        for a in &pool.anchors {
            assert!(a.p_star <= a.ideal_p_star);
            if a.is_corrupted() {
                corrupted += 1;
                assert_eq!((a.p_star, a.class), (Label::Negative, ImageClass::Abnormal));
            }
        }
        assert!(corrupted > 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn iou_is_symmetric_and_bounded(
            a in (0.0f64..50.0, 0.0f64..50.0, 0.5f64..20.0, 0.5f64..20.0),
            b in (0.0f64..50.0, 0.0f64..50.0, 0.5f64..20.0, 0.5f64..20.0),
        ) {
            let a = Bbox::new(a.0, a.1, a.2, a.3);
            let b = Bbox::new(b.0, b.1, b.2, b.3);
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
        }

        #[test]
        fn removed_set_grows_with_eta(seed in any::<u64>(), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let corpus = generate_corpus(&CorpusSpec { ap_scenes: 6, np_scenes: 0, seed: 1, scene: SceneSpec::default() }).unwrap();
            let (_, r_lo) = corrupt_annotations(&corpus.scenes, CorruptionSpec { eta: lo, seed }).unwrap();
            let (_, r_hi) = corrupt_annotations(&corpus.scenes, CorruptionSpec { eta: hi, seed }).unwrap();
            prop_assert!(r_lo.iter().all(|r| r_hi.contains(r)));
        }
    }
}
