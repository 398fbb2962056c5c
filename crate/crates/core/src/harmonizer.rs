//! Gradient-density estimation and harmonized example weighting.
//!
//! Examples are binned by gradient norm `g` into `bins` unit regions of
//! width `ε = 1 / bins`. The density at `g` is the count of the region
//! containing `g` divided by the valid length of the window of width `ε`
//! centred on `g`, clipped to `[0, 1]`. A harmonizing weight
//!
//! ```text
//! beta_i = N' / GD(g_i)^gamma_i
//! ```
//!
//! divides out that density. Plain GHM uses one pooled histogram and
//! `gamma_i = 1`. The decoupled variants build one histogram per partition
//! (noisy/clean, or AP-positive/AP-negative/NP-negative) and raise the
//! density of outliers (`g >= lambda`) to `mu_n` in the noisy partition and
//! `mu_c` elsewhere.
//!
//! Weights are constants of the current batch; nothing differentiates
//! through them.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{ImageClass, Label};
use crate::loss::{self, ce_loss, gradient_norm, FocalParams, Prediction, SceParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HarmonizerMode {
    /// One pooled histogram, no outlier modulation.
    #[serde(rename = "ghm")]
    Ghm,
    /// Noisy/clean decoupling.
    #[serde(rename = "dghm")]
    Dghm,
    /// AP-positive / AP-negative / NP-negative decoupling.
    #[serde(rename = "dghm_star")]
    DghmStar,
}

impl HarmonizerMode {
    /// Number of gradient-norm distributions, fixed by the mode even when a
    /// partition happens to be empty in a batch.
    pub fn distributions(self) -> usize {
        match self {
            HarmonizerMode::Ghm => 1,
            HarmonizerMode::Dghm => 2,
            HarmonizerMode::DghmStar => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HarmonizerMode::Ghm => "ghm",
            HarmonizerMode::Dghm => "dghm",
            HarmonizerMode::DghmStar => "dghm_star",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    Pooled,
    Clean,
    Noisy,
    /// Positive anchors in abnormal images.
    ApPositive,
    /// Negative anchors in abnormal images; hidden false negatives live here.
    ApNegative,
    /// Anchors in normal images.
    NpNegative,
}

impl Partition {
    /// Whether outliers of this partition use the noisy exponent `mu_n`.
    pub fn is_noisy(self) -> bool {
        matches!(self, Partition::Noisy | Partition::ApNegative)
    }

    pub fn name(self) -> &'static str {
        match self {
            Partition::Pooled => "pooled",
            Partition::Clean => "clean",
            Partition::Noisy => "noisy",
            Partition::ApPositive => "AP_p",
            Partition::ApNegative => "AP_n",
            Partition::NpNegative => "NP_n",
        }
    }

    pub fn from_name(name: &str) -> Option<Partition> {
        [
            Partition::Pooled,
            Partition::Clean,
            Partition::Noisy,
            Partition::ApPositive,
            Partition::ApNegative,
            Partition::NpNegative,
        ]
        .into_iter()
        .find(|p| p.name() == name)
    }

    /// Collapses a three-way partition onto the two-way noisy/clean split.
    pub fn two_way(self) -> Partition {
        match self {
            Partition::ApNegative | Partition::Noisy => Partition::Noisy,
            Partition::Pooled => Partition::Pooled,
            _ => Partition::Clean,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Maps a given label and image attribute to its data-space partition.
///
/// Negatives in abnormal images are noisy; positives in abnormal images and
/// everything in normal images are clean. A positive label in a normal image
/// cannot arise from IoU assignment and is treated as clean.
pub fn partition_of(label: Label, class: ImageClass, mode: HarmonizerMode) -> Partition {
    let three_way = match (label, class) {
        (Label::Negative, ImageClass::Abnormal) => Partition::ApNegative,
        (Label::Positive, ImageClass::Abnormal) => Partition::ApPositive,
        (_, ImageClass::Normal) => Partition::NpNegative,
    };
    match mode {
        HarmonizerMode::Ghm => Partition::Pooled,
        HarmonizerMode::Dghm => three_way.two_way(),
        HarmonizerMode::DghmStar => three_way,
    }
}

/// Which `N` scales the harmonizing weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NConvention {
    /// Total batch size.
    #[default]
    #[serde(rename = "total")]
    TotalN,
    /// Size of the example's own partition within the batch.
    #[serde(rename = "partition")]
    PartitionN,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarmonizerConfig {
    pub mode: HarmonizerMode,
    pub bins: usize,
    pub mu_n: f64,
    pub mu_c: f64,
    pub lambda: f64,
    pub n_convention: NConvention,
    /// Exponential moving average of bin counts across batches. `None`
    /// estimates density from the current batch alone.
    pub momentum: Option<f64>,
}

impl Default for HarmonizerConfig {
    fn default() -> Self {
        HarmonizerConfig {
            mode: HarmonizerMode::Dghm,
            bins: 10,
            mu_n: 2.0,
            mu_c: 0.5,
            lambda: 0.9,
            n_convention: NConvention::TotalN,
            momentum: None,
        }
    }
}

impl HarmonizerConfig {
    pub fn ghm() -> Self {
        HarmonizerConfig {
            mode: HarmonizerMode::Ghm,
            mu_n: 1.0,
            mu_c: 1.0,
            ..Default::default()
        }
    }

    pub fn dghm_star() -> Self {
        HarmonizerConfig {
            mode: HarmonizerMode::DghmStar,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::invalid("bins", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda", format!("{} not in [0, 1]", self.lambda)));
        }
        if !(self.mu_n > 0.0 && self.mu_n.is_finite()) {
            return Err(Error::invalid("mu_n", "must be positive"));
        }
        if !(self.mu_c > 0.0 && self.mu_c.is_finite()) {
            return Err(Error::invalid("mu_c", "must be positive"));
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::invalid("momentum", format!("{m} not in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Density exponent applied to an example.
    pub fn exponent(&self, g: f64, partition: Partition) -> f64 {
        if self.mode == HarmonizerMode::Ghm || g < self.lambda {
            1.0
        } else if partition.is_noisy() {
            self.mu_n
        } else {
            self.mu_c
        }
    }
}

/// Counts of gradient norms over `bins` half-open unit regions
/// `[kε, (k+1)ε)`, with the last region closed at 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradientHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl GradientHistogram {
    pub fn new(bins: usize) -> Self {
        assert!(bins > 0, "histogram needs at least one bin");
        GradientHistogram {
            counts: vec![0; bins],
            total: 0,
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        assert!(!counts.is_empty(), "histogram needs at least one bin");
        let total = counts.iter().sum();
        GradientHistogram { counts, total }
    }

    pub fn from_norms(norms: &[f64], bins: usize) -> Result<Self> {
        let mut hist = GradientHistogram::new(bins);
        for (index, &g) in norms.iter().enumerate() {
            check_norm(index, g)?;
            hist.add(g);
        }
        Ok(hist)
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn width(&self) -> f64 {
        1.0 / self.counts.len() as f64
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bin_bounds(&self, k: usize) -> (f64, f64) {
        let bins = self.counts.len() as f64;
        (k as f64 / bins, (k + 1) as f64 / bins)
    }

    /// Adds one gradient norm. `g` must lie in `[0, 1]`.
    pub fn add(&mut self, g: f64) {
        let k = bin_index(g, self.counts.len());
        self.counts[k] += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &GradientHistogram) {
        assert_eq!(self.bins(), other.bins(), "bin count mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    pub fn count_at(&self, g: f64) -> u64 {
        self.counts[bin_index(g, self.counts.len())]
    }
}

/// Unit region containing `g`: `floor(g * bins)`, with `g = 1` folded into
/// the last region.
pub fn bin_index(g: f64, bins: usize) -> usize {
    ((g * bins as f64).floor() as usize).min(bins - 1)
}

/// Length of the window `[g - ε/2, g + ε/2]` clipped to `[0, 1]`.
pub fn valid_length(g: f64, bins: usize) -> f64 {
    let half = 0.5 / bins as f64;
    (g + half).min(1.0) - (g - half).max(0.0)
}

/// Gradient density at `g`. An empty region counts as one example so the
/// density is always at least `1 / ℓ`.
pub fn gradient_density(hist: &GradientHistogram, g: f64) -> f64 {
    density_from_count(hist.count_at(g) as f64, g, hist.bins())
}

fn density_from_count(count: f64, g: f64, bins: usize) -> f64 {
    count.max(1.0) / valid_length(g, bins)
}

fn check_norm(index: usize, g: f64) -> Result<()> {
    if (0.0..=1.0).contains(&g) {
        Ok(())
    } else {
        Err(Error::GradientNormOutOfRange { index, value: g })
    }
}

fn check_lengths(g: &[f64], parts: &[Partition]) -> Result<()> {
    if g.len() != parts.len() {
        return Err(Error::LengthMismatch {
            left: "gradient norms",
            left_len: g.len(),
            right: "partitions",
            right_len: parts.len(),
        });
    }
    Ok(())
}

/// One histogram per partition present in the batch. In GHM mode every
/// example is pooled regardless of its tag.
pub fn build_histograms(
    g: &[f64],
    parts: &[Partition],
    cfg: &HarmonizerConfig,
) -> Result<BTreeMap<Partition, GradientHistogram>> {
    check_lengths(g, parts)?;
    let mut out: BTreeMap<Partition, GradientHistogram> = BTreeMap::new();
    for (index, (&gi, &part)) in g.iter().zip(parts).enumerate() {
        check_norm(index, gi)?;
        let key = if cfg.mode == HarmonizerMode::Ghm {
            Partition::Pooled
        } else {
            part
        };
        out.entry(key)
            .or_insert_with(|| GradientHistogram::new(cfg.bins))
            .add(gi);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HarmonizedExample {
    pub g: f64,
    pub partition: Partition,
    pub beta: f64,
    pub exponent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarmonizedBatch {
    pub examples: Vec<HarmonizedExample>,
    /// Number of gradient-norm distributions.
    pub m: usize,
}

impl HarmonizedBatch {
    pub fn n(&self) -> usize {
        self.examples.len()
    }

    pub fn betas(&self) -> Vec<f64> {
        self.examples.iter().map(|e| e.beta).collect()
    }
}

/// Smoothed bin counts carried across batches when momentum is enabled.
#[derive(Clone, Debug, Default)]
pub struct DensityTracker {
    smoothed: BTreeMap<Partition, Vec<f64>>,
}

impl DensityTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Harmonizes a batch, updating the moving average first when the
    /// config asks for one.
    pub fn harmonize(
        &mut self,
        g: &[f64],
        parts: &[Partition],
        cfg: &HarmonizerConfig,
    ) -> Result<HarmonizedBatch> {
        let hists = build_histograms(g, parts, cfg)?;
        let Some(momentum) = cfg.momentum else {
            return Ok(weights_from_histograms(g, parts, cfg, &hists, &raw_counts(&hists)));
        };
        for (part, hist) in &hists {
            let acc = self
                .smoothed
                .entry(*part)
                .or_insert_with(|| hist.counts().iter().map(|&c| c as f64).collect());
            for (a, &c) in acc.iter_mut().zip(hist.counts()) {
                *a = momentum * *a + (1.0 - momentum) * c as f64;
            }
        }
        Ok(weights_from_histograms(g, parts, cfg, &hists, &self.smoothed))
    }
}

fn raw_counts(hists: &BTreeMap<Partition, GradientHistogram>) -> BTreeMap<Partition, Vec<f64>> {
    hists
        .iter()
        .map(|(p, h)| (*p, h.counts().iter().map(|&c| c as f64).collect()))
        .collect()
}

fn weights_from_histograms(
    g: &[f64],
    parts: &[Partition],
    cfg: &HarmonizerConfig,
    hists: &BTreeMap<Partition, GradientHistogram>,
    counts: &BTreeMap<Partition, Vec<f64>>,
) -> HarmonizedBatch {
    let n_total = g.len() as f64;
    let examples = g
        .iter()
        .zip(parts)
        .map(|(&gi, &part)| {
            let key = if cfg.mode == HarmonizerMode::Ghm {
                Partition::Pooled
            } else {
                part
            };
            let count = counts[&key][bin_index(gi, cfg.bins)];
            let density = density_from_count(count, gi, cfg.bins);
            let exponent = cfg.exponent(gi, part);
            let scale = match cfg.n_convention {
                NConvention::TotalN => n_total,
                NConvention::PartitionN => hists[&key].total() as f64,
            };
            HarmonizedExample {
                g: gi,
                partition: part,
                beta: scale / pow_exact(density, exponent),
                exponent,
            }
        })
        .collect();
    HarmonizedBatch {
        examples,
        m: cfg.mode.distributions(),
    }
}

fn pow_exact(x: f64, exponent: f64) -> f64 {
    if exponent == 1.0 {
        x
    } else {
        x.powf(exponent)
    }
}

/// Harmonizing weights for one batch, with density estimated from the batch
/// alone.
pub fn harmonize_weights(
    g: &[f64],
    parts: &[Partition],
    cfg: &HarmonizerConfig,
) -> Result<HarmonizedBatch> {
    let hists = build_histograms(g, parts, cfg)?;
    Ok(weights_from_histograms(g, parts, cfg, &hists, &raw_counts(&hists)))
}

fn norms_and_check(preds: &[Prediction], labels: &[Label]) -> Result<Vec<f64>> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: "predictions",
            left_len: preds.len(),
            right: "labels",
            right_len: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(&p, &l)| gradient_norm(p, l))
        .collect())
}

fn weighted_ce(preds: &[Prediction], labels: &[Label], batch: &HarmonizedBatch) -> f64 {
    let sum: f64 = preds
        .iter()
        .zip(labels)
        .zip(&batch.examples)
        .map(|((&p, &l), e)| e.beta * ce_loss(p, l))
        .sum();
    sum / (batch.m as f64 * batch.n() as f64)
}

/// GHM-C: `(1/N) Σ β_i CE_i` with a single pooled histogram.
pub fn ghm_c_loss(
    preds: &[Prediction],
    labels: &[Label],
    cfg: &HarmonizerConfig,
) -> Result<(f64, HarmonizedBatch)> {
    let g = norms_and_check(preds, labels)?;
    let cfg = HarmonizerConfig {
        mode: HarmonizerMode::Ghm,
        ..*cfg
    };
    let parts = vec![Partition::Pooled; g.len()];
    let batch = harmonize_weights(&g, &parts, &cfg)?;
    Ok((weighted_ce(preds, labels, &batch), batch))
}

/// DGHM-C and DGHM-C*: `(1/(MN)) Σ β_i CE_i` with decoupled histograms.
pub fn dghm_c_loss(
    preds: &[Prediction],
    labels: &[Label],
    classes: &[ImageClass],
    cfg: &HarmonizerConfig,
) -> Result<(f64, HarmonizedBatch)> {
    if cfg.mode == HarmonizerMode::Ghm {
        return Err(Error::ModeMismatch {
            loss: "dghm-c",
            mode: cfg.mode.name(),
        });
    }
    let g = norms_and_check(preds, labels)?;
    if classes.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: "labels",
            left_len: labels.len(),
            right: "image classes",
            right_len: classes.len(),
        });
    }
    let parts: Vec<Partition> = labels
        .iter()
        .zip(classes)
        .map(|(&l, &c)| partition_of(l, c, cfg.mode))
        .collect();
    let batch = harmonize_weights(&g, &parts, cfg)?;
    Ok((weighted_ce(preds, labels, &batch), batch))
}

/// What a reformulated-gradient curve is evaluated for.
#[derive(Clone, Copy, Debug)]
pub enum CurveSource<'a> {
    Ce,
    Focal(FocalParams),
    Sce(SceParams),
    /// A harmonized branch: the weight at `g` comes from `hist` with
    /// `N' = n_total` and the exponent rule of `cfg` for `partition`.
    Harmonized {
        hist: &'a GradientHistogram,
        partition: Partition,
        n_total: f64,
        cfg: &'a HarmonizerConfig,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub g: f64,
    pub value: f64,
}

/// Samples `samples` evenly spaced gradient norms over `[0, 1]` and reports
/// the effective gradient each loss applies there. Closed-form losses are
/// evaluated on the positive branch (`p* = 1`, `p = 1 - g`).
pub fn reformulated_gradient_curve(source: CurveSource<'_>, samples: usize) -> Vec<CurvePoint> {
    let samples = samples.max(2);
    (0..samples)
        .map(|i| {
            let g = i as f64 / (samples - 1) as f64;
            CurvePoint {
                g,
                value: effective_gradient(&source, g),
            }
        })
        .collect()
}

pub fn effective_gradient(source: &CurveSource<'_>, g: f64) -> f64 {
    let positive = Prediction::from_prob(1.0 - g);
    match *source {
        CurveSource::Ce => g,
        CurveSource::Focal(params) => {
            loss::focal_grad_logit(positive, Label::Positive, params).abs()
        }
        CurveSource::Sce(params) => loss::sce_grad_logit(positive, Label::Positive, params).abs(),
        CurveSource::Harmonized {
            hist,
            partition,
            n_total,
            cfg,
        } => {
            let density = gradient_density(hist, g);
            n_total / pow_exact(density, cfg.exponent(g, partition)) * g
        }
    }
}
