//! Mini-batch training loop with a step learning-rate schedule.

use std::collections::BTreeMap;
use std::io::Write;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonizer::{partition_of, DensityTracker, GradientHistogram, HarmonizerMode, Partition};
use crate::loss::{gradient_norm, Prediction};
use crate::model::{AdamParams, AdamState, Mlp};
use crate::objective::{batch_gradient, Example, LossSpec};
use crate::sim::{rng_for, sample_minibatch, AnchorPool, SamplingConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay_factor: f64,
    /// 1-based epochs from which the learning rate is multiplied by
    /// `decay_factor`. Empty means 60% and 80% of `epochs`.
    pub decay_epochs: Vec<usize>,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub sampling: SamplingConfig,
    pub hidden: Vec<usize>,
    pub reg_weight: f64,
    pub adam: AdamParams,
    /// Bins of the logged gradient-norm histograms.
    pub hist_bins: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            decay_factor: 0.1,
            decay_epochs: Vec::new(),
            epochs: 15,
            batches_per_epoch: 200,
            sampling: SamplingConfig::default(),
            hidden: vec![16],
            reg_weight: 1.0,
            adam: AdamParams::default(),
            hist_bins: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn resolved_decay_epochs(&self) -> Vec<usize> {
        if !self.decay_epochs.is_empty() {
            return self.decay_epochs.clone();
        }
        [0.6, 0.8]
            .iter()
            .map(|f| (f * self.epochs as f64).round() as usize)
            .filter(|&e| e >= 1)
            .collect()
    }

    /// Learning rate used during the 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.resolved_decay_epochs().iter().filter(|&&d| d <= epoch).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid("decay_factor", "must lie in (0, 1]"));
        }
        if self.epochs > 0 && self.decay_epochs.iter().any(|&d| d == 0 || d > self.epochs) {
            return Err(Error::invalid("decay_epochs", "must lie within 1..=epochs"));
        }
        let s = &self.sampling;
        if s.batch_size == 0 || !(s.positive_fraction > 0.0 && s.positive_fraction < 1.0) {
            return Err(Error::invalid("sampling", "need batch_size > 0 and positive_fraction in (0, 1)"));
        }
        if s.ap_negative_share.is_some_and(|x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::invalid("sampling.ap_negative_share", "must lie in [0, 1]"));
        }
        if self.hidden.is_empty() || self.hidden.len() > 2 || self.hidden.contains(&0) {
            return Err(Error::invalid("hidden", "need one or two nonzero hidden widths"));
        }
        if self.hist_bins == 0 {
            return Err(Error::invalid("hist_bins", "must be positive"));
        }
        if !(self.reg_weight >= 0.0) {
            return Err(Error::invalid("reg_weight", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Three-way partition of each example with its gradient norm.
fn partition3(e: &Example<'_>) -> Partition {
    partition_of(e.label, e.class, HarmonizerMode::DghmStar)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_classification: f64,
    pub mean_regression: f64,
    /// Gradient norms of every example seen this epoch, measured before
    /// the step, split three ways (AP_p, AP_n, NP_n).
    pub histograms: BTreeMap<Partition, GradientHistogram>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Batches where the positive quota could not be met.
    pub short_batches: usize,
}

impl TrainLog {
    /// `epoch,lr,mean_loss,mean_classification,mean_regression,histogram_file`
    pub fn write_csv(&self, mut out: impl Write, histogram_file: &str) -> Result<()> {
        writeln!(out, "epoch,lr,mean_loss,mean_classification,mean_regression,histogram_file")?;
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch, e.lr, e.mean_loss, e.mean_classification, e.mean_regression, histogram_file
            )?;
        }
        Ok(())
    }

    /// Long-format per-epoch histograms:
    /// `epoch,partition,bin,lower,upper,count`.
    pub fn write_histograms_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "epoch,partition,bin,lower,upper,count")?;
        for e in &self.epochs {
            write_histogram_rows(&mut out, &e.epoch.to_string(), &e.histograms)?;
        }
        Ok(())
    }
}

pub(crate) fn write_histogram_rows(
    out: &mut impl Write,
    prefix: &str,
    hists: &BTreeMap<Partition, GradientHistogram>,
) -> Result<()> {
    for (part, h) in hists {
        for (bin, &count) in h.counts().iter().enumerate() {
            let (lo, hi) = h.bin_bounds(bin);
            writeln!(out, "{prefix},{},{bin},{lo},{hi},{count}", part.name())?;
        }
    }
    Ok(())
}

fn empty_histograms(bins: usize) -> BTreeMap<Partition, GradientHistogram> {
    [Partition::ApPositive, Partition::ApNegative, Partition::NpNegative]
        .into_iter()
        .map(|p| (p, GradientHistogram::new(bins)))
        .collect()
}

/// Trains a fresh model on `pool`. Fully determined by `cfg.seed`.
pub fn train(pool: &AnchorPool, spec: &LossSpec, cfg: &TrainConfig) -> Result<(Mlp, TrainLog)> {
    cfg.validate()?;
    spec.validate()?;
    let first = pool.anchors.first().ok_or(Error::EmptyBatch)?;
    let mut model = Mlp::new(first.features.len(), &cfg.hidden, &mut rng_for(cfg.seed, 0));
    let mut sampler = rng_for(cfg.seed, 1);
    let mut adam = AdamState::new(model.num_params(), cfg.adam);
    let mut tracker = DensityTracker::new();
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        if epoch > 1 && lr != cfg.lr_at(epoch - 1) {
            info!("epoch {epoch}: learning rate -> {lr:e}");
        }
        let mut hists = empty_histograms(cfg.hist_bins);
        let (mut sum_cls, mut sum_reg) = (0.0, 0.0);
        for step in 0..cfg.batches_per_epoch {
            let batch = sample_minibatch(pool, &cfg.sampling, &mut sampler);
            log.short_batches += batch.short_of_positives as usize;
            let examples: Vec<Example<'_>> = batch.indices.iter().map(|&i| Example::from(&pool.anchors[i])).collect();
            let bg = batch_gradient(&model, &examples, spec, cfg.reg_weight, &mut tracker)?;
            let total = bg.loss.total();
            if !total.is_finite() || bg.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, step, loss: total });
            }
            for (e, &g) in examples.iter().zip(&bg.objective.g) {
                hists.get_mut(&partition3(e)).expect("three-way key").add(g);
            }
            sum_cls += bg.loss.classification;
            sum_reg += bg.loss.regression;
            adam.step(model.params_mut(), &bg.grads, lr);
            if model.params().iter().any(|w| !w.is_finite()) {
                return Err(Error::Divergence { epoch, step, loss: total });
            }
        }
        let n = cfg.batches_per_epoch.max(1) as f64;
        let entry = EpochLog {
            epoch,
            lr,
            mean_loss: (sum_cls + sum_reg) / n,
            mean_classification: sum_cls / n,
            mean_regression: sum_reg / n,
            histograms: hists,
        };
        debug!("epoch {epoch}: mean loss {:.5}", entry.mean_loss);
        log.epochs.push(entry);
    }
    Ok((model, log))
}

/// Gradient norm and three-way partition of every anchor in the pool under
/// `model`.
pub fn pool_gradient_norms(model: &Mlp, pool: &AnchorPool) -> Result<Vec<(f64, Partition)>> {
    pool.anchors
        .iter()
        .map(|a| {
            let out = model.forward(&a.features)?;
            let g = gradient_norm(Prediction::from_logit(out.logit), a.p_star);
            Ok((g, partition3(&Example::from(a))))
        })
        .collect()
}

/// Histograms of `pool_gradient_norms`, three-way plus the two-way
/// `clean`/`noisy` merge.
pub fn pool_histograms(model: &Mlp, pool: &AnchorPool, bins: usize) -> Result<BTreeMap<Partition, GradientHistogram>> {
    let mut hists = empty_histograms(bins);
    for (g, part) in pool_gradient_norms(model, pool)? {
        hists.get_mut(&part).expect("three-way key").add(g);
    }
    let mut clean = hists[&Partition::ApPositive].clone();
    clean.merge(&hists[&Partition::NpNegative]);
    let noisy = hists[&Partition::ApNegative].clone();
    hists.insert(Partition::Clean, clean);
    hists.insert(Partition::Noisy, noisy);
    Ok(hists)
}
