//! Batch objective: classification loss (optionally harmonized) plus
//! smooth-L1 box regression on positives, with frozen per-example weights.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonizer::{partition_of, DensityTracker, HarmonizerConfig, HarmonizerMode, Partition};
use crate::label::{ImageClass, Label};
use crate::loss::{gradient_norm, smooth_l1, smooth_l1_grad, ClassKernel, FocalParams, Prediction, SceParams};
use crate::model::{Mlp, Output};
use crate::sim::LabeledAnchor;

/// Which classification loss to train with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Ce,
    Focal(FocalParams),
    Sce(SceParams),
    /// GHM-C, DGHM-C or DGHM-C*, depending on the harmonizer mode.
    Harmonized(HarmonizerConfig),
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Ce => "ce",
            LossSpec::Focal(_) => "focal",
            LossSpec::Sce(_) => "sce",
            LossSpec::Harmonized(cfg) => match cfg.mode {
                HarmonizerMode::Ghm => "ghm-c",
                HarmonizerMode::Dghm => "dghm-c",
                HarmonizerMode::DghmStar => "dghm-c*",
            },
        }
    }

    /// Builds a loss from its name, taking hyperparameters from `base`.
    pub fn from_name(name: &str, base: &LossParams) -> Result<LossSpec> {
        let name: LossName = name.parse()?;
        Ok(name.with_params(base))
    }

    fn kernel(&self) -> ClassKernel {
        match *self {
            LossSpec::Ce | LossSpec::Harmonized(_) => ClassKernel::Ce,
            LossSpec::Focal(p) => ClassKernel::Focal(p),
            LossSpec::Sce(p) => ClassKernel::Sce(p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LossSpec::Focal(p) if !(0.0..=1.0).contains(&p.alpha) || p.gamma < 0.0 => {
                Err(Error::invalid("focal", "need alpha in [0, 1] and gamma >= 0"))
            }
            LossSpec::Sce(p) if !(p.alpha > 0.0 && p.beta >= 0.0 && p.log_zero_clamp.is_finite()) => {
                Err(Error::invalid("sce", "need alpha > 0, beta >= 0 and a finite clamp"))
            }
            LossSpec::Harmonized(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }
}

/// Loss names accepted on the command line and in config files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossName {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "focal")]
    Focal,
    #[serde(rename = "ghm-c")]
    GhmC,
    #[serde(rename = "sce")]
    Sce,
    #[serde(rename = "dghm-c")]
    DghmC,
    #[serde(rename = "dghm-c*")]
    DghmCStar,
}

impl LossName {
    pub const ALL: [LossName; 6] = [
        LossName::Ce,
        LossName::Focal,
        LossName::GhmC,
        LossName::Sce,
        LossName::DghmC,
        LossName::DghmCStar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossName::Ce => "ce",
            LossName::Focal => "focal",
            LossName::GhmC => "ghm-c",
            LossName::Sce => "sce",
            LossName::DghmC => "dghm-c",
            LossName::DghmCStar => "dghm-c*",
        }
    }

    pub fn with_params(self, base: &LossParams) -> LossSpec {
        match self {
            LossName::Ce => LossSpec::Ce,
            LossName::Focal => LossSpec::Focal(base.focal),
            LossName::Sce => LossSpec::Sce(base.sce),
            LossName::GhmC => LossSpec::Harmonized(HarmonizerConfig {
                mode: HarmonizerMode::Ghm,
                ..base.harmonizer
            }),
            LossName::DghmC => LossSpec::Harmonized(HarmonizerConfig {
                mode: HarmonizerMode::Dghm,
                ..base.harmonizer
            }),
            LossName::DghmCStar => LossSpec::Harmonized(HarmonizerConfig {
                mode: HarmonizerMode::DghmStar,
                ..base.harmonizer
            }),
        }
    }
}

impl FromStr for LossName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown loss `{s}`")))
    }
}

impl fmt::Display for LossName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hyperparameters shared by every loss of an experiment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    pub focal: FocalParams,
    pub sce: SceParams,
    /// Outlier settings for the harmonized losses; `mode` is overridden by
    /// the loss name.
    pub harmonizer: HarmonizerConfig,
}

/// One training example as the objective sees it.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub label: Label,
    pub class: ImageClass,
    pub target: Option<[f64; 4]>,
}

impl<'a> From<&'a LabeledAnchor> for Example<'a> {
    fn from(a: &'a LabeledAnchor) -> Self {
        Example {
            features: &a.features,
            label: a.p_star,
            class: a.class,
            target: a.target,
        }
    }
}

/// Per-example weights and normalization fixed at the current parameters.
///
/// `loss = scale * Σ w_i * kernel(z_i, p*_i) + reg_weight / P * Σ_pos smoothL1`
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenObjective {
    pub kernel: ClassKernel,
    pub weights: Vec<f64>,
    pub scale: f64,
    pub reg_weight: f64,
    /// Gradient norm of each example when frozen.
    pub g: Vec<f64>,
    /// Three-way partition of each example, for logging.
    pub partitions: Vec<Partition>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub classification: f64,
    pub regression: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.classification + self.regression
    }
}

impl FrozenObjective {
    pub fn freeze(
        spec: &LossSpec,
        outputs: &[Output],
        examples: &[Example<'_>],
        reg_weight: f64,
        tracker: &mut DensityTracker,
    ) -> Result<FrozenObjective> {
        if examples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = examples.len();
        let preds: Vec<Prediction> = outputs.iter().map(|o| Prediction::from_logit(o.logit)).collect();
        let g: Vec<f64> = preds
            .iter()
            .zip(examples)
            .map(|(&p, e)| gradient_norm(p, e.label))
            .collect();
        let partitions: Vec<Partition> = examples
            .iter()
            .map(|e| partition_of(e.label, e.class, HarmonizerMode::DghmStar))
            .collect();
        let (weights, scale) = match spec {
            LossSpec::Harmonized(cfg) => {
                let parts: Vec<Partition> = examples
                    .iter()
                    .map(|e| partition_of(e.label, e.class, cfg.mode))
                    .collect();
                let batch = tracker.harmonize(&g, &parts, cfg)?;
                (batch.betas(), 1.0 / (batch.m * n) as f64)
            }
            _ => (vec![1.0; n], 1.0 / n as f64),
        };
        Ok(FrozenObjective {
            kernel: spec.kernel(),
            weights,
            scale,
            reg_weight,
            g,
            partitions,
        })
    }

    fn positives(examples: &[Example<'_>]) -> usize {
        examples.iter().filter(|e| e.target.is_some()).count()
    }

    pub fn evaluate(&self, outputs: &[Output], examples: &[Example<'_>]) -> LossParts {
        let classification = self.scale
            * outputs
                .iter()
                .zip(examples)
                .zip(&self.weights)
                .map(|((o, e), w)| w * self.kernel.loss(Prediction::from_logit(o.logit), e.label))
                .sum::<f64>();
        let positives = Self::positives(examples);
        let regression = if positives == 0 {
            0.0
        } else {
            self.reg_weight / positives as f64
                * outputs
                    .iter()
                    .zip(examples)
                    .filter_map(|(o, e)| e.target.map(|t| (o, t)))
                    .map(|(o, t)| (0..4).map(|k| smooth_l1(o.offsets[k], t[k])).sum::<f64>())
                    .sum::<f64>()
        };
        LossParts {
            classification,
            regression,
        }
    }

    /// Derivatives of the objective with respect to each example's logit
    /// and offsets.
    pub fn output_grads(&self, outputs: &[Output], examples: &[Example<'_>]) -> Vec<(f64, [f64; 4])> {
        let positives = Self::positives(examples);
        let reg_scale = if positives == 0 {
            0.0
        } else {
            self.reg_weight / positives as f64
        };
        outputs
            .iter()
            .zip(examples)
            .zip(&self.weights)
            .map(|((o, e), w)| {
                let d_logit = self.scale * w * self.kernel.grad_logit(Prediction::from_logit(o.logit), e.label);
                let d_off = match e.target {
                    Some(t) => std::array::from_fn(|k| reg_scale * smooth_l1_grad(o.offsets[k], t[k])),
                    None => [0.0; 4],
                };
                (d_logit, d_off)
            })
            .collect()
    }
}

/// Forward pass, frozen objective, and parameter gradients for one batch.
pub struct BatchGradient {
    pub objective: FrozenObjective,
    pub loss: LossParts,
    pub grads: Vec<f64>,
}

pub fn batch_gradient(
    model: &Mlp,
    examples: &[Example<'_>],
    spec: &LossSpec,
    reg_weight: f64,
    tracker: &mut DensityTracker,
) -> Result<BatchGradient> {
    let traces = examples
        .iter()
        .map(|e| model.forward_trace(e.features))
        .collect::<Result<Vec<_>>>()?;
    let outputs: Vec<Output> = traces.iter().map(|t| t.output()).collect();
    let objective = FrozenObjective::freeze(spec, &outputs, examples, reg_weight, tracker)?;
    let loss = objective.evaluate(&outputs, examples);
    let mut grads = vec![0.0; model.num_params()];
    for (trace, (d_logit, d_off)) in traces.iter().zip(objective.output_grads(&outputs, examples)) {
        model.backward(trace, d_logit, &d_off, &mut grads);
    }
    Ok(BatchGradient {
        objective,
        loss,
        grads,
    })
}

/// Result of a central-difference gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters skipped because a perturbation crossed a smooth-L1 kink.
    pub skipped: usize,
}

pub const FD_STEP: f64 = 1e-6;
/// Parameters checked exhaustively up to this count, sampled above it.
pub const FD_MAX_PARAMS: usize = 1000;

/// `|a - b| / max(|a|, |b|, 1)`: relative for gradients of order one and
/// above, absolute below.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn kink_signature(outputs: &[Output], examples: &[Example<'_>]) -> Vec<bool> {
    outputs
        .iter()
        .zip(examples)
        .filter_map(|(o, e)| e.target.map(|t| (o, t)))
        .flat_map(|(o, t)| (0..4).map(move |k| (o.offsets[k] - t[k]).abs() < 1.0))
        .collect()
}

/// Compares analytic parameter gradients against central differences with
/// the harmonizing weights frozen at the unperturbed parameters.
pub fn finite_difference_check(
    model: &Mlp,
    examples: &[Example<'_>],
    spec: &LossSpec,
    reg_weight: f64,
    seed: u64,
) -> Result<FdReport> {
    let mut tracker = DensityTracker::new();
    let analytic = batch_gradient(model, examples, spec, reg_weight, &mut tracker)?;
    let objective = analytic.objective;
    let eval = |m: &Mlp| -> Result<(f64, Vec<bool>)> {
        let outputs = m.forward_batch(examples.iter().map(|e| e.features))?;
        Ok((objective.evaluate(&outputs, examples).total(), kink_signature(&outputs, examples)))
    };
    let (_, base_sig) = eval(model)?;
    let n = model.num_params();
    let which: Vec<usize> = if n <= FD_MAX_PARAMS {
        (0..n).collect()
    } else {
        let mut v = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, FD_MAX_PARAMS).into_vec();
        v.sort_unstable();
        v
    };
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = model.clone();
    for i in which {
        let original = probe.params()[i];
        probe.params_mut()[i] = original + FD_STEP;
        let (plus, sig_plus) = eval(&probe)?;
        probe.params_mut()[i] = original - FD_STEP;
        let (minus, sig_minus) = eval(&probe)?;
        probe.params_mut()[i] = original;
        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic.grads[i], numeric));
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    struct Owned {
        features: Vec<Vec<f64>>,
        labels: Vec<Label>,
        classes: Vec<ImageClass>,
        targets: Vec<Option<[f64; 4]>>,
    }

    impl Owned {
        fn random(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Owned {
            let mut o = Owned {
                features: vec![],
                labels: vec![],
                classes: vec![],
                targets: vec![],
            };
            for _ in 0..n {
                o.features.push((0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect());
                let class = if rng.gen_bool(0.6) {
                    ImageClass::Abnormal
                } else {
                    ImageClass::Normal
                };
                let label = Label::from(class == ImageClass::Abnormal && rng.gen_bool(0.4));
                o.labels.push(label);
                o.classes.push(class);
                o.targets.push(label.is_positive().then(|| std::array::from_fn(|_| rng.gen_range(-2.0..2.0))));
            }
            o
        }

        fn examples(&self) -> Vec<Example<'_>> {
            (0..self.labels.len())
                .map(|i| Example {
                    features: &self.features[i],
                    label: self.labels[i],
                    class: self.classes[i],
                    target: self.targets[i],
                })
                .collect()
        }
    }

    fn random_model(rng: &mut ChaCha8Rng) -> Mlp {
        let mut m = Mlp::new(5, &[6], rng);
        for p in m.params_mut() {
            *p += rng.gen_range(-0.8..0.8);
        }
        m
    }

    fn all_specs() -> Vec<LossSpec> {
        let base = LossParams::default();
        LossName::ALL.iter().map(|n| n.with_params(&base)).collect()
    }

    #[test]
    fn every_loss_passes_the_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for spec in all_specs() {
            for _ in 0..3 {
                let model = random_model(&mut rng);
                let data = Owned::random(12, 5, &mut rng);
                let report = finite_difference_check(&model, &data.examples(), &spec, 1.0, 0).unwrap();
                assert!(report.max_rel_error < 1e-6, "{}: {report:?}", spec.name());
                assert!(report.checked > 0);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_classification_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng);
        let data = Owned::random(10, 5, &mut rng);
        let examples = data.examples();
        let outputs = model.forward_batch(examples.iter().map(|e| e.features)).unwrap();
        let mut obj =
            FrozenObjective::freeze(&LossSpec::Ce, &outputs, &examples, 1.0, &mut DensityTracker::new()).unwrap();
        obj.weights.iter_mut().for_each(|w| *w = 0.0);
        for (d_logit, _) in obj.output_grads(&outputs, &examples) {
            assert_eq!(d_logit, 0.0);
        }
    }

    #[test]
    fn no_positives_means_no_regression_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(&mut rng);
        let mut data = Owned::random(10, 5, &mut rng);
        data.labels.iter_mut().for_each(|l| *l = Label::Negative);
        data.targets.iter_mut().for_each(|t| *t = None);
        let examples = data.examples();
        let outputs = model.forward_batch(examples.iter().map(|e| e.features)).unwrap();
        let obj =
            FrozenObjective::freeze(&LossSpec::Ce, &outputs, &examples, 1.0, &mut DensityTracker::new()).unwrap();
        assert_eq!(obj.evaluate(&outputs, &examples).regression, 0.0);
        for (_, d_off) in obj.output_grads(&outputs, &examples) {
            assert_eq!(d_off, [0.0; 4]);
        }
    }

    #[test]
    fn loss_names_round_trip() {
        let base = LossParams::default();
        for name in LossName::ALL {
            assert_eq!(LossSpec::from_name(name.as_str(), &base).unwrap().name(), name.as_str());
        }
        assert!(LossSpec::from_name("huber", &base).is_err());
    }
}
