//! Per-example classification and regression losses with their analytic
//! derivatives with respect to the classification logit.
//!
//! Every classification loss is written in terms of the sigmoid probability
//! `p` of the positive class and the given binary label `p*`. The gradient
//! norm `g = |p - p*|` is the magnitude of the cross-entropy derivative with
//! respect to the logit and is the quantity the harmonizer bins.

use serde::{Deserialize, Serialize};

use crate::label::Label;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any
/// logarithm is taken.
pub const PROB_EPS: f64 = 1e-12;

pub fn sigmoid(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

/// A model output for one example: the raw logit and its clamped sigmoid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    logit: f64,
    p: f64,
}

impl Prediction {
    pub fn from_logit(logit: f64) -> Self {
        let p = sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS);
        Prediction { logit, p }
    }

    /// Builds a prediction from a probability. The probability is clamped
    /// into the open interval first, and the stored logit is its inverse.
    pub fn from_prob(p: f64) -> Self {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        Prediction {
            logit: (p / (1.0 - p)).ln(),
            p,
        }
    }

    pub fn logit(&self) -> f64 {
        self.logit
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// `dp/dz` of the sigmoid at this logit.
    fn dp_dz(&self) -> f64 {
        self.p * (1.0 - self.p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    /// Weight of the foreground class; background examples get `1 - alpha`.
    pub alpha: f64,
    /// Focusing exponent on the gradient norm.
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    fn alpha_t(&self, label: Label) -> f64 {
        match label {
            Label::Positive => self.alpha,
            Label::Negative => 1.0 - self.alpha,
        }
    }
}

/// Symmetric cross-entropy weights. `log_zero_clamp` replaces `log(0)` in
/// the reverse term, where the one-hot label sits inside the logarithm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceParams {
    pub alpha: f64,
    pub beta: f64,
    pub log_zero_clamp: f64,
}

impl Default for SceParams {
    fn default() -> Self {
        SceParams {
            alpha: 0.01,
            beta: 1.0,
            log_zero_clamp: -4.0,
        }
    }
}

/// Binary cross-entropy: `-log p` for positives, `-log(1 - p)` for negatives.
pub fn ce_loss(pred: Prediction, label: Label) -> f64 {
    match label {
        Label::Positive => -pred.p.ln(),
        Label::Negative => -(1.0 - pred.p).ln(),
    }
}

/// `g = |p - p*|`.
pub fn gradient_norm(pred: Prediction, label: Label) -> f64 {
    (pred.p - label.as_f64()).abs()
}

/// `d CE / d logit = p - p*`.
pub fn ce_grad_logit(pred: Prediction, label: Label) -> f64 {
    pred.p - label.as_f64()
}

/// `alpha_t * g^gamma * CE`, the nonnegative form of focal loss.
pub fn focal_loss(pred: Prediction, label: Label, params: FocalParams) -> f64 {
    let g = gradient_norm(pred, label);
    params.alpha_t(label) * g.powf(params.gamma) * ce_loss(pred, label)
}

pub fn focal_grad_logit(pred: Prediction, label: Label, params: FocalParams) -> f64 {
    let g = gradient_norm(pred, label);
    let ce = ce_loss(pred, label);
    // dg/dz: g = p for negatives, 1 - p for positives.
    let dg = match label {
        Label::Positive => -pred.dp_dz(),
        Label::Negative => pred.dp_dz(),
    };
    let modulation_term = if params.gamma == 0.0 {
        0.0
    } else {
        params.gamma * g.powf(params.gamma - 1.0) * dg * ce
    };
    params.alpha_t(label) * (modulation_term + g.powf(params.gamma) * ce_grad_logit(pred, label))
}

/// Reverse cross-entropy with the clamp constant standing in for `log 0`.
pub fn reverse_ce(pred: Prediction, label: Label, log_zero_clamp: f64) -> f64 {
    match label {
        // -(p * log 1 + (1 - p) * log 0)
        Label::Positive => -(1.0 - pred.p) * log_zero_clamp,
        // -(p * log 0 + (1 - p) * log 1)
        Label::Negative => -pred.p * log_zero_clamp,
    }
}

pub fn sce_loss(pred: Prediction, label: Label, params: SceParams) -> f64 {
    params.alpha * ce_loss(pred, label) + params.beta * reverse_ce(pred, label, params.log_zero_clamp)
}

pub fn sce_grad_logit(pred: Prediction, label: Label, params: SceParams) -> f64 {
    let reverse = match label {
        Label::Positive => params.log_zero_clamp * pred.dp_dz(),
        Label::Negative => -params.log_zero_clamp * pred.dp_dz(),
    };
    params.alpha * ce_grad_logit(pred, label) + params.beta * reverse
}

/// Smooth-L1 with the transition at `|x| = 1`.
pub fn smooth_l1(pred_offset: f64, target_offset: f64) -> f64 {
    let x = pred_offset - target_offset;
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Derivative of [`smooth_l1`] with respect to `pred_offset`.
pub fn smooth_l1_grad(pred_offset: f64, target_offset: f64) -> f64 {
    let x = pred_offset - target_offset;
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// An unweighted per-example classification loss.
///
/// The harmonized losses use [`ClassKernel::Ce`] as their kernel and supply
/// the per-example weights separately.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClassKernel {
    Ce,
    Focal(FocalParams),
    Sce(SceParams),
}

impl ClassKernel {
    pub fn loss(&self, pred: Prediction, label: Label) -> f64 {
        match *self {
            ClassKernel::Ce => ce_loss(pred, label),
            ClassKernel::Focal(params) => focal_loss(pred, label, params),
            ClassKernel::Sce(params) => sce_loss(pred, label, params),
        }
    }

    pub fn grad_logit(&self, pred: Prediction, label: Label) -> f64 {
        match *self {
            ClassKernel::Ce => ce_grad_logit(pred, label),
            ClassKernel::Focal(params) => focal_grad_logit(pred, label, params),
            ClassKernel::Sce(params) => sce_grad_logit(pred, label, params),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const POS: Label = Label::Positive;
    const NEG: Label = Label::Negative;

    fn p(prob: f64) -> Prediction {
        Prediction::from_prob(prob)
    }

    #[test]
    fn ce_values() {
        assert_relative_eq!(ce_loss(p(0.5), POS), std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(ce_loss(p(1.0), POS) < 1e-11);
        assert_relative_eq!(ce_loss(p(0.9), NEG), -(0.1f64).ln(), epsilon = 1e-9);
        assert_relative_eq!(ce_loss(p(0.9), NEG), 2.302585, epsilon = 1e-6);
    }

    #[test]
    fn clamping_keeps_logs_finite() {
        assert!(ce_loss(Prediction::from_logit(1000.0), NEG).is_finite());
        assert!(ce_loss(Prediction::from_logit(-1000.0), POS).is_finite());
        let pred = Prediction::from_logit(-800.0);
        assert!(pred.p() > 0.0 && pred.p() < 1.0);
    }

    #[test]
    fn gradient_norm_values() {
        assert_relative_eq!(gradient_norm(p(0.7), POS), 0.3, epsilon = 1e-12);
        assert_relative_eq!(gradient_norm(p(0.7), NEG), 0.7, epsilon = 1e-12);
        assert!(gradient_norm(p(1.0), POS) <= PROB_EPS);
    }

    #[test]
    fn ce_grad_sign() {
        assert_relative_eq!(ce_grad_logit(p(0.5), POS), -0.5);
        assert_relative_eq!(ce_grad_logit(p(0.5), NEG), 0.5);
        for prob in [0.1, 0.3, 0.8] {
            let pos = ce_grad_logit(p(prob), POS);
            let neg = ce_grad_logit(p(prob), NEG);
            assert!(pos < 0.0 && neg > 0.0);
            assert_relative_eq!(pos.abs(), gradient_norm(p(prob), POS));
        }
    }

    #[test]
    fn focal_values() {
        let params = FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        };
        assert_relative_eq!(
            focal_loss(p(0.5), POS, params),
            0.25 * 0.25 * std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_relative_eq!(focal_loss(p(0.5), POS, params), 0.04332, epsilon = 1e-5);
        assert!(focal_loss(p(1.0), POS, params) < 1e-20);
        let half = FocalParams {
            alpha: 0.5,
            gamma: 0.0,
        };
        for prob in [0.05, 0.5, 0.93] {
            assert_eq!(focal_loss(p(prob), NEG, half), 0.5 * ce_loss(p(prob), NEG));
            assert_eq!(focal_loss(p(prob), POS, half), 0.5 * ce_loss(p(prob), POS));
        }
    }

    #[test]
    fn sce_values() {
        let params = SceParams {
            alpha: 0.01,
            beta: 1.0,
            log_zero_clamp: -4.0,
        };
        // 0.01 * ln 2 + 1.0 * (0.5 * 4)
        let expected = 0.01 * std::f64::consts::LN_2 + 2.0;
        assert_relative_eq!(sce_loss(p(0.5), POS, params), expected, epsilon = 1e-12);
        assert_relative_eq!(sce_loss(p(0.5), POS, params), 2.00693, epsilon = 1e-5);
        assert!(sce_loss(p(1.0), POS, params) < 1e-10);
        let ce_only = SceParams {
            alpha: 1.0,
            beta: 0.0,
            log_zero_clamp: -4.0,
        };
        assert_eq!(sce_loss(p(0.3), NEG, ce_only), ce_loss(p(0.3), NEG));
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.5, 0.0), 0.125);
        assert_eq!(smooth_l1(2.0, 0.0), 1.5);
        assert_eq!(smooth_l1(0.0, 0.0), 0.0);
        assert_eq!(smooth_l1(-3.0, -1.0), 1.5);
        assert_eq!(smooth_l1_grad(0.5, 0.0), 0.5);
        assert_eq!(smooth_l1_grad(-4.0, 0.0), -1.0);
    }

    fn central_difference(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn check_kernel(kernel: ClassKernel) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let z: f64 = rng.gen_range(-8.0..8.0);
            let label = Label::from(rng.gen_bool(0.5));
            let analytic = kernel.grad_logit(Prediction::from_logit(z), label);
            let numeric =
                central_difference(|x| kernel.loss(Prediction::from_logit(x), label), z);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
            assert!(err < 1e-6, "{kernel:?} z={z} {label:?}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn kernels_match_finite_differences() {
        check_kernel(ClassKernel::Ce);
        check_kernel(ClassKernel::Focal(FocalParams::default()));
        check_kernel(ClassKernel::Focal(FocalParams {
            alpha: 0.7,
            gamma: 0.5,
        }));
        check_kernel(ClassKernel::Sce(SceParams::default()));
    }

    #[test]
    fn smooth_l1_matches_finite_differences_off_the_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-3.0..3.0);
            if (x.abs() - 1.0).abs() < 1e-4 {
                continue;
            }
            let numeric = central_difference(|v| smooth_l1(v, 0.0), x);
            assert!((smooth_l1_grad(x, 0.0) - numeric).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn gradient_norm_in_unit_interval(z in -40.0f64..40.0, positive: bool) {
            let pred = Prediction::from_logit(z);
            let g = gradient_norm(pred, Label::from(positive));
            prop_assert!((0.0..=1.0).contains(&g));
        }

        #[test]
        fn losses_nonnegative(z in -40.0f64..40.0, positive: bool, gamma in 0.0f64..4.0, alpha in 0.0f64..1.0) {
            let pred = Prediction::from_logit(z);
            let label = Label::from(positive);
            prop_assert!(ce_loss(pred, label) >= 0.0);
            let params = FocalParams { alpha, gamma };
            prop_assert!(focal_loss(pred, label, params) >= 0.0);
            prop_assert!(sce_loss(pred, label, SceParams::default()) >= 0.0);
        }

        #[test]
        fn sce_without_reverse_term_is_scaled_ce(z in -20.0f64..20.0, positive: bool, alpha in 0.01f64..5.0) {
            let pred = Prediction::from_logit(z);
            let label = Label::from(positive);
            let params = SceParams { alpha, beta: 0.0, log_zero_clamp: -4.0 };
            prop_assert_eq!(sce_loss(pred, label, params), alpha * ce_loss(pred, label));
        }
    }
}
