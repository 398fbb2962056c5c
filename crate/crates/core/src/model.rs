//! A small two-headed perceptron with hand-written backpropagation.
//!
//! All parameters live in one flat `Vec<f64>`; each layer records where its
//! weight matrix (row-major, `output x input`) and bias start. Hidden layers
//! use `tanh`. The final layer has five outputs: the classification logit
//! followed by the four box offsets.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEAD_OUTPUTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerShape {
    fn weight(&self, params: &[f64], row: usize) -> std::ops::Range<usize> {
        let start = self.weight_offset + row * self.input;
        debug_assert!(start + self.input <= params.len());
        start..start + self.input
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

/// Outputs of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Output {
    pub logit: f64,
    pub offsets: [f64; 4],
}

/// Activations kept from a forward pass for backpropagation. `acts[0]` is
/// the input; `acts[l + 1]` the output of layer `l` after its nonlinearity.
#[derive(Clone, Debug)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> Output {
        let last = self.acts.last().expect("trace has an output layer");
        Output {
            logit: last[0],
            offsets: [last[1], last[2], last[3], last[4]],
        }
    }
}

impl Mlp {
    /// Hidden weights are Glorot-uniform, biases and the output layer zero,
    /// so a fresh model predicts `p = 0.5` and zero offsets everywhere.
    pub fn new(input: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut model = Mlp::zeros(input, hidden);
        let hidden_layers = model.layers.len() - 1;
        for layer in &model.layers[..hidden_layers] {
            let limit = (6.0 / (layer.input + layer.output) as f64).sqrt();
            for w in &mut model.params[layer.weight_offset..layer.bias_offset] {
                *w = rng.gen_range(-limit..limit);
            }
        }
        model
    }

    pub fn zeros(input: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut fan_in = input;
        for &width in hidden.iter().chain(std::iter::once(&HEAD_OUTPUTS)) {
            let weight_offset = offset;
            let bias_offset = offset + fan_in * width;
            offset = bias_offset + width;
            layers.push(LayerShape {
                input: fan_in,
                output: width,
                weight_offset,
                bias_offset,
            });
            fan_in = width;
        }
        Mlp {
            layers,
            params: vec![0.0; offset],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.output)
            .collect()
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Output> {
        Ok(self.forward_trace(x)?.output())
    }

    pub fn forward_batch<'a>(&self, xs: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<Output>> {
        xs.into_iter().map(|x| self.forward(x)).collect()
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = &acts[l];
            let out: Vec<f64> = (0..layer.output)
                .map(|r| {
                    let w = &self.params[layer.weight(&self.params, r)];
                    let z = self.params[layer.bias_offset + r]
                        + w.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    if l == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }
        Ok(Trace { acts })
    }

    /// Accumulates into `grads` the parameter gradient for one example,
    /// given the loss derivative with respect to its logit and offsets.
    pub fn backward(&self, trace: &Trace, d_logit: f64, d_offsets: &[f64; 4], grads: &mut [f64]) {
        debug_assert_eq!(grads.len(), self.params.len());
        let mut delta = vec![d_logit, d_offsets[0], d_offsets[1], d_offsets[2], d_offsets[3]];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.acts[l];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grads[layer.bias_offset + r] += d;
                let range = layer.weight(&self.params, r);
                for (g, &a) in grads[range].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l == 0 {
                break;
            }
            // through the weights, then through tanh of the layer below
            let mut below = vec![0.0; layer.input];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let w = &self.params[layer.weight(&self.params, r)];
                for (b, &wi) in below.iter_mut().zip(w) {
                    *b += d * wi;
                }
            }
            for (b, &a) in below.iter_mut().zip(input) {
                *b *= 1.0 - a * a;
            }
            delta = below;
        }
    }

    /// Writes a text checkpoint: a header with the layer widths, then one
    /// parameter per line in flat layout order.
    pub fn write_checkpoint(&self, mut out: impl Write) -> Result<()> {
        let widths: Vec<String> = std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.output))
            .map(|w| w.to_string())
            .collect();
        writeln!(out, "mlp {}", widths.join(" "))?;
        for p in &self.params {
            writeln!(out, "{p}")?;
        }
        Ok(())
    }

    pub fn read_checkpoint(input: impl BufRead, file: &str) -> Result<Mlp> {
        let parse_err = |line: usize, reason: &str| Error::Parse {
            file: file.to_string(),
            line,
            reason: reason.to_string(),
        };
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "empty checkpoint"))??;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("mlp") {
            return Err(parse_err(1, "missing `mlp` header"));
        }
        let widths: Vec<usize> = fields
            .map(|f| f.parse().map_err(|_| parse_err(1, "bad layer width")))
            .collect::<Result<_>>()?;
        if widths.len() < 2 || *widths.last().unwrap() != HEAD_OUTPUTS {
            return Err(parse_err(1, "bad layer widths"));
        }
        let mut model = Mlp::zeros(widths[0], &widths[1..widths.len() - 1]);
        let mut n = 0;
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let slot = model
                .params
                .get_mut(n)
                .ok_or_else(|| parse_err(i + 2, "too many parameters"))?;
            *slot = line.trim().parse().map_err(|_| parse_err(i + 2, "bad parameter"))?;
            n += 1;
        }
        if n != model.params.len() {
            return Err(parse_err(n + 1, "too few parameters"));
        }
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize, params: AdamParams) -> Self {
        AdamState {
            params,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `weights` in place.
    pub fn step(&mut self, weights: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(weights.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..weights.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            weights[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn model() -> Mlp {
        Mlp::new(3, &[4, 3], &mut ChaCha8Rng::seed_from_u64(2))
    }

    #[test]
    fn fresh_model_predicts_half() {
        let m = model();
        let out = m.forward(&[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(out.logit, 0.0);
        assert_eq!(out.offsets, [0.0; 4]);
        assert_eq!(crate::loss::sigmoid(out.logit), 0.5);
    }

    #[test]
    fn forward_is_deterministic_and_batch_consistent() {
        let mut m = model();
        for (i, p) in m.params_mut().iter_mut().enumerate() {
            *p += 0.01 * (i as f64).sin();
        }
        let xs = [vec![0.1, 0.2, 0.3], vec![-1.0, 0.0, 1.0]];
        let a = m.forward(&xs[0]).unwrap();
        assert_eq!(a, m.forward(&xs[0]).unwrap());
        let batch = m.forward_batch(xs.iter().map(|x| x.as_slice())).unwrap();
        assert_eq!(batch[0], a);
        assert_eq!(batch[1], m.forward(&xs[1]).unwrap());
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            model().forward(&[1.0]),
            Err(Error::DimensionMismatch { expected: 3, actual: 1 })
        ));
    }

    #[test]
    fn backward_matches_finite_differences_on_a_linear_readout() {
        // loss = logit + 2 * offsets[1]
        let mut m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in m.params_mut() {
            *p += rng.gen_range(-0.5..0.5);
        }
        let x = [0.4, -0.7, 1.1];
        let trace = m.forward_trace(&x).unwrap();
        let mut grads = vec![0.0; m.num_params()];
        m.backward(&trace, 1.0, &[0.0, 2.0, 0.0, 0.0], &mut grads);
        let h = 1e-6;
        for i in 0..m.num_params() {
            let f = |m: &Mlp| {
                let o = m.forward(&x).unwrap();
                o.logit + 2.0 * o.offsets[1]
            };
            let mut plus = m.clone();
            plus.params_mut()[i] += h;
            let mut minus = m.clone();
            minus.params_mut()[i] -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((numeric - grads[i]).abs() < 1e-8, "param {i}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut w = vec![1.0, -2.0, 3.0];
        let before = w.clone();
        let mut adam = AdamState::new(3, AdamParams::default());
        for _ in 0..5 {
            adam.step(&mut w, &[0.0; 3], 1e-3);
        }
        assert_eq!(w, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let grads = [0.5, -2.0, 1e-3];
        let mut w = vec![0.0; 3];
        let lr = 1e-4;
        let mut adam = AdamState::new(3, AdamParams::default());
        adam.step(&mut w, &grads, lr);
        for (wi, g) in w.iter().zip(grads) {
            let expected = -lr * g / (g.abs() + 1e-8);
            assert_relative_eq!(*wi, expected, max_relative = 1e-12);
            assert_relative_eq!(wi.abs(), lr, max_relative = 1e-4);
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut w = vec![0.3; 4];
            let mut adam = AdamState::new(4, AdamParams::default());
            for k in 0..20 {
                let g: Vec<f64> = w.iter().map(|x| x * x - 0.1 * k as f64).collect();
                adam.step(&mut w, &g, 1e-2);
            }
            w
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = Mlp::read_checkpoint(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, m);
        assert!(Mlp::read_checkpoint("mlp 3 5\n1.0\n".as_bytes(), "mem").is_err());
    }
}
