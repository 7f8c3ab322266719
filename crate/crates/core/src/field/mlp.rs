//! Shallow color head for the feature-grid color mode.

use rand::Rng;

use super::GridScalar;
use crate::geometry::Vec3;

/// Feature channels stored per grid node in feature mode.
pub const FEATURE_DIM: usize = 12;
pub const HIDDEN_DIM: usize = 64;
/// Octaves of sin/cos positional encoding for position and view direction.
pub const PE_FREQS: usize = 4;
pub const PE_DIM: usize = 3 + 3 * 2 * PE_FREQS;
pub const MLP_INPUT_DIM: usize = FEATURE_DIM + 2 * PE_DIM;

/// Fully connected layer, `weights` row-major `outputs x inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<S> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: GridScalar> DenseLayer<S> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![S::default(); inputs * outputs],
            bias: vec![S::default(); outputs],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(input.len(), self.inputs);
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.bias[o].to_f64();
            for (w, x) in row.iter().zip(input) {
                acc += w.to_f64() * x;
            }
            *slot = acc;
        }
    }
}

/// ReLU MLP; the final layer is linear and the caller applies a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorMlp<S> {
    pub layers: Vec<DenseLayer<S>>,
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Clone, Debug, Default)]
pub struct MlpTrace {
    /// `acts[0]` is the input; `acts[l + 1]` is the post-activation output of layer `l`
    /// (the last entry holds the pre-sigmoid logits).
    pub acts: Vec<Vec<f64>>,
}

impl<S: GridScalar> ColorMlp<S> {
    pub fn zeros() -> Self {
        Self {
            layers: vec![DenseLayer::zeros(MLP_INPUT_DIM, HIDDEN_DIM), DenseLayer::zeros(HIDDEN_DIM, 3)],
        }
    }

    /// Uniform fan-in scaled initialization with zero biases.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut mlp = Self::zeros();
        for layer in &mut mlp.layers {
            let bound = (6.0 / layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = S::from_f64(rng.gen_range(-bound..bound));
            }
        }
        mlp
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn forward(&self, input: &[f64]) -> [f64; 3] {
        let mut trace = MlpTrace::default();
        self.forward_trace(input, &mut trace);
        let last = trace.acts.last().expect("input activation");
        [last[0], last[1], last[2]]
    }

    pub fn forward_trace(&self, input: &[f64], trace: &mut MlpTrace) {
        trace.acts.resize_with(self.layers.len() + 1, Vec::new);
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(input);
        let n = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = trace.acts.split_at_mut(l + 1);
            let out = &mut tail[0];
            out.resize(layer.outputs, 0.0);
            layer.apply(&head[l], out);
            if l + 1 < n {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }

    /// Backpropagates `d_out` (gradient w.r.t. the final logits) through a
    /// recorded trace. Parameter gradients are added into `d_params`, laid
    /// out layer by layer as weights then biases; the input gradient is
    /// written to `d_input`.
    pub fn backward(&self, trace: &MlpTrace, d_out: &[f64], d_params: &mut [f64], d_input: &mut Vec<f64>) {
        let mut grad: Vec<f64> = d_out.to_vec();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.param_count();
        }
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.acts[l];
            let base = offsets[l];
            let (dw, db) = d_params[base..base + layer.param_count()].split_at_mut(layer.weights.len());
            let mut d_in = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let g = grad[o];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                let row = o * layer.inputs;
                for i in 0..layer.inputs {
                    dw[row + i] += g * input[i];
                    d_in[i] += g * layer.weights[row + i].to_f64();
                }
            }
            if l > 0 {
                // ReLU derivative of the layer below.
                for (d, a) in d_in.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            grad = d_in;
        }
        *d_input = grad;
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weights.iter().map(|w| w.to_f64()));
            out.extend(layer.bias.iter().map(|b| b.to_f64()));
        }
        out
    }

    /// Mutable access to the parameter at flat index `i` (same layout as `flat_params`).
    pub fn param_mut(&mut self, mut i: usize) -> &mut S {
        for layer in &mut self.layers {
            if i < layer.weights.len() {
                return &mut layer.weights[i];
            }
            i -= layer.weights.len();
            if i < layer.bias.len() {
                return &mut layer.bias[i];
            }
            i -= layer.bias.len();
        }
        panic!("mlp parameter index out of range");
    }

    pub fn cast<T: GridScalar>(&self) -> ColorMlp<T> {
        ColorMlp {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weights: l.weights.iter().map(|w| T::from_f64(w.to_f64())).collect(),
                    bias: l.bias.iter().map(|b| T::from_f64(b.to_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Appends `[v, sin(2^k pi v), cos(2^k pi v)]` for `k < PE_FREQS`.
pub fn positional_encoding(v: &Vec3, out: &mut Vec<f64>) {
    out.extend_from_slice(v.as_slice());
    let mut freq = std::f64::consts::PI;
    for _ in 0..PE_FREQS {
        for k in 0..3 {
            out.push((freq * v[k]).sin());
        }
        for k in 0..3 {
            out.push((freq * v[k]).cos());
        }
        freq *= 2.0;
    }
}

/// Assembles the MLP input from interpolated features, the position
/// normalized to the unit cube of the field bounds, and the view direction.
pub fn encode_input(features: &[f64], x_unit: &Vec3, d: &Vec3, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(features);
    positional_encoding(x_unit, out);
    positional_encoding(d, out);
}
