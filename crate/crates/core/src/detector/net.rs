//! Feedforward building blocks for the two detection stages: dense layers,
//! the shared-trunk forecast network with three output heads and a trainable
//! boundary-amplification scalar, and the anomaly classifier.
//!
//! Backpropagation is hand-rolled. All parameters of a network flatten into
//! one `Vec<f64>` with a fixed layout (layer order, weights row-major before
//! biases, amplification scalars last) so the optimizer and the
//! finite-difference check can treat a network as a plain parameter vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A fully connected layer; weights are row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn glorot(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        // Small positive biases: a fully dead ReLU layer with zero biases
        // would pin every downstream pre-activation at exactly 0, parking
        // the network on a kink.
        Dense {
            in_dim,
            out_dim,
            w: (0..in_dim * out_dim).map(|_| rng.gen_range(-limit..limit)).collect(),
            b: vec![0.01; out_dim],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = self.b.clone();
        for (i, yi) in y.iter_mut().enumerate() {
            let row = &self.w[i * self.in_dim..(i + 1) * self.in_dim];
            *yi += row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
        y
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Accumulates weight/bias gradients for upstream gradient `dy` and
    /// returns the gradient with respect to the input.
    fn backward(&self, x: &[f64], dy: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (i, d) in dy.iter().enumerate() {
            gb[i] += d;
            let row = &self.w[i * self.in_dim..(i + 1) * self.in_dim];
            let grow = &mut gw[i * self.in_dim..(i + 1) * self.in_dim];
            for j in 0..self.in_dim {
                grow[j] += d * x[j];
                dx[j] += d * row[j];
            }
        }
        dx
    }

    fn shape_ok(&self) -> bool {
        self.w.len() == self.in_dim * self.out_dim && self.b.len() == self.out_dim
    }
}

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Masks `d` by the ReLU derivative given the post-activation output.
fn relu_backward(d: &mut [f64], post: &[f64]) {
    for (di, p) in d.iter_mut().zip(post) {
        if *p <= 0.0 {
            *di = 0.0;
        }
    }
}

fn push_dense_params(layers: &[Dense], out: &mut Vec<f64>) {
    for l in layers {
        out.extend_from_slice(&l.w);
        out.extend_from_slice(&l.b);
    }
}

fn read_dense_params(layers: &mut [Dense], src: &[f64], pos: &mut usize) {
    for l in layers {
        let (wl, bl) = (l.w.len(), l.b.len());
        l.w.copy_from_slice(&src[*pos..*pos + wl]);
        *pos += wl;
        l.b.copy_from_slice(&src[*pos..*pos + bl]);
        *pos += bl;
    }
}

/// Borrows the weight and bias gradient sub-slices of one dense region of the
/// flat gradient buffer.
fn split_region(grads: &mut [f64], w_off: usize, w_len: usize, count: usize) -> (&mut [f64], &mut [f64]) {
    let region = &mut grads[w_off..w_off + count];
    region.split_at_mut(w_len)
}

fn layer_chain_ok(layers: &[Dense], input: usize, sizes: &[usize]) -> bool {
    if layers.len() != sizes.len() || !layers.iter().all(Dense::shape_ok) {
        return false;
    }
    let mut dim = input;
    for (layer, &size) in layers.iter().zip(sizes) {
        if layer.in_dim != dim || layer.out_dim != size {
            return false;
        }
        dim = size;
    }
    true
}

pub(crate) const TRUNK_SIZES: [usize; 3] = [18, 9, 8];
pub(crate) const HEAD_SIZES: [usize; 2] = [4, 1];
pub(crate) const CLASSIFIER_INPUT: usize = 3;
pub(crate) const CLASSIFIER_SIZES: [usize; 3] = [8, 4, 1];

fn chain(mut in_dim: usize, sizes: &[usize], rng: &mut impl Rng) -> Vec<Dense> {
    sizes
        .iter()
        .map(|&out| {
            let layer = Dense::glorot(in_dim, out, rng);
            in_dim = out;
            layer
        })
        .collect()
}

/// Stage-1 network: three ReLU trunk layers shared by a baseline head and
/// two boundary heads (one ReLU hidden layer each, linear output), plus the
/// scalar irregularity layer `s = 2*sigmoid(w*iqr + b)` that scales the
/// boundary offsets around the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct ForecastNet {
    pub trunk: Vec<Dense>,
    pub head_base: Vec<Dense>,
    pub head_lower: Vec<Dense>,
    pub head_upper: Vec<Dense>,
    pub irr_weight: f64,
    pub irr_bias: f64,
}

/// Saved activations from one forward pass, consumed by `backward`.
pub(crate) struct ForecastPass {
    trunk_acts: Vec<Vec<f64>>,
    base_acts: [Vec<f64>; 2],
    lower_acts: [Vec<f64>; 2],
    upper_acts: [Vec<f64>; 2],
    sig: f64,
    pub s_irr: f64,
    pub y_base: f64,
    pub y_lower_raw: f64,
    pub y_upper_raw: f64,
    /// Boundary outputs after amplification (not yet ordered).
    pub y_lower: f64,
    pub y_upper: f64,
}

impl ForecastNet {
    /// Fresh network for the given input width. The irregularity layer
    /// starts at zero so amplification is the identity at initialization.
    pub fn init(input_dim: usize, rng: &mut impl Rng) -> Self {
        ForecastNet {
            trunk: chain(input_dim, &TRUNK_SIZES, rng),
            head_base: chain(TRUNK_SIZES[2], &HEAD_SIZES, rng),
            head_lower: chain(TRUNK_SIZES[2], &HEAD_SIZES, rng),
            head_upper: chain(TRUNK_SIZES[2], &HEAD_SIZES, rng),
            irr_weight: 0.0,
            irr_bias: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk[0].in_dim
    }

    pub fn param_count(&self) -> usize {
        let dense: usize = self
            .dense_layers()
            .map(Dense::param_count)
            .sum();
        dense + 2
    }

    fn dense_layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk
            .iter()
            .chain(&self.head_base)
            .chain(&self.head_lower)
            .chain(&self.head_upper)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        push_dense_params(&self.trunk, &mut out);
        push_dense_params(&self.head_base, &mut out);
        push_dense_params(&self.head_lower, &mut out);
        push_dense_params(&self.head_upper, &mut out);
        out.push(self.irr_weight);
        out.push(self.irr_bias);
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count());
        let mut pos = 0;
        read_dense_params(&mut self.trunk, p, &mut pos);
        read_dense_params(&mut self.head_base, p, &mut pos);
        read_dense_params(&mut self.head_lower, p, &mut pos);
        read_dense_params(&mut self.head_upper, p, &mut pos);
        self.irr_weight = p[pos];
        self.irr_bias = p[pos + 1];
    }

    /// Flat offsets `(start, weight_len, count)` of the nine dense regions in
    /// layout order, plus the offsets of the two irregularity scalars.
    fn offsets(&self) -> (Vec<(usize, usize, usize)>, usize, usize) {
        let mut offs = Vec::with_capacity(9);
        let mut pos = 0;
        for l in self.dense_layers() {
            offs.push((pos, l.w.len(), l.param_count()));
            pos += l.param_count();
        }
        (offs, pos, pos + 1)
    }

    pub fn forward(&self, x: &[f64], iqr: f64) -> ForecastPass {
        let mut trunk_acts = Vec::with_capacity(self.trunk.len());
        let mut cur = x.to_vec();
        for layer in &self.trunk {
            let mut y = layer.forward(&cur);
            relu_inplace(&mut y);
            cur = y.clone();
            trunk_acts.push(y);
        }
        let f = &cur;

        let head = |layers: &[Dense]| -> [Vec<f64>; 2] {
            let mut hidden = layers[0].forward(f);
            relu_inplace(&mut hidden);
            let out = layers[1].forward(&hidden);
            [hidden, out]
        };
        let base_acts = head(&self.head_base);
        let lower_acts = head(&self.head_lower);
        let upper_acts = head(&self.head_upper);

        let y_base = base_acts[1][0];
        let y_lower_raw = lower_acts[1][0];
        let y_upper_raw = upper_acts[1][0];

        let sig = sigmoid(self.irr_weight * iqr + self.irr_bias);
        let s_irr = 2.0 * sig;
        let y_lower = s_irr * (y_lower_raw - y_base) + y_base;
        let y_upper = s_irr * (y_upper_raw - y_base) + y_base;

        ForecastPass {
            trunk_acts,
            base_acts,
            lower_acts,
            upper_acts,
            sig,
            s_irr,
            y_base,
            y_lower_raw,
            y_upper_raw,
            y_lower,
            y_upper,
        }
    }

    /// Accumulates gradients for upstream derivatives with respect to the
    /// baseline and the amplified boundaries.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[f64],
        iqr: f64,
        pass: &ForecastPass,
        g_base: f64,
        g_lower: f64,
        g_upper: f64,
        grads: &mut [f64],
    ) {
        debug_assert_eq!(grads.len(), self.param_count());
        let (offs, irr_w_off, irr_b_off) = self.offsets();

        // Amplification: y_l = s*(y_l0 - y_b) + y_b with s = 2*sigmoid(a).
        let d_s = g_lower * (pass.y_lower_raw - pass.y_base)
            + g_upper * (pass.y_upper_raw - pass.y_base);
        let d_a = d_s * 2.0 * pass.sig * (1.0 - pass.sig);
        grads[irr_w_off] += d_a * iqr;
        grads[irr_b_off] += d_a;

        let d_base_out = g_base + (1.0 - pass.s_irr) * (g_lower + g_upper);
        let d_lower_out = g_lower * pass.s_irr;
        let d_upper_out = g_upper * pass.s_irr;

        let f = pass.trunk_acts.last().unwrap();
        let mut d_f = vec![0.0; f.len()];
        backward_head(&self.head_base, f, &pass.base_acts, d_base_out, &offs[3..5], grads, &mut d_f);
        backward_head(&self.head_lower, f, &pass.lower_acts, d_lower_out, &offs[5..7], grads, &mut d_f);
        backward_head(&self.head_upper, f, &pass.upper_acts, d_upper_out, &offs[7..9], grads, &mut d_f);

        // Trunk: every layer output passes through ReLU, including the last.
        let mut d = d_f;
        for i in (0..self.trunk.len()).rev() {
            relu_backward(&mut d, &pass.trunk_acts[i]);
            let input: &[f64] = if i == 0 { x } else { &pass.trunk_acts[i - 1] };
            let (start, w_len, count) = offs[i];
            let (gw, gb) = split_region(grads, start, w_len, count);
            d = self.trunk[i].backward(input, &d, gw, gb);
        }
    }

    pub fn shapes_ok(&self) -> bool {
        layer_chain_ok(&self.trunk, self.input_dim(), &TRUNK_SIZES)
            && layer_chain_ok(&self.head_base, TRUNK_SIZES[2], &HEAD_SIZES)
            && layer_chain_ok(&self.head_lower, TRUNK_SIZES[2], &HEAD_SIZES)
            && layer_chain_ok(&self.head_upper, TRUNK_SIZES[2], &HEAD_SIZES)
    }
}

/// Backward pass of one two-layer head; adds the head's contribution to the
/// gradient with respect to the shared trunk output.
fn backward_head(
    layers: &[Dense],
    f: &[f64],
    acts: &[Vec<f64>; 2],
    d_out: f64,
    offs: &[(usize, usize, usize)],
    grads: &mut [f64],
    d_f: &mut [f64],
) {
    let mut d_hidden = {
        let (start, w_len, count) = offs[1];
        let (gw, gb) = split_region(grads, start, w_len, count);
        layers[1].backward(&acts[0], &[d_out], gw, gb)
    };
    relu_backward(&mut d_hidden, &acts[0]);
    let (start, w_len, count) = offs[0];
    let (gw, gb) = split_region(grads, start, w_len, count);
    let dx = layers[0].backward(f, &d_hidden, gw, gb);
    for (a, b) in d_f.iter_mut().zip(&dx) {
        *a += b;
    }
}

/// Stage-2 network: deviation features through two ReLU layers and a linear
/// logit; the anomaly probability is `sigmoid(logit)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct ClassifierNet {
    pub layers: Vec<Dense>,
}

pub(crate) struct ClassifierPass {
    acts: Vec<Vec<f64>>,
    pub logit: f64,
}

impl ClassifierNet {
    pub fn init(rng: &mut impl Rng) -> Self {
        ClassifierNet {
            layers: chain(CLASSIFIER_INPUT, &CLASSIFIER_SIZES, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        push_dense_params(&self.layers, &mut out);
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count());
        let mut pos = 0;
        read_dense_params(&mut self.layers, p, &mut pos);
    }

    pub fn forward(&self, x: &[f64]) -> ClassifierPass {
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n);
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&cur);
            if i + 1 < n {
                relu_inplace(&mut y);
            }
            cur = y.clone();
            acts.push(y);
        }
        let logit = cur[0];
        ClassifierPass { acts, logit }
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.forward(x).logit)
    }

    pub fn backward(&self, x: &[f64], pass: &ClassifierPass, d_logit: f64, grads: &mut [f64]) {
        debug_assert_eq!(grads.len(), self.param_count());
        let mut offs = Vec::with_capacity(self.layers.len());
        let mut pos = 0;
        for l in &self.layers {
            offs.push((pos, l.w.len(), l.param_count()));
            pos += l.param_count();
        }

        let mut d = vec![d_logit];
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                relu_backward(&mut d, &pass.acts[i]);
            }
            let input: &[f64] = if i == 0 { x } else { &pass.acts[i - 1] };
            let (start, w_len, count) = offs[i];
            let (gw, gb) = split_region(grads, start, w_len, count);
            d = self.layers[i].backward(input, &d, gw, gb);
        }
    }

    pub fn shapes_ok(&self) -> bool {
        layer_chain_ok(&self.layers, CLASSIFIER_INPUT, &CLASSIFIER_SIZES)
    }
}
