//! Differentiable encoder and softmax head with exact manual gradients.
//!
//! The encoder is an ordered stack of identity / affine / affine+ReLU layers
//! with a set of "tapped" layers exposed as feature outputs. Both the input
//! gradient and the parameter gradient are computed by hand-written
//! backpropagation; everything runs in `f64`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Identity,
    Affine,
    AffineRelu,
}

/// One encoder layer. Identity layers carry no parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major `d_out x d_in`; empty for identity layers.
    pub weight: Vec<f64>,
    /// Length `d_out`; empty for identity layers.
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn identity(dim: usize) -> Self {
        Layer {
            kind: LayerKind::Identity,
            d_in: dim,
            d_out: dim,
            weight: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn affine(weight: Vec<f64>, bias: Vec<f64>, d_in: usize, d_out: usize, relu: bool) -> Result<Self> {
        if weight.len() != d_in * d_out || bias.len() != d_out {
            return Err(Error::rejected(format!(
                "affine layer expects {}x{} weights and {} biases, got {} and {}",
                d_out,
                d_in,
                d_out,
                weight.len(),
                bias.len()
            )));
        }
        Ok(Layer {
            kind: if relu { LayerKind::AffineRelu } else { LayerKind::Affine },
            d_in,
            d_out,
            weight,
            bias,
        })
    }

    /// Seeded fan-based uniform init on `(-sqrt(6/(d_in+d_out)), +...)`.
    pub fn affine_init(d_in: usize, d_out: usize, relu: bool, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = (0..d_in * d_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Layer {
            kind: if relu { LayerKind::AffineRelu } else { LayerKind::Affine },
            d_in,
            d_out,
            weight,
            bias: vec![0.0; d_out],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        match self.kind {
            LayerKind::Identity => out.extend_from_slice(input),
            LayerKind::Affine | LayerKind::AffineRelu => {
                for o in 0..self.d_out {
                    let row = &self.weight[o * self.d_in..(o + 1) * self.d_in];
                    let mut acc = self.bias[o];
                    for (w, x) in row.iter().zip(input) {
                        acc += w * x;
                    }
                    if self.kind == LayerKind::AffineRelu && acc < 0.0 {
                        acc = 0.0;
                    }
                    out.push(acc);
                }
            }
        }
    }
}

/// Forward activations of every layer; `activations[0]` is the input.
#[derive(Debug, Clone)]
pub struct Trace {
    pub activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn layer_output(&self, layer: usize) -> &[f64] {
        &self.activations[layer + 1]
    }
}

/// Layered differentiable map with per-layer feature taps.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    layers: Vec<Layer>,
    taps: Vec<usize>,
}

impl Encoder {
    pub fn new(layers: Vec<Layer>, taps: Vec<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::rejected("encoder needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].d_out != w[1].d_in {
                return Err(Error::rejected(format!(
                    "adjacent layers do not compose: {} -> {}",
                    w[0].d_out, w[1].d_in
                )));
            }
        }
        let mut taps = taps;
        taps.sort_unstable();
        taps.dedup();
        if taps.is_empty() {
            return Err(Error::rejected("encoder needs at least one tapped layer"));
        }
        if *taps.last().unwrap() >= layers.len() {
            return Err(Error::rejected(format!(
                "tap {} out of range for {} layers",
                taps.last().unwrap(),
                layers.len()
            )));
        }
        Ok(Encoder { layers, taps })
    }

    /// The zero-parameter encoder whose only tap returns the input unchanged.
    pub fn identity(dim: usize) -> Self {
        Encoder {
            layers: vec![Layer::identity(dim)],
            taps: vec![0],
        }
    }

    /// Seeded MLP: affine+ReLU for every layer except the last, which is
    /// plain affine. Taps default to the last layer when `taps` is empty.
    pub fn mlp(dims: &[usize], taps: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::rejected("mlp needs at least input and output dims"));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| Layer::affine_init(dims[i], dims[i + 1], i + 1 < n, rng))
            .collect();
        let taps = if taps.is_empty() { vec![n - 1] } else { taps.to_vec() };
        Encoder::new(layers, taps)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn with_taps(mut self, taps: Vec<usize>) -> Result<Self> {
        let layers = std::mem::take(&mut self.layers);
        Encoder::new(layers, taps)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().d_out
    }

    pub fn layer_dim(&self, layer: usize) -> usize {
        self.layers[layer].d_out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Full forward pass caching every activation.
    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::rejected(format!(
                "input has dimension {}, encoder expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.layers {
            let mut out = Vec::with_capacity(layer.d_out);
            layer.apply(activations.last().unwrap(), &mut out);
            activations.push(out);
        }
        Ok(Trace { activations })
    }

    /// Features at every tapped layer, keyed by layer index.
    pub fn forward(&self, x: &[f64]) -> Result<BTreeMap<usize, Vec<f64>>> {
        let trace = self.forward_trace(x)?;
        Ok(self
            .taps
            .iter()
            .map(|&l| (l, trace.layer_output(l).to_vec()))
            .collect())
    }

    /// Backpropagates upstream gradients injected at arbitrary layer outputs
    /// down to the input, optionally accumulating parameter gradients into
    /// `param_grads` (laid out per [`Encoder::param_count`]).
    pub(crate) fn backward_from(
        &self,
        trace: &Trace,
        upstreams: &BTreeMap<usize, Vec<f64>>,
        mut param_grads: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        for (&l, g) in upstreams {
            if l >= self.layers.len() {
                return Err(Error::contract(format!("upstream layer {l} out of range")));
            }
            if g.len() != self.layers[l].d_out {
                return Err(Error::contract(format!(
                    "upstream at layer {l} has dimension {}, expected {}",
                    g.len(),
                    self.layers[l].d_out
                )));
            }
        }
        if let Some(pg) = param_grads.as_deref() {
            if pg.len() != self.param_count() {
                return Err(Error::contract(format!(
                    "parameter gradient buffer has {} slots, expected {}",
                    pg.len(),
                    self.param_count()
                )));
            }
        }
        let param_offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0usize, |acc, l| {
                let off = *acc;
                *acc += l.param_count();
                Some(off)
            })
            .collect();

        let mut grad = vec![0.0; self.layers.last().unwrap().d_out];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(up) = upstreams.get(&i) {
                for (g, u) in grad.iter_mut().zip(up) {
                    *g += u;
                }
            }
            match layer.kind {
                LayerKind::Identity => {
                    // gradient passes through unchanged
                }
                LayerKind::Affine | LayerKind::AffineRelu => {
                    let out = trace.layer_output(i);
                    if layer.kind == LayerKind::AffineRelu {
                        // subgradient 0 where the unit is clamped (output 0)
                        for (g, &o) in grad.iter_mut().zip(out) {
                            if o <= 0.0 {
                                *g = 0.0;
                            }
                        }
                    }
                    let input = &trace.activations[i];
                    if let Some(pg) = param_grads.as_deref_mut() {
                        let base = param_offsets[i];
                        let wlen = layer.weight.len();
                        for o in 0..layer.d_out {
                            let go = grad[o];
                            if go != 0.0 {
                                let row = &mut pg[base + o * layer.d_in..base + (o + 1) * layer.d_in];
                                for (slot, &x) in row.iter_mut().zip(input) {
                                    *slot += go * x;
                                }
                            }
                            pg[base + wlen + o] += go;
                        }
                    }
                    let mut next = vec![0.0; layer.d_in];
                    for (o, &go) in grad.iter().enumerate() {
                        if go != 0.0 {
                            let row = &layer.weight[o * layer.d_in..(o + 1) * layer.d_in];
                            for (n, &w) in next.iter_mut().zip(row) {
                                *n += go * w;
                            }
                        }
                    }
                    grad = next;
                }
            }
        }
        Ok(grad)
    }

    /// Input gradient given one upstream gradient per tapped layer.
    ///
    /// Returns the sum over taps of `(d feature_l / d x)^T upstream_l`.
    pub fn backward_input(
        &self,
        x: &[f64],
        upstreams: &BTreeMap<usize, Vec<f64>>,
    ) -> Result<Vec<f64>> {
        for &t in &self.taps {
            if !upstreams.contains_key(&t) {
                return Err(Error::contract(format!(
                    "missing upstream gradient for tapped layer {t}"
                )));
            }
        }
        for &l in upstreams.keys() {
            if !self.taps.contains(&l) {
                return Err(Error::contract(format!(
                    "upstream gradient supplied for untapped layer {l}"
                )));
            }
        }
        let trace = self.forward_trace(x)?;
        self.backward_from(&trace, upstreams, None)
    }

    /// Snapshot of all parameters in layout order (weights then bias per layer).
    pub fn params_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.weight);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let (wn, bn) = (l.weight.len(), l.bias.len());
            l.weight.copy_from_slice(&params[off..off + wn]);
            off += wn;
            l.bias.copy_from_slice(&params[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    /// In-place `p += scale * step` over the flat parameter layout.
    pub fn apply_step(&mut self, step: &[f64], scale: f64) -> Result<()> {
        if step.len() != self.param_count() {
            return Err(Error::contract(format!(
                "expected {} step entries, got {}",
                self.param_count(),
                step.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for w in &mut l.weight {
                *w += scale * step[off];
                off += 1;
            }
            for b in &mut l.bias {
                *b += scale * step[off];
                off += 1;
            }
        }
        Ok(())
    }
}

/// Linear classification head producing `C` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
    pub d_in: usize,
}

impl SoftmaxHead {
    pub fn new(weight: Vec<f64>, bias: Vec<f64>, classes: usize, d_in: usize) -> Result<Self> {
        if weight.len() != classes * d_in || bias.len() != classes {
            return Err(Error::rejected(format!(
                "head expects {classes}x{d_in} weights and {classes} biases"
            )));
        }
        Ok(SoftmaxHead {
            weight,
            bias,
            classes,
            d_in,
        })
    }

    pub fn init(classes: usize, d_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (classes + d_in) as f64).sqrt();
        SoftmaxHead {
            weight: (0..classes * d_in)
                .map(|_| rng.random_range(-limit..limit))
                .collect(),
            bias: vec![0.0; classes],
            classes,
            d_in,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn logits(&self, feat: &[f64]) -> Result<Vec<f64>> {
        if feat.len() != self.d_in {
            return Err(Error::rejected(format!(
                "head input has dimension {}, expected {}",
                feat.len(),
                self.d_in
            )));
        }
        Ok((0..self.classes)
            .map(|c| {
                let row = &self.weight[c * self.d_in..(c + 1) * self.d_in];
                row.iter().zip(feat).map(|(w, x)| w * x).sum::<f64>() + self.bias[c]
            })
            .collect())
    }

    /// Softmax probabilities, computed with the max-shift trick.
    pub fn probabilities(&self, feat: &[f64]) -> Result<Vec<f64>> {
        let logits = self.logits(feat)?;
        Ok(softmax(&logits))
    }

    pub fn params_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(&self.weight);
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::contract("head parameter count mismatch"));
        }
        let wn = self.weight.len();
        self.weight.copy_from_slice(&params[..wn]);
        self.bias.copy_from_slice(&params[wn..]);
        Ok(())
    }

    pub fn apply_step(&mut self, step: &[f64], scale: f64) -> Result<()> {
        if step.len() != self.param_count() {
            return Err(Error::contract("head step length mismatch"));
        }
        let (ws, bs) = step.split_at(self.weight.len());
        for (w, s) in self.weight.iter_mut().zip(ws) {
            *w += scale * s;
        }
        for (b, s) in self.bias.iter_mut().zip(bs) {
            *b += scale * s;
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Loss plus input/parameter gradients for one example.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub loss: f64,
    pub grad_input: Vec<f64>,
    /// Encoder parameters first (layer order), then head weights and bias.
    pub grad_params: Vec<f64>,
}

/// Cross-entropy of `head(encoder(x))` at label `y` with exact gradients
/// with respect to the input and to every parameter.
pub fn backward_params(
    encoder: &Encoder,
    head: &SoftmaxHead,
    x: &[f64],
    y: usize,
) -> Result<GradientBundle> {
    if y >= head.classes {
        return Err(Error::rejected(format!(
            "label {y} out of range for {} classes",
            head.classes
        )));
    }
    if encoder.output_dim() != head.d_in {
        return Err(Error::rejected(format!(
            "encoder output {} does not match head input {}",
            encoder.output_dim(),
            head.d_in
        )));
    }
    let trace = encoder.forward_trace(x)?;
    let feat = trace.layer_output(encoder.layers.len() - 1);
    let logits = head.logits(feat)?;
    let probs = softmax(&logits);
    // -log p_y, stabilised through the log-sum-exp identity
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    let loss = lse - logits[y];

    let mut dlogits = probs;
    dlogits[y] -= 1.0;

    let enc_params = encoder.param_count();
    let mut grad_params = vec![0.0; enc_params + head.param_count()];
    let head_grads = &mut grad_params[enc_params..];
    for c in 0..head.classes {
        let g = dlogits[c];
        for (j, &f) in feat.iter().enumerate() {
            head_grads[c * head.d_in + j] += g * f;
        }
        head_grads[head.weight.len() + c] += g;
    }

    let mut dfeat = vec![0.0; head.d_in];
    for (c, &g) in dlogits.iter().enumerate() {
        let row = &head.weight[c * head.d_in..(c + 1) * head.d_in];
        for (d, &w) in dfeat.iter_mut().zip(row) {
            *d += g * w;
        }
    }
    let mut upstream = BTreeMap::new();
    upstream.insert(encoder.layers.len() - 1, dfeat);
    let grad_input =
        encoder.backward_from(&trace, &upstream, Some(&mut grad_params[..enc_params]))?;

    Ok(GradientBundle {
        loss,
        grad_input,
        grad_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSplitter;

    #[test]
    fn identity_forward_returns_input() {
        let enc = Encoder::identity(3);
        let taps = enc.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(taps[&0], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn affine_identity_weights_pass_through() {
        let w = vec![1.0, 0.0, 0.0, 1.0];
        let layer = Layer::affine(w, vec![0.0, 0.0], 2, 2, false).unwrap();
        let enc = Encoder::new(vec![layer], vec![0]).unwrap();
        let taps = enc.forward(&[0.5, -0.5]).unwrap();
        assert_eq!(taps[&0], vec![0.5, -0.5]);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let enc = Encoder::identity(3);
        assert!(matches!(
            enc.forward(&[1.0, 2.0]),
            Err(Error::RejectedInput(_))
        ));
    }

    #[test]
    fn mlp_forward_matches_dense_matmul_oracle() {
        // independent oracle: naive dense matmul over the same weights
        let mut rng = SeedSplitter::new(17).fork("mlp");
        let enc = Encoder::mlp(&[4, 5, 3], &[0, 1], &mut rng).unwrap();
        let x = [1.0, 0.0, 0.0, 0.0];

        let l0 = &enc.layers()[0];
        let mut h = vec![0.0; 5];
        for o in 0..5 {
            let mut acc = l0.bias[o];
            for i in 0..4 {
                acc += l0.weight[o * 4 + i] * x[i];
            }
            h[o] = acc.max(0.0);
        }
        let l1 = &enc.layers()[1];
        let mut out = vec![0.0; 3];
        for o in 0..3 {
            let mut acc = l1.bias[o];
            for i in 0..5 {
                acc += l1.weight[o * 5 + i] * h[i];
            }
            out[o] = acc;
        }

        let taps = enc.forward(&x).unwrap();
        for (a, b) in taps[&0].iter().zip(&h) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in taps[&1].iter().zip(&out) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = SeedSplitter::new(8).fork("mlp");
        let enc = Encoder::mlp(&[4, 9, 5], &[0, 1], &mut rng).unwrap();
        let x = [0.3, -0.7, 0.11, 0.94];
        let a = enc.forward(&x).unwrap();
        for _ in 0..5 {
            assert_eq!(enc.forward(&x).unwrap(), a);
        }
    }

    #[test]
    fn prefix_taps_equal_full_forward() {
        let mut rng = SeedSplitter::new(4).fork("mlp");
        let enc = Encoder::mlp(&[3, 6, 5, 4], &[0, 1, 2], &mut rng).unwrap();
        let x = [0.2, -0.4, 0.9];
        let taps = enc.forward(&x).unwrap();
        let trace = enc.forward_trace(&x).unwrap();
        for (&l, feat) in &taps {
            assert_eq!(feat.as_slice(), trace.layer_output(l));
        }
    }

    #[test]
    fn identity_backward_is_identity() {
        let enc = Encoder::identity(4);
        let mut up = BTreeMap::new();
        up.insert(0usize, vec![1.0, -2.0, 3.0, 0.5]);
        let g = enc.backward_input(&[0.0; 4], &up).unwrap();
        assert_eq!(g, vec![1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn single_affine_backward_is_w_transpose() {
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let layer = Layer::affine(w, vec![0.0, 0.0], 3, 2, false).unwrap();
        let enc = Encoder::new(vec![layer], vec![0]).unwrap();
        let mut up = BTreeMap::new();
        up.insert(0usize, vec![1.0, -1.0]);
        let g = enc.backward_input(&[0.1, 0.2, 0.3], &up).unwrap();
        // W^T g = [1-4, 2-5, 3-6]
        assert_eq!(g, vec![-3.0, -3.0, -3.0]);
    }

    #[test]
    fn backward_input_requires_every_tap() {
        let mut rng = SeedSplitter::new(5).fork("mlp");
        let enc = Encoder::mlp(&[3, 4, 2], &[0, 1], &mut rng).unwrap();
        let mut up = BTreeMap::new();
        up.insert(1usize, vec![1.0, 1.0]);
        assert!(matches!(
            enc.backward_input(&[0.0; 3], &up),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn uniform_logits_give_ln_c_loss() {
        let enc = Encoder::identity(4);
        let head = SoftmaxHead::new(vec![0.0; 40], vec![0.0; 10], 10, 4).unwrap();
        let bundle = backward_params(&enc, &head, &[0.1, 0.2, 0.3, 0.4], 3).unwrap();
        assert!((bundle.loss - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logit_loss_vanishes() {
        let enc = Encoder::identity(2);
        // logit margin 50 for class 0
        let head = SoftmaxHead::new(vec![50.0, 0.0, 0.0, 0.0], vec![0.0, 0.0], 2, 2).unwrap();
        let bundle = backward_params(&enc, &head, &[1.0, 0.0], 0).unwrap();
        assert!(bundle.loss < 1e-20);
    }

    #[test]
    fn backward_params_rejects_bad_label() {
        let enc = Encoder::identity(2);
        let head = SoftmaxHead::new(vec![0.0; 4], vec![0.0; 2], 2, 2).unwrap();
        assert!(matches!(
            backward_params(&enc, &head, &[0.0, 0.0], 2),
            Err(Error::RejectedInput(_))
        ));
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, -50.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn params_roundtrip_and_step() {
        let mut rng = SeedSplitter::new(11).fork("mlp");
        let mut enc = Encoder::mlp(&[3, 4, 2], &[1], &mut rng).unwrap();
        let before = enc.params_vec();
        let step = vec![1.0; enc.param_count()];
        enc.apply_step(&step, 0.5).unwrap();
        let after = enc.params_vec();
        for (b, a) in before.iter().zip(&after) {
            assert!((a - b - 0.5).abs() < 1e-15);
        }
        enc.set_params(&before).unwrap();
        assert_eq!(enc.params_vec(), before);
    }
}
