//! The aggregation head: layer mixing, soft dimension mask, single-vector
//! attention pooling and a bias-free linear classifier.
//!
//! Given all-layer states `H_0..H_L` (each `T x d`):
//!
//! ```text
//! s = softmax(v1)                      (uniform when v1 is ablated)
//! U = sum_i s_i H_i                    (scaled by gamma in the ELMo variant)
//! X = sigmoid(v2) * U                  (per dim, every token; skipped when v2 is ablated)
//! w = softmax(X v3)                    over tokens
//! h = X^T w
//! logits = W h
//! ```
//!
//! For sequence labeling the pooling step is dropped and every row of `X` is
//! classified on its own.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::HiddenStates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Attention,
    /// No pooling: per-token classification for sequence labeling.
    None,
}

/// Which parts of the head are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_v1: bool,
    pub use_v2: bool,
    #[serde(default)]
    pub use_gamma: bool,
    #[serde(default)]
    pub pooling: Pooling,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { use_v1: true, use_v2: true, use_gamma: false, pooling: Pooling::Attention }
    }
}

impl AblationFlags {
    /// Flags for one cell of the v1/v2 grid; everything else default.
    pub fn grid(use_v1: bool, use_v2: bool) -> Self {
        Self { use_v1, use_v2, ..Self::default() }
    }

    /// Two-digit grid label, first digit v1, second v2.
    pub fn cell_name(&self) -> String {
        format!("{}{}", u8::from(self.use_v1), u8::from(self.use_v2))
    }

    pub fn trains(&self, block: Block) -> bool {
        match block {
            Block::LayerLogits => self.use_v1,
            Block::MaskLogits => self.use_v2,
            Block::Query => self.pooling == Pooling::Attention,
            Block::Classifier => true,
            Block::Gamma => self.use_gamma,
        }
    }
}

/// Named parameter groups of [`HeadParams`], in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    LayerLogits,
    MaskLogits,
    Query,
    Classifier,
    Gamma,
}

impl Block {
    pub const ALL: [Block; 5] =
        [Block::LayerLogits, Block::MaskLogits, Block::Query, Block::Classifier, Block::Gamma];

    pub fn name(self) -> &'static str {
        match self {
            Block::LayerLogits => "v1",
            Block::MaskLogits => "v2",
            Block::Query => "v3",
            Block::Classifier => "W",
            Block::Gamma => "gamma",
        }
    }
}

/// Trainable head state. `classifier` is row-major `num_classes x dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// v1, one logit per layer (embedding layer first).
    pub layer_logits: Vec<f64>,
    /// v2, soft-mask logits per hidden dimension.
    pub mask_logits: Vec<f64>,
    /// v3, attention query.
    pub query: Vec<f64>,
    pub classifier: Vec<f64>,
    pub num_classes: usize,
    /// Global scale, only read when `use_gamma` is set.
    pub gamma: f64,
}

/// Loss cotangents, shaped exactly like [`HeadParams`].
pub type HeadGradients = HeadParams;

impl HeadParams {
    /// All-zero parameters (gamma included).
    pub fn zeros(num_layers: usize, dim: usize, num_classes: usize) -> Self {
        Self {
            layer_logits: vec![0.0; num_layers],
            mask_logits: vec![0.0; dim],
            query: vec![0.0; dim],
            classifier: vec![0.0; num_classes * dim],
            num_classes,
            gamma: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_layers(), self.dim(), self.num_classes)
    }

    pub fn num_layers(&self) -> usize {
        self.layer_logits.len()
    }

    pub fn dim(&self) -> usize {
        self.mask_logits.len()
    }

    pub fn block(&self, block: Block) -> &[f64] {
        match block {
            Block::LayerLogits => &self.layer_logits,
            Block::MaskLogits => &self.mask_logits,
            Block::Query => &self.query,
            Block::Classifier => &self.classifier,
            Block::Gamma => std::slice::from_ref(&self.gamma),
        }
    }

    pub fn block_mut(&mut self, block: Block) -> &mut [f64] {
        match block {
            Block::LayerLogits => &mut self.layer_logits,
            Block::MaskLogits => &mut self.mask_logits,
            Block::Query => &mut self.query,
            Block::Classifier => &mut self.classifier,
            Block::Gamma => std::slice::from_mut(&mut self.gamma),
        }
    }

    /// Total scalar count across every block.
    pub fn len(&self) -> usize {
        Block::ALL.iter().map(|&b| self.block(b).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened copy in [`Block::ALL`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        Block::ALL.iter().flat_map(|&b| self.block(b).iter().copied()).collect()
    }

    /// Inverse of [`HeadParams::to_flat`] for a template of the same shape.
    pub fn from_flat(template: &Self, flat: &[f64]) -> Result<Self> {
        if flat.len() != template.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                template.len(),
                flat.len()
            )));
        }
        let mut out = template.clone();
        let mut rest = flat;
        for b in Block::ALL {
            let dst = out.block_mut(b);
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers() == 0 || self.dim() == 0 || self.num_classes == 0 {
            return Err(Error::Shape("head needs at least one layer, dim and class".into()));
        }
        if self.query.len() != self.dim() || self.classifier.len() != self.num_classes * self.dim() {
            return Err(Error::Shape(format!(
                "inconsistent head shapes: v2 {}, v3 {}, W {} for {} classes",
                self.mask_logits.len(),
                self.query.len(),
                self.classifier.len(),
                self.num_classes
            )));
        }
        for b in Block::ALL {
            if self.block(b).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter block {}", b.name())));
            }
        }
        Ok(())
    }

    pub fn check_states(&self, states: &HiddenStates) -> Result<()> {
        if states.num_layers() != self.num_layers() || states.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "states are {}x{} (layers x dim), head expects {}x{}",
                states.num_layers(),
                states.dim(),
                self.num_layers(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Row `c` of the classifier.
    pub fn class_row(&self, c: usize) -> &[f64] {
        let d = self.dim();
        &self.classifier[c * d..(c + 1) * d]
    }
}

/// Everything the forward pass computed, kept for analysis and backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// s, layer weights on the simplex.
    pub layer_weights: Vec<f64>,
    /// m, per-dim mask in (0, 1), or exactly 1 when ablated.
    pub mask: Vec<f64>,
    /// Layer mix before gamma and mask, `T x d` row-major.
    pub mixed: Vec<f64>,
    /// Scaled and masked matrix fed to pooling, `T x d` row-major.
    pub masked: Vec<f64>,
    /// w, attention over tokens.
    pub attention: Vec<f64>,
    /// h, pooled vector of length d.
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Forward result for per-token classification.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTrace {
    pub layer_weights: Vec<f64>,
    pub mask: Vec<f64>,
    pub mixed: Vec<f64>,
    pub masked: Vec<f64>,
    /// One row of class logits per token.
    pub logits: Vec<Vec<f64>>,
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Shift-stable softmax.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn ensure_finite(stage: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::numeric(stage, format!("entry {i} is {}", values[i]))),
        None => Ok(()),
    }
}

/// s: softmax(v1), or exactly uniform when v1 is ablated.
pub fn layer_weights(params: &HeadParams, flags: &AblationFlags) -> Vec<f64> {
    let layers = params.num_layers();
    if flags.use_v1 {
        let mut s = params.layer_logits.clone();
        softmax_in_place(&mut s);
        s
    } else {
        vec![1.0 / layers as f64; layers]
    }
}

/// m: sigmoid(v2), or exactly one when v2 is ablated.
pub fn mask(params: &HeadParams, flags: &AblationFlags) -> Vec<f64> {
    if flags.use_v2 {
        params.mask_logits.iter().map(|&v| sigmoid(v)).collect()
    } else {
        vec![1.0; params.dim()]
    }
}

/// Steps shared by both variants: layer weights, mask, mixed and masked matrices.
struct Mixed {
    layer_weights: Vec<f64>,
    mask: Vec<f64>,
    mixed: Vec<f64>,
    masked: Vec<f64>,
}

fn mix_and_mask(states: &HiddenStates, params: &HeadParams, flags: &AblationFlags) -> Result<Mixed> {
    params.validate()?;
    params.check_states(states)?;
    let tokens = states.num_tokens();
    let d = states.dim();

    let layer_weights = layer_weights(params, flags);
    ensure_finite("layer_mix", &layer_weights)?;

    // layer-major, then token-major accumulation
    let mut mixed = vec![0.0; tokens * d];
    for (layer, &s) in layer_weights.iter().enumerate() {
        for t in 0..tokens {
            let row = &mut mixed[t * d..(t + 1) * d];
            for (acc, &h) in row.iter_mut().zip(states.token(layer, t)) {
                *acc += s * f64::from(h);
            }
        }
    }
    ensure_finite("layer_mix", &mixed)?;

    let mask = mask(params, flags);
    let scale = if flags.use_gamma { params.gamma } else { 1.0 };
    let masked: Vec<f64> = mixed
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&mask).map(move |(&u, &m)| m * (scale * u)))
        .collect();
    ensure_finite("mask", &masked)?;

    Ok(Mixed { layer_weights, mask, mixed, masked })
}

fn classify(params: &HeadParams, x: &[f64]) -> Vec<f64> {
    (0..params.num_classes)
        .map(|c| params.class_row(c).iter().zip(x).map(|(w, v)| w * v).sum())
        .collect()
}

/// Full pipeline for sequence classification.
pub fn forward(
    states: &HiddenStates,
    params: &HeadParams,
    flags: &AblationFlags,
) -> Result<ForwardTrace> {
    if flags.pooling != Pooling::Attention {
        return Err(Error::Config("forward needs attention pooling; use forward_sequence".into()));
    }
    let Mixed { layer_weights, mask, mixed, masked } = mix_and_mask(states, params, flags)?;
    let d = states.dim();

    let mut attention: Vec<f64> = masked
        .chunks_exact(d)
        .map(|row| row.iter().zip(&params.query).map(|(x, q)| x * q).sum())
        .collect();
    ensure_finite("attention", &attention)?;
    softmax_in_place(&mut attention);

    let mut pooled = vec![0.0; d];
    for (row, &w) in masked.chunks_exact(d).zip(&attention) {
        for (acc, &x) in pooled.iter_mut().zip(row) {
            *acc += w * x;
        }
    }
    ensure_finite("attention", &pooled)?;

    let logits = classify(params, &pooled);
    ensure_finite("classifier", &logits)?;

    Ok(ForwardTrace { layer_weights, mask, mixed, masked, attention, pooled, logits })
}

/// Pipeline without pooling: classifies every masked token vector.
pub fn forward_sequence(
    states: &HiddenStates,
    params: &HeadParams,
    flags: &AblationFlags,
) -> Result<SequenceTrace> {
    if flags.pooling != Pooling::None {
        return Err(Error::Config("forward_sequence requires pooling = none".into()));
    }
    let Mixed { layer_weights, mask, mixed, masked } = mix_and_mask(states, params, flags)?;
    let logits: Vec<Vec<f64>> =
        masked.chunks_exact(states.dim()).map(|row| classify(params, row)).collect();
    for row in &logits {
        ensure_finite("classifier", row)?;
    }
    Ok(SequenceTrace { layer_weights, mask, mixed, masked, logits })
}

/// Arg-max with ties going to the lowest index.
pub fn predict(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Shape("cannot predict from empty logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Mean over tokens of the final layer.
pub fn final_layer_mean(states: &HiddenStates) -> Vec<f64> {
    let last = states.num_layers() - 1;
    let tokens = states.num_tokens();
    let mut mean = vec![0.0; states.dim()];
    for t in 0..tokens {
        for (acc, &v) in mean.iter_mut().zip(states.token(last, t)) {
            *acc += f64::from(v);
        }
    }
    for v in &mut mean {
        *v /= tokens as f64;
    }
    mean
}

/// The Avg baseline: `W` applied to the token-mean of the final layer.
/// Only `params.classifier` is read.
pub fn avg_baseline_forward(states: &HiddenStates, params: &HeadParams) -> Result<Vec<f64>> {
    params.check_states(states)?;
    if params.classifier.len() != params.num_classes * params.dim() {
        return Err(Error::Shape("classifier does not match dim".into()));
    }
    let logits = classify(params, &final_layer_mean(states));
    ensure_finite("classifier", &logits)?;
    Ok(logits)
}
