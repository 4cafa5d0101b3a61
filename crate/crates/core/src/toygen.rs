//! Synthetic hidden states with a planted class signal.
//!
//! Every entry is Gaussian noise. For each example a seeded subset of tokens
//! additionally carries a class-dependent mean at one layer and on a fixed set
//! of dimensions. Everything is drawn from a single ChaCha8 stream seeded from
//! `GeneratorSpec::seed`, so a spec always yields the same bundle.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{DatasetBundle, HiddenStates, Label, LabeledExample, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub task_name: String,
    pub task_kind: TaskKind,
    pub num_layers_incl_embedding: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub signal_layer: usize,
    pub signal_dims: Vec<usize>,
    /// Fraction of each example's tokens that carry the signal.
    pub signal_tokens: f64,
    pub signal_strength: f64,
    pub noise_std: f64,
    pub train_examples: usize,
    pub test_examples: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            task_name: "planted".into(),
            task_kind: TaskKind::Classification,
            num_layers_incl_embedding: 5,
            min_tokens: 8,
            max_tokens: 8,
            dim: 16,
            num_classes: 2,
            signal_layer: 2,
            signal_dims: vec![0, 1, 2, 3],
            signal_tokens: 0.5,
            signal_strength: 1.0,
            noise_std: 0.5,
            train_examples: 512,
            test_examples: 256,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_layers_incl_embedding == 0 || self.dim == 0 {
            return bad("layer count and dim must be at least 1".into());
        }
        if self.signal_layer >= self.num_layers_incl_embedding {
            return bad(format!(
                "signal layer {} outside {} layers",
                self.signal_layer, self.num_layers_incl_embedding
            ));
        }
        if self.signal_dims.is_empty() {
            return bad("signal_dims must not be empty".into());
        }
        let mut seen = HashSet::new();
        for &j in &self.signal_dims {
            if j >= self.dim || !seen.insert(j) {
                return bad(format!("signal dim {j} is out of range or repeated"));
            }
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!("bad token range {}..={}", self.min_tokens, self.max_tokens));
        }
        if !(0.0..=1.0).contains(&self.signal_tokens) {
            return bad(format!("signal_tokens {} not in [0, 1]", self.signal_tokens));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return bad(format!("signal_strength {} must be >= 0", self.signal_strength));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be > 0", self.noise_std));
        }
        if self.num_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.task_kind == TaskKind::Sequence && self.num_classes != 2 {
            return bad("sequence tasks are binary (signal vs. background tokens)".into());
        }
        if self.num_classes > 2 {
            let period = walsh_period(self.num_classes);
            if !self.signal_dims.len().is_multiple_of(period) {
                return bad(format!(
                    "{} classes need the number of signal dims to be a multiple of {period}",
                    self.num_classes
                ));
            }
        }
        Ok(())
    }

    fn signal_token_count(&self, tokens: usize) -> usize {
        let n = (self.signal_tokens * tokens as f64).round() as usize;
        if self.signal_tokens > 0.0 {
            n.clamp(1, tokens)
        } else {
            0
        }
    }
}

fn walsh_period(num_classes: usize) -> usize {
    (num_classes + 1).next_power_of_two()
}

/// Sign of the planted mean for `class` on the `k`-th signal dim.
///
/// Binary tasks use -1 / +1. With more classes, class `c` uses Walsh row
/// `c + 1`, so the patterns are mutually orthogonal and zero-mean.
pub fn class_pattern(num_classes: usize, class: usize, k: usize) -> f64 {
    if num_classes == 2 {
        return if class == 1 { 1.0 } else { -1.0 };
    }
    let k = k % walsh_period(num_classes);
    if ((class + 1) & k).count_ones().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

struct Draw {
    states: HiddenStates,
    label: Label,
}

fn draw_example(spec: &GeneratorSpec, class: usize, rng: &mut ChaCha8Rng) -> Result<Draw> {
    let tokens = if spec.min_tokens == spec.max_tokens {
        spec.min_tokens
    } else {
        rng.random_range(spec.min_tokens..=spec.max_tokens)
    };
    let carriers = index::sample(rng, tokens, spec.signal_token_count(tokens)).into_vec();
    let mut carries = vec![false; tokens];
    for t in carriers {
        carries[t] = true;
    }

    let normal = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let (layers, d) = (spec.num_layers_incl_embedding, spec.dim);
    let mut values: Vec<f64> = (0..layers * tokens * d).map(|_| normal.sample(rng)).collect();

    let base = spec.signal_layer * tokens * d;
    let mu = spec.signal_strength;
    let label = match spec.task_kind {
        TaskKind::Classification => {
            for t in (0..tokens).filter(|&t| carries[t]) {
                for (k, &j) in spec.signal_dims.iter().enumerate() {
                    values[base + t * d + j] += mu * class_pattern(spec.num_classes, class, k);
                }
            }
            Label::Class(class)
        }
        TaskKind::Sequence => {
            let tags: Vec<usize> = carries.iter().map(|&c| usize::from(c)).collect();
            for (t, &tag) in tags.iter().enumerate() {
                for (k, &j) in spec.signal_dims.iter().enumerate() {
                    values[base + t * d + j] += mu * class_pattern(2, tag, k);
                }
            }
            Label::Tokens(tags)
        }
    };

    let states = HiddenStates::new(layers, tokens, d, values.into_iter().map(|v| v as f32).collect())?;
    Ok(Draw { states, label })
}

fn build(spec: &GeneratorSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::with_capacity(spec.train_examples + spec.test_examples);
    let mut splits = BTreeMap::new();
    for (split, count) in [("train", spec.train_examples), ("test", spec.test_examples)] {
        let mut ids = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("{split}-{i:06}");
            let Draw { states, label } = draw_example(spec, i % spec.num_classes, &mut rng)?;
            examples.push(LabeledExample { id: id.clone(), states, label });
            ids.push(id);
        }
        splits.insert(split.to_string(), ids);
    }
    let bundle = DatasetBundle {
        task_name: spec.task_name.clone(),
        task_kind: spec.task_kind,
        num_classes: spec.num_classes,
        num_layers: spec.num_layers_incl_embedding,
        dim: spec.dim,
        splits,
        examples,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Classification bundle with balanced classes and `train` / `test` splits.
pub fn generate(spec: &GeneratorSpec) -> Result<DatasetBundle> {
    if spec.task_kind != TaskKind::Classification {
        return Err(Error::Config("generate expects a classification spec".into()));
    }
    build(spec)
}

/// Sequence-labeling bundle: signal-carrying tokens are class 1, the rest class 0.
pub fn generate_sequence(spec: &GeneratorSpec) -> Result<DatasetBundle> {
    let spec = GeneratorSpec { task_kind: TaskKind::Sequence, ..spec.clone() };
    build(&spec)
}

/// Dispatches on `spec.task_kind`.
pub fn generate_any(spec: &GeneratorSpec) -> Result<DatasetBundle> {
    match spec.task_kind {
        TaskKind::Classification => generate(spec),
        TaskKind::Sequence => generate_sequence(spec),
    }
}
