//! Adam training of the head plus the few-shot, transfer and ablation drivers.
//!
//! Runs are deterministic in `(dataset, config)`: one ChaCha8 stream seeded
//! from `config.seed` draws the classifier init and then every epoch shuffle,
//! and per-example gradients inside a batch are reduced in example order even
//! though they are computed in parallel.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{avg_baseline_backward, backward};
use crate::head::{
    avg_baseline_forward, forward, forward_sequence, predict, AblationFlags, Block, HeadGradients,
    HeadParams, Pooling,
};
use crate::report::{accuracy, trainable_count};
use crate::tensorio::{DatasetBundle, Label, LabeledExample, TaskKind};

/// Epoch presets by training-set size: 10 for the very large sets,
/// 50 for the large ones, 100 for everything else.
pub const EPOCHS_HUGE: usize = 10;
pub const EPOCHS_LARGE: usize = 50;
pub const EPOCHS_DEFAULT: usize = 100;

/// Standard deviation of the Gaussian classifier init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub flags: AblationFlags,
    pub shuffle: bool,
    pub few_shot_k: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 60,
            epochs: EPOCHS_DEFAULT,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            flags: AblationFlags::default(),
            shuffle: true,
            few_shot_k: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return bad(format!("{name} must lie in [0, 1), got {beta}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if self.few_shot_k == Some(0) {
            return bad("few_shot_k must be at least 1".into());
        }
        Ok(())
    }
}

/// Adam moments (shaped like the head) and the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: HeadParams,
    pub second_moment: HeadParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &HeadParams) -> Self {
        Self { first_moment: params.zeros_like(), second_moment: params.zeros_like(), step: 0 }
    }
}

fn adam_update(
    params: &mut HeadParams,
    grads: &HeadGradients,
    state: &mut AdamState,
    config: &TrainConfig,
    trains: impl Fn(Block) -> bool,
) -> Result<()> {
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    for block in Block::ALL.into_iter().filter(|&b| trains(b)) {
        let g = grads.block(block);
        let m = state.first_moment.block_mut(block);
        for (m, &g) in m.iter_mut().zip(g) {
            *m = b1 * *m + (1.0 - b1) * g;
        }
        let v = state.second_moment.block_mut(block);
        for (v, &g) in v.iter_mut().zip(g) {
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        let m = state.first_moment.block(block);
        let v = state.second_moment.block(block);
        let theta = params.block_mut(block);
        for ((p, &m), &v) in theta.iter_mut().zip(m).zip(v) {
            let m_hat = m / correction1;
            let v_hat = v / correction2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
        if theta.iter().any(|p| !p.is_finite()) {
            return Err(Error::numeric("adam", format!("update of {}", block.name())));
        }
    }
    Ok(())
}

/// One bias-corrected Adam step on the blocks `config.flags` leaves trainable.
pub fn adam_step(
    params: &mut HeadParams,
    grads: &HeadGradients,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    adam_update(params, grads, state, config, |b| config.flags.trains(b))
}

/// v1 = v2 = v3 = 0, gamma = 1, classifier ~ N(0, 0.02^2).
pub fn init_params(
    num_layers: usize,
    dim: usize,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> HeadParams {
    let mut params = HeadParams::zeros(num_layers, dim, num_classes);
    params.gamma = 1.0;
    let normal = Normal::new(0.0, INIT_STD).expect("constant std is valid");
    for w in &mut params.classifier {
        *w = normal.sample(rng);
    }
    params
}

/// Parameters a fresh run with this seed starts from.
pub fn initial_params(dataset: &DatasetBundle, seed: u64) -> HeadParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params(dataset.num_layers, dataset.dim, dataset.num_classes, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The three-vector head.
    Head,
    /// Linear classifier on the token mean of the final layer.
    AvgBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub flags: AblationFlags,
    pub train_split: String,
    pub eval_split: Option<String>,
    pub train_examples: usize,
    pub trainable_params: usize,
    pub history: Vec<EpochStats>,
    pub params: HeadParams,
    pub optimizer: AdamState,
    /// Wall-clock seconds per epoch. Not serialized so reports stay reproducible.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
}

impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.method == other.method
            && self.flags == other.flags
            && self.train_split == other.train_split
            && self.eval_split == other.eval_split
            && self.train_examples == other.train_examples
            && self.trainable_params == other.trainable_params
            && self.history == other.history
            && self.params == other.params
            && self.optimizer == other.optimizer
    }
}

impl TrainReport {
    pub fn final_eval_accuracy(&self) -> Option<f64> {
        self.history.last().and_then(|e| e.eval_accuracy)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |e| e.train_loss)
    }
}

/// Evaluates a head on examples: example accuracy for classification,
/// token accuracy for sequence labeling.
pub fn evaluate(
    examples: &[&LabeledExample],
    params: &HeadParams,
    flags: &AblationFlags,
) -> Result<f64> {
    evaluate_with(Method::Head, examples, params, flags)
}

fn evaluate_with(
    method: Method,
    examples: &[&LabeledExample],
    params: &HeadParams,
    flags: &AblationFlags,
) -> Result<f64> {
    let per_example: Vec<(Vec<usize>, Vec<usize>)> = examples
        .par_iter()
        .map(|ex| -> Result<(Vec<usize>, Vec<usize>)> {
            match (&ex.label, method) {
                (Label::Class(y), Method::Head) => {
                    Ok((vec![predict(&forward(&ex.states, params, flags)?.logits)?], vec![*y]))
                }
                (Label::Class(y), Method::AvgBaseline) => {
                    Ok((vec![predict(&avg_baseline_forward(&ex.states, params)?)?], vec![*y]))
                }
                (Label::Tokens(tags), Method::Head) => {
                    let trace = forward_sequence(&ex.states, params, flags)?;
                    let preds = trace.logits.iter().map(|z| predict(z)).collect::<Result<_>>()?;
                    Ok((preds, tags.clone()))
                }
                (Label::Tokens(_), Method::AvgBaseline) => {
                    Err(Error::Config("the Avg baseline only handles classification".into()))
                }
            }
        })
        .collect::<Result<_>>()?;
    let (preds, labels): (Vec<usize>, Vec<usize>) =
        per_example.into_iter().flat_map(|(p, l)| p.into_iter().zip(l)).unzip();
    accuracy(&preds, &labels)
}

fn check_task(dataset: &DatasetBundle, flags: &AblationFlags) -> Result<()> {
    match (dataset.task_kind, flags.pooling) {
        (TaskKind::Classification, Pooling::Attention) | (TaskKind::Sequence, Pooling::None) => {
            Ok(())
        }
        (kind, pooling) => Err(Error::Config(format!(
            "pooling {pooling:?} does not fit a {kind:?} task"
        ))),
    }
}

fn run(
    method: Method,
    dataset: &DatasetBundle,
    split: &str,
    eval_split: Option<&str>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let flags = config.flags;
    if method == Method::Head {
        check_task(dataset, &flags)?;
    } else if dataset.task_kind != TaskKind::Classification {
        return Err(Error::Config("the Avg baseline only handles classification".into()));
    }

    let subset;
    let dataset = match config.few_shot_k {
        Some(k) => {
            subset = few_shot_subset(dataset, split, k, config.seed, SampleMode::Stratified)?;
            &subset
        }
        None => dataset,
    };
    let train_set = dataset.split(split)?;
    if train_set.is_empty() {
        return Err(Error::Config(format!("split {split:?} is empty")));
    }
    let eval_set = eval_split.map(|s| dataset.split(s)).transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init_params(dataset.num_layers, dataset.dim, dataset.num_classes, &mut rng);
    let mut optimizer = AdamState::new(&params);
    let trains = |b: Block| match method {
        Method::Head => flags.trains(b),
        Method::AvgBaseline => b == Block::Classifier,
    };

    let mut history = Vec::with_capacity(config.epochs);
    let mut epoch_seconds = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, HeadGradients)> = batch
                .par_iter()
                .map(|&i| {
                    let ex = train_set[i];
                    match (method, &ex.label) {
                        (Method::Head, label) => backward(&ex.states, &params, &flags, label),
                        (Method::AvgBaseline, Label::Class(y)) => {
                            avg_baseline_backward(&ex.states, &params, *y)
                        }
                        (Method::AvgBaseline, Label::Tokens(_)) => {
                            Err(Error::Config("token labels in a classification run".into()))
                        }
                    }
                })
                .collect::<Result<_>>()?;

            let mut mean = params.zeros_like();
            for (loss, grads) in &results {
                loss_sum += loss;
                for b in Block::ALL {
                    for (acc, g) in mean.block_mut(b).iter_mut().zip(grads.block(b)) {
                        *acc += g;
                    }
                }
            }
            let scale = 1.0 / results.len() as f64;
            for b in Block::ALL {
                mean.block_mut(b).iter_mut().for_each(|g| *g *= scale);
            }
            adam_update(&mut params, &mean, &mut optimizer, config, trains)?;
        }

        let train_accuracy = evaluate_with(method, &train_set, &params, &flags)?;
        let eval_accuracy = eval_set
            .as_deref()
            .map(|set| evaluate_with(method, set, &params, &flags))
            .transpose()?;
        history.push(EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy,
            eval_accuracy,
        });
        epoch_seconds.push(started.elapsed().as_secs_f64());
    }

    let trainable_params = match method {
        Method::Head => trainable_count(dataset.num_layers, dataset.dim, dataset.num_classes, &flags),
        Method::AvgBaseline => dataset.num_classes * dataset.dim,
    };
    Ok(TrainReport {
        method,
        flags,
        train_split: split.to_string(),
        eval_split: eval_split.map(str::to_string),
        train_examples: train_set.len(),
        trainable_params,
        history,
        params,
        optimizer,
        epoch_seconds,
    })
}

/// Trains the head on `split`, tracking accuracy on `eval_split` each epoch.
pub fn train(
    dataset: &DatasetBundle,
    split: &str,
    eval_split: Option<&str>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    run(Method::Head, dataset, split, eval_split, config)
}

/// Same protocol for the final-layer-mean baseline; only the classifier moves.
pub fn train_avg_baseline(
    dataset: &DatasetBundle,
    split: &str,
    eval_split: Option<&str>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    run(Method::AvgBaseline, dataset, split, eval_split, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleMode {
    /// Round-robin over classes, each class shuffled independently.
    #[default]
    Stratified,
    Uniform,
}

/// Replaces `split` with `k` of its examples, sampled without replacement.
///
/// Stratified mode only applies to classification with `k >= num_classes`;
/// otherwise sampling is uniform. The chosen ids keep their original order
/// and all other splits are left alone.
pub fn few_shot_subset(
    dataset: &DatasetBundle,
    split: &str,
    k: usize,
    seed: u64,
    mode: SampleMode,
) -> Result<DatasetBundle> {
    let members = dataset.split(split)?;
    if k > members.len() {
        return Err(Error::Config(format!(
            "asked for {k} examples but split {split:?} has {}",
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stratify = mode == SampleMode::Stratified
        && dataset.task_kind == TaskKind::Classification
        && k >= dataset.num_classes;

    let mut chosen: Vec<usize> = if stratify {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
        for (pos, ex) in members.iter().enumerate() {
            if let Some(c) = ex.class() {
                by_class[c].push(pos);
            }
        }
        for group in &mut by_class {
            group.shuffle(&mut rng);
        }
        let mut picked = Vec::with_capacity(k);
        let mut round = 0;
        while picked.len() < k {
            for group in &by_class {
                if picked.len() < k {
                    if let Some(&pos) = group.get(round) {
                        picked.push(pos);
                    }
                }
            }
            round += 1;
        }
        picked
    } else {
        index::sample(&mut rng, members.len(), k).into_vec()
    };
    chosen.sort_unstable();

    let mut out = dataset.clone();
    let ids = chosen.into_iter().map(|pos| members[pos].id.clone()).collect();
    out.splits.insert(split.to_string(), ids);
    Ok(out)
}

/// Accuracy of source-trained parameters on a target split, without any
/// target-side training.
pub fn transfer_eval(source: &TrainReport, target: &DatasetBundle, split: &str) -> Result<f64> {
    let params = &source.params;
    if params.num_classes != target.num_classes {
        return Err(Error::Label(format!(
            "label-space mismatch: source has {} classes, target {}",
            params.num_classes, target.num_classes
        )));
    }
    if params.num_layers() != target.num_layers || params.dim() != target.dim {
        return Err(Error::Shape(format!(
            "source head is {}x{} (layers x dim), target data is {}x{}",
            params.num_layers(),
            params.dim(),
            target.num_layers,
            target.dim
        )));
    }
    let examples = target.split(split)?;
    match source.method {
        Method::Head => {
            check_task(target, &source.flags)?;
            evaluate(&examples, params, &source.flags)
        }
        Method::AvgBaseline => evaluate_with(Method::AvgBaseline, &examples, params, &source.flags),
    }
}

/// The four v1/v2 on-off runs, keyed `"00"`, `"01"`, `"10"`, `"11"`
/// (first digit v1, second v2). Gamma and pooling come from `config.flags`.
pub fn ablation_grid(
    dataset: &DatasetBundle,
    split: &str,
    eval_split: Option<&str>,
    config: &TrainConfig,
) -> Result<BTreeMap<String, TrainReport>> {
    let mut cells = BTreeMap::new();
    for use_v1 in [false, true] {
        for use_v2 in [false, true] {
            let flags = AblationFlags { use_v1, use_v2, ..config.flags };
            let cell = TrainConfig { flags, ..config.clone() };
            cells.insert(flags.cell_name(), train(dataset, split, eval_split, &cell)?);
        }
    }
    Ok(cells)
}
