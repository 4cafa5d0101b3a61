//! Cross-entropy loss, exact gradients through the head, and a central
//! finite-difference oracle to check them against.

use crate::error::{Error, Result};
use crate::head::{
    avg_baseline_forward, final_layer_mean, forward, forward_sequence, AblationFlags, Block,
    HeadGradients, HeadParams, Pooling,
};
use crate::tensorio::{HiddenStates, Label};

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Label(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

/// `softmax(logits) - onehot(label)`, scaled by `weight`.
fn logit_cotangent(logits: &[f64], label: usize, weight: f64) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits
        .iter()
        .enumerate()
        .map(|(c, &z)| weight * ((z - lse).exp() - if c == label { 1.0 } else { 0.0 }))
        .collect()
}

/// Loss of one example under the head, matching what [`backward`] reports.
pub fn loss(
    states: &HiddenStates,
    params: &HeadParams,
    flags: &AblationFlags,
    label: &Label,
) -> Result<f64> {
    match (flags.pooling, label) {
        (Pooling::Attention, Label::Class(y)) => {
            cross_entropy(&forward(states, params, flags)?.logits, *y)
        }
        (Pooling::None, Label::Tokens(tags)) => {
            let trace = forward_sequence(states, params, flags)?;
            sequence_loss(&trace.logits, tags)
        }
        _ => Err(Error::Config("label kind does not match pooling mode".into())),
    }
}

fn sequence_loss(logits: &[Vec<f64>], tags: &[usize]) -> Result<f64> {
    if tags.len() != logits.len() {
        return Err(Error::Label(format!(
            "{} token labels for {} tokens",
            tags.len(),
            logits.len()
        )));
    }
    let mut total = 0.0;
    for (row, &tag) in logits.iter().zip(tags) {
        total += cross_entropy(row, tag)?;
    }
    Ok(total / tags.len() as f64)
}

/// Loss and exact gradients for one example.
///
/// Blocks the flags switch off get exactly zero gradient.
pub fn backward(
    states: &HiddenStates,
    params: &HeadParams,
    flags: &AblationFlags,
    label: &Label,
) -> Result<(f64, HeadGradients)> {
    let d = states.dim();
    let tokens = states.num_tokens();
    let mut grads = params.zeros_like();

    // Cotangent of the masked matrix X (T x d), plus trace pieces shared by both variants.
    let (loss, g_masked, layer_weights, mask, mixed) = match (flags.pooling, label) {
        (Pooling::Attention, Label::Class(y)) => {
            let trace = forward(states, params, flags)?;
            let loss = cross_entropy(&trace.logits, *y)?;
            let g_logits = logit_cotangent(&trace.logits, *y, 1.0);

            let mut g_pooled = vec![0.0; d];
            for (c, &g) in g_logits.iter().enumerate() {
                let row = &mut grads.classifier[c * d..(c + 1) * d];
                for j in 0..d {
                    row[j] = g * trace.pooled[j];
                    g_pooled[j] += g * params.classifier[c * d + j];
                }
            }

            // h = X^T w, w = softmax(X v3): X shows up on both sides.
            let g_weights: Vec<f64> = trace
                .masked
                .chunks_exact(d)
                .map(|row| row.iter().zip(&g_pooled).map(|(x, g)| x * g).sum())
                .collect();
            let centre: f64 =
                trace.attention.iter().zip(&g_weights).map(|(w, g)| w * g).sum();
            let g_scores: Vec<f64> = trace
                .attention
                .iter()
                .zip(&g_weights)
                .map(|(w, g)| w * (g - centre))
                .collect();

            let mut g_masked = vec![0.0; tokens * d];
            for t in 0..tokens {
                let row = &trace.masked[t * d..(t + 1) * d];
                let g_row = &mut g_masked[t * d..(t + 1) * d];
                for j in 0..d {
                    grads.query[j] += g_scores[t] * row[j];
                    g_row[j] = trace.attention[t] * g_pooled[j] + g_scores[t] * params.query[j];
                }
            }
            (loss, g_masked, trace.layer_weights, trace.mask, trace.mixed)
        }
        (Pooling::None, Label::Tokens(tags)) => {
            let trace = forward_sequence(states, params, flags)?;
            let loss = sequence_loss(&trace.logits, tags)?;
            let weight = 1.0 / tokens as f64;

            let mut g_masked = vec![0.0; tokens * d];
            for (t, (row_logits, &tag)) in trace.logits.iter().zip(tags).enumerate() {
                let g_logits = logit_cotangent(row_logits, tag, weight);
                let x = &trace.masked[t * d..(t + 1) * d];
                let g_row = &mut g_masked[t * d..(t + 1) * d];
                for (c, &g) in g_logits.iter().enumerate() {
                    let w_row = params.class_row(c);
                    let dw = &mut grads.classifier[c * d..(c + 1) * d];
                    for j in 0..d {
                        dw[j] += g * x[j];
                        g_row[j] += g * w_row[j];
                    }
                }
            }
            (loss, g_masked, trace.layer_weights, trace.mask, trace.mixed)
        }
        _ => return Err(Error::Config("label kind does not match pooling mode".into())),
    };

    // X = m * (gamma * U)
    let scale = if flags.use_gamma { params.gamma } else { 1.0 };
    let mut g_mask = vec![0.0; d];
    let mut g_scale = 0.0;
    let mut g_mixed = vec![0.0; tokens * d];
    for t in 0..tokens {
        for j in 0..d {
            let i = t * d + j;
            let g = g_masked[i];
            g_mask[j] += g * scale * mixed[i];
            g_scale += g * mask[j] * mixed[i];
            g_mixed[i] = g * mask[j] * scale;
        }
    }
    if flags.use_v2 {
        for j in 0..d {
            grads.mask_logits[j] = g_mask[j] * mask[j] * (1.0 - mask[j]);
        }
    }
    if flags.use_gamma {
        grads.gamma = g_scale;
    }

    if flags.use_v1 {
        // U = sum_i s_i H_i, s = softmax(v1)
        let g_weights: Vec<f64> = (0..states.num_layers())
            .map(|layer| {
                let mut acc = 0.0;
                for t in 0..tokens {
                    let g_row = &g_mixed[t * d..(t + 1) * d];
                    for (g, &h) in g_row.iter().zip(states.token(layer, t)) {
                        acc += g * f64::from(h);
                    }
                }
                acc
            })
            .collect();
        let centre: f64 = layer_weights.iter().zip(&g_weights).map(|(s, g)| s * g).sum();
        for (i, (s, g)) in layer_weights.iter().zip(&g_weights).enumerate() {
            grads.layer_logits[i] = s * (g - centre);
        }
    }

    check_gradients(&grads)?;
    Ok((loss, grads))
}

fn check_gradients(grads: &HeadGradients) -> Result<()> {
    for b in Block::ALL {
        if grads.block(b).iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("backward", format!("gradient of {}", b.name())));
        }
    }
    Ok(())
}

/// Loss and classifier gradient for the final-layer-mean baseline.
pub fn avg_baseline_backward(
    states: &HiddenStates,
    params: &HeadParams,
    label: usize,
) -> Result<(f64, HeadGradients)> {
    let logits = avg_baseline_forward(states, params)?;
    let loss = cross_entropy(&logits, label)?;
    let mean = final_layer_mean(states);
    let g_logits = logit_cotangent(&logits, label, 1.0);
    let d = params.dim();
    let mut grads = params.zeros_like();
    for (c, &g) in g_logits.iter().enumerate() {
        for j in 0..d {
            grads.classifier[c * d + j] = g * mean[j];
        }
    }
    check_gradients(&grads)?;
    Ok((loss, grads))
}

/// Central differences of a scalar function at `point`.
pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let up = f(&probe)?;
        probe[i] = point[i] - step;
        let down = f(&probe)?;
        probe[i] = point[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::numeric("finite_diff", format!("non-finite loss perturbing {i}")));
        }
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Numerical gradient of [`loss`] with respect to every head parameter.
pub fn finite_diff_grad(
    states: &HiddenStates,
    params: &HeadParams,
    flags: &AblationFlags,
    label: &Label,
    step: f64,
) -> Result<HeadGradients> {
    let flat = params.to_flat();
    let numeric = central_difference(
        |theta| {
            let p = HeadParams::from_flat(params, theta)?;
            loss(states, &p, flags, label)
        },
        &flat,
        step,
    )?;
    HeadParams::from_flat(params, &numeric)
}

/// Largest elementwise gap between two gradients, divided by
/// `max(1, max|analytic|)`.
pub fn relative_error(analytic: &HeadGradients, numeric: &HeadGradients) -> f64 {
    let a = analytic.to_flat();
    let n = numeric.to_flat();
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(&n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Outcome of [`random_gradcheck`].
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GradCheckSummary {
    pub trials: usize,
    pub max_relative_error: f64,
    pub worst_trial: usize,
}

/// One random instance used by [`random_gradcheck`].
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub states: HiddenStates,
    pub params: HeadParams,
    pub flags: AblationFlags,
    pub label: Label,
}

/// Draws trial `trial` of a gradcheck sweep: 2..=5 layers, 1..=6 tokens,
/// dim 3..=8, 2 or 3 classes. Trials rotate through the ablation cells, the
/// gamma variant and the sequence-labeling head.
pub fn gradcheck_case(seed: u64, trial: usize) -> Result<GradCheckCase> {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let layers = rng.random_range(2..=5);
    let tokens = rng.random_range(1..=6);
    let dim = rng.random_range(3..=8);
    let classes = rng.random_range(2..=3);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let spread = Normal::new(0.0, 0.5).expect("normal");

    let states = HiddenStates::from_fn(layers, tokens, dim, |_, _, _| unit.sample(&mut rng) as f32)?;
    let mut params = HeadParams::zeros(layers, dim, classes);
    for b in Block::ALL {
        params.block_mut(b).iter_mut().for_each(|v| *v = spread.sample(&mut rng));
    }
    params.gamma = 1.0 + spread.sample(&mut rng);

    let flags = AblationFlags {
        use_v1: trial % 4 != 1,
        use_v2: trial % 4 != 2,
        use_gamma: trial.is_multiple_of(3),
        pooling: if trial % 5 == 4 { Pooling::None } else { Pooling::Attention },
    };
    let label = match flags.pooling {
        Pooling::Attention => Label::Class(rng.random_range(0..classes)),
        Pooling::None => Label::Tokens((0..tokens).map(|_| rng.random_range(0..classes)).collect()),
    };
    Ok(GradCheckCase { states, params, flags, label })
}

/// Compares [`backward`] with [`finite_diff_grad`] on `trials` random cases.
pub fn random_gradcheck(trials: usize, seed: u64, step: f64) -> Result<GradCheckSummary> {
    let mut summary = GradCheckSummary { trials, max_relative_error: 0.0, worst_trial: 0 };
    for trial in 0..trials {
        let case = gradcheck_case(seed, trial)?;
        let (_, analytic) = backward(&case.states, &case.params, &case.flags, &case.label)?;
        let numeric = finite_diff_grad(&case.states, &case.params, &case.flags, &case.label, step)?;
        let err = relative_error(&analytic, &numeric);
        if err > summary.max_relative_error {
            summary.max_relative_error = err;
            summary.worst_trial = trial;
        }
    }
    Ok(summary)
}
