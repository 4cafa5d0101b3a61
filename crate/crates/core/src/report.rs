//! Metrics, parameter accounting and analysis exports.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{forward, layer_weights, mask, AblationFlags, HeadParams, Pooling};
use crate::tensorio::{DatasetBundle, Label};
use crate::train::{Method, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMethod {
    Ours,
    PTuning,
    PTuningV2,
}

impl std::str::FromStr for ParamMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Self::Ours),
            "p_tuning" | "p-tuning" => Ok(Self::PTuning),
            "p_tuning_v2" | "p-tuning-v2" => Ok(Self::PTuningV2),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCountInput {
    pub method: ParamMethod,
    /// Transformer layers, embedding layer excluded.
    pub layers: u64,
    pub dim: u64,
    /// Prompt length; ignored for `Ours`.
    pub prompt_len: u64,
}

/// Method-specific extra parameters, classifier excluded:
/// `L+1+2d`, `K*d` and `(L+1)*K*d`.
pub fn param_count(input: &ParamCountInput) -> Result<u64> {
    let ParamCountInput { method, layers, dim, prompt_len } = *input;
    if layers == 0 || dim == 0 || (method != ParamMethod::Ours && prompt_len == 0) {
        return Err(Error::Config("parameter counts need L, d and K >= 1".into()));
    }
    let overflow = || Error::Config("parameter count overflows u64".into());
    match method {
        ParamMethod::Ours => dim
            .checked_mul(2)
            .and_then(|n| n.checked_add(layers + 1))
            .ok_or_else(overflow),
        ParamMethod::PTuning => prompt_len.checked_mul(dim).ok_or_else(overflow),
        ParamMethod::PTuningV2 => (layers + 1)
            .checked_mul(prompt_len)
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(overflow),
    }
}

/// Head parameters that actually train under `flags`, classifier included.
/// `num_layers` counts the embedding layer.
pub fn trainable_count(
    num_layers: usize,
    dim: usize,
    num_classes: usize,
    flags: &AblationFlags,
) -> usize {
    let mut n = num_classes * dim;
    if flags.use_v1 {
        n += num_layers;
    }
    if flags.use_v2 {
        n += dim;
    }
    if flags.pooling == Pooling::Attention {
        n += dim;
    }
    if flags.use_gamma {
        n += 1;
    }
    n
}

/// Fraction of positions where prediction and label agree.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Shape("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub id: String,
    pub label: usize,
    pub weights: Vec<f64>,
}

/// Pooled vector of one example restricted to the top mask dims, for
/// external embedding plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspacePoint {
    pub id: String,
    pub label: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisDump {
    /// softmax(v1), or uniform when v1 is ablated.
    pub layer_weights: Vec<f64>,
    /// Effective mask per dim.
    pub mask: Vec<f64>,
    /// Dims with the largest mask values, descending; ties by lower index.
    pub top_dims: Vec<usize>,
    pub attention: Vec<AttentionRecord>,
    pub subspace: Vec<SubspacePoint>,
}

impl AnalysisDump {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

/// Indices of the `top_k` largest values, largest first, stable on ties.
pub fn top_k_indices(values: &[f64], top_k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx.truncate(top_k);
    idx
}

/// Layer weights, mask ranking and per-example attention for a trained head.
///
/// With `split = None` every example in the bundle is dumped. Sequence
/// tasks have no pooling, so their attention and subspace lists stay empty.
pub fn dump_analysis(
    params: &HeadParams,
    flags: &AblationFlags,
    dataset: Option<(&DatasetBundle, Option<&str>)>,
    top_k: usize,
) -> Result<AnalysisDump> {
    params.validate()?;
    let d = params.dim();
    if top_k > d {
        return Err(Error::Config(format!("top_k {top_k} exceeds hidden dim {d}")));
    }

    let layer_weights = layer_weights(params, flags);
    let mask = mask(params, flags);
    let top_dims = top_k_indices(&mask, top_k);

    let mut attention = Vec::new();
    let mut subspace = Vec::new();
    if let Some((bundle, split)) = dataset {
        if flags.pooling == Pooling::Attention {
            let examples: Vec<_> = match split {
                Some(name) => bundle.split(name)?,
                None => bundle.examples.iter().collect(),
            };
            for ex in examples {
                let Label::Class(label) = ex.label else {
                    return Err(Error::Label(format!("{:?} has token labels", ex.id)));
                };
                let trace = forward(&ex.states, params, flags)?;
                subspace.push(SubspacePoint {
                    id: ex.id.clone(),
                    label,
                    values: top_dims.iter().map(|&j| trace.pooled[j]).collect(),
                });
                attention.push(AttentionRecord { id: ex.id.clone(), label, weights: trace.attention });
            }
        }
    }
    Ok(AnalysisDump { layer_weights, mask, top_dims, attention, subspace })
}

/// One line of an experiment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub cell: String,
    pub method: String,
    pub use_v1: bool,
    pub use_v2: bool,
    pub trainable_params: usize,
    pub train_examples: usize,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
}

impl MetricsRow {
    pub fn from_report(cell: &str, report: &TrainReport) -> Self {
        let last = report.history.last();
        Self {
            cell: cell.to_string(),
            method: match report.method {
                Method::Head => "head".into(),
                Method::AvgBaseline => "avg_baseline".into(),
            },
            use_v1: report.flags.use_v1 && report.method == Method::Head,
            use_v2: report.flags.use_v2 && report.method == Method::Head,
            trainable_params: report.trainable_params,
            train_examples: report.train_examples,
            epochs: report.history.len(),
            final_train_loss: last.map_or(f64::NAN, |e| e.train_loss),
            train_accuracy: last.map_or(f64::NAN, |e| e.train_accuracy),
            eval_accuracy: last.and_then(|e| e.eval_accuracy),
        }
    }
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_reader(input);
    reader.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(method: ParamMethod, layers: u64, dim: u64, prompt_len: u64) -> u64 {
        param_count(&ParamCountInput { method, layers, dim, prompt_len }).unwrap()
    }

    #[test]
    fn table_formulas() {
        assert_eq!(count(ParamMethod::Ours, 24, 1024, 0), 2073);
        assert_eq!(count(ParamMethod::Ours, 12, 768, 0), 1549);
        assert_eq!(count(ParamMethod::Ours, 1, 1, 0), 4);
        assert_eq!(count(ParamMethod::PTuning, 12, 768, 50), 38400);
        assert_eq!(count(ParamMethod::PTuningV2, 12, 768, 50), 499200);
    }

    #[test]
    fn zero_counts_rejected() {
        let input = ParamCountInput { method: ParamMethod::PTuning, layers: 12, dim: 768, prompt_len: 0 };
        assert!(param_count(&input).is_err());
    }

    #[test]
    fn accuracy_edges() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn top_k_is_stable_and_descending() {
        assert_eq!(top_k_indices(&[0.2, 0.9, 0.2, 0.5], 3), vec![1, 3, 0]);
        let all = top_k_indices(&[0.1, 0.1, 0.1], 3);
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn zero_v1_dumps_uniform_weights() {
        let params = HeadParams::zeros(4, 3, 2);
        let dump = dump_analysis(&params, &AblationFlags::default(), None, 3).unwrap();
        assert!(dump.layer_weights.iter().all(|&s| (s - 0.25).abs() < 1e-15));
        let mut dims = dump.top_dims.clone();
        dims.sort_unstable();
        assert_eq!(dims, vec![0, 1, 2]);
        assert!(dump_analysis(&params, &AblationFlags::default(), None, 4).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![MetricsRow {
            cell: "11".into(),
            method: "head".into(),
            use_v1: true,
            use_v2: true,
            trainable_params: 10,
            train_examples: 4,
            epochs: 2,
            final_train_loss: 0.125,
            train_accuracy: 1.0,
            eval_accuracy: None,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("cell,method,use_v1"));
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), rows);
    }
}
