//! Inference path and classification metrics.

use crate::autograd::kernels::softmax_rows;
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 256;

/// Class predictions with their probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    /// `[B, C]`, rows sum to one.
    pub probabilities: Tensor,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of `[B, C]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut p = logits.clone();
    let c = logits.dim(logits.ndim() - 1);
    softmax_rows(p.data_mut(), c);
    p
}

/// Softmax of the classifier output on encoder features; the context net and
/// discriminator play no part at test time.
pub fn predict(bundle: &ModelBundle, x: &Tensor) -> Result<Predictions> {
    let probabilities = softmax(&bundle.logits(x)?);
    let c = probabilities.dim(1);
    let labels = probabilities.data().chunks(c).map(argmax).collect();
    Ok(Predictions { labels, probabilities })
}

/// Predictions for selected samples of a dataset, evaluated in chunks.
pub fn predict_indices(bundle: &ModelBundle, dataset: &DomainDataset, indices: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        out.extend(predict(bundle, &dataset.batch(chunk)?)?.labels);
    }
    Ok(out)
}

/// Accuracy and macro-F1, both in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub accuracy: f64,
    pub macro_f1: f64,
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(predicted, truth)?;
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

/// Unweighted mean of per-class F1 over classes present in either vector.
pub fn macro_f1(predicted: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    check_lengths(predicted, truth)?;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::LabelOutOfRange {
                label: p.max(t),
                classes,
            });
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let f1: Vec<f64> = (0..classes)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    Ok(100.0 * f1.iter().sum::<f64>() / f1.len() as f64)
}

fn check_lengths(predicted: &[usize], truth: &[usize]) -> Result<()> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::shape(
            "metrics",
            format!("{} predictions for {} labels", predicted.len(), truth.len()),
        ));
    }
    Ok(())
}

/// Scores a bundle on the given samples using their ground-truth labels.
pub fn score(bundle: &ModelBundle, dataset: &DomainDataset, indices: &[usize]) -> Result<Scores> {
    let truth = dataset.evaluation_labels(indices)?;
    let predicted = predict_indices(bundle, dataset, indices)?;
    Ok(Scores {
        accuracy: accuracy(&predicted, &truth)?,
        macro_f1: macro_f1(&predicted, &truth, dataset.num_classes)?,
    })
}
