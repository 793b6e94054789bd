use super::{DomainDataset, Split};
use crate::error::{Error, Result};

/// Per-channel z-score fitted on one domain's training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(dataset: &DomainDataset) -> Result<Self> {
        let idx = dataset.split(Split::Train);
        if idx.is_empty() {
            return Err(Error::EmptySplit(format!("train split of `{}`", dataset.name)));
        }
        let (m, k) = (dataset.channels(), dataset.steps());
        let count = (idx.len() * k) as f64;
        let mut mean = vec![0.0; m];
        let mut sq = vec![0.0; m];
        for &i in idx {
            let v = dataset.samples()[i].values.data();
            for c in 0..m {
                mean[c] += v[c * k..(c + 1) * k].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= count);
        for &i in idx {
            let v = dataset.samples()[i].values.data();
            for c in 0..m {
                sq[c] += v[c * k..(c + 1) * k].iter().map(|x| (x - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.iter().map(|s| (s / count).sqrt().max(1e-8)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, dataset: &mut DomainDataset) {
        let k = dataset.steps();
        for s in dataset.samples_mut() {
            for (c, row) in s.values.data_mut().chunks_mut(k).enumerate() {
                for v in row {
                    *v = (*v - self.mean[c]) / self.std[c];
                }
            }
        }
    }

    /// Fits on the training split and normalizes every sample in place.
    pub fn fit_apply(dataset: &mut DomainDataset) -> Result<Self> {
        let n = Self::fit(dataset)?;
        n.apply(dataset);
        Ok(n)
    }
}
