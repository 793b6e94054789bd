//! Time-series ingestion: windowing, resampling, splits, normalization,
//! synthetic domain-shift generation and the on-disk domain layout.

mod io;
mod normalize;
mod resample;
mod split;
pub mod synthetic;
mod window;

pub use io::{load_domain, write_domain, DomainManifest};
pub use normalize::Normalizer;
pub use resample::resample_to_length;
pub use split::{split_dataset, SplitRatios};
pub use synthetic::{
    make_synthetic_shift_pair, DomainRole, NearestCentroidProbe, ShiftKind, ShiftPreset, SyntheticShiftSpec,
};
pub use window::{interpolate_missing, segment_sliding_window, window_count, window_offsets, WindowingSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One multichannel window, `values` shaped `[channels, steps]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSample {
    pub values: Tensor,
    pub label: Option<usize>,
}

impl TimeSeriesSample {
    pub fn new(values: Tensor, label: Option<usize>) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::shape(
                "TimeSeriesSample",
                format!("expected [M, K], got {:?}", values.shape()),
            ));
        }
        if !values.all_finite() {
            return Err(Error::NonFinite("sample values".into()));
        }
        Ok(Self { values, label })
    }

    pub fn channels(&self) -> usize {
        self.values.dim(0)
    }

    pub fn steps(&self) -> usize {
        self.values.dim(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// A named domain: samples, their split assignment and class metadata.
///
/// When `labeled` is false the labels stored on the samples are ground truth
/// reserved for evaluation; training code must go through
/// [`DomainDataset::training_labels`], which refuses to hand them out.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    samples: Vec<TimeSeriesSample>,
    pub splits: Splits,
    pub num_classes: usize,
    pub labeled: bool,
}

impl DomainDataset {
    /// Validates shapes and labels; every sample starts in the train split.
    pub fn new(
        name: impl Into<String>,
        samples: Vec<TimeSeriesSample>,
        num_classes: usize,
        labeled: bool,
    ) -> Result<Self> {
        let name = name.into();
        let first = samples
            .first()
            .ok_or_else(|| Error::EmptySplit(format!("domain `{name}` has no samples")))?;
        let shape = first.values.shape().to_vec();
        for (i, s) in samples.iter().enumerate() {
            if s.values.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "DomainDataset",
                    format!("sample {i} is {:?}, expected {shape:?}", s.values.shape()),
                ));
            }
            match s.label {
                Some(l) if l >= num_classes => {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        classes: num_classes,
                    })
                }
                None if labeled => {
                    return Err(Error::Protocol(format!(
                        "labeled domain `{name}` has unlabeled sample {i}"
                    )))
                }
                _ => {}
            }
        }
        let splits = Splits {
            train: (0..samples.len()).collect(),
            ..Splits::default()
        };
        Ok(Self {
            name,
            samples,
            splits,
            num_classes,
            labeled,
        })
    }

    pub fn samples(&self) -> &[TimeSeriesSample] {
        &self.samples
    }

    pub(crate) fn samples_mut(&mut self) -> &mut [TimeSeriesSample] {
        &mut self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples[0].channels()
    }

    pub fn steps(&self) -> usize {
        self.samples[0].steps()
    }

    /// Stacks the selected samples into a `[B, M, K]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<&Tensor> = indices
            .iter()
            .map(|&i| {
                self.samples.get(i).map(|s| &s.values).ok_or(Error::IndexOutOfRange {
                    index: i,
                    len: self.samples.len(),
                })
            })
            .collect::<Result<_>>()?;
        Tensor::stack(&items)
    }

    /// Labels usable as a training signal. Fails on unlabeled domains.
    pub fn training_labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        if !self.labeled {
            return Err(Error::Protocol(format!(
                "labels of unlabeled domain `{}` requested for training",
                self.name
            )));
        }
        self.evaluation_labels(indices)
    }

    /// Ground-truth labels for scoring, available even on unlabeled domains
    /// when the generator or loader recorded them.
    pub fn evaluation_labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                let s = self.samples.get(i).ok_or(Error::IndexOutOfRange {
                    index: i,
                    len: self.samples.len(),
                })?;
                s.label.ok_or_else(|| Error::MissingInput {
                    what: format!("ground-truth label for sample {i} of `{}`", self.name),
                    hint: "use a labeled recording set".into(),
                })
            })
            .collect()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        self.splits.get(split)
    }

    /// Marks the domain as unlabeled for training purposes.
    pub fn into_unlabeled(mut self) -> Self {
        self.labeled = false;
        self
    }
}
