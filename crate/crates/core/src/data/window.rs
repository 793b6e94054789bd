use serde::{Deserialize, Serialize};

use super::TimeSeriesSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowingSpec {
    pub window_size: usize,
    /// Gaps between windows are allowed (`stride > window_size`).
    pub stride: usize,
    #[serde(default = "yes")]
    pub interpolate_missing: bool,
}

fn yes() -> bool {
    true
}

impl WindowingSpec {
    pub fn new(window_size: usize, stride: usize) -> Self {
        Self {
            window_size,
            stride,
            interpolate_missing: true,
        }
    }

    /// Window `w` with fractional overlap, e.g. `0.5` for half-overlapping windows.
    pub fn with_overlap(window_size: usize, overlap: f64) -> Self {
        let stride = ((window_size as f64) * (1.0 - overlap)).round().max(1.0) as usize;
        Self::new(window_size, stride)
    }

    fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "window size and stride must be positive, got {} / {}",
                self.window_size, self.stride
            )));
        }
        Ok(())
    }
}

/// `floor((len - window) / stride) + 1`, or 0 when the series is too short.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || len < window {
        0
    } else {
        (len - window) / stride + 1
    }
}

pub fn window_offsets(len: usize, window: usize, stride: usize) -> Vec<usize> {
    (0..window_count(len, window, stride)).map(|i| i * stride).collect()
}

/// Fills NaN runs per channel by linear interpolation between the nearest
/// finite neighbours; leading and trailing runs copy the nearest value.
pub fn interpolate_missing(series: &Tensor) -> Result<Tensor> {
    let (m, len) = (series.dim(0), series.dim(1));
    let mut out = series.clone();
    for c in 0..m {
        let row = &mut out.data_mut()[c * len..(c + 1) * len];
        if row.iter().any(|v| v.is_infinite()) {
            return Err(Error::NonFinite(format!("channel {c} contains infinity")));
        }
        let known: Vec<usize> = (0..len).filter(|&i| !row[i].is_nan()).collect();
        let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
            return Err(Error::NonFinite(format!("channel {c} has no finite values")));
        };
        for i in 0..first {
            row[i] = row[first];
        }
        for i in last + 1..len {
            row[i] = row[last];
        }
        for pair in known.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            for i in a + 1..b {
                let t = (i - a) as f64 / (b - a) as f64;
                row[i] = row[a] + (row[b] - row[a]) * t;
            }
        }
    }
    Ok(out)
}

/// Most frequent label; ties go to the smallest label.
fn majority(labels: &[usize]) -> Option<usize> {
    let max = *labels.iter().max()?;
    let mut counts = vec![0usize; max + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let best = *counts.iter().max()?;
    counts.iter().position(|&c| c == best)
}

/// Cuts a `[M, L]` recording into contiguous windows.
///
/// `labels`, when given, is a per-timestep track of length `L`; each window
/// takes the majority label over its span.
pub fn segment_sliding_window(
    name: &str,
    series: &Tensor,
    labels: Option<&[usize]>,
    spec: &WindowingSpec,
) -> Result<Vec<TimeSeriesSample>> {
    spec.validate()?;
    if series.ndim() != 2 {
        return Err(Error::shape("segment_sliding_window", format!("{:?}", series.shape())));
    }
    let (m, len) = (series.dim(0), series.dim(1));
    if len < spec.window_size {
        return Err(Error::EmptyInput {
            name: name.to_string(),
            len,
            window: spec.window_size,
        });
    }
    if let Some(l) = labels {
        if l.len() != len {
            return Err(Error::shape(
                "segment_sliding_window",
                format!("label track of {} for {len} steps in `{name}`", l.len()),
            ));
        }
    }
    let clean = if spec.interpolate_missing {
        interpolate_missing(series)?
    } else {
        series.clone()
    };
    let w = spec.window_size;
    window_offsets(len, w, spec.stride)
        .into_iter()
        .map(|off| {
            let mut data = Vec::with_capacity(m * w);
            for c in 0..m {
                data.extend_from_slice(&clean.data()[c * len + off..c * len + off + w]);
            }
            let label = labels.and_then(|l| majority(&l[off..off + w]));
            TimeSeriesSample::new(Tensor::new(&[m, w], data)?, label)
        })
        .collect()
}
