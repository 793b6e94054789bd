use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear-interpolation resampling of a `[M, L]` series onto `target_len`
/// uniformly spaced points spanning the same interval.
///
/// Both endpoints are reproduced exactly. No anti-aliasing filter is applied,
/// so strong downsampling folds high frequencies back into the band.
pub fn resample_to_length(series: &Tensor, target_len: usize) -> Result<Tensor> {
    if series.ndim() != 2 {
        return Err(Error::shape("resample_to_length", format!("{:?}", series.shape())));
    }
    let (m, len) = (series.dim(0), series.dim(1));
    if len == 0 || target_len == 0 {
        return Err(Error::Config(format!("cannot resample length {len} to {target_len}")));
    }
    if !series.all_finite() {
        return Err(Error::NonFinite("resample input".into()));
    }
    if len == target_len {
        return Ok(series.clone());
    }
    let mut out = Vec::with_capacity(m * target_len);
    for c in 0..m {
        let row = &series.data()[c * len..(c + 1) * len];
        for i in 0..target_len {
            if target_len == 1 || len == 1 {
                out.push(row[0]);
                continue;
            }
            // position i·(L-1)/(T-1) split into integer and fractional parts exactly
            let num = i * (len - 1);
            let den = target_len - 1;
            let (j, rem) = (num / den, num % den);
            if rem == 0 {
                out.push(row[j]);
            } else {
                let frac = rem as f64 / den as f64;
                out.push(row[j] + (row[j + 1] - row[j]) * frac);
            }
        }
    }
    Tensor::new(&[m, target_len], out)
}
