//! Controllable source/target pairs of class-dependent periodic signals.
//!
//! Each class is a sinusoid at its own base frequency plus a class-specific
//! second-harmonic share, with random phase, amplitude and small frequency
//! jitter per sample, and additive Gaussian noise. Shifts are applied to the
//! target domain only, so the source domain depends on the seed alone.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{resample_to_length, split_dataset, DomainDataset, Split, SplitRatios, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Target generated `1 + m` times longer at source step frequencies, then
    /// resampled to the source length: every frequency scales by `1 + m`.
    SamplingRate,
    /// Adds `m × f₀` cycles per window to every class, `f₀` being the lowest
    /// class frequency.
    FrequencyOffset,
    /// Multiplies by `1 + m` and adds a constant offset `m`.
    Gain,
    /// Adds extra Gaussian noise with standard deviation `m`.
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftPreset {
    None,
    Small,
    Medium,
    Large,
}

impl ShiftPreset {
    pub fn magnitude(self) -> f64 {
        match self {
            ShiftPreset::None => 0.0,
            ShiftPreset::Small => 0.25,
            ShiftPreset::Medium => 0.5,
            ShiftPreset::Large => 0.75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainRole {
    Source,
    Target,
}

impl DomainRole {
    fn tag(self) -> &'static str {
        match self {
            DomainRole::Source => "source",
            DomainRole::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticShiftSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub length: usize,
    /// Cycles per window; defaults to `6 + 5c` for class `c`.
    pub class_frequencies: Option<Vec<f64>>,
    pub noise_std: f64,
    pub shifts: Vec<ShiftKind>,
    pub magnitude: f64,
    pub seed: u64,
    pub split: SplitRatios,
    pub target_labeled: bool,
    /// Minimum nearest-centroid accuracy on the source train split.
    pub min_separability: f64,
}

impl Default for SyntheticShiftSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            samples_per_class: 150,
            channels: 1,
            length: 512,
            class_frequencies: None,
            noise_std: 0.3,
            shifts: vec![ShiftKind::FrequencyOffset],
            magnitude: ShiftPreset::Medium.magnitude(),
            seed: 0,
            split: SplitRatios::default(),
            target_labeled: false,
            min_separability: 0.95,
        }
    }
}

impl SyntheticShiftSpec {
    pub fn with_preset(mut self, preset: ShiftPreset) -> Self {
        self.magnitude = preset.magnitude();
        self
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.class_frequencies
            .clone()
            .unwrap_or_else(|| (0..self.num_classes).map(|c| 6.0 + 5.0 * c as f64).collect())
    }

    fn harmonic(&self, class: usize) -> f64 {
        if self.num_classes < 2 {
            0.0
        } else {
            0.1 + 0.5 * class as f64 / (self.num_classes - 1) as f64
        }
    }

    fn has(&self, kind: ShiftKind) -> bool {
        self.magnitude != 0.0 && self.shifts.contains(&kind)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 || self.samples_per_class == 0 || self.channels == 0 || self.length < 8 {
            return fail(format!(
                "need ≥2 classes, ≥1 sample per class, ≥1 channel and length ≥8; got {}/{}/{}/{}",
                self.num_classes, self.samples_per_class, self.channels, self.length
            ));
        }
        let f = self.frequencies();
        if f.len() != self.num_classes || f.iter().any(|v| !(*v > 0.0)) {
            return fail(format!(
                "class_frequencies must hold {} positive values",
                self.num_classes
            ));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return fail(format!("noise_std {} must be ≥ 0", self.noise_std));
        }
        if !self.magnitude.is_finite() || self.magnitude <= -1.0 {
            return fail(format!("shift magnitude {} must exceed -1", self.magnitude));
        }
        if !(0.0..=1.0).contains(&self.min_separability) {
            return fail(format!("min_separability {} outside [0, 1]", self.min_separability));
        }
        Ok(())
    }

    /// Length of a target generation before resampling.
    pub fn raw_length(&self, role: DomainRole) -> usize {
        if role == DomainRole::Target && self.has(ShiftKind::SamplingRate) {
            ((self.length as f64) * (1.0 + self.magnitude)).round().max(2.0) as usize
        } else {
            self.length
        }
    }

    /// Regenerates sample `index` of a domain before any resampling.
    pub fn raw_sample(&self, role: DomainRole, index: usize) -> Result<(Tensor, usize)> {
        self.validate()?;
        let class = index % self.num_classes;
        let mut rng = rng::stream(self.seed, &format!("synthetic/{}/{index}", role.tag()));
        let target = role == DomainRole::Target;
        let freqs = self.frequencies();
        let mut freq = freqs[class];
        if target && self.has(ShiftKind::FrequencyOffset) {
            freq += self.magnitude * freqs.iter().cloned().fold(f64::INFINITY, f64::min);
        }
        let (mut gain, mut offset, mut noise) = (1.0, 0.0, self.noise_std);
        if target && self.has(ShiftKind::Gain) {
            gain = 1.0 + self.magnitude;
            offset = self.magnitude;
        }
        if target && self.has(ShiftKind::Noise) {
            noise = (noise * noise + self.magnitude * self.magnitude).sqrt();
        }
        let noise = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let len = self.raw_length(role);
        let k = self.length as f64;
        let h = self.harmonic(class);
        let mut data = Vec::with_capacity(self.channels * len);
        for _ in 0..self.channels {
            let amp = rng.random_range(0.8..1.2);
            let f = freq * rng.random_range(0.97..1.03);
            let phase = rng.random_range(0.0..2.0 * PI);
            let phase2 = rng.random_range(0.0..2.0 * PI);
            for t in 0..len {
                let w = 2.0 * PI * f * t as f64 / k;
                let clean = amp * ((1.0 - h) * (w + phase).sin() + h * (2.0 * w + phase2).sin());
                data.push(gain * clean + offset + noise.sample(&mut rng));
            }
        }
        Ok((Tensor::new(&[self.channels, len], data)?, class))
    }

    fn domain(&self, role: DomainRole) -> Result<DomainDataset> {
        let n = self.num_classes * self.samples_per_class;
        let samples = (0..n)
            .map(|i| {
                let (raw, label) = self.raw_sample(role, i)?;
                let values = resample_to_length(&raw, self.length)?;
                TimeSeriesSample::new(values, Some(label))
            })
            .collect::<Result<Vec<_>>>()?;
        let labeled = role == DomainRole::Source || self.target_labeled;
        let ds = DomainDataset::new(role.tag(), samples, self.num_classes, labeled)?;
        let tag = match role {
            DomainRole::Source => 0,
            DomainRole::Target => 1,
        };
        split_dataset(ds, self.split, self.seed.wrapping_mul(2).wrapping_add(tag))
    }
}

/// Builds a split source/target pair and checks that the source classes are
/// separable by a nearest-centroid probe on amplitude spectra.
pub fn make_synthetic_shift_pair(spec: &SyntheticShiftSpec) -> Result<(DomainDataset, DomainDataset)> {
    spec.validate()?;
    let source = spec.domain(DomainRole::Source)?;
    let target = spec.domain(DomainRole::Target)?;
    let probe = NearestCentroidProbe::fit(&source, Split::Train)?;
    let accuracy = probe.accuracy(&source, Split::Train)?;
    if accuracy < spec.min_separability {
        return Err(Error::Separability {
            accuracy,
            required: spec.min_separability,
        });
    }
    Ok((source, target))
}

/// Amplitude spectrum of every channel, concatenated.
pub fn spectrum_features(sample: &TimeSeriesSample) -> Vec<f64> {
    let (m, k) = (sample.channels(), sample.steps());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(k);
    let mut out = Vec::with_capacity(m * (k / 2 + 1));
    for c in 0..m {
        let mut buf: Vec<Complex<f64>> = sample.values.data()[c * k..(c + 1) * k]
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .collect();
        fft.process(&mut buf);
        out.extend(buf[..k / 2 + 1].iter().map(|z| z.norm() / k as f64));
    }
    out
}

/// Class centroids of spectrum features.
#[derive(Debug, Clone)]
pub struct NearestCentroidProbe {
    centroids: Vec<Option<Vec<f64>>>,
}

impl NearestCentroidProbe {
    pub fn fit(dataset: &DomainDataset, split: Split) -> Result<Self> {
        let idx = dataset.split(split);
        let labels = dataset.evaluation_labels(idx)?;
        let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; dataset.num_classes];
        for (&i, &l) in idx.iter().zip(&labels) {
            let f = spectrum_features(&dataset.samples()[i]);
            match &mut sums[l] {
                Some((s, n)) => {
                    s.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
                    *n += 1;
                }
                slot => *slot = Some((f, 1)),
            }
        }
        let centroids = sums
            .into_iter()
            .map(|s| s.map(|(v, n)| v.into_iter().map(|x| x / n as f64).collect()))
            .collect();
        Ok(Self { centroids })
    }

    pub fn predict(&self, sample: &TimeSeriesSample) -> usize {
        let f = spectrum_features(sample);
        let mut best = (0, f64::INFINITY);
        for (c, centroid) in self.centroids.iter().enumerate() {
            if let Some(centroid) = centroid {
                let d: f64 = centroid.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
        }
        best.0
    }

    pub fn accuracy(&self, dataset: &DomainDataset, split: Split) -> Result<f64> {
        let idx = dataset.split(split);
        if idx.is_empty() {
            return Err(Error::EmptySplit(format!("{split:?} split of `{}`", dataset.name)));
        }
        let labels = dataset.evaluation_labels(idx)?;
        let hits = idx
            .iter()
            .zip(&labels)
            .filter(|(&i, &l)| self.predict(&dataset.samples()[i]) == l)
            .count();
        Ok(hits as f64 / idx.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticShiftSpec {
        SyntheticShiftSpec {
            samples_per_class: 40,
            length: 256,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_separable() {
        let spec = small();
        let (s1, t1) = make_synthetic_shift_pair(&spec).unwrap();
        let (s2, t2) = make_synthetic_shift_pair(&spec).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        assert!(s1.labeled);
        assert!(!t1.labeled);
        assert!(t1.training_labels(&[0]).is_err());
        let probe = NearestCentroidProbe::fit(&s1, Split::Train).unwrap();
        assert!(probe.accuracy(&s1, Split::Train).unwrap() >= 0.95);
    }

    #[test]
    fn source_ignores_shift_settings() {
        let a = make_synthetic_shift_pair(&small()).unwrap().0;
        let spec = SyntheticShiftSpec {
            shifts: vec![ShiftKind::Gain, ShiftKind::Noise],
            magnitude: 0.4,
            ..small()
        };
        assert_eq!(a, make_synthetic_shift_pair(&spec).unwrap().0);
    }

    #[test]
    fn sampling_rate_target_is_resampled_generation() {
        let spec = SyntheticShiftSpec {
            shifts: vec![ShiftKind::SamplingRate],
            magnitude: 0.25,
            ..small()
        };
        assert_eq!(spec.raw_length(DomainRole::Target), 320);
        let (_, target) = make_synthetic_shift_pair(&spec).unwrap();
        for i in [0, 7, 100] {
            let (raw, label) = spec.raw_sample(DomainRole::Target, i).unwrap();
            assert_eq!(raw.dim(1), 320);
            assert_eq!(resample_to_length(&raw, 256).unwrap(), target.samples()[i].values);
            assert_eq!(target.samples()[i].label, Some(label));
        }
    }

    #[test]
    fn zero_shift_target_matches_source_distribution() {
        let spec = SyntheticShiftSpec {
            magnitude: 0.0,
            samples_per_class: 60,
            ..small()
        };
        let (s, t) = make_synthetic_shift_pair(&spec).unwrap();
        let probe = NearestCentroidProbe::fit(&s, Split::Train).unwrap();
        let src = probe.accuracy(&s, Split::Test).unwrap();
        let tgt = probe.accuracy(&t, Split::Test).unwrap();
        assert!((src - tgt).abs() <= 0.02, "source {src}, target {tgt}");
    }

    #[test]
    fn unseparable_spec_is_rejected() {
        let spec = SyntheticShiftSpec {
            class_frequencies: Some(vec![8.0, 8.0, 8.0]),
            noise_std: 50.0,
            ..small()
        };
        assert!(matches!(
            make_synthetic_shift_pair(&spec),
            Err(Error::Separability { .. })
        ));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = SyntheticShiftSpec {
            shifts: vec![ShiftKind::SamplingRate, ShiftKind::Noise],
            ..small()
        };
        let text = toml::to_string(&spec).unwrap();
        assert_eq!(toml::from_str::<SyntheticShiftSpec>(&text).unwrap(), spec);
    }
}
