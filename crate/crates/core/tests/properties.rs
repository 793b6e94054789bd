//! Property tests for the invariants of windowing, resampling, splitting,
//! pseudo-label retention, encoder shapes and the signed-rank test.

mod common;

use proptest::prelude::*;

use tsda_core::autograd::Tape;
use tsda_core::data::{
    resample_to_length, segment_sliding_window, split_dataset, window_count, SplitRatios, WindowingSpec,
};
use tsda_core::data::{DomainDataset, TimeSeriesSample};
use tsda_core::eval::softmax;
use tsda_core::models::{ChannelGrowth, Encoder, EncoderConfig};
use tsda_core::rng;
use tsda_core::stats::wilcoxon_significance;
use tsda_core::teacher::{class_conditional_loss, PseudoLabelBatch};
use tsda_core::Tensor;

use common::{random_tensor, seeded, wilcoxon_brute_force};

fn ramp(channels: usize, len: usize, offset: f64, slope: f64) -> Tensor {
    let data = (0..channels)
        .flat_map(|c| (0..len).map(move |i| offset + c as f64 + slope * i as f64))
        .collect();
    Tensor::new(&[channels, len], data).unwrap()
}

fn dataset(n: usize) -> DomainDataset {
    let samples = (0..n)
        .map(|i| TimeSeriesSample::new(Tensor::full(&[1, 4], i as f64), Some(i % 2)).unwrap())
        .collect();
    DomainDataset::new("props", samples, 2, true).unwrap()
}

fn probabilities(rows: usize, classes: usize, seed: u64) -> Tensor {
    let logits = random_tensor(&[rows, classes], &mut seeded(seed), 4.0);
    softmax(&logits)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_count_matches_enumeration(len in 0usize..200, window in 1usize..40, stride in 1usize..20) {
        let enumerated = (0..len).filter(|&start| start % stride == 0 && start + window <= len).count();
        prop_assert_eq!(window_count(len, window, stride), enumerated);
    }

    #[test]
    fn segmentation_yields_window_count_samples(len in 8usize..120, window in 1usize..8, stride in 1usize..8) {
        let series = ramp(2, len, 0.0, 1.0);
        let samples = segment_sliding_window("p", &series, None, &WindowingSpec::new(window, stride)).unwrap();
        prop_assert_eq!(samples.len(), window_count(len, window, stride));
        for (i, s) in samples.iter().enumerate() {
            prop_assert_eq!(s.steps(), window);
            prop_assert_eq!(s.values.data()[0], (i * stride) as f64);
        }
    }

    #[test]
    fn resampling_a_ramp_is_exact(len in 2usize..300, target in 2usize..300, slope in -3.0f64..3.0, offset in -5.0f64..5.0) {
        let out = resample_to_length(&ramp(2, len, offset, slope), target).unwrap();
        prop_assert_eq!(out.shape(), &[2, target]);
        let step = (len - 1) as f64 / (target - 1) as f64;
        for c in 0..2 {
            for j in 0..target {
                let expected = offset + c as f64 + slope * step * j as f64;
                prop_assert!((out.data()[c * target + j] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn splits_cover_and_are_disjoint(n in 10usize..300, seed in any::<u64>()) {
        let d = split_dataset(dataset(n), SplitRatios::default(), seed).unwrap();
        let mut all: Vec<usize> = d.splits.train.iter().chain(&d.splits.val).chain(&d.splits.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let (train, val, test) = SplitRatios::default().sizes(n).unwrap();
        prop_assert_eq!((d.splits.train.len(), d.splits.val.len(), d.splits.test.len()), (train, val, test));
    }

    #[test]
    fn raising_zeta_only_drops_rows(seed in any::<u64>(), rows in 1usize..40, z1 in 0.0f64..1.0, z2 in 0.0f64..1.0) {
        let (lo, hi) = if z1 <= z2 { (z1, z2) } else { (z2, z1) };
        let probs = probabilities(rows, 4, seed);
        let loose = PseudoLabelBatch::from_probabilities(&probs, lo);
        let strict = PseudoLabelBatch::from_probabilities(&probs, hi);
        for (i, l) in strict.indices.iter().zip(&strict.labels) {
            let pos = loose.indices.iter().position(|j| j == i);
            prop_assert!(pos.is_some());
            prop_assert_eq!(loose.labels[pos.unwrap()], *l);
        }
        prop_assert!(strict.retained_fraction() <= loose.retained_fraction());
        prop_assert!(strict.confidences.iter().all(|&c| c > hi));
    }

    #[test]
    fn unretained_rows_get_no_gradient(seed in any::<u64>(), rows in 2usize..24, zeta in 0.3f64..0.95) {
        let logits = random_tensor(&[rows, 3], &mut seeded(seed), 3.0);
        let pl = PseudoLabelBatch::from_probabilities(&softmax(&logits), zeta);
        let mut tape = Tape::new();
        let x = tape.leaf(logits);
        let loss = class_conditional_loss(&mut tape, x, &pl).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(&[rows, 3]));
        for r in 0..rows {
            let norm: f64 = g.row(r).iter().map(|v| v.abs()).sum();
            if pl.indices.contains(&r) {
                prop_assert!(norm > 0.0);
            } else {
                prop_assert_eq!(norm, 0.0);
            }
        }
        if pl.indices.is_empty() {
            prop_assert_eq!(tape.value(loss).item(), 0.0);
        }
    }

    #[test]
    fn encoder_output_matches_shape_query(
        layers in 1usize..4,
        channels in 1usize..6,
        kernel in 1usize..9,
        stride in 1usize..4,
        doubling in any::<bool>(),
        extra in 0usize..40,
        seed in any::<u64>(),
    ) {
        let cfg = EncoderConfig {
            input_channels: 2,
            num_layers: layers,
            channels,
            growth: if doubling { ChannelGrowth::Doubling } else { ChannelGrowth::Constant },
            widths: None,
            kernel_size: kernel,
            stride,
            padding: None,
        };
        let len = cfg.min_input_len() + extra;
        let encoder = Encoder::new(cfg.clone(), &mut rng::stream(seed, "props/encoder")).unwrap();
        let x = random_tensor(&[3, 2, len], &mut seeded(seed), 1.0);
        let h = encoder.encode(&x).unwrap();
        prop_assert_eq!(h.shape(), &[3, cfg.output_channels(), cfg.output_len(len).unwrap()]);
        prop_assert!(h.all_finite());
    }

    #[test]
    fn exact_signed_rank_matches_enumeration(n in 5usize..11, seed in any::<u64>(), tie_grid in any::<bool>()) {
        let mut r = seeded(seed);
        let mut draw = |scale: f64| {
            let v = random_tensor(&[n], &mut r, scale).into_data();
            if tie_grid { v.iter().map(|x| (x * 2.0).round() / 2.0).collect::<Vec<_>>() } else { v }
        };
        let a = draw(3.0);
        let b = draw(3.0);
        match wilcoxon_significance(&a, &b) {
            Ok(res) => {
                prop_assert!((res.p_value - wilcoxon_brute_force(&a, &b)).abs() < 1e-12);
                prop_assert!((res.w_plus + res.w_minus - (res.n * (res.n + 1)) as f64 / 2.0).abs() < 1e-9);
            }
            // rounding can zero enough differences to leave too few pairs
            Err(_) => prop_assert!(a.iter().zip(&b).filter(|(x, y)| x != y).count() < 5),
        }
    }

    #[test]
    fn signed_rank_is_antisymmetric(seed in any::<u64>(), n in 5usize..40) {
        let mut r = seeded(seed);
        let a = random_tensor(&[n], &mut r, 1.0).into_data();
        let b = random_tensor(&[n], &mut r, 1.0).into_data();
        let ab = wilcoxon_significance(&a, &b).unwrap();
        let ba = wilcoxon_significance(&b, &a).unwrap();
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        prop_assert!((ab.w_plus - ba.w_minus).abs() < 1e-9);
        prop_assert!(ab.p_value > 0.0 && ab.p_value <= 1.0);
    }
}
