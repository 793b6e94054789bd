//! End-to-end behavior on small configurations: preset shapes, the
//! contrastive loss at initialization, determinism, variant equivalences,
//! aggregation and report round-trips.

mod common;

use tsda_core::autograd::Tape;
use tsda_core::data::synthetic::spectrum_features;
use tsda_core::data::{make_synthetic_shift_pair, Split, SyntheticShiftSpec};
use tsda_core::eval::predict;
use tsda_core::models::{ArchPreset, Classifier, Mode, ModelBundle};
use tsda_core::params::BindMode;
use tsda_core::pretrain::{joint_loss, BundleBinding};
use tsda_core::runner::report::{read_csv, seed_records, write_csv, SeedRecord};
use tsda_core::runner::{mean_std, ExperimentConfig, Family, Runner, ScenarioResult, ScenarioSpec, Variant};
use tsda_core::Tensor;

use common::{micro_config, random_tensor, seeded};

/// Synthetic family shrunk to run in about a second per seed.
fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(Family::Synthetic);
    cfg.dataset.synthetic.length = 64;
    cfg.dataset.synthetic.samples_per_class = 20;
    cfg.dataset.synthetic.class_frequencies = Some(vec![3.0, 7.0, 11.0]);
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 16;
    cfg.adapt.iterations = 4;
    cfg.adapt.batch_size = 16;
    cfg.runner.workers = 1;
    cfg
}

fn spec(variant: Variant, seeds: Vec<u64>) -> ScenarioSpec {
    ScenarioSpec::new(Family::Synthetic, "source", "target", variant, seeds)
}

fn scores(r: &ScenarioResult) -> Vec<(u64, f64, f64, f64)> {
    r.seeds
        .iter()
        .map(|s| (s.seed, s.accuracy, s.macro_f1, s.source_accuracy))
        .collect()
}

#[test]
fn presets_map_their_windows_to_class_logits() {
    for preset in ArchPreset::ALL {
        let (channels, classes) = preset.default_io();
        let cfg = preset.model(channels, classes);
        let len = cfg.feature_len().unwrap();
        assert!(len >= 2, "{preset:?}: K′ = {len}");
        assert!(cfg.horizon().unwrap() >= 1);
        let bundle = ModelBundle::new(cfg, 0).unwrap();
        let x = random_tensor(&[2, channels, preset.input_length()], &mut seeded(1), 1.0);
        let h = bundle.encoder.encode(&x).unwrap();
        assert_eq!(h.shape(), &[2, bundle.config().encoder.output_channels(), len]);
        let logits = bundle.logits(&x).unwrap();
        assert_eq!(logits.shape(), &[2, classes], "{preset:?}");
        assert!(logits.all_finite());
    }
}

#[test]
fn long_windows_need_the_deep_encoder() {
    let (channels, classes) = ArchPreset::Mfd.default_io();
    let cfg = ArchPreset::Mfd.model(channels, classes);
    assert_eq!(cfg.input_length, 5120);
    assert_eq!(cfg.encoder.num_layers, 5);
    // five stride-2 layers shrink 5120 steps by roughly 32
    let len = cfg.feature_len().unwrap();
    assert!((150..=170).contains(&len), "K′ = {len}");
}

#[test]
fn contrastive_loss_starts_near_log_batch() {
    let b = 32usize;
    for preset in [ArchPreset::Har, ArchPreset::Synthetic] {
        let (channels, classes) = preset.default_io();
        let bundle = ModelBundle::new(preset.model(channels, classes), 7).unwrap();
        let x = random_tensor(&[b, channels, preset.input_length()], &mut seeded(2), 1.0);
        let labels: Vec<usize> = (0..b).map(|i| i % classes).collect();
        let mut tape = Tape::new();
        let p = BundleBinding::new(&mut tape, &bundle, BindMode::Train);
        let (losses, _) = joint_loss(&mut tape, &bundle, &p, &x, &labels, 0, 1.0, Mode::Train).unwrap();
        let ln_b = (b as f64).ln();
        assert!(
            (losses.cpc - ln_b).abs() / ln_b < 0.05,
            "{preset:?}: contrastive loss {} vs ln B {ln_b}",
            losses.cpc
        );
    }
}

#[test]
fn hand_set_classifier_decides_predictions() {
    let mut bundle = ModelBundle::new(micro_config(), 0).unwrap();
    let features = bundle.config().encoder.output_channels();
    let mut bias = Tensor::zeros(&[3]);
    bias.data_mut()[2] = 5.0;
    bundle.classifier = Classifier::from_parts(Tensor::zeros(&[3, features]), bias).unwrap();
    let x = random_tensor(&[4, 2, 16], &mut seeded(3), 1.0);
    let p = predict(&bundle, &x).unwrap();
    assert_eq!(p.labels, vec![2; 4]);
    let e5 = 5f64.exp();
    for r in 0..4 {
        assert!((p.probabilities.row(r)[2] - e5 / (e5 + 2.0)).abs() < 1e-12);
        assert!((p.probabilities.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_shift_keeps_class_statistics() {
    let spec = SyntheticShiftSpec {
        magnitude: 0.0,
        target_labeled: true,
        samples_per_class: 60,
        ..SyntheticShiftSpec::default()
    };
    let (source, target) = make_synthetic_shift_pair(&spec).unwrap();
    let energy = |s: &tsda_core::data::TimeSeriesSample| s.values.data().iter().map(|v| v * v).sum::<f64>();
    for class in 0..spec.num_classes {
        let pick = |d: &tsda_core::data::DomainDataset| -> Vec<f64> {
            d.samples()
                .iter()
                .filter(|s| s.label == Some(class))
                .map(energy)
                .collect()
        };
        let (a, b) = (pick(&source), pick(&target));
        let (ma, sa) = mean_std(&a);
        let (mb, sb) = mean_std(&b);
        let se = (sa * sa / a.len() as f64 + sb * sb / b.len() as f64).sqrt();
        assert!((ma - mb).abs() <= 3.0 * se, "class {class}: {ma} vs {mb} (se {se})");
    }
}

#[test]
fn frequency_offset_moves_the_spectral_peak() {
    let spec = SyntheticShiftSpec {
        target_labeled: true,
        noise_std: 0.0,
        ..SyntheticShiftSpec::default()
    };
    let (source, target) = make_synthetic_shift_pair(&spec).unwrap();
    let peak = |d: &tsda_core::data::DomainDataset| {
        let spectrum = spectrum_features(&d.samples()[d.split(Split::Train)[0]]);
        let label = d.samples()[d.split(Split::Train)[0]].label.unwrap();
        let bin = (1..spectrum.len())
            .max_by(|&i, &j| spectrum[i].total_cmp(&spectrum[j]))
            .unwrap();
        (label, bin)
    };
    let freqs = spec.frequencies();
    let (label, bin) = peak(&source);
    assert!((bin as f64 - freqs[label]).abs() <= 1.0);
    let (label, bin) = peak(&target);
    let shifted = freqs[label] + spec.magnitude * freqs[0];
    assert!(
        (bin as f64 - shifted).abs() <= 1.0,
        "bin {bin}, expected about {shifted}"
    );
}

#[test]
fn identical_spec_and_seed_reproduce_results() {
    let runner = Runner::from_config(&tiny()).unwrap();
    let first = runner.run_scenario(&spec(Variant::Full, vec![3])).unwrap();
    let fresh = Runner::from_config(&tiny()).unwrap();
    let second = fresh.run_scenario(&spec(Variant::Full, vec![3])).unwrap();
    assert_eq!(scores(&first), scores(&second));
    assert_eq!(first.config_hash, second.config_hash);
}

#[test]
fn zero_lambda_turns_full_into_no_teacher() {
    let runner = Runner::from_config(&tiny()).unwrap();
    let full = runner
        .run_scenario(&spec(Variant::Full, vec![1]).with_override("adapt.lambda", 0.0))
        .unwrap();
    let no_teacher = runner.run_scenario(&spec(Variant::NoTeacher, vec![1])).unwrap();
    assert_eq!(scores(&full), scores(&no_teacher));
}

#[test]
fn source_only_reports_the_pretrained_model() {
    let runner = Runner::from_config(&tiny()).unwrap();
    let r = runner.run_scenario(&spec(Variant::SourceOnly, vec![0, 1])).unwrap();
    assert_eq!(r.seeds.len(), 2);
    for s in &r.seeds {
        assert!((0.0..=100.0).contains(&s.accuracy));
        assert!((0.0..=100.0).contains(&s.source_accuracy));
    }
}

#[test]
fn seed_records_reaggregate_to_the_summary() {
    let runner = Runner::from_config(&tiny()).unwrap();
    let r = runner.run_scenario(&spec(Variant::Full, vec![0, 1, 2])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.csv");
    write_csv(&path, &seed_records(&[&r])).unwrap();
    let back: Vec<SeedRecord> = read_csv(&path).unwrap();
    assert_eq!(back.len(), 3);
    let acc: Vec<f64> = back.iter().map(|s| s.accuracy).collect();
    let (mean, std) = mean_std(&acc);
    assert!((mean - r.mean_accuracy).abs() < 1e-9);
    assert!((std - r.std_accuracy).abs() < 1e-9);
    assert!(back
        .iter()
        .all(|s| s.config_hash == r.config_hash && s.variant == "full"));
}
