//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context as _, Result};
use log::info;
use serde::Serialize;

use tsda_core::data::{make_synthetic_shift_pair, write_domain, ShiftPreset, Split};
use tsda_core::eval;
use tsda_core::models::ModelBundle;
use tsda_core::pretrain::{pretrain_source, PretrainConfig};
use tsda_core::runner::config::{self, ExperimentConfig};
use tsda_core::runner::report::{self, SeedRecord};
use tsda_core::runner::{
    adapt_seed, load_named_domain, load_pair, matrix_specs, MatrixTable, Runner, ScenarioOutcome, ScenarioSpec,
    SweepParam, Variant,
};
use tsda_core::stats::wilcoxon_significance;

use crate::Global;

/// The resolved base layer shared by every subcommand.
pub struct Context {
    base: toml::Table,
    pub cfg: ExperimentConfig,
}

impl Context {
    pub fn new(global: &Global) -> Result<Self> {
        let mut base = match &global.config {
            Some(path) => config::read_table(path)?,
            None => toml::Table::new(),
        };
        let mut assignments: Vec<(String, toml::Value)> = global
            .overrides
            .iter()
            .map(|s| config::parse_assignment(s))
            .collect::<tsda_core::Result<_>>()?;
        if let Some(seed) = global.seed {
            let seed = i64::try_from(seed).context("--seed must fit in a signed 64-bit integer")?;
            assignments.push(("runner.seeds".into(), toml::Value::Array(vec![seed.into()])));
        }
        if let Some(w) = global.workers {
            assignments.push(("runner.workers".into(), (w as i64).into()));
        }
        if let Some(out) = &global.out {
            assignments.push(("runner.out".into(), out.display().to_string().into()));
        }
        let layer = config::overrides_table(assignments.iter().map(|(k, v)| (k.as_str(), v)))?;
        config::merge(&mut base, &layer);
        let cfg = ExperimentConfig::resolve(&[&base])?;
        Ok(Self { base, cfg })
    }

    fn out(&self) -> &Path {
        &self.cfg.runner.out
    }

    fn seed(&self) -> u64 {
        self.cfg.runner.seeds[0]
    }

    fn runner(&self) -> Runner {
        Runner::new(self.base.clone())
    }

    fn save_config(&self) -> Result<()> {
        report::write_text(&self.out().join("config.toml"), &self.cfg.to_toml_string()?)?;
        Ok(())
    }
}

pub fn generate_synthetic(ctx: &Context, preset: Option<&str>) -> Result<()> {
    let mut spec = ctx.cfg.dataset.synthetic.clone();
    if let Some(p) = preset {
        let preset = match p {
            "none" => ShiftPreset::None,
            "small" => ShiftPreset::Small,
            "medium" => ShiftPreset::Medium,
            "large" => ShiftPreset::Large,
            other => bail!("unknown preset `{other}` (none, small, medium, large)"),
        };
        spec = spec.with_preset(preset);
    }
    spec.seed = spec.seed.wrapping_add(ctx.seed());
    spec.split = ctx.cfg.dataset.split;
    let (source, target) = make_synthetic_shift_pair(&spec)?;
    write_domain(&ctx.out().join("source"), &source)?;
    write_domain(&ctx.out().join("target"), &target)?;
    let text = toml::to_string_pretty(&spec).context("serializing the generator spec")?;
    report::write_text(&ctx.out().join("synthetic.toml"), &text)?;
    println!(
        "wrote {} source and {} target samples ({:?} shift, magnitude {}) to {}",
        source.len(),
        target.len(),
        spec.shifts,
        spec.magnitude,
        ctx.out().display()
    );
    Ok(())
}

pub fn pretrain(ctx: &Context, source_name: &str) -> Result<()> {
    let seed = ctx.seed();
    let source = load_named_domain(&ctx.cfg, source_name, seed, true)?;
    let mcfg = ctx
        .cfg
        .model_config(source.channels(), source.num_classes, source.steps())?;
    let bundle = ModelBundle::new(mcfg, seed)?;
    let pcfg = PretrainConfig {
        seed,
        ..ctx.cfg.pretrain.clone()
    };
    let outcome = pretrain_source(bundle, &source, &pcfg)?;
    outcome.bundle.save(ctx.out())?;
    report::write_csv(&ctx.out().join("metrics.csv"), &outcome.curves)?;
    ctx.save_config()?;
    let test = eval::score(&outcome.bundle, &source, source.split(Split::Test))?;
    println!(
        "pretrained on `{source_name}` (seed {seed}); best epoch {}; source test accuracy {:.2}%, macro-F1 {:.2}%",
        outcome.best_epoch, test.accuracy, test.macro_f1
    );
    println!("checkpoint: {}", ctx.out().display());
    Ok(())
}

/// Adaptation log row; target validation accuracy uses target labels and is
/// for monitoring only.
#[derive(Serialize)]
struct AdaptRow {
    iter: usize,
    loss_d: f64,
    loss_adv: f64,
    loss_ca: f64,
    retained_fraction: f64,
    mean_confidence: f64,
    target_val_acc_monitoring_only: Option<f64>,
}

pub fn adapt(ctx: &Context, ckpt: &Path, source_name: &str, target_name: &str) -> Result<()> {
    let seed = ctx.seed();
    let model = ModelBundle::load(ckpt)?;
    let (source, target) = load_pair(&ctx.cfg, source_name, target_name, seed)?;
    let outcome = adapt_seed(&ctx.cfg, &model, &source, &target, seed)?;
    outcome.target.save(&ctx.out().join("target"))?;
    outcome.teacher.bundle().save(&ctx.out().join("teacher"))?;
    let rows: Vec<AdaptRow> = outcome
        .log
        .iter()
        .map(|r| AdaptRow {
            iter: r.iter,
            loss_d: r.loss_d,
            loss_adv: r.loss_adv,
            loss_ca: r.loss_ca,
            retained_fraction: r.retained_fraction,
            mean_confidence: r.mean_confidence,
            target_val_acc_monitoring_only: r.target_val_acc,
        })
        .collect();
    report::write_csv(&ctx.out().join("metrics.csv"), &rows)?;
    ctx.save_config()?;
    let before = eval::score(&model, &target, target.split(Split::Test))?;
    let after = eval::score(&outcome.target, &target, target.split(Split::Test))?;
    println!(
        "adapted `{source_name}` → `{target_name}` (seed {seed}): target test accuracy {:.2}% → {:.2}%, macro-F1 {:.2}% → {:.2}%",
        before.accuracy, after.accuracy, before.macro_f1, after.macro_f1
    );
    println!("target checkpoint: {}", ctx.out().join("target").display());
    info!(
        "teacher updated {} times with α = {}",
        outcome.teacher.updates(),
        outcome.teacher.alpha()
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow {
    index: usize,
    label: Option<usize>,
    predicted: usize,
    confidence: f64,
}

pub fn evaluate(ctx: &Context, ckpt: &Path, domain: &str) -> Result<()> {
    let seed = ctx.seed();
    let model = ModelBundle::load(ckpt)?;
    let data = load_named_domain(&ctx.cfg, domain, seed, false)?;
    let test = data.split(Split::Test);
    let mut rows = Vec::with_capacity(test.len());
    for chunk in test.chunks(256) {
        let p = eval::predict(&model, &data.batch(chunk)?)?;
        let c = p.probabilities.dim(1);
        for ((&i, &pred), probs) in chunk.iter().zip(&p.labels).zip(p.probabilities.data().chunks(c)) {
            rows.push(PredictionRow {
                index: i,
                label: data.samples()[i].label,
                predicted: pred,
                confidence: probs[pred],
            });
        }
    }
    report::write_csv(&ctx.out().join("predictions.csv"), &rows)?;
    let s = eval::score(&model, &data, test)?;
    println!(
        "`{domain}` test split ({} samples, seed {seed}): accuracy {:.2}%, macro-F1 {:.2}%",
        test.len(),
        s.accuracy,
        s.macro_f1
    );
    Ok(())
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    Ok(names
        .iter()
        .map(|v| v.trim().parse())
        .collect::<tsda_core::Result<_>>()?)
}

fn write_outcomes(out: &Path, outcomes: &[ScenarioOutcome]) -> Result<MatrixTable> {
    let done: Vec<_> = outcomes.iter().filter_map(ScenarioOutcome::result).collect();
    report::write_csv(&out.join("records.csv"), &report::seed_records(&done))?;
    report::write_json(&out.join("summary.json"), &outcomes)?;
    let table = MatrixTable::from_outcomes(outcomes);
    report::write_text(&out.join("matrix.csv"), &table.to_csv())?;
    report::write_text(&out.join("matrix.svg"), &report::matrix_svg(&table))?;
    for o in outcomes {
        if let ScenarioOutcome::Failed { spec, error } = o {
            eprintln!("failed: {} {}: {error}", spec.label(), spec.variant);
        }
    }
    Ok(table)
}

pub fn matrix(ctx: &Context, variants: &[String]) -> Result<()> {
    let runner = ctx.runner();
    let family = ctx.cfg.dataset.family;
    let domains = runner.domains(family)?;
    let mut specs = Vec::new();
    for v in parse_variants(variants)? {
        specs.extend(matrix_specs(family, &domains, v, &ctx.cfg.runner.seeds)?);
    }
    let (table, outcomes) = runner.run_matrix(&specs)?;
    write_outcomes(ctx.out(), &outcomes)?;
    ctx.save_config()?;
    print!("{}", table.to_csv());
    Ok(())
}

pub fn ablate(ctx: &Context, source: &str, target: &str) -> Result<()> {
    let family = ctx.cfg.dataset.family;
    let specs: Vec<ScenarioSpec> = Variant::ALL
        .into_iter()
        .map(|v| ScenarioSpec::new(family, source, target, v, ctx.cfg.runner.seeds.clone()))
        .collect();
    let outcomes = ctx.runner().run_all(&specs)?;
    let table = write_outcomes(ctx.out(), &outcomes)?;
    ctx.save_config()?;
    print!("{}", table.to_csv());
    Ok(())
}

pub fn sweep(ctx: &Context, param: &str, values: &[f64], source: &str, target: &str, variant: &str) -> Result<()> {
    let param: SweepParam = param.parse()?;
    let base = ScenarioSpec::new(
        ctx.cfg.dataset.family,
        source,
        target,
        variant.parse()?,
        ctx.cfg.runner.seeds.clone(),
    );
    let points = ctx.runner().sensitivity_sweep(&base, param, values)?;
    let out = ctx.out();
    report::write_csv(&out.join("sweep.csv"), &report::sweep_records(param, &points))?;
    report::write_text(&out.join("sweep.svg"), &report::sweep_svg(param, &points))?;
    report::write_json(&out.join("summary.json"), &points)?;
    let results: Vec<_> = points.iter().map(|p| &p.result).collect();
    report::write_csv(&out.join("records.csv"), &report::seed_records(&results))?;
    ctx.save_config()?;
    println!("{},mean_accuracy,std_accuracy", param.as_str());
    for p in &points {
        println!("{},{:.2},{:.2}", p.value, p.result.mean_accuracy, p.result.std_accuracy);
    }
    Ok(())
}

pub fn significance(records: &Path, a: &str, b: &str, per_seed: bool) -> Result<()> {
    let rows: Vec<SeedRecord> = report::read_csv(records)?;
    let key = |r: &SeedRecord| {
        let seed = if per_seed { Some(r.seed) } else { None };
        (r.family.clone(), r.source.clone(), r.target.clone(), seed)
    };
    let collect = |variant: &str| {
        let mut groups: BTreeMap<_, Vec<f64>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.variant == variant) {
            groups.entry(key(r)).or_default().push(r.accuracy);
        }
        groups
            .into_iter()
            .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
            .collect::<BTreeMap<_, _>>()
    };
    let (ga, gb) = (collect(a), collect(b));
    let paired: Vec<(f64, f64)> = ga.iter().filter_map(|(k, &x)| gb.get(k).map(|&y| (x, y))).collect();
    if paired.is_empty() {
        bail!(
            "no scenarios shared by variants `{a}` and `{b}` in {}",
            records.display()
        );
    }
    let (xa, xb): (Vec<f64>, Vec<f64>) = paired.into_iter().unzip();
    let r = wilcoxon_significance(&xa, &xb)?;
    println!(
        "{a} vs {b}: {} pairs ({} non-zero), W+ = {}, W- = {}, two-sided p = {:.6} ({})",
        xa.len(),
        r.n,
        r.w_plus,
        r.w_minus,
        r.p_value,
        if r.exact { "exact" } else { "normal approximation" }
    );
    Ok(())
}
