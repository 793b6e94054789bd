//! Experiment orchestration: scenarios, ablation variants, cross-domain
//! matrices, sensitivity sweeps and their reports.

pub mod config;
pub mod report;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, Family, SYNTHETIC_DOMAINS};
pub use report::MatrixTable;

use crate::adapt::{adapt_target, AdaptOutcome};
use crate::data::{load_domain, make_synthetic_shift_pair, split_dataset, DomainDataset, Normalizer, Split};
use crate::error::{Error, Result};
use crate::eval;
use crate::models::{DiscriminatorKind, ModelBundle};
use crate::pretrain::{pretrain_source, PretrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Contrastive pretraining, autoregressive discriminator and teacher.
    Full,
    /// Supervised-only pretraining.
    NoSl,
    /// Fully-connected discriminator on time-averaged features.
    NoAr,
    /// No class-conditional term (`λ = 0`).
    NoTeacher,
    /// The pretrained source model evaluated on the target without adaptation.
    SourceOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoSl,
        Variant::NoAr,
        Variant::NoTeacher,
        Variant::SourceOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSl => "no_sl",
            Variant::NoAr => "no_ar",
            Variant::NoTeacher => "no_teacher",
            Variant::SourceOnly => "source_only",
        }
    }

    /// Applies the variant's changes to a resolved config.
    pub fn configure(self, cfg: &mut ExperimentConfig) {
        match self {
            Variant::Full | Variant::SourceOnly => {}
            Variant::NoSl => cfg.pretrain.cpc.weight = 0.0,
            Variant::NoAr => cfg.adapt.discriminator = DiscriminatorKind::FullyConnected,
            Variant::NoTeacher => cfg.adapt.lambda = 0.0,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown variant `{s}` (full, no_sl, no_ar, no_teacher, source_only)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub source: String,
    pub target: String,
    pub family: Family,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// Dotted config paths (`adapt.lambda`) and their values.
    #[serde(default)]
    pub overrides: BTreeMap<String, toml::Value>,
}

impl ScenarioSpec {
    pub fn new(family: Family, source: &str, target: &str, variant: Variant, seeds: Vec<u64>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
            family,
            variant,
            seeds,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_override(mut self, path: &str, value: impl Into<toml::Value>) -> Self {
        self.overrides.insert(path.into(), value.into());
        self
    }

    /// `source→target` label.
    pub fn label(&self) -> String {
        format!("{}→{}", self.source, self.target)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source == self.target {
            return Err(Error::Config(format!(
                "scenario source and target are both `{}`",
                self.source
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config(format!("scenario {} has no seeds", self.label())));
        }
        Ok(())
    }
}

/// Target test metrics of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Accuracy of the pretrained model on the source test split.
    pub source_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub spec: ScenarioSpec,
    pub seeds: Vec<SeedResult>,
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
    pub wall_seconds: f64,
    pub config_hash: String,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ScenarioResult {
    pub fn from_seeds(spec: ScenarioSpec, seeds: Vec<SeedResult>, wall_seconds: f64, config_hash: String) -> Self {
        let acc: Vec<f64> = seeds.iter().map(|s| s.accuracy).collect();
        let f1: Vec<f64> = seeds.iter().map(|s| s.macro_f1).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        let (mean_macro_f1, std_macro_f1) = mean_std(&f1);
        Self {
            spec,
            seeds,
            mean_accuracy,
            std_accuracy,
            mean_macro_f1,
            std_macro_f1,
            wall_seconds,
            config_hash,
        }
    }
}

/// Matrix cell: a result or the error that stopped the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScenarioOutcome {
    Done(ScenarioResult),
    Failed { spec: ScenarioSpec, error: String },
}

impl ScenarioOutcome {
    pub fn spec(&self) -> &ScenarioSpec {
        match self {
            ScenarioOutcome::Done(r) => &r.spec,
            ScenarioOutcome::Failed { spec, .. } => spec,
        }
    }

    pub fn result(&self) -> Option<&ScenarioResult> {
        match self {
            ScenarioOutcome::Done(r) => Some(r),
            ScenarioOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    Zeta,
}

impl SweepParam {
    /// Closed range of legal sweep values.
    pub fn range(self) -> (f64, f64) {
        match self {
            SweepParam::Lambda => (1e-4, 1.0),
            SweepParam::Zeta => (0.1, 0.99),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Lambda => "adapt.lambda",
            SweepParam::Zeta => "adapt.zeta",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Zeta => "zeta",
        }
    }

    /// Checks that `values` are sorted ascending and inside the legal range.
    pub fn validate(self, values: &[f64]) -> Result<()> {
        let (lo, hi) = self.range();
        if values.is_empty() {
            return Err(Error::Config(format!("{} sweep has no values", self.as_str())));
        }
        if let Some(v) = values.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::Config(format!("{} = {v} outside [{lo}, {hi}]", self.as_str())));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "{} sweep values must be strictly increasing",
                self.as_str()
            )));
        }
        Ok(())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "zeta" => Ok(SweepParam::Zeta),
            _ => Err(Error::Config(format!("unknown sweep parameter `{s}` (lambda, zeta)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub result: ScenarioResult,
}

/// All ordered pairs of distinct domains, `d·(d−1)` specs.
pub fn matrix_specs(family: Family, domains: &[String], variant: Variant, seeds: &[u64]) -> Result<Vec<ScenarioSpec>> {
    let mut unique = domains.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != domains.len() || domains.len() < 2 {
        return Err(Error::Config(format!(
            "a matrix needs at least two distinct domains, got {domains:?}"
        )));
    }
    let mut specs = Vec::with_capacity(domains.len() * (domains.len() - 1));
    for s in domains {
        for t in domains {
            if s != t {
                specs.push(ScenarioSpec::new(family, s, t, variant, seeds.to_vec()));
            }
        }
    }
    Ok(specs)
}

type PretrainSlot = Arc<Mutex<Option<Arc<ModelBundle>>>>;

/// Runs scenarios against a base config layer, sharing pretrained source
/// models between variants and targets that agree on everything pretraining
/// depends on.
pub struct Runner {
    base: toml::Table,
    pretrained: Mutex<HashMap<String, PretrainSlot>>,
}

impl Runner {
    /// `base` is a config layer over the family defaults, e.g. a parsed file.
    pub fn new(base: toml::Table) -> Self {
        Self {
            base,
            pretrained: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self::new(cfg.to_table()?))
    }

    /// The base layer resolved on its own.
    pub fn base_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::resolve(&[&self.base])
    }

    /// Defaults of the scenario's family, the base layer, the scenario's overrides and
    /// finally the variant's changes.
    pub fn resolve(&self, spec: &ScenarioSpec) -> Result<ExperimentConfig> {
        let overrides = config::overrides_table(spec.overrides.iter().map(|(k, v)| (k.as_str(), v)))?;
        let mut family = toml::Table::new();
        let mut dataset = toml::Table::new();
        dataset.insert("family".into(), spec.family.as_str().into());
        family.insert("dataset".into(), dataset.into());
        let mut cfg = ExperimentConfig::resolve(&[&self.base, &family, &overrides])?;
        spec.variant.configure(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Domain names of a family under the base config.
    pub fn domains(&self, family: Family) -> Result<Vec<String>> {
        let mut family_layer = toml::Table::new();
        let mut dataset = toml::Table::new();
        dataset.insert("family".into(), family.as_str().into());
        family_layer.insert("dataset".into(), dataset.into());
        let cfg = ExperimentConfig::resolve(&[&self.base, &family_layer])?;
        discover_domains(&cfg)
    }

    pub fn run_scenario(&self, spec: &ScenarioSpec) -> Result<ScenarioResult> {
        spec.validate()?;
        let cfg = self.resolve(spec)?;
        let hash = config::digest(&(&cfg, spec));
        let start = Instant::now();
        let seeds = spec
            .seeds
            .par_iter()
            .map(|&seed| self.run_seed(&cfg, spec, seed))
            .collect::<Result<Vec<_>>>()?;
        let result = ScenarioResult::from_seeds(spec.clone(), seeds, start.elapsed().as_secs_f64(), hash);
        info!(
            "{} {} {}: {:.2} ± {:.2}",
            spec.family,
            spec.label(),
            spec.variant,
            result.mean_accuracy,
            result.std_accuracy
        );
        Ok(result)
    }

    fn run_seed(&self, cfg: &ExperimentConfig, spec: &ScenarioSpec, seed: u64) -> Result<SeedResult> {
        let start = Instant::now();
        let (source, target) = load_pair(cfg, &spec.source, &spec.target, seed)?;
        let model = self.pretrained(cfg, &spec.source, &source, seed)?;
        let test = target.split(Split::Test);
        let source_accuracy = eval::score(&model, &source, source.split(Split::Test))?.accuracy;
        let scores = if spec.variant == Variant::SourceOnly {
            eval::score(&model, &target, test)?
        } else {
            let adapted = adapt_seed(cfg, &model, &source, &target, seed)?;
            eval::score(&adapted.target, &target, test)?
        };
        Ok(SeedResult {
            seed,
            accuracy: scores.accuracy,
            macro_f1: scores.macro_f1,
            source_accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Pretrained source model for `seed`, computed once per pretraining setup.
    fn pretrained(
        &self,
        cfg: &ExperimentConfig,
        name: &str,
        source: &DomainDataset,
        seed: u64,
    ) -> Result<Arc<ModelBundle>> {
        let key = config::digest(&(name, seed, &cfg.dataset, &cfg.model, &cfg.pretrain));
        let slot = self
            .pretrained
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_default()
            .clone();
        let mut slot = slot.lock().expect("slot lock");
        if let Some(model) = slot.as_ref() {
            return Ok(model.clone());
        }
        let model = Arc::new(pretrain_seed(cfg, source, seed)?);
        *slot = Some(model.clone());
        Ok(model)
    }

    /// Runs every spec on the configured worker pool; failures are recorded
    /// and do not stop the others.
    pub fn run_all(&self, specs: &[ScenarioSpec]) -> Result<Vec<ScenarioOutcome>> {
        let workers = self.base_config()?.runner.workers;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(pool.install(|| {
            specs
                .par_iter()
                .map(|spec| match self.run_scenario(spec) {
                    Ok(r) => ScenarioOutcome::Done(r),
                    Err(e) => {
                        warn!("{} {} {} failed: {e}", spec.family, spec.label(), spec.variant);
                        ScenarioOutcome::Failed {
                            spec: spec.clone(),
                            error: e.to_string(),
                        }
                    }
                })
                .collect()
        }))
    }

    /// Runs `specs` and tabulates mean accuracy per variant and scenario.
    pub fn run_matrix(&self, specs: &[ScenarioSpec]) -> Result<(MatrixTable, Vec<ScenarioOutcome>)> {
        if specs.is_empty() {
            return Err(Error::Config("empty scenario matrix".into()));
        }
        let outcomes = self.run_all(specs)?;
        Ok((MatrixTable::from_outcomes(&outcomes), outcomes))
    }

    /// One scenario per value of `param`; every value is checked before any run.
    pub fn sensitivity_sweep(&self, base: &ScenarioSpec, param: SweepParam, values: &[f64]) -> Result<Vec<SweepPoint>> {
        param.validate(values)?;
        base.validate()?;
        let specs: Vec<ScenarioSpec> = values
            .iter()
            .map(|&v| base.clone().with_override(param.key(), v))
            .collect();
        for spec in &specs {
            self.resolve(spec)?;
        }
        let workers = self.base_config()?.runner.workers;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| {
            specs
                .par_iter()
                .zip(values)
                .map(|(spec, &value)| {
                    Ok(SweepPoint {
                        value,
                        result: self.run_scenario(spec)?,
                    })
                })
                .collect()
        })
    }
}

/// Runs a single spec with a fresh runner over `cfg`.
pub fn run_scenario(cfg: &ExperimentConfig, spec: &ScenarioSpec) -> Result<ScenarioResult> {
    Runner::from_config(cfg)?.run_scenario(spec)
}

/// Domain names of the configured family: the explicit list, or the family
/// directory's subdirectories, or the two synthetic domains.
pub fn discover_domains(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    if !cfg.dataset.domains.is_empty() {
        return Ok(cfg.dataset.domains.clone());
    }
    if cfg.dataset.family == Family::Synthetic {
        return Ok(SYNTHETIC_DOMAINS.iter().map(|s| s.to_string()).collect());
    }
    let dir = cfg.dataset.data_root.join(cfg.dataset.family.as_str());
    let entries = std::fs::read_dir(&dir).map_err(|_| Error::MissingInput {
        what: format!("domain directory {}", dir.display()),
        hint: "place one subdirectory per domain there, each with a manifest.txt (see `tsda generate-synthetic --out` for the layout)".into(),
    })?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if entry.path().join("manifest.txt").is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Loads, splits and normalizes a source/target pair for one seed. The
/// target comes back unlabeled for training purposes.
pub fn load_pair(
    cfg: &ExperimentConfig,
    source: &str,
    target: &str,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    Ok((
        load_named_domain(cfg, source, seed, true)?,
        load_named_domain(cfg, target, seed, false)?,
    ))
}

/// One domain of the configured family for `seed`: split, normalized when
/// configured, and marked labeled only when it serves as a training source.
pub fn load_named_domain(cfg: &ExperimentConfig, name: &str, seed: u64, labeled: bool) -> Result<DomainDataset> {
    let mut ds = if cfg.dataset.family == Family::Synthetic {
        let mut spec = cfg.dataset.synthetic.clone();
        spec.seed = spec.seed.wrapping_add(seed);
        spec.split = cfg.dataset.split;
        let (a, b) = make_synthetic_shift_pair(&spec)?;
        match name {
            "source" => a,
            "target" => b,
            other => {
                return Err(Error::Config(format!(
                    "synthetic domains are `source` and `target`, not `{other}`"
                )))
            }
        }
    } else {
        let dir = cfg.dataset.data_root.join(cfg.dataset.family.as_str()).join(name);
        split_dataset(load_domain(&dir)?, cfg.dataset.split, seed)?
    };
    ds.labeled = labeled;
    if cfg.dataset.normalize {
        Normalizer::fit_apply(&mut ds)?;
    }
    Ok(ds)
}

/// Pretrains a freshly initialized model on `source`.
pub fn pretrain_seed(cfg: &ExperimentConfig, source: &DomainDataset, seed: u64) -> Result<ModelBundle> {
    let mcfg = cfg.model_config(source.channels(), source.num_classes, source.steps())?;
    let bundle = ModelBundle::new(mcfg, seed)?;
    let pcfg = PretrainConfig {
        seed,
        ..cfg.pretrain.clone()
    };
    Ok(pretrain_source(bundle, source, &pcfg)?.bundle)
}

/// Adapts `model` to `target` with the config's adaptation settings.
pub fn adapt_seed(
    cfg: &ExperimentConfig,
    model: &ModelBundle,
    source: &DomainDataset,
    target: &DomainDataset,
    seed: u64,
) -> Result<AdaptOutcome> {
    let mut acfg = cfg.adapt.clone();
    acfg.seed = seed;
    adapt_target(model, source, target, &acfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_covers_ordered_pairs() {
        let d = |n: usize| (0..n).map(|i| format!("d{i}")).collect::<Vec<_>>();
        assert_eq!(matrix_specs(Family::Har, &d(4), Variant::Full, &[0]).unwrap().len(), 12);
        assert_eq!(matrix_specs(Family::Ssc, &d(3), Variant::Full, &[0]).unwrap().len(), 6);
        assert!(matrix_specs(Family::Har, &d(1), Variant::Full, &[0]).is_err());
        assert!(matrix_specs(Family::Har, &["a".into(), "a".into()], Variant::Full, &[0]).is_err());
    }

    #[test]
    fn sweep_ranges() {
        assert!(SweepParam::Lambda.validate(&[1e-4, 1.0]).is_ok());
        assert!(SweepParam::Zeta.validate(&[0.1, 0.99]).is_ok());
        assert!(SweepParam::Lambda.validate(&[1e-5, 1.0]).is_err());
        assert!(SweepParam::Zeta.validate(&[0.5, 0.3]).is_err());
        assert!(SweepParam::Zeta.validate(&[]).is_err());
    }

    #[test]
    fn spec_rejects_identical_domains() {
        let s = ScenarioSpec::new(Family::Synthetic, "source", "source", Variant::Full, vec![0]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn variants_change_only_their_setting() {
        let base = ExperimentConfig::defaults(Family::Synthetic);
        for v in Variant::ALL {
            let mut c = base.clone();
            v.configure(&mut c);
            assert_eq!(c.pretrain.cpc.weight == 0.0, v == Variant::NoSl, "{v}");
            assert_eq!(c.adapt.lambda == 0.0, v == Variant::NoTeacher, "{v}");
            assert_eq!(
                c.adapt.discriminator == DiscriminatorKind::FullyConnected,
                v == Variant::NoAr,
                "{v}"
            );
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn mean_std_is_the_sample_statistic() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn overrides_reach_the_resolved_config() {
        let runner = Runner::new(toml::Table::new());
        let spec =
            ScenarioSpec::new(Family::Har, "a", "b", Variant::NoTeacher, vec![0]).with_override("adapt.zeta", 0.5);
        let cfg = runner.resolve(&spec).unwrap();
        assert_eq!(cfg.dataset.family, Family::Har);
        assert_eq!(cfg.adapt.zeta, 0.5);
        assert_eq!(cfg.adapt.lambda, 0.0);
        assert_eq!(cfg.adapt.batch_size, 128);
    }
}
