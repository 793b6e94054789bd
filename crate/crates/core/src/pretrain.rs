//! Source pretraining: supervised cross-entropy plus contrastive prediction
//! of future latents from a recurrent context.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{DomainDataset, Split};
use crate::error::{Error, Result};
use crate::eval;
use crate::models::{Mode, ModelBundle, PredictionHeads, Role};
use crate::optim::{Adam, AdamConfig};
use crate::params::{BindMode, Bound};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpcConfig {
    /// Weight of the contrastive term; `0` gives plain supervised training.
    pub weight: f64,
}

impl Default for CpcConfig {
    fn default() -> Self {
        Self { weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub cpc: CpcConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            optimizer: AdamConfig::new(1e-3, 3e-4),
            cpc: CpcConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if self.epochs == 0 || !(self.optimizer.lr >= 0.0) || !(self.cpc.weight >= 0.0) {
            return Err(Error::Config(format!("invalid pretraining config {self:?}")));
        }
        Ok(())
    }
}

/// `exp(hᵀz)`.
pub fn similarity_score(h: &[f64], z: &[f64]) -> Result<f64> {
    if h.len() != z.len() {
        return Err(Error::shape("similarity_score", format!("{} vs {}", h.len(), z.len())));
    }
    if h.iter().chain(z).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity_score input".into()));
    }
    Ok(h.iter().zip(z).map(|(a, b)| a * b).sum::<f64>().exp())
}

/// Contrastive loss for one offset: `predicted` and `future` are `[B, C_f]`;
/// row `i` scores its prediction against every sample's future latent, with
/// its own future as the positive.
pub fn cpc_offset_loss(tape: &mut Tape, predicted: Var, future: Var) -> Result<Var> {
    let b = tape.shape(predicted)[0];
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let logits = tape.matmul(predicted, future, true)?;
    let targets: Vec<Option<usize>> = (0..b).map(Some).collect();
    tape.cross_entropy(logits, &targets)
}

/// Contrastive loss averaged over offsets `1..=K_h` from context `r: [B, hidden]`.
pub fn cpc_loss(tape: &mut Tape, heads: &PredictionHeads, p: &Bound, r: Var, futures: &[Var]) -> Result<Var> {
    if futures.is_empty() || futures.len() > heads.horizon() {
        return Err(Error::HorizonOutOfRange {
            k: futures.len(),
            horizon: heads.horizon(),
        });
    }
    let mut total: Option<Var> = None;
    for (i, &f) in futures.iter().enumerate() {
        let z = heads.predict(tape, p, i + 1, r)?;
        let l = cpc_offset_loss(tape, z, f)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.expect("at least one offset");
    Ok(tape.scale(total, 1.0 / futures.len() as f64))
}

/// Value of the contrastive loss for explicit predictions and futures,
/// one `[B, C_f]` pair per offset.
pub fn cpc_loss_value(predicted: &[Tensor], futures: &[Tensor]) -> Result<f64> {
    if predicted.len() != futures.len() || predicted.is_empty() {
        return Err(Error::shape(
            "cpc_loss",
            format!("{} predictions, {} futures", predicted.len(), futures.len()),
        ));
    }
    let mut tape = Tape::new();
    let mut sum = 0.0;
    for (z, h) in predicted.iter().zip(futures) {
        let (z, h) = (tape.constant(z.clone()), tape.constant(h.clone()));
        let l = cpc_offset_loss(&mut tape, z, h)?;
        sum += tape.value(l).item();
    }
    Ok(sum / predicted.len() as f64)
}

/// Mean cross-entropy of `[B, C]` logits against labels.
pub fn supervised_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    tape.cross_entropy(logits, &targets)
}

pub fn supervised_loss_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = supervised_loss(&mut tape, l, labels)?;
    Ok(tape.value(loss).item())
}

/// Loss terms of one pretraining batch, recorded on `tape`.
pub struct BatchLosses {
    pub total: Var,
    pub supervised: f64,
    pub cpc: f64,
}

/// Bound parameters of the four trainable parts of a bundle.
pub struct BundleBinding {
    pub encoder: Bound,
    pub context: Bound,
    pub heads: Bound,
    pub classifier: Bound,
}

impl BundleBinding {
    pub fn new(tape: &mut Tape, bundle: &ModelBundle, mode: BindMode) -> Self {
        Self {
            encoder: bundle.encoder.store().bind(tape, mode),
            context: bundle.context.store().bind(tape, mode),
            heads: bundle.heads.store().bind(tape, mode),
            classifier: bundle.classifier.store().bind(tape, mode),
        }
    }

    fn all(&self) -> [&Bound; 4] {
        [&self.encoder, &self.context, &self.heads, &self.classifier]
    }
}

/// Joint objective `L_sup + w · L_cpc` on one batch; `t` is the last context
/// step (ignored when the weight is zero).
pub fn joint_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    p: &BundleBinding,
    x: &Tensor,
    labels: &[usize],
    t: usize,
    cpc_weight: f64,
    mode: Mode,
) -> Result<(BatchLosses, crate::models::BnBatchStats)> {
    let x = tape.constant(x.clone());
    let (h, stats) = bundle.encoder.forward(tape, &p.encoder, x, mode)?;
    let logits = bundle.classifier.forward(tape, &p.classifier, h)?;
    let sup = supervised_loss(tape, logits, labels)?;
    let supervised = tape.value(sup).item();
    if cpc_weight == 0.0 {
        return Ok((
            BatchLosses {
                total: sup,
                supervised,
                cpc: 0.0,
            },
            stats,
        ));
    }
    let horizon = bundle.heads.horizon();
    let len = tape.shape(h)[2];
    if t + horizon >= len {
        return Err(Error::shape(
            "cpc_loss",
            format!("t = {t} with horizon {horizon} exceeds K′ = {len}"),
        ));
    }
    let r = bundle.context.summarize(tape, &p.context, h, t + 1)?;
    let futures: Vec<Var> = (1..=horizon).map(|k| tape.select(h, 2, t + k)).collect::<Result<_>>()?;
    let cpc = cpc_loss(tape, &bundle.heads, &p.heads, r, &futures)?;
    let cpc_value = tape.value(cpc).item();
    let weighted = tape.scale(cpc, cpc_weight);
    let total = tape.add(sup, weighted)?;
    Ok((
        BatchLosses {
            total,
            supervised,
            cpc: cpc_value,
        },
        stats,
    ))
}

/// One line of the pretraining log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub sup_loss: f64,
    pub cpc_loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Bundle from the epoch with the best validation accuracy.
    pub bundle: ModelBundle,
    pub best_epoch: usize,
    pub curves: Vec<EpochRecord>,
}

/// Validation accuracy (percent) and mean cross-entropy; NaN without a split.
fn validate(bundle: &ModelBundle, data: &DomainDataset, idx: &[usize]) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let labels = data.evaluation_labels(idx)?;
    let (mut hits, mut loss) = (0usize, 0.0);
    for (chunk, truth) in idx.chunks(256).zip(labels.chunks(256)) {
        let logits = bundle.logits(&data.batch(chunk)?)?;
        loss += supervised_loss_value(&logits, truth)? * chunk.len() as f64;
        let c = logits.dim(1);
        hits += logits
            .data()
            .chunks(c)
            .zip(truth)
            .filter(|(row, &t)| eval::argmax(row) == t)
            .count();
    }
    Ok((100.0 * hits as f64 / idx.len() as f64, loss / idx.len() as f64))
}

/// Splits shuffled indices into batches, folding a trailing singleton into
/// the previous batch so every batch has at least two samples.
fn batches(indices: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = indices.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

pub fn pretrain_source(bundle: ModelBundle, source: &DomainDataset, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if !source.labeled {
        return Err(Error::Protocol(format!(
            "pretraining needs labeled data, `{}` is unlabeled",
            source.name
        )));
    }
    let train = source.split(Split::Train).to_vec();
    if train.len() < 2 {
        return Err(Error::BatchTooSmall(train.len()));
    }
    let val = source.split(Split::Val).to_vec();
    let mut bundle = bundle;
    bundle.role = Role::Source;
    bundle.set_frozen(false);
    let mut opts: Vec<Adam> = bundle.stores().iter().map(|s| Adam::new(cfg.optimizer, s)).collect();
    let mut order_rng = rng::stream(cfg.seed, "pretrain/order");
    let mut t_rng = rng::stream(cfg.seed, "pretrain/t");
    let len = bundle.config().feature_len()?;
    let horizon = bundle.heads.horizon();
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, usize, ModelBundle)> = None;
    let mut order = train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut sup_sum, mut cpc_sum, mut n) = (0.0, 0.0, 0usize);
        for (b, idx) in batches(&order, cfg.batch_size).iter().enumerate() {
            let x = source.batch(idx)?;
            let labels = source.training_labels(idx)?;
            let t = if cfg.cpc.weight > 0.0 {
                t_rng.random_range(0..len - horizon)
            } else {
                0
            };
            let mut tape = Tape::new();
            let p = BundleBinding::new(&mut tape, &bundle, BindMode::Train);
            let (losses, stats) = joint_loss(&mut tape, &bundle, &p, &x, &labels, t, cfg.cpc.weight, Mode::Train)?;
            let total = tape.value(losses.total).item();
            if !total.is_finite() {
                return Err(Error::Diverged {
                    stage: "pretrain".into(),
                    detail: format!(
                        "epoch {epoch} batch {b}: supervised {} contrastive {}",
                        losses.supervised, losses.cpc
                    ),
                });
            }
            let grads = tape.backward(losses.total)?;
            for ((opt, store), bound) in opts.iter_mut().zip(bundle.stores_mut()).zip(p.all()) {
                opt.step(store, &bound.grads(&grads))?;
            }
            bundle.encoder.absorb_stats(&stats)?;
            bundle.step += 1;
            sup_sum += losses.supervised;
            cpc_sum += losses.cpc;
            n += 1;
        }
        let (val_acc, val_loss) = validate(&bundle, source, &val)?;
        let rec = EpochRecord {
            epoch,
            sup_loss: sup_sum / n as f64,
            cpc_loss: cpc_sum / n as f64,
            val_acc,
            val_loss,
        };
        debug!("pretrain {rec:?}");
        curves.push(rec);
        // accuracy ties go to the lower validation loss
        if best
            .as_ref()
            .is_none_or(|(acc, loss, _, _)| val_acc > *acc || (val_acc == *acc && val_loss < *loss))
        {
            best = Some((val_acc, val_loss, epoch, bundle.clone()));
        }
    }
    let (acc, _, best_epoch, bundle) = best.expect("at least one epoch");
    info!(
        "pretraining on `{}` selected epoch {best_epoch} (val acc {acc:.2}%)",
        source.name
    );
    Ok(PretrainOutcome {
        bundle,
        best_epoch,
        curves,
    })
}
