//! Adversarial adaptation of the target encoder against a domain
//! discriminator, with teacher-guided class-conditional alignment.

use log::{debug, info, warn};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{DomainDataset, Split};
use crate::error::{Error, Result};
use crate::eval;
use crate::models::{Discriminator, DiscriminatorKind, Mode, ModelBundle, Role};
use crate::optim::{Adam, AdamConfig};
use crate::params::{BindMode, ParamStore};
use crate::rng;
use crate::teacher::{class_conditional_loss, combined_target_loss_tape, TeacherState};
use crate::tensor::Tensor;

const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub iterations: usize,
    /// Samples drawn from each domain per iteration.
    pub batch_size: usize,
    pub discriminator_optimizer: AdamConfig,
    pub encoder_optimizer: AdamConfig,
    /// Weight of the class-conditional loss.
    pub lambda: f64,
    /// Teacher momentum.
    pub alpha: f64,
    /// Pseudo-label confidence threshold.
    pub zeta: f64,
    pub discriminator: DiscriminatorKind,
    /// Also update the target classifier (frozen copy of the source one by default).
    pub train_classifier: bool,
    /// Log target validation accuracy every this many iterations (0: never).
    pub eval_every: usize,
    /// Verify after every step that each update touched only its own parameters.
    pub audit: bool,
    /// Normalize target features with batch statistics and let the target
    /// encoder's running statistics track the target domain; otherwise the
    /// source statistics stay fixed throughout adaptation.
    pub target_batch_stats: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 128,
            discriminator_optimizer: AdamConfig::new(1e-3, 3e-4),
            encoder_optimizer: AdamConfig::new(1e-3, 3e-4),
            lambda: 0.005,
            alpha: 0.996,
            zeta: 0.9,
            discriminator: DiscriminatorKind::Autoregressive,
            train_classifier: false,
            eval_every: 0,
            audit: false,
            target_batch_stats: true,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda {} must be ≥ 0", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(0.0..1.0).contains(&self.zeta) {
            return bad(format!("zeta {} outside [0, 1)", self.zeta));
        }
        if self.batch_size == 0 {
            return Err(Error::BatchTooSmall(0));
        }
        Ok(())
    }
}

fn clamp_probs(p: &[f64], what: &str) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Err(Error::EmptySplit(format!("{what} batch")));
    }
    if p.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("{what} discriminator output")));
    }
    let mut clamped = 0;
    let out = p
        .iter()
        .map(|&v| {
            let c = v.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            if c != v {
                clamped += 1;
            }
            c
        })
        .collect();
    if clamped > 0 {
        warn!("clamped {clamped} {what} discriminator outputs into [{PROB_FLOOR}, 1 - {PROB_FLOOR}]");
    }
    Ok(out)
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// `−mean log D(H_S) − mean log(1 − D(H_T))` from discriminator probabilities.
pub fn discriminator_loss(d_source: &[f64], d_target: &[f64]) -> Result<f64> {
    let s = clamp_probs(d_source, "source")?;
    let t = clamp_probs(d_target, "target")?;
    Ok(-mean(s.iter().map(|p| p.ln()), s.len()) - mean(t.iter().map(|p| (1.0 - p).ln()), t.len()))
}

/// `−mean log D(H_T)`: target features scored against the source label.
pub fn adversarial_loss(d_target: &[f64]) -> Result<f64> {
    let t = clamp_probs(d_target, "target")?;
    Ok(-mean(t.iter().map(|p| p.ln()), t.len()))
}

/// [`discriminator_loss`] on pre-sigmoid scores: `mean softplus(−l_S) + mean softplus(l_T)`.
pub fn discriminator_loss_tape(tape: &mut Tape, logits_source: Var, logits_target: Var) -> Result<Var> {
    let neg = tape.scale(logits_source, -1.0);
    let s = tape.softplus(neg);
    let s = tape.mean(s);
    let t = tape.softplus(logits_target);
    let t = tape.mean(t);
    tape.add(s, t)
}

/// [`adversarial_loss`] on pre-sigmoid scores: `mean softplus(−l_T)`.
pub fn adversarial_loss_tape(tape: &mut Tape, logits_target: Var) -> Var {
    let neg = tape.scale(logits_target, -1.0);
    let t = tape.softplus(neg);
    tape.mean(t)
}

/// One line of the adaptation log. `target_val_acc` uses target validation
/// labels and serves monitoring only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub iter: usize,
    pub loss_d: f64,
    pub loss_adv: f64,
    pub loss_ca: f64,
    pub retained_fraction: f64,
    pub mean_confidence: f64,
    pub target_val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub target: ModelBundle,
    pub teacher: TeacherState,
    pub discriminator: Discriminator,
    /// The frozen source bundle as used throughout the run.
    pub source: ModelBundle,
    pub log: Vec<AdaptRecord>,
}

fn snapshot(stores: &[&ParamStore]) -> Vec<Vec<Tensor>> {
    stores
        .iter()
        .map(|s| s.iter().map(|p| p.value.clone()).collect())
        .collect()
}

fn audit_unchanged(before: &[Vec<Tensor>], stores: &[&ParamStore], what: &str) -> Result<()> {
    if before != snapshot(stores).as_slice() {
        return Err(Error::Protocol(format!("{what} changed outside its own update")));
    }
    Ok(())
}

/// Target features outside the encoder step, normalized as in that step.
fn target_features(model: &ModelBundle, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = model.encoder.store().bind(&mut tape, BindMode::Constant);
    let x = tape.constant(x.clone());
    let (h, _) = model.encoder.forward(&mut tape, &p, x, mode)?;
    Ok(tape.value(h).clone())
}

fn sample(n: usize, m: usize, rng: &mut rng::Rng, pool: &[usize]) -> Vec<usize> {
    index::sample(rng, n, m.min(n)).into_iter().map(|i| pool[i]).collect()
}

/// Adapts a copy of `source_model` to the unlabeled `target` domain.
pub fn adapt_target(
    source_model: &ModelBundle,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if target.labeled {
        return Err(Error::Protocol(format!(
            "target domain `{}` is marked labeled; adaptation must not see target labels",
            target.name
        )));
    }
    let (src_pool, tgt_pool) = (source.split(Split::Train), target.split(Split::Train));
    if src_pool.is_empty() || tgt_pool.is_empty() {
        return Err(Error::EmptySplit("training split of source or target".into()));
    }
    let mut frozen_source = source_model.with_role(Role::Source);
    frozen_source.set_frozen(true);

    let mut student = source_model.with_role(Role::Target);
    student.context.store_mut().set_frozen(true);
    student.heads.store_mut().set_frozen(true);
    student.classifier.store_mut().set_frozen(!cfg.train_classifier);
    let mut teacher = TeacherState::new(&student, cfg.alpha)?;

    let mcfg = source_model.config();
    let mut disc = Discriminator::new(
        cfg.discriminator,
        &mcfg.discriminator,
        mcfg.feature_len()?,
        &mut rng::stream(cfg.seed, "adapt/discriminator-init"),
    )?;
    let mut d_opt = Adam::new(cfg.discriminator_optimizer, disc.store());
    let mut e_opt = Adam::new(cfg.encoder_optimizer, student.encoder.store());
    let mut c_opt = Adam::new(cfg.encoder_optimizer, student.classifier.store());
    let mut src_rng = rng::stream(cfg.seed, "adapt/source-batches");
    let mut tgt_rng = rng::stream(cfg.seed, "adapt/target-batches");
    let val = target.split(Split::Val);
    let bn_mode = if cfg.target_batch_stats {
        Mode::Train
    } else {
        Mode::Eval
    };

    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let xs = source.batch(&sample(src_pool.len(), cfg.batch_size, &mut src_rng, src_pool))?;
        let xt = target.batch(&sample(tgt_pool.len(), cfg.batch_size, &mut tgt_rng, tgt_pool))?;
        let hs = frozen_source.encoder.encode(&xs)?;

        // discriminator step on frozen features of both domains
        let before = cfg.audit.then(|| snapshot(&student.stores()));
        let mut tape = Tape::new();
        let pd = disc.store().bind(&mut tape, BindMode::Train);
        let hs_v = tape.constant(hs);
        let ht = target_features(&student, &xt, bn_mode)?;
        let ht_v = tape.constant(ht);
        let ls = disc.logits(&mut tape, &pd, hs_v)?;
        let lt = disc.logits(&mut tape, &pd, ht_v)?;
        let loss_d = discriminator_loss_tape(&mut tape, ls, lt)?;
        let loss_d_value = tape.value(loss_d).item();
        let grads = tape.backward(loss_d)?;
        d_opt.step(disc.store_mut(), &pd.grads(&grads))?;
        if let Some(before) = before {
            audit_unchanged(&before, &student.stores(), "target bundle")?;
        }

        // encoder step: fool the discriminator, agree with confident teacher labels
        let before = cfg.audit.then(|| snapshot(&[disc.store()]));
        let pseudo = teacher.confident_pseudo_labels(&xt, cfg.zeta)?;
        let mut tape = Tape::new();
        let pe = student.encoder.store().bind(&mut tape, BindMode::Train);
        let pc = student.classifier.store().bind(&mut tape, BindMode::Train);
        let pd = disc.store().bind(&mut tape, BindMode::Constant);
        let x = tape.constant(xt);
        let (ht, stats) = student.encoder.forward(&mut tape, &pe, x, bn_mode)?;
        let lt = disc.logits(&mut tape, &pd, ht)?;
        let adv = adversarial_loss_tape(&mut tape, lt);
        let logits = student.classifier.forward(&mut tape, &pc, ht)?;
        let ca = class_conditional_loss(&mut tape, logits, &pseudo)?;
        let total = combined_target_loss_tape(&mut tape, adv, ca, cfg.lambda)?;
        let (adv_value, ca_value) = (tape.value(adv).item(), tape.value(ca).item());
        if !tape.value(total).item().is_finite() || !loss_d_value.is_finite() {
            return Err(Error::Diverged {
                stage: "adapt".into(),
                detail: format!("iteration {iter}: L_D {loss_d_value} L_adv {adv_value} L_ca {ca_value}"),
            });
        }
        let grads = tape.backward(total)?;
        e_opt.step(student.encoder.store_mut(), &pe.grads(&grads))?;
        student.encoder.absorb_stats(&stats)?;
        if cfg.train_classifier {
            c_opt.step(student.classifier.store_mut(), &pc.grads(&grads))?;
        }
        student.step += 1;
        if let Some(before) = before {
            audit_unchanged(&before, &[disc.store()], "discriminator")?;
        }

        let before = cfg.audit.then(|| teacher.clone());
        teacher.ema_update(&student)?;
        if let Some(mut expected) = before {
            // the teacher may move only by the EMA rule
            let alpha = expected.alpha();
            for (t, s) in expected_stores(&mut expected).into_iter().zip(student.stores()) {
                crate::teacher::ema_update_store(t, s, alpha)?;
            }
            if snapshot(&expected.bundle().stores()) != snapshot(&teacher.bundle().stores()) {
                return Err(Error::Protocol(
                    "teacher moved by something other than its EMA update".into(),
                ));
            }
        }

        let target_val_acc =
            if cfg.eval_every > 0 && !val.is_empty() && (iter % cfg.eval_every == 0 || iter + 1 == cfg.iterations) {
                Some(eval::score(&student, target, val)?.accuracy)
            } else {
                None
            };
        let rec = AdaptRecord {
            iter,
            loss_d: loss_d_value,
            loss_adv: adv_value,
            loss_ca: ca_value,
            retained_fraction: pseudo.retained_fraction(),
            mean_confidence: pseudo.mean_confidence(),
            target_val_acc,
        };
        debug!("adapt {rec:?}");
        log.push(rec);
    }
    if frozen_source
        .stores()
        .map(|s| s.iter().map(|p| p.value.clone()).collect::<Vec<_>>())
        != source_model
            .stores()
            .map(|s| s.iter().map(|p| p.value.clone()).collect::<Vec<_>>())
    {
        return Err(Error::Protocol("frozen source bundle changed during adaptation".into()));
    }
    info!(
        "adapted `{}` → `{}` for {} iterations",
        source.name, target.name, cfg.iterations
    );
    Ok(AdaptOutcome {
        target: student,
        teacher,
        discriminator: disc,
        source: frozen_source,
        log,
    })
}

fn expected_stores(t: &mut TeacherState) -> [&mut ParamStore; 4] {
    t.bundle_mut().stores_mut()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert!((discriminator_loss(&[0.5; 3], &[0.5; 2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let l = discriminator_loss(&[0.9, 0.9], &[0.1]).unwrap();
        assert!((l + 2.0 * 0.9f64.ln()).abs() < 1e-12);
        assert!((l - 0.21072).abs() < 1e-5);
        assert_eq!(adversarial_loss(&[1.0 - PROB_FLOOR]).unwrap(), -(1.0 - PROB_FLOOR).ln());
        assert!(adversarial_loss(&[1.0]).unwrap() < 1e-6);
        assert!((adversarial_loss(&[0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((adversarial_loss(&[0.2, 0.8]).unwrap() - 0.91629).abs() < 1e-5);
        assert!(discriminator_loss(&[], &[0.5]).is_err());
    }

    #[test]
    fn label_symmetry() {
        let s = [0.3, 0.8, 0.6];
        let t = [0.1, 0.45];
        let flip = |v: &[f64]| v.iter().map(|p| 1.0 - p).collect::<Vec<_>>();
        let a = discriminator_loss(&s, &t).unwrap();
        let b = discriminator_loss(&flip(&t), &flip(&s)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn tape_forms_match_probability_forms() {
        let ls = [0.3, -1.2, 2.0];
        let lt = [-0.4, 0.9];
        let sig = |v: &f64| 1.0 / (1.0 + (-v).exp());
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[3], ls.to_vec()).unwrap());
        let b = tape.constant(Tensor::new(&[2], lt.to_vec()).unwrap());
        let d = discriminator_loss_tape(&mut tape, a, b).unwrap();
        let g = adversarial_loss_tape(&mut tape, b);
        let ps: Vec<f64> = ls.iter().map(sig).collect();
        let pt: Vec<f64> = lt.iter().map(sig).collect();
        assert!((tape.value(d).item() - discriminator_loss(&ps, &pt).unwrap()).abs() < 1e-12);
        assert!((tape.value(g).item() - adversarial_loss(&pt).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn config_ranges() {
        assert!(AdaptConfig {
            zeta: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdaptConfig {
            alpha: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdaptConfig {
            lambda: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        AdaptConfig::default().validate().unwrap();
    }
}
