//! Exponential-moving-average teacher, confidence-filtered pseudo-labels and
//! the class-conditional alignment loss.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{argmax, softmax};
use crate::models::{ModelBundle, Role};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `ψ ← α·ψ + (1 − α)·θ` for every entry of `teacher`.
pub fn ema_update_store(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(Error::shape(
            "ema_update",
            format!("`{}` and `{}` differ in layout", teacher.name(), student.name()),
        ));
    }
    for i in 0..teacher.len() {
        let mixed: Vec<f64> = teacher
            .value(i)
            .data()
            .iter()
            .zip(student.value(i).data())
            .map(|(&psi, &theta)| alpha * psi + (1.0 - alpha) * theta)
            .collect();
        let shape = teacher.value(i).shape().to_vec();
        teacher.set_value(i, Tensor::new(&shape, mixed)?)?;
    }
    Ok(())
}

/// Teacher parameters; frozen against gradients, moved only by EMA.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    bundle: ModelBundle,
    alpha: f64,
    updates: u64,
}

impl TeacherState {
    /// Starts as a copy of `student`.
    pub fn new(student: &ModelBundle, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("teacher momentum {alpha} outside [0, 1]")));
        }
        let mut bundle = student.with_role(Role::Teacher);
        bundle.set_frozen(true);
        Ok(Self {
            bundle,
            alpha,
            updates: 0,
        })
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub(crate) fn bundle_mut(&mut self) -> &mut ModelBundle {
        &mut self.bundle
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn ema_update(&mut self, student: &ModelBundle) -> Result<()> {
        for (t, s) in self.bundle.stores_mut().into_iter().zip(student.stores()) {
            ema_update_store(t, s, self.alpha)?;
        }
        self.updates += 1;
        Ok(())
    }

    /// Eval-mode teacher predictions filtered at threshold `zeta`.
    pub fn confident_pseudo_labels(&self, x: &Tensor, zeta: f64) -> Result<PseudoLabelBatch> {
        let probs = softmax(&self.bundle.logits(x)?);
        Ok(PseudoLabelBatch::from_probabilities(&probs, zeta))
    }
}

/// Retained samples of one batch with their teacher labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub threshold: f64,
    pub batch_size: usize,
}

impl PseudoLabelBatch {
    /// Keeps row `i` iff its largest probability strictly exceeds `zeta`.
    pub fn from_probabilities(probs: &Tensor, zeta: f64) -> Self {
        let (b, c) = (probs.dim(0), probs.dim(1));
        let mut out = Self {
            indices: Vec::new(),
            labels: Vec::new(),
            confidences: Vec::new(),
            threshold: zeta,
            batch_size: b,
        };
        for (i, row) in probs.data().chunks(c).enumerate() {
            let label = argmax(row);
            if row[label] > zeta {
                out.indices.push(i);
                out.labels.push(label);
                out.confidences.push(row[label]);
            }
        }
        out
    }

    pub fn retained_fraction(&self) -> f64 {
        if self.batch_size == 0 {
            0.0
        } else {
            self.indices.len() as f64 / self.batch_size as f64
        }
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.confidences.is_empty() {
            0.0
        } else {
            self.confidences.iter().sum::<f64>() / self.confidences.len() as f64
        }
    }

    /// Per-row targets: the pseudo label for retained rows, `None` elsewhere.
    pub fn targets(&self, rows: usize) -> Result<Vec<Option<usize>>> {
        let mut t = vec![None; rows];
        for (&i, &l) in self.indices.iter().zip(&self.labels) {
            *t.get_mut(i).ok_or(Error::IndexOutOfRange { index: i, len: rows })? = Some(l);
        }
        Ok(t)
    }
}

/// Mean cross-entropy of `logits` `[B, C]` over retained rows; zero when
/// nothing is retained.
pub fn class_conditional_loss(tape: &mut Tape, logits: Var, pl: &PseudoLabelBatch) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    let targets = pl.targets(rows)?;
    tape.cross_entropy(logits, &targets)
}

pub fn class_conditional_loss_value(logits: &Tensor, pl: &PseudoLabelBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = class_conditional_loss(&mut tape, l, pl)?;
    Ok(tape.value(loss).item())
}

/// `adv + λ·ca`.
pub fn combined_target_loss(adv: f64, ca: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(adv + lambda * ca)
}

pub fn combined_target_loss_tape(tape: &mut Tape, adv: Var, ca: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let weighted = tape.scale(ca, lambda);
    tape.add(adv, weighted)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!(
            "class-conditional weight {lambda} must be a finite value ≥ 0"
        )));
    }
    Ok(())
}
