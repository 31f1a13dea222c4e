//! ε-prediction backends behind one evaluation contract, plus NFE accounting.

mod gmm;
mod mlp;

pub use gmm::{AnalyticGmm, Component, GmmSpec};
pub use mlp::{train_mlp, MlpConfig, MlpScoreNet, TrainConfig, TrainOutcome};

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseLevel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Conditioning token. `class: None` is the null (unconditional) token; `edit`
/// is the second channel used by the triple-score editing combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Condition {
    pub class: Option<usize>,
    pub edit: Option<usize>,
}

impl Condition {
    pub const NULL: Condition = Condition {
        class: None,
        edit: None,
    };

    pub fn class(c: usize) -> Self {
        Self {
            class: Some(c),
            edit: None,
        }
    }

    pub fn with_edit(self, i: usize) -> Self {
        Self {
            edit: Some(i),
            ..self
        }
    }

    pub fn is_null(&self) -> bool {
        self.class.is_none() && self.edit.is_none()
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.class {
            Some(c) => write!(f, "{c}")?,
            None => write!(f, "null")?,
        }
        if let Some(i) = self.edit {
            write!(f, "|{i}")?;
        }
        Ok(())
    }
}

/// A network (or oracle) predicting ε from a noisy latent. Implementations are
/// read-only and may be shared across threads.
pub trait ScoreBackend: Send + Sync {
    fn dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// ε for `x` of shape `[dim]` or `[batch, dim]`. When `x` is tracked the
    /// result is differentiable w.r.t. `x`.
    fn predict(&self, x: &Tensor, level: NoiseLevel, cond: Condition) -> Result<Tensor>;

    fn check_condition(&self, cond: Condition) -> Result<()> {
        let classes = self.num_classes();
        for c in [cond.class, cond.edit].into_iter().flatten() {
            if c >= classes {
                return Err(Error::UnknownClass { class: c, classes });
            }
        }
        Ok(())
    }
}

/// Number of score evaluations, owned by whoever runs the experiment.
#[derive(Debug, Default)]
pub struct NfeCounter(AtomicU64);

impl NfeCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

/// A backend bound to a schedule and an NFE counter. Every guided sampler
/// goes through [`ScoreModel::eval_score`], so the counter sees every call.
#[derive(Clone, Copy)]
pub struct ScoreModel<'a> {
    pub backend: &'a dyn ScoreBackend,
    pub schedule: &'a NoiseSchedule,
    pub nfe: &'a NfeCounter,
}

impl<'a> ScoreModel<'a> {
    pub fn new(backend: &'a dyn ScoreBackend, schedule: &'a NoiseSchedule, nfe: &'a NfeCounter) -> Self {
        Self {
            backend,
            schedule,
            nfe,
        }
    }

    pub fn dim(&self) -> usize {
        self.backend.dim()
    }

    /// One network evaluation on a single latent at grid index `t`.
    pub fn eval_score(&self, x: &Tensor, t: usize, cond: Condition) -> Result<Tensor> {
        let d = self.backend.dim();
        if x.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "eval_score",
                left: x.shape().to_vec(),
                right: vec![d],
            });
        }
        let level = self.schedule.level(t)?;
        self.backend.check_condition(cond)?;
        let eps = self.backend.predict(x, level, cond)?;
        self.nfe.bump();
        Ok(eps)
    }
}
