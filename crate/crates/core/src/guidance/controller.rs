use serde::{Deserialize, Serialize};

use super::{cfg_score, cosine_gamma, pix2pix_score, GuidanceChoice, Policy};
use crate::error::{Error, Result};
use crate::score::{Condition, ScoreModel};
use crate::tensor::Tensor;

/// What a controller produced for one step: the solver input ε̄ plus the raw
/// branches it evaluated.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub eps_bar: Tensor,
    pub eps_cond: Option<Tensor>,
    pub eps_uncond: Option<Tensor>,
    pub gamma: Option<f64>,
    pub label: String,
}

/// Decides, step by step, which score evaluations to make and how to combine
/// them. One instance per generation run.
pub trait Controller {
    fn step(&mut self, model: &ScoreModel, x: &Tensor, t: usize, cond: Condition) -> Result<StepOutput>;

    /// The discrete policy followed so far, when the controller has one.
    fn emitted(&self) -> Option<Policy> {
        None
    }
}

/// Evaluate a discrete choice. `uncond` is the condition used for the
/// unconditional branch of CFG (the null token, or a negative class).
pub(crate) fn eval_choice(
    model: &ScoreModel,
    x: &Tensor,
    t: usize,
    cond: Condition,
    uncond: Condition,
    choice: GuidanceChoice,
) -> Result<StepOutput> {
    let label = choice.to_string();
    match choice {
        GuidanceChoice::Uncond => {
            let e = model.eval_score(x, t, Condition::NULL)?;
            Ok(StepOutput {
                eps_bar: e.clone(),
                eps_cond: None,
                eps_uncond: Some(e),
                gamma: None,
                label,
            })
        }
        GuidanceChoice::Cond => {
            let e = model.eval_score(x, t, cond)?;
            Ok(StepOutput {
                eps_bar: e.clone(),
                eps_cond: Some(e),
                eps_uncond: None,
                gamma: None,
                label,
            })
        }
        GuidanceChoice::Cfg(s) => {
            let ec = model.eval_score(x, t, cond)?;
            let eu = model.eval_score(x, t, uncond)?;
            let gamma = cosine_gamma(&ec, &eu).ok();
            Ok(StepOutput {
                eps_bar: cfg_score(&eu, &ec, s)?,
                eps_cond: Some(ec),
                eps_uncond: Some(eu),
                gamma,
                label,
            })
        }
    }
}

/// Replays a fixed policy.
#[derive(Debug, Clone)]
pub struct PolicyController {
    policy: Policy,
    negative: Condition,
}

impl PolicyController {
    pub fn new(policy: Policy) -> Self {
        Self {
            policy,
            negative: Condition::NULL,
        }
    }

    /// Use `negative` in place of the null token on CFG steps.
    pub fn with_negative(mut self, negative: Condition) -> Self {
        self.negative = negative;
        self
    }
}

impl Controller for PolicyController {
    fn step(&mut self, model: &ScoreModel, x: &Tensor, t: usize, cond: Condition) -> Result<StepOutput> {
        if self.policy.steps() < model.schedule.steps() {
            return Err(Error::ControllerExhausted(self.policy.steps() + 1));
        }
        if self.policy.steps() > model.schedule.steps() {
            return Err(Error::invalid(format!(
                "policy has {} steps, schedule {}",
                self.policy.steps(),
                model.schedule.steps()
            )));
        }
        let choice = self.policy.at(t).ok_or(Error::ControllerExhausted(t))?;
        eval_choice(model, x, t, cond, self.negative, choice)
    }

    fn emitted(&self) -> Option<Policy> {
        Some(self.policy.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgConfig {
    /// Switch once γ_t > gamma_bar. Values above 1 (e.g. ∞) never switch.
    pub gamma_bar: f64,
    /// Permanent switch. Without it both branches are still evaluated every
    /// step and the cheaper update is used only where γ_t > gamma_bar — a
    /// diagnostic mode with no NFE savings.
    pub latch: bool,
}

impl AgConfig {
    pub fn new(gamma_bar: f64) -> Self {
        Self { gamma_bar, latch: true }
    }

    pub fn never() -> Self {
        Self::new(f64::INFINITY)
    }
}

/// Adaptive Guidance: CFG until the branches align, then conditional only.
#[derive(Debug, Clone)]
pub struct AgController {
    config: AgConfig,
    s: f64,
    negative: Condition,
    latched: bool,
    followed: Vec<GuidanceChoice>,
}

impl AgController {
    pub fn new(config: AgConfig, s: f64) -> Self {
        Self {
            config,
            s,
            negative: Condition::NULL,
            latched: false,
            followed: Vec::new(),
        }
    }

    pub fn with_negative(mut self, negative: Condition) -> Self {
        self.negative = negative;
        self
    }

    pub fn latched(&self) -> bool {
        self.latched
    }

    /// Number of CFG steps taken so far.
    pub fn guided_steps(&self) -> usize {
        self.followed.iter().filter(|c| matches!(c, GuidanceChoice::Cfg(_))).count()
    }
}

impl Controller for AgController {
    fn step(&mut self, model: &ScoreModel, x: &Tensor, t: usize, cond: Condition) -> Result<StepOutput> {
        if self.latched {
            self.followed.push(GuidanceChoice::Cond);
            return eval_choice(model, x, t, cond, self.negative, GuidanceChoice::Cond);
        }
        let mut out = eval_choice(model, x, t, cond, self.negative, GuidanceChoice::Cfg(self.s))?;
        let aligned = out.gamma.is_some_and(|g| g > self.config.gamma_bar);
        if self.config.latch {
            self.followed.push(GuidanceChoice::Cfg(self.s));
            self.latched = aligned;
        } else if aligned {
            // Both branches were paid for; only the update changes.
            out.eps_bar = out.eps_cond.clone().expect("cfg evaluates the conditional branch");
            out.label = "cond*".into();
            self.followed.push(GuidanceChoice::Cfg(1.0));
        } else {
            self.followed.push(GuidanceChoice::Cfg(self.s));
        }
        Ok(out)
    }

    fn emitted(&self) -> Option<Policy> {
        let mut choices = self.followed.clone();
        choices.push(if self.latched { GuidanceChoice::Cond } else { GuidanceChoice::Cfg(self.s) });
        Policy::new(choices).ok()
    }
}

/// Triple-score editing guidance with an adaptive switch: runs the
/// three-evaluation combination until all pairwise cosines exceed γ̄, then
/// follows the (c, I) branch alone.
#[derive(Debug, Clone)]
pub struct EditController {
    pub s_c: f64,
    pub s_i: f64,
    pub gamma_bar: f64,
    latched: bool,
    guided: usize,
}

impl EditController {
    pub fn new(s_c: f64, s_i: f64, gamma_bar: f64) -> Self {
        Self {
            s_c,
            s_i,
            gamma_bar,
            latched: false,
            guided: 0,
        }
    }

    pub fn guided_steps(&self) -> usize {
        self.guided
    }
}

impl Controller for EditController {
    fn step(&mut self, model: &ScoreModel, x: &Tensor, t: usize, cond: Condition) -> Result<StepOutput> {
        let edit = cond
            .edit
            .ok_or_else(|| Error::invalid("editing guidance needs a condition with an edit channel"))?;
        let e_ci = model.eval_score(x, t, cond)?;
        if self.latched {
            return Ok(StepOutput {
                eps_bar: e_ci.clone(),
                eps_cond: Some(e_ci),
                eps_uncond: None,
                gamma: None,
                label: "cond".into(),
            });
        }
        let e_nn = model.eval_score(x, t, Condition::NULL)?;
        let e_ni = model.eval_score(
            x,
            t,
            Condition {
                class: None,
                edit: Some(edit),
            },
        )?;
        let stat = [
            cosine_gamma(&e_ci, &e_nn),
            cosine_gamma(&e_ci, &e_ni),
            cosine_gamma(&e_ni, &e_nn),
        ]
        .into_iter()
        .collect::<Result<Vec<f64>>>()
        .ok()
        .map(|g| g.into_iter().fold(f64::INFINITY, f64::min));
        self.guided += 1;
        self.latched = stat.is_some_and(|g| g > self.gamma_bar);
        Ok(StepOutput {
            eps_bar: pix2pix_score(&e_nn, &e_ci, &e_ni, self.s_c, self.s_i)?,
            eps_cond: Some(e_ci),
            eps_uncond: Some(e_nn),
            gamma: stat,
            label: format!("edit:{}:{}", self.s_c, self.s_i),
        })
    }
}
