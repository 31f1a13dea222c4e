use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Cosine,
    LinearBeta,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear-beta" | "linear" => Ok(Self::LinearBeta),
            _ => Err(Error::config("schedule", format!("unknown schedule `{s}` (cosine|linear-beta)"))),
        }
    }
}

pub const COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_TERMINAL_ALPHA_BAR: f64 = 0.0099;
const BETA_MIN: f64 = 0.1;
const BETA_MAX: f64 = 20.0;

/// Signal level at one point of the forward process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    /// Continuous time in [0, 1]; 1 is the noise end.
    pub tau: f64,
    pub alpha_bar: f64,
}

impl NoiseLevel {
    pub fn alpha(&self) -> f64 {
        self.alpha_bar.sqrt()
    }

    pub fn sigma(&self) -> f64 {
        (1.0 - self.alpha_bar).max(0.0).sqrt()
    }
}

/// Continuous variance-preserving process sampled on the grid τ_t = t/T.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    /// Cosine only: the raw cosine time reached at τ = 1.
    u_max: f64,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        Self::with_terminal(kind, steps, DEFAULT_TERMINAL_ALPHA_BAR)
    }

    /// `terminal` sets ᾱ at τ = 1 for the cosine schedule (ignored otherwise).
    pub fn with_terminal(kind: ScheduleKind, steps: usize, terminal: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config("T", format!("need at least 2 steps, got {steps}")));
        }
        if !(terminal > 0.0 && terminal < 1.0) {
            return Err(Error::config("terminal_alpha_bar", "must lie in (0, 1)"));
        }
        let s = COSINE_OFFSET;
        let theta0 = s / (1.0 + s) * FRAC_PI_2;
        let theta_max = (terminal.sqrt() * theta0.cos()).acos();
        let u_max = theta_max / FRAC_PI_2 * (1.0 + s) - s;
        let mut sched = Self {
            kind,
            steps,
            u_max,
            alpha_bar: Vec::new(),
        };
        sched.alpha_bar = (0..=steps).map(|t| sched.alpha_bar_at(t as f64 / steps as f64)).collect();
        Ok(sched)
    }

    /// The same continuous process on a different grid.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config("T", format!("need at least 2 steps, got {steps}")));
        }
        let mut sched = Self {
            steps,
            alpha_bar: Vec::new(),
            ..self.clone()
        };
        sched.alpha_bar = (0..=steps).map(|t| sched.alpha_bar_at(t as f64 / steps as f64)).collect();
        Ok(sched)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// T, the number of solver steps.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn tau(&self, t: usize) -> f64 {
        t as f64 / self.steps as f64
    }

    pub fn level(&self, t: usize) -> Result<NoiseLevel> {
        let alpha_bar = *self.alpha_bar.get(t).ok_or(Error::StepOutOfRange { t, max: self.steps })?;
        Ok(NoiseLevel {
            tau: self.tau(t),
            alpha_bar,
        })
    }

    pub fn alpha_bar_at(&self, tau: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => {
                let s = COSINE_OFFSET;
                let f = |u: f64| ((u + s) / (1.0 + s) * FRAC_PI_2).cos().powi(2);
                f(tau * self.u_max) / f(0.0)
            }
            ScheduleKind::LinearBeta => (-(BETA_MIN * tau + 0.5 * (BETA_MAX - BETA_MIN) * tau * tau)).exp(),
        }
    }

    pub fn level_at(&self, tau: f64) -> NoiseLevel {
        NoiseLevel {
            tau,
            alpha_bar: self.alpha_bar_at(tau),
        }
    }

    /// β(τ) = −d ln ᾱ / dτ.
    pub fn beta_at(&self, tau: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => {
                let s = COSINE_OFFSET;
                let theta = (tau * self.u_max + s) / (1.0 + s) * FRAC_PI_2;
                self.u_max * std::f64::consts::PI / (1.0 + s) * theta.tan()
            }
            ScheduleKind::LinearBeta => BETA_MIN + (BETA_MAX - BETA_MIN) * tau,
        }
    }
}
