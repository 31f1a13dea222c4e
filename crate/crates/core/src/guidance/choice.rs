use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const DEFAULT_STRENGTH: f64 = 7.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceChoice {
    Uncond,
    Cond,
    Cfg(f64),
}

impl GuidanceChoice {
    /// Score evaluations this choice costs.
    pub fn cost(&self) -> u64 {
        match self {
            Self::Uncond | Self::Cond => 1,
            Self::Cfg(_) => 2,
        }
    }
}

impl fmt::Display for GuidanceChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uncond => f.write_str("uncond"),
            Self::Cond => f.write_str("cond"),
            Self::Cfg(s) => write!(f, "cfg:{s}"),
        }
    }
}

impl FromStr for GuidanceChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncond" => Ok(Self::Uncond),
            "cond" => Ok(Self::Cond),
            _ => {
                let v = s
                    .strip_prefix("cfg:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::invalid(format!("bad guidance choice `{s}` (uncond|cond|cfg:<s>)")))?;
                Ok(Self::Cfg(v))
            }
        }
    }
}

impl Serialize for GuidanceChoice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GuidanceChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// ζ = (f_T, …, f_0): one choice per grid index, highest noise first. Only
/// f_T..f_1 drive a solver step; f_0 is carried for alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Policy {
    choices: Vec<GuidanceChoice>,
}

impl Policy {
    pub fn new(choices: Vec<GuidanceChoice>) -> Result<Self> {
        if choices.len() < 3 {
            return Err(Error::invalid("a policy needs T + 1 ≥ 3 entries"));
        }
        Ok(Self { choices })
    }

    pub fn uniform(steps: usize, choice: GuidanceChoice) -> Self {
        Self {
            choices: vec![choice; steps + 1],
        }
    }

    pub fn full_cfg(steps: usize, s: f64) -> Self {
        Self::uniform(steps, GuidanceChoice::Cfg(s))
    }

    /// m guided steps followed by conditional steps.
    pub fn truncated(steps: usize, guided: usize, s: f64) -> Self {
        Self {
            choices: (0..=steps)
                .map(|i| if i < guided { GuidanceChoice::Cfg(s) } else { GuidanceChoice::Cond })
                .collect(),
        }
    }

    /// T.
    pub fn steps(&self) -> usize {
        self.choices.len() - 1
    }

    pub fn choices(&self) -> &[GuidanceChoice] {
        &self.choices
    }

    /// Choice for grid index t.
    pub fn at(&self, t: usize) -> Option<GuidanceChoice> {
        self.steps().checked_sub(t).map(|i| self.choices[i])
    }

    /// NFE of a run: the executed steps t = T..1.
    pub fn nfe(&self) -> u64 {
        self.choices[..self.steps()].iter().map(GuidanceChoice::cost).sum()
    }

    /// Σ cost over all T + 1 entries.
    pub fn total_cost(&self) -> u64 {
        self.choices.iter().map(GuidanceChoice::cost).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("choices serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let choices: Vec<GuidanceChoice> = serde_json::from_str(s)?;
        Self::new(choices)
    }
}

pub fn nfe_of_policy(policy: &Policy) -> u64 {
    policy.nfe()
}
