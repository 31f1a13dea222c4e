use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    #[default]
    Ddim,
    EulerOde,
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Self::Ddim),
            "euler-ode" | "euler" => Ok(Self::EulerOde),
            _ => Err(Error::config("solver", format!("unknown solver `{s}` (ddim|euler-ode)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatentState {
    pub x: Tensor,
    pub t: usize,
}

/// Advance from grid index `t` to `t − 1` given the guided prediction ε̄.
/// Works on tracked tensors, so the sampler is differentiable end to end.
pub fn solver_step(kind: SolverKind, state: &LatentState, eps_bar: &Tensor, schedule: &NoiseSchedule) -> Result<LatentState> {
    let t = state.t;
    if t == 0 {
        return Err(Error::invalid("no solver step out of t = 0"));
    }
    if eps_bar.shape() != state.x.shape() {
        return Err(Error::ShapeMismatch {
            op: "solver_step",
            left: state.x.shape().to_vec(),
            right: eps_bar.shape().to_vec(),
        });
    }
    let now = schedule.level(t)?;
    let next = schedule.level(t - 1)?;
    let x = match kind {
        SolverKind::Ddim => {
            // x̂₀ = (x − σ ε̄)/α, re-noised to the next level with the same ε̄.
            let ratio = next.alpha() / now.alpha();
            let c_eps = next.sigma() - ratio * now.sigma();
            state.x.mul_scalar(ratio).add(&eps_bar.mul_scalar(c_eps))?
        }
        SolverKind::EulerOde => {
            // dx/dτ = −½β(τ)(x − ε̄/σ), explicit Euler with dτ = −1/T.
            let h = 1.0 / schedule.steps() as f64;
            let b = schedule.beta_at(now.tau);
            let c_x = 1.0 + 0.5 * h * b;
            let c_eps = -0.5 * h * b / now.sigma();
            state.x.mul_scalar(c_x).add(&eps_bar.mul_scalar(c_eps))?
        }
    };
    Ok(LatentState { x, t: t - 1 })
}
