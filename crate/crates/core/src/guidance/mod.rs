//! Per-step guidance choices, score combinations and step controllers.

mod choice;
mod combine;
mod controller;

pub use choice::{nfe_of_policy, GuidanceChoice, Policy, DEFAULT_STRENGTH};
pub use combine::{cfg_score, cosine_gamma, negative_prompt_cfg, pix2pix_score};
pub use controller::{AgConfig, AgController, Controller, EditController, PolicyController, StepOutput};
#[allow(unused_imports)]
pub(crate) use controller::eval_choice;
