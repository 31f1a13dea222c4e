use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{solver_step, LatentState, NoiseSchedule, SolverKind};
use crate::error::{Error, Result};
use crate::guidance::Controller;
use crate::score::{Condition, NfeCounter, ScoreBackend, ScoreModel};
use crate::tensor::Tensor;

/// One executed solver step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub v: u32,
    pub t: usize,
    pub choice: String,
    pub x: Vec<f64>,
    pub eps_cond: Option<Vec<f64>>,
    pub eps_uncond: Option<Vec<f64>>,
    pub eps_bar: Vec<f64>,
    pub gamma: Option<f64>,
    /// Evaluations consumed so far in this run, including this step.
    pub nfe: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn total_nfe(&self) -> u64 {
        self.steps.last().map_or(0, |s| s.nfe)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in &self.steps {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        let steps = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let rec: StepRecord = serde_json::from_str(l)?;
                if rec.v != 1 {
                    return Err(Error::invalid(format!("unsupported trajectory schema v{}", rec.v)));
                }
                Ok(rec)
            })
            .collect::<Result<_>>()?;
        Ok(Self { steps })
    }
}

/// x_T ~ N(0, I) from a per-seed stream.
pub fn initial_noise(dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
}

pub fn generate(
    model: &ScoreModel,
    solver: SolverKind,
    controller: &mut dyn Controller,
    cond: Condition,
    seed: u64,
) -> Result<(Tensor, Trajectory)> {
    generate_from(model, solver, controller, cond, initial_noise(model.dim(), seed))
}

/// Run the sampler from a given x_T down to x_0.
pub fn generate_from(
    model: &ScoreModel,
    solver: SolverKind,
    controller: &mut dyn Controller,
    cond: Condition,
    x_t: Tensor,
) -> Result<(Tensor, Trajectory)> {
    let start = model.nfe.get();
    let mut state = LatentState {
        x: x_t,
        t: model.schedule.steps(),
    };
    let mut traj = Trajectory::default();
    while state.t > 0 {
        let out = controller.step(model, &state.x, state.t, cond)?;
        if !out.eps_bar.is_finite() {
            return Err(Error::NonFinite(format!("guided prediction at step {}", state.t)));
        }
        traj.steps.push(StepRecord {
            v: 1,
            t: state.t,
            choice: out.label,
            x: state.x.data().to_vec(),
            eps_cond: out.eps_cond.map(Tensor::into_data),
            eps_uncond: out.eps_uncond.map(Tensor::into_data),
            eps_bar: out.eps_bar.data().to_vec(),
            gamma: out.gamma,
            nfe: model.nfe.get() - start,
        });
        state = solver_step(solver, &state, &out.eps_bar, model.schedule)?;
    }
    Ok((state.x, traj))
}

#[derive(Debug, Clone)]
pub struct Run {
    pub seed: u64,
    pub cond: Condition,
    pub x0: Tensor,
    pub trajectory: Trajectory,
    /// Counter delta for this run; equals `trajectory.total_nfe()`.
    pub nfe: u64,
}

/// Generate one run per (seed, condition) on up to `jobs` threads. Each run
/// owns its controller and NFE counter; output order follows `runs`.
pub fn run_batch<F>(
    backend: &dyn ScoreBackend,
    schedule: &NoiseSchedule,
    solver: SolverKind,
    runs: &[(u64, Condition)],
    jobs: usize,
    make_controller: F,
) -> Result<Vec<Run>>
where
    F: Fn(u64, Condition) -> Result<Box<dyn Controller>> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Run>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(seed, cond)) = runs.get(i) else { break };
        let result = (|| {
            let nfe = NfeCounter::new();
            let model = ScoreModel::new(backend, schedule, &nfe);
            let mut ctrl = make_controller(seed, cond)?;
            let (x0, trajectory) = generate(&model, solver, ctrl.as_mut(), cond, seed)?;
            Ok(Run {
                seed,
                cond,
                x0,
                trajectory,
                nfe: nfe.get(),
            })
        })();
        slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(result);
    };
    let jobs = jobs.clamp(1, runs.len().max(1));
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every run is visited"))
        .collect()
}
