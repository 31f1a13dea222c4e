//! Replication error, distributional distance, γ curves and frontier tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{run_batch, NoiseSchedule, Run, SolverKind, Trajectory};
use crate::error::{Error, Result};
use crate::guidance::{AgConfig, AgController, Controller, GuidanceChoice, Policy, PolicyController};
use crate::linear::{naive_interleave_policy, LinearAgController, LinearCoeffs};
use crate::score::{Condition, ScoreBackend};

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.5758293035489004;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Stats {
    /// Mean, sample sd and a 99% normal-approximation interval.
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::invalid("statistics over an empty sample"));
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let half = Z99 * sd / (n as f64).sqrt();
        Ok(Self {
            n,
            mean,
            sd,
            ci_low: mean - half,
            ci_high: mean + half,
        })
    }

    pub fn half_width(&self) -> f64 {
        (self.ci_high - self.ci_low) / 2.0
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Per-seed endpoint MSE of `runs` against `baseline`; both must cover the
/// same (seed, condition) list in the same order.
pub fn endpoint_replication(runs: &[Run], baseline: &[Run]) -> Result<(Vec<f64>, Stats)> {
    if runs.len() != baseline.len() || runs.iter().zip(baseline).any(|(a, b)| a.seed != b.seed || a.cond != b.cond) {
        return Err(Error::invalid("replication needs identical seed sets for policy and baseline"));
    }
    let per: Vec<f64> = runs.iter().zip(baseline).map(|(a, b)| mse(a.x0.data(), b.x0.data())).collect();
    let stats = Stats::from_samples(&per)?;
    Ok((per, stats))
}

/// W1 between two 1-D empirical distributions, ∫|F_a − F_b|.
fn wasserstein_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut prev: Option<f64> = None;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        if let Some(px) = prev {
            total += (i as f64 / na - j as f64 / nb).abs() * (x - px);
        }
        while a.get(i).is_some_and(|&v| v == x) {
            i += 1;
        }
        while b.get(j).is_some_and(|&v| v == x) {
            j += 1;
        }
        prev = Some(x);
    }
    total
}

/// Mean 1-D Wasserstein distance over seeded random unit projections.
pub fn sliced_wasserstein(a: &[Vec<f64>], b: &[Vec<f64>], projections: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("sliced Wasserstein needs non-empty sample sets"));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != dim) {
        return Err(Error::invalid("sliced Wasserstein needs equal dimensionality"));
    }
    if projections == 0 {
        return Err(Error::invalid("need at least one projection"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..projections {
        let mut u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let proj = |xs: &[Vec<f64>]| -> Vec<f64> { xs.iter().map(|x| x.iter().zip(&u).map(|(p, q)| p * q).sum()).collect() };
        total += wasserstein_1d(proj(a), proj(b));
    }
    Ok(total / projections as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub t: usize,
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Per-step mean γ and 99% interval over trajectories, steps T → 1. Steps
/// where no run evaluated both branches are left out.
pub fn gamma_curves(trajs: &[Trajectory]) -> Vec<GammaRow> {
    let max_t = trajs.iter().flat_map(|tr| tr.steps.iter().map(|s| s.t)).max().unwrap_or(0);
    let mut by_t = vec![Vec::new(); max_t + 1];
    for rec in trajs.iter().flat_map(|tr| &tr.steps) {
        if let Some(g) = rec.gamma {
            by_t[rec.t].push(g);
        }
    }
    (1..=max_t)
        .rev()
        .filter_map(|t| {
            let s = Stats::from_samples(&by_t[t]).ok()?;
            Some(GammaRow {
                t,
                n: s.n,
                mean: s.mean,
                ci_low: s.ci_low,
                ci_high: s.ci_high,
            })
        })
        .collect()
}

/// A guidance strategy, buildable into a fresh controller per run.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    Fixed { name: String, policy: Policy },
    Ag { gamma_bar: f64, s: f64 },
    LinearAg { coeffs: Arc<LinearCoeffs>, s: f64 },
}

impl PolicySpec {
    pub fn cfg(steps: usize, s: f64) -> Self {
        Self::Fixed {
            name: "cfg".into(),
            policy: Policy::full_cfg(steps, s),
        }
    }

    pub fn uniform(steps: usize, choice: GuidanceChoice) -> Self {
        Self::Fixed {
            name: choice.to_string().replace(':', "-"),
            policy: Policy::uniform(steps, choice),
        }
    }

    pub fn naive_interleave(steps: usize, s: f64) -> Self {
        Self::Fixed {
            name: "naive-interleave".into(),
            policy: naive_interleave_policy(steps, s),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Fixed { name, .. } => name.clone(),
            Self::Ag { gamma_bar, .. } => format!("ag-{gamma_bar}"),
            Self::LinearAg { .. } => "linear-ag".into(),
        }
    }

    pub fn controller(&self, steps: usize) -> Box<dyn Controller> {
        match self {
            Self::Fixed { policy, .. } => Box::new(PolicyController::new(policy.clone())),
            Self::Ag { gamma_bar, s } => Box::new(AgController::new(AgConfig::new(*gamma_bar), *s)),
            Self::LinearAg { coeffs, s } => Box::new(LinearAgController::new(coeffs.clone(), steps, *s)),
        }
    }
}

/// Seeds paired with classes round-robin, the convention used everywhere.
pub fn seed_conditions(seeds: &[u64], classes: usize) -> Vec<(u64, Condition)> {
    let c = classes.max(1) as u64;
    seeds.iter().map(|&s| (s, Condition::class((s % c) as usize))).collect()
}

/// Run a policy on every seed and check the NFE ledger closes per run.
pub fn run_policy(
    backend: &dyn ScoreBackend,
    schedule: &NoiseSchedule,
    solver: SolverKind,
    spec: &PolicySpec,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<Run>> {
    let runs = seed_conditions(seeds, backend.num_classes());
    let out = run_batch(backend, schedule, solver, &runs, jobs, |_, _| Ok(spec.controller(schedule.steps())))?;
    for r in &out {
        if r.nfe != r.trajectory.total_nfe() {
            return Err(Error::NonFinite(format!(
                "NFE ledger mismatch for seed {}: counter {} vs trajectory {}",
                r.seed,
                r.nfe,
                r.trajectory.total_nfe()
            )));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub policy: String,
    pub seeds: Vec<u64>,
    pub nfe: Stats,
    pub mse: Option<Stats>,
    pub sliced_wasserstein: Option<f64>,
    pub gamma: Vec<GammaRow>,
}

pub const CSV_HEADER: &str = "policy,nfe_mean,nfe_sd,mse_mean,mse_ci_low,mse_ci_high,sliced_wasserstein";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl EvalReport {
    pub fn from_runs(experiment: &str, policy: &str, runs: &[Run], baseline: Option<&[Run]>) -> Result<Self> {
        let nfe: Vec<f64> = runs.iter().map(|r| r.nfe as f64).collect();
        let mse = baseline.map(|b| endpoint_replication(runs, b).map(|(_, s)| s)).transpose()?;
        let trajs: Vec<Trajectory> = runs.iter().map(|r| r.trajectory.clone()).collect();
        Ok(Self {
            experiment: experiment.into(),
            policy: policy.into(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            nfe: Stats::from_samples(&nfe)?,
            mse,
            sliced_wasserstein: None,
            gamma: gamma_curves(&trajs),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.policy,
            self.nfe.mean,
            self.nfe.sd,
            opt(self.mse.map(|s| s.mean)),
            opt(self.mse.map(|s| s.ci_low)),
            opt(self.mse.map(|s| s.ci_high)),
            opt(self.sliced_wasserstein)
        )
    }

    /// Writes `{dir}/{experiment}/{policy}.csv` and `.json`; returns the CSV path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let base = dir.join(&self.experiment);
        std::fs::create_dir_all(&base)?;
        let csv = base.join(format!("{}.csv", self.policy));
        std::fs::write(&csv, format!("{CSV_HEADER}\n{}\n", self.csv_row()))?;
        std::fs::write(
            base.join(format!("{}.json", self.policy)),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        Ok(csv)
    }
}

pub fn gamma_csv(rows: &[GammaRow]) -> String {
    let mut s = String::from("t,n,gamma_mean,ci_low,ci_high\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.t, r.n, r.mean, r.ci_low, r.ci_high);
    }
    s
}

/// One point of an NFE/replication frontier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub policy: String,
    pub gamma_bar: Option<f64>,
    pub nfe_mean: f64,
    pub mse: Stats,
}

pub fn frontier_csv(rows: &[FrontierRow]) -> String {
    let mut s = String::from("policy,gamma_bar,nfe_mean,mse_mean,mse_ci_low,mse_ci_high\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.policy,
            opt(r.gamma_bar),
            r.nfe_mean,
            r.mse.mean,
            r.mse.ci_low,
            r.mse.ci_high
        );
    }
    s
}

/// Largest threshold in [lo, hi] whose mean NFE stays within `budget`,
/// assuming mean NFE is non-decreasing in the threshold.
pub fn gamma_bar_for_budget<F>(budget: f64, mut lo: f64, mut hi: f64, iters: usize, mut mean_nfe: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if mean_nfe(lo)? > budget {
        return Err(Error::invalid(format!("budget {budget} is below the cheapest threshold's mean NFE")));
    }
    if mean_nfe(hi)? <= budget {
        return Ok(hi);
    }
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if mean_nfe(mid)? <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Mean NFE of AG at a threshold over the given seeds.
pub fn ag_mean_nfe(
    backend: &dyn ScoreBackend,
    schedule: &NoiseSchedule,
    solver: SolverKind,
    gamma_bar: f64,
    s: f64,
    seeds: &[u64],
    jobs: usize,
) -> Result<f64> {
    let runs = run_policy(backend, schedule, solver, &PolicySpec::Ag { gamma_bar, s }, seeds, jobs)?;
    Ok(runs.iter().map(|r| r.nfe as f64).sum::<f64>() / runs.len().max(1) as f64)
}

/// AG vs naive step reduction at each budget: AG takes the largest γ̄ whose
/// mean NFE fits; the naive point runs full CFG with ⌊B/2⌋ steps.
pub fn matched_frontier(
    backend: &dyn ScoreBackend,
    schedule: &NoiseSchedule,
    solver: SolverKind,
    s: f64,
    budgets: &[u64],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<(FrontierRow, FrontierRow)>> {
    let baseline = run_policy(backend, schedule, solver, &PolicySpec::cfg(schedule.steps(), s), seeds, jobs)?;
    let row = |name: String, gamma_bar, runs: &[Run]| -> Result<FrontierRow> {
        let (_, mse) = endpoint_replication(runs, &baseline)?;
        Ok(FrontierRow {
            policy: name,
            gamma_bar,
            nfe_mean: runs.iter().map(|r| r.nfe as f64).sum::<f64>() / runs.len() as f64,
            mse,
        })
    };
    let mut out = Vec::new();
    for &b in budgets {
        let g = gamma_bar_for_budget(b as f64, -1.0, 1.0, 30, |g| ag_mean_nfe(backend, schedule, solver, g, s, seeds, jobs))?;
        let ag = run_policy(backend, schedule, solver, &PolicySpec::Ag { gamma_bar: g, s }, seeds, jobs)?;
        let short = schedule.with_steps((b / 2) as usize)?;
        let naive = run_policy(backend, &short, solver, &PolicySpec::cfg(short.steps(), s), seeds, jobs)?;
        out.push((row(format!("ag@{b}"), Some(g), &ag)?, row(format!("naive@{b}"), None, &naive)?));
    }
    Ok(out)
}
