//! LinearAG: predict the unconditional score from earlier evaluations with
//! per-step scalar OLS coefficients, and interleave real and estimated CFG steps.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::{run_batch, NoiseSchedule, SolverKind, Trajectory};
use crate::error::{Error, Result};
use crate::guidance::{cfg_score, cosine_gamma, Controller, GuidanceChoice, Policy, PolicyController, StepOutput};
use crate::score::{Condition, ScoreBackend, ScoreModel};
use crate::tensor::Tensor;

pub const RIDGE: f64 = 1e-8;

/// Both score branches at every step of N full-CFG runs.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDataset {
    steps: usize,
    dim: usize,
    /// paths[n][t] for t in 1..=T; index 0 is unused.
    cond: Vec<Vec<Vec<f64>>>,
    uncond: Vec<Vec<Vec<f64>>>,
}

impl PathDataset {
    pub fn new(steps: usize, dim: usize) -> Self {
        Self {
            steps,
            dim,
            cond: Vec::new(),
            uncond: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }

    /// Add one path given per-step closures over t = 1..=T.
    pub fn push_path(&mut self, cond: Vec<Vec<f64>>, uncond: Vec<Vec<f64>>) -> Result<()> {
        let ok = |v: &Vec<Vec<f64>>| v.len() == self.steps + 1 && v[1..].iter().all(|e| e.len() == self.dim);
        if !ok(&cond) || !ok(&uncond) {
            return Err(Error::invalid(format!(
                "path must hold {} steps of dimension {}",
                self.steps, self.dim
            )));
        }
        self.cond.push(cond);
        self.uncond.push(uncond);
        Ok(())
    }

    pub fn eps_cond(&self, n: usize, t: usize) -> &[f64] {
        &self.cond[n][t]
    }

    pub fn eps_uncond(&self, n: usize, t: usize) -> &[f64] {
        &self.uncond[n][t]
    }

    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        let first = trajs.first().ok_or_else(|| Error::invalid("no trajectories"))?;
        let steps = first.steps.len();
        let dim = first.steps.first().map_or(0, |s| s.x.len());
        let mut ds = Self::new(steps, dim);
        for (n, tr) in trajs.iter().enumerate() {
            let mut cond = vec![Vec::new(); steps + 1];
            let mut uncond = vec![Vec::new(); steps + 1];
            if tr.steps.len() != steps {
                return Err(Error::invalid(format!("trajectory {n} has {} steps, expected {steps}", tr.steps.len())));
            }
            for rec in &tr.steps {
                let (Some(c), Some(u)) = (&rec.eps_cond, &rec.eps_uncond) else {
                    return Err(Error::invalid(format!(
                        "trajectory {n} step {} lacks a score branch; paths need full CFG",
                        rec.t
                    )));
                };
                if rec.t == 0 || rec.t > steps {
                    return Err(Error::invalid(format!("trajectory {n} has step index {}", rec.t)));
                }
                cond[rec.t] = c.clone();
                uncond[rec.t] = u.clone();
            }
            ds.push_path(cond, uncond)?;
        }
        Ok(ds)
    }

    /// Read concatenated trajectory records; a new run starts whenever the
    /// step index does not decrease. A directory reads every `*.jsonl` in it.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut trajs = Vec::new();
        let files: Vec<_> = if path.is_dir() {
            let mut v: Vec<_> = std::fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
                .collect();
            v.sort();
            v
        } else {
            vec![path.to_path_buf()]
        };
        for f in files {
            let all = Trajectory::read_jsonl(&f)?;
            let mut cur = Trajectory::default();
            for rec in all.steps {
                if cur.steps.last().is_some_and(|p| rec.t >= p.t) {
                    trajs.push(std::mem::take(&mut cur));
                }
                cur.steps.push(rec);
            }
            if !cur.steps.is_empty() {
                trajs.push(cur);
            }
        }
        Self::from_trajectories(&trajs)
    }
}

/// Full-CFG runs for the given seeds (classes round-robin), both branches kept.
pub fn collect_paths(
    backend: &dyn ScoreBackend,
    schedule: &NoiseSchedule,
    solver: SolverKind,
    s: f64,
    seeds: &[u64],
    jobs: usize,
) -> Result<PathDataset> {
    let classes = backend.num_classes() as u64;
    let runs: Vec<(u64, Condition)> = seeds.iter().map(|&s| (s, Condition::class((s % classes) as usize))).collect();
    let out = run_batch(backend, schedule, solver, &runs, jobs, |_, _| {
        Ok(Box::new(PolicyController::new(Policy::full_cfg(schedule.steps(), s))) as Box<dyn Controller>)
    })?;
    let trajs: Vec<Trajectory> = out.into_iter().map(|r| r.trajectory).collect();
    if trajs.is_empty() {
        return Ok(PathDataset::new(schedule.steps(), backend.dim()));
    }
    PathDataset::from_trajectories(&trajs)
}

/// Coefficients for one step t: `beta_c[j]` multiplies ε_c at i = start − j
/// (down to t), `beta_u[j]` multiplies ε_u at i = start − j (down to t + 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffRow {
    pub beta_c: Vec<f64>,
    pub beta_u: Vec<f64>,
}

impl CoeffRow {
    pub fn start(&self, t: usize) -> usize {
        t + self.beta_c.len() - 1
    }

    pub fn regressors(&self) -> usize {
        self.beta_c.len() + self.beta_u.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearCoeffs {
    pub rows: BTreeMap<usize, CoeffRow>,
}

impl LinearCoeffs {
    pub fn row(&self, t: usize) -> Result<&CoeffRow> {
        self.rows
            .get(&t)
            .ok_or_else(|| Error::invalid(format!("no LinearAG coefficients for step {t}")))
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<String, &CoeffRow> = self.rows.iter().map(|(t, r)| (t.to_string(), r)).collect();
        serde_json::to_string_pretty(&map).expect("coefficients serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: BTreeMap<String, CoeffRow> = serde_json::from_str(s)?;
        let mut rows = BTreeMap::new();
        for (k, r) in map {
            let t: usize = k.parse().map_err(|_| Error::invalid(format!("bad step key `{k}`")))?;
            if r.beta_c.is_empty() || r.beta_u.len() + 1 != r.beta_c.len() {
                return Err(Error::invalid(format!("step {t}: need |beta_u| = |beta_c| − 1 ≥ 0")));
            }
            rows.insert(t, r);
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_json(&s)
    }
}

/// Solve (A + ridge·I) x = b for symmetric positive semi-definite A (row-major).
fn solve_spd(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    for i in 0..n {
        a[i * n + i] += RIDGE;
    }
    // In-place Cholesky: lower triangle becomes L.
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return Err(Error::NonFinite(format!("normal equations not positive definite (pivot {j})")));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * n + k] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= a[k * n + i] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    Ok(b)
}

/// Regressor values for path `n` at step t, ordered as in [`CoeffRow`].
fn regressor_rows(ds: &PathDataset, n: usize, t: usize, start: usize) -> Vec<&[f64]> {
    let mut v: Vec<&[f64]> = (t..=start).rev().map(|i| ds.eps_cond(n, i)).collect();
    v.extend((t + 1..=start).rev().map(|i| ds.eps_uncond(n, i)));
    v
}

/// Least-squares fit of ε_u at step t (1 ≤ t < T) on earlier evaluations.
/// Every latent coordinate of every path is one observation row.
pub fn fit_ols(ds: &PathDataset, t: usize, window: Option<usize>) -> Result<CoeffRow> {
    let big_t = ds.steps();
    if t == 0 || t >= big_t {
        return Err(Error::invalid(format!("OLS steps are 1..{big_t}, got {t}")));
    }
    let start = match window {
        Some(0) => return Err(Error::config("window", "must be ≥ 1")),
        Some(w) => (t + w - 1).min(big_t),
        None => big_t,
    };
    let p = 2 * (start - t) + 1;
    let rows = ds.len() * ds.dim();
    if rows < p {
        return Err(Error::Underdetermined {
            t,
            rows,
            regressors: p,
            needed: p.div_ceil(ds.dim().max(1)),
        });
    }
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for n in 0..ds.len() {
        let regs = regressor_rows(ds, n, t, start);
        let y = ds.eps_uncond(n, t);
        for r in 0..ds.dim() {
            for a in 0..p {
                let xa = regs[a][r];
                xty[a] += xa * y[r];
                for b in 0..=a {
                    xtx[a * p + b] += xa * regs[b][r];
                }
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[b * p + a] = xtx[a * p + b];
        }
    }
    let beta = solve_spd(xtx, xty, p)?;
    let nc = start - t + 1;
    Ok(CoeffRow {
        beta_c: beta[..nc].to_vec(),
        beta_u: beta[nc..].to_vec(),
    })
}

pub fn fit_all(ds: &PathDataset, window: Option<usize>) -> Result<LinearCoeffs> {
    let rows = (1..ds.steps())
        .map(|t| Ok((t, fit_ols(ds, t, window)?)))
        .collect::<Result<_>>()?;
    Ok(LinearCoeffs { rows })
}

/// Mean squared error of a coefficient row's prediction over a dataset.
pub fn ols_mse(ds: &PathDataset, t: usize, row: &CoeffRow) -> f64 {
    let start = row.start(t);
    let beta: Vec<f64> = row.beta_c.iter().chain(&row.beta_u).copied().collect();
    let mut se = 0.0;
    for n in 0..ds.len() {
        let regs = regressor_rows(ds, n, t, start);
        let y = ds.eps_uncond(n, t);
        for r in 0..ds.dim() {
            let pred: f64 = regs.iter().zip(&beta).map(|(x, b)| x[r] * b).sum();
            se += (pred - y[r]).powi(2);
        }
    }
    se / (ds.len() * ds.dim()).max(1) as f64
}

/// Past score values available to the estimator (real or estimated).
#[derive(Debug, Clone, Default)]
pub struct ScoreHistory {
    pub cond: BTreeMap<usize, Tensor>,
    pub uncond: BTreeMap<usize, Tensor>,
}

/// ε̂_u at step t from the history (ε_c at t itself is `eps_cond_t`).
pub fn predict_uncond(row: &CoeffRow, t: usize, history: &ScoreHistory, eps_cond_t: &Tensor) -> Result<Tensor> {
    let start = row.start(t);
    let mut acc = eps_cond_t.mul_scalar(*row.beta_c.last().expect("non-empty"));
    for (j, b) in row.beta_c.iter().enumerate().take(row.beta_c.len() - 1) {
        let i = start - j;
        let e = history.cond.get(&i).ok_or(Error::MissingHistory { branch: "conditional", t: i })?;
        acc = acc.add(&e.mul_scalar(*b))?;
    }
    for (j, b) in row.beta_u.iter().enumerate() {
        let i = start - j;
        let e = history.uncond.get(&i).ok_or(Error::MissingHistory { branch: "unconditional", t: i })?;
        acc = acc.add(&e.mul_scalar(*b))?;
    }
    Ok(acc)
}

/// CFG step whose unconditional branch is estimated: one real evaluation.
/// Returns (ε̂_cfg, ε̂_u).
pub fn lr_cfg_step(row: &CoeffRow, t: usize, history: &ScoreHistory, eps_cond_t: &Tensor, s: f64) -> Result<(Tensor, Tensor)> {
    let eu = predict_uncond(row, t, history, eps_cond_t)?;
    Ok((cfg_score(&eu, eps_cond_t, s)?, eu))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanStep {
    Cfg,
    LrCfg,
}

/// First ⌈T/2⌉ steps alternate Cfg / LR-Cfg starting with Cfg, the rest LR-Cfg.
pub fn linear_ag_policy(steps: usize) -> Vec<PlanStep> {
    let head = steps.div_ceil(2);
    (0..steps)
        .map(|i| if i < head && i % 2 == 0 { PlanStep::Cfg } else { PlanStep::LrCfg })
        .collect()
}

pub fn plan_nfe(plan: &[PlanStep]) -> u64 {
    plan.iter().map(|p| if *p == PlanStep::Cfg { 2 } else { 1 }).sum()
}

/// Same skeleton with plain conditional steps where LinearAG estimates: the
/// equal-budget naive alternative.
pub fn naive_interleave_policy(steps: usize, s: f64) -> Policy {
    let mut choices: Vec<GuidanceChoice> = linear_ag_policy(steps)
        .into_iter()
        .map(|p| match p {
            PlanStep::Cfg => GuidanceChoice::Cfg(s),
            PlanStep::LrCfg => GuidanceChoice::Cond,
        })
        .collect();
    choices.push(GuidanceChoice::Cond);
    Policy::new(choices).expect("T ≥ 2")
}

pub struct LinearAgController {
    coeffs: Arc<LinearCoeffs>,
    plan: Vec<PlanStep>,
    s: f64,
    history: ScoreHistory,
}

impl LinearAgController {
    pub fn new(coeffs: Arc<LinearCoeffs>, steps: usize, s: f64) -> Self {
        Self::with_plan(coeffs, linear_ag_policy(steps), s)
    }

    pub fn with_plan(coeffs: Arc<LinearCoeffs>, plan: Vec<PlanStep>, s: f64) -> Self {
        Self {
            coeffs,
            plan,
            s,
            history: ScoreHistory::default(),
        }
    }
}

impl Controller for LinearAgController {
    fn step(&mut self, model: &ScoreModel, x: &Tensor, t: usize, cond: Condition) -> Result<StepOutput> {
        let steps = model.schedule.steps();
        if self.plan.len() != steps {
            return Err(Error::invalid(format!("plan has {} steps, schedule {steps}", self.plan.len())));
        }
        let ec = model.eval_score(x, t, cond)?;
        let out = match self.plan[steps - t] {
            PlanStep::Cfg => {
                let eu = model.eval_score(x, t, Condition::NULL)?;
                self.history.uncond.insert(t, eu.clone());
                StepOutput {
                    eps_bar: cfg_score(&eu, &ec, self.s)?,
                    gamma: cosine_gamma(&ec, &eu).ok(),
                    eps_cond: Some(ec.clone()),
                    eps_uncond: Some(eu),
                    label: format!("cfg:{}", self.s),
                }
            }
            PlanStep::LrCfg => {
                let row = self.coeffs.row(t)?;
                let (eps, eu_hat) = lr_cfg_step(row, t, &self.history, &ec, self.s)?;
                self.history.uncond.insert(t, eu_hat);
                StepOutput {
                    eps_bar: eps,
                    gamma: None,
                    eps_cond: Some(ec.clone()),
                    eps_uncond: None,
                    label: format!("lr-cfg:{}", self.s),
                }
            }
        };
        self.history.cond.insert(t, ec);
        Ok(out)
    }
}
