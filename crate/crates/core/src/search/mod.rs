//! Differentiable search over per-step guidance choices.
//!
//! Each step mixes every option with softmax weights over trainable logits,
//! the whole sampler is unrolled on a tape, and the logits are trained to
//! replicate full-CFG endpoints under a Gumbel-softmax NFE penalty.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::diffusion::{generate, initial_noise, solver_step, LatentState, NoiseSchedule, SolverKind};
use crate::error::{Error, Result};
use crate::guidance::{cfg_score, GuidanceChoice, Policy, PolicyController, DEFAULT_STRENGTH};
use crate::score::{Condition, NfeCounter, ScoreBackend, ScoreModel};
use crate::tensor::{LionConfig, OptimizerState, Tape, Tensor};

/// Options available at every step: [Uncond, Cond, Cfg(s¹), …, Cfg(s^k)].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceSet {
    pub strengths: Vec<f64>,
}

impl Default for ChoiceSet {
    fn default() -> Self {
        Self {
            strengths: vec![0.5 * DEFAULT_STRENGTH, DEFAULT_STRENGTH, 2.0 * DEFAULT_STRENGTH],
        }
    }
}

impl ChoiceSet {
    pub fn len(&self) -> usize {
        self.strengths.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn options(&self) -> Vec<GuidanceChoice> {
        let mut v = vec![GuidanceChoice::Uncond, GuidanceChoice::Cond];
        v.extend(self.strengths.iter().map(|&s| GuidanceChoice::Cfg(s)));
        v
    }

    pub fn costs(&self) -> Vec<f64> {
        self.options().iter().map(|c| c.cost() as f64).collect()
    }
}

/// Logits α of shape (T+1) × |F|; row i belongs to grid index T − i.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMatrix {
    pub logits: Tensor,
}

#[derive(Serialize, Deserialize)]
struct AlphaFile {
    strengths: Vec<f64>,
    alpha: Vec<Vec<f64>>,
}

impl AlphaMatrix {
    /// i.i.d. U(0, 1) initialisation.
    pub fn uniform_init(steps: usize, choices: &ChoiceSet, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (steps + 1) * choices.len();
        let data = (0..n).map(|_| rng.random::<f64>()).collect();
        Self {
            logits: Tensor::new(vec![steps + 1, choices.len()], data).expect("shape matches"),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.len() < 3 || k < 2 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("alpha needs ≥ 3 rows of equal length ≥ 2"));
        }
        let r = rows.len();
        Ok(Self {
            logits: Tensor::new(vec![r, k], rows.concat())?,
        })
    }

    pub fn steps(&self) -> usize {
        self.logits.shape()[0] - 1
    }

    pub fn width(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.logits.data().chunks(self.width()).map(<[f64]>::to_vec).collect()
    }

    /// Per-row softmax weights.
    pub fn scores(&self) -> Vec<Vec<f64>> {
        let sm = self.logits.detach().softmax();
        sm.data().chunks(self.width()).map(<[f64]>::to_vec).collect()
    }

    pub fn to_json(&self, choices: &ChoiceSet) -> String {
        serde_json::to_string_pretty(&AlphaFile {
            strengths: choices.strengths.clone(),
            alpha: self.rows(),
        })
        .expect("alpha serializes")
    }

    pub fn from_json(s: &str) -> Result<(Self, ChoiceSet)> {
        let f: AlphaFile = serde_json::from_str(s)?;
        let choices = ChoiceSet { strengths: f.strengths };
        let alpha = Self::from_rows(f.alpha)?;
        if alpha.width() != choices.len() {
            return Err(Error::invalid("alpha width does not match the strength list"));
        }
        Ok((alpha, choices))
    }
}

/// Run the sampler with softmax-mixed options at every step. Differentiable
/// w.r.t. `alpha` when it is tracked. Costs 2 NFE per step.
pub fn soft_forward(
    model: &ScoreModel,
    solver: SolverKind,
    alpha: &Tensor,
    choices: &ChoiceSet,
    cond: Condition,
    x_t: Tensor,
) -> Result<Tensor> {
    let steps = model.schedule.steps();
    if alpha.shape() != [steps + 1, choices.len()] {
        return Err(Error::ShapeMismatch {
            op: "soft_forward",
            left: alpha.shape().to_vec(),
            right: vec![steps + 1, choices.len()],
        });
    }
    let mut state = LatentState { x: x_t, t: steps };
    while state.t > 0 {
        let t = state.t;
        let w = alpha.row(steps - t)?.softmax();
        let ec = model.eval_score(&state.x, t, cond)?;
        let eu = model.eval_score(&state.x, t, Condition::NULL)?;
        let mut options = vec![eu.clone(), ec.clone()];
        for &s in &choices.strengths {
            options.push(cfg_score(&eu, &ec, s)?);
        }
        let mut mixed = options[0].mul(&w.index(0)?)?;
        for (j, f) in options.iter().enumerate().skip(1) {
            mixed = mixed.add(&f.mul(&w.index(j)?)?)?;
        }
        if !mixed.is_finite() {
            return Err(Error::NonFinite(format!("soft option mixture at step {t}")));
        }
        state = solver_step(solver, &state, &mixed, model.schedule)?;
    }
    Ok(state.x)
}

/// g = ReLU(Σ_t gumbel_softmax(α_t, τ)·cost − c̄), with fresh Gumbel noise from `rng`.
pub fn cost_proxy<R: Rng + ?Sized>(alpha: &Tensor, costs: &[f64], cost_cap: f64, temperature: f64, rng: &mut R) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::config("gumbel_temperature", "must be > 0"));
    }
    let [rows, k] = match alpha.shape() {
        [r, k] if *k == costs.len() => [*r, *k],
        _ => {
            return Err(Error::ShapeMismatch {
                op: "cost_proxy",
                left: alpha.shape().to_vec(),
                right: vec![0, costs.len()],
            })
        }
    };
    let gumbel: Vec<f64> = (0..rows * k)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    let noisy = alpha.add(&Tensor::new(vec![rows, k], gumbel)?)?.mul_scalar(1.0 / temperature);
    let y = noisy.softmax();
    let cost = Tensor::new(vec![rows, k], costs.iter().cycle().take(rows * k).copied().collect())?;
    Ok(y.mul(&cost)?.sum().add_scalar(-cost_cap).relu())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub lambda: f64,
    pub cost_cap: f64,
    pub gumbel_temperature: f64,
    pub epochs: usize,
    pub choices: ChoiceSet,
    pub lion: LionConfig,
    pub seed: u64,
}

impl SearchConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            lambda: 0.1,
            cost_cap: (steps + 1) as f64 * 1.5,
            gumbel_temperature: 1.0,
            epochs: 5,
            choices: ChoiceSet::default(),
            lion: LionConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        let n = (steps + 1) as f64;
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be ≥ 0"));
        }
        if !(self.cost_cap >= n && self.cost_cap <= 2.0 * n) {
            return Err(Error::config("cost_cap", format!("must lie in [{n}, {}]", 2.0 * n)));
        }
        if !(self.gumbel_temperature > 0.0) {
            return Err(Error::config("gumbel_temperature", "must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be ≥ 1"));
        }
        Ok(())
    }
}

/// A training example: the full-CFG endpoint for one seed.
#[derive(Debug, Clone)]
pub struct SearchPair {
    pub seed: u64,
    pub cond: Condition,
    pub target: Tensor,
}

/// Targets from the full-CFG reference policy; seeds `first..first+n`,
/// classes assigned round-robin.
pub fn make_dataset(
    backend: &dyn ScoreBackend,
    schedule: &NoiseSchedule,
    solver: SolverKind,
    s: f64,
    n: usize,
    first: u64,
) -> Result<Vec<SearchPair>> {
    let nfe = NfeCounter::new();
    let model = ScoreModel::new(backend, schedule, &nfe);
    let classes = backend.num_classes() as u64;
    (first..first + n as u64)
        .map(|seed| {
            let cond = Condition::class((seed % classes) as usize);
            let mut ctrl = PolicyController::new(Policy::full_cfg(schedule.steps(), s));
            let (target, _) = generate(&model, solver, &mut ctrl, cond, seed)?;
            Ok(SearchPair { seed, cond, target })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub replication: f64,
    pub cost: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub alpha: AlphaMatrix,
    pub history: Vec<EpochStats>,
    /// Per-step softmax weights averaged over the last epoch's iterations,
    /// rows ordered t = T..0.
    pub scores: Vec<Vec<f64>>,
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.sub(b)?.square().mean())
}

/// One optimisation step per pair, Lion on the logits.
pub fn search(
    backend: &dyn ScoreBackend,
    schedule: &NoiseSchedule,
    solver: SolverKind,
    dataset: &[SearchPair],
    config: &SearchConfig,
) -> Result<SearchOutcome> {
    if dataset.is_empty() {
        return Err(Error::config("dataset", "search needs at least one seed/target pair"));
    }
    config.validate(schedule.steps())?;
    let choices = &config.choices;
    let costs = choices.costs();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut alpha = AlphaMatrix::uniform_init(schedule.steps(), choices, rng.random());
    let mut opt = OptimizerState::lion(config.lion);
    let nfe = NfeCounter::new();
    let model = ScoreModel::new(backend, schedule, &nfe);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut scores = vec![vec![0.0; choices.len()]; schedule.steps() + 1];
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut rep_sum, mut cost_sum, mut loss_sum) = (0.0, 0.0, 0.0);
        let last = epoch + 1 == config.epochs;
        for &i in &order {
            let pair = &dataset[i];
            let tape = Tape::new();
            let a = tape.leaf(&alpha.logits);
            let x0 = soft_forward(&model, solver, &a, choices, pair.cond, initial_noise(model.dim(), pair.seed))?;
            let d = mse(&x0, &pair.target)?;
            let mut loss = d.clone();
            let mut g_val = 0.0;
            if config.lambda > 0.0 {
                let g = cost_proxy(&a, &costs, config.cost_cap, config.gumbel_temperature, &mut rng)?;
                g_val = g.item()?;
                loss = loss.add(&g.mul_scalar(config.lambda))?;
            }
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::Diverged { step: epoch });
            }
            rep_sum += d.item()?;
            cost_sum += g_val;
            loss_sum += value;
            let grad = tape.backward(&loss)?.wrt(&a);
            opt.step(std::slice::from_mut(&mut alpha.logits), &[grad])?;
            if last {
                for (acc, row) in scores.iter_mut().zip(alpha.scores()) {
                    acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
        }
        let n = dataset.len() as f64;
        history.push(EpochStats {
            epoch,
            replication: rep_sum / n,
            cost: cost_sum / n,
            loss: loss_sum / n,
        });
    }
    let n = dataset.len() as f64;
    scores.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(SearchOutcome { alpha, history, scores })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtractMode {
    Argmax,
    Sample(u64),
}

/// Discretise α into a policy. Argmax ties go to the cheaper option, then to
/// the earlier one.
pub fn extract_policy(alpha: &AlphaMatrix, choices: &ChoiceSet, mode: ExtractMode) -> Result<Policy> {
    if alpha.width() != choices.len() {
        return Err(Error::invalid("alpha width does not match the choice set"));
    }
    let options = choices.options();
    let scores = alpha.scores();
    let picks: Vec<usize> = match mode {
        ExtractMode::Argmax => alpha
            .rows()
            .iter()
            .map(|row| {
                (0..row.len())
                    .max_by(|&a, &b| {
                        row[a]
                            .total_cmp(&row[b])
                            .then(options[b].cost().cmp(&options[a].cost()))
                            .then(b.cmp(&a))
                    })
                    .expect("non-empty row")
            })
            .collect(),
        ExtractMode::Sample(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            scores
                .iter()
                .map(|p| {
                    WeightedIndex::new(p)
                        .map(|w| w.sample(&mut rng))
                        .map_err(|e| Error::invalid(e.to_string()))
                })
                .collect::<Result<_>>()?
        }
    };
    Policy::new(picks.into_iter().map(|i| options[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::score::{AnalyticGmm, GmmSpec};

    fn hard_rows(steps: usize, k: usize, hot: usize) -> AlphaMatrix {
        AlphaMatrix::from_rows(
            (0..=steps)
                .map(|_| (0..k).map(|j| if j == hot { 30.0 } else { -30.0 }).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn hard_cond_reproduces_conditional_run() {
        let gmm = AnalyticGmm::new(GmmSpec::ring_default()).unwrap();
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 20).unwrap();
        let nfe = NfeCounter::new();
        let model = ScoreModel::new(&gmm, &sched, &nfe);
        let choices = ChoiceSet::default();
        let alpha = hard_rows(20, choices.len(), 1);
        assert!(alpha.scores()[0][1] > 1.0 - 1e-12);
        let soft = soft_forward(&model, SolverKind::Ddim, &alpha.logits, &choices, Condition::class(0), initial_noise(2, 4)).unwrap();
        let mut ctrl = PolicyController::new(Policy::uniform(20, GuidanceChoice::Cond));
        let (hard, _) = generate(&model, SolverKind::Ddim, &mut ctrl, Condition::class(0), 4).unwrap();
        assert_eq!(soft, hard);
    }

    #[test]
    fn soft_step_costs_two_nfe() {
        let gmm = AnalyticGmm::new(GmmSpec::ring_default()).unwrap();
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 6).unwrap();
        let nfe = NfeCounter::new();
        let model = ScoreModel::new(&gmm, &sched, &nfe);
        let choices = ChoiceSet::default();
        let alpha = AlphaMatrix::uniform_init(6, &choices, 0);
        soft_forward(&model, SolverKind::Ddim, &alpha.logits, &choices, Condition::class(1), initial_noise(2, 0)).unwrap();
        assert_eq!(nfe.get(), 12);
    }

    #[test]
    fn cost_proxy_at_and_over_cap() {
        let choices = ChoiceSet::default();
        let costs = choices.costs();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cond = hard_rows(20, 5, 1);
        let g = cost_proxy(&cond.logits, &costs, 21.0, 1.0, &mut rng).unwrap();
        assert!(g.item().unwrap() < 1e-9);
        let cfg = hard_rows(20, 5, 3);
        let g = cost_proxy(&cfg.logits, &costs, 21.0, 1.0, &mut rng).unwrap();
        assert!((g.item().unwrap() - 21.0).abs() < 1e-9);
        assert!(cost_proxy(&cfg.logits, &costs, 21.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn argmax_ties_prefer_cheap_options() {
        let choices = ChoiceSet::default();
        let alpha = AlphaMatrix::from_rows(vec![vec![0.0; 5]; 4]).unwrap();
        let p = extract_policy(&alpha, &choices, ExtractMode::Argmax).unwrap();
        assert!(p.choices().iter().all(|c| *c == GuidanceChoice::Uncond));
        // Tie between Cond and a CFG option resolves to Cond.
        let alpha = AlphaMatrix::from_rows(vec![vec![0.0, 1.0, 1.0, 1.0, 0.0]; 3]).unwrap();
        let p = extract_policy(&alpha, &choices, ExtractMode::Argmax).unwrap();
        assert!(p.choices().iter().all(|c| *c == GuidanceChoice::Cond));
    }

    #[test]
    fn one_hot_extraction_is_exact_in_both_modes() {
        let choices = ChoiceSet::default();
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..5).map(|j| if j == i % 5 { 800.0 } else { -800.0 }).collect())
            .collect();
        let alpha = AlphaMatrix::from_rows(rows).unwrap();
        let a = extract_policy(&alpha, &choices, ExtractMode::Argmax).unwrap();
        let s = extract_policy(&alpha, &choices, ExtractMode::Sample(9)).unwrap();
        assert_eq!(a, s);
        let opts = choices.options();
        for (i, c) in a.choices().iter().enumerate() {
            assert_eq!(*c, opts[i % 5]);
        }
    }

    #[test]
    fn alpha_json_round_trip() {
        let choices = ChoiceSet::default();
        let alpha = AlphaMatrix::uniform_init(4, &choices, 3);
        let (back, ch) = AlphaMatrix::from_json(&alpha.to_json(&choices)).unwrap();
        assert_eq!(back, alpha);
        assert_eq!(ch, choices);
    }

    #[test]
    fn config_bounds() {
        let mut c = SearchConfig::new(20);
        assert!(c.validate(20).is_ok());
        c.cost_cap = 20.0;
        assert!(c.validate(20).is_err());
        c.cost_cap = 21.0;
        c.lambda = -1.0;
        assert!(c.validate(20).is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        let gmm = AnalyticGmm::new(GmmSpec::ring_default()).unwrap();
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 4).unwrap();
        let err = search(&gmm, &sched, SolverKind::Ddim, &[], &SearchConfig::new(4)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }
}
