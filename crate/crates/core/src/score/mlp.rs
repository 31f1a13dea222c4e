use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Condition, GmmSpec, ScoreBackend};
use crate::diffusion::{NoiseLevel, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, AdamConfig, Checkpoint, OptimizerState, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_features: usize,
    /// Per-coordinate data variance, used to precondition the input.
    pub data_var: f64,
}

impl MlpConfig {
    pub fn for_spec(spec: &GmmSpec) -> Self {
        let d = spec.dim();
        let mut second = 0.0;
        let w = spec.weights(Condition::NULL).unwrap_or_default();
        for (wk, c) in w.iter().zip(&spec.components) {
            second += wk * c.mean.iter().zip(&c.var).map(|(m, v)| m * m + v).sum::<f64>();
        }
        Self {
            dim: d,
            classes: spec.num_classes(),
            hidden: 128,
            layers: 3,
            time_features: 16,
            data_var: (second / d as f64).max(1e-6),
        }
    }
}

/// ε-prediction MLP: the first hidden layer sums a projection of the
/// preconditioned latent, sinusoidal noise-level features and a learned
/// condition embedding (row `classes` is the null token).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScoreNet {
    config: MlpConfig,
    params: Vec<Tensor>,
}

fn param_names(layers: usize) -> Vec<String> {
    let mut names = vec!["w_in".into(), "w_time".into(), "embed".into(), "b_in".into()];
    for l in 1..layers {
        names.push(format!("w_h{l}"));
        names.push(format!("b_h{l}"));
    }
    names.push("w_out".into());
    names.push("b_out".into());
    names
}

impl MlpScoreNet {
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.hidden == 0 || config.layers == 0 || !config.time_features.is_multiple_of(2) {
            return Err(Error::config("mlp", "dim, hidden, layers must be positive and time_features even"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, f, c) = (config.dim, config.hidden, config.time_features, config.classes);
        let mut normal = |shape: &[usize], std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            let data = (0..shape.iter().product::<usize>()).map(|_| n.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches")
        };
        let mut params = vec![
            normal(&[d, h], (1.0 / d as f64).sqrt()),
            normal(&[f, h], (1.0 / f as f64).sqrt()),
            normal(&[c + 1, h], 0.5),
            Tensor::zeros(&[h]),
        ];
        for _ in 1..config.layers {
            params.push(normal(&[h, h], (1.0 / h as f64).sqrt()));
            params.push(Tensor::zeros(&[h]));
        }
        params.push(normal(&[h, d], 0.1 * (1.0 / h as f64).sqrt()));
        params.push(Tensor::zeros(&[d]));
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        let i = param_names(self.config.layers).iter().position(|n| n == name)?;
        self.params.get(i)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck: Checkpoint = param_names(self.config.layers)
            .into_iter()
            .zip(self.params.iter().cloned())
            .collect();
        ck.insert("data_var".into(), Tensor::from_vec(vec![self.config.data_var]));
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        let bad = |m: &str| Error::config("checkpoint", m.to_string());
        let data_var = ck.remove("data_var").ok_or_else(|| bad("missing data_var"))?.item()?;
        let layers = 1 + ck.keys().filter(|k| k.starts_with("w_h")).count();
        let shape = |name: &str, ck: &Checkpoint| -> Result<Vec<usize>> {
            Ok(ck.get(name).ok_or_else(|| bad(&format!("missing {name}")))?.shape().to_vec())
        };
        let w_in = shape("w_in", &ck)?;
        let w_time = shape("w_time", &ck)?;
        let embed = shape("embed", &ck)?;
        if w_in.len() != 2 || w_time.len() != 2 || embed.len() != 2 || embed[0] == 0 {
            return Err(bad("malformed layer shapes"));
        }
        let config = MlpConfig {
            dim: w_in[0],
            classes: embed[0] - 1,
            hidden: w_in[1],
            layers,
            time_features: w_time[0],
            data_var,
        };
        let template = Self::new(config.clone(), 0)?;
        let mut params = Vec::new();
        for (name, t) in param_names(layers).iter().zip(&template.params) {
            let p = ck.remove(name).ok_or_else(|| bad(&format!("missing {name}")))?;
            if p.shape() != t.shape() {
                return Err(bad(&format!("{name} has shape {:?}, expected {:?}", p.shape(), t.shape())));
            }
            params.push(p);
        }
        if let Some(extra) = ck.keys().next() {
            return Err(bad(&format!("unexpected tensor {extra}")));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(read_checkpoint(path)?)
    }

    fn embed_row(&self, cond: Condition) -> Result<usize> {
        if cond.edit.is_some() {
            return Err(Error::Unsupported("the MLP backend has no editing channel".into()));
        }
        match cond.class {
            None => Ok(self.config.classes),
            Some(c) if c < self.config.classes => Ok(c),
            Some(c) => Err(Error::UnknownClass {
                class: c,
                classes: self.config.classes,
            }),
        }
    }

    fn time_features(&self, level: NoiseLevel) -> Vec<f64> {
        // log-SNR squashed to [-1, 1], expanded into sin/cos pairs.
        let ab = level.alpha_bar.clamp(1e-12, 1.0 - 1e-12);
        let u = ((ab / (1.0 - ab)).ln() / 15.0).clamp(-1.0, 1.0);
        let half = self.config.time_features / 2;
        let mut out = Vec::with_capacity(2 * half);
        for i in 0..half {
            let freq = 32f64.powf(i as f64 / (half.max(2) - 1) as f64) * std::f64::consts::FRAC_PI_2;
            out.push((freq * u).sin());
            out.push((freq * u).cos());
        }
        out
    }

    /// Batched forward with explicit parameters (tracked during training).
    fn forward(&self, params: &[Tensor], x: &Tensor, levels: &[NoiseLevel], rows: &[usize]) -> Result<Tensor> {
        let (b, d) = (levels.len(), self.config.dim);
        if x.shape() != [b, d] {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                left: x.shape().to_vec(),
                right: vec![b, d],
            });
        }
        let c_in: Vec<f64> = levels
            .iter()
            .flat_map(|l| {
                let s = 1.0 / (l.alpha_bar * self.config.data_var + 1.0 - l.alpha_bar).sqrt();
                std::iter::repeat_n(s, d)
            })
            .collect();
        let feats: Vec<f64> = levels.iter().flat_map(|l| self.time_features(*l)).collect();
        let x_in = x.mul(&Tensor::new(vec![b, d], c_in)?)?;
        let phi = Tensor::new(vec![b, self.config.time_features], feats)?;
        let mut h = x_in
            .matmul(&params[0])?
            .add(&phi.matmul(&params[1])?)?
            .add(&params[2].gather_rows(rows)?)?
            .add_bias(&params[3])?
            .silu();
        let mut i = 4;
        for _ in 1..self.config.layers {
            h = h.matmul(&params[i])?.add_bias(&params[i + 1])?.silu();
            i += 2;
        }
        h.matmul(&params[i])?.add_bias(&params[i + 1])
    }
}

impl ScoreBackend for MlpScoreNet {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn num_classes(&self) -> usize {
        self.config.classes
    }

    fn predict(&self, x: &Tensor, level: NoiseLevel, cond: Condition) -> Result<Tensor> {
        let row = self.embed_row(cond)?;
        let d = self.config.dim;
        match x.shape() {
            [n] if *n == d => self.forward(&self.params, &x.reshape(&[1, d])?, &[level], &[row])?.reshape(&[d]),
            [b, n] if *n == d => self.forward(&self.params, x, &vec![level; *b], &vec![row; *b]),
            _ => Err(Error::ShapeMismatch {
                op: "predict",
                left: x.shape().to_vec(),
                right: vec![d],
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_uncond: f64,
    pub seed: u64,
    /// Noise levels are drawn as τ ~ U(0, 1) on this schedule.
    pub schedule: ScheduleKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            lr: 2e-3,
            p_uncond: 0.1,
            seed: 0,
            schedule: ScheduleKind::Cosine,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Last parameters with a finite loss.
    pub net: MlpScoreNet,
    pub losses: Vec<f64>,
    /// Set when a non-finite loss or gradient stopped training early.
    pub diverged_at: Option<usize>,
    /// Per-parameter gradient norm accumulated over training (diagnostic).
    pub grad_traffic: Vec<f64>,
}

/// Denoising score matching with condition dropout.
pub fn train_mlp(spec: &GmmSpec, mut net: MlpScoreNet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&cfg.p_uncond) {
        return Err(Error::config("p_uncond", "must lie in [0, 1]"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if spec.dim() != net.config.dim || spec.num_classes() != net.config.classes {
        return Err(Error::config("mlp", "network shape does not match the data spec"));
    }
    let schedule = NoiseSchedule::new(cfg.schedule, 1000)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::adam(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let (b, d) = (cfg.batch_size, net.config.dim);
    let class_index = rand_distr::weighted::WeightedIndex::new(&spec.priors).map_err(|e| Error::invalid(e.to_string()))?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut grad_traffic = vec![0.0; net.params.len()];
    for step in 0..cfg.steps {
        let mut xt = Vec::with_capacity(b * d);
        let mut target = Vec::with_capacity(b * d);
        let mut levels = Vec::with_capacity(b);
        let mut rows = Vec::with_capacity(b);
        for _ in 0..b {
            let c = class_index.sample(&mut rng);
            let x0 = spec.sample(Condition::class(c), &mut rng)?;
            let tau: f64 = rng.random_range(1e-3..1.0);
            let level = schedule.level_at(tau);
            for x in x0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                xt.push(level.alpha() * x + level.sigma() * e);
                target.push(e);
            }
            levels.push(level);
            let drop = rng.random::<f64>() < cfg.p_uncond;
            rows.push(if drop { net.config.classes } else { c });
        }
        let tape = Tape::new();
        let params: Vec<Tensor> = net.params.iter().map(|p| tape.leaf(p)).collect();
        let x = Tensor::new(vec![b, d], xt)?;
        let pred = net.forward(&params, &x, &levels, &rows)?;
        let loss = pred.sub(&Tensor::new(vec![b, d], target)?)?.square().mean();
        let value = loss.item()?;
        if !value.is_finite() {
            return Ok(TrainOutcome {
                net,
                losses,
                diverged_at: Some(step),
                grad_traffic,
            });
        }
        let grads = tape.backward(&loss)?;
        let grads: Vec<Tensor> = params.iter().map(|p| grads.wrt(p)).collect();
        for (acc, g) in grad_traffic.iter_mut().zip(&grads) {
            *acc += g.sq_norm().sqrt();
        }
        // Cosine decay to 10% of the base rate.
        let progress = step as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
        if let crate::tensor::OptimizerKind::Adam(c) = &mut opt.kind {
            c.lr = lr;
        }
        let before = net.params.clone();
        if opt.step(&mut net.params, &grads).is_err() || net.params.iter().any(|p| !p.is_finite()) {
            net.params = before;
            return Ok(TrainOutcome {
                net,
                losses,
                diverged_at: Some(step),
                grad_traffic,
            });
        }
        losses.push(value);
    }
    Ok(TrainOutcome {
        net,
        losses,
        diverged_at: None,
        grad_traffic,
    })
}
