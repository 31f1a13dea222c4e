use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Condition, ScoreBackend};
use crate::diffusion::NoiseLevel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    /// Diagonal covariance.
    pub var: Vec<f64>,
}

/// Mixture over a shared component list; each class is a weight vector over
/// those components (zeros allowed, so fully disjoint classes are expressible).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub components: Vec<Component>,
    pub class_weights: Vec<Vec<f64>>,
    pub priors: Vec<f64>,
}

impl GmmSpec {
    /// `k` unit-ish blobs on a circle of `radius`, two classes. Class 0 puts
    /// `bias`× more weight on the left half, class 1 on the right half, so the
    /// classes overlap on every component.
    pub fn ring(k: usize, radius: f64, var: f64, bias: f64) -> Self {
        let angles: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) * 2.0 * PI / k as f64).collect();
        let components = angles
            .iter()
            .map(|a| Component {
                mean: vec![radius * a.cos(), radius * a.sin()],
                var: vec![var; 2],
            })
            .collect();
        let weights = |left: bool| {
            let w: Vec<f64> = angles
                .iter()
                .map(|a| if (a.cos() < 0.0) == left { bias } else { 1.0 })
                .collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|v| v / z).collect()
        };
        Self {
            components,
            class_weights: vec![weights(true), weights(false)],
            priors: vec![0.5, 0.5],
        }
    }

    /// The overlapping two-class toy distribution used throughout the experiments.
    pub fn ring_default() -> Self {
        Self::ring(8, 18.0, 1.0, 4.0)
    }

    /// Two broad, well-overlapping Gaussians (one per class): a smooth target.
    pub fn two_blobs() -> Self {
        Self {
            components: vec![
                Component {
                    mean: vec![-1.5, 0.0],
                    var: vec![1.0, 1.0],
                },
                Component {
                    mean: vec![1.5, 0.5],
                    var: vec![1.0, 1.0],
                },
            ],
            class_weights: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            priors: vec![0.5, 0.5],
        }
    }

    /// One class, one component.
    pub fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self {
            components: vec![Component { mean, var }],
            class_weights: vec![vec![1.0]],
            priors: vec![1.0],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ring" => Ok(Self::ring_default()),
            "two-blobs" => Ok(Self::two_blobs()),
            "gaussian" => Ok(Self::gaussian(vec![2.0, 1.0], vec![0.5, 2.0])),
            _ => Err(Error::config("gmm", format!("unknown preset `{name}` (ring|two-blobs|gaussian)"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.components.is_empty() || d == 0 {
            return Err(Error::config("components", "need at least one component of positive dimension"));
        }
        for (k, c) in self.components.iter().enumerate() {
            if c.mean.len() != d || c.var.len() != d {
                return Err(Error::config(format!("components[{k}]"), format!("mean and var must have dimension {d}")));
            }
            if c.var.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::config(format!("components[{k}].var"), "covariance entries must be > 0"));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::config(format!("components[{k}].mean"), "must be finite"));
            }
        }
        if self.class_weights.is_empty() {
            return Err(Error::config("class_weights", "need at least one class"));
        }
        for (c, w) in self.class_weights.iter().enumerate() {
            let field = format!("class_weights[{c}]");
            if w.len() != self.components.len() {
                return Err(Error::config(field, "one weight per component required"));
            }
            check_distribution(&field, w)?;
        }
        if self.priors.len() != self.class_weights.len() {
            return Err(Error::config("priors", "one prior per class required"));
        }
        check_distribution("priors", &self.priors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        let spec: Self = serde_json::from_slice(&bytes)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Component weights of p(x | cond). A joint (class, edit) condition treats
    /// both labels as independent evidence about the component.
    pub fn weights(&self, cond: Condition) -> Result<Vec<f64>> {
        let uncond = self.uncond_weights();
        let pick = |c: usize| {
            self.class_weights.get(c).cloned().ok_or(Error::UnknownClass {
                class: c,
                classes: self.num_classes(),
            })
        };
        match (cond.class, cond.edit) {
            (None, None) => Ok(uncond),
            (Some(c), None) | (None, Some(c)) => pick(c),
            (Some(c), Some(i)) => {
                let (wc, wi) = (pick(c)?, pick(i)?);
                let mut w: Vec<f64> = (0..uncond.len())
                    .map(|k| if uncond[k] > 0.0 { wc[k] * wi[k] / uncond[k] } else { 0.0 })
                    .collect();
                let z: f64 = w.iter().sum();
                if z <= 0.0 {
                    return Err(Error::invalid(format!("condition {cond} has no support")));
                }
                w.iter_mut().for_each(|v| *v /= z);
                Ok(w)
            }
        }
    }

    fn uncond_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.components.len()];
        for (pi, cw) in self.priors.iter().zip(&self.class_weights) {
            w.iter_mut().zip(cw).for_each(|(a, b)| *a += pi * b);
        }
        w
    }

    /// Draw from p(x | cond) at τ = 0.
    pub fn sample<R: Rng + ?Sized>(&self, cond: Condition, rng: &mut R) -> Result<Vec<f64>> {
        let w = self.weights(cond)?;
        let k = WeightedIndex::new(&w).map_err(|e| Error::invalid(e.to_string()))?.sample(rng);
        let c = &self.components[k];
        Ok(c.mean
            .iter()
            .zip(&c.var)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect())
    }

    /// Class-conditional mean at τ = 0.
    pub fn mean(&self, cond: Condition) -> Result<Vec<f64>> {
        let w = self.weights(cond)?;
        let mut m = vec![0.0; self.dim()];
        for (wk, c) in w.iter().zip(&self.components) {
            m.iter_mut().zip(&c.mean).for_each(|(a, b)| *a += wk * b);
        }
        Ok(m)
    }
}

fn check_distribution(field: &str, w: &[f64]) -> Result<()> {
    if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::config(field, "entries must be finite and non-negative"));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::config(field, format!("must sum to 1, sums to {s}")));
    }
    Ok(())
}

/// Exact ε of a Gaussian mixture pushed through the forward process:
/// N(μ_k, Σ_k) becomes N(α μ_k, α² Σ_k + σ² I).
#[derive(Debug, Clone)]
pub struct AnalyticGmm {
    spec: GmmSpec,
}

struct Posterior {
    resp: Vec<f64>,
    /// Per-component score −(x − αμ_k)/v_k, flattened [K × d].
    comp_scores: Vec<f64>,
    /// Diffused variances, flattened [K × d].
    vars: Vec<f64>,
    score: Vec<f64>,
    log_density: f64,
}

impl AnalyticGmm {
    pub fn new(spec: GmmSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &GmmSpec {
        &self.spec
    }

    fn posterior(&self, x: &[f64], level: NoiseLevel, w: &[f64]) -> Posterior {
        let d = x.len();
        let (a, s2) = (level.alpha(), 1.0 - level.alpha_bar);
        let k = self.spec.components.len();
        let mut logits = vec![f64::NEG_INFINITY; k];
        let mut comp_scores = vec![0.0; k * d];
        let mut vars = vec![0.0; k * d];
        for (j, c) in self.spec.components.iter().enumerate() {
            let mut lp = 0.0;
            for i in 0..d {
                let v = a * a * c.var[i] + s2;
                let r = x[i] - a * c.mean[i];
                vars[j * d + i] = v;
                comp_scores[j * d + i] = -r / v;
                lp += -0.5 * (r * r / v + v.ln() + (2.0 * PI).ln());
            }
            if w[j] > 0.0 {
                logits[j] = w[j].ln() + lp;
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = resp.iter().sum();
        resp.iter_mut().for_each(|r| *r /= z);
        let mut score = vec![0.0; d];
        for j in 0..k {
            for i in 0..d {
                score[i] += resp[j] * comp_scores[j * d + i];
            }
        }
        Posterior {
            resp,
            comp_scores,
            vars,
            score,
            log_density: max + z.ln(),
        }
    }

    /// log p_τ(x | cond).
    pub fn log_density(&self, x: &[f64], level: NoiseLevel, cond: Condition) -> Result<f64> {
        let w = self.spec.weights(cond)?;
        Ok(self.posterior(x, level, &w).log_density)
    }

    /// ∇_x log p_τ(x | cond).
    pub fn score(&self, x: &[f64], level: NoiseLevel, cond: Condition) -> Result<Vec<f64>> {
        let w = self.spec.weights(cond)?;
        Ok(self.posterior(x, level, &w).score)
    }
}

impl ScoreBackend for AnalyticGmm {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    fn predict(&self, x: &Tensor, level: NoiseLevel, cond: Condition) -> Result<Tensor> {
        let d = self.dim();
        if x.shape().last() != Some(&d) || x.shape().len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "predict",
                left: x.shape().to_vec(),
                right: vec![d],
            });
        }
        let w = self.spec.weights(cond)?;
        let sigma = level.sigma();
        let posts: Vec<Posterior> = x.data().chunks(d).map(|row| self.posterior(row, level, &w)).collect();
        let eps: Vec<f64> = posts.iter().flat_map(|p| p.score.iter().map(|s| -sigma * s)).collect();
        Ok(Tensor::from_op(&[x], x.shape().to_vec(), eps, || {
            // ∂s/∂x = Σ_k r_k [diag(−1/v_k) + s_k s_kᵀ] − s sᵀ, symmetric; ε = −σ s.
            Box::new(move |g| {
                let mut out = vec![0.0; g.len()];
                for ((p, g), o) in posts.iter().zip(g.chunks(d)).zip(out.chunks_mut(d)) {
                    let s_dot_g: f64 = p.score.iter().zip(g).map(|(a, b)| a * b).sum();
                    for (k, &r) in p.resp.iter().enumerate() {
                        if r == 0.0 {
                            continue;
                        }
                        let sk = &p.comp_scores[k * d..(k + 1) * d];
                        let vk = &p.vars[k * d..(k + 1) * d];
                        let sk_dot_g: f64 = sk.iter().zip(g).map(|(a, b)| a * b).sum();
                        for i in 0..d {
                            o[i] += r * (-g[i] / vk[i] + sk[i] * sk_dot_g);
                        }
                    }
                    for i in 0..d {
                        o[i] = -sigma * (o[i] - p.score[i] * s_dot_g);
                    }
                }
                vec![out]
            })
        }))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tape;

    fn level(alpha_bar: f64) -> NoiseLevel {
        NoiseLevel { tau: 0.5, alpha_bar }
    }

    #[test]
    fn single_unit_gaussian_closed_form() {
        let mu = [1.5, -0.5];
        let gmm = AnalyticGmm::new(GmmSpec::gaussian(mu.to_vec(), vec![1.0, 1.0])).unwrap();
        let lv = level(0.36);
        let x = [0.2, 0.7];
        let s = gmm.score(&x, lv, Condition::class(0)).unwrap();
        let a = lv.alpha();
        let v = a * a + 1.0 - lv.alpha_bar;
        for i in 0..2 {
            assert!((s[i] + (x[i] - a * mu[i]) / v).abs() < 1e-14);
        }
    }

    #[test]
    fn pure_noise_limit_is_standard_normal_score() {
        let gmm = AnalyticGmm::new(GmmSpec::ring_default()).unwrap();
        let x = [0.4, -1.1];
        let s = gmm.score(&x, level(1e-14), Condition::NULL).unwrap();
        assert!((s[0] + x[0]).abs() < 1e-5 && (s[1] + x[1]).abs() < 1e-5, "{s:?}");
    }

    #[test]
    fn symmetric_mixture_midpoint_has_zero_eps() {
        let spec = GmmSpec {
            components: vec![
                Component {
                    mean: vec![-2.0, 1.0],
                    var: vec![0.5, 0.5],
                },
                Component {
                    mean: vec![2.0, 1.0],
                    var: vec![0.5, 0.5],
                },
            ],
            class_weights: vec![vec![0.5, 0.5]],
            priors: vec![1.0],
        };
        let gmm = AnalyticGmm::new(spec).unwrap();
        let lv = level(0.49);
        let x = Tensor::from_vec(vec![0.0, lv.alpha()]);
        let eps = gmm.predict(&x, lv, Condition::NULL).unwrap();
        assert!(eps.data()[0].abs() < 1e-15 && eps.data()[1].abs() < 1e-15);
        // Off the mean: still no component along the separating axis.
        let x = Tensor::from_vec(vec![0.0, 3.0]);
        let eps = gmm.predict(&x, lv, Condition::NULL).unwrap();
        assert!(eps.data()[0].abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = GmmSpec::ring_default();
        spec.components[3].var[1] = 0.0;
        assert!(AnalyticGmm::new(spec).is_err());
        let mut spec = GmmSpec::ring_default();
        spec.priors = vec![0.7, 0.7];
        assert!(spec.validate().is_err());
        let mut spec = GmmSpec::ring_default();
        spec.class_weights[0][0] += 0.1;
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("class_weights[0]"), "{msg}");
    }

    #[test]
    fn score_matches_numeric_gradient_of_log_density() {
        let gmm = AnalyticGmm::new(GmmSpec::ring(6, 4.0, 0.7, 3.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..100 {
            let ab: f64 = rng.random_range(0.02..0.98);
            let lv = level(ab);
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-6.0..6.0)).collect();
            let cond = [Condition::NULL, Condition::class(0), Condition::class(1)][i % 3];
            let s = gmm.score(&x, lv, cond).unwrap();
            for j in 0..2 {
                let h = 1e-5;
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[j] += h;
                xm[j] -= h;
                let fd = (gmm.log_density(&xp, lv, cond).unwrap() - gmm.log_density(&xm, lv, cond).unwrap()) / (2.0 * h);
                let err = (fd - s[j]).abs() / s[j].abs().max(1e-2);
                assert!(err < 1e-5, "x={x:?} ab={ab}: fd {fd} vs {}", s[j]);
            }
        }
    }

    #[test]
    fn eps_vjp_matches_finite_differences() {
        let gmm = AnalyticGmm::new(GmmSpec::ring(5, 3.0, 0.6, 2.0)).unwrap();
        let lv = level(0.4);
        let x0 = vec![0.7, -0.9, 1.3, 0.2];
        let gvec = Tensor::new(vec![2, 2], vec![0.3, -1.1, 0.5, 0.8]).unwrap();
        let f = |x: &[f64]| {
            let t = Tensor::new(vec![2, 2], x.to_vec()).unwrap();
            let e = gmm.predict(&t, lv, Condition::class(1)).unwrap();
            e.data().iter().zip(gvec.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2, 2], x0.clone()).unwrap());
        let loss = gmm.predict(&x, lv, Condition::class(1)).unwrap().dot(&gvec).unwrap();
        let grad = tape.backward(&loss).unwrap().wrt(&x);
        for i in 0..4 {
            let h = 1e-5;
            let (mut p, mut m) = (x0.clone(), x0.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() < 1e-7 * (1.0 + fd.abs()), "{i}: {fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn ring_classes_share_components() {
        let spec = GmmSpec::ring_default();
        assert_eq!(spec.components.len(), 8);
        for w in &spec.class_weights {
            assert!(w.iter().all(|&v| v > 0.0));
        }
        let m0 = spec.mean(Condition::class(0)).unwrap();
        let m1 = spec.mean(Condition::class(1)).unwrap();
        assert!(m0[0] < 0.0 && m1[0] > 0.0);
        assert!((m0[0] + m1[0]).abs() < 1e-12);
    }

    #[test]
    fn joint_condition_combines_evidence() {
        let spec = GmmSpec::ring_default();
        let w = spec.weights(Condition::class(0).with_edit(0)).unwrap();
        let w0 = spec.weights(Condition::class(0)).unwrap();
        // Agreeing labels sharpen toward the left half.
        let left = |w: &[f64]| -> f64 {
            w.iter().zip(&spec.components).filter(|(_, c)| c.mean[0] < 0.0).map(|(w, _)| w).sum()
        };
        assert!(left(&w) > left(&w0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn samples_follow_the_class() {
        let spec = GmmSpec::ring_default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4000;
        let mean_x: f64 = (0..n).map(|_| spec.sample(Condition::class(0), &mut rng).unwrap()[0]).sum::<f64>() / n as f64;
        let want = spec.mean(Condition::class(0)).unwrap()[0];
        assert!((mean_x - want).abs() < 0.6, "{mean_x} vs {want}");
    }
}
