//! Full-length MLP training against the analytic oracle.

use guidance_lab::diffusion::{NoiseSchedule, ScheduleKind};
use guidance_lab::score::{train_mlp, AnalyticGmm, Component, Condition, GmmSpec, MlpConfig, MlpScoreNet, ScoreBackend, TrainConfig};
use guidance_lab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// One tight blob per class. With unit-variance or overlapping components the
/// irreducible ε-prediction loss alone sits near 0.4, so an order-of-magnitude
/// drop needs data the network can pin down almost exactly (floor ≈ 0.045).
fn tight_pair() -> GmmSpec {
    let blob = |x: f64| Component {
        mean: vec![x, 0.0],
        var: vec![0.002; 2],
    };
    GmmSpec {
        components: vec![blob(-2.0), blob(2.0)],
        class_weights: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        priors: vec![0.5, 0.5],
    }
}

#[test]
fn trained_mlp_matches_analytic_oracle() {
    let spec = tight_pair();
    let net = MlpScoreNet::new(MlpConfig::for_spec(&spec), 11).unwrap();
    let out = train_mlp(
        &spec,
        net,
        &TrainConfig {
            steps: 20_000,
            p_uncond: 0.1,
            seed: 3,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(out.diverged_at, None);
    let head: f64 = out.losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = out.losses[out.losses.len() - 1000..].iter().sum::<f64>() / 1000.0;

    // Held-out points: fresh diffused samples on the T = 20 sampling grid.
    let oracle = AnalyticGmm::new(spec.clone()).unwrap();
    let schedule = NoiseSchedule::new(ScheduleKind::Cosine, 20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut se, mut cos, mut n) = (0.0, 0.0, 0usize);
    for t in 1..=20 {
        let level = schedule.level(t).unwrap();
        for i in 0..60 {
            let cond = match i % 3 {
                0 => Condition::NULL,
                k => Condition::class(k - 1),
            };
            let c = if cond.is_null() { rng.random_range(0..2) } else { cond.class.unwrap() };
            let x0 = spec.sample(Condition::class(c), &mut rng).unwrap();
            let x: Vec<f64> = x0
                .iter()
                .map(|v| level.alpha() * v + level.sigma() * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let x = Tensor::from_vec(x);
            let a = oracle.predict(&x, level, cond).unwrap();
            let b = out.net.predict(&x, level, cond).unwrap();
            se += a.sub(&b).unwrap().sq_norm() / 2.0;
            cos += a.dot(&b).unwrap().item().unwrap() / (a.sq_norm() * b.sq_norm()).sqrt();
            n += 1;
        }
    }
    let (mse, cos) = (se / n as f64, cos / n as f64);
    println!("loss {head:.4} -> {tail:.4} (x{:.1}); held-out mse {mse:.4}, cosine {cos:.4}", head / tail);
    assert!(head / tail >= 10.0, "loss fell only {:.1}x", head / tail);
    assert!(mse < 0.05, "mse {mse}");
    assert!(cos > 0.95, "cosine {cos}");
}
