//! Cross-module invariants: sampler, guidance, search, LinearAG and metrics.

use std::sync::Arc;

use guidance_lab::diffusion::{generate, generate_from, NoiseSchedule, ScheduleKind, SolverKind, Trajectory};
use guidance_lab::eval::{endpoint_replication, gamma_curves, run_policy, sliced_wasserstein, PolicySpec, Stats, Z99};
use guidance_lab::guidance::{AgConfig, AgController, Controller, GuidanceChoice, Policy, PolicyController};
use guidance_lab::linear::{
    collect_paths, fit_all, fit_ols, linear_ag_policy, naive_interleave_policy, ols_mse, plan_nfe, CoeffRow, LinearAgController,
    PathDataset, PlanStep,
};
use guidance_lab::score::{AnalyticGmm, Condition, GmmSpec, NfeCounter, ScoreBackend, ScoreModel};
use guidance_lab::search::{extract_policy, make_dataset, search, AlphaMatrix, ChoiceSet, ExtractMode, SearchConfig};
use guidance_lab::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const S: f64 = 7.5;

fn ring() -> AnalyticGmm {
    AnalyticGmm::new(GmmSpec::ring_default()).unwrap()
}

fn cosine(steps: usize) -> NoiseSchedule {
    NoiseSchedule::new(ScheduleKind::Cosine, steps).unwrap()
}

fn run(backend: &dyn ScoreBackend, sched: &NoiseSchedule, ctrl: &mut dyn Controller, cond: Condition, seed: u64) -> (Tensor, Trajectory, u64) {
    let nfe = NfeCounter::new();
    let model = ScoreModel::new(backend, sched, &nfe);
    let (x0, traj) = generate(&model, SolverKind::Ddim, ctrl, cond, seed).unwrap();
    (x0, traj, nfe.get())
}

fn choice_strategy() -> impl Strategy<Value = GuidanceChoice> {
    prop_oneof![
        Just(GuidanceChoice::Uncond),
        Just(GuidanceChoice::Cond),
        (0.0f64..20.0).prop_map(|s| GuidanceChoice::Cfg((s * 8.0).round() / 8.0)),
    ]
}

#[test]
fn generation_is_bitwise_deterministic() {
    let gmm = ring();
    let sched = cosine(20);
    for solver in [SolverKind::Ddim, SolverKind::EulerOde] {
        let go = || {
            let nfe = NfeCounter::new();
            let model = ScoreModel::new(&gmm, &sched, &nfe);
            let mut ag = AgController::new(AgConfig::new(0.99), S);
            generate(&model, solver, &mut ag, Condition::class(1), 42).unwrap()
        };
        let (a, ta) = go();
        let (b, tb) = go();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }
}

#[test]
fn fixed_policy_costs() {
    let gmm = ring();
    let sched = cosine(20);
    let cases = [
        (Policy::full_cfg(20, S), 40),
        (Policy::uniform(20, GuidanceChoice::Cond), 20),
        (Policy::uniform(20, GuidanceChoice::Uncond), 20),
        (Policy::truncated(20, 12, S), 32),
        (Policy::truncated(20, 10, S), 30),
    ];
    for (policy, want) in cases {
        assert_eq!(policy.nfe(), want);
        let (_, traj, n) = run(&gmm, &sched, &mut PolicyController::new(policy.clone()), Condition::class(0), 1);
        assert_eq!(n, want);
        assert_eq!(traj.total_nfe(), want);
        assert_eq!(policy.total_cost(), policy.nfe() + policy.choices().last().unwrap().cost());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 40, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn nfe_ledger_closes_for_any_policy(choices in prop::collection::vec(choice_strategy(), 9), seed in 0u64..1000) {
        let gmm = ring();
        let sched = cosine(8);
        let policy = Policy::new(choices).unwrap();
        let (_, traj, n) = run(&gmm, &sched, &mut PolicyController::new(policy.clone()), Condition::class((seed % 2) as usize), seed);
        prop_assert_eq!(n, policy.nfe());
        let mut prev = 0;
        for rec in &traj.steps {
            let cost = policy.at(rec.t).unwrap().cost();
            prop_assert_eq!(rec.nfe, prev + cost);
            prev = rec.nfe;
        }
        prop_assert_eq!(prev, n);
    }

    #[test]
    fn policy_json_round_trip(choices in prop::collection::vec(choice_strategy(), 3..30)) {
        let p = Policy::new(choices).unwrap();
        let back = Policy::from_json(&p.to_json()).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.nfe(), p.nfe());
    }

    #[test]
    fn ag_latch_is_monotone_and_costs_t_plus_m(gamma_bar in -1.0f64..1.0, seed in 0u64..500) {
        let gmm = ring();
        let sched = cosine(20);
        let mut ag = AgController::new(AgConfig::new(gamma_bar), S);
        let (_, traj, n) = run(&gmm, &sched, &mut ag, Condition::class((seed % 2) as usize), seed);
        let m = ag.guided_steps() as u64;
        prop_assert_eq!(n, 20 + m);
        let labels: Vec<bool> = traj.steps.iter().map(|s| s.choice == "cond").collect();
        // Once conditional, always conditional; the first step is always guided.
        prop_assert!(!labels[0]);
        prop_assert!(labels.windows(2).all(|w| !w[0] || w[1]));
        // The switch happens right after the first step whose γ clears the bar.
        let first_aligned = traj.steps.iter().position(|s| s.gamma.is_some_and(|g| g > gamma_bar));
        prop_assert_eq!(first_aligned.map_or(20, |i| i + 1) as u64, m);
    }

    #[test]
    fn analytic_score_is_gradient_of_log_density(x in -25.0f64..25.0, y in -25.0f64..25.0, t in 1usize..=20, c in 0usize..3) {
        let gmm = ring();
        let level = cosine(20).level(t).unwrap();
        let cond = if c == 2 { Condition::NULL } else { Condition::class(c) };
        let p = [x, y];
        let score = gmm.score(&p, level, cond).unwrap();
        let h = 1e-5;
        for d in 0..2 {
            let at = |dv: f64| {
                let mut q = p;
                q[d] += dv;
                gmm.log_density(&q, level, cond).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let rel = (score[d] - fd).abs() / score[d].abs().max(fd.abs()).max(1.0);
            prop_assert!(rel < 1e-5, "d{} score {} fd {}", d, score[d], fd);
        }
    }
}

#[test]
fn trajectory_jsonl_round_trip() {
    let gmm = ring();
    let sched = cosine(20);
    let (_, traj, _) = run(&gmm, &sched, &mut AgController::new(AgConfig::new(0.99), S), Condition::class(1), 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    traj.write_jsonl(&path).unwrap();
    assert_eq!(Trajectory::read_jsonl(&path).unwrap(), traj);
    assert!(matches!(Trajectory::read_jsonl(&dir.path().join("nope.jsonl")), Err(Error::MissingArtifact(_))));
}

/// Starting from exact samples of the terminal marginal, a fine deterministic
/// sampler lands on the data distribution, up to the sampling noise between
/// two independent data sets.
#[test]
fn ddim_preserves_marginals() {
    let spec = GmmSpec::ring_default();
    let gmm = AnalyticGmm::new(spec.clone()).unwrap();
    let sched = cosine(100);
    let top = sched.level(100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    let draw = |rng: &mut ChaCha8Rng| spec.sample(Condition::NULL, rng).unwrap();
    let data_a: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut rng)).collect();
    let data_b: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut rng)).collect();
    let nfe = NfeCounter::new();
    let model = ScoreModel::new(&gmm, &sched, &nfe);
    let ends: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let x0 = draw(&mut rng);
            let xt: Vec<f64> = x0
                .iter()
                .map(|v| top.alpha() * v + top.sigma() * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let mut ctrl = PolicyController::new(Policy::uniform(100, GuidanceChoice::Uncond));
            generate_from(&model, SolverKind::Ddim, &mut ctrl, Condition::NULL, Tensor::from_vec(xt))
                .unwrap()
                .0
                .into_data()
        })
        .collect();
    let noise = sliced_wasserstein(&data_a, &data_b, 64, 1).unwrap();
    let gap = sliced_wasserstein(&ends, &data_a, 64, 1).unwrap();
    println!("SW(sampler, data) {gap:.4}; SW(data, data') {noise:.4}");
    assert!(gap < 3.0 * noise, "sampler {gap} vs two-sample noise {noise}");
}

#[test]
fn single_class_branches_coincide() {
    let gmm = AnalyticGmm::new(GmmSpec::preset("gaussian").unwrap()).unwrap();
    let sched = cosine(20);
    let (_, traj, _) = run(&gmm, &sched, &mut PolicyController::new(Policy::full_cfg(20, S)), Condition::class(0), 3);
    for rec in &traj.steps {
        assert!((rec.gamma.unwrap() - 1.0).abs() < 1e-12, "t={} γ={:?}", rec.t, rec.gamma);
    }
}

#[test]
fn ring_gamma_approaches_one_late() {
    let gmm = ring();
    let sched = cosine(20);
    let runs = run_policy(&gmm, &sched, SolverKind::Ddim, &PolicySpec::cfg(20, S), &(0..200).collect::<Vec<_>>(), 1).unwrap();
    let trajs: Vec<Trajectory> = runs.into_iter().map(|r| r.trajectory).collect();
    let curve = gamma_curves(&trajs);
    assert_eq!(curve.len(), 20);
    assert_eq!(curve[0].t, 20);
    let late: Vec<f64> = curve.iter().filter(|r| r.t <= 5).map(|r| r.mean).collect();
    assert!(late.iter().all(|&g| g > 0.95), "{late:?}");
    assert!(curve[0].mean < late[0]);
}

/// Toy counterpart of the paper's average AG cost: mean NFE at γ̄ = 0.99 on
/// the ring over seeds 0..999, pinned so regressions show up.
#[test]
fn ag_mean_nfe_regression_pin() {
    let gmm = ring();
    let sched = cosine(20);
    let seeds: Vec<u64> = (0..1000).collect();
    let runs = run_policy(&gmm, &sched, SolverKind::Ddim, &PolicySpec::Ag { gamma_bar: 0.99, s: S }, &seeds, 1).unwrap();
    let mean = runs.iter().map(|r| r.nfe).sum::<u64>() as f64 / 1000.0;
    println!("AG mean NFE at γ̄=0.99: {mean}");
    assert_eq!(mean, PINNED_AG_NFE);
}

const PINNED_AG_NFE: f64 = 21.982;

#[test]
fn negative_prompt_pushes_away_from_negative_class() {
    let spec = GmmSpec::two_blobs();
    let gmm = AnalyticGmm::new(spec.clone()).unwrap();
    let sched = cosine(20);
    let centroid = spec.mean(Condition::class(0)).unwrap();
    let dist = |x: &Tensor| x.data().iter().zip(&centroid).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let (mut plain, mut steered) = (0.0, 0.0);
    for seed in 0..200 {
        let (a, ..) = run(&gmm, &sched, &mut PolicyController::new(Policy::uniform(20, GuidanceChoice::Cond)), Condition::class(1), seed);
        let mut neg = PolicyController::new(Policy::full_cfg(20, 3.0)).with_negative(Condition::class(0));
        let (b, ..) = run(&gmm, &sched, &mut neg, Condition::class(1), seed);
        plain += dist(&a);
        steered += dist(&b);
    }
    println!("mean distance to negative centroid: plain {:.3}, steered {:.3}", plain / 200.0, steered / 200.0);
    assert!(steered > plain);
}

#[test]
fn confidence_interval_shrinks_with_root_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ratios = Vec::new();
    for _ in 0..200 {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| 3.0 + 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect() };
        let (a, b) = (Stats::from_samples(&draw(25)).unwrap(), Stats::from_samples(&draw(100)).unwrap());
        for s in [a, b] {
            assert!((s.half_width() - Z99 * s.sd / (s.n as f64).sqrt()).abs() < 1e-12);
            assert!((s.ci_high - s.ci_low - 2.0 * s.half_width()).abs() < 1e-12);
        }
        ratios.push(a.half_width() / b.half_width());
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((mean - 2.0).abs() < 0.1, "mean width ratio {mean}");
}

/// Shifting a sample by Δ moves every projection by Δ·u, so the sliced
/// distance is E|Δ·u| = |Δ|·2/π for directions uniform on the circle.
#[test]
fn sliced_wasserstein_of_a_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Vec<Vec<f64>> = (0..500)
        .map(|_| (0..2).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect())
        .collect();
    let delta = [1.2, -0.9];
    let b: Vec<Vec<f64>> = a.iter().map(|x| vec![x[0] + delta[0], x[1] + delta[1]]).collect();
    let sw = sliced_wasserstein(&a, &b, 20_000, 7).unwrap();
    let want = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt() * 2.0 / std::f64::consts::PI;
    assert!((sw - want).abs() / want < 0.02, "sw {sw} vs {want}");
    assert!(sliced_wasserstein(&a, &a, 10, 7).unwrap() < 1e-12);
}

fn cheap_fraction_search(lambda: f64) -> Policy {
    let gmm = ring();
    let sched = cosine(10);
    let data = make_dataset(&gmm, &sched, SolverKind::Ddim, S, 32, 0).unwrap();
    let mut config = SearchConfig::new(10);
    config.lambda = lambda;
    config.cost_cap = 11.0;
    config.epochs = 10;
    let out = search(&gmm, &sched, SolverKind::Ddim, &data, &config).unwrap();
    extract_policy(&out.alpha, &config.choices, ExtractMode::Argmax).unwrap()
}

#[test]
fn heavy_cost_penalty_yields_cheap_policy() {
    let p = cheap_fraction_search(100.0);
    println!("λ=100 policy {:?}, cost {}", p.choices(), p.total_cost());
    assert!(p.total_cost() <= 12, "{p:?}");
}

#[test]
fn single_pair_search_improves_replication() {
    let gmm = ring();
    let sched = cosine(10);
    let data = make_dataset(&gmm, &sched, SolverKind::Ddim, S, 1, 3).unwrap();
    let mut config = SearchConfig::new(10);
    config.lambda = 0.0;
    config.epochs = 30;
    let out = search(&gmm, &sched, SolverKind::Ddim, &data, &config).unwrap();
    let first = out.history[0].replication;
    let last = out.history.last().unwrap().replication;
    println!("one-pair replication {first:.4} -> {last:.4}");
    assert!(last < first);
}

#[test]
fn sampled_extraction_matches_softmax_frequencies() {
    let rows = vec![vec![0.0, 1.0, -1.0, 0.5, 2.0], vec![1.0, 1.0, 1.0, 1.0, 1.0], vec![-2.0, 0.0, 3.0, 0.0, -1.0]];
    let alpha = AlphaMatrix::from_rows(rows).unwrap();
    let choices = ChoiceSet::default();
    let options = choices.options();
    let probs = alpha.scores();
    let draws = 1000;
    let mut counts = vec![vec![0usize; options.len()]; 3];
    for seed in 0..draws {
        let p = extract_policy(&alpha, &choices, ExtractMode::Sample(seed)).unwrap();
        for (i, c) in p.choices().iter().enumerate() {
            counts[i][options.iter().position(|o| o == c).unwrap()] += 1;
        }
    }
    for (row, (cnt, p)) in counts.iter().zip(&probs).enumerate() {
        for (j, (&k, &q)) in cnt.iter().zip(p).enumerate() {
            let sd = (draws as f64 * q * (1.0 - q)).sqrt();
            let dev = (k as f64 - draws as f64 * q).abs();
            assert!(dev <= 3.0 * sd, "row {row} option {j}: {k} draws vs p={q:.3}");
        }
    }
}

#[test]
fn argmax_ties_prefer_cheaper_then_earlier() {
    let choices = ChoiceSet::default();
    let alpha = AlphaMatrix::from_rows(vec![vec![1.0, 1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 2.0, 2.0, 0.0], vec![3.0; 5]]).unwrap();
    let p = extract_policy(&alpha, &choices, ExtractMode::Argmax).unwrap();
    assert_eq!(p.choices(), &[GuidanceChoice::Uncond, GuidanceChoice::Cfg(3.75), GuidanceChoice::Uncond]);
}

#[test]
fn linear_ag_plan_costs() {
    for t in 2usize..=40 {
        // Guided steps sit at the even positions of the first ⌈T/2⌉.
        let guided = t.div_ceil(2).div_ceil(2);
        let plan = linear_ag_policy(t);
        assert_eq!(plan.len(), t);
        assert_eq!(plan[0], PlanStep::Cfg);
        assert_eq!(plan_nfe(&plan), (t + guided) as u64, "T={t}");
        assert_eq!(naive_interleave_policy(t, S).nfe(), plan_nfe(&plan));
    }
}

fn paths(seeds: std::ops::Range<u64>) -> PathDataset {
    collect_paths(&ring(), &cosine(20), SolverKind::Ddim, S, &seeds.collect::<Vec<_>>(), 1).unwrap()
}

#[test]
fn ols_beats_every_single_regressor_fit() {
    let ds = paths(0..100);
    for t in [1, 5, 10, 15, 19] {
        let row = fit_ols(&ds, t, None).unwrap();
        let best = ols_mse(&ds, t, &row);
        let p = row.regressors();
        for k in 0..p {
            // Closed-form one-regressor least squares, everything else zero.
            let nc = row.beta_c.len();
            let start = row.start(t);
            let x = |n: usize| if k < nc { ds.eps_cond(n, start - k) } else { ds.eps_uncond(n, start - (k - nc)) };
            let (mut xy, mut xx) = (0.0, 0.0);
            for n in 0..ds.len() {
                for (a, b) in x(n).iter().zip(ds.eps_uncond(n, t)) {
                    xy += a * b;
                    xx += a * a;
                }
            }
            let mut single = CoeffRow {
                beta_c: vec![0.0; nc],
                beta_u: vec![0.0; p - nc],
            };
            if k < nc {
                single.beta_c[k] = xy / xx;
            } else {
                single.beta_u[k - nc] = xy / xx;
            }
            assert!(best <= ols_mse(&ds, t, &single) + 1e-12, "t={t} regressor {k}");
        }
        // First-order optimality: nudging any coefficient does not help.
        for k in 0..p {
            for d in [-1e-3, 1e-3] {
                let mut r = row.clone();
                if k < r.beta_c.len() {
                    r.beta_c[k] += d;
                } else {
                    r.beta_u[k - r.beta_c.len()] += d;
                }
                assert!(best <= ols_mse(&ds, t, &r) + 1e-12);
            }
        }
    }
}

fn plan_mse(coeffs: &Arc<guidance_lab::linear::LinearCoeffs>, plan: &[PlanStep], base: &[guidance_lab::diffusion::Run]) -> f64 {
    let gmm = ring();
    let sched = cosine(20);
    let runs: Vec<_> = base
        .iter()
        .map(|b| {
            let mut ctrl = LinearAgController::with_plan(coeffs.clone(), plan.to_vec(), S);
            let (x0, trajectory, nfe) = run(&gmm, &sched, &mut ctrl, b.cond, b.seed);
            guidance_lab::diffusion::Run {
                seed: b.seed,
                cond: b.cond,
                x0,
                trajectory,
                nfe,
            }
        })
        .collect();
    endpoint_replication(&runs, base).unwrap().1.mean
}

#[test]
fn one_estimated_step_beats_dropping_guidance_where_it_matters() {
    let gmm = ring();
    let sched = cosine(20);
    let coeffs = Arc::new(fit_all(&paths(0..200), None).unwrap());
    let seeds: Vec<u64> = (1000..1100).collect();
    let base = run_policy(&gmm, &sched, SolverKind::Ddim, &PolicySpec::cfg(20, S), &seeds, 1).unwrap();
    let mut compared = 0;
    for k in 1..8 {
        let mut plan = vec![PlanStep::Cfg; 20];
        plan[k] = PlanStep::LrCfg;
        let lr = plan_mse(&coeffs, &plan, &base);
        let mut choices = vec![GuidanceChoice::Cfg(S); 21];
        choices[k] = GuidanceChoice::Cond;
        let drop = PolicySpec::Fixed {
            name: "drop".into(),
            policy: Policy::new(choices).unwrap(),
        };
        let dropped = run_policy(&gmm, &sched, SolverKind::Ddim, &drop, &seeds, 1).unwrap();
        let naive = endpoint_replication(&dropped, &base).unwrap().1.mean;
        println!("step index {k}: estimated {lr:.5} vs dropped {naive:.5}");
        // Past the first few steps skipping guidance costs less than the
        // estimator's own error, so the comparison only means something
        // where the skipped guidance matters.
        if naive > 0.1 {
            assert!(lr < naive, "index {k}: {lr} vs {naive}");
            compared += 1;
        }
    }
    assert!(compared >= 2);
}

#[test]
fn estimation_error_accumulates() {
    let gmm = ring();
    let sched = cosine(20);
    let coeffs = Arc::new(fit_all(&paths(0..200), None).unwrap());
    let seeds: Vec<u64> = (2000..2100).collect();
    let base = run_policy(&gmm, &sched, SolverKind::Ddim, &PolicySpec::cfg(20, S), &seeds, 1).unwrap();
    let mut errs = Vec::new();
    for real in [20, 16, 12, 8, 4, 1] {
        let plan: Vec<PlanStep> = (0..20).map(|i| if i < real { PlanStep::Cfg } else { PlanStep::LrCfg }).collect();
        errs.push(plan_mse(&coeffs, &plan, &base));
    }
    println!("MSE with 0,4,8,12,16,19 estimated tail steps: {errs:?}");
    assert_eq!(errs[0], 0.0);
    assert!(errs.windows(2).all(|w| w[0] <= w[1]), "{errs:?}");
}

#[test]
fn path_collection_is_deterministic_and_small_sets_are_rejected() {
    let a = paths(0..6);
    let b = paths(0..6);
    for n in 0..6 {
        for t in 1..=20 {
            assert_eq!(a.eps_cond(n, t), b.eps_cond(n, t));
            assert_eq!(a.eps_uncond(n, t), b.eps_uncond(n, t));
        }
    }
    assert_eq!(fit_all(&a, Some(3)).unwrap(), fit_all(&b, Some(3)).unwrap());
    match fit_all(&paths(0..1), None) {
        Err(Error::Underdetermined { rows, regressors, needed, .. }) => {
            assert_eq!(rows, 2);
            assert!(regressors > rows && needed * 2 >= regressors);
        }
        other => panic!("expected underdetermined, got {other:?}"),
    }
}
