//! `guidance-lab` command line: train, sample, search, fit-linear, eval,
//! export-figures. Flags override the JSON config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::{BackendSpec, ExperimentConfig, Seeds};
use crate::diffusion::{NoiseSchedule, Run};
use crate::error::{Error, Result};
use crate::eval::{
    frontier_csv, gamma_csv, gamma_curves, run_policy, EvalReport, FrontierRow, PolicySpec,
};
use crate::guidance::{GuidanceChoice, Policy};
use crate::linear::{collect_paths, fit_all, ols_mse, LinearCoeffs, PathDataset};
use crate::score::{train_mlp, MlpConfig, MlpScoreNet, ScoreBackend, TrainConfig};
use crate::search::{extract_policy, make_dataset, search, AlphaMatrix, ChoiceSet, ExtractMode, SearchConfig};
use crate::tensor::LionConfig;

#[derive(Debug, Parser)]
#[command(name = "guidance-lab", version, about = "Adaptive and linear classifier-free guidance on toy diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the MLP score network on a mixture preset.
    Train(TrainArgs),
    /// Generate trajectories under a guidance policy.
    Sample(PolicyCmd),
    /// Differentiable search over per-step guidance choices.
    Search(SearchArgs),
    /// Fit LinearAG coefficients from full-CFG paths.
    FitLinear(FitArgs),
    /// Replication error and NFE against the full-CFG baseline.
    Eval(EvalArgs),
    /// CSV bundles for γ curves, frontiers and searched policies.
    ExportFigures(Common),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset (ring, two-blobs, gaussian), analytic:<spec.json> or mlp:<checkpoint>.
    #[arg(long)]
    pub backend: Option<String>,
    /// Number of sampling steps.
    #[arg(long = "T")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub solver: Option<String>,
    /// CFG strength.
    #[arg(long = "s")]
    pub strength: Option<f64>,
    /// Inclusive range `a..b` or a comma list.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub experiment: Option<String>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the resolved config and exit without writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Data preset or mixture spec file.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(long)]
    pub p_uncond: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    /// cfg, cond, uncond, cfg:<s>, ag, naive-interleave, linear-ag, from-alphas, file.
    #[arg(long, default_value = "cfg")]
    pub policy: String,
    #[arg(long)]
    pub gamma_bar: Option<f64>,
    /// Search output for `from-alphas` (default <out>/alphas.json).
    #[arg(long)]
    pub alphas: Option<PathBuf>,
    /// LinearAG coefficients (default <out>/coeffs.json).
    #[arg(long)]
    pub coeffs: Option<PathBuf>,
    /// Policy JSON for `file`.
    #[arg(long)]
    pub policy_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PolicyCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub cost_cap: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trajectory JSONL file or directory; without it, paths are generated
    /// from the seed set under full CFG.
    #[arg(long)]
    pub paths: Option<PathBuf>,
    /// Regress only on the last W steps.
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Sweep AG over these thresholds (comma list) into a frontier table.
    #[arg(long, value_delimiter = ',')]
    pub gamma_bars: Option<Vec<f64>>,
}

pub fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(b) = &common.backend {
        cfg.backend = BackendSpec::parse(b)?;
    }
    if let Some(t) = common.steps {
        cfg.schedule.steps = t;
    }
    if let Some(k) = &common.schedule {
        cfg.schedule.kind = k.parse().map_err(|e: Error| Error::config("schedule", e.to_string()))?;
    }
    if let Some(k) = &common.solver {
        cfg.schedule.solver = k.parse().map_err(|e: Error| Error::config("solver", e.to_string()))?;
    }
    if let Some(s) = common.strength {
        cfg.guidance.s = s;
    }
    if let Some(s) = &common.seeds {
        cfg.seeds = Seeds::parse(s)?;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(e) = &common.experiment {
        cfg.experiment = e.clone();
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `--out` names a directory, or for single-artifact commands may name the
/// artifact itself (`--out alphas.json`); side outputs go next to it.
fn artifact(out: &Path, default_name: &str) -> (PathBuf, PathBuf) {
    if out.extension().is_some_and(|e| e == "json") {
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        (out.to_path_buf(), dir.to_path_buf())
    } else {
        (out.join(default_name), out.to_path_buf())
    }
}

/// Timestamps live only here so that every other output is reproducible.
fn write_meta(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    write_meta_in(cfg, command, &cfg.out)
}

fn write_meta_in(cfg: &ExperimentConfig, command: &str, dir: &Path) -> Result<()> {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "created_unix": created,
        "config": cfg,
    });
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{command}.meta.json")), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

fn dry_run(cfg: &ExperimentConfig) -> Result<()> {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{}", cfg.to_json());
    Ok(())
}

fn need(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

pub fn resolve_policy(args: &PolicyArgs, cfg: &ExperimentConfig) -> Result<PolicySpec> {
    let steps = cfg.schedule.steps;
    let s = cfg.guidance.s;
    Ok(match args.policy.as_str() {
        "cfg" => PolicySpec::cfg(steps, s),
        "ag" => PolicySpec::Ag {
            gamma_bar: args.gamma_bar.unwrap_or(cfg.guidance.gamma_bar),
            s,
        },
        "naive-interleave" => PolicySpec::naive_interleave(steps, s),
        "linear-ag" => {
            let path = need(args.coeffs.clone().unwrap_or_else(|| cfg.out.join("coeffs.json")))?;
            PolicySpec::LinearAg {
                coeffs: Arc::new(LinearCoeffs::load(&path)?),
                s,
            }
        }
        "from-alphas" => {
            let path = need(args.alphas.clone().unwrap_or_else(|| cfg.out.join("alphas.json")))?;
            let (alpha, choices) = AlphaMatrix::from_json(&std::fs::read_to_string(&path)?)?;
            PolicySpec::Fixed {
                name: "from-alphas".into(),
                policy: extract_policy(&alpha, &choices, ExtractMode::Argmax)?,
            }
        }
        "file" => {
            let path = args
                .policy_file
                .clone()
                .ok_or_else(|| Error::config("policy-file", "`--policy file` needs --policy-file"))?;
            let path = need(path)?;
            PolicySpec::Fixed {
                name: path.file_stem().map_or("file".into(), |s| s.to_string_lossy().into_owned()),
                policy: Policy::from_json(&std::fs::read_to_string(&path)?)?,
            }
        }
        other => {
            let choice: GuidanceChoice = other
                .parse()
                .map_err(|_| Error::config("policy", format!("unknown policy `{other}`")))?;
            PolicySpec::uniform(steps, choice)
        }
    })
}

struct Setup {
    backend: Box<dyn ScoreBackend>,
    schedule: NoiseSchedule,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    Ok(Setup {
        backend: cfg.backend.build()?,
        schedule: cfg.schedule.build()?,
    })
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(d) = &a.data {
        cfg.train.data = d.clone();
    }
    if let Some(n) = a.train_steps {
        cfg.train.steps = n;
    }
    if let Some(p) = a.p_uncond {
        cfg.train.p_uncond = p;
    }
    if let Some(h) = a.hidden {
        cfg.train.hidden = h;
    }
    cfg.validate()?;
    let spec = cfg.train.gmm()?;
    if a.common.dry_run {
        return dry_run(&cfg);
    }
    let net = MlpScoreNet::new(
        MlpConfig {
            hidden: cfg.train.hidden,
            layers: cfg.train.layers,
            ..MlpConfig::for_spec(&spec)
        },
        cfg.seed,
    )?;
    let out = train_mlp(
        &spec,
        net,
        &TrainConfig {
            steps: cfg.train.steps,
            batch_size: cfg.train.batch_size,
            lr: cfg.train.lr,
            p_uncond: cfg.train.p_uncond,
            seed: cfg.seed,
            schedule: cfg.schedule.kind,
        },
    )?;
    let (ckpt, dir) = artifact(&cfg.out, "model.json");
    std::fs::create_dir_all(&dir)?;
    out.net.save(&ckpt)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    std::fs::write(dir.join("loss.csv"), csv)?;
    write_meta_in(&cfg, "train", &dir)?;
    if let Some(step) = out.diverged_at {
        eprintln!("training diverged at step {step}; kept the last finite parameters");
        return Err(Error::Diverged { step });
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn write_runs(dir: &Path, runs: &[Run]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut summary = String::from("seed,class,nfe,x0\n");
    for r in runs {
        r.trajectory.write_jsonl(&dir.join(format!("seed-{}.jsonl", r.seed)))?;
        let x0: Vec<String> = r.x0.data().iter().map(f64::to_string).collect();
        let class = r.cond.class.map_or(String::new(), |c| c.to_string());
        let _ = writeln!(summary, "{},{class},{},{}", r.seed, r.nfe, x0.join(" "));
    }
    std::fs::write(dir.join("summary.csv"), summary)?;
    Ok(())
}

fn cmd_sample(a: &PolicyCmd) -> Result<()> {
    let cfg = resolve(&a.common)?;
    let spec = resolve_policy(&a.policy, &cfg)?;
    if a.common.dry_run {
        return dry_run(&cfg);
    }
    let st = setup(&cfg)?;
    let runs = run_policy(st.backend.as_ref(), &st.schedule, cfg.schedule.solver, &spec, &cfg.seeds.to_vec(), cfg.jobs)?;
    let dir = cfg.out.join("samples").join(spec.name());
    write_runs(&dir, &runs)?;
    write_meta(&cfg, "sample")?;
    let total: u64 = runs.iter().map(|r| r.nfe).sum();
    println!("{} runs, total NFE {total}, wrote {}", runs.len(), dir.display());
    Ok(())
}

fn cmd_search(a: &SearchArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(l) = a.lambda {
        cfg.search.lambda = l;
    }
    if let Some(c) = a.cost_cap {
        cfg.search.cost_cap = Some(c);
    }
    if let Some(e) = a.epochs {
        cfg.search.epochs = e;
    }
    if let Some(p) = a.pairs {
        cfg.search.pairs = p;
    }
    if let Some(t) = a.temperature {
        cfg.search.temperature = t;
    }
    cfg.validate()?;
    let steps = cfg.schedule.steps;
    let sc = SearchConfig {
        lambda: cfg.search.lambda,
        cost_cap: cfg.search.cost_cap.unwrap_or(1.5 * (steps + 1) as f64),
        gumbel_temperature: cfg.search.temperature,
        epochs: cfg.search.epochs,
        choices: ChoiceSet {
            strengths: cfg.guidance.strengths.clone(),
        },
        lion: LionConfig {
            lr: cfg.search.lr,
            ..LionConfig::default()
        },
        seed: cfg.seed,
    };
    sc.validate(steps)?;
    if a.common.dry_run {
        return dry_run(&cfg);
    }
    let st = setup(&cfg)?;
    let first = cfg.seeds.to_vec()[0];
    let data = make_dataset(st.backend.as_ref(), &st.schedule, cfg.schedule.solver, cfg.guidance.s, cfg.search.pairs, first)?;
    let outcome = search(st.backend.as_ref(), &st.schedule, cfg.schedule.solver, &data, &sc)?;
    let (alphas, dir) = artifact(&cfg.out, "alphas.json");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(&alphas, outcome.alpha.to_json(&sc.choices) + "\n")?;
    let labels: Vec<String> = sc.choices.options().iter().map(|c| format!("mean_{c}")).collect();
    let mut scores = format!("step,{}\n", labels.join(","));
    for (i, row) in outcome.scores.iter().enumerate() {
        let w: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(scores, "{},{}", steps - i, w.join(","));
    }
    std::fs::write(dir.join("scores.csv"), scores)?;
    let mut hist = String::from("epoch,replication,cost,loss\n");
    for h in &outcome.history {
        let _ = writeln!(hist, "{},{},{},{}", h.epoch, h.replication, h.cost, h.loss);
    }
    std::fs::write(dir.join("search_history.csv"), hist)?;
    let policy = extract_policy(&outcome.alpha, &sc.choices, ExtractMode::Argmax)?;
    std::fs::write(dir.join("policy.json"), policy.to_json() + "\n")?;
    write_meta_in(&cfg, "search", &dir)?;
    println!("argmax policy: {} NFE, {}", policy.nfe(), policy.to_json());
    Ok(())
}

fn cmd_fit_linear(a: &FitArgs) -> Result<()> {
    let cfg = resolve(&a.common)?;
    if a.common.dry_run {
        return dry_run(&cfg);
    }
    let ds = match &a.paths {
        Some(p) => PathDataset::load(p)?,
        None => {
            let st = setup(&cfg)?;
            collect_paths(st.backend.as_ref(), &st.schedule, cfg.schedule.solver, cfg.guidance.s, &cfg.seeds.to_vec(), cfg.jobs)?
        }
    };
    let coeffs = fit_all(&ds, a.window)?;
    let (path, dir) = artifact(&cfg.out, "coeffs.json");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(&path, coeffs.to_json() + "\n")?;
    let mut csv = String::from("t,regressors,train_mse\n");
    for (t, row) in &coeffs.rows {
        let _ = writeln!(csv, "{t},{},{}", row.regressors(), ols_mse(&ds, *t, row));
    }
    std::fs::write(dir.join("ols_fit.csv"), csv)?;
    write_meta_in(&cfg, "fit-linear", &dir)?;
    println!("fitted {} steps from {} paths", coeffs.rows.len(), ds.len());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(g) = &a.gamma_bars {
        cfg.guidance.gamma_bars = g.clone();
    }
    let spec = resolve_policy(&a.policy, &cfg)?;
    if a.common.dry_run {
        return dry_run(&cfg);
    }
    let st = setup(&cfg)?;
    let seeds = cfg.seeds.to_vec();
    let solver = cfg.schedule.solver;
    let run = |spec: &PolicySpec| run_policy(st.backend.as_ref(), &st.schedule, solver, spec, &seeds, cfg.jobs);
    let baseline = run(&PolicySpec::cfg(cfg.schedule.steps, cfg.guidance.s))?;
    let dir = cfg.out.join(&cfg.experiment);
    std::fs::create_dir_all(&dir)?;
    if !cfg.guidance.gamma_bars.is_empty() {
        let mut rows = Vec::new();
        for &g in &cfg.guidance.gamma_bars {
            let runs = run(&PolicySpec::Ag { gamma_bar: g, s: cfg.guidance.s })?;
            let r = EvalReport::from_runs(&cfg.experiment, &format!("ag-{g}"), &runs, Some(&baseline))?;
            rows.push(FrontierRow {
                policy: "ag".into(),
                gamma_bar: Some(g),
                nfe_mean: r.nfe.mean,
                mse: r.mse.expect("baseline given"),
            });
        }
        std::fs::write(dir.join("frontier.csv"), frontier_csv(&rows))?;
        println!("{}", frontier_csv(&rows).trim_end());
    }
    let runs = run(&spec)?;
    let report = EvalReport::from_runs(&cfg.experiment, &spec.name(), &runs, Some(&baseline))?;
    let path = report.write(&cfg.out)?;
    if !report.gamma.is_empty() {
        std::fs::write(dir.join(format!("{}_gamma.csv", spec.name())), gamma_csv(&report.gamma))?;
    }
    write_meta(&cfg, "eval")?;
    println!("{}\n{}", crate::eval::CSV_HEADER, report.csv_row());
    println!("wrote {}", path.display());
    Ok(())
}

const FIGURE_GAMMA_BARS: [f64; 8] = [0.5, 0.8, 0.9, 0.95, 0.98, 0.99, 0.995, 1.1];

fn cmd_export_figures(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    if c.dry_run {
        return dry_run(&cfg);
    }
    let st = setup(&cfg)?;
    let seeds = cfg.seeds.to_vec();
    let (steps, s, solver) = (cfg.schedule.steps, cfg.guidance.s, cfg.schedule.solver);
    let dir = cfg.out.join("figures");
    std::fs::create_dir_all(&dir)?;

    let baseline = run_policy(st.backend.as_ref(), &st.schedule, solver, &PolicySpec::cfg(steps, s), &seeds, cfg.jobs)?;
    let trajs: Vec<_> = baseline.iter().map(|r| r.trajectory.clone()).collect();
    std::fs::write(dir.join("gamma_curves.csv"), gamma_csv(&gamma_curves(&trajs)))?;

    let mut rows = Vec::new();
    let sweep = if cfg.guidance.gamma_bars.is_empty() { FIGURE_GAMMA_BARS.to_vec() } else { cfg.guidance.gamma_bars.clone() };
    for g in sweep {
        let runs = run_policy(st.backend.as_ref(), &st.schedule, solver, &PolicySpec::Ag { gamma_bar: g, s }, &seeds, cfg.jobs)?;
        let r = EvalReport::from_runs(&cfg.experiment, "ag", &runs, Some(&baseline))?;
        rows.push(FrontierRow {
            policy: "ag".into(),
            gamma_bar: Some(g),
            nfe_mean: r.nfe.mean,
            mse: r.mse.expect("baseline given"),
        });
    }
    for short_steps in (steps.div_ceil(2)..steps).filter(|&k| k >= 2) {
        let short = st.schedule.with_steps(short_steps)?;
        let runs = run_policy(st.backend.as_ref(), &short, solver, &PolicySpec::cfg(short_steps, s), &seeds, cfg.jobs)?;
        let r = EvalReport::from_runs(&cfg.experiment, "naive", &runs, Some(&baseline))?;
        rows.push(FrontierRow {
            policy: "naive".into(),
            gamma_bar: None,
            nfe_mean: r.nfe.mean,
            mse: r.mse.expect("baseline given"),
        });
    }
    std::fs::write(dir.join("frontier.csv"), frontier_csv(&rows))?;

    let alphas = cfg.out.join("alphas.json");
    if alphas.exists() {
        let (alpha, choices) = AlphaMatrix::from_json(&std::fs::read_to_string(&alphas)?)?;
        let labels: Vec<String> = choices.options().iter().map(ToString::to_string).collect();
        let mut csv = format!("t,{}\n", labels.join(","));
        for (i, row) in alpha.scores().iter().enumerate() {
            let w: Vec<String> = row.iter().map(f64::to_string).collect();
            let _ = writeln!(csv, "{},{}", alpha.steps() - i, w.join(","));
        }
        std::fs::write(dir.join("search_scores.csv"), csv)?;
    }
    let coeffs = cfg.out.join("coeffs.json");
    if coeffs.exists() {
        let c = LinearCoeffs::load(&coeffs)?;
        let mut csv = String::from("t,branch,i,beta\n");
        for (t, row) in &c.rows {
            let start = row.start(*t);
            for (j, b) in row.beta_c.iter().enumerate() {
                let _ = writeln!(csv, "{t},cond,{},{b}", start - j);
            }
            for (j, b) in row.beta_u.iter().enumerate() {
                let _ = writeln!(csv, "{t},uncond,{},{b}", start - j);
            }
        }
        std::fs::write(dir.join("linear_coeffs.csv"), csv)?;
    }
    write_meta(&cfg, "export-figures")?;
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Search(a) => cmd_search(a),
        Command::FitLinear(a) => cmd_fit_linear(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportFigures(c) => cmd_export_figures(c),
    }
}
