use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use cspine::io::{self, ModelFile, TruthBundle};
use cspine::metrics::{evaluate, EvalReport};
use cspine::model::{PenaltyConfig, SymmetrizationRule};
use cspine::nodewise::{node_problem, Sigma2Estimator};
use cspine::pipeline::{fit_cspine, replicate_table1, FitOptions, ReplicateConfig, Tuning};
use cspine::simulation::{generate_dataset, DataModel, SimulationConfig};
use cspine::solver::{self, SolverOptions};
use cspine::tuning::{fit_path, make_path, PenaltyGrid};
use cspine::{Error, Result};

#[derive(Parser)]
#[command(name = "cspine", version, about = "Covariate-adjusted sparse precision estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic data set with its ground truth.
    Simulate(SimulateArgs),
    /// Fit a model to X.csv and U.csv.
    Fit(FitArgs),
    /// Predict per-subject means and precision matrices.
    Predict(PredictArgs),
    /// Evaluate a fitted model against a simulated truth.
    Eval(EvalArgs),
    /// Regularization path of a single node.
    Path(PathArgs),
    /// Re-verify the optimality of a saved model's nodewise fits.
    KktCheck(KktArgs),
    /// Repeat simulate, fit and eval, and summarize.
    Replicate(ReplicateArgs),
}

#[derive(Args, Clone)]
struct SimArgs {
    /// JSON or TOML simulation config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    q_e: Option<usize>,
    #[arg(long)]
    edge_prob: Option<f64>,
    #[arg(long)]
    gamma_density: Option<f64>,
    /// natural or original
    #[arg(long)]
    model: Option<DataModel>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SimArgs {
    fn config(&self) -> Result<SimulationConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => SimulationConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(n, p, q, q_e, edge_prob, gamma_density, model, seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_config(path: &Path) -> Result<SimulationConfig> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    } else {
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Output directory for X.csv, U.csv, kinds.json and truth.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct FitFlags {
    /// Fixed mixture value; requires --lambda0 and skips cross-validation.
    #[arg(long, requires = "lambda0")]
    alpha: Option<f64>,
    #[arg(long, requires = "alpha")]
    lambda0: Option<f64>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 100)]
    n_lambda: usize,
    /// and or or
    #[arg(long, default_value = "and")]
    rule: SymmetrizationRule,
    #[arg(long)]
    threads: Option<usize>,
    /// s1 or s2
    #[arg(long, default_value = "s2")]
    estimator: Sigma2Estimator,
    /// Penalize unit-scaled design columns.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    standardize: bool,
    /// Replace failed nodes by empty fits.
    #[arg(long)]
    keep_going: bool,
    /// Mean-center the responses first.
    #[arg(long)]
    center: bool,
    /// One penalty pair for all nodes.
    #[arg(long, conflicts_with = "alpha")]
    shared_lambda: bool,
    /// Fold assignment seed.
    #[arg(long = "cv-seed", default_value_t = 0)]
    cv_seed: u64,
}

impl FitFlags {
    fn options(&self) -> Result<FitOptions> {
        let tuning = match (self.alpha, self.lambda0) {
            (Some(a), Some(l)) => Tuning::Fixed(PenaltyConfig::from_mixture(a, l)?),
            _ if self.shared_lambda => Tuning::SharedLambda,
            _ => Tuning::CrossValidate,
        };
        Ok(FitOptions {
            grid: PenaltyGrid {
                n_lambda0: self.n_lambda,
                folds: self.folds,
                seed: self.cv_seed,
                ..PenaltyGrid::default()
            },
            solver: SolverOptions {
                standardize_columns: self.standardize,
                ..SolverOptions::default()
            },
            estimator: self.estimator,
            rule: self.rule,
            tuning,
            keep_going: self.keep_going,
            threads: self.threads,
            center: self.center,
        })
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long = "x")]
    x: PathBuf,
    #[arg(long = "u")]
    u: PathBuf,
    /// JSON list of covariate kinds; inferred from U when absent.
    #[arg(long)]
    kinds: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitFlags,
    /// Edges with |weight| at or below this are left out of edges.csv.
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "u")]
    u: PathBuf,
    /// Also write per-subject precision triplets.
    #[arg(long)]
    omega: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct PathArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    node: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 100)]
    n_lambda: usize,
    #[arg(long, default_value = "path.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct KktArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    /// Must match the setting used for the fit.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    standardize: bool,
}

#[derive(Args)]
struct ReplicateArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    /// Directory for reports.csv and summary.md.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::AllZeroGamma | Error::NonPdOmega { .. } => 3,
        Error::SolverDiverged { .. }
        | Error::DegenerateDoF { .. }
        | Error::ZeroVariance
        | Error::DegenerateColumn { .. } => 4,
        Error::SingularAfterRidge { .. } => 5,
        _ => 2,
    }
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = args.sim.config()?;
    let truth = generate_dataset(&cfg)?;
    io::save_dataset(&args.out, &truth.dataset)?;
    io::write_json(&args.out.join("truth.json"), &TruthBundle::new(&cfg, &truth))?;
    println!("seed {} pd_repairs {}", cfg.seed, truth.pd_repairs);
    Ok(())
}

fn fit(args: &FitArgs) -> Result<()> {
    let d = io::load_dataset(&args.data.x, &args.data.u, args.data.kinds.as_deref())?;
    let opts = args.fit.options()?;
    let r = fit_cspine(&d, &opts)?;
    std::fs::create_dir_all(&args.out)?;
    ModelFile::new(&r.model, &r.fits, d.x_names(), d.u_names()).save(&args.out.join("model.json"))?;
    io::write_cv_csv(&args.out.join("cv.csv"), &r.cv)?;
    io::write_fit_log(&args.out.join("fit_log.csv"), &r.fits)?;
    io::write_edges_csv(&args.out.join("edges.csv"), &r.model, args.threshold)?;
    if !r.failed_nodes.is_empty() {
        warn!("nodes replaced by empty fits: {:?}", r.failed_nodes);
    }
    let max_kkt = r.fits.iter().map(|f| f.kkt_residual).fold(0.0, f64::max);
    info!("fitted {} nodes, max KKT residual {max_kkt:e}", r.fits.len());
    Ok(())
}

fn predict(args: &PredictArgs) -> Result<()> {
    let file = ModelFile::load(&args.model)?;
    let model = file.model()?;
    let (_, u) = io::read_matrix_csv(&args.u)?;
    if u.ncols() != model.q() {
        return Err(Error::Schema(format!("U has {} columns, model expects {}", u.ncols(), model.q())));
    }
    std::fs::create_dir_all(&args.out)?;
    let mut mu_w = csv::Writer::from_path(args.out.join("mu.csv"))?;
    mu_w.write_record(&file.x_names)?;
    let mut om_w = if args.omega {
        let mut w = csv::Writer::from_path(args.out.join("omega.csv"))?;
        w.write_record(["subject", "j", "k", "value"])?;
        Some(w)
    } else {
        None
    };
    let mut repaired = 0;
    for i in 0..u.nrows() {
        let ui: Vec<f64> = u.row(i).iter().copied().collect();
        let pred = cspine::graph::predict_subject(&model, &ui)?;
        if pred.ridge_added > 0.0 {
            repaired += 1;
            warn!("subject {i}: added ridge {:e}", pred.ridge_added);
        }
        mu_w.write_record(pred.mu.iter().map(|v| io::fmt_f64(*v)))?;
        if let Some(w) = om_w.as_mut() {
            for j in 0..model.p() {
                for k in j..model.p() {
                    let v = pred.omega[(j, k)];
                    if v != 0.0 {
                        w.write_record([i.to_string(), j.to_string(), k.to_string(), io::fmt_f64(v)])?;
                    }
                }
            }
        }
    }
    mu_w.flush()?;
    if let Some(mut w) = om_w {
        w.flush()?;
    }
    println!("subjects {} ridge_repairs {repaired}", u.nrows());
    Ok(())
}

fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EvalReport::FIELDS)?;
    for r in reports {
        w.write_record(r.values().iter().map(|v| io::fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let file = ModelFile::load(&args.model)?;
    let model = file.model()?;
    let bundle: TruthBundle = io::read_json(&args.truth)?;
    let d = io::load_dataset(&args.data.x, &args.data.u, args.data.kinds.as_deref())?;
    if d.p() != model.p() || d.q() != model.q() {
        return Err(Error::Schema("model and data dimensions differ".into()));
    }
    let truth = bundle.truth(d)?;
    let report = evaluate(&model, &file.fits, &truth)?;
    write_reports(&args.out, &[report])?;
    for (f, v) in EvalReport::FIELDS.iter().zip(report.values()) {
        println!("{f} {v}");
    }
    Ok(())
}

fn path(args: &PathArgs) -> Result<()> {
    let d = io::load_dataset(&args.data.x, &args.data.u, args.data.kinds.as_deref())?;
    let opts = SolverOptions::default();
    let grid = PenaltyGrid {
        alphas: vec![args.alpha],
        n_lambda0: args.n_lambda,
        ..PenaltyGrid::default()
    };
    grid.validate()?;
    let mut problem = node_problem(&d, args.node, PenaltyConfig::new(0.0, 0.0)?, &opts)?;
    let lambdas = make_path(&problem, &grid).remove(0);
    let sols = fit_path(&mut problem, args.alpha, &lambdas, &opts)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["lambda0", "objective", "nonzero_gamma", "nonzero_beta", "active_groups", "kkt_residual"])?;
    for (l0, s) in lambdas.iter().zip(&sols) {
        problem.set_penalty(PenaltyConfig::from_mixture(args.alpha, *l0)?);
        let nz = |v: &[f64]| v.iter().filter(|x| **x != 0.0).count();
        let groups = s.beta_blocks.iter().skip(1).filter(|b| nz(b) > 0).count();
        w.write_record([
            io::fmt_f64(*l0),
            io::fmt_f64(s.objective),
            nz(&s.gamma).to_string(),
            s.beta_blocks.iter().map(|b| nz(b)).sum::<usize>().to_string(),
            groups.to_string(),
            io::fmt_f64(solver::kkt_residual(&problem, s)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Returns whether every node passed.
fn kkt_check(args: &KktArgs) -> Result<bool> {
    let file = ModelFile::load(&args.model)?;
    let d = io::load_dataset(&args.data.x, &args.data.u, args.data.kinds.as_deref())?;
    if file.fits.len() != d.p() {
        return Err(Error::Schema(format!("model has {} nodewise fits, data has {} responses", file.fits.len(), d.p())));
    }
    let opts = SolverOptions { standardize_columns: args.standardize, ..SolverOptions::default() };
    let mut worst = 0.0f64;
    for fit in &file.fits {
        if fit.gamma.len() != d.q() || fit.beta_blocks.len() != d.q() + 1 {
            return Err(Error::Schema(format!("node {} layout does not match the data", fit.node)));
        }
        let problem = node_problem(&d, fit.node, fit.penalty, &opts)?;
        let flat: Vec<f64> = fit.gamma.iter().chain(fit.beta_blocks.iter().flatten()).copied().collect();
        let r = solver::kkt_residual_at(&problem, &flat);
        info!("node {}: residual {r:e}", fit.node);
        worst = worst.max(r);
    }
    let ok = worst <= args.threshold;
    println!("max_kkt_residual {worst:e} {}", if ok { "ok" } else { "violated" });
    Ok(ok)
}

fn replicate(args: &ReplicateArgs) -> Result<()> {
    let cfg = ReplicateConfig {
        sim: args.sim.config()?,
        reps: args.reps,
        fit: args.fit.options()?,
    };
    let summary = replicate_table1(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    write_reports(&args.out.join("reports.csv"), &summary.reports)?;
    let table = summary.to_markdown();
    std::fs::write(args.out.join("summary.md"), &table)?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Command::Simulate(a) => simulate(a).map(|_| true),
        Command::Fit(a) => fit(a).map(|_| true),
        Command::Predict(a) => predict(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Path(a) => path(a).map(|_| true),
        Command::KktCheck(a) => kkt_check(a),
        Command::Replicate(a) => replicate(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
