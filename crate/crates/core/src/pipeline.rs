//! End-to-end estimation: tuning, nodewise refits, residual variances and
//! symmetrization, plus the replicated simulation study.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::assemble;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Dataset, GraphModel, NodewiseFit, PenaltyConfig, SymmetrizationRule};
use crate::nodewise::{estimate_sigma2_guarded, finish_node, fit_node, node_problem, Sigma2Estimator};
use crate::simulation::{generate_dataset, SimulationConfig};
use crate::solver::{SglProblem, SolverOptions};
use crate::tuning::{cross_validate_on_paths, fit_path, lambda0_max, log_path, make_path, select_min, NodeCv, PenaltyGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tuning {
    /// Separate cross-validated `(alpha_s, lambda0)` for every node.
    CrossValidate,
    /// One `(alpha_s, lambda0)` for all nodes, chosen by the summed CV error.
    SharedLambda,
    /// No tuning.
    Fixed(PenaltyConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub grid: PenaltyGrid,
    pub solver: SolverOptions,
    pub estimator: Sigma2Estimator,
    pub rule: SymmetrizationRule,
    pub tuning: Tuning,
    /// Replace failed nodes by empty fits instead of aborting.
    pub keep_going: bool,
    /// Worker count; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Mean-center the responses before fitting.
    pub center: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            grid: PenaltyGrid::default(),
            solver: SolverOptions::default(),
            estimator: Sigma2Estimator::S2,
            rule: SymmetrizationRule::And,
            tuning: Tuning::CrossValidate,
            keep_going: false,
            threads: None,
            center: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: GraphModel,
    pub fits: Vec<NodewiseFit>,
    /// Empty when tuning is fixed.
    pub cv: Vec<NodeCv>,
    pub failed_nodes: Vec<usize>,
}

fn zero_penalty() -> PenaltyConfig {
    PenaltyConfig::new(0.0, 0.0).expect("zero penalty is valid")
}

/// Warm-started path down to `path.last()`, then the nodewise fit there.
fn refit_on_path(
    problem: &mut SglProblem,
    j: usize,
    alpha: f64,
    path: &[f64],
    opts: &FitOptions,
) -> Result<NodewiseFit> {
    let sols = fit_path(problem, alpha, path, &opts.solver)?;
    let last = sols.last().expect("nonempty path");
    Ok(finish_node(problem, j, last, opts.estimator))
}

/// Cross-validates node `j` and refits it on the full data at the selected
/// penalty. Nodes do not share state, so this reproduces node `j` of
/// [`fit_cspine`] exactly.
pub fn cv_node(d: &Dataset, j: usize, opts: &FitOptions) -> Result<(NodewiseFit, NodeCv)> {
    let mut full = node_problem(d, j, zero_penalty(), &opts.solver)?;
    let paths = make_path(&full, &opts.grid);
    let cv = cross_validate_on_paths(d, j, &opts.grid, &paths, &opts.solver)?;
    let (a, l) = cv.selected;
    let fit = refit_on_path(&mut full, j, opts.grid.alphas[a], &paths[a][..=l], opts)?;
    Ok((fit, cv))
}

fn empty_fit(d: &Dataset, j: usize, estimator: Sigma2Estimator) -> NodewiseFit {
    let y: Vec<f64> = d.x().column(j).iter().copied().collect();
    let zeros = vec![0.0; y.len()];
    NodewiseFit {
        node: j,
        gamma: vec![0.0; d.q()],
        beta_blocks: vec![vec![0.0; d.p() - 1]; d.q() + 1],
        sigma2: estimate_sigma2_guarded(&y, &zeros, 0, 0, estimator),
        objective: y.iter().map(|v| v * v).sum::<f64>() / (2.0 * y.len() as f64),
        iterations: 0,
        kkt_residual: 0.0,
        penalty: zero_penalty(),
        converged: false,
    }
}

fn run_nodes<T: Send>(opts: &FitOptions, p: usize, f: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
    match opts.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(|| (0..p).into_par_iter().map(&f).collect()))
        }
        None => Ok((0..p).into_par_iter().map(&f).collect()),
    }
}

/// Collects per-node outcomes, aborting on the first failure unless
/// `keep_going` is set.
fn gather<T>(
    d: &Dataset,
    opts: &FitOptions,
    results: Vec<Result<(NodewiseFit, Option<T>)>>,
) -> Result<(Vec<NodewiseFit>, Vec<T>, Vec<usize>)> {
    let mut fits = Vec::with_capacity(results.len());
    let mut extra = Vec::new();
    let mut failed = Vec::new();
    for (j, r) in results.into_iter().enumerate() {
        match r {
            Ok((fit, e)) => {
                fits.push(fit);
                extra.extend(e);
            }
            Err(e) if opts.keep_going => {
                warn!("node {j} failed: {e}; using an empty fit");
                fits.push(empty_fit(d, j, opts.estimator));
                failed.push(j);
            }
            Err(e) => return Err(e.at_node(j)),
        }
    }
    Ok((fits, extra, failed))
}

fn shared_lambda(d: &Dataset, opts: &FitOptions) -> Result<FitResult> {
    let p = d.p();
    let maxes: Vec<Result<Vec<f64>>> = run_nodes(opts, p, |j| {
        let problem = node_problem(d, j, zero_penalty(), &opts.solver)?;
        Ok(opts.grid.alphas.iter().map(|&a| lambda0_max(&problem, a)).collect())
    })?;
    let mut top = vec![0.0f64; opts.grid.alphas.len()];
    for (j, m) in maxes.into_iter().enumerate() {
        let m = m.map_err(|e| e.at_node(j))?;
        for (t, v) in top.iter_mut().zip(m) {
            *t = t.max(v);
        }
    }
    let paths: Vec<Vec<f64>> = top
        .iter()
        .map(|&m| log_path(m, opts.grid.n_lambda0, opts.grid.lambda_min_ratio))
        .collect();
    let cvs: Vec<Result<NodeCv>> = run_nodes(opts, p, |j| cross_validate_on_paths(d, j, &opts.grid, &paths, &opts.solver))?;
    let cvs = cvs
        .into_iter()
        .enumerate()
        .map(|(j, r)| r.map_err(|e| e.at_node(j)))
        .collect::<Result<Vec<_>>>()?;
    // early-stopped nodes cut the comparable part of each path short
    let mut total: Vec<Vec<f64>> = (0..paths.len())
        .map(|a| vec![0.0; cvs.iter().map(|c| c.cv_error[a].len()).min().unwrap_or(0)])
        .collect();
    for cv in &cvs {
        for (row, cv_row) in total.iter_mut().zip(&cv.cv_error) {
            for (t, e) in row.iter_mut().zip(cv_row) {
                *t += e;
            }
        }
    }
    let (a, l) = select_min(&opts.grid.alphas, &total);
    info!("shared penalty: alpha_s = {}, lambda0 = {}", opts.grid.alphas[a], paths[a][l]);
    let results = run_nodes(opts, p, |j| {
        let mut problem = node_problem(d, j, zero_penalty(), &opts.solver)?;
        refit_on_path(&mut problem, j, opts.grid.alphas[a], &paths[a][..=l], opts).map(|f| (f, None::<()>))
    })?;
    let (fits, _, failed) = gather(d, opts, results)?;
    let cv = cvs
        .into_iter()
        .map(|mut c| {
            c.selected = (a, l);
            c
        })
        .collect();
    Ok(FitResult {
        model: assemble(&fits, opts.rule)?,
        fits,
        cv,
        failed_nodes: failed,
    })
}

/// Fits the covariate-adjusted graphical model to `d`.
pub fn fit_cspine(d: &Dataset, opts: &FitOptions) -> Result<FitResult> {
    opts.solver.validate()?;
    let centered;
    let d = if opts.center {
        centered = d.center_responses();
        &centered
    } else {
        d
    };
    let p = d.p();
    let (fits, cv, failed) = match opts.tuning {
        Tuning::Fixed(penalty) => {
            let results = run_nodes(opts, p, |j| {
                fit_node(d, j, penalty, &opts.solver, opts.estimator).map(|f| (f, None::<NodeCv>))
            })?;
            gather(d, opts, results)?
        }
        Tuning::CrossValidate => {
            opts.grid.validate()?;
            let results = run_nodes(opts, p, |j| cv_node(d, j, opts).map(|(f, c)| (f, Some(c))))?;
            gather(d, opts, results)?
        }
        Tuning::SharedLambda => {
            opts.grid.validate()?;
            return shared_lambda(d, opts);
        }
    };
    Ok(FitResult {
        model: assemble(&fits, opts.rule)?,
        fits,
        cv,
        failed_nodes: failed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateConfig {
    /// Replicate `r` uses seed `sim.seed + r` for both data and folds.
    pub sim: SimulationConfig,
    pub reps: usize,
    pub fit: FitOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub reports: Vec<EvalReport>,
    pub mean: Vec<f64>,
    /// Absent with a single replicate.
    pub sd: Option<Vec<f64>>,
    pub se: Option<Vec<f64>>,
}

impl ReplicateSummary {
    pub fn from_reports(reports: Vec<EvalReport>) -> Self {
        let m = reports.len() as f64;
        let cols: Vec<Vec<f64>> = (0..EvalReport::FIELDS.len())
            .map(|c| reports.iter().map(|r| r.values()[c]).collect())
            .collect();
        let mean: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / m).collect();
        let (sd, se) = if reports.len() > 1 {
            let sd: Vec<f64> = cols
                .iter()
                .zip(&mean)
                .map(|(c, mu)| (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1.0)).sqrt())
                .collect();
            let se = sd.iter().map(|s| s / m.sqrt()).collect();
            (Some(sd), Some(se))
        } else {
            (None, None)
        };
        ReplicateSummary { reports, mean, sd, se }
    }

    pub fn mean_of(&self, field: &str) -> Option<f64> {
        EvalReport::FIELDS.iter().position(|f| *f == field).map(|i| self.mean[i])
    }

    /// Markdown table: one row per metric with mean, sd and se.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| metric | mean | sd | se |\n|---|---|---|---|\n");
        for (i, f) in EvalReport::FIELDS.iter().enumerate() {
            let fmt = |v: &Option<Vec<f64>>| v.as_ref().map_or("-".to_string(), |x| format!("{:.4}", x[i]));
            s.push_str(&format!("| {f} | {:.4} | {} | {} |\n", self.mean[i], fmt(&self.sd), fmt(&self.se)));
        }
        s
    }
}

pub fn replicate_table1(cfg: &ReplicateConfig) -> Result<ReplicateSummary> {
    if cfg.reps == 0 {
        return Err(Error::InvalidConfig("need at least one replicate".into()));
    }
    let mut reports = Vec::with_capacity(cfg.reps);
    for r in 0..cfg.reps {
        let mut sim = cfg.sim.clone();
        sim.seed = cfg.sim.seed.wrapping_add(r as u64);
        let truth = generate_dataset(&sim)?;
        let mut fit = cfg.fit.clone();
        fit.grid.seed = sim.seed;
        let result = fit_cspine(&truth.dataset, &fit)?;
        let report = evaluate(&result.model, &result.fits, &truth)?;
        info!("replicate {r}: tpr {:.3} omega_err {:.3}", report.tpr, report.omega_err);
        reports.push(report);
    }
    Ok(ReplicateSummary::from_reports(reports))
}
