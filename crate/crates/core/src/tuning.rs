//! Penalty paths and k-fold cross-validation over the `(alpha_s, lambda0)`
//! grid, where `lambda = alpha_s * lambda0` and `lambda_g = (1 - alpha_s) * lambda0`.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, PenaltyConfig};
use crate::nodewise::{node_design, node_problem};
use crate::solver::{self, soft_threshold, SglProblem, SglSolution, SolverOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyGrid {
    pub alphas: Vec<f64>,
    pub n_lambda0: usize,
    pub lambda_min_ratio: f64,
    pub folds: usize,
    pub seed: u64,
    /// Stop an `alpha_s` path once the mean CV error has stayed above its
    /// running minimum for this many consecutive `lambda0` values.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl Default for PenaltyGrid {
    fn default() -> Self {
        PenaltyGrid {
            alphas: (1..=10).map(|i| i as f64 / 10.0).collect(),
            n_lambda0: 100,
            lambda_min_ratio: 0.01,
            folds: 5,
            seed: 0,
            patience: Some(10),
        }
    }
}

impl PenaltyGrid {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::InvalidConfig("alphas must be nonempty and in (0, 1]".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig("need at least 2 folds".into()));
        }
        if self.n_lambda0 < 2 {
            return Err(Error::InvalidConfig("need at least 2 lambda0 values".into()));
        }
        if !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio < 1.0) {
            return Err(Error::InvalidConfig("lambda_min_ratio must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Smallest `lambda0` for which the all-zero point is optimal at mixture `alpha_s`.
pub fn lambda0_max(problem: &SglProblem, alpha_s: f64) -> f64 {
    assert!(alpha_s > 0.0 && alpha_s <= 1.0, "alpha_s must be in (0, 1]");
    let corr = problem.standardized_correlations();
    let mut best = corr[problem.lasso_columns()]
        .iter()
        .fold(0.0f64, |m, c| m.max(c.abs()))
        / alpha_s;
    for h in 1..problem.n_blocks() {
        let z = &corr[problem.group_columns(h)];
        best = best.max(group_entry_level(z, alpha_s));
    }
    // keep rounding in `alpha_s * lambda0` from letting the top coordinate in
    best * (1.0 + 8.0 * f64::EPSILON)
}

/// Smallest `l0` with `||S(z, alpha l0)||_2 <= (1 - alpha) l0`, by bisection.
fn group_entry_level(z: &[f64], alpha: f64) -> f64 {
    let zmax = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if zmax == 0.0 {
        return 0.0;
    }
    let excess = |l0: f64| {
        let norm: f64 = z
            .iter()
            .map(|v| soft_threshold(*v, alpha * l0).powi(2))
            .sum::<f64>()
            .sqrt();
        norm - (1.0 - alpha) * l0
    };
    let (mut lo, mut hi) = (0.0, zmax / alpha);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if excess(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// `n` log-spaced values from `max` down to `ratio * max`.
pub fn log_path(max: f64, n: usize, ratio: f64) -> Vec<f64> {
    if n == 1 {
        return vec![max];
    }
    let step = ratio.ln() / (n - 1) as f64;
    (0..n)
        .map(|i| {
            if i == 0 {
                max
            } else if i == n - 1 {
                max * ratio
            } else {
                max * (step * i as f64).exp()
            }
        })
        .collect()
}

/// One decreasing `lambda0` sequence per mixture value.
pub fn make_path(problem: &SglProblem, grid: &PenaltyGrid) -> Vec<Vec<f64>> {
    grid.alphas
        .iter()
        .map(|&a| log_path(lambda0_max(problem, a), grid.n_lambda0, grid.lambda_min_ratio))
        .collect()
}

/// Cross-validation table for a single node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCv {
    pub node: usize,
    pub alphas: Vec<f64>,
    /// `paths[a][l]`
    pub paths: Vec<Vec<f64>>,
    pub cv_error: Vec<Vec<f64>>,
    pub cv_se: Vec<Vec<f64>>,
    /// Indices `(alpha, lambda0)` of the selected grid point.
    pub selected: (usize, usize),
}

impl NodeCv {
    pub fn selected_alpha(&self) -> f64 {
        self.alphas[self.selected.0]
    }
    pub fn selected_lambda0(&self) -> f64 {
        self.paths[self.selected.0][self.selected.1]
    }
    pub fn selected_penalty(&self) -> PenaltyConfig {
        PenaltyConfig::from_mixture(self.selected_alpha(), self.selected_lambda0())
            .expect("grid values are valid")
    }
    pub fn min_error(&self) -> f64 {
        self.cv_error[self.selected.0][self.selected.1]
    }
}

/// Per-node fold labels from a seeded shuffle; fold sizes differ by at most one.
pub fn assign_folds(n: usize, folds: usize, seed: u64, node: usize) -> Result<Vec<usize>> {
    if folds < 2 || n < folds {
        return Err(Error::FoldTooSmall { n, folds });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(node as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = pos % folds;
    }
    Ok(labels)
}

/// Minimum of a table, ties going to the larger `lambda0` and then the larger
/// `alpha_s`.
pub fn select_min(alphas: &[f64], errors: &[Vec<f64>]) -> (usize, usize) {
    let mut best: Option<(usize, usize)> = None;
    for (a, row) in errors.iter().enumerate() {
        for (l, &e) in row.iter().enumerate() {
            best = match best {
                None => Some((a, l)),
                Some((ba, bl)) => {
                    let be = errors[ba][bl];
                    let better = e < be
                        || (e == be && (l < bl || (l == bl && alphas[a] > alphas[ba])));
                    Some(if better { (a, l) } else { (ba, bl) })
                }
            };
        }
    }
    best.expect("nonempty grid")
}

/// Fits a warm-started path, largest `lambda0` first. Returns one solution
/// per path value.
pub fn fit_path(
    problem: &mut SglProblem,
    alpha_s: f64,
    path: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<SglSolution>> {
    let mut out: Vec<SglSolution> = Vec::with_capacity(path.len());
    for &l0 in path {
        problem.set_penalty(PenaltyConfig::from_mixture(alpha_s, l0)?);
        let sol = solver::solve(problem, opts, out.last())?;
        out.push(sol);
    }
    Ok(out)
}

/// k-fold cross-validation for node `j` on the grid's own paths.
pub fn cross_validate(
    d: &Dataset,
    j: usize,
    grid: &PenaltyGrid,
    opts: &SolverOptions,
) -> Result<NodeCv> {
    grid.validate()?;
    let full = node_problem(d, j, PenaltyConfig::new(0.0, 0.0)?, opts)?;
    let paths = make_path(&full, grid);
    cross_validate_on_paths(d, j, grid, &paths, opts)
}

/// Cross-validation on caller-supplied paths (one per alpha in `grid`).
pub fn cross_validate_on_paths(
    d: &Dataset,
    j: usize,
    grid: &PenaltyGrid,
    paths: &[Vec<f64>],
    opts: &SolverOptions,
) -> Result<NodeCv> {
    grid.validate()?;
    if paths.len() != grid.alphas.len() {
        return Err(Error::DimensionMismatch("one path per alpha".into()));
    }
    let n = d.n();
    let labels = assign_folds(n, grid.folds, grid.seed, j)?;
    let mut folds = Vec::with_capacity(grid.folds);
    for f in 0..grid.folds {
        let train: Vec<usize> = (0..n).filter(|&i| labels[i] != f).collect();
        let valid: Vec<usize> = (0..n).filter(|&i| labels[i] == f).collect();
        let problem = node_problem(&d.select_rows(&train), j, PenaltyConfig::new(0.0, 0.0)?, opts)?;
        let val_design = node_design(&d.x().select_rows(&valid), &d.u().select_rows(&valid), j);
        let val_y: Vec<f64> = valid.iter().map(|&i| d.x()[(i, j)]).collect();
        folds.push((problem, val_design, val_y));
    }
    let k = grid.folds as f64;
    let mut cv_error = Vec::with_capacity(grid.alphas.len());
    let mut cv_se = Vec::with_capacity(grid.alphas.len());
    for (a, &alpha) in grid.alphas.iter().enumerate() {
        let mut warm: Vec<Option<SglSolution>> = vec![None; grid.folds];
        let (mut errs, mut ses) = (Vec::new(), Vec::new());
        let mut best = (f64::INFINITY, 0usize);
        for (l, &l0) in paths[a].iter().enumerate() {
            let pen = PenaltyConfig::from_mixture(alpha, l0)?;
            let mut vals = Vec::with_capacity(grid.folds);
            for ((problem, val_design, val_y), w) in folds.iter_mut().zip(warm.iter_mut()) {
                problem.set_penalty(pen);
                let sol = solver::solve(problem, opts, w.as_ref())?;
                vals.push(validation_error(val_design, val_y, &sol.flat()));
                *w = Some(sol);
            }
            let mean = vals.iter().sum::<f64>() / k;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
            errs.push(mean);
            ses.push((var / k).sqrt());
            if mean < best.0 {
                best = (mean, l);
            }
            if grid.patience.is_some_and(|pat| l - best.1 >= pat) {
                break;
            }
        }
        cv_error.push(errs);
        cv_se.push(ses);
    }
    let selected = select_min(&grid.alphas, &cv_error);
    Ok(NodeCv {
        node: j,
        alphas: grid.alphas.clone(),
        paths: paths.to_vec(),
        cv_error,
        cv_se,
        selected,
    })
}

/// Mean squared prediction error of original-scale coefficients.
pub fn validation_error(design: &nalgebra::DMatrix<f64>, y: &[f64], coef: &[f64]) -> f64 {
    let mut r = DVector::from_column_slice(y);
    for (c, &b) in coef.iter().enumerate() {
        if b != 0.0 {
            r.axpy(-b, &design.column(c), 1.0);
        }
    }
    r.norm_squared() / y.len() as f64
}
