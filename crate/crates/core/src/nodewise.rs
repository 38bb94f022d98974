//! Per-response regressions: design assembly, fitting, residual variance and
//! rescaling onto the precision scale.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, NodewiseFit, PenaltyConfig};
use crate::solver::{self, SglProblem, SglSolution, SolverOptions};

/// Interactions of the other responses with the covariates for node `j`:
/// blocks `[X_{-j} | X_{-j} * u_1 | ... | X_{-j} * u_q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDesign {
    pub node: usize,
    pub w: DMatrix<f64>,
    p: usize,
}

impl InteractionDesign {
    /// Flat column of response `k` (k != node) in block `h`.
    pub fn column_index(&self, h: usize, k: usize) -> Option<usize> {
        if k == self.node || k >= self.p {
            return None;
        }
        let pos = if k < self.node { k } else { k - 1 };
        Some(h * (self.p - 1) + pos)
    }

    /// Response index for each within-block position.
    pub fn others(&self) -> Vec<usize> {
        others(self.p, self.node)
    }
}

pub(crate) fn others(p: usize, j: usize) -> Vec<usize> {
    (0..p).filter(|&k| k != j).collect()
}

/// Writes the interaction columns for node `j` into `out` starting at column
/// `offset`.
fn fill_interactions(x: &DMatrix<f64>, u: &DMatrix<f64>, j: usize, out: &mut DMatrix<f64>, offset: usize) {
    let (n, p) = x.shape();
    let q = u.ncols();
    let rest = others(p, j);
    for (pos, &k) in rest.iter().enumerate() {
        out.column_mut(offset + pos).copy_from(&x.column(k));
    }
    for h in 0..q {
        let uh = u.column(h);
        for (pos, &k) in rest.iter().enumerate() {
            let xk = x.column(k);
            let mut col = out.column_mut(offset + (h + 1) * (p - 1) + pos);
            for i in 0..n {
                col[i] = xk[i] * uh[i];
            }
        }
    }
}

pub fn build_interaction_design(d: &Dataset, j: usize) -> InteractionDesign {
    let (n, p, q) = (d.n(), d.p(), d.q());
    assert!(j < p, "node {j} out of range for p = {p}");
    let mut w = DMatrix::zeros(n, (p - 1) * (q + 1));
    fill_interactions(d.x(), d.u(), j, &mut w, 0);
    InteractionDesign { node: j, w, p }
}

/// Design `[U | W_{-j}]` for node `j` on raw matrices.
pub(crate) fn node_design(x: &DMatrix<f64>, u: &DMatrix<f64>, j: usize) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let q = u.ncols();
    let mut design = DMatrix::zeros(n, q + (p - 1) * (q + 1));
    design.columns_mut(0, q).copy_from(u);
    fill_interactions(x, u, j, &mut design, q);
    design
}

/// The penalized regression of response `j` on `U` and `W_{-j}`.
pub fn node_problem(
    d: &Dataset,
    j: usize,
    penalty: PenaltyConfig,
    opts: &SolverOptions,
) -> Result<SglProblem> {
    if j >= d.p() {
        return Err(Error::InvalidConfig(format!("node {j} out of range")));
    }
    let y = DVector::from_column_slice(d.x().column(j).as_slice());
    let design = node_design(d.x(), d.u(), j);
    let problem = SglProblem::from_design(y, design, d.q(), d.p() - 1, penalty)?;
    Ok(if opts.standardize_columns {
        problem
    } else {
        problem.with_unit_scales()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sigma2Estimator {
    /// RSS / (n - s_beta - s_gamma)
    S1,
    /// RSS / (n - s_beta - 1)
    #[default]
    S2,
}

impl std::str::FromStr for Sigma2Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Sigma2Estimator::S1),
            "s2" => Ok(Sigma2Estimator::S2),
            other => Err(Error::InvalidConfig(format!("unknown estimator {other:?}"))),
        }
    }
}

pub const SIGMA2_FLOOR: f64 = 1e-12;

/// Residual variance with a sparsity-based degrees-of-freedom correction.
pub fn estimate_sigma2(
    y: &[f64],
    fitted: &[f64],
    s_beta: usize,
    s_gamma: usize,
    estimator: Sigma2Estimator,
) -> Result<f64> {
    if y.len() != fitted.len() {
        return Err(Error::DimensionMismatch("y and fitted lengths differ".into()));
    }
    let rss: f64 = y.iter().zip(fitted).map(|(a, b)| (a - b) * (a - b)).sum();
    let n = y.len() as i64;
    let dof = match estimator {
        Sigma2Estimator::S1 => n - s_beta as i64 - s_gamma as i64,
        Sigma2Estimator::S2 => n - s_beta as i64 - 1,
    };
    if dof <= 0 {
        return Err(Error::DegenerateDoF { dof });
    }
    if rss == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(rss / dof as f64)
}

/// `estimate_sigma2` with the fallbacks used during fitting: denominator `n`
/// when degrees of freedom run out, and a floor for interpolating fits.
pub fn estimate_sigma2_guarded(
    y: &[f64],
    fitted: &[f64],
    s_beta: usize,
    s_gamma: usize,
    estimator: Sigma2Estimator,
) -> f64 {
    match estimate_sigma2(y, fitted, s_beta, s_gamma, estimator) {
        Ok(v) => v.max(SIGMA2_FLOOR),
        Err(Error::DegenerateDoF { dof }) => {
            warn!("nonpositive residual degrees of freedom ({dof}); dividing by n");
            let rss: f64 = y.iter().zip(fitted).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = rss / y.len() as f64;
            if v <= 0.0 {
                warn!("zero residual variance; using floor {SIGMA2_FLOOR}");
            }
            v.max(SIGMA2_FLOOR)
        }
        Err(_) => {
            warn!("zero residual variance; using floor {SIGMA2_FLOOR}");
            SIGMA2_FLOOR
        }
    }
}

/// Packages a solver solution for node `j` into a `NodewiseFit`.
pub fn finish_node(
    problem: &SglProblem,
    j: usize,
    sol: &SglSolution,
    estimator: Sigma2Estimator,
) -> NodewiseFit {
    let flat = sol.flat();
    let residual = problem.residual(&flat);
    let y = problem.y().as_slice();
    let fitted: Vec<f64> = y.iter().zip(residual.iter()).map(|(a, r)| a - r).collect();
    let s_gamma = sol.gamma.iter().filter(|v| **v != 0.0).count();
    let s_beta = sol
        .beta_blocks
        .iter()
        .flat_map(|b| b.iter())
        .filter(|v| **v != 0.0)
        .count();
    let sigma2 = estimate_sigma2_guarded(y, &fitted, s_beta, s_gamma, estimator);
    NodewiseFit {
        node: j,
        gamma: sol.gamma.clone(),
        beta_blocks: sol.beta_blocks.clone(),
        sigma2,
        objective: sol.objective,
        iterations: sol.outer_iters,
        kkt_residual: solver::kkt_residual(problem, sol),
        penalty: problem.penalty(),
        converged: sol.converged,
    }
}

pub fn fit_node(
    d: &Dataset,
    j: usize,
    penalty: PenaltyConfig,
    opts: &SolverOptions,
    estimator: Sigma2Estimator,
) -> Result<NodewiseFit> {
    let problem = node_problem(d, j, penalty, opts)?;
    let sol = solver::solve(&problem, opts, None).map_err(|e| e.at_node(j))?;
    Ok(finish_node(&problem, j, &sol, estimator))
}

/// `-beta / sigma2` blockwise.
pub fn rescale_to_theta(fit: &NodewiseFit) -> Vec<Vec<f64>> {
    fit.beta_blocks
        .iter()
        .map(|b| b.iter().map(|v| -v / fit.sigma2).collect())
        .collect()
}
