//! Evaluation against simulated truth: edge recovery rates, coefficient
//! errors, precision and mean errors, and the sparsity-scaling experiment.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::predict_subject;
use crate::model::{GraphModel, NodewiseFit};
use crate::nodewise::others;
use crate::pipeline::{fit_cspine, FitOptions};
use crate::simulation::{
    fixed_scale_covariate_components, generate_components, generate_gamma, generate_with, stream, Overrides,
    SimulationConfig, SimulationTruth,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    All,
    Pop,
    Cov,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub true_pos: usize,
    pub truth: usize,
    pub false_pos: usize,
    pub non_edges: usize,
}

impl EdgeCounts {
    pub fn tpr(&self) -> f64 {
        if self.truth == 0 {
            1.0
        } else {
            self.true_pos as f64 / self.truth as f64
        }
    }

    pub fn fpr(&self) -> f64 {
        if self.non_edges == 0 {
            0.0
        } else {
            self.false_pos as f64 / self.non_edges as f64
        }
    }

    fn add_matrix(&mut self, est: &DMatrix<f64>, truth: &DMatrix<f64>) {
        let p = truth.nrows();
        for j in 0..p {
            for k in (j + 1)..p {
                let t = truth[(j, k)] != 0.0;
                let e = est[(j, k)] != 0.0;
                if t {
                    self.truth += 1;
                    self.true_pos += e as usize;
                } else {
                    self.non_edges += 1;
                    self.false_pos += e as usize;
                }
            }
        }
    }
}

fn check_components(est: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<()> {
    if est.len() != truth.len() || est.iter().zip(truth).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::DimensionMismatch(format!(
            "{} estimated components vs {} true components",
            est.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Pooled upper-triangle counts over the components selected by `scope`.
pub fn edge_counts(est: &[DMatrix<f64>], truth: &[DMatrix<f64>], scope: Scope) -> Result<EdgeCounts> {
    check_components(est, truth)?;
    let range = match scope {
        Scope::All => 0..truth.len(),
        Scope::Pop => 0..1,
        Scope::Cov => 1..truth.len(),
    };
    let mut c = EdgeCounts::default();
    for h in range {
        c.add_matrix(&est[h], &truth[h]);
    }
    Ok(c)
}

/// `(tpr, fpr)` for the given scope.
pub fn edge_rates(est: &[DMatrix<f64>], truth: &[DMatrix<f64>], scope: Scope) -> Result<(f64, f64)> {
    let c = edge_counts(est, truth, scope)?;
    Ok((c.tpr(), c.fpr()))
}

/// Regression-scale coefficients implied by the truth for node `j`:
/// `beta_jkh = -B_h[j,k] / B_0[j,j]`.
pub fn true_beta(b: &[DMatrix<f64>], j: usize) -> Vec<Vec<f64>> {
    let p = b[0].nrows();
    let d = b[0][(j, j)];
    b.iter()
        .map(|bh| others(p, j).into_iter().map(|k| -bh[(j, k)] / d).collect())
        .collect()
}

/// Regression-scale mean coefficients for node `j` under the natural model:
/// `gamma_j = Gamma[j, ] / B_0[j,j]`.
pub fn true_gamma(truth: &SimulationTruth, j: usize) -> Vec<f64> {
    let d = truth.b[0][(j, j)];
    truth.gamma.row(j).iter().map(|v| v / d).collect()
}

fn fits_for(fits: &[NodewiseFit], p: usize) -> Result<()> {
    if fits.len() != p || fits.iter().enumerate().any(|(j, f)| f.node != j) {
        return Err(Error::DimensionMismatch(format!("expected {p} nodewise fits in node order")));
    }
    Ok(())
}

/// `sum_j ||beta_hat_j - beta_j||_2` in the regression scale.
pub fn beta_error(fits: &[NodewiseFit], b: &[DMatrix<f64>]) -> Result<f64> {
    let p = b[0].nrows();
    fits_for(fits, p)?;
    let mut total = 0.0;
    for (j, fit) in fits.iter().enumerate() {
        let t = true_beta(b, j);
        if fit.beta_blocks.len() != t.len() || fit.beta_blocks.iter().any(|blk| blk.len() != p - 1) {
            return Err(Error::DimensionMismatch(format!("node {j} block layout")));
        }
        let sq: f64 = fit
            .beta_blocks
            .iter()
            .zip(&t)
            .flat_map(|(e, t)| e.iter().zip(t).map(|(a, b)| (a - b).powi(2)))
            .sum();
        total += sq.sqrt();
    }
    Ok(total)
}

/// `sum_j ||gamma_hat_j - gamma_j||_2` in the regression scale.
pub fn gamma_error(fits: &[NodewiseFit], truth: &SimulationTruth) -> Result<f64> {
    let p = truth.gamma.nrows();
    fits_for(fits, p)?;
    let mut total = 0.0;
    for (j, fit) in fits.iter().enumerate() {
        let t = true_gamma(truth, j);
        if fit.gamma.len() != t.len() {
            return Err(Error::DimensionMismatch(format!("node {j} gamma length")));
        }
        total += fit.gamma.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    }
    Ok(total)
}

/// Squared Frobenius norm over off-diagonal entries.
pub fn off_diagonal_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let p = a.nrows();
    let mut s = 0.0;
    for j in 0..p {
        for k in 0..p {
            if j != k {
                s += (a[(j, k)] - b[(j, k)]).powi(2);
            }
        }
    }
    s
}

fn subject_covariates(truth: &SimulationTruth, i: usize) -> Vec<f64> {
    truth.dataset.u().row(i).iter().copied().collect()
}

/// Mean over subjects of the off-diagonal squared Frobenius error.
pub fn omega_error(est: &GraphModel, truth: &SimulationTruth) -> Result<f64> {
    let n = truth.omega_per_subject.len();
    let mut total = 0.0;
    for i in 0..n {
        let omega = est.omega_at(&subject_covariates(truth, i));
        if omega.shape() != truth.omega_per_subject[i].shape() {
            return Err(Error::DimensionMismatch("precision matrix shape".into()));
        }
        total += off_diagonal_sq(&omega, &truth.omega_per_subject[i]);
    }
    Ok(total / n as f64)
}

/// Subject-averaged `(tpr, fpr)` of the off-diagonal support of the
/// predicted precision matrices.
pub fn omega_support_rates(est: &GraphModel, truth: &SimulationTruth) -> Result<(f64, f64)> {
    let n = truth.omega_per_subject.len();
    let (mut tpr, mut fpr) = (0.0, 0.0);
    for i in 0..n {
        let omega = est.omega_at(&subject_covariates(truth, i));
        let mut c = EdgeCounts::default();
        c.add_matrix(&omega, &truth.omega_per_subject[i]);
        tpr += c.tpr();
        fpr += c.fpr();
    }
    Ok((tpr / n as f64, fpr / n as f64))
}

/// Mean over subjects of `||mu_hat_i - mu_i||^2`.
pub fn mu_error(est: &GraphModel, truth: &SimulationTruth) -> Result<f64> {
    let n = truth.mu_per_subject.len();
    let mut total = 0.0;
    for i in 0..n {
        let pred = predict_subject(est, &subject_covariates(truth, i))?;
        total += (pred.mu - &truth.mu_per_subject[i]).norm_squared();
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tpr: f64,
    pub tpr_pop: f64,
    pub fpr_pop: f64,
    pub tpr_cov: f64,
    pub fpr_overall: f64,
    pub beta_err: f64,
    pub gamma_err: f64,
    pub omega_err: f64,
    pub omega_tpr: f64,
    pub omega_fpr: f64,
    pub mu_err: f64,
}

impl EvalReport {
    pub const FIELDS: [&'static str; 11] = [
        "tpr",
        "tpr_pop",
        "fpr_pop",
        "tpr_cov",
        "fpr_overall",
        "beta_err",
        "gamma_err",
        "omega_err",
        "omega_tpr",
        "omega_fpr",
        "mu_err",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.tpr,
            self.tpr_pop,
            self.fpr_pop,
            self.tpr_cov,
            self.fpr_overall,
            self.beta_err,
            self.gamma_err,
            self.omega_err,
            self.omega_tpr,
            self.omega_fpr,
            self.mu_err,
        ]
    }
}

pub fn evaluate(est: &GraphModel, fits: &[NodewiseFit], truth: &SimulationTruth) -> Result<EvalReport> {
    let all = edge_counts(&est.b_tilde, &truth.b, Scope::All)?;
    let pop = edge_counts(&est.b_tilde, &truth.b, Scope::Pop)?;
    let cov = edge_counts(&est.b_tilde, &truth.b, Scope::Cov)?;
    let (omega_tpr, omega_fpr) = omega_support_rates(est, truth)?;
    Ok(EvalReport {
        tpr: all.tpr(),
        tpr_pop: pop.tpr(),
        fpr_pop: pop.fpr(),
        tpr_cov: cov.tpr(),
        fpr_overall: all.fpr(),
        beta_err: beta_error(fits, &truth.b)?,
        gamma_err: gamma_error(fits, truth)?,
        omega_err: omega_error(est, truth)?,
        omega_tpr,
        omega_fpr,
        mu_err: mu_error(est, truth)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingDesign {
    /// Components held fixed, density of Gamma varies. Gamma entries keep
    /// their raw size (no SNR calibration).
    Gamma,
    /// Gamma and `B_0` held fixed, edge probability of the covariate graphs
    /// varies. Covariate entries share one scale across all levels.
    Components,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    /// Base simulation; its seed fixes the held-fixed parameter.
    pub base: SimulationConfig,
    pub design: ScalingDesign,
    pub levels: Vec<f64>,
    pub replicates: usize,
    /// Density of the fixed Gamma in the components design.
    pub fixed_gamma_density: f64,
    pub fit: FitOptions,
}

impl ScalingConfig {
    /// Scale of the covariate entries in the components design: the row
    /// normalization factor for the expected row load at the densest level.
    pub fn component_scale(&self) -> f64 {
        let b = &self.base;
        let top = self.levels.iter().copied().fold(0.0, f64::max);
        let mean_entry = 0.5 * (b.entry_range.0 + b.entry_range.1);
        let load = mean_entry * (b.q_e * (b.p - 1)) as f64 * top;
        if load > 0.0 {
            1.0 / (b.row_divisor_factor * load)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub level: f64,
    pub replicate: usize,
    /// Nonzero entries of Gamma or of the off-diagonal components.
    pub nonzeros: usize,
    pub gamma_err: f64,
    pub beta_err: f64,
}

impl ScalingRow {
    pub fn error(&self) -> f64 {
        self.gamma_err + self.beta_err
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSummary {
    pub design: ScalingDesign,
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of log error on log nonzeros, if at least two
    /// distinct positive sparsity levels were observed.
    pub slope: Option<f64>,
}

/// Least-squares fit of `log y` on `log x`, ignoring points with `x == 0`
/// or `y <= 0`. Returns `(slope, intercept)`.
pub fn loglog_fit(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let m = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn component_nonzeros(b: &[DMatrix<f64>]) -> usize {
    b.iter()
        .map(|m| {
            let p = m.nrows();
            (0..p)
                .flat_map(|j| (0..p).map(move |k| (j, k)))
                .filter(|&(j, k)| j != k && m[(j, k)] != 0.0)
                .count()
        })
        .sum()
}

/// Seed of replicate `r`, shared by all levels so that levels differ only
/// in the varied parameter.
fn replicate_seed(base: u64, r: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(r as u64 + 1)
}

/// One simulated data set for the scaling experiment.
pub fn scaling_replicate(cfg: &ScalingConfig, level_index: usize, replicate: usize) -> Result<ScalingRow> {
    let level = cfg.levels[level_index];
    let mut sim = cfg.base.clone();
    sim.seed = replicate_seed(cfg.base.seed, replicate);
    let fixed = generate_components(&cfg.base);
    let overrides = match cfg.design {
        ScalingDesign::Gamma => {
            sim.gamma_density = level;
            sim.snr = None;
            Overrides {
                components: Some(fixed),
                gamma: None,
            }
        }
        ScalingDesign::Components => {
            sim.edge_prob = level;
            let mut components = vec![fixed[0].clone()];
            components.extend(fixed_scale_covariate_components(&sim, cfg.component_scale()));
            let gamma_cfg = SimulationConfig {
                gamma_density: cfg.fixed_gamma_density,
                ..cfg.base.clone()
            };
            Overrides {
                components: Some(components),
                gamma: Some(generate_gamma(&gamma_cfg, &mut stream(cfg.base.seed, u64::MAX))?),
            }
        }
    };
    let truth = generate_with(&sim, &overrides)?;
    let mut fit_opts = cfg.fit.clone();
    fit_opts.grid.seed = sim.seed;
    let fitted = fit_cspine(&truth.dataset, &fit_opts)?;
    let nonzeros = match cfg.design {
        ScalingDesign::Gamma => truth.gamma.iter().filter(|v| **v != 0.0).count(),
        ScalingDesign::Components => component_nonzeros(&truth.b),
    };
    Ok(ScalingRow {
        level,
        replicate,
        nonzeros,
        gamma_err: gamma_error(&fitted.fits, &truth)?,
        beta_err: beta_error(&fitted.fits, &truth.b)?,
    })
}

pub fn sparsity_scaling_experiment(cfg: &ScalingConfig) -> Result<ScalingSummary> {
    let mut rows = Vec::with_capacity(cfg.levels.len() * cfg.replicates);
    for l in 0..cfg.levels.len() {
        for r in 0..cfg.replicates {
            rows.push(scaling_replicate(cfg, l, r)?);
        }
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.nonzeros as f64, r.error())).collect();
    Ok(ScalingSummary {
        design: cfg.design,
        slope: loglog_fit(&points).map(|(s, _)| s),
        rows,
    })
}
