//! Shared domain types: datasets, penalty settings, fitted nodewise models and
//! the assembled covariate-dependent graph.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Binary,
    Continuous,
}

/// Responses `x` (n x p) observed together with covariates `u` (n x q).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    u: DMatrix<f64>,
    kinds: Vec<CovariateKind>,
    x_names: Vec<String>,
    u_names: Vec<String>,
}

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    for col in 0..m.ncols() {
        for row in 0..m.nrows() {
            if !m[(row, col)].is_finite() {
                return Err(Error::NonFinite { what, row, col });
            }
        }
    }
    Ok(())
}

fn default_names(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("{prefix}{i}")).collect()
}

impl Dataset {
    /// Validates dimensions, finiteness and binary coding.
    pub fn new(x: DMatrix<f64>, u: DMatrix<f64>, kinds: Vec<CovariateKind>) -> Result<Self> {
        let (p, q) = (x.ncols(), u.ncols());
        Self::with_names(x, u, kinds, default_names("x", p), default_names("u", q))
    }

    pub fn with_names(
        x: DMatrix<f64>,
        u: DMatrix<f64>,
        kinds: Vec<CovariateKind>,
        x_names: Vec<String>,
        u_names: Vec<String>,
    ) -> Result<Self> {
        if x.nrows() != u.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "X has {} rows but U has {}",
                x.nrows(),
                u.nrows()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::DimensionMismatch("dataset has no rows".into()));
        }
        if x.ncols() < 2 {
            return Err(Error::DimensionMismatch(format!(
                "need at least 2 responses, got {}",
                x.ncols()
            )));
        }
        if u.ncols() == 0 {
            return Err(Error::DimensionMismatch("need at least 1 covariate".into()));
        }
        if kinds.len() != u.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate kinds for {} covariates",
                kinds.len(),
                u.ncols()
            )));
        }
        if x_names.len() != x.ncols() || u_names.len() != u.ncols() {
            return Err(Error::DimensionMismatch("column name count".into()));
        }
        check_finite(&x, "X")?;
        check_finite(&u, "U")?;
        for (col, kind) in kinds.iter().enumerate() {
            if *kind == CovariateKind::Binary {
                for row in 0..u.nrows() {
                    let value = u[(row, col)];
                    if value != 0.0 && value != 1.0 {
                        return Err(Error::BinaryViolation { col, row, value });
                    }
                }
            }
        }
        Ok(Dataset {
            x,
            u,
            kinds,
            x_names,
            u_names,
        })
    }

    /// Marks a covariate column as binary when it only contains 0 and 1.
    pub fn infer_kinds(u: &DMatrix<f64>) -> Vec<CovariateKind> {
        u.column_iter()
            .map(|c| {
                if c.iter().all(|&v| v == 0.0 || v == 1.0) {
                    CovariateKind::Binary
                } else {
                    CovariateKind::Continuous
                }
            })
            .collect()
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.u.ncols()
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }
    pub fn kinds(&self) -> &[CovariateKind] {
        &self.kinds
    }
    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }
    pub fn u_names(&self) -> &[String] {
        &self.u_names
    }

    /// Subsets rows, keeping column metadata. Binary checks still hold.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            u: self.u.select_rows(rows),
            kinds: self.kinds.clone(),
            x_names: self.x_names.clone(),
            u_names: self.u_names.clone(),
        }
    }

    /// Subtracts column means from the responses. Off by default in the
    /// fitting pipeline since the model carries its mean through Gamma.
    pub fn center_responses(&self) -> Dataset {
        let mut x = self.x.clone();
        for mut col in x.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        Dataset { x, ..self.clone() }
    }
}

/// Per-column (mean, sd) used to standardize continuous covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl ScalingRecord {
    /// Maps standardized covariates back to the original scale.
    pub fn invert(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = u.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            for v in col.iter_mut() {
                *v = *v * self.sds[j] + self.means[j];
            }
        }
        out
    }

    pub fn apply(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = u.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            for v in col.iter_mut() {
                *v = (*v - self.means[j]) / self.sds[j];
            }
        }
        out
    }
}

pub(crate) fn mean_and_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n as f64 - 1.0)).sqrt())
}

/// Standardizes continuous covariates to mean 0 and sample variance 1
/// (denominator n - 1). Binary columns are left alone.
pub fn standardize_covariates(d: &Dataset) -> Result<(Dataset, ScalingRecord)> {
    let q = d.q();
    let mut means = vec![0.0; q];
    let mut sds = vec![1.0; q];
    for (j, kind) in d.kinds.iter().enumerate() {
        if *kind == CovariateKind::Continuous {
            let (m, s) = mean_and_sd(d.u.column(j).iter().copied());
            if s <= 0.0 || !s.is_finite() {
                return Err(Error::DegenerateColumn { col: j });
            }
            means[j] = m;
            sds[j] = s;
        }
    }
    let record = ScalingRecord { means, sds };
    let u = record.apply(&d.u);
    Ok((
        Dataset {
            u,
            ..d.clone()
        },
        record,
    ))
}

/// Penalty weights: `lambda` multiplies every l1 norm, `lambda_g` the group
/// norms of the covariate interaction blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub lambda_g: f64,
}

impl PenaltyConfig {
    pub fn new(lambda: f64, lambda_g: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) || !(lambda_g >= 0.0 && lambda_g.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "penalties must be finite and nonnegative, got ({lambda}, {lambda_g})"
            )));
        }
        Ok(PenaltyConfig { lambda, lambda_g })
    }

    /// `lambda = alpha_s * lambda0`, `lambda_g = (1 - alpha_s) * lambda0`.
    pub fn from_mixture(alpha_s: f64, lambda0: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha_s) {
            return Err(Error::InvalidConfig(format!(
                "alpha_s must lie in [0, 1], got {alpha_s}"
            )));
        }
        Self::new(alpha_s * lambda0, (1.0 - alpha_s) * lambda0)
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda + self.lambda_g
    }

    /// Mixing weight, `None` when both penalties are zero.
    pub fn alpha_s(&self) -> Option<f64> {
        let l0 = self.lambda0();
        (l0 > 0.0).then(|| self.lambda / l0)
    }
}

/// Result of one nodewise regression in the regression scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodewiseFit {
    pub node: usize,
    pub gamma: Vec<f64>,
    /// `q + 1` blocks of length `p - 1`; block 0 is the population block.
    pub beta_blocks: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub penalty: PenaltyConfig,
    pub converged: bool,
}

impl NodewiseFit {
    pub fn nonzero_beta(&self) -> usize {
        self.beta_blocks
            .iter()
            .flat_map(|b| b.iter())
            .filter(|v| **v != 0.0)
            .count()
    }

    pub fn nonzero_gamma(&self) -> usize {
        self.gamma.iter().filter(|v| **v != 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymmetrizationRule {
    And,
    Or,
}

impl std::str::FromStr for SymmetrizationRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "and" => Ok(SymmetrizationRule::And),
            "or" => Ok(SymmetrizationRule::Or),
            other => Err(Error::InvalidConfig(format!("unknown rule {other:?}"))),
        }
    }
}

/// Fitted covariate-dependent graph: `Omega(u) = B0 + sum_h B_h u_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphModel {
    /// p x q, row j is the nodewise gamma of response j.
    pub gamma_hat: DMatrix<f64>,
    /// `q + 1` symmetric p x p component matrices.
    pub b_tilde: Vec<DMatrix<f64>>,
    pub sigma2: DVector<f64>,
    pub rule: SymmetrizationRule,
}

impl GraphModel {
    pub fn p(&self) -> usize {
        self.gamma_hat.nrows()
    }
    pub fn q(&self) -> usize {
        self.gamma_hat.ncols()
    }

    /// `B0 + sum_h B_h u_h` without any ridge repair.
    pub fn omega_at(&self, u: &[f64]) -> DMatrix<f64> {
        let mut omega = self.b_tilde[0].clone();
        for (h, &uh) in u.iter().enumerate() {
            if uh != 0.0 {
                omega += &self.b_tilde[h + 1] * uh;
            }
        }
        omega
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPrediction {
    pub omega: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub ridge_added: f64,
}
