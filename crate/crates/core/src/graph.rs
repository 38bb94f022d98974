//! Symmetrization of nodewise estimates into component matrices and
//! per-subject prediction of the precision matrix and mean.

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{GraphModel, NodewiseFit, SubjectPrediction, SymmetrizationRule};
use crate::nodewise::{others, rescale_to_theta};

/// Combines the two directed estimates of one entry.
///
/// And keeps the smaller magnitude (zero if either is zero), Or keeps the
/// larger. Equal nonzero magnitudes resolve to `from_lower`, the estimate
/// from the lower-indexed node.
pub fn combine(from_lower: f64, from_upper: f64, rule: SymmetrizationRule) -> f64 {
    let (a, b) = (from_lower.abs(), from_upper.abs());
    match rule {
        SymmetrizationRule::And => {
            if a == 0.0 || b == 0.0 {
                0.0
            } else if a < b {
                from_lower
            } else if a > b {
                from_upper
            } else {
                from_lower
            }
        }
        SymmetrizationRule::Or => {
            if a >= b {
                from_lower
            } else {
                from_upper
            }
        }
    }
}

/// `beta_tilde[j][h]` is node j's rescaled block h (length p - 1, other
/// responses in increasing order). Returns q + 1 symmetric matrices with
/// `1 / sigma2` on the diagonal of the first and zero diagonals elsewhere.
pub fn symmetrize(
    beta_tilde: &[Vec<Vec<f64>>],
    sigma2: &[f64],
    rule: SymmetrizationRule,
) -> Result<Vec<DMatrix<f64>>> {
    let p = beta_tilde.len();
    if sigma2.len() != p || p < 2 {
        return Err(Error::DimensionMismatch(
            "need one rescaled fit and variance per node".into(),
        ));
    }
    let n_blocks = beta_tilde[0].len();
    if beta_tilde
        .iter()
        .any(|b| b.len() != n_blocks || b.iter().any(|v| v.len() != p - 1))
    {
        return Err(Error::DimensionMismatch("ragged nodewise blocks".into()));
    }
    // entry (j, k) of block h as estimated by node j
    let directed = |j: usize, k: usize, h: usize| -> f64 {
        let pos = if k < j { k } else { k - 1 };
        beta_tilde[j][h][pos]
    };
    let mut ties = 0usize;
    let mut out = Vec::with_capacity(n_blocks);
    for h in 0..n_blocks {
        let mut m = DMatrix::zeros(p, p);
        for j in 0..p {
            for k in (j + 1)..p {
                let a = directed(j, k, h);
                let b = directed(k, j, h);
                if a != 0.0 && a.abs() == b.abs() {
                    ties += 1;
                }
                let v = combine(a, b, rule);
                m[(j, k)] = v;
                m[(k, j)] = v;
            }
        }
        if h == 0 {
            for j in 0..p {
                m[(j, j)] = 1.0 / sigma2[j];
            }
        }
        out.push(m);
    }
    if ties > 0 {
        debug!("{ties} magnitude ties resolved toward the lower-indexed node");
    }
    Ok(out)
}

/// Builds the full model from the p nodewise fits (ordered by node).
pub fn assemble(fits: &[NodewiseFit], rule: SymmetrizationRule) -> Result<GraphModel> {
    let p = fits.len();
    if p < 2 || fits.iter().enumerate().any(|(j, f)| f.node != j) {
        return Err(Error::DimensionMismatch("fits must cover nodes 0..p in order".into()));
    }
    let q = fits[0].gamma.len();
    let beta_tilde: Vec<_> = fits.iter().map(rescale_to_theta).collect();
    let sigma2: Vec<f64> = fits.iter().map(|f| f.sigma2).collect();
    let b_tilde = symmetrize(&beta_tilde, &sigma2, rule)?;
    let gamma_hat = DMatrix::from_fn(p, q, |j, h| fits[j].gamma[h]);
    Ok(GraphModel {
        gamma_hat,
        b_tilde,
        sigma2: DVector::from_vec(sigma2),
        rule,
    })
}

const RIDGE_MARGIN: f64 = 1e-6;

/// Precision matrix and mean at covariate vector `u`. A non positive
/// definite estimate is shifted by `(|lambda_min| + 1e-6) I` first.
pub fn predict_subject(m: &GraphModel, u: &[f64]) -> Result<SubjectPrediction> {
    if u.len() != m.q() {
        return Err(Error::DimensionMismatch(format!(
            "covariate vector has length {}, model expects {}",
            u.len(),
            m.q()
        )));
    }
    let mut omega = m.omega_at(u);
    let p = m.p();
    let mut ridge_added = 0.0;
    let chol = match omega.clone().cholesky() {
        Some(c) => c,
        None => {
            let lmin = SymmetricEigen::new(omega.clone())
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            ridge_added = lmin.abs() + RIDGE_MARGIN;
            for j in 0..p {
                omega[(j, j)] += ridge_added;
            }
            omega
                .clone()
                .cholesky()
                .ok_or(Error::SingularAfterRidge { ridge: ridge_added })?
        }
    };
    let uvec = DVector::from_column_slice(u);
    let theta = &m.gamma_hat * uvec;
    let rhs = DVector::from_fn(p, |j, _| theta[j] / m.sigma2[j]);
    let mu = chol.solve(&rhs);
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularAfterRidge { ridge: ridge_added });
    }
    Ok(SubjectPrediction {
        omega,
        mu,
        ridge_added,
    })
}

/// Per component h, the pairs `j < k` with `|B_h[j,k]| > threshold`.
pub fn edge_sets(m: &GraphModel, threshold: f64) -> Vec<Vec<(usize, usize, f64)>> {
    m.b_tilde
        .iter()
        .map(|b| {
            let p = b.nrows();
            let mut edges = Vec::new();
            for j in 0..p {
                for k in (j + 1)..p {
                    if b[(j, k)].abs() > threshold {
                        edges.push((j, k, b[(j, k)]));
                    }
                }
            }
            edges
        })
        .collect()
}

/// Off-diagonal support of a symmetric matrix, upper triangle.
pub fn support(m: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let p = m.nrows();
    let mut s = Vec::new();
    for j in 0..p {
        for k in (j + 1)..p {
            if m[(j, k)] != 0.0 {
                s.push((j, k));
            }
        }
    }
    s
}

/// Row-wise nodewise estimate as a full p x p matrix (row j from node j).
pub fn directed_matrix(beta_tilde: &[Vec<Vec<f64>>], h: usize) -> DMatrix<f64> {
    let p = beta_tilde.len();
    let mut m = DMatrix::zeros(p, p);
    for j in 0..p {
        for (pos, k) in others(p, j).into_iter().enumerate() {
            m[(j, k)] = beta_tilde[j][h][pos];
        }
    }
    m
}
