//! Block coordinate descent for the sparse-group lasso problem
//!
//! ```text
//! min (1/2n)||y - A_g g - sum_h A_h b_h||^2 + lambda (||g||_1 + sum_h ||b_h||_1)
//!     + lambda_g sum_{h >= 1} ||b_h||_2
//! ```
//!
//! The coefficient vector is split into an l1-only block `g`, an l1-only
//! block `b_0` and group blocks `b_1 .. b_q` of equal width. Penalties act on
//! the coefficients of columns rescaled to unit mean square; `column_scales`
//! holds those scales and doubles as per-coordinate penalty weights in the
//! original parametrization.
//!
//! The solver keeps `grad = A~^T r / n` (standardized columns, current
//! residual `r`) up to date through a cached Gram matrix, so a coordinate
//! move costs one column of the Gram matrix rather than a pass over the data.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PenaltyConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_outer_iters: usize,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    /// Consumed by problem builders: penalize unit-scaled columns.
    pub standardize_columns: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-6,
            max_outer_iters: 10_000,
            inner_tol: 1e-8,
            inner_max_iters: 1000,
            standardize_columns: true,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.inner_tol > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
struct Prepared {
    /// Gram matrix of the standardized design divided by n.
    gram: DMatrix<f64>,
    /// Standardized `A^T y / n`.
    corr: Vec<f64>,
    /// `y^T y / n`.
    yy: f64,
    /// Largest eigenvalue of each group block of `gram`.
    lipschitz: Vec<f64>,
    /// Diagonal blocks of `gram` for the groups; index 0 is unused.
    block_grams: Vec<DMatrix<f64>>,
}

/// One penalized least-squares problem.
#[derive(Debug, Clone)]
pub struct SglProblem {
    y: DVector<f64>,
    design: DMatrix<f64>,
    gamma_width: usize,
    block_width: usize,
    n_blocks: usize,
    penalty: PenaltyConfig,
    column_scales: Vec<f64>,
    prepared: OnceLock<Prepared>,
}

const DROP_THRESHOLD: f64 = 1e-12;

fn rms_scales(design: &DMatrix<f64>) -> Vec<f64> {
    let n = design.nrows() as f64;
    let raw: Vec<f64> = design
        .column_iter()
        .map(|c| (c.norm_squared() / n).sqrt())
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    raw.into_iter()
        .map(|s| if s <= DROP_THRESHOLD * max.max(1.0) { 0.0 } else { s })
        .collect()
}

impl SglProblem {
    /// Assembles the problem from a covariate block and `n_blocks` interaction
    /// blocks of equal width. Columns are standardized for penalization.
    pub fn new(
        y: DVector<f64>,
        a_gamma: &DMatrix<f64>,
        a_blocks: &[DMatrix<f64>],
        penalty: PenaltyConfig,
    ) -> Result<Self> {
        if a_blocks.is_empty() {
            return Err(Error::DimensionMismatch("at least one beta block".into()));
        }
        let n = y.len();
        let m = a_blocks[0].ncols();
        if a_gamma.nrows() != n || a_blocks.iter().any(|b| b.nrows() != n || b.ncols() != m) {
            return Err(Error::DimensionMismatch(
                "design blocks must share n rows and block width".into(),
            ));
        }
        let d = a_gamma.ncols() + m * a_blocks.len();
        let mut design = DMatrix::zeros(n, d);
        design.columns_mut(0, a_gamma.ncols()).copy_from(a_gamma);
        for (h, b) in a_blocks.iter().enumerate() {
            design
                .columns_mut(a_gamma.ncols() + h * m, m)
                .copy_from(b);
        }
        Self::from_design(y, design, a_gamma.ncols(), m, penalty)
    }

    /// Takes an already concatenated design `[A_gamma | A_0 | ... | A_q]`.
    pub fn from_design(
        y: DVector<f64>,
        design: DMatrix<f64>,
        gamma_width: usize,
        block_width: usize,
        penalty: PenaltyConfig,
    ) -> Result<Self> {
        let n = y.len();
        if design.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "design has {} rows, response has {n}",
                design.nrows()
            )));
        }
        let rest = design.ncols().checked_sub(gamma_width).ok_or_else(|| {
            Error::DimensionMismatch("gamma width exceeds design width".into())
        })?;
        if block_width == 0 || rest % block_width != 0 || rest == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{rest} interaction columns do not split into blocks of {block_width}"
            )));
        }
        if y.iter().chain(design.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "design",
                row: 0,
                col: 0,
            });
        }
        let column_scales = rms_scales(&design);
        Ok(SglProblem {
            y,
            gamma_width,
            block_width,
            n_blocks: rest / block_width,
            penalty,
            column_scales,
            design,
            prepared: OnceLock::new(),
        })
    }

    /// Penalize raw coefficients instead of standardized ones. All-zero
    /// columns stay dropped.
    pub fn with_unit_scales(mut self) -> Self {
        for s in self.column_scales.iter_mut() {
            if *s > 0.0 {
                *s = 1.0;
            }
        }
        self.prepared = OnceLock::new();
        self
    }

    pub fn set_penalty(&mut self, penalty: PenaltyConfig) {
        self.penalty = penalty;
    }

    pub fn with_penalty(mut self, penalty: PenaltyConfig) -> Self {
        self.penalty = penalty;
        self
    }

    pub fn penalty(&self) -> PenaltyConfig {
        self.penalty
    }
    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }
    pub fn gamma_width(&self) -> usize {
        self.gamma_width
    }
    pub fn block_width(&self) -> usize {
        self.block_width
    }
    /// Number of beta blocks including block 0.
    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }
    pub fn dim(&self) -> usize {
        self.design.ncols()
    }
    pub fn column_scales(&self) -> &[f64] {
        &self.column_scales
    }
    pub fn dropped_columns(&self) -> usize {
        self.column_scales.iter().filter(|s| **s == 0.0).count()
    }

    fn block_range(&self, h: usize) -> std::ops::Range<usize> {
        let start = self.gamma_width + h * self.block_width;
        start..start + self.block_width
    }

    fn prepared(&self) -> &Prepared {
        self.prepared.get_or_init(|| {
            let n = self.n() as f64;
            let mut std_design = self.design.clone();
            for (c, mut col) in std_design.column_iter_mut().enumerate() {
                let s = self.column_scales[c];
                if s == 0.0 {
                    col.fill(0.0);
                } else {
                    col /= s;
                }
            }
            let gram = std_design.transpose() * &std_design / n;
            let corr = (std_design.transpose() * &self.y / n).iter().copied().collect();
            let yy = self.y.norm_squared() / n;
            let block_grams: Vec<DMatrix<f64>> = (0..self.n_blocks)
                .map(|h| {
                    if h == 0 {
                        return DMatrix::zeros(0, 0);
                    }
                    let r = self.block_range(h);
                    gram.view((r.start, r.start), (r.len(), r.len())).into_owned()
                })
                .collect();
            let lipschitz = block_grams
                .iter()
                .enumerate()
                .map(|(h, sub)| {
                    if h == 0 {
                        return 0.0;
                    }
                    SymmetricEigen::new(sub.clone())
                        .eigenvalues
                        .iter()
                        .cloned()
                        .fold(0.0, f64::max)
                })
                .collect();
            Prepared {
                gram,
                corr,
                yy,
                lipschitz,
                block_grams,
            }
        })
    }

    /// Standardized `A^T y / n`, used for path construction. Computed from
    /// the design directly so it does not build the Gram matrix.
    pub fn standardized_correlations(&self) -> Vec<f64> {
        if let Some(prep) = self.prepared.get() {
            return prep.corr.clone();
        }
        let n = self.n() as f64;
        self.design
            .column_iter()
            .zip(&self.column_scales)
            .map(|(col, s)| if *s == 0.0 { 0.0 } else { col.dot(&self.y) / (n * s) })
            .collect()
    }

    /// Index ranges of the l1-only columns and of each group block.
    pub fn lasso_columns(&self) -> std::ops::Range<usize> {
        0..self.gamma_width + self.block_width
    }

    pub fn group_columns(&self, h: usize) -> std::ops::Range<usize> {
        assert!(h >= 1 && h < self.n_blocks);
        self.block_range(h)
    }

    /// Splits a flat original-scale coefficient vector into (gamma, blocks).
    pub fn split(&self, flat: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let gamma = flat[..self.gamma_width].to_vec();
        let blocks = (0..self.n_blocks)
            .map(|h| flat[self.block_range(h)].to_vec())
            .collect();
        (gamma, blocks)
    }

    fn flatten(&self, gamma: &[f64], blocks: &[Vec<f64>]) -> Result<Vec<f64>> {
        if gamma.len() != self.gamma_width
            || blocks.len() != self.n_blocks
            || blocks.iter().any(|b| b.len() != self.block_width)
        {
            return Err(Error::DimensionMismatch(
                "coefficient shapes do not match the problem".into(),
            ));
        }
        let mut flat = Vec::with_capacity(self.dim());
        flat.extend_from_slice(gamma);
        for b in blocks {
            flat.extend_from_slice(b);
        }
        Ok(flat)
    }

    /// `y - A b` in the original scale.
    pub fn residual(&self, flat: &[f64]) -> DVector<f64> {
        let mut r = self.y.clone();
        for (c, &b) in flat.iter().enumerate() {
            if b != 0.0 {
                r.axpy(-b, &self.design.column(c), 1.0);
            }
        }
        r
    }
}

/// Penalized objective at an original-scale point. With unit column scales
/// this is exactly the textbook sparse-group lasso objective.
pub fn objective(p: &SglProblem, gamma: &[f64], beta_blocks: &[Vec<f64>]) -> Result<f64> {
    let flat = p.flatten(gamma, beta_blocks)?;
    Ok(objective_flat(p, &flat))
}

fn objective_flat(p: &SglProblem, flat: &[f64]) -> f64 {
    let r = p.residual(flat);
    let loss = r.norm_squared() / (2.0 * p.n() as f64);
    let s = &p.column_scales;
    let l1: f64 = flat.iter().zip(s).map(|(b, s)| (b * s).abs()).sum();
    let group: f64 = (1..p.n_blocks)
        .map(|h| {
            p.block_range(h)
                .map(|c| (flat[c] * s[c]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    loss + p.penalty.lambda * l1 + p.penalty.lambda_g * group
}

/// Iterate of the block coordinate descent in standardized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    coef: Vec<f64>,
    grad: Vec<f64>,
    /// When set, only the gradient entries in these ranges are kept current.
    focus: Option<Vec<std::ops::Range<usize>>>,
}

impl SolverState {
    pub fn zeros(p: &SglProblem) -> Self {
        let prep = p.prepared();
        SolverState {
            coef: vec![0.0; p.dim()],
            grad: prep.corr.clone(),
            focus: None,
        }
    }

    /// State at an original-scale point.
    pub fn at(p: &SglProblem, gamma: &[f64], beta_blocks: &[Vec<f64>]) -> Result<Self> {
        let flat = p.flatten(gamma, beta_blocks)?;
        let coef = flat
            .iter()
            .zip(&p.column_scales)
            .map(|(b, s)| b * s)
            .collect();
        let mut state = SolverState {
            coef,
            grad: Vec::new(),
            focus: None,
        };
        state.refresh(p);
        Ok(state)
    }

    pub fn from_solution(p: &SglProblem, sol: &SglSolution) -> Result<Self> {
        Self::at(p, &sol.gamma, &sol.beta_blocks)
    }

    /// Recomputes `grad = corr - G coef` from scratch.
    fn refresh(&mut self, p: &SglProblem) {
        let prep = p.prepared();
        let mut grad = DVector::from_column_slice(&prep.corr);
        for (c, &b) in self.coef.iter().enumerate() {
            if b != 0.0 {
                grad.axpy(-b, &prep.gram.column(c), 1.0);
            }
        }
        self.grad = grad.iter().copied().collect();
    }

    /// Original-scale coefficients.
    pub fn coefficients(&self, p: &SglProblem) -> (Vec<f64>, Vec<Vec<f64>>) {
        let flat: Vec<f64> = self
            .coef
            .iter()
            .zip(&p.column_scales)
            .map(|(b, s)| if *s == 0.0 { 0.0 } else { b / s })
            .collect();
        p.split(&flat)
    }

    /// Standardized `A~^T r / n` at the current iterate.
    pub fn correlations(&self) -> &[f64] {
        &self.grad
    }

    /// Objective value from the cached quantities.
    pub fn objective(&self, p: &SglProblem) -> f64 {
        let prep = p.prepared();
        let fit: f64 = self
            .coef
            .iter()
            .zip(prep.corr.iter().zip(&self.grad))
            .filter(|(b, _)| **b != 0.0)
            .map(|(b, (c, g))| b * (c + g))
            .sum();
        let loss = 0.5 * prep.yy - 0.5 * fit;
        let l1: f64 = self.coef.iter().map(|b| b.abs()).sum();
        let group: f64 = (1..p.n_blocks)
            .map(|h| l2(&self.coef[p.block_range(h)]))
            .sum();
        loss + p.penalty.lambda * l1 + p.penalty.lambda_g * group
    }

    fn move_coordinate(&mut self, gram: &DMatrix<f64>, c: usize, delta: f64) {
        self.coef[c] += delta;
        let col = gram.column(c);
        let col = col.as_slice();
        match &self.focus {
            Some(ranges) => {
                for r in ranges {
                    for (g, gc) in self.grad[r.clone()].iter_mut().zip(&col[r.clone()]) {
                        *g -= delta * gc;
                    }
                }
            }
            None => {
                for (g, gc) in self.grad.iter_mut().zip(col) {
                    *g -= delta * gc;
                }
            }
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One cyclic pass of exact coordinate minimization; returns the largest move.
fn lasso_pass(p: &SglProblem, coords: &[usize], state: &mut SolverState) -> f64 {
    let prep = p.prepared();
    let lambda = p.penalty.lambda;
    let mut max_move: f64 = 0.0;
    for &c in coords {
        if p.column_scales[c] == 0.0 {
            continue;
        }
        let gcc = prep.gram[(c, c)];
        let old = state.coef[c];
        let z = state.grad[c] + gcc * old;
        let new = soft_threshold(z, lambda) / gcc;
        let delta = new - old;
        if delta != 0.0 {
            state.move_coordinate(&prep.gram, c, delta);
            max_move = max_move.max(delta.abs());
        }
    }
    max_move
}

/// Coordinate descent over an l1-only range, repeated until the largest move
/// in a pass drops below `inner_tol`. Returns the largest net change.
fn update_lasso_range(
    p: &SglProblem,
    coords: &[usize],
    opts: &SolverOptions,
    state: &mut SolverState,
) -> f64 {
    let start: Vec<f64> = coords.iter().map(|&c| state.coef[c]).collect();
    for _ in 0..opts.inner_max_iters.max(1) {
        if lasso_pass(p, coords, state) < opts.inner_tol {
            break;
        }
    }
    coords
        .iter()
        .zip(&start)
        .map(|(&c, s)| (state.coef[c] - s).abs())
        .fold(0.0, f64::max)
}

/// Updates the covariate coefficients by cyclic coordinate descent.
pub fn block_update_gamma(p: &SglProblem, opts: &SolverOptions, state: &mut SolverState) -> f64 {
    let coords: Vec<usize> = (0..p.gamma_width).collect();
    update_lasso_range(p, &coords, opts, state)
}

/// Prox of `t_l1 ||.||_1 + t_g ||.||_2`.
fn prox_sgl(v: &mut [f64], t_l1: f64, t_g: f64) {
    for x in v.iter_mut() {
        *x = soft_threshold(*x, t_l1);
    }
    let norm = l2(v);
    let shrink = if norm > 0.0 {
        (1.0 - t_g / norm).max(0.0)
    } else {
        0.0
    };
    for x in v.iter_mut() {
        *x *= shrink;
    }
}

/// Block subproblem `0.5 b'Gb - z'b + lambda ||b||_1 + lambda_g ||b||_2`.
fn group_objective(g: &DMatrix<f64>, z: &[f64], b: &[f64], lambda: f64, lambda_g: f64) -> f64 {
    let m = b.len();
    let mut quad = 0.0;
    for j in 0..m {
        if b[j] == 0.0 {
            continue;
        }
        let mut gj = 0.0;
        for i in 0..m {
            gj += g[(i, j)] * b[i];
        }
        quad += b[j] * gj;
    }
    let lin: f64 = z.iter().zip(b).map(|(z, b)| z * b).sum();
    let l1: f64 = b.iter().map(|x| x.abs()).sum();
    0.5 * quad - lin + lambda * l1 + lambda_g * l2(b)
}

fn sym_matvec(g: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        for (o, gij) in out.iter_mut().zip(g.column(j).as_slice()) {
            *o += gij * xj;
        }
    }
}

/// Updates beta block `h`. Block 0 is l1-only; groups `h >= 1` first test
/// whether the whole group can be zero, then run accelerated proximal
/// gradient on the block with step `1 / lambda_max(G_hh)`.
pub fn block_update_beta(
    p: &SglProblem,
    h: usize,
    opts: &SolverOptions,
    state: &mut SolverState,
) -> f64 {
    let range = p.block_range(h);
    if h == 0 || p.penalty.lambda_g == 0.0 {
        let coords: Vec<usize> = range.collect();
        return update_lasso_range(p, &coords, opts, state);
    }
    let prep = p.prepared();
    let PenaltyConfig { lambda, lambda_g } = p.penalty;
    let m = range.len();
    let g_hh = &prep.block_grams[h];
    let old: Vec<f64> = state.coef[range.clone()].to_vec();

    // z = A_h^T (partial residual without block h) / n
    let mut z = vec![0.0; m];
    sym_matvec(g_hh, &old, &mut z);
    for (zi, gi) in z.iter_mut().zip(&state.grad[range.clone()]) {
        *zi += gi;
    }

    let thresholded: Vec<f64> = z.iter().map(|&v| soft_threshold(v, lambda)).collect();
    let new = if l2(&thresholded) <= lambda_g {
        vec![0.0; m]
    } else {
        let lip = prep.lipschitz[h];
        let step = 1.0 / lip;
        let mut x = old.clone();
        let mut y = old.clone();
        let mut t = 1.0f64;
        let mut grad = vec![0.0; m];
        let mut x_new = vec![0.0; m];
        for _ in 0..opts.inner_max_iters.max(1) {
            sym_matvec(g_hh, &y, &mut grad);
            for i in 0..m {
                x_new[i] = y[i] - step * (grad[i] - z[i]);
            }
            prox_sgl(&mut x_new, lambda * step, lambda_g * step);
            let mut max_move: f64 = 0.0;
            let mut restart = 0.0;
            for i in 0..m {
                let d = x_new[i] - x[i];
                max_move = max_move.max(d.abs());
                restart += (y[i] - x_new[i]) * d;
            }
            if restart > 0.0 {
                t = 1.0;
                y.copy_from_slice(&x_new);
            } else {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let mom = (t - 1.0) / t_next;
                for i in 0..m {
                    y[i] = x_new[i] + mom * (x_new[i] - x[i]);
                }
                t = t_next;
            }
            std::mem::swap(&mut x, &mut x_new);
            if max_move < opts.inner_tol {
                break;
            }
        }
        for (i, c) in range.clone().enumerate() {
            if p.column_scales[c] == 0.0 {
                x[i] = 0.0;
            }
        }
        // never accept a worse block value than the starting point
        if group_objective(g_hh, &z, &x, lambda, lambda_g)
            > group_objective(g_hh, &z, &old, lambda, lambda_g)
        {
            old.clone()
        } else {
            x
        }
    };

    let mut max_change: f64 = 0.0;
    for (i, c) in range.enumerate() {
        let delta = new[i] - old[i];
        if delta != 0.0 {
            state.move_coordinate(&prep.gram, c, delta);
            max_change = max_change.max(delta.abs());
        }
    }
    max_change
}

#[derive(Debug, Clone, PartialEq)]
pub struct SglSolution {
    pub gamma: Vec<f64>,
    pub beta_blocks: Vec<Vec<f64>>,
    pub objective: f64,
    pub outer_iters: usize,
    pub converged: bool,
    /// Objective after every outer cycle; starts with the initial point.
    pub history: Vec<f64>,
}

impl SglSolution {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.gamma.clone();
        for b in &self.beta_blocks {
            v.extend_from_slice(b);
        }
        v
    }
}

/// Sorted indices grouped into maximal runs of consecutive values.
fn contiguous_runs(idx: &[usize]) -> Vec<std::ops::Range<usize>> {
    let mut sorted = idx.to_vec();
    sorted.sort_unstable();
    let mut runs: Vec<std::ops::Range<usize>> = Vec::new();
    for i in sorted {
        match runs.last_mut() {
            Some(r) if r.end == i => r.end += 1,
            _ => runs.push(i..i + 1),
        }
    }
    runs
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Cycles the blocks `{gamma, beta_0, ..., beta_q}` until a full cycle moves no
/// standardized coefficient by more than `tol * max(1, max |coef|)`. Between
/// full cycles only the currently nonzero coordinates and groups are revisited.
pub fn solve(
    p: &SglProblem,
    opts: &SolverOptions,
    warm_start: Option<&SglSolution>,
) -> Result<SglSolution> {
    opts.validate()?;
    let mut state = match warm_start {
        Some(sol) => SolverState::from_solution(p, sol)?,
        None => SolverState::zeros(p),
    };
    solve_from(p, opts, &mut state)
}

/// Runs the outer loop from an explicit state.
pub fn solve_from(
    p: &SglProblem,
    opts: &SolverOptions,
    state: &mut SolverState,
) -> Result<SglSolution> {
    let mut history = vec![state.objective(p)];
    let mut outer = 0usize;
    let mut converged = false;
    let gamma_coords: Vec<usize> = (0..p.gamma_width).collect();
    let block0: Vec<usize> = p.block_range(0).collect();

    let check = |obj: f64, outer: usize| -> Result<()> {
        if obj.is_finite() {
            Ok(())
        } else {
            Err(Error::SolverDiverged { iters: outer })
        }
    };

    let pure_lasso = p.penalty.lambda_g == 0.0;
    let beta_coords: Vec<usize> = (p.gamma_width..p.dim()).collect();

    'outer: while outer < opts.max_outer_iters {
        state.focus = None;
        state.refresh(p);
        let mut change = lasso_pass(p, &gamma_coords, state);
        if pure_lasso {
            change = change.max(lasso_pass(p, &beta_coords, state));
        } else {
            change = change.max(lasso_pass(p, &block0, state));
            for h in 1..p.n_blocks {
                change = change.max(block_update_beta(p, h, opts, state));
            }
        }
        outer += 1;
        let obj = state.objective(p);
        check(obj, outer)?;
        history.push(obj);
        if change < opts.tol * max_abs(&state.coef).max(1.0) {
            converged = true;
            break;
        }

        loop {
            if outer >= opts.max_outer_iters {
                break 'outer;
            }
            let nonzero = |coords: &[usize]| -> Vec<usize> {
                coords.iter().copied().filter(|&c| state.coef[c] != 0.0).collect()
            };
            let active_gamma = nonzero(&gamma_coords);
            let (active_beta, active_groups) = if pure_lasso {
                (nonzero(&beta_coords), Vec::new())
            } else {
                let groups: Vec<usize> = (1..p.n_blocks)
                    .filter(|&h| state.coef[p.block_range(h)].iter().any(|b| *b != 0.0))
                    .collect();
                (nonzero(&block0), groups)
            };
            let mut focus: Vec<usize> = active_gamma.iter().chain(&active_beta).copied().collect();
            for &h in &active_groups {
                focus.extend(p.block_range(h));
            }
            // gradients outside the active set go stale until the next full cycle
            state.focus = Some(contiguous_runs(&focus));
            let mut change = lasso_pass(p, &active_gamma, state);
            change = change.max(lasso_pass(p, &active_beta, state));
            for &h in &active_groups {
                change = change.max(block_update_beta(p, h, opts, state));
            }
                outer += 1;
            let obj = state.objective(p);
            check(obj, outer)?;
            history.push(obj);
            if change < opts.tol * max_abs(&state.coef).max(1.0) {
                break;
            }
        }
    }

    state.focus = None;
    state.refresh(p);
    let objective = state.objective(p);
    check(objective, outer)?;
    let (gamma, beta_blocks) = state.coefficients(p);
    Ok(SglSolution {
        gamma,
        beta_blocks,
        objective,
        outer_iters: outer,
        converged,
        history,
    })
}

/// Largest violation of the first-order optimality conditions, measured on
/// the standardized coordinates from a freshly computed residual.
pub fn kkt_residual(p: &SglProblem, sol: &SglSolution) -> f64 {
    kkt_residual_at(p, &sol.flat())
}

pub fn kkt_residual_at(p: &SglProblem, flat: &[f64]) -> f64 {
    let n = p.n() as f64;
    let r = p.residual(flat);
    let PenaltyConfig { lambda, lambda_g } = p.penalty;
    let s = &p.column_scales;
    let grad = |c: usize| p.design.column(c).dot(&r) / (n * s[c]);
    let mut worst: f64 = 0.0;

    let lasso_violation = |c: usize| {
        let g = grad(c);
        let b = flat[c];
        if b != 0.0 {
            (g - lambda * b.signum()).abs()
        } else {
            (g.abs() - lambda).max(0.0)
        }
    };

    for c in 0..p.gamma_width {
        if s[c] > 0.0 {
            worst = worst.max(lasso_violation(c));
        }
    }
    for c in p.block_range(0) {
        if s[c] > 0.0 {
            worst = worst.max(lasso_violation(c));
        }
    }
    for h in 1..p.n_blocks {
        let range = p.block_range(h);
        let coords: Vec<usize> = range.filter(|&c| s[c] > 0.0).collect();
        let std_coef: Vec<f64> = coords.iter().map(|&c| flat[c] * s[c]).collect();
        let norm = l2(&std_coef);
        if norm == 0.0 {
            let st: Vec<f64> = coords
                .iter()
                .map(|&c| soft_threshold(grad(c), lambda))
                .collect();
            worst = worst.max((l2(&st) - lambda_g).max(0.0));
        } else {
            for (i, &c) in coords.iter().enumerate() {
                let g = grad(c);
                let b = std_coef[i];
                let v = if b != 0.0 {
                    (g - lambda * b.signum() - lambda_g * b / norm).abs()
                } else {
                    (g.abs() - lambda).max(0.0)
                };
                worst = worst.max(v);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_problem(seed: u64, n: usize, gw: usize, bw: usize, nb: usize, pen: PenaltyConfig) -> SglProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, n, gw);
        let blocks: Vec<_> = (0..nb).map(|_| random_matrix(&mut rng, n, bw)).collect();
        let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        SglProblem::new(y, &a, &blocks, pen).unwrap()
    }

    /// Plain proximal gradient on the explicitly standardized design,
    /// mapped back to the original scale.
    fn prox_gradient_reference(p: &SglProblem, iters: usize) -> Vec<f64> {
        let n = p.n() as f64;
        let s = p.column_scales();
        let d = p.dim();
        let mut a = p.design().clone();
        for c in 0..d {
            if s[c] == 0.0 {
                a.column_mut(c).fill(0.0);
            } else {
                a.column_mut(c).scale_mut(1.0 / s[c]);
            }
        }
        let ata = a.transpose() * &a / n;
        let aty = a.transpose() * p.y() / n;
        let lip = SymmetricEigen::new(ata.clone())
            .eigenvalues
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        let step = 1.0 / lip;
        let pen = p.penalty();
        let mut x = DVector::zeros(d);
        for _ in 0..iters {
            let g = &ata * &x - &aty;
            let mut v = &x - g * step;
            for c in 0..d {
                v[c] = soft_threshold(v[c], pen.lambda * step);
            }
            for h in 1..p.n_blocks() {
                let r = p.block_range(h);
                let norm: f64 = r.clone().map(|c| v[c] * v[c]).sum::<f64>().sqrt();
                let shrink = if norm > 0.0 { (1.0 - pen.lambda_g * step / norm).max(0.0) } else { 0.0 };
                for c in r {
                    v[c] *= shrink;
                }
            }
            x = v;
        }
        x.iter().zip(s).map(|(b, s)| if *s == 0.0 { 0.0 } else { b / s }).collect()
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }

    #[test]
    fn objective_at_zero_is_half_mean_square() {
        let p = random_problem(1, 12, 2, 3, 3, PenaltyConfig::new(0.3, 0.2).unwrap());
        let zero_blocks = vec![vec![0.0; 3]; 3];
        let v = objective(&p, &[0.0, 0.0], &zero_blocks).unwrap();
        assert!((v - p.y().norm_squared() / 24.0).abs() < 1e-15);
    }

    #[test]
    fn objective_exact_fit_penalty_only() {
        let y = DVector::from_element(4, 1.0);
        let a = DMatrix::from_element(4, 1, 1.0);
        let b0 = DMatrix::from_fn(4, 1, |i, _| [1.0, -1.0, 1.0, -1.0][i]);
        let p = SglProblem::new(y, &a, &[b0], PenaltyConfig::new(0.5, 0.0).unwrap()).unwrap();
        assert_eq!(objective(&p, &[1.0], &[vec![0.0]]).unwrap(), 0.5);
    }

    #[test]
    fn objective_at_least_squares_solution() {
        // normal-equations oracle
        let p = random_problem(5, 10, 1, 1, 3, PenaltyConfig::new(0.0, 0.0).unwrap());
        let a = p.design();
        let beta = (a.transpose() * a).cholesky().unwrap().solve(&(a.transpose() * p.y()));
        let rss = (p.y() - a * &beta).norm_squared() / 20.0;
        let (g, b) = p.split(beta.as_slice());
        let v = objective(&p, &g, &b).unwrap();
        assert!((v - rss).abs() <= 1e-10 * rss.max(1e-300));
    }

    #[test]
    fn objective_rejects_wrong_shapes() {
        let p = random_problem(1, 8, 2, 3, 2, PenaltyConfig::new(0.1, 0.1).unwrap());
        assert!(objective(&p, &[0.0], &[vec![0.0; 3], vec![0.0; 3]]).is_err());
    }

    #[test]
    fn gamma_single_orthonormal_coordinate() {
        let n = 4;
        let a = DMatrix::from_column_slice(n, 1, &[1.0, -1.0, 1.0, -1.0]);
        let y = DVector::from_column_slice(&[2.0, -1.0, 0.5, 0.0]);
        let b0 = DMatrix::zeros(n, 1);
        let lambda = 0.2;
        let p = SglProblem::new(y.clone(), &a, &[b0], PenaltyConfig::new(lambda, 0.0).unwrap())
            .unwrap()
            .with_unit_scales();
        let old = 0.3;
        let mut state = SolverState::at(&p, &[old], &[vec![0.0]]).unwrap();
        let r = &y - a.column(0) * old;
        let c = a.column(0).dot(&r) / n as f64;
        block_update_gamma(&p, &SolverOptions::default(), &mut state);
        let (g, _) = state.coefficients(&p);
        assert!((g[0] - soft_threshold(c + old, lambda)).abs() < 1e-14);
    }

    #[test]
    fn gamma_stays_zero_above_lambda_max() {
        let mut p = random_problem(2, 20, 3, 2, 2, PenaltyConfig::new(0.0, 0.0).unwrap());
        let lmax = max_abs(&p.standardized_correlations()[..3]);
        p.set_penalty(PenaltyConfig::new(lmax * 1.0001, 0.0).unwrap());
        let mut state = SolverState::zeros(&p);
        block_update_gamma(&p, &SolverOptions::default(), &mut state);
        assert!(state.coefficients(&p).0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gamma_block_matches_prox_gradient() {
        // only gamma free: tiny block 0 column of zeros
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 20, 3);
        let y = DVector::from_fn(20, |_, _| rng.random_range(-1.0..1.0));
        let p = SglProblem::new(y, &a, &[DMatrix::zeros(20, 1)], PenaltyConfig::new(0.1, 0.0).unwrap())
            .unwrap();
        let mut state = SolverState::zeros(&p);
        let opts = SolverOptions { inner_tol: 1e-14, ..Default::default() };
        block_update_gamma(&p, &opts, &mut state);
        let (g, b) = state.coefficients(&p);
        let ours = objective(&p, &g, &b).unwrap();
        let reference = prox_gradient_reference(&p, 50_000);
        let (rg, rb) = p.split(&reference);
        let theirs = objective(&p, &rg, &rb).unwrap();
        assert!((ours - theirs).abs() < 1e-8, "{ours} vs {theirs}");
    }

    #[test]
    fn group_zeroed_by_huge_lambda_g() {
        let mut p = random_problem(3, 30, 1, 5, 2, PenaltyConfig::new(0.0, 0.0).unwrap());
        let r: f64 = l2(&p.standardized_correlations()[6..11]);
        p.set_penalty(PenaltyConfig::new(0.05, r * (5f64).sqrt()).unwrap());
        let mut state = SolverState::zeros(&p);
        block_update_beta(&p, 1, &SolverOptions::default(), &mut state);
        assert!(state.coefficients(&p).1[1].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn group_without_group_penalty_is_lasso_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blk = random_matrix(&mut rng, 30, 5);
        let y = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
        let zero = DMatrix::zeros(30, 5);
        let pen = PenaltyConfig::new(0.05, 0.0).unwrap();
        // same data as block 0 and as block 1
        let p0 = SglProblem::new(y.clone(), &DMatrix::zeros(30, 0), &[blk.clone(), zero.clone()], pen).unwrap();
        let p1 = SglProblem::new(y, &DMatrix::zeros(30, 0), &[zero, blk], pen).unwrap();
        let opts = SolverOptions { inner_tol: 1e-13, inner_max_iters: 100_000, ..Default::default() };
        let mut s0 = SolverState::zeros(&p0);
        let mut s1 = SolverState::zeros(&p1);
        block_update_beta(&p0, 0, &opts, &mut s0);
        block_update_beta(&p1, 1, &opts, &mut s1);
        let b0 = &s0.coefficients(&p0).1[0];
        let b1 = &s1.coefficients(&p1).1[1];
        for (a, b) in b0.iter().zip(b1) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn group_block_matches_long_prox_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let blk = random_matrix(&mut rng, 30, 5);
        let y = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
        let pen = PenaltyConfig::new(0.05, 0.1).unwrap();
        let p = SglProblem::new(y, &DMatrix::zeros(30, 0), &[DMatrix::zeros(30, 5), blk], pen).unwrap();
        let opts = SolverOptions { inner_tol: 1e-14, inner_max_iters: 100_000, ..Default::default() };
        let mut s = SolverState::zeros(&p);
        block_update_beta(&p, 1, &opts, &mut s);
        let ours = s.coefficients(&p).1[1].clone();
        let reference = prox_gradient_reference(&p, 100_000);
        let (_, rb) = p.split(&reference);
        for (a, b) in ours.iter().zip(&rb[1]) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn warm_start_at_optimum_is_fixed_point() {
        let p = random_problem(9, 40, 2, 3, 3, PenaltyConfig::new(0.05, 0.05).unwrap());
        let opts = SolverOptions { tol: 1e-10, ..Default::default() };
        let sol = solve(&p, &opts, None).unwrap();
        let again = solve(&p, &SolverOptions::default(), Some(&sol)).unwrap();
        assert!(again.converged);
        assert_eq!(again.outer_iters, 1);
        for (a, b) in sol.flat().iter().zip(again.flat()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn small_problem_matches_reference() {
        let p = random_problem(21, 50, 3, 3, 2, PenaltyConfig::new(0.1, 0.05).unwrap());
        let opts = SolverOptions { tol: 1e-10, ..Default::default() };
        let sol = solve(&p, &opts, None).unwrap();
        let reference = prox_gradient_reference(&p, 200_000);
        let (rg, rb) = p.split(&reference);
        let theirs = objective(&p, &rg, &rb).unwrap();
        assert!((sol.objective - theirs).abs() < 1e-8);
        assert!(kkt_residual(&p, &sol) < 1e-7);
    }

    #[test]
    fn reported_objective_matches_direct_evaluation() {
        let p = random_problem(22, 35, 2, 4, 3, PenaltyConfig::new(0.02, 0.04).unwrap());
        let sol = solve(&p, &SolverOptions::default(), None).unwrap();
        let direct = objective(&p, &sol.gamma, &sol.beta_blocks).unwrap();
        assert!((sol.objective - direct).abs() <= 1e-10 * direct.abs());
    }

    #[test]
    fn history_is_monotone() {
        for seed in 0..20 {
            let p = random_problem(100 + seed, 25, 2, 4, 4, PenaltyConfig::new(0.03, 0.03).unwrap());
            let sol = solve(&p, &SolverOptions::default(), None).unwrap();
            for w in sol.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "seed {seed}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn kkt_closed_form_lasso() {
        // one coordinate: b = S(a'y/n, lambda) / (a'a/n)
        let y = DVector::from_column_slice(&[1.0, 2.0, -0.5]);
        let a = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 1.0]);
        let p = SglProblem::new(y, &a, &[DMatrix::zeros(3, 1)], PenaltyConfig::new(0.1, 0.0).unwrap())
            .unwrap()
            .with_unit_scales();
        let b = soft_threshold(2.5 / 3.0, 0.1);
        let r = kkt_residual_at(&p, &[b, 0.0]);
        assert!(r <= 1e-10);
    }

    #[test]
    fn kkt_zero_above_lambda_max() {
        let mut p = random_problem(3, 20, 2, 2, 2, PenaltyConfig::new(0.0, 0.0).unwrap());
        let lmax = max_abs(&p.standardized_correlations());
        p.set_penalty(PenaltyConfig::new(lmax * 1.01, 0.0).unwrap());
        assert_eq!(kkt_residual_at(&p, &vec![0.0; p.dim()]), 0.0);
    }

    #[test]
    fn zero_columns_are_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut blk = random_matrix(&mut rng, 20, 3);
        blk.column_mut(1).fill(0.0);
        let y = DVector::from_fn(20, |_, _| rng.random_range(-1.0..1.0));
        let p = SglProblem::new(y, &random_matrix(&mut rng, 20, 1), &[blk.clone(), blk], PenaltyConfig::new(0.01, 0.01).unwrap()).unwrap();
        assert_eq!(p.dropped_columns(), 2);
        let sol = solve(&p, &SolverOptions::default(), None).unwrap();
        assert_eq!(sol.beta_blocks[0][1], 0.0);
        assert_eq!(sol.beta_blocks[1][1], 0.0);
        assert!(kkt_residual(&p, &sol) < 1e-4);
    }
}
