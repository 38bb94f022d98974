#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Shape of a sparse-group problem: `[gamma | beta_0 | beta_1 ... ]`, where
/// only blocks `1..n_blocks` carry the group penalty.
#[derive(Debug, Clone)]
pub struct Layout {
    pub gamma_width: usize,
    pub block_width: usize,
    pub n_blocks: usize,
}

impl Layout {
    pub fn dim(&self) -> usize {
        self.gamma_width + self.block_width * self.n_blocks
    }
    pub fn groups(&self) -> Vec<std::ops::Range<usize>> {
        (1..self.n_blocks)
            .map(|h| {
                let s = self.gamma_width + h * self.block_width;
                s..s + self.block_width
            })
            .collect()
    }
}

pub fn rms(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows() as f64;
    a.column_iter().map(|c| (c.norm_squared() / n).sqrt()).collect()
}

/// Objective with penalties applied to `scale * b`.
pub fn sgl_objective(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    layout: &Layout,
    scales: &[f64],
    lambda: f64,
    lambda_g: f64,
    b: &[f64],
) -> f64 {
    let n = a.nrows() as f64;
    let r = y - a * DVector::from_column_slice(b);
    let sb: Vec<f64> = b.iter().zip(scales).map(|(b, s)| b * s).collect();
    let l1: f64 = sb.iter().map(|v| v.abs()).sum();
    let grp: f64 = layout
        .groups()
        .into_iter()
        .map(|g| sb[g].iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum();
    r.norm_squared() / (2.0 * n) + lambda * l1 + lambda_g * grp
}

/// Plain accelerated proximal gradient with adaptive restart, run for a fixed
/// number of iterations on the standardized problem. Returns original-scale
/// coefficients.
pub fn fista_oracle(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    layout: &Layout,
    lambda: f64,
    lambda_g: f64,
    iters: usize,
) -> Vec<f64> {
    let n = a.nrows() as f64;
    let scales = rms(a);
    let mut z = a.clone();
    for (c, mut col) in z.column_iter_mut().enumerate() {
        col /= scales[c];
    }
    let step = {
        let g = z.transpose() * &z / n;
        1.0 / g.symmetric_eigenvalues().max()
    };
    let prox = |v: &mut DVector<f64>| {
        for x in v.iter_mut() {
            *x = x.signum() * (x.abs() - step * lambda).max(0.0);
        }
        for g in layout.groups() {
            let norm = v.rows(g.start, g.len()).norm();
            let shrink = if norm > 0.0 { (1.0 - step * lambda_g / norm).max(0.0) } else { 0.0 };
            v.rows_mut(g.start, g.len()).scale_mut(shrink);
        }
    };
    let grad = |b: &DVector<f64>| -(z.transpose() * (y - &z * b)) / n;
    let obj = |b: &DVector<f64>| {
        let r = y - &z * b;
        let l1: f64 = b.iter().map(|v| v.abs()).sum();
        let grp: f64 = layout.groups().into_iter().map(|g| b.rows(g.start, g.len()).norm()).sum();
        r.norm_squared() / (2.0 * n) + lambda * l1 + lambda_g * grp
    };
    let d = layout.dim();
    let mut x = DVector::zeros(d);
    let mut w = x.clone();
    let mut t = 1.0f64;
    let mut f_prev = obj(&x);
    for _ in 0..iters {
        let mut next = &w - grad(&w) * step;
        prox(&mut next);
        let f = obj(&next);
        if f > f_prev {
            // restart momentum
            t = 1.0;
            w = x.clone();
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        w = &next + (&next - &x) * ((t - 1.0) / t_next);
        x = next;
        t = t_next;
        f_prev = f;
    }
    x.iter().zip(&scales).map(|(v, s)| v / s).collect()
}

/// Random dense problem with some signal in the response.
pub fn random_problem(
    seed: u64,
) -> (DMatrix<f64>, DVector<f64>, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(10..=60);
    let layout = loop {
        let l = Layout {
            gamma_width: rng.random_range(1..=6),
            block_width: rng.random_range(1..=6),
            n_blocks: rng.random_range(2..=6),
        };
        if l.dim() <= 40 {
            break l;
        }
    };
    let a = DMatrix::from_fn(n, layout.dim(), |_, _| rng.random_range(-1.0..1.0) * rng.random_range(0.5..2.0));
    let truth = DVector::from_fn(layout.dim(), |_, _| {
        if rng.random_bool(0.2) { rng.random_range(-2.0..2.0) } else { 0.0 }
    });
    let noise = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let y = &a * truth + noise;
    (a, y, layout)
}

/// `max_c |A_c^T y| / (n * scale_c)`, a bound on useful penalty levels.
pub fn max_corr(a: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let n = a.nrows() as f64;
    let s = rms(a);
    a.column_iter()
        .zip(&s)
        .map(|(c, s)| (c.dot(y) / (n * s)).abs())
        .fold(0.0, f64::max)
}
