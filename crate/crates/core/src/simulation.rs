//! Synthetic covariate-dependent Gaussian graphical models.
//!
//! The population graph grows by preferential attachment, a few covariates
//! get sparse Erdős–Rényi graphs, and each subject's precision matrix is
//! `Omega_i = B_0 + sum_h B_h u_ih` with unit diagonal. Means follow either
//! the natural model `mu_i = Sigma_i Gamma u_i` or the original model
//! `mu_i = Gamma u_i`.
//!
//! Every random component draws from its own ChaCha stream of the master
//! seed, and subject `i` draws its noise from stream `SUBJECT_STREAM + i`, so
//! output does not depend on generation order.

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{standardize_covariates, CovariateKind, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataModel {
    Natural,
    Original,
}

impl std::str::FromStr for DataModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "natural" => Ok(DataModel::Natural),
            "original" => Ok(DataModel::Original),
            other => Err(Error::InvalidConfig(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Covariates with a nonempty graph.
    pub q_e: usize,
    /// Erdős–Rényi edge probability for active covariates.
    pub edge_prob: f64,
    pub gamma_density: f64,
    pub entry_range: (f64, f64),
    pub row_divisor_factor: f64,
    pub pa_power: f64,
    pub pa_edges_per_node: usize,
    pub model: DataModel,
    /// Target of `mean_i ||mu_i||^2 / p`; `None` keeps raw Gamma entries.
    pub snr: Option<f64>,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n: 200,
            p: 25,
            q: 50,
            q_e: 5,
            edge_prob: 0.01,
            gamma_density: 0.3,
            entry_range: (0.35, 0.5),
            row_divisor_factor: 1.5,
            pa_power: 1.0,
            pa_edges_per_node: 1,
            model: DataModel::Natural,
            snr: Some(1.0),
            seed: 1,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.p < 2 || self.q < 1 {
            return bad("need p >= 2 and q >= 1");
        }
        if self.q_e > self.q {
            return bad("q_e cannot exceed q");
        }
        if !(0.0..=1.0).contains(&self.edge_prob) || !(0.0..=1.0).contains(&self.gamma_density) {
            return bad("probabilities must be in [0, 1]");
        }
        let (lo, hi) = self.entry_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad("entry_range must satisfy 0 < lo <= hi");
        }
        if !(self.row_divisor_factor > 0.0) {
            return bad("row_divisor_factor must be positive");
        }
        if matches!(self.snr, Some(s) if !(s > 0.0)) {
            return bad("snr must be positive");
        }
        Ok(())
    }
}

const STREAM_POPULATION: u64 = 1;
const STREAM_COVARIATE_GRAPHS: u64 = 2;
const STREAM_ENTRIES: u64 = 3;
const STREAM_GAMMA: u64 = 4;
const STREAM_COVARIATES: u64 = 5;
const SUBJECT_STREAM: u64 = 1 << 20;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Undirected edge set on `p` nodes, stored as sorted pairs `j < k`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Support {
    pub p: usize,
    pub edges: Vec<(usize, usize)>,
}

impl Support {
    fn new(p: usize, mut edges: Vec<(usize, usize)>) -> Self {
        for e in edges.iter_mut() {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Support { p, edges }
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.p];
        for &(j, k) in &self.edges {
            d[j] += 1;
            d[k] += 1;
        }
        d
    }
}

/// Sparse Gamma with standard normal entries, before any SNR scaling.
pub fn generate_gamma(cfg: &SimulationConfig, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    let draw = |rng: &mut dyn rand::RngCore| {
        DMatrix::from_fn(cfg.p, cfg.q, |_, _| {
            if rng.random_bool(cfg.gamma_density) {
                rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        })
    };
    let gamma = draw(rng);
    if cfg.gamma_density == 0.0 || gamma.iter().any(|v| *v != 0.0) {
        return Ok(gamma);
    }
    let again = draw(rng);
    if again.iter().all(|v| *v == 0.0) {
        return Err(Error::AllZeroGamma);
    }
    Ok(again)
}

/// Preferential attachment growth from a single node: every new node links
/// to `m` distinct existing nodes chosen with weight `(degree + 1)^power`.
pub fn generate_population_graph(cfg: &SimulationConfig, rng: &mut impl Rng) -> Support {
    let p = cfg.p;
    let mut degree = vec![0usize; p];
    let mut edges = Vec::new();
    for v in 1..p {
        let m = cfg.pa_edges_per_node.min(v);
        let mut chosen: Vec<usize> = Vec::with_capacity(m);
        for _ in 0..m {
            let weights: Vec<f64> = (0..v)
                .map(|k| {
                    if chosen.contains(&k) {
                        0.0
                    } else {
                        ((degree[k] + 1) as f64).powf(cfg.pa_power)
                    }
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut target = rng.random::<f64>() * total;
            let mut pick = v - 1;
            for (k, w) in weights.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                if target < *w {
                    pick = k;
                    break;
                }
                target -= w;
            }
            if chosen.contains(&pick) {
                // rounding fell through to an already chosen node
                pick = (0..v).rev().find(|k| !chosen.contains(k)).expect("m <= v");
            }
            chosen.push(pick);
        }
        for &k in &chosen {
            degree[k] += 1;
            degree[v] += 1;
            edges.push((k, v));
        }
    }
    Support::new(p, edges)
}

/// Picks `q_e` active covariates uniformly and gives each an Erdős–Rényi
/// graph; the other covariates get empty graphs.
pub fn generate_covariate_graphs(cfg: &SimulationConfig, rng: &mut impl Rng) -> Vec<Support> {
    let p = cfg.p;
    let mut active: Vec<usize> = sample_indices(rng, cfg.q, cfg.q_e).into_vec();
    active.sort_unstable();
    let mut graphs = vec![Support::new(p, Vec::new()); cfg.q];
    for h in active {
        let mut edges = Vec::new();
        for j in 0..p {
            for k in (j + 1)..p {
                if rng.random_bool(cfg.edge_prob) {
                    edges.push((j, k));
                }
            }
        }
        graphs[h] = Support::new(p, edges);
    }
    graphs
}

/// Draws entries of magnitude in `entry_range` with random sign, one per
/// undirected edge, scales row j of the stacked components by
/// `1 / (row_divisor_factor * sum_h sum_k |b_jkh|)` and symmetrizes by
/// averaging. `B_0` gets a unit diagonal, the rest zero diagonals.
pub fn fill_components(
    cfg: &SimulationConfig,
    population: &Support,
    covariate_graphs: &[Support],
    rng: &mut impl Rng,
) -> Vec<DMatrix<f64>> {
    let p = cfg.p;
    let (lo, hi) = cfg.entry_range;
    let supports = std::iter::once(population).chain(covariate_graphs.iter());
    let mut raw: Vec<DMatrix<f64>> = supports
        .map(|s| {
            let mut m = DMatrix::zeros(p, p);
            for &(j, k) in &s.edges {
                let mag = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                let v = if rng.random_bool(0.5) { mag } else { -mag };
                m[(j, k)] = v;
                m[(k, j)] = v;
            }
            m
        })
        .collect();
    let row_sums: Vec<f64> = (0..p)
        .map(|j| raw.iter().map(|m| m.row(j).iter().map(|v| v.abs()).sum::<f64>()).sum())
        .collect();
    for m in raw.iter_mut() {
        for j in 0..p {
            if row_sums[j] > 0.0 {
                let scale = 1.0 / (row_sums[j] * cfg.row_divisor_factor);
                m.row_mut(j).scale_mut(scale);
            }
        }
    }
    raw.into_iter()
        .enumerate()
        .map(|(h, m)| {
            let mut b = (&m + m.transpose()) * 0.5;
            let diag = if h == 0 { 1.0 } else { 0.0 };
            for j in 0..p {
                b[(j, j)] = diag;
            }
            b
        })
        .collect()
}

/// `B_0 + sum_h B_h u_h`.
pub fn precision_at(b: &[DMatrix<f64>], u: &[f64]) -> DMatrix<f64> {
    let mut omega = b[0].clone();
    for (h, &uh) in u.iter().enumerate() {
        if uh != 0.0 && b[h + 1].iter().any(|v| *v != 0.0) {
            omega += &b[h + 1] * uh;
        }
    }
    omega
}

pub const PD_MARGIN: f64 = 0.05;
pub const MAX_PD_REPAIRS: usize = 20;
const REPAIR_SHRINK: f64 = 0.9;

fn first_weak_subject(b: &[DMatrix<f64>], u: &DMatrix<f64>) -> Option<usize> {
    let p = b[0].nrows();
    (0..u.nrows()).find(|&i| {
        let ui: Vec<f64> = u.row(i).iter().copied().collect();
        let mut shifted = precision_at(b, &ui);
        for j in 0..p {
            shifted[(j, j)] -= PD_MARGIN;
        }
        shifted.cholesky().is_none()
    })
}

/// Shrinks the covariate components until every subject's precision matrix
/// has smallest eigenvalue above `PD_MARGIN`. Returns the number of shrinks.
pub fn stabilize(b: &mut [DMatrix<f64>], u: &DMatrix<f64>) -> Result<usize> {
    let mut repairs = 0;
    while let Some(i) = first_weak_subject(b, u) {
        if repairs == MAX_PD_REPAIRS {
            return Err(Error::NonPdOmega {
                subject: i,
                attempts: repairs,
            });
        }
        for m in b.iter_mut().skip(1) {
            m.scale_mut(REPAIR_SHRINK);
        }
        repairs += 1;
    }
    if repairs > 0 {
        debug!("covariate components shrunk {repairs} time(s) for positive definiteness");
    }
    Ok(repairs)
}

/// First `ceil(q/2)` columns Bernoulli(1/2), the rest uniform on (0, 1) and
/// then standardized.
pub fn generate_covariates(cfg: &SimulationConfig, rng: &mut impl Rng) -> Result<(DMatrix<f64>, Vec<CovariateKind>)> {
    let n_binary = cfg.q.div_ceil(2);
    let kinds: Vec<CovariateKind> = (0..cfg.q)
        .map(|h| {
            if h < n_binary {
                CovariateKind::Binary
            } else {
                CovariateKind::Continuous
            }
        })
        .collect();
    // column-major fill keeps each column's draws contiguous
    let mut u = DMatrix::zeros(cfg.n, cfg.q);
    for h in 0..cfg.q {
        for i in 0..cfg.n {
            u[(i, h)] = if h < n_binary {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            } else {
                rng.random::<f64>()
            };
        }
    }
    let raw = Dataset::new(DMatrix::zeros(cfg.n, 2), u, kinds.clone())?;
    let (standardized, _) = standardize_covariates(&raw)?;
    Ok((standardized.u().clone(), kinds))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTruth {
    pub gamma: DMatrix<f64>,
    pub b: Vec<DMatrix<f64>>,
    pub omega_per_subject: Vec<DMatrix<f64>>,
    pub mu_per_subject: Vec<DVector<f64>>,
    pub dataset: Dataset,
    pub pd_repairs: usize,
    pub active_covariates: Vec<usize>,
}

impl SimulationTruth {
    /// Realized `mean_i ||mu_i||^2 / p`.
    pub fn snr(&self) -> f64 {
        let p = self.gamma.nrows() as f64;
        self.mu_per_subject.iter().map(|m| m.norm_squared()).sum::<f64>()
            / (p * self.mu_per_subject.len() as f64)
    }
}

/// Parameters to hold fixed instead of drawing them from the config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub components: Option<Vec<DMatrix<f64>>>,
    pub gamma: Option<DMatrix<f64>>,
}

/// Draws `N(0, Omega^{-1})` from the Cholesky factor of `Omega`: with
/// `Omega = L L^T`, `L^{-T} z` has covariance `Omega^{-1}`.
pub fn sample_noise(omega: &Cholesky<f64, Dyn>, rng: &mut impl Rng) -> Option<DVector<f64>> {
    let p = omega.l_dirty().nrows();
    let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    omega.l().transpose().solve_upper_triangular(&z)
}

pub fn generate_components(cfg: &SimulationConfig) -> Vec<DMatrix<f64>> {
    let population = generate_population_graph(cfg, &mut stream(cfg.seed, STREAM_POPULATION));
    let graphs = generate_covariate_graphs(cfg, &mut stream(cfg.seed, STREAM_COVARIATE_GRAPHS));
    fill_components(cfg, &population, &graphs, &mut stream(cfg.seed, STREAM_ENTRIES))
}

/// Covariate components `B_1..B_q` with entries drawn from `entry_range`
/// times `scale` and no row normalization, so entry sizes do not depend on
/// how dense the graphs are.
pub fn fixed_scale_covariate_components(cfg: &SimulationConfig, scale: f64) -> Vec<DMatrix<f64>> {
    let graphs = generate_covariate_graphs(cfg, &mut stream(cfg.seed, STREAM_COVARIATE_GRAPHS));
    let mut rng = stream(cfg.seed, STREAM_ENTRIES);
    let (lo, hi) = cfg.entry_range;
    graphs
        .iter()
        .map(|g| {
            let mut m = DMatrix::zeros(cfg.p, cfg.p);
            for &(j, k) in &g.edges {
                let mag = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                let v = if rng.random_bool(0.5) { mag } else { -mag } * scale;
                m[(j, k)] = v;
                m[(k, j)] = v;
            }
            m
        })
        .collect()
}

pub fn generate_dataset(cfg: &SimulationConfig) -> Result<SimulationTruth> {
    generate_with(cfg, &Overrides::default())
}

pub fn generate_with(cfg: &SimulationConfig, overrides: &Overrides) -> Result<SimulationTruth> {
    cfg.validate()?;
    let (n, p, q) = (cfg.n, cfg.p, cfg.q);
    let (u, kinds) = generate_covariates(cfg, &mut stream(cfg.seed, STREAM_COVARIATES))?;

    let mut b = match &overrides.components {
        Some(b) => {
            if b.len() != q + 1 || b.iter().any(|m| m.shape() != (p, p)) {
                return Err(Error::DimensionMismatch("component override shape".into()));
            }
            b.clone()
        }
        None => generate_components(cfg),
    };
    let pd_repairs = stabilize(&mut b, &u)?;
    let active_covariates = (1..=q)
        .filter(|&h| b[h].iter().any(|v| *v != 0.0))
        .map(|h| h - 1)
        .collect();

    let mut omega_per_subject = Vec::with_capacity(n);
    let mut factors = Vec::with_capacity(n);
    for i in 0..n {
        let ui: Vec<f64> = u.row(i).iter().copied().collect();
        let omega = precision_at(&b, &ui);
        let chol = omega.clone().cholesky().ok_or(Error::NonPdOmega {
            subject: i,
            attempts: pd_repairs,
        })?;
        omega_per_subject.push(omega);
        factors.push(chol);
    }

    let raw_gamma = match &overrides.gamma {
        Some(g) => {
            if g.shape() != (p, q) {
                return Err(Error::DimensionMismatch("gamma override shape".into()));
            }
            g.clone()
        }
        None => generate_gamma(cfg, &mut stream(cfg.seed, STREAM_GAMMA))?,
    };
    let raw_mu: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let theta = &raw_gamma * u.row(i).transpose();
            match cfg.model {
                DataModel::Natural => factors[i].solve(&theta),
                DataModel::Original => theta,
            }
        })
        .collect();
    let mean_sq = raw_mu.iter().map(|m| m.norm_squared()).sum::<f64>() / (n * p) as f64;
    let scale = match cfg.snr {
        Some(target) if mean_sq > 0.0 && overrides.gamma.is_none() => (target / mean_sq).sqrt(),
        _ => 1.0,
    };
    let gamma = raw_gamma * scale;
    let mu_per_subject: Vec<DVector<f64>> = raw_mu.into_iter().map(|m| m * scale).collect();

    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let noise = sample_noise(&factors[i], &mut stream(cfg.seed, SUBJECT_STREAM + i as u64))
            .ok_or(Error::NonPdOmega { subject: i, attempts: pd_repairs })?;
        x.row_mut(i).copy_from(&(&mu_per_subject[i] + noise).transpose());
    }
    if pd_repairs > 0 {
        warn!("precision matrices needed {pd_repairs} repair step(s)");
    }
    let dataset = Dataset::new(x, u, kinds)?;
    Ok(SimulationTruth {
        gamma,
        b,
        omega_per_subject,
        mu_per_subject,
        dataset,
        pd_repairs,
        active_covariates,
    })
}
