//! File formats: CSV matrices with a header row, the model and truth JSON
//! bundles, and the CV, edge and fit-log tables.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CovariateKind, Dataset, GraphModel, NodewiseFit, SymmetrizationRule};
use crate::simulation::{precision_at, SimulationConfig, SimulationTruth};
use crate::tuning::NodeCv;

pub const MODEL_FORMAT: &str = "cspine-model";
pub const TRUTH_FORMAT: &str = "cspine-truth";
pub const FORMAT_VERSION: u32 = 1;

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let names: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != names.len() {
            return Err(Error::Schema(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                i + 1,
                rec.len(),
                names.len()
            )));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Schema(format!("{}: row {}, column {}: {field:?} is not a number", path.display(), i + 1, c + 1))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok((names.clone(), DMatrix::from_row_slice(rows, names.len(), &data)))
}

pub fn write_matrix_csv(path: &Path, names: &[String], m: &DMatrix<f64>) -> Result<()> {
    if names.len() != m.ncols() {
        return Err(Error::DimensionMismatch("header length differs from column count".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(names)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Loads X and U; covariate kinds come from the JSON sidecar when given and
/// are inferred from the values otherwise.
pub fn load_dataset(x_path: &Path, u_path: &Path, kinds_path: Option<&Path>) -> Result<Dataset> {
    let (x_names, x) = read_matrix_csv(x_path)?;
    let (u_names, u) = read_matrix_csv(u_path)?;
    let kinds: Vec<CovariateKind> = match kinds_path {
        Some(p) => read_json(p)?,
        None => Dataset::infer_kinds(&u),
    };
    if kinds.len() != u.ncols() {
        return Err(Error::Schema(format!("{} covariate kinds for {} columns", kinds.len(), u.ncols())));
    }
    Dataset::with_names(x, u, kinds, x_names, u_names)
}

pub fn save_dataset(dir: &Path, d: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_matrix_csv(&dir.join("X.csv"), d.x_names(), d.x())?;
    write_matrix_csv(&dir.join("U.csv"), d.u_names(), d.u())?;
    write_json(&dir.join("kinds.json"), &d.kinds())?;
    Ok(())
}

/// A symmetric matrix as its diagonal and upper-triangle nonzeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSymmetric {
    pub diag: Vec<f64>,
    /// `(j, k, value)` with `j < k`.
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseSymmetric {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let p = m.nrows();
        let mut entries = Vec::new();
        for j in 0..p {
            for k in (j + 1)..p {
                if m[(j, k)] != 0.0 {
                    entries.push((j, k, m[(j, k)]));
                }
            }
        }
        SparseSymmetric {
            diag: m.diagonal().iter().copied().collect(),
            entries,
        }
    }

    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        let p = self.diag.len();
        let mut m = DMatrix::from_diagonal(&DVector::from_column_slice(&self.diag));
        for &(j, k, v) in &self.entries {
            if j >= k || k >= p {
                return Err(Error::Schema(format!("bad triplet ({j}, {k})")));
            }
            m[(j, k)] = v;
            m[(k, j)] = v;
        }
        Ok(m)
    }
}

fn dense_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Schema("ragged matrix".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

/// On-disk form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub p: usize,
    pub q: usize,
    pub rule: SymmetrizationRule,
    pub x_names: Vec<String>,
    pub u_names: Vec<String>,
    pub sigma2: Vec<f64>,
    /// p rows of length q.
    pub gamma_hat: Vec<Vec<f64>>,
    pub components: Vec<SparseSymmetric>,
    pub fits: Vec<NodewiseFit>,
}

impl ModelFile {
    pub fn new(model: &GraphModel, fits: &[NodewiseFit], x_names: &[String], u_names: &[String]) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: FORMAT_VERSION,
            p: model.p(),
            q: model.q(),
            rule: model.rule,
            x_names: x_names.to_vec(),
            u_names: u_names.to_vec(),
            sigma2: model.sigma2.iter().copied().collect(),
            gamma_hat: dense_rows(&model.gamma_hat),
            components: model.b_tilde.iter().map(SparseSymmetric::from_dense).collect(),
            fits: fits.to_vec(),
        }
    }

    pub fn model(&self) -> Result<GraphModel> {
        if self.format != MODEL_FORMAT || self.version != FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported model format {} v{}", self.format, self.version)));
        }
        if self.sigma2.len() != self.p
            || self.gamma_hat.len() != self.p
            || self.components.len() != self.q + 1
            || self.components.iter().any(|c| c.diag.len() != self.p)
        {
            return Err(Error::Schema("model dimensions are inconsistent".into()));
        }
        Ok(GraphModel {
            gamma_hat: from_rows(&self.gamma_hat, self.q)?,
            b_tilde: self.components.iter().map(|c| c.to_dense()).collect::<Result<_>>()?,
            sigma2: DVector::from_vec(self.sigma2.clone()),
            rule: self.rule,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Ground truth of a simulated data set. Precision matrices are rebuilt from
/// the components and the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthBundle {
    pub format: String,
    pub version: u32,
    pub config: SimulationConfig,
    pub pd_repairs: usize,
    pub active_covariates: Vec<usize>,
    pub gamma: Vec<Vec<f64>>,
    pub components: Vec<SparseSymmetric>,
    /// n rows of length p.
    pub mu: Vec<Vec<f64>>,
}

impl TruthBundle {
    pub fn new(cfg: &SimulationConfig, t: &SimulationTruth) -> Self {
        TruthBundle {
            format: TRUTH_FORMAT.into(),
            version: FORMAT_VERSION,
            config: cfg.clone(),
            pd_repairs: t.pd_repairs,
            active_covariates: t.active_covariates.clone(),
            gamma: dense_rows(&t.gamma),
            components: t.b.iter().map(SparseSymmetric::from_dense).collect(),
            mu: t.mu_per_subject.iter().map(|m| m.iter().copied().collect()).collect(),
        }
    }

    /// Reattaches the truth to the data set it generated.
    pub fn truth(&self, dataset: Dataset) -> Result<SimulationTruth> {
        if self.format != TRUTH_FORMAT || self.version != FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported truth format {} v{}", self.format, self.version)));
        }
        let (p, q) = (dataset.p(), dataset.q());
        if self.gamma.len() != p || self.components.len() != q + 1 || self.mu.len() != dataset.n() {
            return Err(Error::Schema("truth bundle does not match the data set".into()));
        }
        let b: Vec<DMatrix<f64>> = self.components.iter().map(|c| c.to_dense()).collect::<Result<_>>()?;
        if b.iter().any(|m| m.nrows() != p) {
            return Err(Error::Schema("component size does not match the data set".into()));
        }
        let omega_per_subject = (0..dataset.n())
            .map(|i| {
                let ui: Vec<f64> = dataset.u().row(i).iter().copied().collect();
                precision_at(&b, &ui)
            })
            .collect();
        let mu_per_subject = self
            .mu
            .iter()
            .map(|r| {
                if r.len() != p {
                    return Err(Error::Schema("mean vector length".into()));
                }
                Ok(DVector::from_column_slice(r))
            })
            .collect::<Result<_>>()?;
        Ok(SimulationTruth {
            gamma: from_rows(&self.gamma, q)?,
            b,
            omega_per_subject,
            mu_per_subject,
            dataset,
            pd_repairs: self.pd_repairs,
            active_covariates: self.active_covariates.clone(),
        })
    }
}

pub fn write_cv_csv(path: &Path, cvs: &[NodeCv]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node", "alpha_s", "lambda0", "cv_error", "cv_se", "selected"])?;
    for cv in cvs {
        for (a, alpha) in cv.alphas.iter().enumerate() {
            for (l, (l0, err)) in cv.paths[a].iter().zip(&cv.cv_error[a]).enumerate() {
                w.write_record([
                    cv.node.to_string(),
                    fmt_f64(*alpha),
                    fmt_f64(*l0),
                    fmt_f64(*err),
                    fmt_f64(cv.cv_se[a][l]),
                    ((a, l) == cv.selected).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Edges with `|weight| > threshold`, one row per `(h, j, k)` with `j < k`.
pub fn write_edges_csv(path: &Path, model: &GraphModel, threshold: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["h", "j", "k", "weight"])?;
    for (h, edges) in crate::graph::edge_sets(model, threshold).iter().enumerate() {
        for &(j, k, v) in edges {
            w.write_record([h.to_string(), j.to_string(), k.to_string(), fmt_f64(v)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_fit_log(path: &Path, fits: &[NodewiseFit]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "node",
        "lambda",
        "lambda_g",
        "iterations",
        "converged",
        "kkt_residual",
        "sigma2",
        "nonzero_beta",
        "nonzero_gamma",
    ])?;
    for f in fits {
        w.write_record([
            f.node.to_string(),
            fmt_f64(f.penalty.lambda),
            fmt_f64(f.penalty.lambda_g),
            f.iterations.to_string(),
            f.converged.to_string(),
            fmt_f64(f.kkt_residual),
            fmt_f64(f.sigma2),
            f.nonzero_beta().to_string(),
            f.nonzero_gamma().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PenaltyConfig;

    fn model() -> (GraphModel, Vec<NodewiseFit>) {
        let mut b0 = DMatrix::identity(3, 3) * 1.25;
        b0[(0, 2)] = -0.1 / 3.0;
        b0[(2, 0)] = -0.1 / 3.0;
        let mut b1 = DMatrix::zeros(3, 3);
        b1[(1, 2)] = 1e-300;
        b1[(2, 1)] = 1e-300;
        let m = GraphModel {
            gamma_hat: DMatrix::from_row_slice(3, 1, &[0.1, 0.0, -2.0 / 7.0]),
            b_tilde: vec![b0, b1],
            sigma2: DVector::from_element(3, 0.8),
            rule: SymmetrizationRule::And,
        };
        let fits = (0..3)
            .map(|j| NodewiseFit {
                node: j,
                gamma: vec![0.1],
                beta_blocks: vec![vec![0.0, 1.0 / 3.0], vec![0.0, 0.0]],
                sigma2: 0.8,
                objective: 0.123456789,
                iterations: 7,
                kkt_residual: 1e-9,
                penalty: PenaltyConfig::from_mixture(0.3, 0.07).unwrap(),
                converged: true,
            })
            .collect();
        (m, fits)
    }

    #[test]
    fn model_file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (m, fits) = model();
        let names = |k: usize, s: &str| (1..=k).map(|i| format!("{s}{i}")).collect::<Vec<_>>();
        let file = ModelFile::new(&m, &fits, &names(3, "x"), &names(1, "u"));
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        file.save(&a).unwrap();
        let loaded = ModelFile::load(&a).unwrap();
        assert_eq!(loaded, file);
        assert_eq!(loaded.model().unwrap(), m);
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn matrix_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -1e-17, 3.0, 1.0 / 3.0, 2e20, -0.0]);
        let names = vec!["a".to_string(), "b".into(), "c".into()];
        write_matrix_csv(&path, &names, &m).unwrap();
        let (n2, m2) = read_matrix_csv(&path).unwrap();
        assert_eq!(n2, names);
        assert_eq!(m2, m);
    }

    #[test]
    fn bad_csv_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "a,b\n1,zz\n").unwrap();
        assert!(matches!(read_matrix_csv(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn sparse_symmetric_round_trip() {
        let (m, _) = model();
        for b in &m.b_tilde {
            let s = SparseSymmetric::from_dense(b);
            assert!(s.entries.iter().all(|(j, k, _)| j < k));
            assert_eq!(&s.to_dense().unwrap(), b);
        }
    }

    #[test]
    fn truth_bundle_round_trip() {
        let cfg = SimulationConfig { n: 20, p: 4, q: 2, q_e: 1, edge_prob: 0.5, seed: 3, ..Default::default() };
        let t = crate::simulation::generate_dataset(&cfg).unwrap();
        let bundle = TruthBundle::new(&cfg, &t);
        let back = bundle.truth(t.dataset.clone()).unwrap();
        assert_eq!(back, t);
    }
}
