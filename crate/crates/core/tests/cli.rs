use std::path::Path;
use std::process::{Command, Output};

use cspine::graph::assemble;
use cspine::io::{self, ModelFile, TruthBundle};
use cspine::metrics::{true_beta, true_gamma};
use cspine::model::{NodewiseFit, PenaltyConfig, SymmetrizationRule};
use cspine::pipeline::{fit_cspine, FitOptions};
use cspine::simulation::{generate_dataset, SimulationConfig};
use cspine::tuning::PenaltyGrid;
use tempfile::TempDir;

const SIM: [&str; 10] = ["--n", "80", "--p", "5", "--q", "3", "--q-e", "2", "--seed", "1"];

fn cspine(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cspine")).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--out", s(dir)];
    args.extend_from_slice(&SIM);
    args.extend_from_slice(extra);
    cspine(&args)
}

fn fit(dir: &Path, out: &Path, extra: &[&str]) -> Output {
    let (x, u, k) = (dir.join("X.csv"), dir.join("U.csv"), dir.join("kinds.json"));
    let mut args = vec!["fit", "--x", s(&x), "--u", s(&u), "--kinds", s(&k), "--out", s(out), "--n-lambda", "20"];
    args.extend_from_slice(extra);
    cspine(&args)
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn simulate_writes_declared_dimensions() {
    let dir = TempDir::new().unwrap();
    let out = cspine(&["simulate", "--out", s(dir.path()), "--n", "30", "--p", "6", "--q", "4", "--q-e", "2", "--model", "natural", "--seed", "1"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("seed 1") && stdout.contains("pd_repairs"));
    let (xn, x) = io::read_matrix_csv(&dir.path().join("X.csv")).unwrap();
    let (un, u) = io::read_matrix_csv(&dir.path().join("U.csv")).unwrap();
    assert_eq!((x.nrows(), x.ncols(), xn.len()), (30, 6, 6));
    assert_eq!((u.nrows(), u.ncols(), un.len()), (30, 4, 4));
    let bundle: TruthBundle = io::read_json(&dir.path().join("truth.json")).unwrap();
    assert_eq!(bundle.components.len(), 5);
}

#[test]
fn simulate_is_byte_identical_on_rerun() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    assert!(simulate(a.path(), &[]).status.success());
    assert!(simulate(b.path(), &[]).status.success());
    for f in ["X.csv", "U.csv", "kinds.json", "truth.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn no_active_covariates_gives_empty_graphs() {
    let dir = TempDir::new().unwrap();
    let out = cspine(&["simulate", "--out", s(dir.path()), "--n", "40", "--p", "5", "--q", "3", "--q-e", "0", "--seed", "2"]);
    assert!(out.status.success());
    let bundle: TruthBundle = io::read_json(&dir.path().join("truth.json")).unwrap();
    assert!(bundle.components[1..].iter().all(|c| c.entries.is_empty()));
    assert!(bundle.active_covariates.is_empty());
}

#[test]
fn config_file_with_flag_override() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sim.toml");
    std::fs::write(&cfg, "n = 25\np = 4\nq = 2\nq_e = 1\nseed = 5\n").unwrap();
    let out = cspine(&["simulate", "--config", s(&cfg), "--n", "40", "--out", s(dir.path())]);
    assert!(out.status.success());
    let (_, x) = io::read_matrix_csv(&dir.path().join("X.csv")).unwrap();
    assert_eq!((x.nrows(), x.ncols()), (40, 4));
}

#[test]
fn invalid_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = cspine(&["simulate", "--out", s(dir.path()), "--p", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cspine(&["fit", "--x", "missing.csv", "--u", "missing.csv", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_matches_library_and_passes_kkt_check() {
    let data = TempDir::new().unwrap();
    let out = TempDir::new().unwrap();
    assert!(simulate(data.path(), &[]).status.success());
    assert!(fit(data.path(), out.path(), &[]).status.success());
    for f in ["model.json", "cv.csv", "fit_log.csv", "edges.csv"] {
        assert!(out.path().join(f).exists(), "{f}");
    }

    let d = io::load_dataset(&data.path().join("X.csv"), &data.path().join("U.csv"), Some(&data.path().join("kinds.json"))).unwrap();
    let opts = FitOptions { grid: PenaltyGrid { n_lambda0: 20, ..Default::default() }, ..Default::default() };
    let r = fit_cspine(&d, &opts).unwrap();
    let lib = out.path().join("lib.json");
    ModelFile::new(&r.model, &r.fits, d.x_names(), d.u_names()).save(&lib).unwrap();
    assert_eq!(read(&lib), read(&out.path().join("model.json")));

    // load -> save round trip
    let again = out.path().join("again.json");
    ModelFile::load(&out.path().join("model.json")).unwrap().save(&again).unwrap();
    assert_eq!(read(&again), read(&lib));

    let (x, u, m) = (data.path().join("X.csv"), data.path().join("U.csv"), out.path().join("model.json"));
    let kkt = cspine(&["kkt-check", "--model", s(&m), "--x", s(&x), "--u", s(&u)]);
    assert!(kkt.status.success());
    let line = String::from_utf8_lossy(&kkt.stdout).to_string();
    let value: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(value <= 1e-4, "{line}");

    // an impossible threshold reports a violation with exit code 1
    let strict = cspine(&["kkt-check", "--model", s(&m), "--x", s(&x), "--u", s(&u), "--threshold", "0"]);
    if value > 0.0 {
        assert_eq!(strict.status.code(), Some(1));
    }
}

#[test]
fn fixed_penalty_skips_cross_validation() {
    let data = TempDir::new().unwrap();
    let out = TempDir::new().unwrap();
    assert!(simulate(data.path(), &[]).status.success());
    assert!(fit(data.path(), out.path(), &["--alpha", "0.5", "--lambda0", "0.1"]).status.success());
    let cv = std::fs::read_to_string(out.path().join("cv.csv")).unwrap();
    assert_eq!(cv.lines().count(), 1);
    let model = ModelFile::load(&out.path().join("model.json")).unwrap();
    let pen = PenaltyConfig::from_mixture(0.5, 0.1).unwrap();
    assert!(model.fits.iter().all(|f| f.penalty == pen));
    // --alpha alone is rejected by the parser
    assert_eq!(fit(data.path(), out.path(), &["--alpha", "0.5"]).status.code(), Some(2));
}

#[test]
fn or_rule_support_contains_and_rule_support() {
    let data = TempDir::new().unwrap();
    let (a, o) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    assert!(simulate(data.path(), &[]).status.success());
    assert!(fit(data.path(), a.path(), &["--rule", "and"]).status.success());
    assert!(fit(data.path(), o.path(), &["--rule", "or"]).status.success());
    let edges = |dir: &Path| -> Vec<(String, String, String)> {
        let mut r = csv::Reader::from_path(dir.join("edges.csv")).unwrap();
        r.records().map(|rec| {
            let rec = rec.unwrap();
            (rec[0].to_string(), rec[1].to_string(), rec[2].to_string())
        }).collect()
    };
    let (ea, eo) = (edges(a.path()), edges(o.path()));
    assert!(ea.iter().all(|e| eo.contains(e)));
    let (ma, mo) = (ModelFile::load(&a.path().join("model.json")).unwrap(), ModelFile::load(&o.path().join("model.json")).unwrap());
    assert_eq!(ma.fits, mo.fits);
}

#[test]
fn predict_reproduces_library_predictions() {
    let data = TempDir::new().unwrap();
    let out = TempDir::new().unwrap();
    assert!(simulate(data.path(), &[]).status.success());
    assert!(fit(data.path(), out.path(), &["--alpha", "0.5", "--lambda0", "0.05"]).status.success());
    let m = out.path().join("model.json");
    let u = data.path().join("U.csv");
    let res = cspine(&["predict", "--model", s(&m), "--u", s(&u), "--omega", "--out", s(out.path())]);
    assert!(res.status.success());
    let model = ModelFile::load(&m).unwrap().model().unwrap();
    let (_, umat) = io::read_matrix_csv(&u).unwrap();
    let (_, mu) = io::read_matrix_csv(&out.path().join("mu.csv")).unwrap();
    for i in 0..umat.nrows() {
        let ui: Vec<f64> = umat.row(i).iter().copied().collect();
        let pred = cspine::graph::predict_subject(&model, &ui).unwrap();
        for j in 0..model.p() {
            assert_eq!(mu[(i, j)], pred.mu[j]);
        }
    }
    assert!(out.path().join("omega.csv").exists());

    // a zero covariate row predicts a zero mean
    let zero = out.path().join("U0.csv");
    let names: Vec<String> = (0..umat.ncols()).map(|h| format!("u{h}")).collect();
    io::write_matrix_csv(&zero, &names, &nalgebra::DMatrix::zeros(1, umat.ncols())).unwrap();
    let dir0 = out.path().join("zero");
    assert!(cspine(&["predict", "--model", s(&m), "--u", s(&zero), "--out", s(&dir0)]).status.success());
    let (_, mu0) = io::read_matrix_csv(&dir0.join("mu.csv")).unwrap();
    assert!(mu0.iter().all(|v| *v == 0.0));

    let wrong = out.path().join("U_wrong.csv");
    io::write_matrix_csv(&wrong, &names[..1], &nalgebra::DMatrix::zeros(1, 1)).unwrap();
    assert_eq!(cspine(&["predict", "--model", s(&m), "--u", s(&wrong), "--out", s(&dir0)]).status.code(), Some(2));
}

#[test]
fn eval_of_the_truth_is_perfect() {
    let data = TempDir::new().unwrap();
    assert!(simulate(data.path(), &[]).status.success());
    let cfg = SimulationConfig { n: 80, p: 5, q: 3, q_e: 2, seed: 1, ..Default::default() };
    let truth = generate_dataset(&cfg).unwrap();
    let fits: Vec<NodewiseFit> = (0..cfg.p)
        .map(|j| NodewiseFit {
            node: j,
            gamma: true_gamma(&truth, j),
            beta_blocks: true_beta(&truth.b, j),
            sigma2: 1.0 / truth.b[0][(j, j)],
            objective: 0.0,
            iterations: 0,
            kkt_residual: 0.0,
            penalty: PenaltyConfig::new(0.0, 0.0).unwrap(),
            converged: true,
        })
        .collect();
    let model = assemble(&fits, SymmetrizationRule::And).unwrap();
    let m = data.path().join("truth_model.json");
    ModelFile::new(&model, &fits, truth.dataset.x_names(), truth.dataset.u_names()).save(&m).unwrap();
    let (x, u, t, k) = (data.path().join("X.csv"), data.path().join("U.csv"), data.path().join("truth.json"), data.path().join("kinds.json"));
    let e = data.path().join("eval.csv");
    let out = cspine(&["eval", "--model", s(&m), "--truth", s(&t), "--x", s(&x), "--u", s(&u), "--kinds", s(&k), "--out", s(&e)]);
    assert!(out.status.success());
    let mut r = csv::Reader::from_path(&e).unwrap();
    let header = r.headers().unwrap().clone();
    let row = r.records().next().unwrap().unwrap();
    for (name, v) in header.iter().zip(row.iter()) {
        let v: f64 = v.parse().unwrap();
        match name {
            "tpr" | "tpr_pop" | "tpr_cov" | "omega_tpr" => assert_eq!(v, 1.0, "{name}"),
            _ => assert!(v.abs() < 1e-9, "{name} = {v}"),
        }
    }
}

#[test]
fn path_reports_one_row_per_lambda() {
    let data = TempDir::new().unwrap();
    assert!(simulate(data.path(), &[]).status.success());
    let (x, u, p) = (data.path().join("X.csv"), data.path().join("U.csv"), data.path().join("path.csv"));
    assert!(cspine(&["path", "--x", s(&x), "--u", s(&u), "--node", "2", "--alpha", "0.5", "--n-lambda", "15", "--out", s(&p)]).status.success());
    let mut r = csv::Reader::from_path(&p).unwrap();
    let rows: Vec<_> = r.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 15);
    assert_eq!(&rows[0][3], "0");
    assert!(rows.iter().all(|r| r[5].parse::<f64>().unwrap() <= 1e-4));
}

#[test]
fn replicate_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let run = |dir: &Path| {
        cspine(&["replicate", "--reps", "2", "--seed", "9", "--n", "60", "--p", "4", "--q", "2", "--q-e", "1", "--n-lambda", "10", "--out", s(dir)])
    };
    let (ra, rb) = (run(a.path()), run(b.path()));
    assert!(ra.status.success() && rb.status.success());
    assert_eq!(ra.stdout, rb.stdout);
    assert_eq!(read(&a.path().join("reports.csv")), read(&b.path().join("reports.csv")));
}
