use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seqmi::saddle::solve_fixed_point;
use seqmi::table::Table;
use seqmi::zoo;

fn seqmi(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqmi"))
        .args(args)
        .current_dir(dir)
        .env_remove("SEQMI_WORKERS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(csv_files(&p));
        } else if p.extension().is_some_and(|x| x == "csv") {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn assert_round_trips(dir: &Path) {
    let files = csv_files(dir);
    assert!(!files.is_empty());
    for f in files {
        let text = std::fs::read_to_string(&f).unwrap();
        let t = Table::parse(&text).unwrap();
        assert_eq!(t.to_csv().unwrap(), text, "{}", f.display());
        let keys: Vec<&str> = t.metadata.iter().map(|(k, _)| k.as_str()).collect();
        for k in ["tool", "config_hash", "seeds"] {
            assert!(keys.contains(&k), "{} lacks {k}", f.display());
        }
    }
}

#[test]
fn help_documents_commands_flags_and_env() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqmi(&["--help"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for word in [
        "solve-se", "run-gamp", "run-rbp", "run-erm", "sweep", "verify", "--config", "--out", "--seed", "--workers", "--mc-samples", "SEQMI_WORKERS",
    ] {
        assert!(text.contains(word), "help lacks {word}");
    }
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let empty = write_config(d, "empty.toml", "[model]\ninstance = \"ridge\"\n[sweep]\nalphas = []\n");
    let unknown = write_config(d, "unknown.toml", "[model]\ninstance = \"attention\"\n");
    let missing = write_config(d, "missing.toml", "[model]\nspec = \"nope.toml\"\n");
    for cfg in [&empty, &unknown, &missing] {
        let out = seqmi(&["solve-se", "--config", cfg.to_str().unwrap()], d);
        assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = seqmi(&["solve-se", "--config", d.join("absent.toml").to_str().unwrap()], d);
    assert_eq!(out.status.code(), Some(2));
    let out = seqmi(&["solve-se"], d);
    assert_eq!(out.status.code(), Some(2));
    let out = seqmi(&["frobnicate"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_alpha_sweep_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "one.toml", "[model]\ninstance = \"ridge\"\n[sweep]\nalphas = [1.0]\n");
    let out = seqmi(&["solve-se", "--config", cfg.to_str().unwrap(), "--out", "res"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = Table::read(&d.join("res/learning_curve.csv")).unwrap();
    assert_eq!(t.rows.len(), 1);
    let inst = zoo::ridge(1.0, 0.1);
    let rep = solve_fixed_point(&inst.spec, &inst.solver).unwrap();
    assert_eq!(t.value(0, "eps_g").unwrap(), rep.test_error.value);
    assert_eq!(t.value(0, "eps_t").unwrap(), rep.train_loss.value);
    assert_eq!(t.value(0, "phi").unwrap(), rep.free_entropy.value);
    assert_eq!(t.value(0, "iterations").unwrap(), rep.iterations as f64);
    assert!(d.join("res/fixed_points/lambda_0.1_alpha_1.json").is_file());
    assert_round_trips(&d.join("res"));
}

#[test]
fn warm_starts_save_iterations_on_most_grid_points() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let grid = "alphas = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0]\nlambdas = [0.1, 1.0]";
    let run = |warm: bool| {
        let cfg = write_config(
            d,
            &format!("w{warm}.toml"),
            &format!("[model]\ninstance = \"ridge\"\n[sweep]\n{grid}\nwarm_start = {warm}\n"),
        );
        let out = seqmi(&["solve-se", "--config", cfg.to_str().unwrap(), "--out", &format!("w{warm}")], d);
        assert!(out.status.success());
        let t = Table::read(&d.join(format!("w{warm}/learning_curve.csv"))).unwrap();
        (0..t.rows.len()).map(|i| t.value(i, "iterations").unwrap()).collect::<Vec<_>>()
    };
    let warm = run(true);
    let cold = run(false);
    let better = warm.iter().zip(&cold).filter(|(w, c)| w <= c).count();
    assert!(better as f64 >= 0.8 * warm.len() as f64, "warm {warm:?} cold {cold:?}");
}

#[test]
fn gamp_and_state_evolution_tables_join_by_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(
        d,
        "g.toml",
        "[model]\ninstance = \"ridge\"\n[sweep]\nalphas = [2.0]\n[gamp]\ndim = 100\nseeds = [3]\nsave_datasets = true\n",
    );
    let out = seqmi(&["run-rbp", "--config", cfg.to_str().unwrap(), "--out", "g"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let g = Table::read(&d.join("g/gamp/lambda_0.1_alpha_2_seed_3.csv")).unwrap();
    let se = Table::read(&d.join("g/state_evolution/lambda_0.1_alpha_2.csv")).unwrap();
    assert_eq!(g.columns, se.columns);
    assert_eq!(g.rows.len(), se.rows.len());
    for i in 0..g.rows.len() {
        assert_eq!(g.rows[i][0], se.rows[i][0]);
    }
    let s = Table::read(&d.join("g/rbp_summary.csv")).unwrap();
    assert!(s.value(0, "rbp_gamp_rms").unwrap() <= 5.0 / 10.0);
    assert!(s.value(0, "grad_norm").unwrap() <= 1e-4 * (1.0 + s.value(0, "grad_norm_zero").unwrap()));
    let data = seqmi::data::Dataset::load(&d.join("g/datasets/lambda_0.1_alpha_2_seed_3.bin")).unwrap();
    assert_eq!((data.dim(), data.n(), data.seed), (100, 200, 3));
    assert_round_trips(&d.join("g"));
}

#[test]
fn erm_rows_are_deterministic_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(
        d,
        "e.toml",
        "[model]\ninstance = \"logistic-gmm\"\n[sweep]\nalphas = [1.0, 2.0]\n[erm]\ndim = 60\nseeds = [0, 1, 2]\nn_test = 500\n",
    );
    let one = seqmi(&["run-erm", "--config", cfg.to_str().unwrap(), "--out", "one"], d);
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
    let two = Command::new(env!("CARGO_BIN_EXE_seqmi"))
        .args(["run-erm", "--config", cfg.to_str().unwrap(), "--out", "two"])
        .current_dir(d)
        .env("SEQMI_WORKERS", "2")
        .output()
        .unwrap();
    assert!(two.status.success());
    let a = std::fs::read_to_string(d.join("one/erm_curve.csv")).unwrap();
    let b = std::fs::read_to_string(d.join("two/erm_curve.csv")).unwrap();
    assert_eq!(a, b);
    let t = Table::parse(&a).unwrap();
    assert_eq!(t.rows.len(), 6);
    assert_eq!(t.rows[0][t.column("source").unwrap()], "erm");
    let seeds: Vec<String> = (0..6).map(|i| t.rows[i][t.column("seed").unwrap()].clone()).collect();
    assert_eq!(seeds, ["0", "1", "2", "0", "1", "2"]);

    let seeded = seqmi(&["run-erm", "--config", cfg.to_str().unwrap(), "--out", "s", "--seed", "7", "--mc-samples", "300"], d);
    assert!(seeded.status.success());
    let t = Table::read(&d.join("s/erm_curve.csv")).unwrap();
    assert_eq!(t.rows.len(), 2);
    assert!(t.metadata.contains(&("seeds".into(), "7".into())));
}

#[test]
fn sweep_overlays_solver_and_erm_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(
        d,
        "s.toml",
        "[model]\ninstance = \"ridge\"\n[sweep]\nalphas = [2.0, 0.5]\n[erm]\ndim = 80\nseeds = [0, 1]\nn_test = 400\n",
    );
    let out = seqmi(&["sweep", "--config", cfg.to_str().unwrap(), "--out", "s"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = Table::read(&d.join("s/learning_curve.csv")).unwrap();
    let src = t.column("source").unwrap();
    let alpha = t.column("alpha").unwrap();
    let order: Vec<(String, String)> = t.rows.iter().map(|r| (r[src].clone(), r[alpha].clone())).collect();
    assert_eq!(
        order,
        [("solver", "2.0"), ("solver", "0.5"), ("erm", "2.0"), ("erm", "2.0"), ("erm", "0.5"), ("erm", "0.5")]
            .map(|(a, b)| (a.to_string(), b.to_string()))
    );
}

#[test]
fn verify_flags_a_missing_onsager_term() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(
        d,
        "v.toml",
        "[model]\ninstance = \"ridge\"\n[verify]\ntracking_dim = 400\ntracking_seeds = [0, 1, 2]\ntracking_iterations = 8\ngradient_dim = 100\n",
    );
    let run = |args: &[&str], out: &str| {
        let mut a = vec!["verify", "--config", cfg.to_str().unwrap(), "--out", out];
        a.extend_from_slice(args);
        let o = seqmi(&a, d);
        let t = Table::read(&d.join(out).join("verify_report.csv")).unwrap();
        (o, t)
    };
    let (intact, t) = run(&[], "intact");
    let stdout = String::from_utf8(intact.stdout).unwrap();
    assert!(stdout.contains("ridge oracle"));
    let check = t.column("check").unwrap();
    let passed = t.column("passed").unwrap();
    let row = |t: &Table, name: &str| t.rows.iter().position(|r| r[check] == name).unwrap();
    assert_eq!(t.rows[row(&t, "onsager mutation")][passed], "true");
    let base = t.value(row(&t, "state evolution tracks GAMP"), "value").unwrap();

    let (broken, b) = run(&["--no-onsager"], "broken");
    assert_eq!(broken.status.code(), Some(3));
    let i = row(&b, "state evolution tracks GAMP");
    assert_eq!(b.rows[i][passed], "false");
    assert!(b.value(i, "value").unwrap() > 5.0 * base);
}

#[test]
fn verify_needs_a_zoo_instance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("m.toml"), zoo::ridge(1.0, 0.1).spec.to_toml().unwrap()).unwrap();
    let cfg = write_config(d, "v.toml", "[model]\nspec = \"m.toml\"\n");
    let out = seqmi(&["verify", "--config", cfg.to_str().unwrap()], d);
    assert_eq!(out.status.code(), Some(2));
}
