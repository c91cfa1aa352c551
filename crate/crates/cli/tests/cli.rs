use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fcrpeak_cli::commands::{self, SolveDayArgs};
use fcrpeak_cli::{CliError, RunConfig};

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// The desk config shrunk to test size.
fn small(n_sites: usize) -> RunConfig {
    let mut cfg = RunConfig::load(&repo_config("desk.toml")).unwrap();
    cfg.sites.truncate(n_sites);
    cfg.scenarios.n_generate = 60;
    cfg.scenarios.n_vr = 3;
    cfg.scenarios.n_wr = 3;
    cfg.dp.n_days = 2;
    cfg.dp.grid_points = 4;
    cfg.dp.n_segments = 2;
    cfg.dp.n_eval = 16;
    cfg.validate().unwrap();
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fcrpeak"))
}

fn write_cfg(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

#[test]
fn shipped_configs_round_trip() {
    for name in ["desk.toml", "case_study.toml"] {
        let cfg = RunConfig::load(&repo_config(name)).unwrap();
        let again = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again, "{name}");
    }
}

#[test]
fn case_study_config_holds_its_constants() {
    let cfg = RunConfig::load(&repo_config("case_study.toml")).unwrap();
    assert_eq!(cfg.grid.n_t, 96);
    assert_eq!(cfg.fcr.epsilon, 0.005);
    assert_eq!((cfg.scenarios.n_generate, cfg.scenarios.n_vr, cfg.scenarios.n_wr), (1500, 50, 50));
    assert_eq!((cfg.tariffs.c_fcr, cfg.tariffs.c_peak, cfg.tariffs.c_elec), (12.0, 13_000.0, 45.0));
    assert_eq!(cfg.sites.len(), 2);
    for s in &cfg.sites {
        assert!((s.battery.eta_c * s.battery.eta_d - 0.9).abs() < 1e-12);
        assert_eq!((s.battery.e_max, s.battery.p_max), (1.0, 1.0));
    }
}

#[test]
fn validation_names_the_field() {
    let base = small(2);
    let cases: Vec<(Box<dyn Fn(&mut RunConfig)>, &str)> = vec![
        (Box::new(|c| c.fcr.epsilon = 0.7), "fcr.epsilon"),
        (Box::new(|c| c.fcr.epsilon = 0.0), "fcr.epsilon"),
        (Box::new(|c| c.scenarios.n_vr = 0), "scenarios.n_vr"),
        (Box::new(|c| c.scenarios.n_wr = 1000), "scenarios.n_wr"),
        (Box::new(|c| c.sites[1].battery.eta_c = 0.9), "sites.battery.eta_c"),
        (Box::new(|c| c.sites[0].battery.e0 = 5.0), "sites[0].battery"),
        (Box::new(|c| c.sites[1].consumption_csv = Some("/nonexistent.csv".into())), "sites[1].consumption_csv"),
        (Box::new(|c| c.dp.n_segments = 9), "dp.n_segments"),
    ];
    for (f, field) in cases {
        let mut c = base.clone();
        f(&mut c);
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains(field), "{msg} should name {field}");
    }
}

#[test]
fn malformed_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(repo_config("desk.toml")).unwrap();

    let p = dir.path().join("typo.toml");
    fs::write(&p, text.replace("n_rc = 8", "n_rcc = 8")).unwrap();
    let out = bin().args(["solve-day", "--config"]).arg(&p).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_rcc"));

    let p = dir.path().join("eps.toml");
    fs::write(&p, text.replace("epsilon = 0.05", "epsilon = 0.9")).unwrap();
    let out = bin().args(["fcr-only", "--config"]).arg(&p).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fcr.epsilon"));

    let p = dir.path().join("type.toml");
    fs::write(&p, text.replace("n_t = 24", "n_t = \"day\"")).unwrap();
    let out = bin().args(["reduce", "--config"]).arg(&p).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_t"));

    let out = bin().args(["solve-day", "--config", "/no/such/file.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_day_smoke_writes_all_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(2);
    let p = write_cfg(dir.path(), &cfg);
    let out_dir = dir.path().join("out");
    let out = bin().args(["solve-day", "--config"]).arg(&p).arg("--out").arg(&out_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["r.csv", "recharge.csv", "ps_bounds.csv", "solve_report.txt"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let rep = fs::read_to_string(out_dir.join("solve_report.txt")).unwrap();
    assert!(rep.contains("status: Optimal"));

    // recharge triples stay inside the band
    let mut r = csv::Reader::from_path(out_dir.join("recharge.csv")).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        let k: usize = rec[1].parse().unwrap();
        let i: usize = rec[2].parse().unwrap();
        assert!(i < k && k - i <= cfg.fcr.n_rc);
    }
    // ps bounds bracket zero and are ordered
    let mut r = csv::Reader::from_path(out_dir.join("ps_bounds.csv")).unwrap();
    for rec in r.records() {
        let v: Vec<f64> = rec.unwrap().iter().skip(2).map(|x| x.parse().unwrap()).collect();
        assert!(v[0] <= 0.0 && v[1] >= 0.0 && v[2] <= v[3]);
    }
}

fn read_r(path: &Path) -> Vec<(usize, usize, f64)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].parse().unwrap(), rec[1].parse().unwrap(), rec[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn huge_state_matches_fcr_only_at_zero_energy_price() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(1);
    cfg.tariffs.c_elec = 0.0;
    cfg.solver.feas_tol = 1e-9;
    cfg.solver.gap_tol = 1e-9;
    let p = write_cfg(dir.path(), &cfg);
    let a = dir.path().join("day");
    let b = dir.path().join("fcr");
    let s = bin().args(["solve-day", "--state", "100", "--config"]).arg(&p).arg("--out").arg(&a).output().unwrap().status;
    assert!(s.success());
    let s = bin().args(["fcr-only", "--mc-days", "0", "--config"]).arg(&p).arg("--out").arg(&b).output().unwrap().status;
    assert!(s.success());
    let ra = read_r(&a.join("r.csv"));
    let rb = read_r(&b.join("fcr_only.csv"));
    assert_eq!(ra.len(), rb.len());
    for (x, y) in ra.iter().zip(&rb) {
        assert!((x.2 - y.2).abs() < 1e-5, "{x:?} vs {y:?}");
    }
}

#[test]
fn reduce_identity_and_bias_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(1);
    cfg.scenarios.n_generate = 10;
    cfg.scenarios.n_vr = 10;
    cfg.scenarios.n_wr = 10;
    let rows = commands::reduce(&cfg, 3, dir.path()).unwrap();
    for r in &rows {
        assert!(r.bias().abs() < 1e-12);
        assert!(r.distance.abs() < 1e-12);
    }
    let mut rd = csv::Reader::from_path(dir.path().join("reduced_peak_site0.csv")).unwrap();
    let mut probs = std::collections::BTreeMap::new();
    for rec in rd.records() {
        let rec = rec.unwrap();
        probs.insert(rec[0].to_string(), rec[1].parse::<f64>().unwrap());
    }
    assert_eq!(probs.len(), 10);
    assert!((probs.values().sum::<f64>() - 1.0).abs() < 1e-12);

    cfg.scenarios.n_vr = 4;
    commands::reduce(&cfg, 3, dir.path()).unwrap();
    let mut rd = csv::Reader::from_path(dir.path().join("reduced_euclidean_site0.csv")).unwrap();
    let mut probs = std::collections::BTreeMap::new();
    for rec in rd.records() {
        let rec = rec.unwrap();
        probs.insert(rec[0].to_string(), rec[1].parse::<f64>().unwrap());
    }
    assert_eq!(probs.len(), 4);
    assert!((probs.values().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn reduce_rejects_target_above_available() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(1);
    let csv_path = dir.path().join("days.csv");
    let mut s = String::from("day_id,step,mw\n");
    for d in 0..3 {
        for k in 0..24 {
            s.push_str(&format!("{d},{k},{}\n", 1.0 + 0.1 * d as f64));
        }
    }
    fs::write(&csv_path, s).unwrap();
    cfg.sites[0].consumption_csv = Some(csv_path);
    cfg.scenarios.n_vr = 5;
    let err = commands::reduce(&cfg, 0, dir.path()).unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert!(err.to_string().contains("exceeds"));
}

#[test]
fn fcr_only_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(1);
    let r = commands::fcr_only(&cfg, 5, dir.path(), 50).unwrap();
    assert!(r > 0.0 && r <= 1.0);
    let mut rd = csv::Reader::from_path(dir.path().join("fcr_only_violations.csv")).unwrap();
    let rec = rd.records().next().unwrap().unwrap();
    assert_eq!(&rec[1], "50");
    let any: f64 = rec[6].parse().unwrap();
    assert!((0.0..=1.0).contains(&any));
}

#[test]
fn solve_day_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(2);
    let args = SolveDayArgs::default();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    commands::solve_day(&cfg, 9, &a, &SolveDayArgs { day: 1, ..args.clone() }).unwrap();
    commands::solve_day(&cfg, 9, &b, &SolveDayArgs { day: 1, ..args }).unwrap();
    for f in ["r.csv", "recharge.csv", "ps_bounds.csv", "solve_report.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn run_month_smoke_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(2);
    let p = write_cfg(dir.path(), &cfg);
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = bin().args(["run-month", "--seed", "4", "--config"]).arg(&p).arg("--out").arg(&out_dir).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        reports.push(fs::read_to_string(out_dir.join("report.csv")).unwrap());
        for f in ["report_months.csv", "value_functions_site0.csv", "peak_value_functions_site1.csv", "trace_combined_site1.csv"] {
            assert!(out_dir.join(f).exists(), "{f}");
        }
    }
    assert_eq!(reports[0], reports[1]);
    let lines: Vec<&str> = reports[0].lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("scenario,peak_power_mw,peak_costs_keur,avg_fcr_capacity_mw"));
    assert!(lines[1].starts_with("without batteries,"));
    assert!(lines[1].ends_with(",-,-,-,-"));
    assert!(lines[4].starts_with("combined,"));

    let out = bin().args(["report", "--input"]).arg(dir.path().join("a/report.csv")).output().unwrap();
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("frequency control only"));
}

#[test]
fn tune_writes_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(1);
    commands::tune(&cfg, 2, dir.path(), &SolveDayArgs { day: 1, ..Default::default() }).unwrap();
    let mut rd = csv::Reader::from_path(dir.path().join("tune.csv")).unwrap();
    let rec = rd.records().next().unwrap().unwrap();
    let thr: f64 = rec[2].parse().unwrap();
    assert!(thr > 0.0);
}

#[test]
fn tune_and_run_month_need_generators() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(1);
    let csv_path = dir.path().join("days.csv");
    let mut s = String::from("day_id,step,mw\n");
    for d in 0..5 {
        for k in 0..24 {
            s.push_str(&format!("{d},{k},{}\n", 1.0 + 0.05 * ((d * k) % 7) as f64));
        }
    }
    fs::write(&csv_path, s).unwrap();
    cfg.sites[0].consumption = None;
    cfg.sites[0].consumption_csv = Some(csv_path);
    cfg.validate().unwrap();
    let err = commands::run_month(&cfg, 0, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("sites[0].consumption"));
}
