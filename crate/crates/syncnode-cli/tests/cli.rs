use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use syncnode::config::{CaseConfig, TESTCASE};
use syncnode::converter::build_eim;
use syncnode::fma::analyze;
use syncnode::scanlab::{linearize_ss, ProbeResult, SimModel};
use syncnode_cli::{compare_oracles, CliError, EXIT_CONFIG, EXIT_DISAGREE, EXIT_NUMERIC};

fn syncnode(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_syncnode"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    (
        header,
        lines.map(|l| l.split(',').map(String::from).collect()).collect(),
    )
}

fn col(header: &[String], name: &str) -> usize {
    header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("no column {name}"))
}

/// Node ids of the first mode ordered by decreasing |PF|.
fn top_nodes(dir: &Path) -> Vec<usize> {
    let (h, rows) = table(&dir.join("node_pf.csv"));
    let (m, n, a) = (col(&h, "mode"), col(&h, "node"), col(&h, "pf_abs"));
    let mut v: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r[m] == "1")
        .map(|r| (r[n].parse().unwrap(), r[a].parse().unwrap()))
        .collect();
    v.sort_by(|x, y| y.1.total_cmp(&x.1));
    v.into_iter().map(|x| x.0).collect()
}

fn node(conv: &str, port: &str) -> usize {
    let cfg = CaseConfig::parse(TESTCASE).unwrap();
    let n = &cfg.converter[conv].nodes;
    match port {
        "sync" => n.sync,
        "ac" => n.ac,
        _ => n.dc,
    }
}

#[test]
fn build_matches_library_and_gfl_sync_dc_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = syncnode(
        &["build", "--freq-min", "1", "--freq-max", "300", "--grid-points", "12"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let (h, rows) = table(&dir.path().join("eim_REC_dq.csv"));
    assert_eq!(rows.len(), 12);
    assert_eq!(h.len(), 1 + 16 * 4);
    for r in &rows {
        for c in ["Y_sync_dc_re", "Y_sync_dc_im"] {
            assert_eq!(r[col(&h, c)].parse::<f64>().unwrap(), 0.0);
        }
    }

    let cfg = CaseConfig::parse(TESTCASE).unwrap();
    let sys = cfg.system_spec().unwrap();
    let eq = sys.equilibrium().unwrap();
    let k = sys.converters.iter().position(|c| c.spec.name == "SEC").unwrap();
    let eim = build_eim(&sys.converters[k].spec, &eq.ops[k]).unwrap();
    let (h, rows) = table(&dir.path().join("eim_SEC_dq.csv"));
    let ports = ["sync", "d", "q", "dc"];
    for r in &rows {
        let f: f64 = r[0].parse().unwrap();
        let y = eim.y.eval_hz(f).unwrap();
        for (i, a) in ports.iter().enumerate() {
            for (j, b) in ports.iter().enumerate() {
                let re: f64 = r[col(&h, &format!("Y_{a}_{b}_re"))].parse().unwrap();
                let im: f64 = r[col(&h, &format!("Y_{a}_{b}_im"))].parse().unwrap();
                let v = y[(i, j)];
                assert!((re - v.re).hypot(im - v.im) <= 1e-8 * v.norm(), "{f} Hz {a}{b}");
            }
        }
    }
    let (h, _) = table(&dir.path().join("eim_SEC_pn.csv"));
    assert_eq!(h[1], "Y_p_p_re");
}

#[test]
fn empty_grid_and_bad_config_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = syncnode(&["build", "--grid-points", "0"], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, TESTCASE.replace("r_f = 0.008", "r_f = 0.008\nrf_typo = 1.0")).unwrap();
    let out = syncnode(&["analyze", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line"), "{err}");

    let out = syncnode(&["analyze", "--case", "IV"], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let out = syncnode(&["analyze", "--increment", "0.5"], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn analyze_reports_case_patterns() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("I");
    let out = syncnode(&["analyze", "--case", "I"], &d);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("unstable"));
    let mut top: Vec<usize> = top_nodes(&d)[..2].to_vec();
    top.sort();
    let mut want = vec![node("SEC", "sync"), node("SEC", "ac")];
    want.sort();
    assert_eq!(top, want);
    let (h, rows) = table(&d.join("validation.csv"));
    assert_eq!(rows.iter().filter(|r| r[0] == "1").count(), 14);
    for r in rows.iter().filter(|r| r[0] == "1") {
        assert!(r[col(&h, "rel_error")].parse::<f64>().unwrap() < 0.05);
    }
    let text = fs::read_to_string(d.join("report.txt")).unwrap();
    assert!(text.contains("case I perturbed"));

    let d = dir.path().join("III");
    syncnode(&["analyze", "--case", "III"], &d);
    assert_eq!(top_nodes(&d)[0], node("REC", "ac"));

    let d = dir.path().join("base");
    let out = syncnode(&["analyze", "--case", "I", "--variant", "base"], &d);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("stable"));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(syncnode(&["analyze", "--case", "II", "--increment", "0.05"], d)
            .status
            .success());
        assert!(syncnode(&["build", "--grid-points", "7"], d).status.success());
    }
    for f in [
        "modes.csv",
        "node_pf.csv",
        "sensitivity.csv",
        "validation.csv",
        "report.txt",
        "eim_SEC_dq.csv",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn scan_agrees_with_model_and_rejects_zero_amplitude() {
    let dir = tempfile::tempdir().unwrap();
    let out = syncnode(
        &["scan", "--freq-min", "5", "--freq-max", "150", "--grid-points", "2"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = table(&dir.path().join("scan_summary.csv"));
    assert_eq!(rows.len(), 32);
    for r in &rows {
        assert!(r[col(&h, "worst_rel_error")].parse::<f64>().unwrap() < 0.02, "{r:?}");
    }
    let (h, rows) = table(&dir.path().join("scan_SEC.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(h.len(), 1 + 16 * 5 + 1);

    let cfg = dir.path().join("zero.toml");
    fs::write(&cfg, TESTCASE.replace("ac_fraction = 0.001", "ac_fraction = 0.0")).unwrap();
    let out = syncnode(
        &["scan", "--config", cfg.to_str().unwrap(), "--grid-points", "1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn oracle_finds_the_unstable_pair() {
    let dir = tempfile::tempdir().unwrap();
    let out = syncnode(&["oracle", "--case", "I"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = table(&dir.path().join("ss_eigenvalues.csv"));
    let rhp: Vec<f64> = rows
        .iter()
        .filter(|r| r[col(&h, "re")].parse::<f64>().unwrap() > 0.0)
        .map(|r| r[col(&h, "f_hz")].parse::<f64>().unwrap())
        .collect();
    assert_eq!(rhp.len(), 2);
    assert!((rhp[0] + rhp[1]).abs() < 1e-9 * rhp[0].abs());
    assert!(fs::read_to_string(dir.path().join("oracle.txt"))
        .unwrap()
        .contains("result: agree"));
}

#[test]
fn contradicting_oracle_is_a_disagreement() {
    let cfg = CaseConfig::parse_case(TESTCASE, "I", syncnode::config::Variant::Perturbed).unwrap();
    let sys = cfg.system_spec().unwrap();
    let eq = sys.equilibrium().unwrap();
    let a = analyze(&sys.ein(&eq).unwrap(), &cfg.mode_options(), None).unwrap();
    let ss = linearize_ss(&SimModel::from_system(&sys, &eq, 2).unwrap()).unwrap();
    let settled = ProbeResult {
        unstable: false,
        growth: 0.01,
        blowup_at: None,
        peak_hz: None,
    };
    assert!(!compare_oracles(&a, &ss, &settled).agree);
    let wrong_freq = ProbeResult {
        unstable: true,
        growth: 50.0,
        blowup_at: Some(1.0),
        peak_hz: Some(2.0 * a.critical().unwrap().mode.freq_hz()),
    };
    assert!(!compare_oracles(&a, &ss, &wrong_freq).agree);
    assert_eq!(CliError::Disagreement(String::new()).exit_code(), EXIT_DISAGREE);
    assert_eq!(
        CliError::from(syncnode::Error::NoConvergence {
            iterations: 1,
            residual: 1.0
        })
        .exit_code(),
        EXIT_NUMERIC
    );
    assert_eq!(CliError::from(syncnode::Error::AmplitudeZero).exit_code(), EXIT_CONFIG);
}
