use syncnode::config::{CaseConfig, Variant, TESTCASE};
use syncnode::converter::{Control, ConverterKind};
use syncnode::Error;

fn config_err(r: syncnode::Result<CaseConfig>) -> (String, Option<usize>) {
    match r {
        Err(Error::Config { path, line, .. }) => (path, line),
        Err(e) => panic!("expected a config error, got {e}"),
        Ok(_) => panic!("expected a config error"),
    }
}

#[test]
fn bundled_testcase_parses() {
    let cfg = CaseConfig::parse(TESTCASE).unwrap();
    assert_eq!(cfg.converter.len(), 2);
    let sys = cfg.system_spec().unwrap();
    let kinds: Vec<_> = sys
        .converters
        .iter()
        .map(|c| (c.spec.name.as_str(), c.spec.kind()))
        .collect();
    assert!(kinds.contains(&("SEC", ConverterKind::Gfm)));
    assert!(kinds.contains(&("REC", ConverterKind::Gfl)));
    assert_eq!(cfg.scan_grid().len(), cfg.scan.points);
}

#[test]
fn unknown_key_reports_its_line() {
    let text = TESTCASE.replace("r_f = 0.008", "r_f = 0.008\nrf_typo = 1.0");
    let (path, line) = config_err(CaseConfig::parse(&text));
    let expected = text.lines().position(|l| l.starts_with("rf_typo")).unwrap() + 1;
    assert_eq!(line, Some(expected), "{path}");
}

#[test]
fn non_positive_values_are_rejected() {
    let text = TESTCASE.replace("s_rated = 10e6", "s_rated = -1.0");
    let (path, _) = config_err(CaseConfig::parse(&text));
    assert!(path.ends_with("s_rated"), "{path}");
}

#[test]
fn gfm_with_pll_is_rejected() {
    let text = TESTCASE.replace("vsg = { inertia", "pll = { bandwidth_hz = 20.0 }\nvsg = { inertia");
    assert!(CaseConfig::parse(&text).is_err());
}

#[test]
fn case_variants_apply_overrides() {
    let base = CaseConfig::parse_case(TESTCASE, "I", Variant::Base).unwrap();
    let pert = CaseConfig::parse_case(TESTCASE, "I", Variant::Perturbed).unwrap();
    let damping = |c: &CaseConfig| match c.converter_spec("SEC").unwrap().control {
        Control::Gfm { damping, .. } => damping,
        _ => unreachable!(),
    };
    assert_eq!(damping(&base), 10.0);
    assert_eq!(damping(&pert), 1.0);

    let base = CaseConfig::parse_case(TESTCASE, "III", Variant::Base).unwrap();
    let pert = CaseConfig::parse_case(TESTCASE, "III", Variant::Perturbed).unwrap();
    let (rb, _) = base.grid_rl("g2").unwrap();
    let (rp, _) = pert.grid_rl("g2").unwrap();
    assert!((rp / rb - 5.6 / 3.6).abs() < 1e-12);
}

#[test]
fn unknown_case_is_a_config_error() {
    config_err(CaseConfig::parse_case(TESTCASE, "IV", Variant::Base));
}

#[test]
fn override_of_missing_path_is_rejected() {
    let mut t = toml::Table::new();
    t.insert("converter.SEC.vsg.friction".into(), toml::Value::Float(1.0));
    let (path, _) = config_err(CaseConfig::with_overrides(TESTCASE, &t));
    assert_eq!(path, "converter.SEC.vsg.friction");
}

#[test]
fn optional_leaf_can_be_overridden() {
    let mut t = toml::Table::new();
    t.insert("ac_grid.g1.x_over_r".into(), toml::Value::Float(5.0));
    let cfg = CaseConfig::with_overrides(TESTCASE, &t).unwrap();
    let (r, l) = cfg.grid_rl("g1").unwrap();
    assert!((l * cfg.omega1() / r - 5.0).abs() < 1e-12);
}

#[test]
fn scr_is_rated_on_the_attached_converter() {
    let cfg = CaseConfig::parse(TESTCASE).unwrap();
    let (r, l) = cfg.grid_rl("g2").unwrap();
    let c = &cfg.converter["REC"];
    let zb = c.v_ac * c.v_ac / c.s_rated * 1.5;
    let z = r.hypot(l * cfg.omega1());
    let scr = cfg.ac_grid["g2"].scr.unwrap();
    // Base impedance from peak phase voltage and rated power: 3/2 U^2 / S.
    assert!((z - zb / scr).abs() < 1e-9 * z, "{z} vs {}", zb / scr);
}

#[test]
fn scan_rig_follows_setting() {
    let cfg = CaseConfig::parse(TESTCASE).unwrap();
    assert_eq!(cfg.scan_options("REC").unwrap().rig, Some(cfg.grid_rl("g2").unwrap()));
    let stiff = CaseConfig::parse(&TESTCASE.replace("rig = \"grid\"", "rig = \"stiff\"")).unwrap();
    assert_eq!(stiff.scan_options("REC").unwrap().rig, None);
    assert!(CaseConfig::parse(&TESTCASE.replace("rig = \"grid\"", "rig = \"wobbly\"")).is_err());
}
