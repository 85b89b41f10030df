mod common;

use common::{converter, jw, testcase};
use num_complex::Complex64;
use proptest::prelude::*;
use std::f64::consts::PI;
use syncnode::converter::build_eim;
use syncnode::scanlab::*;

#[test]
fn rk4_matches_exponential_decay() {
    let a = 3.0;
    let x = rk4(|_, x, dx| dx[0] = -a * x[0], &[1.0], 0.0, 1e-3, 1000, |_, _, _| Ok(())).unwrap();
    assert!((x[0] - (-a).exp()).abs() < 1e-12);
}

#[test]
fn rk4_matches_rl_step_response() {
    // L di/dt = V - R i from rest.
    let (r, l, v) = (0.5, 0.01, 100.0);
    let t_end = 0.05;
    let x = rk4(
        |_, x, dx| dx[0] = (v - r * x[0]) / l,
        &[0.0],
        0.0,
        1e-5,
        5000,
        |_, _, _| Ok(()),
    )
    .unwrap();
    let exact = v / r * (1.0 - (-r * t_end / l).exp());
    assert!((x[0] - exact).abs() < 1e-9 * exact);
}

#[test]
fn observer_can_abort_integration() {
    let res = rk4(
        |_, x, dx| dx[0] = x[0],
        &[1.0],
        0.0,
        0.1,
        100,
        |n, _, _| {
            if n == 3 {
                Err(syncnode::Error::InvalidSimulation("stop".into()))
            } else {
                Ok(())
            }
        },
    );
    assert!(res.is_err());
}

#[test]
fn pade_is_all_pass_and_tracks_delay_phase() {
    let t = 350e-6;
    for order in [1, 2, 4, 6] {
        let p = Pade::new(t, order);
        assert_eq!(p.order(), order);
        for f in [1.0, 50.0, 300.0] {
            let h = p.response(jw(f));
            assert!((h.norm() - 1.0).abs() < 1e-12);
        }
        let f = 20.0;
        let exact = Complex64::from_polar(1.0, -2.0 * PI * f * t);
        assert!((p.response(jw(f)) - exact).norm() < 1e-3);
    }
    let hi = Pade::new(t, 6).response(jw(500.0));
    assert!((hi - Complex64::from_polar(1.0, -2.0 * PI * 500.0 * t)).norm() < 1e-8);
    assert_eq!(Pade::new(0.0, 4).order(), 0);
}

#[test]
fn dft_bin_recovers_phasor_over_whole_periods() {
    let (f, dt): (f64, f64) = (37.0, 1e-5);
    let n = (10.0 / f / dt).round() as usize;
    let dt = 10.0 / f / n as f64;
    let x: Vec<f64> = (0..n)
        .map(|k| 2.5 * (2.0 * PI * f * k as f64 * dt + 0.3).cos() + 4.0)
        .collect();
    let p = dft_bin(&x, dt, f);
    assert!((p - Complex64::from_polar(2.5, 0.3)).norm() < 1e-9);
    // A neighbouring harmonic of the window leaks nothing.
    assert!(dft_bin(&x, dt, 2.0 * f).norm() < 1e-9);
}

#[test]
fn spectral_peak_finds_tone() {
    let dt = 1e-3;
    let x: Vec<f64> = (0..4000).map(|k| (2.0 * PI * 7.3 * k as f64 * dt).sin()).collect();
    let f = spectral_peak(&x, dt, 1.0, 100.0).unwrap();
    assert!((f - 7.3).abs() < 0.02, "{f}");
}

#[test]
fn park_of_balanced_set_is_constant() {
    let (a, w) = (10.0, 2.0 * PI * 50.0);
    for k in 0..20 {
        let t = k as f64 * 1.3e-3;
        let th = w * t;
        let abc = [
            a * th.cos(),
            a * (th - 2.0 * PI / 3.0).cos(),
            a * (th + 2.0 * PI / 3.0).cos(),
        ];
        let dq = park(abc, th);
        assert!((dq[0] - a).abs() < 1e-12 && dq[1].abs() < 1e-12);
    }
}

#[test]
fn models_start_at_equilibrium() {
    for name in ["REC", "SEC"] {
        let (spec, op) = converter(name);
        let m = SimModel::single(&spec, &op, 2).unwrap();
        assert!(m.equilibrium_residual(m.equilibrium()) < 1e-9, "{name}");
        assert_eq!(m.state_names().len(), m.len());
    }
    let (cfg, sys, eq) = testcase();
    let m = SimModel::from_system(&sys, &eq, cfg.simulation.pade_order).unwrap();
    assert!(m.equilibrium_residual(m.equilibrium()) < 1e-9);
}

#[test]
fn zero_injection_stays_put() {
    let (spec, op) = converter("REC");
    let m = SimModel::single(&spec, &op, 2).unwrap();
    let tr = simulate(
        &m,
        &[],
        0.05,
        2e-5,
        &SimOptions {
            record_every: 100,
            ..Default::default()
        },
    )
    .unwrap();
    let x0 = m.equilibrium();
    for x in &tr.x {
        for ((v, v0), s) in x.iter().zip(x0).zip(m.scales()) {
            assert!((v - v0).abs() < 1e-9 * s);
        }
    }
}

#[test]
fn injection_phasors_match_drive() {
    let inj = Injection {
        converter: 0,
        port: InjectionPort::AcPositive,
        amplitude: 2.0,
        f_hz: 30.0,
    };
    // A positive-sequence set at f + f1 seen in the dq frame rotates at f.
    let w1 = 2.0 * PI * 50.0;
    let n = 2000;
    let dt = 1.0 / 30.0 / n as f64;
    let d: Vec<f64> = (0..n).map(|k| inj.drive(k as f64 * dt, w1).ac[0]).collect();
    let q: Vec<f64> = (0..n).map(|k| inj.drive(k as f64 * dt, w1).ac[1]).collect();
    assert!((dft_bin(&d, dt, 30.0).norm() - 2.0).abs() < 1e-9);
    assert!((dft_bin(&q, dt, 30.0).norm() - 2.0).abs() < 1e-9);
}

#[test]
fn scan_reproduces_eim_at_a_few_frequencies() {
    let (cfg, sys, eq) = testcase();
    for (site, op) in sys.converters.iter().zip(&eq.ops) {
        let opts = cfg.scan_options(&site.spec.name).unwrap();
        let grid = [7.0, 90.0];
        let res = scan_eim(&site.spec, op, &grid, &opts).unwrap();
        let eim = build_eim(&site.spec, op).unwrap();
        for p in &res.points {
            let y = eim.y.eval(jw(p.f_hz)).unwrap();
            for r in 0..4 {
                for c in 0..4 {
                    let (a, m) = (p.y_dq[(r, c)], y[(r, c)]);
                    let err = if m.norm() > 0.0 {
                        (a - m).norm() / m.norm()
                    } else {
                        a.norm()
                    };
                    assert!(err < 0.02, "{} {} Hz ({r},{c}): {a} vs {m}", site.spec.name, p.f_hz);
                }
            }
        }
        let csv = res.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 33);
    }
}

#[test]
fn scan_rejects_bad_grid() {
    let (spec, op) = converter("REC");
    assert!(scan_eim(&spec, &op, &[], &ScanOptions::default()).is_err());
    assert!(scan_eim(&spec, &op, &[-1.0], &ScanOptions::default()).is_err());
    let zero = ScanOptions {
        ac_fraction: 0.0,
        ..Default::default()
    };
    assert!(scan_eim(&spec, &op, &[10.0], &zero).is_err());
}

#[test]
fn stable_system_probe_settles() {
    let (cfg, sys, eq) = testcase();
    let m = SimModel::from_system(&sys, &eq, cfg.simulation.pade_order).unwrap();
    let opts = ProbeOptions {
        t_end: 3.0,
        ..cfg.probe_options()
    };
    let res = probe_stability(&m, &opts).unwrap();
    assert!(!res.unstable, "{res:?}");
    assert!(res.growth < 0.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pade_phase_error_shrinks_with_order(t in 1e-5f64..1e-3, f in 1.0f64..200.0) {
        let exact = Complex64::from_polar(1.0, -2.0 * PI * f * t);
        let e2 = (Pade::new(t, 2).response(jw(f)) - exact).norm();
        let e4 = (Pade::new(t, 4).response(jw(f)) - exact).norm();
        prop_assert!(e4 <= e2 + 1e-14);
    }
}
