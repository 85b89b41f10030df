mod common;

use common::{converter, jw, rel, rel_mat, state_space_eim};
use num_complex::Complex64;
use proptest::prelude::*;
use syncnode::converter::*;
use syncnode::linalg::{self, CMat};

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn gfl() -> (ConverterSpec, OperatingPoint) {
    converter("REC")
}

fn gfm() -> (ConverterSpec, OperatingPoint) {
    converter("SEC")
}

#[test]
fn pll_forward_path_is_pi() {
    let (mut spec, _) = gfl();
    if let Control::Gfl { pll, .. } = &mut spec.control {
        *pll = PiGains::new(0.2, 10.0);
    }
    let z = sync_forward(&spec).unwrap().eval(c(0.0, 10.0)).unwrap();
    assert!((z[(0, 0)] - c(0.2, -1.0)).norm() < 1e-14);
}

#[test]
fn vsg_forward_path_vanishes_with_damping() {
    let (mut spec, _) = gfm();
    let s = jw(5.0);
    let mut last = f64::INFINITY;
    for d in [1.0, 1e3, 1e6, 1e9] {
        if let Control::Gfm { damping, .. } = &mut spec.control {
            *damping = d;
        }
        let v = spec.sync_forward().eval(s).unwrap()[(0, 0)].norm();
        assert!(v < last);
        last = v;
    }
    assert!(last < 1e-9 * spec.bases.omega / spec.bases.s * 1e3);
}

#[test]
fn vsg_forward_path_matches_swing_equation() {
    let (spec, _) = gfm();
    let Control::Gfm { inertia, damping, .. } = spec.control else {
        unreachable!()
    };
    let s = jw(3.0);
    let z = spec.sync_forward().eval(s).unwrap()[(0, 0)];
    let expected = (spec.bases.omega / spec.bases.s) / (s * inertia + damping);
    assert!(rel(z, expected) < 1e-14);
}

#[test]
fn gfl_sync_row_ignores_dc_voltage() {
    let (spec, op) = gfl();
    let eim = build_eim(&spec, &op).unwrap();
    assert!(eim.k_sync_dc.is_structural_zero());
    for f in syncnode::lti::logspace(0.1, 1000.0, 50) {
        let y = eim.y.eval(jw(f)).unwrap();
        assert_eq!(y[(PORT_SYNC, PORT_DC)], Complex64::new(0.0, 0.0));
    }
}

#[test]
fn gfm_sync_row_sees_dc_voltage() {
    let (spec, op) = gfm();
    let eim = build_eim(&spec, &op).unwrap();
    let y = eim.y.eval(jw(5.0)).unwrap();
    assert!(y[(PORT_SYNC, PORT_DC)].norm() > 0.0);
}

#[test]
fn disabled_controls_leave_the_filter() {
    let (mut spec, _) = gfl();
    spec.delay = 0.0;
    spec.decoupling = false;
    spec.current = PiGains::new(0.0, 0.0);
    spec.control = Control::Gfl {
        pll: PiGains::new(0.0, 0.0),
        dc_voltage: PiGains::new(0.0, 0.0),
        power: PiGains::new(0.0, 0.0),
        channel: PowerChannel::Reactive,
    };
    let term = TerminalConditions {
        u_poc: spec.bases.v_ac,
        power: PowerTarget::Dc(0.5 * spec.bases.s),
        q: 0.0,
        v_dc: spec.bases.v_dc,
    };
    let op = solve_operating_point(&spec, &term).unwrap();
    let eim = build_eim(&spec, &op).unwrap();
    for f in [1.0, 17.0, 230.0] {
        let s = jw(f);
        let y = eim.y_ac.eval(s).unwrap();
        let zf = dq_rl(spec.r_f, spec.l_f, spec.omega1).eval(s).unwrap();
        let expected = zf.try_inverse().unwrap();
        assert!(rel_mat(&y, &expected) < 1e-12, "f = {f}");
    }
}

#[test]
fn partition_blocks_tile_the_matrix() {
    for (spec, op) in [gfl(), gfm()] {
        let eim = build_eim(&spec, &op).unwrap();
        let s = jw(12.0);
        let y = eim.y.eval(s).unwrap();
        for (label, r0, c0, rows, cols) in PARTITION {
            let b = eim.block(label).unwrap().eval(s).unwrap();
            assert_eq!(b.shape(), (rows, cols));
            let sub = y.view((r0, c0), (rows, cols)).into_owned();
            assert_eq!(b, sub, "{label}");
        }
    }
}

#[test]
fn analytic_eim_matches_linearized_time_domain_model() {
    for (mut spec, op) in [gfl(), gfm()] {
        spec.delay = 0.0;
        let op = solve_operating_point(
            &spec,
            &TerminalConditions {
                u_poc: op.u_g[0].hypot(op.u_g[1]),
                power: PowerTarget::Poc(op.p_absorbed()),
                q: op.q_absorbed(),
                v_dc: op.v_dc0,
            },
        )
        .unwrap();
        let eim = build_eim(&spec, &op).unwrap();
        for f in [0.7, 5.0, 41.0, 330.0] {
            let y = eim.y.eval(jw(f)).unwrap();
            let oracle = state_space_eim(&spec, &op, 0, jw(f));
            for r in 0..4 {
                for k in 0..4 {
                    let (a, b) = (y[(r, k)], oracle[(r, k)]);
                    // Finite-difference noise follows the row and column magnitudes.
                    let tol = 1e-5 * b.norm() + 1e-6 * row_scale(&oracle, r).max(col_scale(&oracle, k));
                    assert!((a - b).norm() <= tol, "{} f={f} ({r},{k}): {a} vs {b}", spec.name);
                }
            }
        }
    }
}

fn row_scale(m: &CMat, r: usize) -> f64 {
    (0..m.ncols()).map(|k| m[(r, k)].norm()).fold(0.0, f64::max)
}

fn col_scale(m: &CMat, k: usize) -> f64 {
    (0..m.nrows()).map(|r| m[(r, k)].norm()).fold(0.0, f64::max)
}

#[test]
fn delayed_eim_matches_high_order_pade_at_low_frequency() {
    for (spec, op) in [gfl(), gfm()] {
        let eim = build_eim(&spec, &op).unwrap();
        for f in [2.0, 20.0] {
            let y = eim.y.eval(jw(f)).unwrap();
            let oracle = state_space_eim(&spec, &op, 6, jw(f));
            assert!(rel_mat(&y, &oracle) < 1e-5, "{} f={f}", spec.name);
        }
    }
}

#[test]
fn closing_sync_port_gives_three_port_with_loop_intact() {
    for (spec, op) in [gfl(), gfm()] {
        let eim = build_eim(&spec, &op).unwrap();
        let s = jw(7.0);
        let y4 = eim.y.eval(s).unwrap();
        let z_fo = eim.z_sync_fo.eval(s).unwrap()[(0, 0)];
        let y3 = close_sync_port(&y4, z_fo);
        // Port quantities under a (d, q, dc) excitation with the sync loop
        // closed: ω = z_fo P and P = Y_ss ω + Y_se v.
        for col in 0..3 {
            let mut v = [Complex64::new(0.0, 0.0); 3];
            v[col] = Complex64::new(1.0, 0.0);
            let p_from_v: Complex64 = (0..3).map(|k| y4[(0, k + 1)] * v[k]).sum();
            let omega = z_fo * p_from_v / (1.0 - z_fo * y4[(0, 0)]);
            for row in 0..3 {
                let i = y4[(row + 1, 0)] * omega + (0..3).map(|k| y4[(row + 1, k + 1)] * v[k]).sum::<Complex64>();
                assert!((y3[(row, col)] - i).norm() <= 1e-10 * i.norm().max(1e-12));
            }
        }
    }
}

#[test]
fn no_load_operating_point() {
    let (spec, _) = gfm();
    let term = TerminalConditions {
        u_poc: spec.bases.v_ac,
        power: PowerTarget::Poc(0.0),
        q: 0.0,
        v_dc: spec.bases.v_dc,
    };
    let op = solve_operating_point(&spec, &term).unwrap();
    assert!(op.i_g[0].abs() < 1e-9 * spec.bases.i_ac && op.i_g[1].abs() < 1e-9 * spec.bases.i_ac);
    assert!((op.u_c[0] - op.u_g[0]).abs() < 1e-9 * spec.bases.v_ac);
    assert!(op.i_dc0.abs() < 1e-9 * spec.bases.i_dc);
}

#[test]
fn unity_power_factor_current() {
    for (spec, _) in [gfl(), gfm()] {
        let p = 0.6 * spec.bases.s;
        let u = 1.02 * spec.bases.v_ac;
        let term = TerminalConditions {
            u_poc: u,
            power: PowerTarget::Poc(p),
            q: 0.0,
            v_dc: spec.bases.v_dc,
        };
        let op = solve_operating_point(&spec, &term).unwrap();
        // The GFM frame is the virtual rotor, so compare magnitudes.
        assert!((op.u_g[0].hypot(op.u_g[1]) - u).abs() < 1e-9 * u);
        assert!((op.i_g[0].hypot(op.i_g[1]) - 2.0 * p / (3.0 * u)).abs() < 1e-9 * spec.bases.i_ac);
        assert!((op.p_absorbed() - p).abs() < 1e-9 * spec.bases.s);
        assert!(op.q_absorbed().abs() < 1e-9 * spec.bases.s);
        assert!(op.invariant_residual() < 1e-9);
        let loss = 1.5 * spec.r_f * (op.i_g[0].powi(2) + op.i_g[1].powi(2));
        assert!((op.v_dc0 * op.i_dc0 - (p - loss)).abs() < 1e-9 * spec.bases.s);
    }
}

#[test]
fn dc_power_target_is_met() {
    let (spec, _) = gfl();
    let target = -0.7 * spec.bases.s;
    let term = TerminalConditions {
        u_poc: spec.bases.v_ac,
        power: PowerTarget::Dc(target),
        q: 0.1 * spec.bases.s,
        v_dc: spec.bases.v_dc,
    };
    let op = solve_operating_point(&spec, &term).unwrap();
    assert!((op.v_dc0 * op.i_dc0 - target).abs() < 1e-9 * spec.bases.s);
    assert!((op.q_absorbed() - 0.1 * spec.bases.s).abs() < 1e-9 * spec.bases.s);
}

#[test]
fn az_is_unitary() {
    let a = a_z();
    let err = linalg::max_abs(&(&a * a.adjoint() - CMat::identity(2, 2)));
    assert!(err < 1e-15);
}

#[test]
fn identity_stays_identity_in_sequence_domain() {
    let i = CMat::identity(4, 4);
    assert!(linalg::max_abs(&(dq_to_modified_sequence(&i) - &i)) < 1e-15);
}

#[test]
fn port_orders_round_trip() {
    let m = CMat::from_fn(4, 4, |r, k| c(r as f64, k as f64));
    assert_eq!(measurement_to_canonical(&canonical_to_measurement(&m)), m);
    assert_eq!(canonical_to_measurement(&m)[(3, 3)], m[(0, 0)]);
}

fn cmat4() -> impl Strategy<Value = CMat> {
    proptest::collection::vec(-10.0f64..10.0, 32)
        .prop_map(|v| CMat::from_fn(4, 4, |r, k| c(v[2 * (4 * r + k)], v[2 * (4 * r + k) + 1])))
}

proptest! {
    #[test]
    fn sequence_transform_preserves_spectrum(m in cmat4()) {
        let t = dq_to_modified_sequence(&m);
        let mut a = linalg::eigenvalues(&m).unwrap();
        let mut b = linalg::eigenvalues(&t).unwrap();
        let key = |z: &Complex64| (z.re * 1e6).round() as i64 * 1_000_000_000 + (z.im * 1e3).round() as i64;
        a.sort_by_key(key);
        b.sort_by_key(key);
        let scale = 1.0 + linalg::max_abs(&m);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).norm() < 1e-9 * scale);
        }
        prop_assert!((m.trace() - t.trace()).norm() < 1e-12 * scale);
    }

    #[test]
    fn sequence_transform_round_trips(m in cmat4()) {
        let back = modified_sequence_to_dq(&dq_to_modified_sequence(&m));
        prop_assert!(linalg::max_abs(&(back - &m)) < 1e-12 * (1.0 + linalg::max_abs(&m)));
    }

    #[test]
    fn pll_gains_scale_with_voltage(f in 1.0f64..100.0, zeta in 0.3f64..3.0, u in 1.0f64..1e5) {
        let g = PiGains::pll_from_bandwidth(f, zeta, u);
        let g1 = PiGains::pll_from_bandwidth(f, zeta, 1.0);
        prop_assert!((g.kp * u - g1.kp).abs() < 1e-9 * g1.kp);
        prop_assert!((g.ki * u - g1.ki).abs() < 1e-9 * g1.ki);
    }
}

#[test]
fn pll_bandwidth_is_the_closed_loop_half_power_point() {
    for zeta in [0.5, 0.707, 2.0] {
        let g = PiGains::pll_from_bandwidth(20.0, zeta, 1.0);
        let s = jw(20.0);
        let open = (g.kp + g.ki / s) / s;
        let closed = open / (1.0 + open);
        assert!(
            (closed.norm() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9,
            "zeta {zeta}"
        );
    }
}
