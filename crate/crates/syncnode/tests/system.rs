mod common;

use common::testcase;
use syncnode::scanlab::{simulate, SimModel, SimOptions};

#[test]
fn dc_power_balances_with_line_loss() {
    let (cfg, sys, eq) = testcase();
    let line = &cfg.dc_network["g"].line[0];
    let i_line = eq.line_current[0][0];
    let loss = line.r * i_line * i_line;
    let dc_out: f64 = eq.ops.iter().map(|op| op.v_dc0 * op.i_dc0).sum();
    // What the converters push into the dc network is burnt in the line.
    assert!(
        (dc_out - loss).abs() < 1e-6 * sys.converters[0].spec.bases.s,
        "{dc_out} {loss}"
    );
    let (v3, v4) = (eq.dc_voltage[&3], eq.dc_voltage[&4]);
    assert!(((v3 - v4) / line.r - i_line).abs() < 1e-9 * i_line.abs());
}

#[test]
fn grid_emf_drives_poc_through_grid_impedance() {
    let (cfg, sys, eq) = testcase();
    for (k, c) in sys.converters.iter().enumerate() {
        let g = sys.grid_of(c.ac_node).unwrap();
        let op = &eq.ops[k];
        let x = cfg.omega1() * g.l;
        let e = eq.grid_emf[k];
        let u = [
            e[0] - g.r * op.i_g[0] + x * op.i_g[1],
            e[1] - g.r * op.i_g[1] - x * op.i_g[0],
        ];
        assert!(
            (u[0] - op.u_g[0]).hypot(u[1] - op.u_g[1]) < 1e-9 * c.u_poc,
            "{}",
            c.spec.name
        );
        assert!((op.u_g[0].hypot(op.u_g[1]) - c.u_poc).abs() < 1e-9 * c.u_poc);
    }
}

#[test]
fn disturbed_system_returns_to_equilibrium() {
    let (cfg, sys, eq) = testcase();
    let m = SimModel::from_system(&sys, &eq, cfg.simulation.pade_order).unwrap();
    let x0 = m.equilibrium().to_vec();
    let start: Vec<f64> = x0
        .iter()
        .zip(m.scales())
        .enumerate()
        .map(|(i, (v, s))| v + if i % 2 == 0 { 1e-3 } else { -1e-3 } * s)
        .collect();
    let opts = SimOptions {
        x_init: Some(start),
        record_every: 50_000,
        ..Default::default()
    };
    let tr = simulate(&m, &[], 12.0, 2e-5, &opts).unwrap();
    let last = tr.x.last().unwrap();
    let dev = last
        .iter()
        .zip(&x0)
        .zip(m.scales())
        .map(|((v, v0), s)| (v - v0).abs() / s)
        .fold(0.0, f64::max);
    assert!(dev < 1e-6, "{dev:e}");
}

#[test]
fn dc_network_needs_a_single_regulator() {
    let (_, mut sys, _) = testcase();
    let sec = sys.converters.iter().position(|c| c.spec.name == "SEC").unwrap();
    let rec = sys.converters.iter().position(|c| c.spec.name == "REC").unwrap();
    sys.converters[sec].spec.control = sys.converters[rec].spec.control.clone();
    assert!(sys.equilibrium().is_err());
}
