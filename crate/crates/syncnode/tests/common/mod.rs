#![allow(dead_code)]

use nalgebra::DMatrix;
use num_complex::Complex64;
use syncnode::config::{CaseConfig, Variant, TESTCASE};
use syncnode::converter::{ConverterSpec, OperatingPoint};
use syncnode::linalg::CMat;
use syncnode::scanlab::{Drive, SimModel};
use syncnode::system::{Equilibrium, SystemSpec};

pub fn jw(f_hz: f64) -> Complex64 {
    Complex64::new(0.0, 2.0 * std::f64::consts::PI * f_hz)
}

pub fn testcase() -> (CaseConfig, SystemSpec, Equilibrium) {
    let cfg = CaseConfig::parse(TESTCASE).unwrap();
    let sys = cfg.system_spec().unwrap();
    let eq = sys.equilibrium().unwrap();
    (cfg, sys, eq)
}

pub fn case(name: &str, variant: Variant) -> (CaseConfig, SystemSpec, Equilibrium) {
    let cfg = CaseConfig::parse_case(TESTCASE, name, variant).unwrap();
    let sys = cfg.system_spec().unwrap();
    let eq = sys.equilibrium().unwrap();
    (cfg, sys, eq)
}

/// (spec, op) of the named converter at the testcase equilibrium.
pub fn converter(name: &str) -> (ConverterSpec, OperatingPoint) {
    let (_, sys, eq) = testcase();
    let k = sys.converters.iter().position(|c| c.spec.name == name).unwrap();
    (sys.converters[k].spec.clone(), eq.ops[k])
}

pub fn rel(a: Complex64, b: Complex64) -> f64 {
    (a - b).norm() / b.norm()
}

/// Largest entrywise error relative to the largest entry of `b`.
pub fn rel_mat(a: &CMat, b: &CMat) -> f64 {
    let scale = b.iter().map(|v| v.norm()).fold(0.0, f64::max);
    (a - b).iter().map(|v| v.norm()).fold(0.0, f64::max) / scale
}

/// Four-port admittance of a converter between ideal sources, obtained from
/// finite-difference linearization of the time-domain model instead of the
/// analytic elimination. Canonical port order `(sync, d, q, dc)`.
pub fn state_space_eim(spec: &ConverterSpec, op: &OperatingPoint, pade_order: usize, s: Complex64) -> CMat {
    let model = SimModel::single(spec, op, pade_order).unwrap();
    let x0 = model.equilibrium().to_vec();
    let n = x0.len();
    let b = spec.bases;
    let steps = [b.v_ac * 1e-6, b.v_ac * 1e-6, b.v_dc * 1e-6, b.s.max(b.v_ac) * 1e-6];
    let outputs = |x: &[f64], d: Drive| {
        let m = model.measure(x, &[d])[0];
        // (u_d, u_q, v_dc, ω) and (i_d, i_q, i_dc, P_sync)
        [m.u[0], m.u[1], m.v_dc, m.omega, m.i[0], m.i[1], m.i_dc, m.p_sync]
    };
    let drive = |ch: usize, v: f64| {
        let mut d = Drive::default();
        match ch {
            0 => d.ac[0] = v,
            1 => d.ac[1] = v,
            2 => d.dc = v,
            _ => d.sync = v,
        }
        d
    };
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut c = DMatrix::<f64>::zeros(8, n);
    let mut x = x0.clone();
    for j in 0..n {
        let h = (1e-6 * x0[j].abs()).max(1e-8);
        x[j] = x0[j] + h;
        let (fp, yp) = (model.rhs(&x, &[Drive::default()]), outputs(&x, Drive::default()));
        x[j] = x0[j] - h;
        let (fm, ym) = (model.rhs(&x, &[Drive::default()]), outputs(&x, Drive::default()));
        x[j] = x0[j];
        for i in 0..n {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
        for i in 0..8 {
            c[(i, j)] = (yp[i] - ym[i]) / (2.0 * h);
        }
    }
    let mut bm = DMatrix::<f64>::zeros(n, 4);
    let mut dm = DMatrix::<f64>::zeros(8, 4);
    for (ch, &h) in steps.iter().enumerate() {
        let fp = model.rhs(&x0, &[drive(ch, h)]);
        let fm = model.rhs(&x0, &[drive(ch, -h)]);
        let yp = outputs(&x0, drive(ch, h));
        let ym = outputs(&x0, drive(ch, -h));
        for i in 0..n {
            bm[(i, ch)] = (fp[i] - fm[i]) / (2.0 * h);
        }
        for i in 0..8 {
            dm[(i, ch)] = (yp[i] - ym[i]) / (2.0 * h);
        }
    }
    let cx = |m: &DMatrix<f64>| m.map(|v| Complex64::new(v, 0.0));
    let resolvent = (CMat::identity(n, n) * s - cx(&a)).lu().solve(&cx(&bm)).unwrap();
    let h = cx(&c) * resolvent + cx(&dm);
    let hv = h.rows(0, 4).into_owned();
    let hi = h.rows(4, 4).into_owned();
    let y = hi * hv.try_inverse().unwrap();
    syncnode::converter::measurement_to_canonical(&y)
}

/// Central-difference derivative of eigenvalue `k` of `Z Y` with respect to
/// entry `(row, col)` of `Z` (or of `Y` when `of_y`). The step is `1e-6` of
/// the entry, or of the largest entry of the matrix when the entry is zero.
pub fn fd_eigen_derivative(z: &CMat, y: &CMat, lambda: Complex64, row: usize, col: usize, of_y: bool) -> Complex64 {
    let target = if of_y { y } else { z };
    let mag = target[(row, col)].norm();
    let h = 1e-6
        * if mag > 0.0 {
            mag
        } else {
            target.iter().map(|v| v.norm()).fold(0.0, f64::max)
        };
    let at = |delta: f64| {
        let (mut zp, mut yp) = (z.clone(), y.clone());
        if of_y {
            yp[(row, col)] += delta;
        } else {
            zp[(row, col)] += delta;
        }
        syncnode::linalg::eigenvalues(&(zp * yp))
            .unwrap()
            .into_iter()
            .min_by(|a, b| (a - lambda).norm().total_cmp(&(b - lambda).norm()))
            .unwrap()
    };
    (at(h) - at(-h)) / (2.0 * h)
}

/// Eigenvalue derivative from the exact first-order identity
/// `Λ' - Λ = t' ΔL r / (t' r)` with the left eigenvector of the perturbed
/// matrix, which avoids cancellation for weakly coupled entries.
pub fn perturbed_pair_derivative(
    z: &CMat,
    y: &CMat,
    lambda: Complex64,
    row: usize,
    col: usize,
    of_y: bool,
) -> Complex64 {
    let target = if of_y { y } else { z };
    let mag = target[(row, col)].norm();
    let h = 1e-6
        * if mag > 0.0 {
            mag
        } else {
            target.iter().map(|v| v.norm()).fold(0.0, f64::max)
        };
    let l = z * y;
    let e0 = syncnode::linalg::eig_lr(&l).unwrap();
    let k0 = nearest(&e0.values, lambda);
    let mut dz = CMat::zeros(z.nrows(), z.ncols());
    let mut dy = CMat::zeros(y.nrows(), y.ncols());
    let dl = if of_y {
        dy[(row, col)] = Complex64::new(h, 0.0);
        z * &dy
    } else {
        dz[(row, col)] = Complex64::new(h, 0.0);
        &dz * y
    };
    let e1 = syncnode::linalg::eig_lr(&(&l + &dl)).unwrap();
    let k1 = nearest(&e1.values, lambda);
    let t = e1.left.row(k1);
    let r = e0.right.column(k0);
    (t * &dl * r)[(0, 0)] / (t * r)[(0, 0)] / h
}

fn nearest(values: &[Complex64], lambda: Complex64) -> usize {
    (0..values.len())
        .min_by(|&a, &b| (values[a] - lambda).norm().total_cmp(&(values[b] - lambda).norm()))
        .unwrap()
}
