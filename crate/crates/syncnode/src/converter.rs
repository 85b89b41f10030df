//! Four-port extended impedance model (EIM) of a grid-following (PLL) or
//! grid-forming (VSG) voltage-source converter.
//!
//! Port order is `(sync, ac-d, ac-q, dc)`. Every "current" is taken flowing
//! from the network into the converter, so that the network closes the loop
//! as `V = Z_net (I_inj - Y_con V)`. The sync port carries the virtual voltage
//! `Δω_sync` (rad/s) and the virtual current `ΔP_sync`: the controller-frame
//! q-axis PoC voltage for a PLL, the negated injected active power for a VSG.
//!
//! Small-signal frame relations use the linearized rotation
//! `Δx^c = Δx + (1/s)[x_q0; -x_d0] Δω_sync`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, C1};
use crate::lti::TransferMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConverterKind {
    Gfl,
    Gfm,
}

impl ConverterKind {
    pub fn label(self) -> &'static str {
        match self {
            ConverterKind::Gfl => "GFL",
            ConverterKind::Gfm => "GFM",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiGains {
    pub kp: f64,
    pub ki: f64,
}

impl PiGains {
    pub fn new(kp: f64, ki: f64) -> Self {
        Self { kp, ki }
    }

    pub fn transfer(&self) -> TransferMatrix {
        TransferMatrix::pi(self.kp, self.ki)
    }

    /// PLL gains for a second-order loop with closed-loop -3 dB bandwidth
    /// `f_bw_hz` and damping `zeta`, normalized by the PoC voltage amplitude.
    pub fn pll_from_bandwidth(f_bw_hz: f64, zeta: f64, u_amplitude: f64) -> Self {
        let a = 1.0 + 2.0 * zeta * zeta;
        let wn = 2.0 * PI * f_bw_hz / (a + (a * a + 1.0).sqrt()).sqrt();
        Self {
            kp: 2.0 * zeta * wn / u_amplitude,
            ki: wn * wn / u_amplitude,
        }
    }
}

/// Rated values. Ac quantities are dq amplitudes (peak phase values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bases {
    pub v_ac: f64,
    pub i_ac: f64,
    pub v_dc: f64,
    pub i_dc: f64,
    pub s: f64,
    pub omega: f64,
}

impl Bases {
    /// Consistent bases from rated power, ac amplitude, dc voltage and
    /// fundamental frequency.
    pub fn from_ratings(s: f64, v_ac: f64, v_dc: f64, f_hz: f64) -> Self {
        Self {
            v_ac,
            i_ac: 2.0 * s / (3.0 * v_ac),
            v_dc,
            i_dc: s / v_dc,
            s,
            omega: 2.0 * PI * f_hz,
        }
    }

    pub fn z_ac(&self) -> f64 {
        self.v_ac / self.i_ac
    }

    fn validate(&self) -> Result<()> {
        let all = [self.v_ac, self.i_ac, self.v_dc, self.i_dc, self.s, self.omega];
        if all.iter().all(|&b| b.is_finite() && b > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidSpec("all base values must be strictly positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerChannel {
    Active,
    #[default]
    Reactive,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    /// PLL synchronization, dc-voltage control on d, power control on q.
    Gfl {
        pll: PiGains,
        dc_voltage: PiGains,
        power: PiGains,
        channel: PowerChannel,
    },
    /// VSG synchronization `H_vsg = (ω_b/S_b) / (J s + D)` (J, D per unit) and a
    /// series `R_v + sL_v` virtual admittance producing the current reference.
    Gfm {
        inertia: f64,
        damping: f64,
        r_v: f64,
        l_v: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConverterSpec {
    pub name: String,
    pub r_f: f64,
    pub l_f: f64,
    /// Lumped computation/PWM delay.
    pub delay: f64,
    pub current: PiGains,
    /// Cross-coupling cancellation `ω1 L_f` in the current loop.
    pub decoupling: bool,
    /// Fundamental angular frequency (rad/s).
    pub omega1: f64,
    pub bases: Bases,
    pub control: Control,
}

impl ConverterSpec {
    pub fn kind(&self) -> ConverterKind {
        match self.control {
            Control::Gfl { .. } => ConverterKind::Gfl,
            Control::Gfm { .. } => ConverterKind::Gfm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bases.validate()?;
        let pos = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!("{}: {what} must be positive", self.name)))
            }
        };
        let nonneg = |v: f64, what: &str| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!(
                    "{}: {what} must be non-negative",
                    self.name
                )))
            }
        };
        pos(self.l_f, "filter inductance")?;
        nonneg(self.r_f, "filter resistance")?;
        nonneg(self.delay, "delay")?;
        pos(self.omega1, "fundamental frequency")?;
        nonneg(self.current.kp, "current kp")?;
        nonneg(self.current.ki, "current ki")?;
        match &self.control {
            Control::Gfl {
                pll, dc_voltage, power, ..
            } => {
                for (g, what) in [(pll, "pll"), (dc_voltage, "dc voltage"), (power, "power")] {
                    nonneg(g.kp, what)?;
                    nonneg(g.ki, what)?;
                }
            }
            Control::Gfm {
                inertia,
                damping,
                r_v,
                l_v,
            } => {
                pos(*inertia, "inertia")?;
                nonneg(*damping, "damping")?;
                nonneg(*r_v, "virtual resistance")?;
                pos(*l_v, "virtual inductance")?;
            }
        }
        Ok(())
    }

    /// `K_d = ω1 L_f [0 -1; 1 0]`, or zero without decoupling.
    pub fn decoupling_matrix(&self) -> [[f64; 2]; 2] {
        let x = if self.decoupling { self.omega1 * self.l_f } else { 0.0 };
        [[0.0, -x], [x, 0.0]]
    }

    /// Sync forward path `Z_sync_fo(s)`: `H_pll(s)` or `H_vsg(s)`.
    pub fn sync_forward(&self) -> TransferMatrix {
        match &self.control {
            Control::Gfl { pll, .. } => pll.transfer(),
            Control::Gfm { inertia, damping, .. } => {
                TransferMatrix::rational(&[self.bases.omega / self.bases.s], &[*inertia, *damping])
                    .expect("positive inertia")
            }
        }
    }
}

/// Free function form of [`ConverterSpec::sync_forward`].
pub fn sync_forward(spec: &ConverterSpec) -> Result<TransferMatrix> {
    spec.validate()?;
    Ok(spec.sync_forward())
}

/// dq-frame series R-L impedance `(R + sL) I + ω1 L [0 -1; 1 0]`.
pub fn dq_rl(r: f64, l: f64, omega1: f64) -> TransferMatrix {
    let diag = TransferMatrix::rational(&[l, r], &[1.0]).expect("constant denominator");
    let x = omega1 * l;
    TransferMatrix::grid(&[
        vec![diag.clone(), TransferMatrix::real(-x)],
        vec![TransferMatrix::real(x), diag],
    ])
    .expect("2x2 grid")
}

/// Steady-state dq impedance matrix `[R, -ω1 L; ω1 L, R]`.
pub fn dq_rl_static(r: f64, l: f64, omega1: f64) -> [[f64; 2]; 2] {
    let x = omega1 * l;
    [[r, -x], [x, r]]
}

fn mat2_vec(m: &[[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

/// Active power absorbed at a port, `1.5 (u_d i_d + u_q i_q)`.
pub fn active_power(u: [f64; 2], i: [f64; 2]) -> f64 {
    1.5 * (u[0] * i[0] + u[1] * i[1])
}

/// Reactive power absorbed at a port, `1.5 (u_q i_d - u_d i_q)`.
pub fn reactive_power(u: [f64; 2], i: [f64; 2]) -> f64 {
    1.5 * (u[1] * i[0] - u[0] * i[1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PowerTarget {
    /// Active power absorbed from the ac network at the PoC (W).
    Poc(f64),
    /// Power delivered by the converter into its dc node, `v_dc · i_dc` (W).
    Dc(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalConditions {
    /// PoC voltage amplitude (dq magnitude, V).
    pub u_poc: f64,
    pub power: PowerTarget,
    /// Reactive power absorbed at the PoC (var).
    pub q: f64,
    pub v_dc: f64,
}

/// Constant references that hold the converter at its operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setpoints {
    /// GFL: regulated dc voltage. GFM: unused (equals `v_dc0`).
    pub v_dc_ref: f64,
    /// GFL: power reference on the configured channel.
    pub power_ref: f64,
    /// GFM: absorbed-power reference of the swing equation.
    pub p_ref: f64,
    /// GFM: internal voltage amplitude behind the virtual impedance (d-axis).
    pub e_ref: f64,
}

/// Equilibrium, expressed in the converter's controller frame (which is the
/// system frame at the equilibrium).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub u_g: [f64; 2],
    /// PoC current into the converter.
    pub i_g: [f64; 2],
    pub u_c: [f64; 2],
    pub v_dc0: f64,
    /// Dc current delivered by the converter into its dc node.
    pub i_dc0: f64,
    pub m: [f64; 2],
    pub omega1: f64,
    pub setpoints: Setpoints,
}

impl OperatingPoint {
    pub fn p_absorbed(&self) -> f64 {
        active_power(self.u_g, self.i_g)
    }

    pub fn q_absorbed(&self) -> f64 {
        reactive_power(self.u_g, self.i_g)
    }

    /// Largest relative violation of `u_c = m v_dc` and
    /// `1.5 u_c·i_g = v_dc i_dc`.
    pub fn invariant_residual(&self) -> f64 {
        let uc_scale = self.u_c[0].hypot(self.u_c[1]).max(1e-12);
        let r1 = (0..2)
            .map(|k| (self.u_c[k] - self.m[k] * self.v_dc0).abs() / uc_scale)
            .fold(0.0, f64::max);
        let p_ac = active_power(self.u_c, self.i_g);
        let p_dc = self.v_dc0 * self.i_dc0;
        let r2 = (p_ac - p_dc).abs() / p_ac.abs().max(p_dc.abs()).max(1e-9 * uc_scale);
        r1.max(r2)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-12,
        }
    }
}

/// Damped Newton with a central-difference Jacobian on scaled residuals.
pub(crate) fn damped_newton<F>(mut x: Vec<f64>, residual: F, opts: &NewtonOptions) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let norm = |r: &[f64]| r.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut r = residual(&x);
    let mut rn = norm(&r);
    for _ in 0..opts.max_iterations {
        if !rn.is_finite() {
            break;
        }
        if rn < opts.tolerance {
            return Ok(x);
        }
        let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let h = 1e-7 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let (rp, rm) = (residual(&xp), residual(&xm));
            for i in 0..n {
                jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let rhs = nalgebra::DVector::from_iterator(n, r.iter().map(|v| -v));
        let Some(dx) = jac.lu().solve(&rhs) else {
            break;
        };
        let mut lambda = 1.0;
        let mut accepted = false;
        while lambda > 1e-6 {
            let xt: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a + lambda * d).collect();
            let rt = residual(&xt);
            let rtn = norm(&rt);
            if rtn.is_finite() && rtn < rn {
                x = xt;
                r = rt;
                rn = rtn;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if rn < opts.tolerance {
        Ok(x)
    } else {
        Err(Error::NoConvergence {
            iterations: opts.max_iterations,
            residual: rn,
        })
    }
}

/// Steady state of the averaged model for the given terminal conditions.
pub fn solve_operating_point(spec: &ConverterSpec, term: &TerminalConditions) -> Result<OperatingPoint> {
    solve_operating_point_with(spec, term, &NewtonOptions::default())
}

pub fn solve_operating_point_with(
    spec: &ConverterSpec,
    term: &TerminalConditions,
    opts: &NewtonOptions,
) -> Result<OperatingPoint> {
    spec.validate()?;
    if !(term.u_poc > 0.0 && term.v_dc > 0.0) {
        return Err(Error::InvalidSpec("PoC voltage and dc voltage must be positive".into()));
    }
    let b = spec.bases;
    let zf = dq_rl_static(spec.r_f, spec.l_f, spec.omega1);
    let u_mag = term.u_poc;
    let power_residual = |u: [f64; 2], i: [f64; 2]| -> f64 {
        match term.power {
            PowerTarget::Poc(p) => (active_power(u, i) - p) / b.s,
            PowerTarget::Dc(p) => {
                let zi = mat2_vec(&zf, i);
                let uc = [u[0] - zi[0], u[1] - zi[1]];
                (active_power(uc, i) - p) / b.s
            }
        }
    };
    let p_guess = match term.power {
        PowerTarget::Poc(p) | PowerTarget::Dc(p) => p,
    };
    let i0 = [2.0 * p_guess / (3.0 * u_mag), -2.0 * term.q / (3.0 * u_mag)];

    let (u_g, i_g, setpoints) = match &spec.control {
        Control::Gfl { channel, .. } => {
            // PLL aligns the controller frame with the PoC voltage.
            let u = [u_mag, 0.0];
            let x = damped_newton(
                vec![i0[0] / b.i_ac, i0[1] / b.i_ac],
                |x| {
                    let i = [x[0] * b.i_ac, x[1] * b.i_ac];
                    vec![power_residual(u, i), (reactive_power(u, i) - term.q) / b.s]
                },
                opts,
            )?;
            let i = [x[0] * b.i_ac, x[1] * b.i_ac];
            let power_ref = match channel {
                PowerChannel::Reactive => reactive_power(u, i),
                PowerChannel::Active => active_power(u, i),
            };
            (
                u,
                i,
                Setpoints {
                    v_dc_ref: term.v_dc,
                    power_ref,
                    p_ref: 0.0,
                    e_ref: 0.0,
                },
            )
        }
        Control::Gfm { r_v, l_v, .. } => {
            // Unknowns: current, PoC angle in the VSG frame, internal voltage.
            let zv = dq_rl_static(*r_v, *l_v, spec.omega1);
            let x = damped_newton(
                vec![i0[0] / b.i_ac, i0[1] / b.i_ac, 0.0, 1.0],
                |x| {
                    let i = [x[0] * b.i_ac, x[1] * b.i_ac];
                    let u = [u_mag * x[2].cos(), u_mag * x[2].sin()];
                    let e = x[3] * b.v_ac;
                    let zi = mat2_vec(&zv, i);
                    vec![
                        power_residual(u, i),
                        (reactive_power(u, i) - term.q) / b.s,
                        (u[0] - e - zi[0]) / b.v_ac,
                        (u[1] - zi[1]) / b.v_ac,
                    ]
                },
                opts,
            )?;
            let i = [x[0] * b.i_ac, x[1] * b.i_ac];
            let u = [u_mag * x[2].cos(), u_mag * x[2].sin()];
            (
                u,
                i,
                Setpoints {
                    v_dc_ref: term.v_dc,
                    power_ref: 0.0,
                    p_ref: active_power(u, i),
                    e_ref: x[3] * b.v_ac,
                },
            )
        }
    };
    let zi = mat2_vec(&zf, i_g);
    let u_c = [u_g[0] - zi[0], u_g[1] - zi[1]];
    let v_dc0 = term.v_dc;
    let op = OperatingPoint {
        u_g,
        i_g,
        u_c,
        v_dc0,
        i_dc0: active_power(u_c, i_g) / v_dc0,
        m: [u_c[0] / v_dc0, u_c[1] / v_dc0],
        omega1: spec.omega1,
        setpoints,
    };
    if op.invariant_residual() > 1e-9 {
        return Err(Error::NoConvergence {
            iterations: opts.max_iterations,
            residual: op.invariant_residual(),
        });
    }
    Ok(op)
}

/// The four-port EIM with its labelled partition.
#[derive(Debug, Clone)]
pub struct FourPortEim {
    pub kind: ConverterKind,
    /// 4×4, port order `(sync, ac-d, ac-q, dc)`.
    pub y: TransferMatrix,
    pub y_sync_fe: TransferMatrix,
    pub k_sync_ac: TransferMatrix,
    pub k_sync_dc: TransferMatrix,
    pub c: TransferMatrix,
    pub y_ac: TransferMatrix,
    pub a: TransferMatrix,
    pub d: TransferMatrix,
    pub b: TransferMatrix,
    pub y_dc: TransferMatrix,
    /// Sync forward path (virtual impedance of the sync branch).
    pub z_sync_fo: TransferMatrix,
}

pub const PORT_SYNC: usize = 0;
pub const PORT_D: usize = 1;
pub const PORT_Q: usize = 2;
pub const PORT_DC: usize = 3;

/// Names of the nine partition blocks with their (row, col, rows, cols).
pub const PARTITION: [(&str, usize, usize, usize, usize); 9] = [
    ("Y_sync_fe", 0, 0, 1, 1),
    ("k_sync_ac", 0, 1, 1, 2),
    ("k_sync_dc", 0, 3, 1, 1),
    ("c", 1, 0, 2, 1),
    ("Y_ac", 1, 1, 2, 2),
    ("a", 1, 3, 2, 1),
    ("d", 3, 0, 1, 1),
    ("b", 3, 1, 1, 2),
    ("Y_dc", 3, 3, 1, 1),
];

impl FourPortEim {
    pub fn block(&self, label: &str) -> Option<&TransferMatrix> {
        Some(match label {
            "Y_sync_fe" => &self.y_sync_fe,
            "k_sync_ac" => &self.k_sync_ac,
            "k_sync_dc" => &self.k_sync_dc,
            "c" => &self.c,
            "Y_ac" => &self.y_ac,
            "a" => &self.a,
            "d" => &self.d,
            "b" => &self.b,
            "Y_dc" => &self.y_dc,
            _ => return None,
        })
    }
}

fn col2(a: f64, b: f64) -> TransferMatrix {
    TransferMatrix::constant(linalg::from_real_rows(2, 1, &[a, b]))
}

fn row2(a: f64, b: f64) -> TransferMatrix {
    TransferMatrix::constant(linalg::from_real_rows(1, 2, &[a, b]))
}

fn mat2(m: [[f64; 2]; 2]) -> TransferMatrix {
    TransferMatrix::constant(linalg::from_real_rows(2, 2, &[m[0][0], m[0][1], m[1][0], m[1][1]]))
}

/// Small-signal power matrices: `[ΔP; ΔQ] = U_pq Δi + I_pq Δu`.
pub fn power_linearization(op: &OperatingPoint) -> ([[f64; 2]; 2], [[f64; 2]; 2]) {
    let [ud, uq] = op.u_g;
    let [id, iq] = op.i_g;
    (
        [[1.5 * ud, 1.5 * uq], [1.5 * uq, -1.5 * ud]],
        [[1.5 * id, 1.5 * iq], [-1.5 * iq, 1.5 * id]],
    )
}

/// Build the four-port EIM. Inner eliminations (`Δu_c`, `Δi*`) are carried
/// out numerically at each evaluation point through a single 2×2 inversion.
pub fn build_eim(spec: &ConverterSpec, op: &OperatingPoint) -> Result<FourPortEim> {
    spec.validate()?;
    if op.invariant_residual() > 1e-6 {
        return Err(Error::InvalidSpec(format!(
            "{}: operating point violates u_c = m v_dc or power balance",
            spec.name
        )));
    }
    let w1 = spec.omega1;
    let v0 = op.v_dc0;
    let [ud, uq] = op.u_g;
    let [id, iq] = op.i_g;
    let [md, mq] = op.m;

    let inv_s = TransferMatrix::integrator();
    let f_i = inv_s.times(&col2(iq, -id))?;
    let f_u = inv_s.times(&col2(uq, -ud))?;
    let f_m = inv_s.times(&col2(mq, -md))?;
    let delay = TransferMatrix::delay(spec.delay);
    let hcc = spec.current.transfer().times(&TransferMatrix::identity(2))?;
    let kd = mat2(spec.decoupling_matrix());
    let zf = dq_rl(spec.r_f, spec.l_f, w1);
    let z22 = TransferMatrix::zeros(2, 2);
    let z21 = TransferMatrix::zeros(2, 1);

    // Current reference Δi* = P Δi + Qω Δω + Qu Δu + Qv Δv (controller frame).
    let (p_i, q_w, q_u, q_v) = match &spec.control {
        Control::Gfl {
            dc_voltage,
            power,
            channel,
            ..
        } => {
            let (upq, ipq) = power_linearization(op);
            let row = match channel {
                PowerChannel::Active => 0,
                PowerChannel::Reactive => 1,
            };
            let sel_q = col2(0.0, 1.0).mul(&power.transfer())?;
            let p_i = sel_q.mul(&row2(upq[row][0], upq[row][1]))?;
            let q_u = sel_q.mul(&row2(ipq[row][0], ipq[row][1]))?;
            let q_v = col2(-1.0, 0.0).mul(&dc_voltage.transfer())?;
            (p_i, z21.clone(), q_u, q_v)
        }
        Control::Gfm { r_v, l_v, .. } => {
            let yvir = dq_rl(*r_v, *l_v, w1).inv()?;
            let q_w = yvir.mul(&f_u)?;
            (z22.clone(), q_w, yvir, z21.clone())
        }
    };

    // Δu - Z_f Δi = V0 Δm + m0 Δv with
    // V0 Δm = -V0 f_m Δω - D [Hcc Δi* + (K_d - Hcc)(Δi + f_i Δω)].
    let kd_m_hcc = kd.sub(&hcc)?;
    let g = zf.neg().add(&delay.times(&hcc.mul(&p_i)?.add(&kd_m_hcc)?)?)?;
    let b_w = f_m
        .scale_real(-v0)
        .sub(&delay.times(&hcc.mul(&q_w)?)?)?
        .sub(&delay.times(&kd_m_hcc.mul(&f_i)?)?)?;
    let b_u = TransferMatrix::identity(2).neg().sub(&delay.times(&hcc.mul(&q_u)?)?)?;
    let b_v = col2(md, mq).sub(&delay.times(&hcc.mul(&q_v)?)?)?;
    let rhs = TransferMatrix::hcat(&[b_w, b_u, b_v])?;
    // Δi as a 2×4 map of (Δω, Δu_d, Δu_q, Δv_dc).
    let yi = g.inv()?.mul(&rhs)?;

    // Δu_c = Δu - Z_f Δi
    let sel_u = TransferMatrix::constant(linalg::from_real_rows(2, 4, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
    let uc = sel_u.sub(&zf.mul(&yi)?)?;
    // Power balance: current delivered into the dc node, negated for the
    // network-into-converter convention of the dc port.
    let [ucd, ucq] = op.u_c;
    let k1 = row2(1.5 * ucd / v0, 1.5 * ucq / v0);
    let k2 = row2(1.5 * id / v0, 1.5 * iq / v0);
    let k3 = TransferMatrix::constant(linalg::from_real_rows(1, 4, &[0.0, 0.0, 0.0, op.i_dc0 / v0]));
    let dc_row = k1.mul(&yi)?.add(&k2.mul(&uc)?)?.sub(&k3)?.neg();

    let z_sync_fo = spec.sync_forward();
    let kind = spec.kind();
    let zero = TransferMatrix::zeros(1, 1);
    let (sync_row, k_sync_dc) = match kind {
        ConverterKind::Gfl => {
            // ΔP_sync = Δu^c_q = Δu_q - (U_d0/s) Δω ; no dc dependence.
            let row = TransferMatrix::hcat(&[f_u.entry(1, 0)?, zero.clone(), TransferMatrix::real(1.0), zero.clone()])?;
            (row, zero.clone())
        }
        ConverterKind::Gfm => {
            // ΔP_sync = -ΔP_g (injected) = 1.5 (U0·Δi + I0·Δu).
            let row = row2(1.5 * ud, 1.5 * uq)
                .mul(&yi)?
                .add(&TransferMatrix::constant(linalg::from_real_rows(
                    1,
                    4,
                    &[0.0, 1.5 * id, 1.5 * iq, 0.0],
                )))?;
            let kdc = row.entry(0, 3)?;
            (row, kdc)
        }
    };

    let y = TransferMatrix::vcat(&[sync_row.clone(), yi.clone(), dc_row.clone()])?;
    Ok(FourPortEim {
        kind,
        y_sync_fe: sync_row.entry(0, 0)?,
        k_sync_ac: sync_row.submatrix(0, 1, 1, 2)?,
        k_sync_dc,
        c: yi.submatrix(0, 0, 2, 1)?,
        y_ac: yi.submatrix(0, 1, 2, 2)?,
        a: yi.submatrix(0, 3, 2, 1)?,
        d: dc_row.entry(0, 0)?,
        b: dc_row.submatrix(0, 1, 1, 2)?,
        y_dc: dc_row.entry(0, 3)?,
        y,
        z_sync_fo,
    })
}

/// `a_z = (1/√2)[1, j; 1, -j]`.
pub fn a_z() -> CMat {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    CMat::from_row_slice(
        2,
        2,
        &[
            Complex64::new(h, 0.0),
            Complex64::new(0.0, h),
            Complex64::new(h, 0.0),
            Complex64::new(0.0, -h),
        ],
    )
}

/// `A_Z = blkdiag(a_z, I)` sized for an `n`-port matrix whose first two
/// ports are `(ac-d, ac-q)`.
pub fn a_z_full(n: usize) -> CMat {
    let mut m = CMat::identity(n, n);
    m.view_mut((0, 0), (2, 2)).copy_from(&a_z());
    m
}

/// `A_Z · y · A_Z^{-1}` for a matrix in measurement order
/// `(ac-d, ac-q, dc, sync)`.
pub fn dq_to_modified_sequence(y4: &CMat) -> CMat {
    let az = a_z_full(y4.nrows());
    let az_inv = az.adjoint();
    &az * y4 * az_inv
}

/// Inverse of [`dq_to_modified_sequence`].
pub fn modified_sequence_to_dq(y4: &CMat) -> CMat {
    let az = a_z_full(y4.nrows());
    az.adjoint() * y4 * az
}

/// Reorder canonical `(sync, d, q, dc)` into measurement `(d, q, dc, sync)`.
pub fn canonical_to_measurement(y: &CMat) -> CMat {
    permute(y, &[1, 2, 3, 0])
}

/// Reorder measurement `(d, q, dc, sync)` into canonical `(sync, d, q, dc)`.
pub fn measurement_to_canonical(y: &CMat) -> CMat {
    permute(y, &[3, 0, 1, 2])
}

/// `out[i][j] = y[order[i]][order[j]]`.
pub fn permute(y: &CMat, order: &[usize]) -> CMat {
    let n = order.len();
    CMat::from_fn(n, n, |i, j| y[(order[i], order[j])])
}

/// Three-port (d, q, dc) admittance with the sync port closed through
/// `Δω = Z_sync_fo ΔP_sync`.
pub fn close_sync_port(y4: &CMat, z_fo: Complex64) -> CMat {
    let denom = C1 - z_fo * y4[(0, 0)];
    CMat::from_fn(3, 3, |i, j| {
        let (r, c) = (i + 1, j + 1);
        y4[(r, c)] + y4[(r, 0)] * z_fo * y4[(0, c)] / denom
    })
}
