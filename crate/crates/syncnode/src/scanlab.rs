//! Time-domain oracles: a nonlinear averaged model of converters, grids and
//! dc networks, fixed-step RK4 simulation, perturbation-injection frequency
//! scanning and numerical state-space linearization.
//!
//! The model is written directly from the circuit and control equations and
//! shares no code with the frequency-domain EIM; only the operating point is
//! common. The computation delay is a Padé approximant.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::converter::{
    self, measurement_to_canonical, modified_sequence_to_dq, Control, ConverterKind, ConverterSpec, OperatingPoint,
    PowerChannel,
};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::system::{Equilibrium, SystemSpec};

/// Padé approximant of `e^{-sT}`, realized in controllable canonical form in
/// normalized time `σ = sT` so that states stay on the scale of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Pade {
    pub delay: f64,
    /// Monic denominator coefficients `a_0..a_{n-1}` in σ.
    a: Vec<f64>,
    /// Numerator coefficients `b_0..b_n` in σ (same normalization).
    b: Vec<f64>,
}

impl Pade {
    pub fn new(delay: f64, order: usize) -> Self {
        let order = if delay > 0.0 { order } else { 0 };
        let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
        let n = order;
        let c: Vec<f64> = (0..=n)
            .map(|k| fact(2 * n - k) * fact(n) / (fact(2 * n) * fact(k) * fact(n - k)))
            .collect();
        let cn = c[n];
        let a = (0..n).map(|k| c[k] / cn).collect();
        let b = (0..=n)
            .map(|k| if k % 2 == 0 { c[k] / cn } else { -c[k] / cn })
            .collect();
        Self { delay, a, b }
    }

    pub fn order(&self) -> usize {
        self.a.len()
    }

    fn output(&self, w: &[f64], u: f64) -> f64 {
        let n = self.order();
        if n == 0 {
            return u;
        }
        let bn = self.b[n];
        (0..n).map(|i| (self.b[i] - bn * self.a[i]) * w[i]).sum::<f64>() + bn * u
    }

    fn deriv(&self, w: &[f64], u: f64, dw: &mut [f64]) {
        let n = self.order();
        if n == 0 {
            return;
        }
        for i in 0..n - 1 {
            dw[i] = w[i + 1] / self.delay;
        }
        let acc: f64 = (0..n).map(|i| self.a[i] * w[i]).sum();
        dw[n - 1] = (u - acc) / self.delay;
    }

    fn steady(&self, u: f64, w: &mut [f64]) {
        if self.order() == 0 {
            return;
        }
        w.fill(0.0);
        w[0] = u / self.a[0];
    }

    /// Frequency response of the approximant.
    pub fn response(&self, s: Complex64) -> Complex64 {
        let n = self.order();
        if n == 0 {
            return Complex64::new(1.0, 0.0);
        }
        let sigma = s * self.delay;
        let poly = |c: &[f64]| c.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &k| acc * sigma + k);
        let mut den = self.a.clone();
        den.push(1.0);
        poly(&self.b) / poly(&den)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AcTerminal {
    /// Ideal voltage source at the PoC.
    Stiff { u: [f64; 2] },
    /// Ideal source `e` behind a series `R + sL`.
    Thevenin { e: [f64; 2], r: f64, l: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DcTerminal {
    Stiff {
        v: f64,
    },
    /// Index into [`SimModel::dc_nodes`].
    Node(usize),
}

/// Series voltage on the ac terminal (dq, V), series voltage on the dc
/// terminal (V) and additive sync-port perturbation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Drive {
    pub ac: [f64; 2],
    pub dc: f64,
    pub sync: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectionPort {
    /// Three-phase series voltage at `f_inj + f1`, positive sequence.
    AcPositive,
    /// Three-phase series voltage at `f_inj - f1`, negative sequence.
    AcNegative,
    Dc,
    Sync,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    pub converter: usize,
    pub port: InjectionPort,
    pub amplitude: f64,
    pub f_hz: f64,
}

impl Injection {
    /// Drive contribution at time `t` in the system dq frame.
    pub fn drive(&self, t: f64, omega1: f64) -> Drive {
        let w = 2.0 * PI * self.f_hz;
        let a = self.amplitude;
        match self.port {
            InjectionPort::AcPositive | InjectionPort::AcNegative => {
                let (wa, sh) = match self.port {
                    InjectionPort::AcPositive => (w + omega1, -2.0 * PI / 3.0),
                    _ => (w - omega1, 2.0 * PI / 3.0),
                };
                let abc = [a * (wa * t).sin(), a * (wa * t + sh).sin(), a * (wa * t - sh).sin()];
                Drive {
                    ac: park(abc, omega1 * t),
                    ..Drive::default()
                }
            }
            InjectionPort::Dc => Drive {
                dc: a * (w * t).sin(),
                ..Drive::default()
            },
            InjectionPort::Sync => Drive {
                sync: a * (w * t).sin(),
                ..Drive::default()
            },
        }
    }
}

/// Amplitude-invariant Park transform `x_d + j x_q = (2/3) e^{-jθ}(x_a + α x_b + α² x_c)`.
pub fn park(abc: [f64; 3], theta: f64) -> [f64; 2] {
    let alpha = Complex64::from_polar(1.0, 2.0 * PI / 3.0);
    let v = (abc[0] + alpha * abc[1] + alpha * alpha * abc[2]) * Complex64::from_polar(2.0 / 3.0, -theta);
    [v.re, v.im]
}

/// Port quantities of one converter at one instant.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Measurement {
    /// PoC voltage (system frame).
    pub u: [f64; 2],
    /// PoC current into the converter.
    pub i: [f64; 2],
    /// Dc voltage at the converter terminal.
    pub v_dc: f64,
    /// Dc current into the converter.
    pub i_dc: f64,
    /// Sync-port signal produced by the converter (without injection),
    /// as a deviation from its equilibrium value.
    pub p_sync: f64,
    /// Sync-frame frequency deviation (rad/s).
    pub omega: f64,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    i: usize,
    theta: usize,
    sync: usize,
    istar: usize,
    cc: usize,
    pade: usize,
    outer: usize,
    len: usize,
}

impl Layout {
    fn new(offset: usize, kind: ConverterKind, pade_order: usize) -> Self {
        let i = offset;
        let theta = i + 2;
        let sync = theta + 1;
        let istar = sync + 1;
        let cc = if kind == ConverterKind::Gfm { istar + 2 } else { istar };
        let pade = cc + 2;
        let outer = pade + 2 * pade_order;
        let end = if kind == ConverterKind::Gfl { outer + 2 } else { outer };
        Self {
            i,
            theta,
            sync,
            istar,
            cc,
            pade,
            outer,
            len: end - offset,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConverterModel {
    pub spec: ConverterSpec,
    pub op: OperatingPoint,
    pub ac: AcTerminal,
    pub dc: DcTerminal,
    pade: Pade,
    layout: Layout,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcNodeModel {
    pub id: usize,
    pub c: f64,
    pub state: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcLineModel {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub l: f64,
    pub state: usize,
}

/// Nonlinear averaged model with an immutable parameter bundle. The RHS is a
/// pure function of `(t, x, drives)`.
#[derive(Debug, Clone)]
pub struct SimModel {
    pub omega1: f64,
    pub converters: Vec<ConverterModel>,
    pub dc_nodes: Vec<DcNodeModel>,
    pub dc_lines: Vec<DcLineModel>,
    x0: Vec<f64>,
    scales: Vec<f64>,
    names: Vec<String>,
}

fn rot(theta: f64, x: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * x[0] + s * x[1], -s * x[0] + c * x[1]]
}

fn rot_inv(theta: f64, x: [f64; 2]) -> [f64; 2] {
    rot(-theta, x)
}

fn jmul(x: [f64; 2]) -> [f64; 2] {
    [-x[1], x[0]]
}

fn power_channel(channel: PowerChannel, u: [f64; 2], i: [f64; 2]) -> f64 {
    match channel {
        PowerChannel::Active => converter::active_power(u, i),
        PowerChannel::Reactive => converter::reactive_power(u, i),
    }
}

struct Terminal {
    u: [f64; 2],
    di: [f64; 2],
    u_cmd: [f64; 2],
    m: [f64; 2],
}

impl SimModel {
    /// Converter between an ideal ac source at its PoC voltage and an ideal
    /// dc source at its dc voltage.
    pub fn single(spec: &ConverterSpec, op: &OperatingPoint, pade_order: usize) -> Result<Self> {
        Self::assemble(
            op.omega1,
            vec![(
                spec.clone(),
                *op,
                AcTerminal::Stiff { u: op.u_g },
                DcTerminal::Stiff { v: op.v_dc0 },
            )],
            vec![],
            vec![],
            pade_order,
        )
    }

    /// Converter fed through `r + sL` from an ideal ac source holding its
    /// operating point, with an ideal dc source.
    pub fn behind(spec: &ConverterSpec, op: &OperatingPoint, r: f64, l: f64, pade_order: usize) -> Result<Self> {
        let x = op.omega1 * l;
        let e = [
            op.u_g[0] + r * op.i_g[0] - x * op.i_g[1],
            op.u_g[1] + r * op.i_g[1] + x * op.i_g[0],
        ];
        Self::assemble(
            op.omega1,
            vec![(
                spec.clone(),
                *op,
                AcTerminal::Thevenin { e, r, l },
                DcTerminal::Stiff { v: op.v_dc0 },
            )],
            vec![],
            vec![],
            pade_order,
        )
    }

    /// Whole-system model at its equilibrium.
    pub fn from_system(sys: &SystemSpec, eq: &Equilibrium, pade_order: usize) -> Result<Self> {
        let mut dc_ids: Vec<(usize, f64, f64, f64)> = Vec::new();
        for net in &sys.dc_networks {
            for id in net.nodes() {
                let c: f64 = net.capacitors.iter().filter(|c| c.0 == id).map(|c| c.1).sum();
                if c <= 0.0 {
                    return Err(Error::InvalidSimulation(format!(
                        "dc node {id} needs a capacitor in the time-domain model"
                    )));
                }
                let owner = sys
                    .converters
                    .iter()
                    .find(|k| net.nodes().contains(&k.dc_node))
                    .unwrap();
                dc_ids.push((id, c, owner.spec.bases.v_dc, owner.spec.bases.i_dc));
            }
        }
        let dc_index = |id: usize| dc_ids.iter().position(|d| d.0 == id).unwrap();
        let mut convs = Vec::new();
        for (k, c) in sys.converters.iter().enumerate() {
            let g = sys.grid_of(c.ac_node).unwrap();
            convs.push((
                c.spec.clone(),
                eq.ops[k],
                AcTerminal::Thevenin {
                    e: eq.grid_emf[k],
                    r: g.r,
                    l: g.l,
                },
                DcTerminal::Node(dc_index(c.dc_node)),
            ));
        }
        let mut lines = Vec::new();
        for (n, net) in sys.dc_networks.iter().enumerate() {
            for (j, l) in net.lines.iter().enumerate() {
                lines.push((dc_index(l.from), dc_index(l.to), l.r, l.l, eq.line_current[n][j]));
            }
        }
        let nodes: Vec<(usize, f64, f64, f64, f64)> = dc_ids
            .iter()
            .map(|&(id, c, vb, ib)| (id, c, eq.dc_voltage[&id], vb, ib))
            .collect();
        Self::assemble(sys.omega1, convs, nodes, lines, pade_order)
    }

    fn assemble(
        omega1: f64,
        convs: Vec<(ConverterSpec, OperatingPoint, AcTerminal, DcTerminal)>,
        nodes: Vec<(usize, f64, f64, f64, f64)>,
        lines: Vec<(usize, usize, f64, f64, f64)>,
        pade_order: usize,
    ) -> Result<Self> {
        let mut offset = 0;
        let mut converters = Vec::new();
        let mut x0 = Vec::new();
        let mut scales = Vec::new();
        let mut names = Vec::new();
        for (spec, op, ac, dc) in convs {
            spec.validate()?;
            let pade = Pade::new(spec.delay, pade_order);
            let layout = Layout::new(offset, spec.kind(), pade.order());
            offset += layout.len;
            let b = spec.bases;
            let n = &spec.name;
            let mut push = |name: String, v: f64, scale: f64| {
                names.push(name);
                x0.push(v);
                scales.push(scale);
            };
            push(format!("{n}.i_d"), op.i_g[0], b.i_ac);
            push(format!("{n}.i_q"), op.i_g[1], b.i_ac);
            push(format!("{n}.theta"), 0.0, 1.0);
            match spec.kind() {
                ConverterKind::Gfl => push(format!("{n}.pll"), 0.0, b.omega),
                ConverterKind::Gfm => {
                    push(format!("{n}.omega"), 0.0, 1.0);
                    push(format!("{n}.iref_d"), op.i_g[0], b.i_ac);
                    push(format!("{n}.iref_q"), op.i_g[1], b.i_ac);
                }
            }
            let kd = spec.decoupling_matrix();
            let kdi = [
                kd[0][0] * op.i_g[0] + kd[0][1] * op.i_g[1],
                kd[1][0] * op.i_g[0] + kd[1][1] * op.i_g[1],
            ];
            push(format!("{n}.cc_d"), -op.u_c[0] - kdi[0], b.v_ac);
            push(format!("{n}.cc_q"), -op.u_c[1] - kdi[1], b.v_ac);
            let mut w = vec![0.0; pade.order()];
            for (axis, uc) in ["d", "q"].iter().zip(op.u_c) {
                pade.steady(uc, &mut w);
                for (j, wj) in w.iter().enumerate() {
                    push(format!("{n}.delay_{axis}{j}"), *wj, b.v_ac);
                }
            }
            if spec.kind() == ConverterKind::Gfl {
                push(format!("{n}.vdc_pi"), -op.i_g[0], b.i_ac);
                push(format!("{n}.power_pi"), op.i_g[1], b.i_ac);
            }
            converters.push(ConverterModel {
                spec,
                op,
                ac,
                dc,
                pade,
                layout,
            });
        }
        let mut dc_nodes = Vec::new();
        for (id, c, v, vb, _) in &nodes {
            dc_nodes.push(DcNodeModel {
                id: *id,
                c: *c,
                state: x0.len(),
            });
            names.push(format!("dc{id}.v"));
            x0.push(*v);
            scales.push(*vb);
        }
        let mut dc_lines = Vec::new();
        for (from, to, r, l, i0) in lines {
            dc_lines.push(DcLineModel {
                from,
                to,
                r,
                l,
                state: x0.len(),
            });
            names.push(format!("line{}_{}.i", nodes[from].0, nodes[to].0));
            x0.push(i0);
            scales.push(nodes[from].4);
        }
        Ok(Self {
            omega1,
            converters,
            dc_nodes,
            dc_lines,
            x0,
            scales,
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    /// Equilibrium state built from the operating points.
    pub fn equilibrium(&self) -> &[f64] {
        &self.x0
    }

    /// Natural magnitude of each state, used for blowup bounds and
    /// finite-difference scaling.
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn state_names(&self) -> &[String] {
        &self.names
    }

    fn terminal(&self, c: &ConverterModel, x: &[f64], v: f64, drive: &Drive, i_star: [f64; 2]) -> Terminal {
        let l = c.layout;
        let s = &c.spec;
        let i = [x[l.i], x[l.i + 1]];
        let theta = x[l.theta];
        let ic = rot(theta, i);
        let kd = s.decoupling_matrix();
        let (kp, _) = (s.current.kp, s.current.ki);
        let mut u_cmd = [0.0; 2];
        for a in 0..2 {
            u_cmd[a] = -kp * (i_star[a] - ic[a]) - x[l.cc + a] - (kd[a][0] * ic[0] + kd[a][1] * ic[1]);
        }
        let n = c.pade.order();
        let y = [
            c.pade.output(&x[l.pade..l.pade + n], u_cmd[0]),
            c.pade.output(&x[l.pade + n..l.pade + 2 * n], u_cmd[1]),
        ];
        let v0 = c.op.v_dc0;
        let m = rot_inv(theta, [y[0] / v0, y[1] / v0]);
        let uc = [m[0] * v, m[1] * v];
        let w1 = self.omega1;
        let (u, di) = match c.ac {
            AcTerminal::Stiff { u: us } => {
                let u = [us[0] + drive.ac[0], us[1] + drive.ac[1]];
                let ji = jmul(i);
                let di = [
                    (u[0] - uc[0] - s.r_f * i[0] - w1 * s.l_f * ji[0]) / s.l_f,
                    (u[1] - uc[1] - s.r_f * i[1] - w1 * s.l_f * ji[1]) / s.l_f,
                ];
                (u, di)
            }
            AcTerminal::Thevenin { e, r, l: lg } => {
                let lt = lg + s.l_f;
                let rt = r + s.r_f;
                let ji = jmul(i);
                let src = [e[0] + drive.ac[0], e[1] + drive.ac[1]];
                let di = [
                    (src[0] - uc[0] - rt * i[0] - w1 * lt * ji[0]) / lt,
                    (src[1] - uc[1] - rt * i[1] - w1 * lt * ji[1]) / lt,
                ];
                let u = [
                    src[0] - r * i[0] - w1 * lg * ji[0] - lg * di[0],
                    src[1] - r * i[1] - w1 * lg * ji[1] - lg * di[1],
                ];
                (u, di)
            }
        };
        Terminal { u, di, u_cmd, m }
    }

    fn converter_rhs(&self, c: &ConverterModel, x: &[f64], v_node: f64, drive: &Drive, dx: &mut [f64]) -> Measurement {
        let l = c.layout;
        let s = &c.spec;
        let op = &c.op;
        let sp = &op.setpoints;
        let i = [x[l.i], x[l.i + 1]];
        let theta = x[l.theta];
        let v = v_node + drive.dc;

        let i_star = match &s.control {
            Control::Gfm { .. } => [x[l.istar], x[l.istar + 1]],
            Control::Gfl {
                dc_voltage,
                power,
                channel,
                ..
            } => {
                let id_star = -dc_voltage.kp * (v - sp.v_dc_ref) - x[l.outer];
                // The q reference depends on the PoC voltage, which depends on
                // the modulation through the delay feedthrough: solve the
                // affine loop exactly.
                let resid = |iq: f64| {
                    let t = self.terminal(c, x, v, drive, [id_star, iq]);
                    power.kp * (power_channel(*channel, t.u, i) - sp.power_ref) + x[l.outer + 1] - iq
                };
                let g0 = resid(0.0);
                let g1 = resid(1.0);
                let slope = g1 - g0;
                let iq = if slope.abs() > 1e-12 { -g0 / slope } else { g0 };
                [id_star, iq]
            }
        };
        let t = self.terminal(c, x, v, drive, i_star);
        let u = t.u;
        let uc_frame = rot(theta, u);
        let ic = rot(theta, i);
        dx[l.i] = t.di[0];
        dx[l.i + 1] = t.di[1];

        let b = s.bases;
        let (omega, p_sync) = match &s.control {
            Control::Gfl { pll, .. } => {
                let e = uc_frame[1] + drive.sync;
                dx[l.sync] = pll.ki * e;
                (pll.kp * e + x[l.sync], uc_frame[1])
            }
            Control::Gfm {
                inertia,
                damping,
                r_v,
                l_v,
            } => {
                let w_pu = x[l.sync];
                let p = converter::active_power(u, i) - sp.p_ref;
                dx[l.sync] = ((p + drive.sync) / b.s - damping * w_pu) / inertia;
                let is = [x[l.istar], x[l.istar + 1]];
                let jis = jmul(is);
                let e = [sp.e_ref, 0.0];
                for a in 0..2 {
                    dx[l.istar + a] = (uc_frame[a] - e[a] - r_v * is[a] - self.omega1 * l_v * jis[a]) / l_v;
                }
                (w_pu * b.omega, p)
            }
        };
        dx[l.theta] = omega;
        for a in 0..2 {
            dx[l.cc + a] = s.current.ki * (i_star[a] - ic[a]);
        }
        let n = c.pade.order();
        for a in 0..2 {
            let r = l.pade + a * n..l.pade + (a + 1) * n;
            let (w, dw) = (&x[r.clone()], &mut dx[r]);
            c.pade.deriv(w, t.u_cmd[a], dw);
        }
        if let Control::Gfl {
            dc_voltage,
            power,
            channel,
            ..
        } = &s.control
        {
            dx[l.outer] = dc_voltage.ki * (v - sp.v_dc_ref);
            dx[l.outer + 1] = power.ki * (power_channel(*channel, u, i) - sp.power_ref);
        }
        let i_out = 1.5 * (t.m[0] * i[0] + t.m[1] * i[1]);
        Measurement {
            u,
            i,
            v_dc: v,
            i_dc: -i_out,
            p_sync,
            omega,
        }
    }

    /// State derivative and port measurements.
    pub fn rhs_into(&self, x: &[f64], drives: &[Drive], dx: &mut [f64], meas: &mut [Measurement]) {
        dx.fill(0.0);
        let mut node_current = vec![0.0; self.dc_nodes.len()];
        for (k, c) in self.converters.iter().enumerate() {
            let v_node = match c.dc {
                DcTerminal::Stiff { v } => v,
                DcTerminal::Node(j) => x[self.dc_nodes[j].state],
            };
            let m = self.converter_rhs(c, x, v_node, &drives[k], dx);
            if let DcTerminal::Node(j) = c.dc {
                node_current[j] -= m.i_dc;
            }
            meas[k] = m;
        }
        for line in &self.dc_lines {
            let i = x[line.state];
            let (va, vb) = (x[self.dc_nodes[line.from].state], x[self.dc_nodes[line.to].state]);
            dx[line.state] = (va - vb - line.r * i) / line.l;
            node_current[line.from] -= i;
            node_current[line.to] += i;
        }
        for (j, node) in self.dc_nodes.iter().enumerate() {
            dx[node.state] = node_current[j] / node.c;
        }
    }

    pub fn rhs(&self, x: &[f64], drives: &[Drive]) -> Vec<f64> {
        let mut dx = vec![0.0; self.len()];
        let mut meas = vec![Measurement::default(); self.converters.len()];
        self.rhs_into(x, drives, &mut dx, &mut meas);
        dx
    }

    pub fn measure(&self, x: &[f64], drives: &[Drive]) -> Vec<Measurement> {
        let mut dx = vec![0.0; self.len()];
        let mut meas = vec![Measurement::default(); self.converters.len()];
        self.rhs_into(x, drives, &mut dx, &mut meas);
        meas
    }

    /// Largest derivative relative to `scale · ω1`; zero at an exact equilibrium.
    pub fn equilibrium_residual(&self, x: &[f64]) -> f64 {
        let drives = vec![Drive::default(); self.converters.len()];
        self.rhs(x, &drives)
            .iter()
            .zip(&self.scales)
            .map(|(d, s)| d.abs() / (s * self.omega1))
            .fold(0.0, f64::max)
    }

    fn drives_at(&self, t: f64, inj: &[Injection], out: &mut [Drive]) {
        out.fill(Drive::default());
        for j in inj {
            let d = j.drive(t, self.omega1);
            let o = &mut out[j.converter];
            o.ac[0] += d.ac[0];
            o.ac[1] += d.ac[1];
            o.dc += d.dc;
            o.sync += d.sync;
        }
    }
}

/// Fixed-step classical Runge-Kutta for `dx/dt = f(t, x)`. The observer sees
/// every step `(n, t_n, x_n)` before it is advanced and may abort.
pub fn rk4<F, O>(f: F, x0: &[f64], t0: f64, dt: f64, steps: usize, mut observer: O) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64], &mut [f64]),
    O: FnMut(usize, f64, &[f64]) -> Result<()>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for step in 0..steps {
        let t = t0 + step as f64 * dt;
        observer(step, t, &x)?;
        f(t, &x, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        f(t + 0.5 * dt, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        f(t + 0.5 * dt, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + dt * k3[i];
        }
        f(t + dt, &tmp, &mut k4);
        for i in 0..n {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    observer(steps, t0 + steps as f64 * dt, &x)?;
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Initial state; the model equilibrium when `None`.
    pub x_init: Option<Vec<f64>>,
    /// Keep every n-th sample.
    pub record_every: usize,
    /// Blowup when any `|x - x0| > bound · scale`.
    pub blowup_bound: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            x_init: None,
            record_every: 1,
            blowup_bound: 5.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub meas: Vec<Vec<Measurement>>,
}

impl Trajectory {
    /// `t` plus one column per named state.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("t");
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (t, x) in self.t.iter().zip(&self.x) {
            out.push_str(&format!("{t:.9e}"));
            for v in x {
                out.push_str(&format!(",{v:.12e}"));
            }
            out.push('\n');
        }
        out
    }
}

fn check_blowup(model: &SimModel, t: f64, x: &[f64], bound: f64) -> Result<()> {
    for (i, ((v, v0), s)) in x.iter().zip(&model.x0).zip(&model.scales).enumerate() {
        if !v.is_finite() || (v - v0).abs() > bound * s {
            return Err(Error::NumericalBlowup { t, index: i, value: *v });
        }
    }
    Ok(())
}

/// Fixed-step RK4 trajectories of all states and port measurements.
pub fn simulate(
    model: &SimModel,
    injections: &[Injection],
    t_end: f64,
    dt: f64,
    opts: &SimOptions,
) -> Result<Trajectory> {
    if !(dt > 0.0 && t_end > 0.0 && t_end >= dt) {
        return Err(Error::InvalidSimulation("need 0 < dt ≤ t_end".into()));
    }
    if let Some(j) = injections.iter().find(|j| j.converter >= model.converters.len()) {
        return Err(Error::InvalidSimulation(format!(
            "injection targets converter {}",
            j.converter
        )));
    }
    let f_max = injections
        .iter()
        .map(|j| match j.port {
            InjectionPort::AcPositive | InjectionPort::AcNegative => j.f_hz.abs() + model.omega1 / (2.0 * PI),
            _ => j.f_hz.abs(),
        })
        .fold(0.0, f64::max);
    if f_max > 0.0 && dt > 1.0 / (50.0 * f_max) {
        return Err(Error::InvalidSimulation(format!(
            "dt = {dt:e} s resolves fewer than 50 samples per period at {f_max} Hz"
        )));
    }
    let x0 = opts.x_init.clone().unwrap_or_else(|| model.x0.clone());
    if x0.len() != model.len() {
        return Err(Error::InvalidSimulation("initial state has the wrong length".into()));
    }
    let steps = (t_end / dt).round() as usize;
    let every = opts.record_every.max(1);
    let nc = model.converters.len();
    let drives = std::cell::RefCell::new(vec![Drive::default(); nc]);
    let meas = std::cell::RefCell::new(vec![Measurement::default(); nc]);
    let mut traj = Trajectory::default();
    rk4(
        |t, x, dx| {
            let mut d = drives.borrow_mut();
            model.drives_at(t, injections, &mut d);
            model.rhs_into(x, &d, dx, &mut meas.borrow_mut());
        },
        &x0,
        0.0,
        dt,
        steps,
        |n, t, x| {
            check_blowup(model, t, x, opts.blowup_bound)?;
            if n % every == 0 {
                let mut d = vec![Drive::default(); nc];
                model.drives_at(t, injections, &mut d);
                traj.t.push(t);
                traj.x.push(x.to_vec());
                traj.meas.push(model.measure(x, &d));
            }
            Ok(())
        },
    )?;
    Ok(traj)
}

/// State matrix and eigenvalues of the linearized model.
#[derive(Debug, Clone)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    /// Largest real part first.
    pub eigenvalues: Vec<Complex64>,
}

impl StateSpace {
    pub fn unstable(&self) -> Vec<Complex64> {
        self.eigenvalues.iter().copied().filter(|l| l.re > 0.0).collect()
    }
}

/// Central finite-difference Jacobian of the RHS at the equilibrium.
pub fn linearize_ss(model: &SimModel) -> Result<StateSpace> {
    let x0 = &model.x0;
    let res = model.equilibrium_residual(x0);
    if res > 1e-6 {
        return Err(Error::NoEquilibrium { residual: res });
    }
    let drives = vec![Drive::default(); model.converters.len()];
    let n = model.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut x = x0.clone();
    for j in 0..n {
        let h = (1e-6 * x0[j].abs()).max(1e-8);
        x[j] = x0[j] + h;
        let fp = model.rhs(&x, &drives);
        x[j] = x0[j] - h;
        let fm = model.rhs(&x, &drives);
        x[j] = x0[j];
        for i in 0..n {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let mut eigenvalues = real_eigenvalues(&a)?;
    eigenvalues.sort_by(|p, q| q.re.total_cmp(&p.re).then(q.im.total_cmp(&p.im)));
    Ok(StateSpace { a, eigenvalues })
}

fn real_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let c = a.map(|v| Complex64::new(v, 0.0));
    linalg::eigenvalues(&c)
}

/// Linearized response of the states to the four drive channels
/// `(ac_d, ac_q, dc, sync)` of converter `k`: `B` of `dx/dt = A δx + B d`.
fn drive_matrix(model: &SimModel, k: usize) -> DMatrix<f64> {
    let n = model.len();
    let nc = model.converters.len();
    let mut b = DMatrix::<f64>::zeros(n, 4);
    let s = model.converters[k].spec.bases;
    let steps = [s.v_ac * 1e-6, s.v_ac * 1e-6, s.v_dc * 1e-6, 1e-6 * s.s.max(s.v_ac)];
    for (ch, &h) in steps.iter().enumerate() {
        let mut dp = vec![Drive::default(); nc];
        let mut dm = vec![Drive::default(); nc];
        let set = |d: &mut Drive, v: f64| match ch {
            0 => d.ac[0] = v,
            1 => d.ac[1] = v,
            2 => d.dc = v,
            _ => d.sync = v,
        };
        set(&mut dp[k], h);
        set(&mut dm[k], -h);
        let fp = model.rhs(&model.x0, &dp);
        let fm = model.rhs(&model.x0, &dm);
        for i in 0..n {
            b[(i, ch)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    b
}

/// Steady sinusoidal state of the linearized model for a drive phasor
/// `d(t) = Re(D e^{jωt})`, used to start scans near their periodic regime.
fn periodic_start(model: &SimModel, ss: &StateSpace, b: &DMatrix<f64>, d: [Complex64; 4], w: f64) -> Result<Vec<f64>> {
    let n = model.len();
    let a = ss.a.map(|v| Complex64::new(v, 0.0));
    let m = CMat::identity(n, n) * Complex64::new(0.0, w) - a;
    let bd = b.map(|v| Complex64::new(v, 0.0)) * linalg::CVec::from_column_slice(&d);
    let xhat = m.lu().solve(&bd).ok_or(Error::SingularAtS {
        s: Complex64::new(0.0, w),
        cond: f64::INFINITY,
    })?;
    Ok(model.x0.iter().zip(xhat.iter()).map(|(x0, xh)| x0 + xh.re).collect())
}

/// Single-bin DFT accumulator over an integer number of periods.
#[derive(Debug, Clone, Copy)]
struct Bin {
    acc: Complex64,
    n: usize,
}

impl Bin {
    fn new() -> Self {
        Self {
            acc: Complex64::new(0.0, 0.0),
            n: 0,
        }
    }

    fn push(&mut self, x: f64, phase: Complex64) {
        self.acc += phase * x;
        self.n += 1;
    }

    /// Complex amplitude `X` with `x(t) ≈ Re(X e^{jωt})`.
    fn phasor(&self) -> Complex64 {
        self.acc * (2.0 / self.n as f64)
    }
}

/// Single-bin DFT of uniformly sampled `x` at `f_hz`.
pub fn dft_bin(x: &[f64], dt: f64, f_hz: f64) -> Complex64 {
    let w = 2.0 * PI * f_hz;
    let acc: Complex64 = x
        .iter()
        .enumerate()
        .map(|(n, v)| Complex64::from_polar(*v, -w * n as f64 * dt))
        .sum();
    acc * (2.0 / x.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    /// Injection amplitudes as fractions of the ac voltage, dc voltage and
    /// sync-port current bases.
    pub ac_fraction: f64,
    pub dc_fraction: f64,
    pub sync_fraction: f64,
    pub dt_max: f64,
    pub min_periods: usize,
    pub cond_cap: f64,
    pub pade_order: usize,
    /// Series `(R, L)` between the rig's ac source and the converter PoC.
    /// `None` is a stiff source.
    pub rig: Option<(f64, f64)>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            ac_fraction: 1e-3,
            dc_fraction: 1e-3,
            sync_fraction: 1e-3,
            dt_max: 2e-5,
            min_periods: 10,
            cond_cap: 1e6,
            pade_order: 2,
            rig: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DftWindow {
    pub settle: f64,
    pub window: f64,
    pub periods: usize,
    pub dt: f64,
}

#[derive(Debug, Clone)]
pub struct ScanPoint {
    pub f_hz: f64,
    /// Measured admittance in the modified sequence domain, port order
    /// `(p, n, dc, sync)`.
    pub y_pn: CMat,
    /// The same in the dq domain, canonical order `(sync, d, q, dc)`.
    pub y_dq: CMat,
    /// Condition number of the per-unit excitation matrix.
    pub cond: f64,
    pub window: DftWindow,
}

#[derive(Debug, Clone)]
pub struct ScanResult {
    pub points: Vec<ScanPoint>,
    /// `(ac, dc, sync)` injection amplitudes in physical units.
    pub amplitudes: [f64; 3],
}

const CANONICAL: [&str; 4] = ["sync", "d", "q", "dc"];

impl ScanResult {
    /// `f_hz` plus the 16 dq-domain entries as re/im column pairs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("f_hz");
        for r in CANONICAL {
            for c in CANONICAL {
                out.push_str(&format!(",Y_{r}_{c}_re,Y_{r}_{c}_im"));
            }
        }
        out.push('\n');
        for p in &self.points {
            out.push_str(&format!("{:.9e}", p.f_hz));
            for r in 0..4 {
                for c in 0..4 {
                    let v = p.y_dq[(r, c)];
                    out.push_str(&format!(",{:.9e},{:.9e}", v.re, v.im));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn pn(xd: Complex64, xq: Complex64) -> (Complex64, Complex64) {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let j = Complex64::new(0.0, 1.0);
    ((xd + j * xq) * h, (xd - j * xq) * h)
}

fn svd_cond(m: &CMat) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Sync-port current base: `V_b_ac` for a PLL, `S_b` for a VSG.
pub fn sync_current_base(spec: &ConverterSpec) -> f64 {
    crate::ein::sync_bases(spec).0
}

/// Measure the four-port admittance of a converter between ideal sources
/// with four independent injection experiments per frequency.
pub fn scan_eim(spec: &ConverterSpec, op: &OperatingPoint, f_grid: &[f64], opts: &ScanOptions) -> Result<ScanResult> {
    if f_grid.is_empty() || f_grid.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::InvalidGrid("scan frequencies must be positive".into()));
    }
    let b = spec.bases;
    let amps = [
        opts.ac_fraction * b.v_ac,
        opts.dc_fraction * b.v_dc,
        opts.sync_fraction * sync_current_base(spec),
    ];
    if amps.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::AmplitudeZero);
    }
    let model = match opts.rig {
        Some((r, l)) => SimModel::behind(spec, op, r, l, opts.pade_order)?,
        None => SimModel::single(spec, op, opts.pade_order)?,
    };
    let ss = linearize_ss(&model)?;
    let bmat = drive_matrix(&model, 0);
    let points = map_grid(f_grid, |f| scan_point(&model, &ss, &bmat, f, amps, opts))?;
    Ok(ScanResult {
        points,
        amplitudes: amps,
    })
}

#[cfg(feature = "parallel")]
fn map_grid<T: Send>(grid: &[f64], f: impl Fn(f64) -> Result<T> + Sync) -> Result<Vec<T>> {
    use rayon::prelude::*;
    grid.par_iter().map(|&x| f(x)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_grid<T>(grid: &[f64], f: impl Fn(f64) -> Result<T>) -> Result<Vec<T>> {
    grid.iter().map(|&x| f(x)).collect()
}

fn scan_point(
    model: &SimModel,
    ss: &StateSpace,
    bmat: &DMatrix<f64>,
    f: f64,
    amps: [f64; 3],
    opts: &ScanOptions,
) -> Result<ScanPoint> {
    let f1 = model.omega1 / (2.0 * PI);
    let periods = opts.min_periods.max(1);
    let window = periods as f64 / f;
    let settle_target = (10.0 / f1).max(5.0 / f);
    // Keep RK4 inside its stability region for the stiffest mode.
    let rho = ss.eigenvalues.iter().map(|l| l.norm()).fold(0.0, f64::max);
    let dt_target = opts.dt_max.min(1.0 / (50.0 * (f + f1))).min(2.0 / rho.max(1e-12));
    let n_window = (window / dt_target).ceil() as usize;
    let dt = window / n_window as f64;
    let n_settle = (settle_target / dt).ceil() as usize;
    let w = 2.0 * PI * f;
    let j = Complex64::new(0.0, 1.0);

    let ports = [
        InjectionPort::AcPositive,
        InjectionPort::AcNegative,
        InjectionPort::Dc,
        InjectionPort::Sync,
    ];
    let mut imat = CMat::zeros(4, 4);
    let mut vmat = CMat::zeros(4, 4);
    for (col, port) in ports.iter().enumerate() {
        let amplitude = match port {
            InjectionPort::AcPositive | InjectionPort::AcNegative => amps[0],
            InjectionPort::Dc => amps[1],
            InjectionPort::Sync => amps[2],
        };
        let inj = [Injection {
            converter: 0,
            port: *port,
            amplitude,
            f_hz: f,
        }];
        // Drive phasor of the injection (x(t) = Re(D e^{jωt})).
        let d = match port {
            InjectionPort::AcPositive => [-j * amplitude, Complex64::new(-amplitude, 0.0), 0.0.into(), 0.0.into()],
            InjectionPort::AcNegative => [-j * amplitude, Complex64::new(amplitude, 0.0), 0.0.into(), 0.0.into()],
            InjectionPort::Dc => [0.0.into(), 0.0.into(), -j * amplitude, 0.0.into()],
            InjectionPort::Sync => [0.0.into(), 0.0.into(), 0.0.into(), -j * amplitude],
        };
        let x_init = periodic_start(model, ss, bmat, d, w)?;
        let mut bins = [Bin::new(); 8];
        let eq = model.measure(&model.x0, &[Drive::default()])[0];
        let mut drives = vec![Drive::default()];
        let meas = std::cell::RefCell::new(vec![Measurement::default()]);
        let dr = std::cell::RefCell::new(vec![Drive::default()]);
        rk4(
            |t, x, dx| {
                let mut d = dr.borrow_mut();
                model.drives_at(t, &inj, &mut d);
                model.rhs_into(x, &d, dx, &mut meas.borrow_mut());
            },
            &x_init,
            0.0,
            dt,
            n_settle + n_window,
            |n, t, x| {
                check_blowup(model, t, x, 5.0)?;
                if n >= n_settle && n < n_settle + n_window {
                    model.drives_at(t, &inj, &mut drives);
                    let m = model.measure(x, &drives)[0];
                    let ph = Complex64::from_polar(1.0, -w * (t - n_settle as f64 * dt));
                    let vals = [
                        m.i[0] - eq.i[0],
                        m.i[1] - eq.i[1],
                        m.i_dc - eq.i_dc,
                        m.p_sync - eq.p_sync,
                        m.u[0] - eq.u[0],
                        m.u[1] - eq.u[1],
                        m.v_dc - eq.v_dc,
                        m.omega - eq.omega,
                    ];
                    for (bin, v) in bins.iter_mut().zip(vals) {
                        bin.push(v, ph);
                    }
                }
                Ok(())
            },
        )?;
        let p: Vec<Complex64> = bins.iter().map(|b| b.phasor()).collect();
        let (ip, in_) = pn(p[0], p[1]);
        let (vp, vn) = pn(p[4], p[5]);
        for (row, v) in [ip, in_, p[2], p[3]].into_iter().enumerate() {
            imat[(row, col)] = v;
        }
        for (row, v) in [vp, vn, p[6], p[7]].into_iter().enumerate() {
            vmat[(row, col)] = v;
        }
    }
    let spec = &model.converters[0].spec;
    let bases = [spec.bases.v_ac, spec.bases.v_ac, spec.bases.v_dc, spec.bases.omega];
    let scaled = CMat::from_fn(4, 4, |r, c| vmat[(r, c)] / bases[r]);
    let cond = svd_cond(&scaled);
    if !(cond <= opts.cond_cap) {
        return Err(Error::IllConditionedScan { f_hz: f, cond });
    }
    let vinv = linalg::inverse_checked(&vmat, Complex64::new(0.0, w), f64::INFINITY)?;
    let y_pn = imat * vinv;
    let y_dq = measurement_to_canonical(&modified_sequence_to_dq(&y_pn));
    Ok(ScanPoint {
        f_hz: f,
        y_pn,
        y_dq,
        cond,
        window: DftWindow {
            settle: n_settle as f64 * dt,
            window,
            periods,
            dt,
        },
    })
}

/// Frequency of the largest spectral peak of `x` (Hann-windowed, mean
/// removed) within `[f_lo, f_hi]`.
pub fn spectral_peak(x: &[f64], dt: f64, f_lo: f64, f_hi: f64) -> Option<f64> {
    if x.len() < 8 || !(f_hi > f_lo && f_lo > 0.0) {
        return None;
    }
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let y: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * (0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()))
        .collect();
    let mag = |f: f64| dft_bin(&y, dt, f).norm();
    let span = n as f64 * dt;
    let df = 0.25 / span;
    let mut best = (f_lo, 0.0);
    let mut f = f_lo;
    while f <= f_hi {
        let m = mag(f);
        if m > best.1 {
            best = (f, m);
        }
        f += df;
    }
    // Golden-section refinement around the coarse maximum.
    let (mut a, mut b) = ((best.0 - df).max(f_lo), (best.0 + df).min(f_hi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..40 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if mag(c) > mag(d) {
            b = d;
        } else {
            a = c;
        }
    }
    Some(0.5 * (a + b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub t_end: f64,
    pub dt: f64,
    /// Initial deviation as a fraction of each state's scale.
    pub kick: f64,
    pub blowup_bound: f64,
    /// Keep every n-th step for the spectral estimate.
    pub decimate: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            t_end: 10.0,
            dt: 2e-5,
            kick: 1e-3,
            blowup_bound: 2.0,
            decimate: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub unstable: bool,
    /// Peak scaled deviation in the last fifth over that in the second fifth.
    pub growth: f64,
    pub blowup_at: Option<f64>,
    /// Dominant oscillation frequency of the late response (Hz).
    pub peak_hz: Option<f64>,
}

/// Kick the model off its equilibrium and classify the free response as
/// settling or growing; report its dominant oscillation frequency.
pub fn probe_stability(model: &SimModel, opts: &ProbeOptions) -> Result<ProbeResult> {
    let n = model.len();
    let x_init: Vec<f64> = (0..n)
        .map(|i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            model.x0[i] + sign * opts.kick * model.scales[i] * (1.0 + (i % 3) as f64) / 3.0
        })
        .collect();
    // Split each step when the stiffest mode would leave RK4's stability region.
    let rho = linearize_ss(model)?
        .eigenvalues
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max);
    let sub = ((opts.dt * rho / 2.0).ceil() as usize).max(1);
    let h = opts.dt / sub as f64;
    let steps = (opts.t_end / opts.dt).round() as usize * sub;
    let every = opts.decimate.max(1) * sub;
    let mut dev: Vec<Vec<f64>> = Vec::new();
    let drives = vec![Drive::default(); model.converters.len()];
    let meas = std::cell::RefCell::new(vec![Measurement::default(); model.converters.len()]);
    let result = rk4(
        |_, x, dx| model.rhs_into(x, &drives, dx, &mut meas.borrow_mut()),
        &x_init,
        0.0,
        h,
        steps,
        |k, t, x| {
            check_blowup(model, t, x, opts.blowup_bound)?;
            if k % every == 0 {
                dev.push(
                    x.iter()
                        .zip(&model.x0)
                        .zip(&model.scales)
                        .map(|((v, v0), s)| (v - v0) / s)
                        .collect(),
                );
            }
            Ok(())
        },
    );
    let blowup_at = match result {
        Ok(_) => None,
        Err(Error::NumericalBlowup { t, .. }) => Some(t),
        Err(e) => return Err(e),
    };
    let m = dev.len();
    if m < 20 {
        return Ok(ProbeResult {
            unstable: true,
            growth: f64::INFINITY,
            blowup_at,
            peak_hz: None,
        });
    }
    let peak = |r: std::ops::Range<usize>| {
        dev[r]
            .iter()
            .flat_map(|row| row.iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    };
    let early = peak(m / 5..2 * m / 5);
    let late = peak(4 * m / 5..m);
    let growth = late / early.max(1e-300);
    // Spectral estimate on the state with the largest late deviation.
    let tail = m / 2..m;
    let idx = (0..n)
        .max_by(|&a, &b| {
            let pa = dev[tail.clone()].iter().map(|r| r[a].abs()).fold(0.0, f64::max);
            let pb = dev[tail.clone()].iter().map(|r| r[b].abs()).fold(0.0, f64::max);
            pa.total_cmp(&pb)
        })
        .unwrap();
    let sig: Vec<f64> = dev[tail].iter().map(|r| r[idx]).collect();
    let dts = h * every as f64;
    let span = sig.len() as f64 * dts;
    let peak_hz = spectral_peak(&sig, dts, (2.0 / span).max(0.2), (0.45 / dts).min(1000.0));
    Ok(ProbeResult {
        unstable: blowup_at.is_some() || growth > 1.0,
        growth,
        blowup_at,
        peak_hz,
    })
}
