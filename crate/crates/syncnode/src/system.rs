//! A converter-interlinked system: converter sites, Thevenin ac grids and dc
//! networks, its power-flow equilibrium, and the EIN built from it.

use std::collections::BTreeMap;

use crate::converter::{
    self, build_eim, solve_operating_point, ConverterKind, ConverterSpec, OperatingPoint, PowerTarget,
    TerminalConditions,
};
use crate::ein::{Attachment, Branch, Connection, EinSystem, NodeEntry, NodeKind, NodeTable};
use crate::error::{Error, Result};

/// Thevenin ac grid: an ideal source behind `R + sL` at one ac node.
#[derive(Debug, Clone, PartialEq)]
pub struct AcGrid {
    pub label: String,
    pub node: usize,
    pub r: f64,
    pub l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcLine {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub l: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcNetwork {
    pub label: String,
    /// `(node, capacitance)` shunt capacitors.
    pub capacitors: Vec<(usize, f64)>,
    pub lines: Vec<DcLine>,
}

impl DcNetwork {
    pub fn nodes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .capacitors
            .iter()
            .map(|c| c.0)
            .chain(self.lines.iter().flat_map(|l| [l.from, l.to]))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// A converter with its node assignment and steady-state targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ConverterSite {
    pub spec: ConverterSpec,
    pub sync_node: usize,
    pub ac_node: usize,
    pub dc_node: usize,
    /// PoC voltage amplitude (V).
    pub u_poc: f64,
    /// Active power absorbed at the PoC (W); ignored for the dc-voltage
    /// regulating converter, whose power follows from the dc balance.
    pub p: f64,
    /// Reactive power absorbed at the PoC (var).
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub omega1: f64,
    pub converters: Vec<ConverterSite>,
    pub ac_grids: Vec<AcGrid>,
    pub dc_networks: Vec<DcNetwork>,
}

/// Steady state of the whole system.
#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    /// One per converter, in `SystemSpec::converters` order.
    pub ops: Vec<OperatingPoint>,
    /// Source voltage of each converter's ac grid, in that converter's frame.
    pub grid_emf: Vec<[f64; 2]>,
    pub dc_voltage: BTreeMap<usize, f64>,
    /// Steady current of each dc line, `from → to`, per network.
    pub line_current: Vec<Vec<f64>>,
}

impl SystemSpec {
    pub fn grid_of(&self, ac_node: usize) -> Option<&AcGrid> {
        self.ac_grids.iter().find(|g| g.node == ac_node)
    }

    pub fn network_of(&self, dc_node: usize) -> Option<(usize, &DcNetwork)> {
        self.dc_networks
            .iter()
            .enumerate()
            .find(|(_, n)| n.nodes().contains(&dc_node))
    }

    pub fn validate(&self) -> Result<()> {
        if self.converters.is_empty() {
            return Err(Error::InvalidNetwork("no converters".into()));
        }
        for c in &self.converters {
            c.spec.validate()?;
            if self.grid_of(c.ac_node).is_none() {
                return Err(Error::InvalidNetwork(format!(
                    "ac node {} of {} has no grid",
                    c.ac_node, c.spec.name
                )));
            }
            if self.network_of(c.dc_node).is_none() {
                return Err(Error::InvalidNetwork(format!(
                    "dc node {} of {} is in no dc network",
                    c.dc_node, c.spec.name
                )));
            }
            if !(c.u_poc > 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "{}: PoC voltage must be positive",
                    c.spec.name
                )));
            }
        }
        for g in &self.ac_grids {
            if !(g.r >= 0.0 && g.l > 0.0) {
                return Err(Error::InvalidNetwork(format!("grid {} needs R ≥ 0, L > 0", g.label)));
            }
        }
        for n in &self.dc_networks {
            for &(node, c) in &n.capacitors {
                if !(c > 0.0) {
                    return Err(Error::InvalidNetwork(format!(
                        "capacitor at dc node {node} must be positive"
                    )));
                }
            }
            for l in &n.lines {
                if !(l.r > 0.0 && l.l > 0.0) {
                    return Err(Error::InvalidNetwork(format!(
                        "dc line {}-{} needs R > 0, L > 0",
                        l.from, l.to
                    )));
                }
            }
            let slack = self
                .converters
                .iter()
                .filter(|c| c.spec.kind() == ConverterKind::Gfl && n.nodes().contains(&c.dc_node))
                .count();
            if slack != 1 {
                return Err(Error::InvalidNetwork(format!(
                    "dc network {} needs exactly one dc-voltage regulating converter, found {slack}",
                    n.label
                )));
            }
        }
        Ok(())
    }

    /// Power flow: power-setting converters first, then each dc network with
    /// the regulating converter as slack, then the regulating converters.
    pub fn equilibrium(&self) -> Result<Equilibrium> {
        self.validate()?;
        let n = self.converters.len();
        let mut ops: Vec<Option<OperatingPoint>> = vec![None; n];
        let mut dc_voltage = BTreeMap::new();
        let mut line_current = Vec::new();

        for net in &self.dc_networks {
            let nodes = net.nodes();
            let (slack_idx, slack) = self
                .converters
                .iter()
                .enumerate()
                .find(|(_, c)| c.spec.kind() == ConverterKind::Gfl && nodes.contains(&c.dc_node))
                .unwrap();
            let v_ref = slack.spec.bases.v_dc;
            // Power delivered into each dc node by the power-setting converters.
            let mut injected: BTreeMap<usize, f64> = BTreeMap::new();
            let mut setters = Vec::new();
            for (k, c) in self.converters.iter().enumerate() {
                if k != slack_idx && nodes.contains(&c.dc_node) {
                    let term = TerminalConditions {
                        u_poc: c.u_poc,
                        power: PowerTarget::Poc(c.p),
                        q: c.q,
                        v_dc: c.spec.bases.v_dc,
                    };
                    let op = solve_operating_point(&c.spec, &term)?;
                    *injected.entry(c.dc_node).or_default() += op.v_dc0 * op.i_dc0;
                    setters.push((k, term));
                }
            }
            let v = dc_power_flow(net, &nodes, slack.dc_node, v_ref, &injected)?;
            for (k, mut term) in setters {
                let c = &self.converters[k];
                term.v_dc = v[&c.dc_node];
                ops[k] = Some(solve_operating_point(&c.spec, &term)?);
            }
            let currents: Vec<f64> = net.lines.iter().map(|l| (v[&l.from] - v[&l.to]) / l.r).collect();
            // Slack delivers whatever leaves its node through the lines.
            let mut out = 0.0;
            for (l, i) in net.lines.iter().zip(&currents) {
                if l.from == slack.dc_node {
                    out += i;
                }
                if l.to == slack.dc_node {
                    out -= i;
                }
            }
            out -= injected.get(&slack.dc_node).copied().unwrap_or(0.0) / v_ref;
            let term = TerminalConditions {
                u_poc: slack.u_poc,
                power: PowerTarget::Dc(v_ref * out),
                q: slack.q,
                v_dc: v_ref,
            };
            ops[slack_idx] = Some(solve_operating_point(&slack.spec, &term)?);
            dc_voltage.extend(v);
            line_current.push(currents);
        }

        let ops: Vec<OperatingPoint> = ops
            .into_iter()
            .enumerate()
            .map(|(k, o)| {
                o.ok_or_else(|| {
                    Error::InvalidNetwork(format!(
                        "converter {} is not reached by the power flow",
                        self.converters[k].spec.name
                    ))
                })
            })
            .collect::<Result<_>>()?;
        let grid_emf = self
            .converters
            .iter()
            .zip(&ops)
            .map(|(c, op)| {
                let g = self.grid_of(c.ac_node).unwrap();
                let z = converter::dq_rl_static(g.r, g.l, self.omega1);
                [
                    op.u_g[0] + z[0][0] * op.i_g[0] + z[0][1] * op.i_g[1],
                    op.u_g[1] + z[1][0] * op.i_g[0] + z[1][1] * op.i_g[1],
                ]
            })
            .collect();
        Ok(Equilibrium {
            ops,
            grid_emf,
            dc_voltage,
            line_current,
        })
    }

    /// EIN of the system at the given equilibrium.
    pub fn ein(&self, eq: &Equilibrium) -> Result<EinSystem> {
        let mut nodes = Vec::new();
        let mut attachments = Vec::new();
        for (c, op) in self.converters.iter().zip(&eq.ops) {
            let b = c.spec.bases;
            let (si, su) = crate::ein::sync_bases(&c.spec);
            let owner = c.spec.name.clone();
            nodes.push(NodeEntry {
                id: c.sync_node,
                kind: NodeKind::Sync,
                owner: owner.clone(),
                i_base: si,
                u_base: su,
            });
            nodes.push(NodeEntry {
                id: c.ac_node,
                kind: NodeKind::Ac,
                owner: owner.clone(),
                i_base: b.i_ac,
                u_base: b.v_ac,
            });
            nodes.push(NodeEntry {
                id: c.dc_node,
                kind: NodeKind::Dc,
                owner,
                i_base: b.i_dc,
                u_base: b.v_dc,
            });
            attachments.push(Attachment {
                spec: c.spec.clone(),
                op: *op,
                eim: build_eim(&c.spec, op)?,
                sync_node: c.sync_node,
                ac_node: c.ac_node,
                dc_node: c.dc_node,
            });
        }
        // Dc nodes without a converter take the bases of their network's slack.
        for net in &self.dc_networks {
            for id in net.nodes() {
                if nodes.iter().all(|n| n.id != id) {
                    let (_, slack) = self
                        .converters
                        .iter()
                        .enumerate()
                        .find(|(_, c)| net.nodes().contains(&c.dc_node))
                        .unwrap();
                    nodes.push(NodeEntry {
                        id,
                        kind: NodeKind::Dc,
                        owner: net.label.clone(),
                        i_base: slack.spec.bases.i_dc,
                        u_base: slack.spec.bases.v_dc,
                    });
                }
            }
        }
        let table = NodeTable::new(nodes)?;
        let mut branches = Vec::new();
        for g in &self.ac_grids {
            branches.push(Branch::ac_rl(
                &g.label,
                Connection::Shunt(g.node),
                g.r,
                g.l,
                self.omega1,
            )?);
        }
        for net in &self.dc_networks {
            for &(node, c) in &net.capacitors {
                branches.push(Branch::dc_capacitor(&net.label, node, c)?);
            }
            for l in &net.lines {
                branches.push(Branch::dc_rl(&net.label, Connection::Series(l.from, l.to), l.r, l.l)?);
            }
        }
        EinSystem::new(table, branches, attachments)
    }
}

/// Newton on the non-slack node voltages of a resistive dc network.
fn dc_power_flow(
    net: &DcNetwork,
    nodes: &[usize],
    slack: usize,
    v_ref: f64,
    injected: &BTreeMap<usize, f64>,
) -> Result<BTreeMap<usize, f64>> {
    let free: Vec<usize> = nodes.iter().copied().filter(|&n| n != slack).collect();
    let idx = |n: usize| nodes.iter().position(|&m| m == n).unwrap();
    let m = nodes.len();
    let mut g = vec![vec![0.0; m]; m];
    for l in &net.lines {
        let (a, b) = (idx(l.from), idx(l.to));
        let y = 1.0 / l.r;
        g[a][a] += y;
        g[b][b] += y;
        g[a][b] -= y;
        g[b][a] -= y;
    }
    let assemble = |x: &[f64]| -> Vec<f64> {
        let mut v = vec![v_ref; m];
        for (k, &n) in free.iter().enumerate() {
            v[idx(n)] = x[k] * v_ref;
        }
        v
    };
    let i_scale = injected.values().fold(0.0_f64, |a, p| a.max(p.abs() / v_ref)).max(1e-9);
    let x = converter::damped_newton(
        vec![1.0; free.len()],
        |x| {
            let v = assemble(x);
            free.iter()
                .map(|&n| {
                    let i = idx(n);
                    let flow: f64 = (0..m).map(|j| g[i][j] * v[j]).sum();
                    let inj = injected.get(&n).copied().unwrap_or(0.0) / v[i];
                    (inj - flow) / i_scale
                })
                .collect()
        },
        &converter::NewtonOptions::default(),
    )?;
    let v = assemble(&x);
    Ok(nodes.iter().map(|&n| (n, v[idx(n)])).collect())
}
