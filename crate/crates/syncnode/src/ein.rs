//! Extended impedance network: passive node-admittance stamps plus one
//! virtual sync node per converter, the block-diagonal converter admittance,
//! per-unit scaling and the loop gain `L = Z_net Y_con`.

use std::collections::{BTreeMap, BTreeSet};

use num_complex::Complex64;

use crate::converter::{dq_rl, ConverterKind, ConverterSpec, FourPortEim, OperatingPoint};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat, CVec};
use crate::lti::TransferMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    Sync,
    Ac,
    Dc,
}

impl NodeKind {
    pub fn width(self) -> usize {
        match self {
            NodeKind::Ac => 2,
            NodeKind::Sync | NodeKind::Dc => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            NodeKind::Sync => "sync",
            NodeKind::Ac => "ac",
            NodeKind::Dc => "dc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeEntry {
    pub id: usize,
    pub kind: NodeKind,
    /// Converter (or network element) owning the node.
    pub owner: String,
    /// Current base (per port of the node).
    pub i_base: f64,
    /// Voltage base (per port of the node).
    pub u_base: f64,
}

/// Nodes in ascending id with their scalar-port offsets.
#[derive(Debug, Clone)]
pub struct NodeTable {
    nodes: Vec<NodeEntry>,
    offsets: Vec<usize>,
    width: usize,
}

impl NodeTable {
    pub fn new(mut nodes: Vec<NodeEntry>) -> Result<Self> {
        nodes.sort_by_key(|n| n.id);
        if let Some(w) = nodes.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidNetwork(format!("duplicate node id {}", w[0].id)));
        }
        for n in &nodes {
            if !(n.i_base > 0.0 && n.u_base > 0.0) {
                return Err(Error::InvalidNetwork(format!(
                    "node {} has non-positive base values",
                    n.id
                )));
            }
        }
        let mut offsets = Vec::with_capacity(nodes.len());
        let mut width = 0;
        for n in &nodes {
            offsets.push(width);
            width += n.kind.width();
        }
        Ok(Self { nodes, offsets, width })
    }

    pub fn nodes(&self) -> &[NodeEntry] {
        &self.nodes
    }

    /// Total number of scalar ports.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }

    pub fn node(&self, id: usize) -> Option<&NodeEntry> {
        self.position(id).map(|p| &self.nodes[p])
    }

    pub fn offset(&self, id: usize) -> Option<usize> {
        self.position(id).map(|p| self.offsets[p])
    }

    /// Global scalar-port indices of node `id`.
    pub fn ports(&self, id: usize) -> Option<std::ops::Range<usize>> {
        let p = self.position(id)?;
        let o = self.offsets[p];
        Some(o..o + self.nodes[p].kind.width())
    }

    fn require(&self, id: usize, kind: NodeKind) -> Result<usize> {
        match self.node(id) {
            Some(n) if n.kind == kind => Ok(self.offset(id).unwrap()),
            Some(n) => Err(Error::InvalidNetwork(format!(
                "node {id} is {} but {} was expected",
                n.kind.label(),
                kind.label()
            ))),
            None => Err(Error::InvalidNetwork(format!("unknown node {id}"))),
        }
    }

    pub fn i_base_vector(&self) -> Vec<f64> {
        self.expand(|n| n.i_base)
    }

    pub fn u_base_vector(&self) -> Vec<f64> {
        self.expand(|n| n.u_base)
    }

    fn expand(&self, f: impl Fn(&NodeEntry) -> f64) -> Vec<f64> {
        self.nodes
            .iter()
            .flat_map(|n| std::iter::repeat_n(f(n), n.kind.width()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connection {
    /// Between a node and the reference (ideal sources are shorted in the
    /// small-signal network).
    Shunt(usize),
    Series(usize, usize),
}

/// A passive element stamped into the node admittance matrix.
#[derive(Debug, Clone)]
pub struct Branch {
    /// Group label used to name the Z_net component (e.g. `g1`).
    pub group: String,
    pub kind: NodeKind,
    pub connection: Connection,
    /// `width × width` admittance.
    pub admittance: TransferMatrix,
    /// Physical parameters, kept for the time-domain model.
    pub element: Element,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Element {
    /// Series R-L (dq form on ac nodes).
    Rl { r: f64, l: f64 },
    /// Shunt capacitance.
    Capacitor { c: f64 },
}

impl Branch {
    pub fn ac_rl(group: &str, connection: Connection, r: f64, l: f64, omega1: f64) -> Result<Self> {
        Ok(Self {
            group: group.to_string(),
            kind: NodeKind::Ac,
            connection,
            admittance: dq_rl(r, l, omega1).inv()?,
            element: Element::Rl { r, l },
        })
    }

    pub fn dc_rl(group: &str, connection: Connection, r: f64, l: f64) -> Result<Self> {
        Ok(Self {
            group: group.to_string(),
            kind: NodeKind::Dc,
            connection,
            admittance: TransferMatrix::rational(&[1.0], &[l, r])?,
            element: Element::Rl { r, l },
        })
    }

    pub fn dc_capacitor(group: &str, node: usize, c: f64) -> Result<Self> {
        Ok(Self {
            group: group.to_string(),
            kind: NodeKind::Dc,
            connection: Connection::Shunt(node),
            admittance: TransferMatrix::rational(&[c, 0.0], &[1.0])?,
            element: Element::Capacitor { c },
        })
    }
}

/// A converter attached to its three nodes.
#[derive(Debug, Clone)]
pub struct Attachment {
    pub spec: ConverterSpec,
    pub op: OperatingPoint,
    pub eim: FourPortEim,
    pub sync_node: usize,
    pub ac_node: usize,
    pub dc_node: usize,
}

impl Attachment {
    pub fn kind(&self) -> ConverterKind {
        self.spec.kind()
    }
}

/// A diagonal block of Z_net reported as one component.
#[derive(Debug, Clone, PartialEq)]
pub struct ZComponent {
    pub label: String,
    /// Global scalar ports of the block, ascending.
    pub ports: Vec<usize>,
}

/// A converter's 4×4 block inside Y_con.
#[derive(Debug, Clone, PartialEq)]
pub struct YComponent {
    pub label: String,
    /// Global indices of the converter's canonical ports `(sync, d, q, dc)`.
    pub ports: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct EinSystem {
    pub nodes: NodeTable,
    pub branches: Vec<Branch>,
    pub converters: Vec<Attachment>,
    y_node: TransferMatrix,
    z_net: TransferMatrix,
    y_con: TransferMatrix,
    z_pu: TransferMatrix,
    y_pu: TransferMatrix,
    loop_gain: TransferMatrix,
}

impl EinSystem {
    pub fn new(nodes: NodeTable, branches: Vec<Branch>, converters: Vec<Attachment>) -> Result<Self> {
        // Node ownership and stamping rules.
        let mut sync_owned = BTreeMap::new();
        for c in &converters {
            nodes.require(c.sync_node, NodeKind::Sync)?;
            nodes.require(c.ac_node, NodeKind::Ac)?;
            nodes.require(c.dc_node, NodeKind::Dc)?;
            if sync_owned.insert(c.sync_node, &c.spec.name).is_some() {
                return Err(Error::InvalidNetwork(format!(
                    "sync node {} is shared by several converters",
                    c.sync_node
                )));
            }
        }
        for n in nodes.nodes() {
            if n.kind == NodeKind::Sync && !sync_owned.contains_key(&n.id) {
                return Err(Error::InvalidNetwork(format!("sync node {} has no converter", n.id)));
            }
        }
        for b in &branches {
            if b.admittance.shape() != (b.kind.width(), b.kind.width()) {
                return Err(Error::InvalidNetwork(format!(
                    "branch in group {} has admittance of shape {:?}",
                    b.group,
                    b.admittance.shape()
                )));
            }
            let ends: Vec<usize> = match b.connection {
                Connection::Shunt(a) => vec![a],
                Connection::Series(a, c) => vec![a, c],
            };
            for id in ends {
                let n = nodes
                    .node(id)
                    .ok_or_else(|| Error::InvalidNetwork(format!("unknown node {id}")))?;
                if n.kind == NodeKind::Sync {
                    return Err(Error::InvalidNetwork(format!("passive branch touches sync node {id}")));
                }
                if n.kind != b.kind {
                    return Err(Error::InvalidNetwork(format!(
                        "{} branch connected to {} node {id}",
                        b.kind.label(),
                        n.kind.label()
                    )));
                }
            }
        }

        let y_node = stamp(&nodes, &branches, &converters)?;
        let z_net = y_node.inv()?;
        let y_con = assemble_ycon_tm(&nodes, &converters)?;
        let ib = nodes.i_base_vector();
        let ub = nodes.u_base_vector();
        let (z_pu, y_pu) = per_unit_tm(&ib, &ub, &z_net, &y_con)?;
        let loop_gain = z_pu.mul(&y_pu)?;
        Ok(Self {
            nodes,
            branches,
            converters,
            y_node,
            z_net,
            y_con,
            z_pu,
            y_pu,
            loop_gain,
        })
    }

    pub fn width(&self) -> usize {
        self.nodes.width()
    }

    /// Stamped node admittance matrix (including `-Y_sync_fo` on sync nodes).
    pub fn node_admittance(&self) -> &TransferMatrix {
        &self.y_node
    }

    pub fn z_net(&self) -> &TransferMatrix {
        &self.z_net
    }

    pub fn y_con(&self) -> &TransferMatrix {
        &self.y_con
    }

    pub fn z_net_pu(&self) -> &TransferMatrix {
        &self.z_pu
    }

    pub fn y_con_pu(&self) -> &TransferMatrix {
        &self.y_pu
    }

    /// Per-unit loop gain.
    pub fn loop_gain(&self) -> &TransferMatrix {
        &self.loop_gain
    }

    pub fn converter(&self, name: &str) -> Option<&Attachment> {
        self.converters.iter().find(|c| c.spec.name == name)
    }

    pub fn converter_ports(&self, c: &Attachment) -> [usize; 4] {
        let ac = self.nodes.offset(c.ac_node).unwrap();
        [
            self.nodes.offset(c.sync_node).unwrap(),
            ac,
            ac + 1,
            self.nodes.offset(c.dc_node).unwrap(),
        ]
    }

    /// Z_net components: each sync branch and each connected passive group.
    pub fn z_components(&self) -> Vec<ZComponent> {
        let mut out = Vec::new();
        // Union-find over nodes through series branches.
        let mut parent: BTreeMap<usize, usize> = self.nodes.nodes().iter().map(|n| (n.id, n.id)).collect();
        fn find(p: &mut BTreeMap<usize, usize>, x: usize) -> usize {
            let mut r = x;
            while p[&r] != r {
                r = p[&r];
            }
            p.insert(x, r);
            r
        }
        for b in &self.branches {
            if let Connection::Series(a, c) = b.connection {
                let (ra, rc) = (find(&mut parent, a), find(&mut parent, c));
                if ra != rc {
                    parent.insert(ra.max(rc), ra.min(rc));
                }
            }
        }
        let mut groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for n in self.nodes.nodes() {
            let r = find(&mut parent, n.id);
            groups.entry(r).or_default().insert(n.id);
        }
        let group_label = |ids: &BTreeSet<usize>| -> Option<String> {
            self.branches
                .iter()
                .find(|b| match b.connection {
                    Connection::Shunt(a) => ids.contains(&a),
                    Connection::Series(a, _) => ids.contains(&a),
                })
                .map(|b| b.group.clone())
        };
        for ids in groups.values() {
            let first = self.nodes.node(*ids.iter().next().unwrap()).unwrap();
            let ports: Vec<usize> = ids.iter().flat_map(|&id| self.nodes.ports(id).unwrap()).collect();
            let label = match first.kind {
                NodeKind::Sync => format!("Z_sync_fo_{}", first.owner),
                k => format!(
                    "Z_{}_{}",
                    k.label(),
                    group_label(ids).unwrap_or_else(|| format!("n{}", first.id))
                ),
            };
            out.push(ZComponent { label, ports });
        }
        out.sort_by_key(|c| c.ports[0]);
        out
    }

    pub fn y_components(&self) -> Vec<YComponent> {
        self.converters
            .iter()
            .map(|c| YComponent {
                label: c.spec.name.clone(),
                ports: self.converter_ports(c),
            })
            .collect()
    }

    /// Node voltage response `V = (I + Z Y)^{-1} Z I_node` in physical units.
    pub fn closed_loop_voltage(&self, i_node: &CVec, s: Complex64) -> Result<CVec> {
        closed_loop_voltage(self, i_node, s)
    }
}

fn stamp(nodes: &NodeTable, branches: &[Branch], converters: &[Attachment]) -> Result<TransferMatrix> {
    let n = nodes.width();
    let mut terms: Vec<TransferMatrix> = Vec::new();
    for b in branches {
        let w = b.kind.width();
        match b.connection {
            Connection::Shunt(a) => {
                let oa = nodes.offset(a).unwrap();
                terms.push(b.admittance.embed(n, n, oa, oa)?);
            }
            Connection::Series(a, c) => {
                let (oa, oc) = (nodes.offset(a).unwrap(), nodes.offset(c).unwrap());
                debug_assert_eq!(w, b.admittance.rows());
                terms.push(b.admittance.embed(n, n, oa, oa)?);
                terms.push(b.admittance.embed(n, n, oc, oc)?);
                terms.push(b.admittance.neg().embed(n, n, oa, oc)?);
                terms.push(b.admittance.neg().embed(n, n, oc, oa)?);
            }
        }
    }
    for c in converters {
        let o = nodes.offset(c.sync_node).unwrap();
        // Sync virtual branch: -Y_sync_fo = -(Z_sync_fo)^{-1}.
        terms.push(c.eim.z_sync_fo.inv()?.neg().embed(n, n, o, o)?);
    }
    let mut acc = TransferMatrix::zeros(n, n);
    for t in terms {
        acc = acc.add(&t)?;
    }
    Ok(acc)
}

fn assemble_ycon_tm(nodes: &NodeTable, converters: &[Attachment]) -> Result<TransferMatrix> {
    let n = nodes.width();
    let mut acc = TransferMatrix::zeros(n, n);
    for c in converters {
        let ac = nodes.offset(c.ac_node).unwrap();
        let ports = [
            nodes.offset(c.sync_node).unwrap(),
            ac,
            ac + 1,
            nodes.offset(c.dc_node).unwrap(),
        ];
        let mut e = CMat::zeros(n, 4);
        for (k, &p) in ports.iter().enumerate() {
            e[(p, k)] = linalg::C1;
        }
        let et = e.transpose();
        let embedded = TransferMatrix::constant(e)
            .mul(&c.eim.y)?
            .mul(&TransferMatrix::constant(et))?;
        acc = acc.add(&embedded)?;
    }
    Ok(acc)
}

fn per_unit_tm(
    ib: &[f64],
    ub: &[f64],
    z: &TransferMatrix,
    y: &TransferMatrix,
) -> Result<(TransferMatrix, TransferMatrix)> {
    let inv = |v: &[f64]| v.iter().map(|x| 1.0 / x).collect::<Vec<_>>();
    let ib_m = TransferMatrix::constant(linalg::real_diag(ib));
    let ub_m = TransferMatrix::constant(linalg::real_diag(ub));
    let ib_inv = TransferMatrix::constant(linalg::real_diag(&inv(ib)));
    let ub_inv = TransferMatrix::constant(linalg::real_diag(&inv(ub)));
    Ok((ub_inv.mul(z)?.mul(&ib_m)?, ib_inv.mul(y)?.mul(&ub_m)?))
}

/// `Z_net(s) = [node admittance matrix]^{-1}`.
pub fn assemble_znet(sys: &EinSystem) -> TransferMatrix {
    sys.z_net.clone()
}

/// Converter EIMs placed at their global port positions.
pub fn assemble_ycon(sys: &EinSystem) -> TransferMatrix {
    sys.y_con.clone()
}

/// `(U_b^{-1} Z I_b, I_b^{-1} Y U_b)` with the system's base vectors.
pub fn per_unit(sys: &EinSystem, z: &TransferMatrix, y: &TransferMatrix) -> Result<(TransferMatrix, TransferMatrix)> {
    per_unit_tm(&sys.nodes.i_base_vector(), &sys.nodes.u_base_vector(), z, y)
}

pub fn loop_gain(sys: &EinSystem) -> TransferMatrix {
    sys.loop_gain.clone()
}

pub fn closed_loop_voltage(sys: &EinSystem, i_node: &CVec, s: Complex64) -> Result<CVec> {
    let n = sys.width();
    if i_node.len() != n {
        return Err(Error::DimensionMismatch {
            op: "closed_loop_voltage",
            left: (n, 1),
            right: (i_node.len(), 1),
        });
    }
    let z = sys.z_net.eval(s)?;
    let y = sys.y_con.eval(s)?;
    let m = CMat::identity(n, n) + &z * y;
    let minv = linalg::inverse_checked(&m, s, linalg::DEFAULT_COND_CAP)?;
    Ok(minv * (z * i_node))
}

/// Sync-node bases for a converter: GFL `(V_b_ac, ω_b)`, GFM `(S_b, ω_b)`
/// as `(current base, voltage base)`.
pub fn sync_bases(spec: &ConverterSpec) -> (f64, f64) {
    let b = spec.bases;
    match spec.kind() {
        ConverterKind::Gfl => (b.v_ac, b.omega),
        ConverterKind::Gfm => (b.s, b.omega),
    }
}
