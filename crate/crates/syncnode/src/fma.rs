//! Frequency-domain modal analysis on the per-unit loop gain.
//!
//! Modes are zeros of `det(I + L(s))`. They are located in two stages: the
//! eigen-loci of `L(j2πf)` are swept for traces that pass close to `-1`, then
//! each candidate is refined by damped complex Newton on `1 + Λ_k(s) = 0`,
//! tracking `Λ_k` by eigenvector overlap. At a located mode the
//! participation matrix `r_k t_k` gives node participation factors, and the
//! chain rule gives component sensitivities `∂Λ_k/∂Z_ij = [Y PF]_ji` and
//! `∂Λ_k/∂Y_ij = [PF Z]_ji`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::ein::{EinSystem, NodeKind};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat, EigLr, C1};
use crate::lti::{self, LociOptions, TransferMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvaluationPoint {
    /// Evaluate PF and sensitivities at the Newton-refined complex root.
    #[default]
    RefinedRoot,
    /// Evaluate at the jω grid point that seeded the root.
    GridPoint,
}

#[derive(Debug, Clone, Copy)]
pub struct ModeOptions {
    pub f_min: f64,
    pub f_max: f64,
    pub grid_points: usize,
    pub capture_radius: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub evaluation: EvaluationPoint,
    pub loci: LociOptions,
}

impl Default for ModeOptions {
    fn default() -> Self {
        Self {
            f_min: 0.1,
            f_max: 1000.0,
            grid_points: 400,
            capture_radius: 0.3,
            tolerance: 1e-8,
            max_iterations: 50,
            evaluation: EvaluationPoint::RefinedRoot,
            loci: LociOptions::default(),
        }
    }
}

/// A zero of `det(I + L(s))` and the eigen-decomposition of `L` there.
#[derive(Debug, Clone)]
pub struct LocatedMode {
    /// Complex frequency (rad/s), `Im ≥ 0`.
    pub s: Complex64,
    /// Index of the critical eigenvalue in `eig`.
    pub k: usize,
    pub lambda: Complex64,
    pub residual: f64,
    pub iterations: usize,
    /// Frequency of the seeding grid point.
    pub seed_hz: f64,
    /// Per-unit loop gain at the evaluation point.
    pub l: CMat,
    pub eig: EigLr,
    /// Point where `l` and `eig` were evaluated.
    pub evaluated_at: Complex64,
}

impl LocatedMode {
    pub fn freq_hz(&self) -> f64 {
        self.s.im / (2.0 * PI)
    }

    pub fn damping_ratio(&self) -> f64 {
        -self.s.re / self.s.norm()
    }

    pub fn is_unstable(&self) -> bool {
        self.s.re > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Stable,
    Unstable,
}

impl Verdict {
    pub fn label(self) -> &'static str {
        match self {
            Verdict::Stable => "stable",
            Verdict::Unstable => "unstable",
        }
    }
}

/// Select the eigenvalue of `eig` that continues `(lambda_ref, r_ref)`:
/// the largest eigenvector overlap, with distance as tie-break.
pub fn track(eig: &EigLr, lambda_ref: Complex64, r_ref: Option<&linalg::CVec>) -> (usize, f64) {
    let n = eig.len();
    let mut best = (0usize, f64::NEG_INFINITY);
    let scale = lambda_ref.norm().max(1e-12);
    for j in 0..n {
        let dist = (eig.values[j] - lambda_ref).norm() / scale;
        let score = match r_ref {
            Some(r) => {
                let rj = eig.right.column(j);
                let ov = (r.adjoint() * rj)[(0, 0)].norm() / (r.norm() * rj.norm()).max(1e-300);
                ov - 0.25 * dist.min(4.0)
            }
            None => -dist,
        };
        if score > best.1 {
            best = (j, score);
        }
    }
    best
}

fn eval_eig(l: &TransferMatrix, s: Complex64, cap: f64) -> Result<(CMat, EigLr)> {
    let m = l.eval_with(s, cap)?;
    let e = linalg::eig_lr_with_cap(&m, cap)?;
    Ok((m, e))
}

/// Refine a root of `1 + Λ_k(s)` starting from `s0` and eigenvalue `lambda0`
/// with right eigenvector `r0`.
pub fn refine_mode(
    l: &TransferMatrix,
    s0: Complex64,
    lambda0: Complex64,
    r0: &linalg::CVec,
    opts: &ModeOptions,
) -> Result<(Complex64, Complex64, usize, CMat, EigLr)> {
    let cap = opts.loci.cond_cap;
    let mut s = s0;
    let (mut m, mut eig) = eval_eig(l, s, cap)?;
    let (mut k, _) = track(&eig, lambda0, Some(r0));
    let mut lam = eig.values[k];
    let mut f = C1 + lam;
    for it in 0..=opts.max_iterations {
        if f.norm() < opts.tolerance {
            return Ok((s, lam, it, m, eig));
        }
        if it == opts.max_iterations {
            break;
        }
        let r = eig.right_vec(k);
        let h = 1e-6 * s.norm().max(1.0);
        let lam_at = |sp: Complex64| -> Result<Complex64> {
            let (_, e) = eval_eig(l, sp, cap)?;
            let (j, _) = track(&e, lam, Some(&r));
            Ok(e.values[j])
        };
        let hp = Complex64::new(h, 0.0);
        let deriv = (lam_at(s + hp)? - lam_at(s - hp)?) / (2.0 * hp);
        if deriv.norm() == 0.0 || !deriv.is_finite() {
            return Err(Error::NewtonDiverged { last: s });
        }
        let step = -f / deriv;
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-4 {
            let st = s + step * alpha;
            if let Ok((mt, et)) = eval_eig(l, st, cap) {
                let (j, _) = track(&et, lam, Some(&r));
                let ft = C1 + et.values[j];
                if ft.norm() < f.norm() {
                    s = st;
                    m = mt;
                    eig = et;
                    k = j;
                    lam = eig.values[k];
                    f = ft;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::NewtonDiverged { last: s });
        }
    }
    Err(Error::NewtonDiverged { last: s })
}

/// Smallest distance of any eigen-locus to `-1` over the grid.
pub fn stability_margin(loci: &lti::EigLoci) -> f64 {
    loci.traces
        .iter()
        .flat_map(|t| t.iter().map(|v| (C1 + v).norm()))
        .fold(f64::INFINITY, f64::min)
}

/// Locate the modes captured within `capture_radius` of `-1`.
///
/// Returns `NoCapture` when no eigen-locus approaches `-1`; the system is
/// then stable with the reported margin.
pub fn find_modes(l: &TransferMatrix, opts: &ModeOptions) -> Result<Vec<LocatedMode>> {
    if l.rows() != l.cols() {
        return Err(Error::DimensionMismatch {
            op: "find_modes",
            left: l.shape(),
            right: l.shape(),
        });
    }
    if !(opts.f_min > 0.0 && opts.f_max > opts.f_min) {
        return Err(Error::InvalidGrid(
            "frequency range must be positive and increasing".into(),
        ));
    }
    let grid = lti::logspace(opts.f_min, opts.f_max, opts.grid_points);
    let loci = lti::eig_loci_with(l, &grid, &opts.loci)?;
    let margin = stability_margin(&loci);

    // Seeds: local minima of |1 + Λ| inside the capture radius.
    let mut seeds: Vec<(f64, Complex64)> = Vec::new();
    for trace in &loci.traces {
        let d: Vec<f64> = trace.iter().map(|v| (C1 + v).norm()).collect();
        for i in 0..d.len() {
            let left = if i == 0 { f64::INFINITY } else { d[i - 1] };
            let right = if i + 1 == d.len() { f64::INFINITY } else { d[i + 1] };
            if d[i] < opts.capture_radius && d[i] <= left && d[i] <= right {
                seeds.push((grid[i], trace[i]));
            }
        }
    }
    if seeds.is_empty() {
        return Err(Error::NoCapture { margin });
    }

    let mut modes: Vec<LocatedMode> = Vec::new();
    let mut last_err = None;
    for (f0, lam0) in seeds {
        let s0 = Complex64::new(0.0, 2.0 * PI * f0);
        let (_, e0) = match eval_eig(l, s0, opts.loci.cond_cap) {
            Ok(v) => v,
            Err(e) => {
                last_err = Some(e.at_frequency(f0));
                continue;
            }
        };
        let (k0, _) = track(&e0, lam0, None);
        let r0 = e0.right_vec(k0);
        match refine_mode(l, s0, e0.values[k0], &r0, opts) {
            Ok((mut s, mut lam, iterations, mut m, mut eig)) => {
                if s.im < 0.0 {
                    s = s.conj();
                    let (mc, ec) = eval_eig(l, s, opts.loci.cond_cap)?;
                    let (j, _) = track(&ec, lam.conj(), None);
                    lam = ec.values[j];
                    m = mc;
                    eig = ec;
                }
                let dup = modes.iter().any(|md| (md.s - s).norm() <= 1e-6 * s.norm().max(1.0));
                if dup {
                    continue;
                }
                let (evaluated_at, m, eig, k) = match opts.evaluation {
                    EvaluationPoint::RefinedRoot => {
                        let (k, _) = track(&eig, lam, None);
                        (s, m, eig, k)
                    }
                    EvaluationPoint::GridPoint => {
                        let (k, _) = track(&e0, lam, None);
                        (s0, l.eval_with(s0, opts.loci.cond_cap)?, e0.clone(), k)
                    }
                };
                modes.push(LocatedMode {
                    s,
                    k,
                    lambda: lam,
                    residual: (C1 + lam).norm(),
                    iterations,
                    seed_hz: f0,
                    l: m,
                    eig,
                    evaluated_at,
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    if modes.is_empty() {
        return Err(last_err.unwrap_or(Error::NoCapture { margin }));
    }
    modes.sort_by(|a, b| b.s.re.total_cmp(&a.s.re));
    Ok(modes)
}

/// Participation factor aggregated per node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePf {
    pub id: usize,
    pub kind: NodeKind,
    pub owner: String,
    pub pf: Complex64,
}

/// `diag(r_k t_k)` summed over each node's scalar ports.
pub fn node_pf(eig: &EigLr, k: usize, sys: &EinSystem) -> Vec<NodePf> {
    let pf = eig.participation(k);
    sys.nodes
        .nodes()
        .iter()
        .map(|n| {
            let ports = sys.nodes.ports(n.id).unwrap();
            NodePf {
                id: n.id,
                kind: n.kind,
                owner: n.owner.clone(),
                pf: ports.map(|p| pf[(p, p)]).sum(),
            }
        })
        .collect()
}

/// `S^Z` as a full matrix: `S^Z_ij = [Y PF]_ji`.
pub fn sensitivity_z_matrix(y: &CMat, eig: &EigLr, k: usize) -> CMat {
    (y * eig.participation(k)).transpose()
}

/// `S^Y` as a full matrix: `S^Y_ij = [PF Z]_ji`.
pub fn sensitivity_y_matrix(z: &CMat, eig: &EigLr, k: usize) -> CMat {
    (eig.participation(k) * z).transpose()
}

/// One scalar entry of a component.
#[derive(Debug, Clone, PartialEq)]
pub struct EntrySensitivity {
    pub component: String,
    /// e.g. `Z_ac_g1_12`; scalar components keep the bare label.
    pub entry: String,
    pub row: usize,
    pub col: usize,
    /// Per-unit value of the entry at the evaluation point.
    pub value: Complex64,
    pub sensitivity: Complex64,
}

fn entry_label(label: &str, i: usize, j: usize, scalar: bool) -> String {
    if scalar {
        label.to_string()
    } else {
        format!("{label}_{}{}", i + 1, j + 1)
    }
}

/// Sensitivities of `Λ_k` to every Z_net component entry (per-unit).
pub fn sensitivity_z(sys: &EinSystem, mode: &LocatedMode) -> Result<Vec<EntrySensitivity>> {
    let s = mode.evaluated_at;
    let z = sys.z_net_pu().eval(s)?;
    let y = sys.y_con_pu().eval(s)?;
    let sm = sensitivity_z_matrix(&y, &mode.eig, mode.k);
    let mut out = Vec::new();
    for comp in sys.z_components() {
        let scalar = comp.ports.len() == 1;
        for (a, &i) in comp.ports.iter().enumerate() {
            for (b, &j) in comp.ports.iter().enumerate() {
                out.push(EntrySensitivity {
                    component: comp.label.clone(),
                    entry: entry_label(&comp.label, a, b, scalar),
                    row: i,
                    col: j,
                    value: z[(i, j)],
                    sensitivity: sm[(i, j)],
                });
            }
        }
    }
    Ok(out)
}

const CANONICAL_PORTS: [&str; 4] = ["sync", "d", "q", "dc"];

/// Sensitivities of `Λ_k` to every entry of every converter block of Y_con,
/// labelled by the EIM partition (`Y_sync_fe`, `k_sync_ac`, …).
pub fn sensitivity_y(sys: &EinSystem, mode: &LocatedMode) -> Result<Vec<EntrySensitivity>> {
    let s = mode.evaluated_at;
    let z = sys.z_net_pu().eval(s)?;
    let y = sys.y_con_pu().eval(s)?;
    let sm = sensitivity_y_matrix(&z, &mode.eig, mode.k);
    let mut out = Vec::new();
    for comp in sys.y_components() {
        for (a, &i) in comp.ports.iter().enumerate() {
            for (b, &j) in comp.ports.iter().enumerate() {
                let block = crate::converter::PARTITION
                    .iter()
                    .find(|(_, r0, c0, nr, nc)| a >= *r0 && a < r0 + nr && b >= *c0 && b < c0 + nc)
                    .map(|p| p.0)
                    .unwrap_or("?");
                out.push(EntrySensitivity {
                    component: format!("{}_{}", block, comp.label),
                    entry: format!(
                        "{}_{}[{},{}]",
                        block, comp.label, CANONICAL_PORTS[a], CANONICAL_PORTS[b]
                    ),
                    row: i,
                    col: j,
                    value: y[(i, j)],
                    sensitivity: sm[(i, j)],
                });
            }
        }
    }
    Ok(out)
}

/// Largest entry magnitude per component.
pub fn aggregate_by_component(entries: &[EntrySensitivity]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for e in entries {
        let mag = e.sensitivity.norm();
        match out.iter_mut().find(|(c, _)| *c == e.component) {
            Some((_, m)) => *m = m.max(mag),
            None => out.push((e.component.clone(), mag)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRow {
    pub entry: String,
    pub sensitivity: Complex64,
    pub predicted: Complex64,
    pub actual: Complex64,
    /// `|predicted - actual| / |actual|`.
    pub error: f64,
}

/// Re-evaluate `Λ_k` with one entry of `z` (or `y`) replaced and return
/// the continuation of the critical eigenvalue.
pub fn tracked_eigenvalue(z: &CMat, y: &CMat, reference: &EigLr, k: usize, entry_label: &str) -> Result<Complex64> {
    let l = z * y;
    let eig = linalg::eig_lr(&l)?;
    // Bi-orthogonal projection |t_k r'_j| |t'_j r_k|: 1 for the same mode,
    // 0 for the others, independent of eigenvector scaling.
    let r = reference.right.column(k);
    let t = reference.left.row(k);
    let overlap = |idx: usize| {
        let a = (t * eig.right.column(idx))[(0, 0)].norm();
        let b = (eig.left.row(idx) * r)[(0, 0)].norm();
        a * b
    };
    let scores: Vec<f64> = (0..eig.len()).map(overlap).collect();
    let j = (0..eig.len())
        .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
        .unwrap_or(0);
    let best = scores[j];
    let runner_up = (0..eig.len())
        .filter(|&i| i != j)
        .map(|i| scores[i])
        .fold(0.0, f64::max);
    if best < 0.5 || runner_up > 0.5 * best {
        return Err(Error::EigenTrackLost {
            component: entry_label.to_string(),
        });
    }
    Ok(eig.values[j])
}

/// Finite-increment check: scale each Z_net component entry by `1 + increment`,
/// re-evaluate `Λ_k` at the same `s`, and compare with the first-order
/// prediction `S · increment · value`.
pub fn validate_sensitivity(
    sys: &EinSystem,
    mode: &LocatedMode,
    increment: f64,
) -> Result<Vec<std::result::Result<ValidationRow, Error>>> {
    if !(increment > 0.0 && increment <= 0.2) {
        return Err(Error::InvalidSpec(format!("increment {increment} outside (0, 0.2]")));
    }
    let s = mode.evaluated_at;
    let z = sys.z_net_pu().eval(s)?;
    let y = sys.y_con_pu().eval(s)?;
    let lam0 = mode.eig.values[mode.k];
    let entries = sensitivity_z(sys, mode)?;
    Ok(entries
        .iter()
        .map(|e| {
            let mut zp = z.clone();
            zp[(e.row, e.col)] *= 1.0 + increment;
            let lam = tracked_eigenvalue(&zp, &y, &mode.eig, mode.k, &e.entry)?;
            let actual = lam - lam0;
            let predicted = e.sensitivity * e.value * increment;
            Ok(ValidationRow {
                entry: e.entry.clone(),
                sensitivity: e.sensitivity,
                predicted,
                actual,
                error: (predicted - actual).norm() / actual.norm(),
            })
        })
        .collect())
}

/// Everything reported for one located mode.
#[derive(Debug, Clone)]
pub struct ModeReport {
    pub mode: LocatedMode,
    pub node_pf: Vec<NodePf>,
    pub z_sensitivity: Vec<EntrySensitivity>,
    pub y_sensitivity: Vec<EntrySensitivity>,
    pub validation: Option<Vec<std::result::Result<ValidationRow, Error>>>,
}

impl ModeReport {
    pub fn verdict(&self) -> Verdict {
        if self.mode.is_unstable() {
            Verdict::Unstable
        } else {
            Verdict::Stable
        }
    }

    /// Sum of the diagonal of `r_k t_k`; equals `t_k r_k = 1`.
    pub fn pf_trace(&self) -> Complex64 {
        self.mode.eig.participation(self.mode.k).trace()
    }

    /// Node ids ordered by decreasing PF magnitude.
    pub fn pf_ranking(&self) -> Vec<usize> {
        let mut v: Vec<&NodePf> = self.node_pf.iter().collect();
        v.sort_by(|a, b| b.pf.norm().total_cmp(&a.pf.norm()));
        v.into_iter().map(|n| n.id).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub modes: Vec<ModeReport>,
    /// Smallest distance of the eigen-loci to `-1`.
    pub margin: f64,
}

impl Analysis {
    pub fn verdict(&self) -> Verdict {
        if self.modes.iter().any(|m| m.mode.is_unstable()) {
            Verdict::Unstable
        } else {
            Verdict::Stable
        }
    }

    /// Least-damped located mode (largest real part).
    pub fn critical(&self) -> Option<&ModeReport> {
        self.modes.first()
    }
}

/// Locate modes of the system loop gain and attribute each one.
/// `increment = Some(f)` also runs the finite-increment validation.
pub fn analyze(sys: &EinSystem, opts: &ModeOptions, increment: Option<f64>) -> Result<Analysis> {
    let l = sys.loop_gain();
    let grid = lti::logspace(opts.f_min, opts.f_max, opts.grid_points);
    let margin = stability_margin(&lti::eig_loci_with(l, &grid, &opts.loci)?);
    let modes = match find_modes(l, opts) {
        Ok(m) => m,
        Err(Error::NoCapture { margin }) => return Ok(Analysis { modes: vec![], margin }),
        Err(e) => return Err(e),
    };
    let mut reports = Vec::with_capacity(modes.len());
    for mode in modes {
        let node_pf = node_pf(&mode.eig, mode.k, sys);
        let z_sensitivity = sensitivity_z(sys, &mode)?;
        let y_sensitivity = sensitivity_y(sys, &mode)?;
        let validation = match increment {
            Some(inc) => Some(validate_sensitivity(sys, &mode, inc)?),
            None => None,
        };
        reports.push(ModeReport {
            mode,
            node_pf,
            z_sensitivity,
            y_sensitivity,
            validation,
        });
    }
    Ok(Analysis { modes: reports, margin })
}
