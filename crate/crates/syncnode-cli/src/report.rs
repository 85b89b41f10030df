//! CSV and text formatting. Every number goes through [`num`] so identical
//! inputs give byte-identical files.

use num_complex::Complex64;
use syncnode::converter::{canonical_to_measurement, dq_to_modified_sequence, FourPortEim};
use syncnode::ein::EinSystem;
use syncnode::fma::Analysis;
use syncnode::linalg;
use syncnode::scanlab::{ScanResult, StateSpace};

pub const DQ_PORTS: [&str; 4] = ["sync", "d", "q", "dc"];
pub const PN_PORTS: [&str; 4] = ["p", "n", "dc", "sync"];

pub fn num(x: f64) -> String {
    format!("{x:.9e}")
}

/// Quote a text field when it holds a separator.
fn field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cplx(z: Complex64) -> String {
    format!("{},{}", num(z.re), num(z.im))
}

fn bode(z: Complex64) -> String {
    format!(
        "{},{},{},{}",
        num(z.re),
        num(z.im),
        num(z.norm()),
        num(z.arg().to_degrees())
    )
}

fn entry_header(ports: &[&str; 4], fields: &[&str]) -> String {
    let mut h = String::new();
    for r in ports {
        for c in ports {
            for f in fields {
                h.push_str(&format!(",Y_{r}_{c}_{f}"));
            }
        }
    }
    h
}

/// Two tables with `f_hz` and, per entry, `re, im, mag, phase_deg`: the dq
/// domain in port order `(sync, d, q, dc)` and the modified sequence domain
/// in `(p, n, dc, sync)`.
pub fn eim_csv(eim: &FourPortEim, grid: &[f64]) -> syncnode::Result<(String, String)> {
    let fields = ["re", "im", "mag", "phase_deg"];
    let mut dq = format!("f_hz{}\n", entry_header(&DQ_PORTS, &fields));
    let mut pn = format!("f_hz{}\n", entry_header(&PN_PORTS, &fields));
    for &f in grid {
        let y = eim.y.eval_hz(f).map_err(|e| e.at_frequency(f))?;
        let t = dq_to_modified_sequence(&canonical_to_measurement(&y));
        for (out, m) in [(&mut dq, &y), (&mut pn, &t)] {
            out.push_str(&num(f));
            for r in 0..4 {
                for c in 0..4 {
                    out.push(',');
                    out.push_str(&bode(m[(r, c)]));
                }
            }
            out.push('\n');
        }
    }
    Ok((dq, pn))
}

pub const SCAN_SUMMARY_HEADER: &str = "converter,entry,worst_rel_error,at_f_hz\n";

#[derive(Debug, Clone, PartialEq)]
pub struct EntryError {
    pub entry: String,
    pub error: f64,
    pub f_hz: f64,
}

pub struct ScanComparison {
    pub csv: String,
    /// Worst error per entry, row-major over `(sync, d, q, dc)`.
    pub worst: Vec<EntryError>,
}

impl ScanComparison {
    pub fn overall(&self) -> &EntryError {
        self.worst
            .iter()
            .max_by(|a, b| a.error.total_cmp(&b.error))
            .expect("16 entries")
    }
}

/// Relative error of a measured entry; structural zeros of the model are
/// judged against the largest entry at that frequency.
pub fn entry_error(measured: Complex64, model: Complex64, scale: f64) -> f64 {
    if model.norm() > 0.0 {
        (measured - model).norm() / model.norm()
    } else {
        measured.norm() / scale
    }
}

/// Overlay table: per entry the measured and analytical re/im pairs and
/// their relative error.
pub fn scan_comparison(eim: &FourPortEim, res: &ScanResult) -> syncnode::Result<ScanComparison> {
    let mut csv = format!(
        "f_hz{},cond\n",
        entry_header(&DQ_PORTS, &["scan_re", "scan_im", "model_re", "model_im", "rel_error"])
    );
    let mut worst: Vec<EntryError> = Vec::with_capacity(16);
    for r in DQ_PORTS {
        for c in DQ_PORTS {
            worst.push(EntryError {
                entry: format!("Y_{r}_{c}"),
                error: 0.0,
                f_hz: 0.0,
            });
        }
    }
    for p in &res.points {
        let y = eim.y.eval_hz(p.f_hz).map_err(|e| e.at_frequency(p.f_hz))?;
        let scale = linalg::max_abs(&y);
        csv.push_str(&num(p.f_hz));
        for r in 0..4 {
            for c in 0..4 {
                let (m, a) = (p.y_dq[(r, c)], y[(r, c)]);
                let e = entry_error(m, a, scale);
                csv.push_str(&format!(",{},{},{}", cplx(m), cplx(a), num(e)));
                let w = &mut worst[4 * r + c];
                if e > w.error {
                    w.error = e;
                    w.f_hz = p.f_hz;
                }
            }
        }
        csv.push_str(&format!(",{}\n", num(p.cond)));
    }
    Ok(ScanComparison { csv, worst })
}

pub fn verdict_line(a: &Analysis) -> String {
    match a.critical() {
        None => format!("stable, margin = {:.4}", a.margin),
        Some(m) => format!(
            "{}: {} mode(s), critical at {:.4} Hz, s = {:.4}{:+.4}j, damping ratio {:.4}",
            a.verdict().label(),
            a.modes.len(),
            m.mode.freq_hz(),
            m.mode.s.re,
            m.mode.s.im,
            m.mode.damping_ratio()
        ),
    }
}

pub fn modes_csv(a: &Analysis) -> String {
    let mut out = String::from("mode,verdict,s_re,s_im,f_hz,damping_ratio,lambda_re,lambda_im,residual,seed_hz\n");
    for (i, m) in a.modes.iter().enumerate() {
        let lm = &m.mode;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            i + 1,
            m.verdict().label(),
            cplx(lm.s),
            num(lm.freq_hz()),
            num(lm.damping_ratio()),
            cplx(lm.lambda),
            num(lm.residual),
            num(lm.seed_hz)
        ));
    }
    out
}

pub fn node_pf_csv(a: &Analysis) -> String {
    let mut out = String::from("mode,node,kind,owner,pf_re,pf_im,pf_abs\n");
    for (i, m) in a.modes.iter().enumerate() {
        for n in &m.node_pf {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i + 1,
                n.id,
                n.kind.label(),
                field(&n.owner),
                cplx(n.pf),
                num(n.pf.norm())
            ));
        }
    }
    out
}

pub fn sensitivity_csv(a: &Analysis) -> String {
    let mut out = String::from("mode,side,component,entry,row,col,value_re,value_im,s_re,s_im,s_abs\n");
    for (i, m) in a.modes.iter().enumerate() {
        for (side, entries) in [("Z", &m.z_sensitivity), ("Y", &m.y_sensitivity)] {
            for e in entries.iter() {
                out.push_str(&format!(
                    "{},{side},{},{},{},{},{},{},{}\n",
                    i + 1,
                    field(&e.component),
                    field(&e.entry),
                    e.row,
                    e.col,
                    cplx(e.value),
                    cplx(e.sensitivity),
                    num(e.sensitivity.norm())
                ));
            }
        }
    }
    out
}

pub fn validation_csv(a: &Analysis) -> String {
    let mut out = String::from("mode,entry,s_re,s_im,predicted_re,predicted_im,actual_re,actual_im,rel_error,status\n");
    for (i, m) in a.modes.iter().enumerate() {
        let Some(rows) = &m.validation else { continue };
        for (j, r) in rows.iter().enumerate() {
            match r {
                Ok(r) => out.push_str(&format!(
                    "{},{},{},{},{},{},ok\n",
                    i + 1,
                    field(&r.entry),
                    cplx(r.sensitivity),
                    cplx(r.predicted),
                    cplx(r.actual),
                    num(r.error)
                )),
                Err(e) => {
                    let entry = m.z_sensitivity.get(j).map(|e| e.entry.as_str()).unwrap_or("?");
                    out.push_str(&format!(
                        "{},{},,,,,,,,{}\n",
                        i + 1,
                        field(entry),
                        field(&e.to_string())
                    ));
                }
            }
        }
    }
    out
}

pub fn eigenvalues_csv(ss: &StateSpace) -> String {
    let mut out = String::from("index,re,im,f_hz,damping_ratio\n");
    for (i, l) in ss.eigenvalues.iter().enumerate() {
        let d = if l.norm() > 0.0 { -l.re / l.norm() } else { 0.0 };
        out.push_str(&format!(
            "{},{},{},{}\n",
            i + 1,
            cplx(*l),
            num(l.im / std::f64::consts::TAU),
            num(d)
        ));
    }
    out
}

fn fmt_c(z: Complex64) -> String {
    format!("{:+.4e}{:+.4e}j", z.re, z.im)
}

/// Human-readable report: per mode the verdict, node participation table
/// and component sensitivity table.
pub fn analysis_text(label: &str, seed: u64, ein: &EinSystem, a: &Analysis) -> String {
    let mut t = format!("case: {label}\nseed: {seed}\nnodes: {}\n", ein.nodes.nodes().len());
    t += &format!("loci margin to -1: {:.4}\n", a.margin);
    t += &format!("verdict: {}\n", verdict_line(a));
    for (i, m) in a.modes.iter().enumerate() {
        let lm = &m.mode;
        t += &format!(
            "\nmode {}: {}, f = {:.4} Hz, s = {:.4}{:+.4}j, damping ratio {:.4}, |PF trace - 1| = {:.1e}\n",
            i + 1,
            m.verdict().label(),
            lm.freq_hz(),
            lm.s.re,
            lm.s.im,
            lm.damping_ratio(),
            (m.pf_trace() - Complex64::new(1.0, 0.0)).norm()
        );
        t += "\n  node  kind  owner      |PF|\n";
        let mut total = 0.0;
        for id in m.pf_ranking() {
            let n = m.node_pf.iter().find(|n| n.id == id).unwrap();
            total += n.pf.norm();
            t += &format!(
                "  {:>4}  {:<4}  {:<8} {:>8.4}\n",
                n.id,
                n.kind.label(),
                n.owner,
                n.pf.norm()
            );
        }
        t += &format!("  {:>24} {:>8.4}\n", "sum", total);
        t += "\n  component                    |S|        sensitivity\n";
        for e in m.z_sensitivity.iter().chain(&m.y_sensitivity) {
            t += &format!(
                "  {:<26} {:>10.4e}  {}\n",
                e.entry,
                e.sensitivity.norm(),
                fmt_c(e.sensitivity)
            );
        }
        if let Some(rows) = &m.validation {
            t += "\n  component          predicted                  actual                     error\n";
            for (j, r) in rows.iter().enumerate() {
                match r {
                    Ok(r) => {
                        t += &format!(
                            "  {:<16} {:<26} {:<26} {:>6.2}%\n",
                            r.entry,
                            fmt_c(r.predicted),
                            fmt_c(r.actual),
                            100.0 * r.error
                        )
                    }
                    Err(e) => {
                        let entry = m.z_sensitivity.get(j).map(|e| e.entry.as_str()).unwrap_or("?");
                        t += &format!("  {entry:<16} {e}\n");
                    }
                }
            }
        }
    }
    t
}
