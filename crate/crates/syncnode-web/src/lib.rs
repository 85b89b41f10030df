//! Browser bindings. Each export takes the case file text and returns a
//! JSON document; errors come back as `{"error": "..."}` so the page can
//! show them without a try/catch around every call.

use serde::Serialize;
use syncnode::config::{CaseConfig, Variant, TESTCASE};
use syncnode::converter::{build_eim, canonical_to_measurement, dq_to_modified_sequence};
use syncnode::fma::analyze;
use syncnode::lti::{eig_loci, logspace};
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize, PartialEq)]
pub struct Trace {
    pub label: String,
    pub mag: Vec<f64>,
    pub phase_deg: Vec<f64>,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Bode {
    pub converter: String,
    pub kind: String,
    pub f_hz: Vec<f64>,
    pub traces: Vec<Trace>,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct ModeSummary {
    pub f_hz: f64,
    pub s_re: f64,
    pub s_im: f64,
    pub damping_ratio: f64,
    pub unstable: bool,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Locus {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct ModeSearch {
    pub verdict: String,
    pub margin: f64,
    pub modes: Vec<ModeSummary>,
    pub loci: Vec<Locus>,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Bar {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Participation {
    pub f_hz: f64,
    pub unstable: bool,
    pub nodes: Vec<Bar>,
    pub components: Vec<Bar>,
}

type Res<T> = Result<T, String>;

fn load(text: &str, case: &str, variant: &str) -> Res<CaseConfig> {
    let text = if text.trim().is_empty() { TESTCASE } else { text };
    let r = if case.is_empty() {
        CaseConfig::parse(text)
    } else {
        let v = match variant {
            "base" => Variant::Base,
            "perturbed" => Variant::Perturbed,
            other => return Err(format!("unknown variant {other}")),
        };
        CaseConfig::parse_case(text, case, v)
    };
    r.map_err(|e| e.to_string())
}

fn ein(cfg: &CaseConfig) -> Res<syncnode::ein::EinSystem> {
    let sys = cfg.system_spec().map_err(|e| e.to_string())?;
    let eq = sys.equilibrium().map_err(|e| e.to_string())?;
    sys.ein(&eq).map_err(|e| e.to_string())
}

/// Magnitude and phase of the 16 EIM entries of one converter, in the dq
/// domain or (`sequence = true`) the modified sequence domain.
pub fn eim_bode(text: &str, converter: &str, f_min: f64, f_max: f64, points: usize, sequence: bool) -> Res<Bode> {
    if points < 2 || !(f_min > 0.0 && f_max > f_min) {
        return Err("need at least 2 points on 0 < f_min < f_max".into());
    }
    let cfg = load(text, "", "")?;
    let sys = cfg.system_spec().map_err(|e| e.to_string())?;
    let eq = sys.equilibrium().map_err(|e| e.to_string())?;
    let k = sys
        .converters
        .iter()
        .position(|c| c.spec.name == converter)
        .ok_or_else(|| format!("no converter named {converter}"))?;
    let spec = &sys.converters[k].spec;
    let eim = build_eim(spec, &eq.ops[k]).map_err(|e| e.to_string())?;
    let ports = if sequence {
        ["p", "n", "dc", "sync"]
    } else {
        ["sync", "d", "q", "dc"]
    };
    let f_hz = logspace(f_min, f_max, points);
    let mut traces: Vec<Trace> = Vec::with_capacity(16);
    for r in ports {
        for c in ports {
            traces.push(Trace {
                label: format!("Y_{r}_{c}"),
                mag: Vec::with_capacity(points),
                phase_deg: Vec::with_capacity(points),
            });
        }
    }
    for &f in &f_hz {
        let mut y = eim.y.eval_hz(f).map_err(|e| e.at_frequency(f).to_string())?;
        if sequence {
            y = dq_to_modified_sequence(&canonical_to_measurement(&y));
        }
        for (i, t) in traces.iter_mut().enumerate() {
            let v = y[(i / 4, i % 4)];
            t.mag.push(v.norm());
            t.phase_deg.push(v.arg().to_degrees());
        }
    }
    Ok(Bode {
        converter: converter.to_string(),
        kind: spec.kind().label().to_string(),
        f_hz,
        traces,
    })
}

/// Eigen-loci of the loop gain and the located modes.
pub fn mode_search(text: &str, case: &str, variant: &str, loci_points: usize) -> Res<ModeSearch> {
    let cfg = load(text, case, variant)?;
    let ein = ein(&cfg)?;
    let opts = cfg.mode_options();
    let a = analyze(&ein, &opts, None).map_err(|e| e.to_string())?;
    let grid = logspace(opts.f_min, opts.f_max, loci_points.max(2));
    let loci = eig_loci(ein.loop_gain(), &grid).map_err(|e| e.to_string())?;
    Ok(ModeSearch {
        verdict: a.verdict().label().to_string(),
        margin: a.margin,
        modes: a
            .modes
            .iter()
            .map(|m| ModeSummary {
                f_hz: m.mode.freq_hz(),
                s_re: m.mode.s.re,
                s_im: m.mode.s.im,
                damping_ratio: m.mode.damping_ratio(),
                unstable: m.mode.is_unstable(),
            })
            .collect(),
        loci: loci
            .traces
            .iter()
            .map(|t| Locus {
                re: t.iter().map(|z| z.re).collect(),
                im: t.iter().map(|z| z.im).collect(),
            })
            .collect(),
    })
}

/// Node participation and per-component sensitivity magnitudes of the
/// least-damped mode.
pub fn participation(text: &str, case: &str, variant: &str) -> Res<Participation> {
    let cfg = load(text, case, variant)?;
    let ein = ein(&cfg)?;
    let a = analyze(&ein, &cfg.mode_options(), None).map_err(|e| e.to_string())?;
    let m = a
        .critical()
        .ok_or_else(|| format!("no mode captured; stable with margin {:.4}", a.margin))?;
    Ok(Participation {
        f_hz: m.mode.freq_hz(),
        unstable: m.mode.is_unstable(),
        nodes: m
            .node_pf
            .iter()
            .map(|n| Bar {
                label: format!("{} {} {}", n.id, n.owner, n.kind.label()),
                value: n.pf.norm(),
            })
            .collect(),
        components: m
            .z_sensitivity
            .iter()
            .map(|e| Bar {
                label: e.entry.clone(),
                value: e.sensitivity.norm(),
            })
            .collect(),
    })
}

fn json<T: Serialize>(r: Res<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[wasm_bindgen]
pub fn testcase() -> String {
    TESTCASE.to_string()
}

#[wasm_bindgen(js_name = eimBode)]
pub fn eim_bode_json(text: &str, converter: &str, f_min: f64, f_max: f64, points: usize, sequence: bool) -> String {
    json(eim_bode(text, converter, f_min, f_max, points, sequence))
}

#[wasm_bindgen(js_name = modeSearch)]
pub fn mode_search_json(text: &str, case: &str, variant: &str, loci_points: usize) -> String {
    json(mode_search(text, case, variant, loci_points))
}

#[wasm_bindgen(js_name = participation)]
pub fn participation_json(text: &str, case: &str, variant: &str) -> String {
    json(participation(text, case, variant))
}
