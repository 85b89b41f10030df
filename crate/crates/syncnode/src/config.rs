//! Case configuration: a strict TOML schema describing converters, grids,
//! dc networks, analysis settings and named parameter cases.
//!
//! Circuit values are per unit on each converter's ratings; controller gains
//! are per unit or given as bandwidths. A case is a pair of dotted-path
//! override sets (`base`, `perturbed`) applied to the document before it is
//! deserialized.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::Deserialize;

use crate::converter::{Bases, Control, ConverterSpec, PiGains, PowerChannel};
use crate::error::{Error, Result};
use crate::fma::{EvaluationPoint, ModeOptions};
use crate::lti::LociOptions;
use crate::scanlab::{ProbeOptions, ScanOptions};
use crate::system::{AcGrid, ConverterSite, DcLine, DcNetwork, SystemSpec};

/// The bundled testcase: two converters interlinking two ac grids through a
/// dc link (GFM sending end, GFL receiving end).
pub const TESTCASE: &str = include_str!("../testcase.toml");

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub system: SystemSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub scan: ScanSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    pub converter: BTreeMap<String, ConverterSection>,
    #[serde(default)]
    pub ac_grid: BTreeMap<String, AcGridSection>,
    #[serde(default)]
    pub dc_network: BTreeMap<String, DcNetworkSection>,
    #[serde(default)]
    pub case: BTreeMap<String, CaseSection>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub f1_hz: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub grid_points: usize,
    pub capture_radius: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub increment: f64,
    /// `refined` (complex root) or `grid` (seeding jω point).
    pub evaluate_at: String,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let m = ModeOptions::default();
        Self {
            f_min_hz: m.f_min,
            f_max_hz: m.f_max,
            grid_points: m.grid_points,
            capture_radius: m.capture_radius,
            tolerance: m.tolerance,
            max_iterations: m.max_iterations,
            increment: 0.05,
            evaluate_at: "refined".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub points: usize,
    pub ac_fraction: f64,
    pub dc_fraction: f64,
    pub sync_fraction: f64,
    pub dt_max: f64,
    pub min_periods: usize,
    pub cond_cap: f64,
    /// Order of the delay approximant in the scan rig.
    pub pade_order: usize,
    /// `grid` feeds each converter through its own ac grid impedance,
    /// `stiff` uses an ideal source at the PoC.
    pub rig: String,
}

impl Default for ScanSection {
    fn default() -> Self {
        let s = ScanOptions::default();
        Self {
            f_min_hz: 2.0,
            f_max_hz: 500.0,
            points: 20,
            ac_fraction: s.ac_fraction,
            dc_fraction: s.dc_fraction,
            sync_fraction: s.sync_fraction,
            dt_max: s.dt_max,
            min_periods: s.min_periods,
            cond_cap: s.cond_cap,
            pade_order: s.pade_order,
            rig: "grid".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub pade_order: usize,
    pub t_end: f64,
    pub dt: f64,
    pub kick: f64,
    pub blowup_bound: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let p = ProbeOptions::default();
        Self {
            pade_order: 2,
            t_end: p.t_end,
            dt: p.dt,
            kick: p.kick,
            blowup_bound: p.blowup_bound,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodesSection {
    pub sync: usize,
    pub ac: usize,
    pub dc: usize,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum KindKey {
    Gfl,
    Gfm,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConverterSection {
    pub kind: KindKey,
    pub nodes: NodesSection,
    /// Rated power (VA).
    pub s_rated: f64,
    /// Rated phase voltage amplitude (V).
    pub v_ac: f64,
    /// Rated dc voltage (V); the regulated value for a GFL converter.
    pub v_dc: f64,
    pub r_f: f64,
    pub l_f: f64,
    /// Computation and PWM delay (s).
    pub delay: f64,
    pub current_bandwidth_hz: f64,
    #[serde(default = "yes")]
    pub decoupling: bool,
    /// PoC voltage amplitude (pu).
    #[serde(default = "one")]
    pub u_poc: f64,
    /// Active power absorbed at the PoC (pu); unused for the dc-voltage
    /// regulating converter.
    #[serde(default)]
    pub p: f64,
    /// Reactive power absorbed at the PoC (pu).
    #[serde(default)]
    pub q: f64,
    pub pll: Option<PllSection>,
    pub dc_voltage: Option<PiSection>,
    pub power: Option<PowerSection>,
    pub vsg: Option<VsgSection>,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PllSection {
    pub bandwidth_hz: f64,
    #[serde(default = "default_zeta")]
    pub zeta: f64,
}

fn default_zeta() -> f64 {
    0.707
}

/// PI gains in per unit.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PiSection {
    pub kp: f64,
    pub ki: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PowerSection {
    pub kp: f64,
    pub ki: f64,
    #[serde(default)]
    pub channel: PowerChannel,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VsgSection {
    pub inertia: f64,
    pub damping: f64,
    pub r_v: f64,
    pub l_v: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AcGridSection {
    pub node: usize,
    pub scr: Option<f64>,
    #[serde(default = "default_xr")]
    pub x_over_r: f64,
    pub r: Option<f64>,
    pub l: Option<f64>,
}

fn default_xr() -> f64 {
    10.0
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CapacitorSection {
    pub node: usize,
    pub c: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LineSection {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub l: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DcNetworkSection {
    #[serde(default)]
    pub capacitor: Vec<CapacitorSection>,
    #[serde(default)]
    pub line: Vec<LineSection>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CaseSection {
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub base: toml::Table,
    #[serde(default)]
    pub perturbed: toml::Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Base,
    Perturbed,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Perturbed => "perturbed",
        }
    }
}

fn config_error(path: &str, line: Option<usize>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| {
        let line = e.span().map(|s| line_of(text, s.start));
        config_error("", line, e.message().to_string())
    })
}

fn deserialize(text: &str, table: toml::Table) -> Result<CaseConfig> {
    // Re-serializing keeps spans meaningful only for the original text, so
    // deserialize from the text when no overrides were applied.
    let rendered = toml::to_string(&table).map_err(|e| config_error("", None, e.to_string()))?;
    let src = if parse_table(text).ok().as_ref() == Some(&table) {
        text
    } else {
        rendered.as_str()
    };
    let de = toml::from_str::<CaseConfig>(src);
    de.map_err(|e| {
        let line = e.span().map(|s| line_of(src, s.start));
        let path = e.message().split('`').nth(1).unwrap_or("").to_string();
        config_error(&path, line, e.message().to_string())
    })
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = table;
    for (k, part) in parts.iter().enumerate() {
        if k + 1 == parts.len() {
            if !cur.contains_key(*part) && !OPTIONAL_LEAVES.contains(part) {
                return Err(config_error(path, None, "override targets an unknown key"));
            }
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        cur = match cur.get_mut(*part) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(config_error(path, None, "override targets an unknown table")),
        };
    }
    Ok(())
}

/// Keys with defaults that an override may introduce.
const OPTIONAL_LEAVES: [&str; 7] = ["x_over_r", "decoupling", "u_poc", "p", "q", "zeta", "channel"];

impl CaseConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table = parse_table(text)?;
        let cfg = deserialize(text, table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse `text` and apply the overrides of `case` for `variant`.
    pub fn parse_case(text: &str, case: &str, variant: Variant) -> Result<Self> {
        let root = Self::parse(text)?;
        let section = root
            .case
            .get(case)
            .ok_or_else(|| config_error(&format!("case.{case}"), None, "no such case"))?;
        let overrides = match variant {
            Variant::Base => &section.base,
            Variant::Perturbed => {
                // The perturbed run starts from the base overrides.
                let mut all = section.base.clone();
                for (k, v) in &section.perturbed {
                    all.insert(k.clone(), v.clone());
                }
                return Self::with_overrides(text, &all);
            }
        };
        Self::with_overrides(text, overrides)
    }

    /// Apply dotted-path overrides (e.g. `converter.SEC.vsg.damping = 1.0`).
    pub fn with_overrides(text: &str, overrides: &toml::Table) -> Result<Self> {
        let mut table = parse_table(text)?;
        for (path, value) in overrides {
            set_path(&mut table, path, value.clone())?;
        }
        let cfg = deserialize(text, table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |path: String, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(config_error(&path, None, format!("must be positive, got {v}")))
            }
        };
        let nonneg = |path: String, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(config_error(&path, None, format!("must be non-negative, got {v}")))
            }
        };
        positive("system.f1_hz".into(), self.system.f1_hz)?;
        if self.converter.is_empty() {
            return Err(config_error("converter", None, "at least one converter is required"));
        }
        for (name, c) in &self.converter {
            let p = |k: &str| format!("converter.{name}.{k}");
            for (k, v) in [
                ("s_rated", c.s_rated),
                ("v_ac", c.v_ac),
                ("v_dc", c.v_dc),
                ("l_f", c.l_f),
                ("current_bandwidth_hz", c.current_bandwidth_hz),
                ("u_poc", c.u_poc),
            ] {
                positive(p(k), v)?;
            }
            nonneg(p("r_f"), c.r_f)?;
            nonneg(p("delay"), c.delay)?;
            let has_gfl = [c.pll.is_some(), c.dc_voltage.is_some(), c.power.is_some()];
            match c.kind {
                KindKey::Gfl => {
                    if has_gfl.contains(&false) {
                        return Err(config_error(
                            &p("kind"),
                            None,
                            "a gfl converter needs pll, dc_voltage and power sections",
                        ));
                    }
                    if c.vsg.is_some() {
                        return Err(config_error(
                            &p("vsg"),
                            None,
                            "a gfl converter takes exactly one sync section (pll)",
                        ));
                    }
                    let pll = c.pll.as_ref().unwrap();
                    positive(p("pll.bandwidth_hz"), pll.bandwidth_hz)?;
                    positive(p("pll.zeta"), pll.zeta)?;
                    let dc = c.dc_voltage.as_ref().unwrap();
                    nonneg(p("dc_voltage.kp"), dc.kp)?;
                    nonneg(p("dc_voltage.ki"), dc.ki)?;
                    let pw = c.power.as_ref().unwrap();
                    nonneg(p("power.kp"), pw.kp)?;
                    nonneg(p("power.ki"), pw.ki)?;
                }
                KindKey::Gfm => {
                    if has_gfl.contains(&true) {
                        return Err(config_error(
                            &p("kind"),
                            None,
                            "a gfm converter takes exactly one sync section (vsg)",
                        ));
                    }
                    let v = c
                        .vsg
                        .as_ref()
                        .ok_or_else(|| config_error(&p("vsg"), None, "a gfm converter needs a vsg section"))?;
                    positive(p("vsg.inertia"), v.inertia)?;
                    nonneg(p("vsg.damping"), v.damping)?;
                    nonneg(p("vsg.r_v"), v.r_v)?;
                    positive(p("vsg.l_v"), v.l_v)?;
                }
            }
        }
        for (name, g) in &self.ac_grid {
            let p = |k: &str| format!("ac_grid.{name}.{k}");
            match (g.scr, g.r, g.l) {
                (Some(scr), None, None) => {
                    positive(p("scr"), scr)?;
                    positive(p("x_over_r"), g.x_over_r)?;
                }
                (None, Some(r), Some(l)) => {
                    nonneg(p("r"), r)?;
                    positive(p("l"), l)?;
                }
                _ => return Err(config_error(&p("scr"), None, "give either scr or both r and l")),
            }
        }
        for (name, n) in &self.dc_network {
            for (k, c) in n.capacitor.iter().enumerate() {
                positive(format!("dc_network.{name}.capacitor[{k}].c"), c.c)?;
            }
            for (k, l) in n.line.iter().enumerate() {
                positive(format!("dc_network.{name}.line[{k}].r"), l.r)?;
                positive(format!("dc_network.{name}.line[{k}].l"), l.l)?;
            }
        }
        let a = &self.analysis;
        positive("analysis.f_min_hz".into(), a.f_min_hz)?;
        if !(a.f_max_hz > a.f_min_hz) {
            return Err(config_error("analysis.f_max_hz", None, "must exceed f_min_hz"));
        }
        if a.grid_points < 2 {
            return Err(config_error("analysis.grid_points", None, "need at least 2 points"));
        }
        if !(a.increment > 0.0 && a.increment <= 0.2) {
            return Err(config_error("analysis.increment", None, "must lie in (0, 0.2]"));
        }
        if !matches!(self.scan.rig.as_str(), "grid" | "stiff") {
            return Err(config_error("scan.rig", None, "expected \"grid\" or \"stiff\""));
        }
        if !matches!(a.evaluate_at.as_str(), "refined" | "grid") {
            return Err(config_error(
                "analysis.evaluate_at",
                None,
                "expected \"refined\" or \"grid\"",
            ));
        }
        let s = &self.scan;
        positive("scan.f_min_hz".into(), s.f_min_hz)?;
        if !(s.f_max_hz >= s.f_min_hz) {
            return Err(config_error("scan.f_max_hz", None, "must not be below f_min_hz"));
        }
        if s.points == 0 {
            return Err(config_error("scan.points", None, "empty frequency list"));
        }
        positive("scan.dt_max".into(), s.dt_max)?;
        positive("simulation.t_end".into(), self.simulation.t_end)?;
        positive("simulation.dt".into(), self.simulation.dt)?;
        Ok(())
    }

    pub fn omega1(&self) -> f64 {
        2.0 * PI * self.system.f1_hz
    }

    /// Converter parameters in physical units.
    pub fn converter_spec(&self, name: &str) -> Result<ConverterSpec> {
        let c = self
            .converter
            .get(name)
            .ok_or_else(|| config_error(&format!("converter.{name}"), None, "no such converter"))?;
        let w1 = self.omega1();
        let bases = Bases::from_ratings(c.s_rated, c.v_ac, c.v_dc, self.system.f1_hz);
        let zb = bases.z_ac();
        let l_f = c.l_f * zb / w1;
        let r_f = c.r_f * zb;
        let wc = 2.0 * PI * c.current_bandwidth_hz;
        let current = PiGains::new(l_f * wc, r_f * wc);
        let control = match c.kind {
            KindKey::Gfl => {
                let pll = c.pll.as_ref().unwrap();
                let dc = c.dc_voltage.as_ref().unwrap();
                let pw = c.power.as_ref().unwrap();
                let dc_scale = bases.i_ac / bases.v_dc;
                let p_scale = bases.i_ac / bases.s;
                Control::Gfl {
                    pll: PiGains::pll_from_bandwidth(pll.bandwidth_hz, pll.zeta, c.u_poc * c.v_ac),
                    dc_voltage: PiGains::new(dc.kp * dc_scale, dc.ki * dc_scale),
                    power: PiGains::new(pw.kp * p_scale, pw.ki * p_scale),
                    channel: pw.channel,
                }
            }
            KindKey::Gfm => {
                let v = c.vsg.as_ref().unwrap();
                Control::Gfm {
                    inertia: v.inertia,
                    damping: v.damping,
                    r_v: v.r_v * zb,
                    l_v: v.l_v * zb / w1,
                }
            }
        };
        let spec = ConverterSpec {
            name: name.to_string(),
            r_f,
            l_f,
            delay: c.delay,
            current,
            decoupling: c.decoupling,
            omega1: w1,
            bases,
            control,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Physical R and L of an ac grid, converting SCR on the attached
    /// converter's ratings when given that way.
    pub fn grid_rl(&self, name: &str) -> Result<(f64, f64)> {
        let g = &self.ac_grid[name];
        match (g.scr, g.r, g.l) {
            (Some(scr), _, _) => {
                let (_, c) = self
                    .converter
                    .iter()
                    .find(|(_, c)| c.nodes.ac == g.node)
                    .ok_or_else(|| {
                        config_error(
                            &format!("ac_grid.{name}.node"),
                            None,
                            "no converter at this node to rate the SCR",
                        )
                    })?;
                let zb = Bases::from_ratings(c.s_rated, c.v_ac, c.v_dc, self.system.f1_hz).z_ac();
                let z = zb / scr;
                let r = z / (1.0 + g.x_over_r * g.x_over_r).sqrt();
                Ok((r, g.x_over_r * r / self.omega1()))
            }
            (None, Some(r), Some(l)) => Ok((r, l)),
            _ => Err(config_error(
                &format!("ac_grid.{name}"),
                None,
                "give either scr or both r and l",
            )),
        }
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        let mut converters = Vec::new();
        for (name, c) in &self.converter {
            let spec = self.converter_spec(name)?;
            let s = spec.bases.s;
            converters.push(ConverterSite {
                spec,
                sync_node: c.nodes.sync,
                ac_node: c.nodes.ac,
                dc_node: c.nodes.dc,
                u_poc: c.u_poc * c.v_ac,
                p: c.p * s,
                q: c.q * s,
            });
        }
        let mut ac_grids = Vec::new();
        for (name, g) in &self.ac_grid {
            let (r, l) = self.grid_rl(name)?;
            ac_grids.push(AcGrid {
                label: name.clone(),
                node: g.node,
                r,
                l,
            });
        }
        let dc_networks = self
            .dc_network
            .iter()
            .map(|(name, n)| DcNetwork {
                label: name.clone(),
                capacitors: n.capacitor.iter().map(|c| (c.node, c.c)).collect(),
                lines: n
                    .line
                    .iter()
                    .map(|l| DcLine {
                        from: l.from,
                        to: l.to,
                        r: l.r,
                        l: l.l,
                    })
                    .collect(),
            })
            .collect();
        let sys = SystemSpec {
            omega1: self.omega1(),
            converters,
            ac_grids,
            dc_networks,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn mode_options(&self) -> ModeOptions {
        let a = &self.analysis;
        ModeOptions {
            f_min: a.f_min_hz,
            f_max: a.f_max_hz,
            grid_points: a.grid_points,
            capture_radius: a.capture_radius,
            tolerance: a.tolerance,
            max_iterations: a.max_iterations,
            evaluation: if a.evaluate_at == "grid" {
                EvaluationPoint::GridPoint
            } else {
                EvaluationPoint::RefinedRoot
            },
            loci: LociOptions::default(),
        }
    }

    /// Scan settings for the named converter.
    pub fn scan_options(&self, name: &str) -> Result<ScanOptions> {
        let s = &self.scan;
        let conv = self
            .converter
            .get(name)
            .ok_or_else(|| config_error("converter", None, format!("no converter named {name}")))?;
        let rig = if s.rig == "grid" {
            match self.ac_grid.iter().find(|(_, g)| g.node == conv.nodes.ac) {
                Some((g, _)) => Some(self.grid_rl(g)?),
                None => None,
            }
        } else {
            None
        };
        Ok(ScanOptions {
            ac_fraction: s.ac_fraction,
            dc_fraction: s.dc_fraction,
            sync_fraction: s.sync_fraction,
            dt_max: s.dt_max,
            min_periods: s.min_periods,
            cond_cap: s.cond_cap,
            pade_order: s.pade_order,
            rig,
        })
    }

    pub fn probe_options(&self) -> ProbeOptions {
        let s = &self.simulation;
        ProbeOptions {
            t_end: s.t_end,
            dt: s.dt,
            kick: s.kick,
            blowup_bound: s.blowup_bound,
            ..ProbeOptions::default()
        }
    }

    pub fn scan_grid(&self) -> Vec<f64> {
        let s = &self.scan;
        if s.points == 1 {
            vec![s.f_min_hz]
        } else {
            crate::lti::logspace(s.f_min_hz, s.f_max_hz, s.points)
        }
    }
}
