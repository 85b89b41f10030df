//! Batch front-end: load a case file, run one pipeline, write CSV and text
//! reports into an output directory.

pub mod report;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use syncnode::config::{CaseConfig, Variant, TESTCASE};
use syncnode::converter::build_eim;
use syncnode::fma::{analyze, Analysis, Verdict};
use syncnode::scanlab::{linearize_ss, probe_stability, scan_eim, ProbeResult, SimModel, StateSpace};
use syncnode::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DISAGREE: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "syncnode", version, about = "Sync-node EIM modeling and modal analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate every converter's four-port EIM over a frequency grid.
    Build(Common),
    /// Measure each converter's EIM in the time domain and compare.
    Scan(Common),
    /// Locate modes, participation factors and component sensitivities.
    Analyze(Common),
    /// Cross-check the modal verdict with state-space eigenvalues and a
    /// time-domain run.
    Oracle(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Base,
    Perturbed,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Case file (TOML); the bundled testcase when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Apply the overrides of a `[case.NAME]` section.
    #[arg(long)]
    pub case: Option<String>,
    #[arg(long, value_enum, default_value = "perturbed", requires = "case")]
    pub variant: VariantArg,
    #[arg(long)]
    pub freq_min: Option<f64>,
    #[arg(long)]
    pub freq_max: Option<f64>,
    #[arg(long)]
    pub grid_points: Option<usize>,
    /// Relative increment for the sensitivity validation (0 disables it).
    #[arg(long)]
    pub increment: Option<f64>,
    /// Seed for randomized runs; recorded in the text reports.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Disagreement(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Disagreement(_) => EXIT_DISAGREE,
            CliError::Numerical(_) => EXIT_NUMERIC,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Disagreement(m) => write!(f, "oracle disagreement: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. }
            | Error::InvalidSpec(_)
            | Error::InvalidGrid(_)
            | Error::InvalidNetwork(_)
            | Error::AmplitudeZero => CliError::Config(e.to_string()),
            Error::AtFrequency { ref source, .. } if matches!(**source, Error::AmplitudeZero) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Loaded case plus the effective command-line settings.
pub struct Setup {
    pub cfg: CaseConfig,
    pub label: String,
    pub opts: Common,
}

impl Setup {
    pub fn load(opts: &Common) -> CliResult<Self> {
        let (text, source) = match &opts.config {
            Some(p) => (
                fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
                p.display().to_string(),
            ),
            None => (TESTCASE.to_string(), "bundled testcase".to_string()),
        };
        let (cfg, label) = match &opts.case {
            Some(name) => {
                let v = match opts.variant {
                    VariantArg::Base => Variant::Base,
                    VariantArg::Perturbed => Variant::Perturbed,
                };
                (
                    CaseConfig::parse_case(&text, name, v)?,
                    format!("{source}, case {name} {}", v.label()),
                )
            }
            None => (CaseConfig::parse(&text)?, source),
        };
        if let Some(inc) = opts.increment {
            if !(0.0..=0.2).contains(&inc) {
                return Err(CliError::Config(format!("--increment {inc} outside [0, 0.2]")));
            }
        }
        Ok(Self {
            cfg,
            label,
            opts: opts.clone(),
        })
    }

    /// Frequency grid from `f_min`, `f_max`, `points` with the flags applied.
    pub fn grid(&self, f_min: f64, f_max: f64, points: usize) -> CliResult<Vec<f64>> {
        let lo = self.opts.freq_min.unwrap_or(f_min);
        let hi = self.opts.freq_max.unwrap_or(f_max);
        let n = self.opts.grid_points.unwrap_or(points);
        if n == 0 {
            return Err(CliError::Config("frequency grid is empty".into()));
        }
        if !(lo > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) {
            return Err(CliError::Config(format!("frequency range [{lo}, {hi}] Hz is invalid")));
        }
        Ok(if n == 1 {
            vec![lo]
        } else {
            syncnode::lti::logspace(lo, hi, n)
        })
    }

    fn out_dir(&self) -> CliResult<&Path> {
        fs::create_dir_all(&self.opts.out)
            .map_err(|e| CliError::Config(format!("{}: {e}", self.opts.out.display())))?;
        Ok(&self.opts.out)
    }

    fn write(&self, name: &str, body: &str) -> CliResult<PathBuf> {
        let path = self.out_dir()?.join(name);
        fs::write(&path, body).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Run a parsed command, returning the lines to print on success.
pub fn run(cli: &Cli) -> CliResult<Vec<String>> {
    match &cli.command {
        Command::Build(c) => cmd_build(&Setup::load(c)?),
        Command::Scan(c) => cmd_scan(&Setup::load(c)?),
        Command::Analyze(c) => cmd_analyze(&Setup::load(c)?),
        Command::Oracle(c) => cmd_oracle(&Setup::load(c)?),
    }
}

pub fn cmd_build(s: &Setup) -> CliResult<Vec<String>> {
    let a = &s.cfg.analysis;
    let grid = s.grid(a.f_min_hz, a.f_max_hz, a.grid_points)?;
    let sys = s.cfg.system_spec()?;
    let eq = sys.equilibrium()?;
    let mut lines = Vec::new();
    for (site, op) in sys.converters.iter().zip(&eq.ops) {
        let eim = build_eim(&site.spec, op)?;
        let (dq, pn) = report::eim_csv(&eim, &grid)?;
        let name = &site.spec.name;
        let p1 = s.write(&format!("eim_{name}_dq.csv"), &dq)?;
        let p2 = s.write(&format!("eim_{name}_pn.csv"), &pn)?;
        lines.push(format!(
            "{name} ({}): {} frequencies -> {}, {}",
            site.spec.kind().label(),
            grid.len(),
            p1.display(),
            p2.display()
        ));
    }
    Ok(lines)
}

pub fn cmd_scan(s: &Setup) -> CliResult<Vec<String>> {
    let sc = &s.cfg.scan;
    let grid = s.grid(sc.f_min_hz, sc.f_max_hz, sc.points)?;
    let sys = s.cfg.system_spec()?;
    let eq = sys.equilibrium()?;
    let mut lines = Vec::new();
    let mut summary = String::from(report::SCAN_SUMMARY_HEADER);
    for (site, op) in sys.converters.iter().zip(&eq.ops) {
        let name = &site.spec.name;
        let eim = build_eim(&site.spec, op)?;
        let res = scan_eim(&site.spec, op, &grid, &s.cfg.scan_options(name)?)?;
        let cmp = report::scan_comparison(&eim, &res)?;
        let p = s.write(&format!("scan_{name}.csv"), &cmp.csv)?;
        for e in &cmp.worst {
            summary.push_str(&format!("{name},{},{:.9e},{:.9e}\n", e.entry, e.error, e.f_hz));
        }
        let w = cmp.overall();
        lines.push(format!(
            "{name}: worst relative error {:.3}% ({} at {:.2} Hz) -> {}",
            100.0 * w.error,
            w.entry,
            w.f_hz,
            p.display()
        ));
    }
    let p = s.write("scan_summary.csv", &summary)?;
    lines.push(format!("summary -> {}", p.display()));
    Ok(lines)
}

fn run_analysis(s: &Setup) -> CliResult<(syncnode::ein::EinSystem, Analysis)> {
    let mut mo = s.cfg.mode_options();
    mo.f_min = s.opts.freq_min.unwrap_or(mo.f_min);
    mo.f_max = s.opts.freq_max.unwrap_or(mo.f_max);
    mo.grid_points = s.opts.grid_points.unwrap_or(mo.grid_points);
    s.grid(mo.f_min, mo.f_max, mo.grid_points)?;
    let inc = s.opts.increment.unwrap_or(s.cfg.analysis.increment);
    let sys = s.cfg.system_spec()?;
    let eq = sys.equilibrium()?;
    let ein = sys.ein(&eq)?;
    let a = analyze(&ein, &mo, (inc > 0.0).then_some(inc))?;
    Ok((ein, a))
}

pub fn cmd_analyze(s: &Setup) -> CliResult<Vec<String>> {
    let (ein, a) = run_analysis(s)?;
    let text = report::analysis_text(&s.label, s.opts.seed, &ein, &a);
    s.write("report.txt", &text)?;
    s.write("modes.csv", &report::modes_csv(&a))?;
    s.write("node_pf.csv", &report::node_pf_csv(&a))?;
    s.write("sensitivity.csv", &report::sensitivity_csv(&a))?;
    s.write("validation.csv", &report::validation_csv(&a))?;
    let mut lines = vec![report::verdict_line(&a)];
    lines.push(format!("reports -> {}", s.opts.out.display()));
    Ok(lines)
}

/// Outcome of comparing the modal verdict with the two time-domain oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleComparison {
    pub lines: Vec<String>,
    pub agree: bool,
}

/// Relative frequency tolerance between an EIN mode and the nearest
/// state-space eigenvalue.
pub const SS_FREQ_TOL: f64 = 0.01;
/// Same against the simulated oscillation.
pub const SIM_FREQ_TOL: f64 = 0.05;

pub fn compare_oracles(a: &Analysis, ss: &StateSpace, probe: &ProbeResult) -> OracleComparison {
    let ein_unstable = a.verdict() == Verdict::Unstable;
    let ss_unstable = !ss.unstable().is_empty();
    let label = |u: bool| if u { "unstable" } else { "stable" };
    let mut agree = ein_unstable == ss_unstable && ein_unstable == probe.unstable;
    let mut lines = vec![format!(
        "verdicts: EIN {}, state space {}, simulation {}",
        label(ein_unstable),
        label(ss_unstable),
        label(probe.unstable)
    )];
    for m in a.modes.iter().filter(|m| m.mode.is_unstable()) {
        let s = m.mode.s;
        let f = m.mode.freq_hz();
        let Some(near) = ss
            .eigenvalues
            .iter()
            .min_by(|x, y| (*x - s).norm().total_cmp(&(*y - s).norm()))
        else {
            agree = false;
            lines.push(format!("mode {f:.4} Hz: state space has no eigenvalues"));
            continue;
        };
        let f_ss = near.im.abs() / std::f64::consts::TAU;
        let e_ss = (f - f_ss).abs() / f_ss.max(f64::MIN_POSITIVE);
        agree &= e_ss < SS_FREQ_TOL;
        let mut line = format!(
            "mode {f:.4} Hz (s = {:.4}{:+.4}j): state space {f_ss:.4} Hz ({:.2}%)",
            s.re,
            s.im,
            100.0 * e_ss
        );
        match probe.peak_hz {
            Some(fp) => {
                let e = (f - fp).abs() / fp;
                agree &= e < SIM_FREQ_TOL;
                line += &format!(", simulation {fp:.4} Hz ({:.2}%)", 100.0 * e);
            }
            None => {
                agree = false;
                line += ", simulation shows no oscillation";
            }
        }
        lines.push(line);
    }
    OracleComparison { lines, agree }
}

pub fn cmd_oracle(s: &Setup) -> CliResult<Vec<String>> {
    let (_, a) = run_analysis(s)?;
    let sys = s.cfg.system_spec()?;
    let eq = sys.equilibrium()?;
    let model = SimModel::from_system(&sys, &eq, s.cfg.simulation.pade_order)?;
    let ss = linearize_ss(&model)?;
    let probe = probe_stability(&model, &s.cfg.probe_options())?;
    s.write("ss_eigenvalues.csv", &report::eigenvalues_csv(&ss))?;
    let cmp = compare_oracles(&a, &ss, &probe);
    let mut text = format!("case: {}\nseed: {}\n", s.label, s.opts.seed);
    text += &format!(
        "states: {}\nprobe: growth {:.4e}, blowup at {}, peak {}\n",
        model.len(),
        probe.growth,
        probe
            .blowup_at
            .map(|t| format!("{t:.4} s"))
            .unwrap_or_else(|| "none".into()),
        probe
            .peak_hz
            .map(|f| format!("{f:.4} Hz"))
            .unwrap_or_else(|| "none".into())
    );
    for l in &cmp.lines {
        text += l;
        text.push('\n');
    }
    text += if cmp.agree {
        "result: agree\n"
    } else {
        "result: DISAGREE\n"
    };
    s.write("oracle.txt", &text)?;
    if cmp.agree {
        Ok(cmp.lines)
    } else {
        Err(CliError::Disagreement(cmp.lines.join("; ")))
    }
}
