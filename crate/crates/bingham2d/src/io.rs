//! Run configuration, output writers, checkpoints, and the drivers behind
//! the command-line verbs: transient runs, the channel convergence study,
//! and the self-check property suites.
//!
//! Every floating-point number leaves through [`fmt_f64`], which prints 17
//! significant digits, enough for an exact `f64` round trip. Writers build
//! the complete file in memory and write it in one call, so a fixed input
//! produces byte-identical output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use faer::prelude::*;
use faer::sparse::SparseColMat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cases::{self, Case, ChannelExact};
use crate::diagnostics::{
    active_fraction_shear, active_fraction_von_mises, div_inf_norm, l2_norm_p0_sq,
    pressure_error_l2_sq, rate, shear_active_flags, velocity_error_h1_sq,
    weighted_velocity_l2_sq,
};
use crate::fespace::{project_div_free, FeSpace};
use crate::forms::{
    assemble, c1_form, c2_form, kink_margin, rho_upwind_seminorm_sq, u_upwind_seminorm_sq,
    velocity_constraints, BoundaryConds, Constraints, FacetWeight, Problem, SideBc,
};
use crate::huber::{tensor_mag, Huber, Mat2};
use crate::mesh::{Mesh, Split};
use crate::ssn::SsnOptions;
use crate::timeloop::{GuardMode, Simulation, State, TimeLoopError, TimeScheme};

/// Formats with 17 significant digits; `text.parse::<f64>()` recovers the
/// exact value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// Configuration

/// A configuration problem: unreadable file, malformed TOML, an unknown or
/// ill-typed key, or a value outside its admissible range. The message
/// names the offending key and, where the key appears in the file, its
/// line.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// The built-in benchmark selected by the top-level `case` key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseName {
    Channel,
    Cavity,
    RayleighTaylor,
    Droplet,
}

impl CaseName {
    pub fn as_str(self) -> &'static str {
        match self {
            CaseName::Channel => "channel",
            CaseName::Cavity => "cavity",
            CaseName::RayleighTaylor => "rayleigh-taylor",
            CaseName::Droplet => "droplet",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "channel" => Some(CaseName::Channel),
            "cavity" => Some(CaseName::Cavity),
            "rayleigh-taylor" => Some(CaseName::RayleighTaylor),
            "droplet" => Some(CaseName::Droplet),
            _ => None,
        }
    }

    /// Default vertical resolution keeping cells square in the case domain.
    fn default_ny(self, nx: usize) -> usize {
        match self {
            CaseName::Channel | CaseName::Cavity => nx,
            CaseName::RayleighTaylor => 4 * nx,
            CaseName::Droplet => (3 * nx).div_ceil(2),
        }
    }

    /// Mirror-symmetric cases default to the alternating split, which is
    /// symmetric about the vertical midline for even `nx`.
    fn default_split(self) -> Split {
        match self {
            CaseName::Channel | CaseName::Cavity => Split::Uniform,
            CaseName::RayleighTaylor | CaseName::Droplet => Split::Alternating,
        }
    }
}

/// A fully resolved run description: every default applied, every value
/// validated. [`resolved_toml`] echoes it back as a parseable config.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub case: CaseName,
    pub nx: usize,
    pub ny: usize,
    pub split: Split,
    /// Rayleigh-Taylor density contrast; unused by the other cases.
    pub atwood: f64,
    pub heavy_on_top: bool,
    pub eta: f64,
    pub tau_s: f64,
    pub gamma: f64,
    pub dt: f64,
    pub t_end: f64,
    pub scheme: TimeScheme,
    pub a0: f64,
    pub ssn_tol: f64,
    pub ssn_max_iter: usize,
    pub ssn_damping: f64,
    pub ssn_project: bool,
    pub facet_weight: FacetWeight,
    pub clamp_density: bool,
    pub rho_guard: f64,
    /// Checkpoint cadence in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    /// Field-file cadence in steps; 0 disables field output.
    pub every: usize,
}

impl RunConfig {
    /// Defaults for a given case with everything else unset.
    pub fn defaults(case: CaseName) -> Self {
        let nx = 32;
        RunConfig {
            case,
            nx,
            ny: case.default_ny(nx),
            split: case.default_split(),
            atwood: 0.5,
            heavy_on_top: true,
            eta: 1.0,
            tau_s: 0.0,
            gamma: 1e3,
            dt: 0.1,
            t_end: 1.0,
            scheme: TimeScheme::Bdf2,
            a0: 10.0,
            ssn_tol: 1e-5,
            ssn_max_iter: 50,
            ssn_damping: 1.0,
            ssn_project: true,
            facet_weight: FacetWeight::Nu,
            clamp_density: false,
            rho_guard: 1e-8,
            checkpoint_every: 0,
            out_dir: PathBuf::from("out"),
            every: 1,
        }
    }

    /// Instantiates the selected benchmark geometry and initial data.
    pub fn build_case(&self) -> Case {
        match self.case {
            CaseName::Channel => cases::channel(self.nx, self.ny, self.split, self.tau_s),
            CaseName::Cavity => cases::cavity(self.nx, self.ny, self.split),
            CaseName::RayleighTaylor => {
                cases::rayleigh_taylor(self.nx, self.ny, self.split, self.atwood, self.heavy_on_top)
            }
            CaseName::Droplet => cases::droplet(self.nx, self.ny, self.split),
        }
    }

    pub fn huber(&self) -> Huber {
        Huber { eta: self.eta, tau_s: self.tau_s, gamma: self.gamma }
    }

    pub fn ssn_options(&self) -> SsnOptions {
        SsnOptions {
            tol: self.ssn_tol,
            max_iter: self.ssn_max_iter,
            damping: self.ssn_damping,
            project: self.ssn_project,
        }
    }

    fn simulation<'a>(&self, case: &'a Case, fe: &'a FeSpace, cons: Constraints) -> Simulation<'a> {
        Simulation {
            mesh: &case.mesh,
            fe,
            hub: self.huber(),
            bcs: &case.bcs,
            cons,
            gravity: case.gravity,
            rho_inflow: case.rho_inflow,
            penalty_a0: self.a0,
            facet_weight: self.facet_weight,
            rho_guard: self.rho_guard,
            guard_mode: if self.clamp_density { GuardMode::Clamp } else { GuardMode::Fail },
            scheme: self.scheme,
            dt: self.dt,
            t_end: self.t_end,
            ssn: self.ssn_options(),
        }
    }
}

/// 1-based line of `key = ...` inside `[section]` (empty section name means
/// the top-level region before the first header). Config errors use this to
/// point at the offending line; keys injected by `--set` have no line.
fn key_line(raw: &str, section: &str, key: &str) -> Option<usize> {
    let mut in_region = section.is_empty();
    for (i, line) in raw.lines().enumerate() {
        let t = line.trim_start();
        if let Some(rest) = t.strip_prefix('[') {
            in_region = rest.trim_end().strip_suffix(']').is_some_and(|name| name == section);
            continue;
        }
        if in_region {
            if let Some(rest) = t.strip_prefix(key) {
                let rest = rest.trim_start();
                if rest.starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

/// One config section with typed, default-applying accessors. Every key
/// must be taken exactly once; `finish` rejects what is left over.
struct SectionReader<'a> {
    name: &'a str,
    table: toml::Table,
    raw: &'a str,
}

impl<'a> SectionReader<'a> {
    fn err(&self, key: &str, msg: &str) -> ConfigError {
        let loc = key_line(self.raw, self.name, key)
            .map(|l| format!(" (line {l})"))
            .unwrap_or_default();
        ConfigError(format!("{}: {msg}{loc}", qualified(self.name, key)))
    }

    fn take_f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.table.remove(key) {
            None => Ok(default),
            Some(toml::Value::Float(v)) => Ok(v),
            Some(toml::Value::Integer(v)) => Ok(v as f64),
            Some(_) => Err(self.err(key, "expected a number")),
        }
    }

    fn take_usize(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.table.remove(key) {
            None => Ok(default),
            Some(toml::Value::Integer(v)) if v >= 0 => Ok(v as usize),
            Some(_) => Err(self.err(key, "expected a nonnegative integer")),
        }
    }

    fn take_bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.table.remove(key) {
            None => Ok(default),
            Some(toml::Value::Boolean(v)) => Ok(v),
            Some(_) => Err(self.err(key, "expected true or false")),
        }
    }

    fn take_string(&mut self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.table.remove(key) {
            None => Ok(None),
            Some(toml::Value::String(v)) => Ok(Some(v)),
            Some(_) => Err(self.err(key, "expected a string")),
        }
    }

    fn forbid(&mut self, key: &str, msg: &str) -> Result<(), ConfigError> {
        if self.table.contains_key(key) {
            return Err(self.err(key, msg));
        }
        Ok(())
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some(key) = self.table.keys().next() {
            return Err(self.err(key, "unknown key"));
        }
        Ok(())
    }
}

/// Recursively overlays `src` onto `dst`; scalar values replace, tables
/// merge.
fn merge_tables(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge_tables(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// Parses one `key=value` override. The value is TOML; a bare word is
/// retried as a string, so `--set case=cavity` works without quotes.
fn parse_override(s: &str) -> Result<toml::Table, ConfigError> {
    let direct = s.parse::<toml::Table>();
    if let Ok(t) = direct {
        return Ok(t);
    }
    if let Some((key, value)) = s.split_once('=') {
        if !value.contains('"') {
            if let Ok(t) = format!("{} = \"{}\"", key.trim(), value.trim()).parse::<toml::Table>() {
                return Ok(t);
            }
        }
    }
    Err(ConfigError(format!("invalid override {s:?}: expected key=value with a TOML value")))
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    parse_config_text(&text, &[])
}

/// Parses config text plus `key=value` overrides (applied before
/// validation, addressed with dotted keys such as `physics.tau_s`).
pub fn parse_config_text(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut root: toml::Table =
        text.parse().map_err(|e: toml::de::Error| ConfigError(format!("{e}")))?;
    for s in overrides {
        merge_tables(&mut root, parse_override(s)?);
    }

    let mut top = SectionReader { name: "", table: root, raw: text };
    let case = match top.take_string("case")? {
        Some(s) => CaseName::parse(&s).ok_or_else(|| {
            top.err("case", "unknown case; expected channel, cavity, rayleigh-taylor, or droplet")
        })?,
        None => return Err(ConfigError("missing required key: case".into())),
    };
    let mut cfg = RunConfig::defaults(case);

    let section = |name: &'static str, top: &mut SectionReader| -> Result<SectionReader<'static>, ConfigError> {
        match top.table.remove(name) {
            None => Ok(SectionReader { name, table: toml::Table::new(), raw: "" }),
            Some(toml::Value::Table(t)) => Ok(SectionReader { name, table: t, raw: "" }),
            Some(_) => Err(top.err(name, "expected a [section]")),
        }
    };

    let mut sec = section("case", &mut top)?;
    sec.raw = text;
    {
        let s = &mut sec;
        cfg.nx = s.take_usize("nx", cfg.nx)?;
        if cfg.nx == 0 {
            return Err(s.err("nx", "must be at least 1"));
        }
        cfg.ny = s.take_usize("ny", case.default_ny(cfg.nx))?;
        if cfg.ny == 0 {
            return Err(s.err("ny", "must be at least 1"));
        }
        if let Some(v) = s.take_string("split")? {
            cfg.split = match v.as_str() {
                "uniform" => Split::Uniform,
                "alternating" => Split::Alternating,
                _ => return Err(s.err("split", "expected \"uniform\" or \"alternating\"")),
            };
        }
        if case == CaseName::RayleighTaylor {
            cfg.atwood = s.take_f64("atwood", cfg.atwood)?;
            if !(0.0..1.0).contains(&cfg.atwood) {
                return Err(s.err("atwood", "must lie in [0, 1)"));
            }
            cfg.heavy_on_top = s.take_bool("heavy_on_top", cfg.heavy_on_top)?;
        } else {
            s.forbid("atwood", "applies only to the rayleigh-taylor case")?;
            s.forbid("heavy_on_top", "applies only to the rayleigh-taylor case")?;
        }
    }
    sec.finish()?;

    let mut sec = section("physics", &mut top)?;
    sec.raw = text;
    {
        let s = &mut sec;
        cfg.eta = s.take_f64("eta", cfg.eta)?;
        if !(cfg.eta > 0.0) {
            return Err(s.err("eta", "must be positive"));
        }
        cfg.tau_s = s.take_f64("tau_s", cfg.tau_s)?;
        if !(cfg.tau_s >= 0.0) {
            return Err(s.err("tau_s", &format!("must be nonnegative, got {}", cfg.tau_s)));
        }
        cfg.gamma = s.take_f64("gamma", cfg.gamma)?;
        if !(cfg.gamma > 0.0) {
            return Err(s.err("gamma", "must be positive"));
        }
    }
    sec.finish()?;

    let mut sec = section("time", &mut top)?;
    sec.raw = text;
    {
        let s = &mut sec;
        cfg.dt = s.take_f64("dt", cfg.dt)?;
        if !(cfg.dt > 0.0) {
            return Err(s.err("dt", "must be positive"));
        }
        cfg.t_end = s.take_f64("t_end", cfg.t_end)?;
        if !(cfg.t_end > 0.0) {
            return Err(s.err("t_end", "must be positive"));
        }
        let k = cfg.t_end / cfg.dt;
        if (k - k.round()).abs() > 1e-9 * k.round().max(1.0) {
            return Err(s.err("dt", &format!("must divide t_end = {} evenly", cfg.t_end)));
        }
        if let Some(v) = s.take_string("scheme")? {
            cfg.scheme = match v.as_str() {
                "bdf2" => TimeScheme::Bdf2,
                "backward-euler" => TimeScheme::BackwardEuler,
                _ => return Err(s.err("scheme", "expected \"bdf2\" or \"backward-euler\"")),
            };
        }
    }
    sec.finish()?;

    let mut sec = section("solver", &mut top)?;
    sec.raw = text;
    {
        let s = &mut sec;
        cfg.a0 = s.take_f64("a0", cfg.a0)?;
        if !(cfg.a0 > 0.0) {
            return Err(s.err("a0", "must be positive"));
        }
        cfg.ssn_tol = s.take_f64("ssn_tol", cfg.ssn_tol)?;
        if !(cfg.ssn_tol > 0.0) {
            return Err(s.err("ssn_tol", "must be positive"));
        }
        cfg.ssn_max_iter = s.take_usize("ssn_max_iter", cfg.ssn_max_iter)?;
        if cfg.ssn_max_iter == 0 {
            return Err(s.err("ssn_max_iter", "must be at least 1"));
        }
        cfg.ssn_damping = s.take_f64("ssn_damping", cfg.ssn_damping)?;
        if !(cfg.ssn_damping > 0.0 && cfg.ssn_damping <= 1.0) {
            return Err(s.err("ssn_damping", "must lie in (0, 1]"));
        }
        cfg.ssn_project = s.take_bool("ssn_project", cfg.ssn_project)?;
        let weight = s.take_string("facet_weight")?;
        let legacy_mean = s.take_bool("symmetrize_mean", false)?;
        cfg.facet_weight = match weight.as_deref() {
            None => {
                if legacy_mean {
                    FacetWeight::MeanMu
                } else {
                    FacetWeight::Nu
                }
            }
            Some("nu") => FacetWeight::Nu,
            Some("jump-mu") => FacetWeight::JumpMu,
            Some("mean-mu") => FacetWeight::MeanMu,
            Some(_) => {
                return Err(s.err("facet_weight", "expected \"nu\", \"jump-mu\", or \"mean-mu\""))
            }
        };
        if weight.is_some() && legacy_mean && cfg.facet_weight != FacetWeight::MeanMu {
            return Err(s.err("symmetrize_mean", "conflicts with solver.facet_weight"));
        }
        cfg.clamp_density = s.take_bool("clamp_density", cfg.clamp_density)?;
        cfg.rho_guard = s.take_f64("rho_guard", cfg.rho_guard)?;
        if !(cfg.rho_guard > 0.0) {
            return Err(s.err("rho_guard", "must be positive"));
        }
        cfg.checkpoint_every = s.take_usize("checkpoint_every", cfg.checkpoint_every)?;
    }
    sec.finish()?;

    let mut sec = section("output", &mut top)?;
    sec.raw = text;
    {
        let s = &mut sec;
        if let Some(v) = s.take_string("dir")? {
            cfg.out_dir = PathBuf::from(v);
        }
        cfg.every = s.take_usize("every", cfg.every)?;
    }
    sec.finish()?;

    top.finish()?;
    Ok(cfg)
}

/// Echoes a resolved config as TOML that parses back to the same
/// [`RunConfig`]. Written next to outputs on every run.
pub fn resolved_toml(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "case = \"{}\"", cfg.case.as_str());
    let _ = writeln!(s);
    let _ = writeln!(s, "[case]");
    let _ = writeln!(s, "nx = {}", cfg.nx);
    let _ = writeln!(s, "ny = {}", cfg.ny);
    let split = match cfg.split {
        Split::Uniform => "uniform",
        Split::Alternating => "alternating",
    };
    let _ = writeln!(s, "split = \"{split}\"");
    if cfg.case == CaseName::RayleighTaylor {
        let _ = writeln!(s, "atwood = {}", fmt_f64(cfg.atwood));
        let _ = writeln!(s, "heavy_on_top = {}", cfg.heavy_on_top);
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "[physics]");
    let _ = writeln!(s, "eta = {}", fmt_f64(cfg.eta));
    let _ = writeln!(s, "tau_s = {}", fmt_f64(cfg.tau_s));
    let _ = writeln!(s, "gamma = {}", fmt_f64(cfg.gamma));
    let _ = writeln!(s);
    let _ = writeln!(s, "[time]");
    let _ = writeln!(s, "dt = {}", fmt_f64(cfg.dt));
    let _ = writeln!(s, "t_end = {}", fmt_f64(cfg.t_end));
    let scheme = match cfg.scheme {
        TimeScheme::Bdf2 => "bdf2",
        TimeScheme::BackwardEuler => "backward-euler",
    };
    let _ = writeln!(s, "scheme = \"{scheme}\"");
    let _ = writeln!(s);
    let _ = writeln!(s, "[solver]");
    let _ = writeln!(s, "a0 = {}", fmt_f64(cfg.a0));
    let _ = writeln!(s, "ssn_tol = {}", fmt_f64(cfg.ssn_tol));
    let _ = writeln!(s, "ssn_max_iter = {}", cfg.ssn_max_iter);
    let _ = writeln!(s, "ssn_damping = {}", fmt_f64(cfg.ssn_damping));
    let _ = writeln!(s, "ssn_project = {}", cfg.ssn_project);
    let weight = match cfg.facet_weight {
        FacetWeight::Nu => "nu",
        FacetWeight::JumpMu => "jump-mu",
        FacetWeight::MeanMu => "mean-mu",
    };
    let _ = writeln!(s, "facet_weight = \"{weight}\"");
    let _ = writeln!(s, "clamp_density = {}", cfg.clamp_density);
    let _ = writeln!(s, "rho_guard = {}", fmt_f64(cfg.rho_guard));
    let _ = writeln!(s, "checkpoint_every = {}", cfg.checkpoint_every);
    let _ = writeln!(s);
    let _ = writeln!(s, "[output]");
    let _ = writeln!(s, "dir = \"{}\"", cfg.out_dir.display());
    let _ = writeln!(s, "every = {}", cfg.every);
    s
}

// ---------------------------------------------------------------------------
// Errors and file helpers

/// Anything that can end a driver: bad config (exit 2), solver failure
/// (exit 3), or file-system trouble (exit 4).
#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Solve(#[from] TimeLoopError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

impl RunError {
    /// Exit code contract: 0 success, 2 config error, 3 solver
    /// non-convergence, 4 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Solve(TimeLoopError::DtMismatch { .. }) => 2,
            RunError::Solve(_) => 3,
            RunError::Io { .. } | RunError::Checkpoint { .. } => 4,
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    fs::write(path, text).map_err(|source| RunError::Io { path: path.to_path_buf(), source })
}

// ---------------------------------------------------------------------------
// Field output (legacy ASCII VTK)

/// Writes the cell fields of a state vector as a legacy ASCII VTK
/// unstructured grid: scalars `rho`, `p`, `chi` (shear-rate active flag as
/// 0/1), `du_mag` (strain magnitude), and the cell-centroid `velocity`
/// vectors.
pub fn write_fields(
    path: &Path,
    mesh: &Mesh,
    fe: &FeSpace,
    hub: &Huber,
    x: &[f64],
) -> Result<(), RunError> {
    let d = &fe.dofs;
    let u = &x[d.u_range()];
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "bingham2d cell fields");
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", mesh.n_vertices());
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", fmt_f64(v[0]), fmt_f64(v[1]), fmt_f64(0.0));
    }
    let nc = mesh.n_cells();
    let _ = writeln!(s, "CELLS {nc} {}", 4 * nc);
    for cell in &mesh.cells {
        let _ = writeln!(s, "3 {} {} {}", cell[0], cell[1], cell[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {nc}");
    for _ in 0..nc {
        let _ = writeln!(s, "5");
    }
    let _ = writeln!(s, "CELL_DATA {nc}");

    let scalars = |s: &mut String, name: &str, vals: &dyn Fn(usize) -> f64| {
        let _ = writeln!(s, "SCALARS {name} double 1");
        let _ = writeln!(s, "LOOKUP_TABLE default");
        for c in 0..nc {
            let _ = writeln!(s, "{}", fmt_f64(vals(c)));
        }
    };
    scalars(&mut s, "rho", &|c| x[d.rho(c)]);
    scalars(&mut s, "p", &|c| x[d.p(c)]);
    let active = shear_active_flags(fe, hub, u);
    scalars(&mut s, "chi", &|c| if active[c] { 1.0 } else { 0.0 });
    scalars(&mut s, "du_mag", &|c| tensor_mag(&fe.velocity_sym_grad(u, c)));

    let _ = writeln!(s, "VECTORS velocity double");
    for c in 0..nc {
        let v = fe.eval_velocity(mesh, u, c, mesh.centroid[c]);
        let _ = writeln!(s, "{} {} {}", fmt_f64(v[0]), fmt_f64(v[1]), fmt_f64(0.0));
    }
    write_text(path, &s)
}

// ---------------------------------------------------------------------------
// CSV time series

/// Column order contract of `diagnostics.csv` (one row per accepted step,
/// including step 0).
pub const DIAGNOSTICS_HEADER: &str = "step,time,div_inf,rho_l2_sq,rho_extrap_l2_sq,\
     sigma_u_l2_sq,rho_upwind_sq,u_upwind_sq,active_shear,active_von_mises,ssn_iters";

/// Column order contract of `ssn_history.csv` (one row per Newton iterate,
/// iterate 0 being the initial state of each step).
pub const SSN_HISTORY_HEADER: &str = "step,iter,abs_res,rel_res,active_fraction";

/// Column order contract of `convergence.csv` (rates are empty on the
/// coarsest row).
pub const CONVERGENCE_HEADER: &str = "h,e_u,rate_u,e_p,rate_p,div_inf";

fn push_diagnostics_row(
    out: &mut String,
    mesh: &Mesh,
    fe: &FeSpace,
    hub: &Huber,
    state: &State,
    ssn_iters: usize,
) {
    let d = &fe.dofs;
    let rho = &state.x[d.rho_range()];
    let u = &state.x[d.u_range()];
    let extrap: Vec<f64> =
        rho.iter().zip(&state.rho_prev).map(|(a, b)| 2.0 * a - b).collect();
    let cols = [
        fmt_f64(state.time),
        fmt_f64(div_inf_norm(fe, u)),
        fmt_f64(l2_norm_p0_sq(mesh, rho)),
        fmt_f64(l2_norm_p0_sq(mesh, &extrap)),
        fmt_f64(weighted_velocity_l2_sq(mesh, fe, rho, u)),
        fmt_f64(rho_upwind_seminorm_sq(mesh, fe, u, rho)),
        fmt_f64(u_upwind_seminorm_sq(mesh, fe, rho, u, u)),
        fmt_f64(active_fraction_shear(mesh, fe, hub, u)),
        fmt_f64(active_fraction_von_mises(mesh, fe, hub, u)),
    ];
    let _ = writeln!(out, "{},{},{}", state.step, cols.join(","), ssn_iters);
}

fn push_history_rows(out: &mut String, step: usize, report: &crate::ssn::SsnReport) {
    for it in &report.history {
        let _ = writeln!(
            out,
            "{step},{},{},{},{}",
            it.iter,
            fmt_f64(it.abs_res),
            fmt_f64(it.rel_res),
            fmt_f64(it.active_fraction)
        );
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &str = "bingham2d checkpoint 1";

/// Writes a restartable snapshot: the full coefficient vector plus the
/// previous-level density and velocity, each value with full precision, so
/// [`read_checkpoint`] reproduces the state bit for bit.
pub fn write_checkpoint(path: &Path, state: &State) -> Result<(), RunError> {
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(s, "step {}", state.step);
    let _ = writeln!(s, "time {}", fmt_f64(state.time));
    for (label, block) in
        [("x", &state.x), ("rho_prev", &state.rho_prev), ("u_prev", &state.u_prev)]
    {
        let _ = writeln!(s, "{label} {}", block.len());
        for v in block {
            let _ = writeln!(s, "{}", fmt_f64(*v));
        }
    }
    write_text(path, &s)
}

/// Reads a snapshot written by [`write_checkpoint`].
pub fn read_checkpoint(path: &Path) -> Result<State, RunError> {
    let bad = |message: String| RunError::Checkpoint { path: path.to_path_buf(), message };
    let text = fs::read_to_string(path)
        .map_err(|source| RunError::Io { path: path.to_path_buf(), source })?;
    let mut lines = text.lines();
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| bad(format!("truncated file, expected {what}")))
    };
    if next("header")? != CHECKPOINT_MAGIC {
        return Err(bad(format!("missing header {CHECKPOINT_MAGIC:?}")));
    }
    let field = |line: &str, label: &str| -> Result<String, RunError> {
        line.strip_prefix(label)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected {label:?} line, got {line:?}")))
    };
    let step: usize = field(next("step")?, "step")?
        .parse()
        .map_err(|e| bad(format!("bad step count: {e}")))?;
    let time: f64 = field(next("time")?, "time")?
        .parse()
        .map_err(|e| bad(format!("bad time value: {e}")))?;
    let mut blocks = Vec::new();
    for label in ["x", "rho_prev", "u_prev"] {
        let len: usize = field(next(label)?, label)?
            .parse()
            .map_err(|e| bad(format!("bad {label} length: {e}")))?;
        let mut block = Vec::with_capacity(len);
        for i in 0..len {
            let v: f64 = next(&format!("{label}[{i}]"))?
                .parse()
                .map_err(|e| bad(format!("bad value {label}[{i}]: {e}")))?;
            block.push(v);
        }
        blocks.push(block);
    }
    let u_prev = blocks.pop().expect("three blocks");
    let rho_prev = blocks.pop().expect("two blocks");
    let x = blocks.pop().expect("one block");
    Ok(State { step, time, x, rho_prev, u_prev })
}

// ---------------------------------------------------------------------------
// Run driver

/// What a completed transient run leaves behind besides its files.
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub steps: usize,
    pub final_state: State,
    pub total_ssn_iterations: usize,
    pub final_div_inf: f64,
    /// Case caveats, for the caller to surface.
    pub warnings: Vec<String>,
}

/// Runs a configured case to its final time, writing `fields_<step>.vtk`
/// at the configured cadence, `diagnostics.csv`, `ssn_history.csv`, and
/// `config_resolved.toml` into the output directory. A failing step still
/// flushes the series gathered so far and checkpoints the last accepted
/// state before the error propagates.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|source| RunError::Io { path: cfg.out_dir.clone(), source })?;
    write_text(&cfg.out_dir.join("config_resolved.toml"), &resolved_toml(cfg))?;

    let case = cfg.build_case();
    let fe = FeSpace::new(&case.mesh);
    let cons = velocity_constraints(&case.mesh, &fe, &case.bcs);
    let sim = cfg.simulation(&case, &fe, cons);
    let n = sim.n_steps()?;
    let (rho0, u0) = case.initial_fields(&fe);
    let mut state = sim.initial_state(&rho0, &u0);

    let mut diag = format!("{DIAGNOSTICS_HEADER}\n");
    let mut hist = format!("{SSN_HISTORY_HEADER}\n");
    push_diagnostics_row(&mut diag, &case.mesh, &fe, &sim.hub, &state, 0);
    let flush = |diag: &str, hist: &str| -> Result<(), RunError> {
        write_text(&cfg.out_dir.join("diagnostics.csv"), diag)?;
        write_text(&cfg.out_dir.join("ssn_history.csv"), hist)
    };
    let fields_path = |step: usize| cfg.out_dir.join(format!("fields_{step}.vtk"));
    if cfg.every > 0 {
        write_fields(&fields_path(0), &case.mesh, &fe, &sim.hub, &state.x)?;
    }

    let mut total_iters = 0;
    for _ in 0..n {
        let (next, report) = match sim.step(&state) {
            Ok(ok) => ok,
            Err(e) => {
                // Preserve the evidence: series so far plus a restart point.
                flush(&diag, &hist)?;
                write_checkpoint(
                    &cfg.out_dir.join(format!("checkpoint_{}.txt", state.step)),
                    &state,
                )?;
                return Err(e.into());
            }
        };
        total_iters += report.iterations;
        push_diagnostics_row(&mut diag, &case.mesh, &fe, &sim.hub, &next, report.iterations);
        push_history_rows(&mut hist, next.step, &report);
        if cfg.every > 0 && (next.step % cfg.every == 0 || next.step == n) {
            write_fields(&fields_path(next.step), &case.mesh, &fe, &sim.hub, &next.x)?;
        }
        if cfg.checkpoint_every > 0 && (next.step % cfg.checkpoint_every == 0 || next.step == n) {
            write_checkpoint(&cfg.out_dir.join(format!("checkpoint_{}.txt", next.step)), &next)?;
        }
        state = next;
    }
    flush(&diag, &hist)?;

    let final_div_inf = div_inf_norm(&fe, &state.x[fe.dofs.u_range()]);
    Ok(RunSummary {
        out_dir: cfg.out_dir.clone(),
        steps: n,
        final_state: state,
        total_ssn_iterations: total_iters,
        final_div_inf,
        warnings: case.warning.into_iter().collect(),
    })
}

// ---------------------------------------------------------------------------
// Channel convergence study

/// Time step of the stationary-limit channel driver. Large steps reach the
/// fixed point quickly; the limit itself does not depend on the value.
const STATIONARY_DT: f64 = 0.5;
/// The run stops when consecutive velocity vectors agree to this sup-norm
/// distance; at the fixed point the Newton solve accepts the previous state
/// with zero iterations and the distance is exactly zero.
const STATIONARY_TOL: f64 = 1e-12;
const STATIONARY_MAX_STEPS: usize = 60;

/// One mesh level of the channel study, solved to its stationary limit.
#[derive(Debug, Clone)]
pub struct ChannelLevel {
    pub h: f64,
    pub nx: usize,
    /// Broken H1 velocity error against the closed-form profile.
    pub e_u: f64,
    /// L2 pressure error.
    pub e_p: f64,
    pub div_inf: f64,
    /// Time steps until stationarity.
    pub steps: usize,
    pub first_step_iterations: usize,
}

/// Drives the channel case with BDF2 from the interpolated exact profile
/// until the discrete velocity stops changing, then measures errors
/// against the closed form as single-snapshot norms.
pub fn solve_channel_stationary(
    nx: usize,
    tau_s: f64,
    gamma: f64,
    a0: f64,
) -> Result<ChannelLevel, TimeLoopError> {
    let case = cases::channel(nx, nx, Split::Uniform, tau_s);
    let fe = FeSpace::new(&case.mesh);
    let cons = velocity_constraints(&case.mesh, &fe, &case.bcs);
    let sim = Simulation {
        mesh: &case.mesh,
        fe: &fe,
        hub: Huber { eta: 1.0, tau_s, gamma },
        bcs: &case.bcs,
        cons,
        gravity: case.gravity,
        rho_inflow: case.rho_inflow,
        penalty_a0: a0,
        facet_weight: FacetWeight::Nu,
        rho_guard: 1e-8,
        guard_mode: GuardMode::Fail,
        scheme: TimeScheme::Bdf2,
        dt: STATIONARY_DT,
        t_end: STATIONARY_DT * STATIONARY_MAX_STEPS as f64,
        ssn: SsnOptions::default(),
    };
    let (rho0, u0) = case.initial_fields(&fe);
    let mut state = sim.initial_state(&rho0, &u0);
    let mut first_step_iterations = 0;
    for _ in 0..STATIONARY_MAX_STEPS {
        let (next, report) = sim.step(&state)?;
        if state.step == 0 {
            first_step_iterations = report.iterations;
        }
        let d = &fe.dofs;
        let delta = state.x[d.u_range()]
            .iter()
            .zip(&next.x[d.u_range()])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        state = next;
        if delta <= STATIONARY_TOL {
            break;
        }
    }
    let exact = ChannelExact { tau_s };
    let d = &fe.dofs;
    let u = &state.x[d.u_range()];
    let e_u = velocity_error_h1_sq(
        &case.mesh,
        &fe,
        u,
        &|x| exact.velocity(x),
        &|x| exact.sym_grad(x),
    )
    .sqrt();
    let e_p =
        pressure_error_l2_sq(&case.mesh, &fe, &state.x[d.p_range()], &|x| exact.pressure(x))
            .sqrt();
    Ok(ChannelLevel {
        h: 1.0 / nx as f64,
        nx,
        e_u,
        e_p,
        div_inf: div_inf_norm(&fe, u),
        steps: state.step,
        first_step_iterations,
    })
}

/// One row of the convergence table; rates are relative to the previous
/// row and absent on the first.
#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub h: f64,
    pub e_u: f64,
    pub rate_u: Option<f64>,
    pub e_p: f64,
    pub rate_p: Option<f64>,
    pub div_inf: f64,
}

/// Outcome of a convergence study; `failure` carries the first level that
/// did not converge, with the rows up to it intact.
#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    pub failure: Option<String>,
}

/// Runs the channel at `h = 0.25 * 2^(1-i)` for `i = 1..=levels` and
/// tabulates errors and observed rates.
pub fn run_convergence_study(levels: usize, tau_s: f64) -> Result<ConvergenceStudy, ConfigError> {
    if levels < 2 {
        return Err(ConfigError(format!(
            "convergence study needs at least 2 levels to report rates, got {levels}"
        )));
    }
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    let mut failure = None;
    for i in 1..=levels {
        let h = 0.25 * (2.0f64).powi(1 - i as i32);
        let nx = (1.0 / h).round() as usize;
        match solve_channel_stationary(nx, tau_s, 1e3, 10.0) {
            Ok(level) => {
                let prev = rows.last();
                rows.push(ConvergenceRow {
                    h,
                    e_u: level.e_u,
                    rate_u: prev.map(|p| rate(p.e_u, level.e_u, p.h, h)),
                    e_p: level.e_p,
                    rate_p: prev.map(|p| rate(p.e_p, level.e_p, p.h, h)),
                    div_inf: level.div_inf,
                });
            }
            Err(e) => {
                failure = Some(format!("level {i} (h = {h}): {e}"));
                break;
            }
        }
    }
    Ok(ConvergenceStudy { rows, failure })
}

/// CSV rendering of the study (full precision; empty rate cells on the
/// first row).
pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut s = format!("{CONVERGENCE_HEADER}\n");
    for r in rows {
        let ru = r.rate_u.map(fmt_f64).unwrap_or_default();
        let rp = r.rate_p.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{ru},{},{rp},{}",
            fmt_f64(r.h),
            fmt_f64(r.e_u),
            fmt_f64(r.e_p),
            fmt_f64(r.div_inf)
        );
    }
    s
}

/// Human-readable table of the study (shortened digits).
pub fn convergence_table(rows: &[ConvergenceRow]) -> String {
    let mut s = format!(
        "{:>12} {:>12} {:>8} {:>12} {:>8} {:>10}\n",
        "h", "e_u", "rate_u", "e_p", "rate_p", "div_inf"
    );
    for r in rows {
        let ru = r.rate_u.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let rp = r.rate_p.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:>12.5e} {:>12.5e} {:>8} {:>12.5e} {:>8} {:>10.2e}",
            r.h, r.e_u, ru, r.e_p, rp, r.div_inf
        );
    }
    s
}

// ---------------------------------------------------------------------------
// Verification suites (the `verify` verb)

/// One named property check with a human-readable measurement.
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_sym(rng: &mut ChaCha8Rng, scale: f64) -> Mat2 {
    let a = rng.random_range(-scale..scale);
    let b = rng.random_range(-scale..scale);
    let c = rng.random_range(-scale..scale);
    [[a, b], [b, c]]
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

fn sub(a: &Mat2, b: &Mat2) -> Mat2 {
    [[a[0][0] - b[0][0], a[0][1] - b[0][1]], [a[1][0] - b[1][0], a[1][1] - b[1][1]]]
}

/// Largest violation, over `pairs` random symmetric tensor pairs for each
/// combination of `gamma` in {10, 1e3} and `tau_s` in {0, 2.5} at unit
/// viscosity, of the three constitutive bounds: the regularized norm is
/// `gamma`-Lipschitz, the stress is `(2 eta + 2 gamma)`-Lipschitz, and the
/// stress is strongly monotone with constant `2 eta`. Nonpositive means
/// all bounds hold.
pub fn huber_lemma_max_defect(pairs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for gamma in [10.0, 1e3] {
        for tau_s in [0.0, 2.5] {
            let h = Huber { eta: 1.0, tau_s, gamma };
            for _ in 0..pairs {
                let a = random_sym(&mut rng, 2.0);
                let b = random_sym(&mut rng, 2.0);
                let dn = tensor_mag(&sub(&a, &b));
                let norm_defect = (h.norm(&a) - h.norm(&b)).abs() - gamma * dn;
                let dt = sub(&h.stress(&a), &h.stress(&b));
                let lip_defect = tensor_mag(&dt) - h.stress_lipschitz() * dn;
                // Pairing scaled like the magnitude: (A, B) = A:B / 2.
                let mono = 0.5 * crate::huber::frob_inner(&dt, &sub(&a, &b));
                let mono_defect = h.monotonicity() * dn * dn - mono;
                worst = worst.max(norm_defect).max(lip_defect).max(mono_defect);
            }
        }
    }
    worst
}

/// Relative defects of the two upwind energy identities on a 4x4 mesh
/// with a random exactly divergence-free velocity and random densities:
/// the transport form tested against its own density telescopes to the
/// density upwind seminorm, and the convection form with equal transported
/// and test velocities telescopes to the velocity upwind seminorm.
pub fn upwind_identity_defects(seed: u64) -> (f64, f64) {
    let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 4, 4, Split::Uniform);
    let fe = FeSpace::new(&mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u0 = random_vec(&mut rng, 2 * mesh.n_facets(), 1.0);
    let u = project_div_free(&mesh, &fe, &u0);
    let rho = random_vec(&mut rng, mesh.n_cells(), 1.0);
    let lhs1 = c1_form(&mesh, &fe, &u, &rho, &rho, None);
    let rhs1 = rho_upwind_seminorm_sq(&mesh, &fe, &u, &rho);
    let d1 = (lhs1 - rhs1).abs() / rhs1.max(1.0);
    let rho_pos: Vec<f64> = (0..mesh.n_cells()).map(|_| rng.random_range(0.5..3.0)).collect();
    let lhs2 = c2_form(&mesh, &fe, &rho_pos, &u, &u, &u, None);
    let rhs2 = u_upwind_seminorm_sq(&mesh, &fe, &rho_pos, &u, &u);
    let d2 = (lhs2 - rhs2).abs() / rhs2.max(1.0);
    (d1, d2)
}

/// Relative l2 error between the assembled Jacobian applied to a random
/// direction and the central finite difference of the residual (step
/// 1e-6), at a random iterate kept clear of the residual's kinks, on a
/// 2x2-cell mesh with mixed Dirichlet and free-slip boundaries under BDF2.
pub fn jacobian_fd_error(seed: u64) -> f64 {
    let mesh = Mesh::rectangle(0.0, 1.0, 0.0, 1.0, 2, 2, Split::Uniform);
    let fe = FeSpace::new(&mesh);
    let d = fe.dofs;
    let linear_g = || -> Box<dyn Fn([f64; 2]) -> [f64; 2]> {
        Box::new(|x| [0.3 - 0.1 * x[0] + 0.2 * x[1], 0.05 + 0.07 * x[0] - 0.2 * x[1]])
    };
    let bcs = BoundaryConds {
        bottom: SideBc::Dirichlet(linear_g()),
        right: SideBc::FreeSlip,
        top: SideBc::Dirichlet(linear_g()),
        left: SideBc::Dirichlet(linear_g()),
    };
    let cons = velocity_constraints(&mesh, &fe, &bcs);
    let hub = Huber { eta: 1.0, tau_s: 0.5, gamma: 10.0 };

    let mut chosen = None;
    for attempt in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + attempt);
        let rho_n: Vec<f64> = (0..mesh.n_cells()).map(|_| rng.random_range(0.5..1.5)).collect();
        let rho_nm1: Vec<f64> = (0..mesh.n_cells()).map(|_| rng.random_range(0.5..1.5)).collect();
        let u_n = random_vec(&mut rng, 2 * mesh.n_facets(), 1.0);
        let u_nm1 = random_vec(&mut rng, 2 * mesh.n_facets(), 1.0);
        let mut x = random_vec(&mut rng, d.n_dofs(), 1.0);
        for c in 0..mesh.n_cells() {
            x[d.rho(c)] = rng.random_range(0.5..1.5);
        }
        let mut dir = random_vec(&mut rng, d.n_dofs(), 1.0);
        for i in 0..d.n_dofs() {
            if cons.mask[i] {
                dir[i] = 0.0;
            }
        }
        let p = Problem {
            mesh: &mesh,
            fe: &fe,
            hub,
            dt: 0.05,
            bdf2: true,
            rho_n: &rho_n,
            u_n: &u_n,
            rho_nm1: &rho_nm1,
            u_nm1: &u_nm1,
            gravity: [0.3, -0.9],
            bcs: &bcs,
            rho_inflow: Some(0.8),
            penalty_a0: 10.0,
            facet_weight: FacetWeight::Nu,
            rho_guard: 1e-8,
        };
        if kink_margin(&p, &x) > 1e-3 {
            chosen = Some((rho_n, rho_nm1, u_n, u_nm1, x, dir));
            break;
        }
    }
    let (rho_n, rho_nm1, u_n, u_nm1, x, dir) =
        chosen.expect("no iterate with safe kink margins found");
    let p = Problem {
        mesh: &mesh,
        fe: &fe,
        hub,
        dt: 0.05,
        bdf2: true,
        rho_n: &rho_n,
        u_n: &u_n,
        rho_nm1: &rho_nm1,
        u_nm1: &u_nm1,
        gravity: [0.3, -0.9],
        bcs: &bcs,
        rho_inflow: Some(0.8),
        penalty_a0: 10.0,
        facet_weight: FacetWeight::Nu,
        rho_guard: 1e-8,
    };

    let n = d.n_dofs();
    let (_, trips) = assemble(&p, &cons, &x, true);
    let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trips.unwrap())
        .expect("assembled triplets are well-formed");
    let dv = Col::<f64>::from_fn(n, |i| dir[i]);
    let jd = &a * &dv;

    let eps = 1e-6;
    let xp: Vec<f64> = (0..n).map(|i| x[i] + eps * dir[i]).collect();
    let xm: Vec<f64> = (0..n).map(|i| x[i] - eps * dir[i]).collect();
    let (rp, _) = assemble(&p, &cons, &xp, false);
    let (rm, _) = assemble(&p, &cons, &xm, false);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        let fd = (rp[i] - rm[i]) / (2.0 * eps);
        num += (jd[i] - fd) * (jd[i] - fd);
        den += jd[i] * jd[i];
    }
    num.sqrt() / den.sqrt().max(1e-12)
}

/// Short lid-driven cavity run; returns (max |rho - 1|, div_inf) after
/// `steps` BDF2 steps. Both should sit at solver roundoff: uniform density
/// is transport-invariant and the velocity space is divergence-conforming.
pub fn cavity_preservation(nx: usize, tau_s: f64, steps: usize) -> Result<(f64, f64), RunError> {
    let case = cases::cavity(nx, nx, Split::Uniform);
    let fe = FeSpace::new(&case.mesh);
    let cons = velocity_constraints(&case.mesh, &fe, &case.bcs);
    let mut cfg = RunConfig::defaults(CaseName::Cavity);
    cfg.nx = nx;
    cfg.ny = nx;
    cfg.eta = 0.01;
    cfg.tau_s = tau_s;
    cfg.dt = 0.1;
    cfg.t_end = 0.1 * steps as f64;
    let sim = cfg.simulation(&case, &fe, cons);
    let (rho0, u0) = case.initial_fields(&fe);
    let mut state = sim.initial_state(&rho0, &u0);
    for _ in 0..steps {
        let (next, _) = sim.step(&state)?;
        state = next;
    }
    let d = &fe.dofs;
    let rho_err = state.x[d.rho_range()]
        .iter()
        .map(|r| (r - 1.0).abs())
        .fold(0.0f64, f64::max);
    Ok((rho_err, div_inf_norm(&fe, &state.x[d.u_range()])))
}

/// Short Rayleigh-Taylor run recording the density stability monitor
/// `|rho|^2 + |2 rho - rho_prev|^2` after every step (index 0 is the
/// initial state). The transport scheme makes the sequence nonincreasing.
pub fn rt_density_monitor(
    nx: usize,
    ny: usize,
    steps: usize,
) -> Result<Vec<f64>, RunError> {
    let case = cases::rayleigh_taylor(nx, ny, Split::Alternating, 0.5, true);
    let fe = FeSpace::new(&case.mesh);
    let cons = velocity_constraints(&case.mesh, &fe, &case.bcs);
    let mut cfg = RunConfig::defaults(CaseName::RayleighTaylor);
    cfg.nx = nx;
    cfg.ny = ny;
    cfg.eta = 1e-3;
    cfg.tau_s = 0.1;
    cfg.dt = 0.05;
    cfg.t_end = 0.05 * steps as f64;
    // The energy law reflects exact solves; keep Newton tight so residual
    // slack stays far below the 1e-8 relative comparison.
    cfg.ssn_tol = 1e-10;
    let sim = cfg.simulation(&case, &fe, cons);
    let (rho0, u0) = case.initial_fields(&fe);
    let mut state = sim.initial_state(&rho0, &u0);
    let monitor = |s: &State| {
        crate::diagnostics::density_energy(&case.mesh, &s.x[fe.dofs.rho_range()], &s.rho_prev)
    };
    let mut series = vec![monitor(&state)];
    for _ in 0..steps {
        let (next, _) = sim.step(&state)?;
        series.push(monitor(&next));
        state = next;
    }
    Ok(series)
}

/// Runs every property suite and reports one line per check.
pub fn verify_all() -> Vec<Check> {
    let mut checks = Vec::new();

    let defect = huber_lemma_max_defect(10_000, 2026);
    checks.push(Check {
        name: "huber-lemmas",
        passed: defect <= 1e-12,
        detail: format!(
            "max bound defect {:.3e} over 4 x 10^4 random tensor pairs (limit 1e-12)",
            defect
        ),
    });

    let (d1, d2) = upwind_identity_defects(2027);
    checks.push(Check {
        name: "upwind-transport-identity",
        passed: d1 <= 1e-12,
        detail: format!("relative defect {d1:.3e} (limit 1e-12)"),
    });
    checks.push(Check {
        name: "upwind-convection-identity",
        passed: d2 <= 1e-12,
        detail: format!("relative defect {d2:.3e} (limit 1e-12)"),
    });

    let rel = jacobian_fd_error(2028);
    checks.push(Check {
        name: "jacobian-finite-difference",
        passed: rel <= 1e-5,
        detail: format!("relative error {rel:.3e} at step 1e-6 (limit 1e-5)"),
    });

    match cavity_preservation(8, 2.5, 3) {
        Ok((rho_err, div)) => {
            checks.push(Check {
                name: "constant-density-preservation",
                passed: rho_err <= 1e-10 && div <= 1e-10,
                detail: format!("max |rho - 1| = {rho_err:.3e}, div_inf = {div:.3e} (limit 1e-10)"),
            });
        }
        Err(e) => checks.push(Check {
            name: "constant-density-preservation",
            passed: false,
            detail: format!("run failed: {e}"),
        }),
    }

    match rt_density_monitor(8, 32, 3) {
        Ok(series) => {
            let mut worst = f64::NEG_INFINITY;
            for w in series.windows(2) {
                worst = worst.max((w[1] - w[0]) / w[0].abs().max(1.0));
            }
            checks.push(Check {
                name: "density-energy-monotone",
                passed: worst <= 1e-8,
                detail: format!("max relative increase {worst:.3e} (limit 1e-8)"),
            });
        }
        Err(e) => checks.push(Check {
            name: "density-energy-monotone",
            passed: false,
            detail: format!("run failed: {e}"),
        }),
    }

    checks
}
