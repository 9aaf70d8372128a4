//! Pipeline configuration: a flat INI file, validated into typed settings.
//!
//! Every error names the offending field as `section.key`. The grammar is
//! documented in `docs/config.md`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use ini::Ini;
use vmsrom::closure::TargetMode;
use vmsrom::experiment::{DataRank, ExperimentConfig, GridKind, Regime, Selection};
use vmsrom::integrate::Scheme;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(field: &str, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError {
        field: field.to_string(),
        message: message.into(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    /// Run the Burgers FOM.
    Burgers { n_cells: usize },
    /// Interior nodal snapshots of a Burgers-type field on a uniform mesh
    /// of `[0, 1]`, stored in the snapshot binary format.
    Snapshots { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub problem: Problem,
    pub experiment: ExperimentConfig,
    pub center: bool,
    pub output: Option<PathBuf>,
}

const SCHEMA: &[(&str, &[&str])] = &[
    (
        "problem",
        &["kind", "path", "n_cells", "nu", "dt", "tolerance", "max_iterations", "damping"],
    ),
    ("pod", &["r_max", "center"]),
    ("rom", &["r", "r1", "d", "target", "integrator", "dt"]),
    ("regime", &["kind", "t_split", "t_end", "selection"]),
    ("sweep", &["grid_2s", "grid_3s"]),
    ("output", &["dir"]),
];

/// Raw `section.key → value` map with unknown and duplicate entries rejected.
struct Fields(BTreeMap<String, String>);

impl Fields {
    fn from_ini(ini: &Ini) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return err(k, "key outside of any [section]");
                }
                continue;
            };
            let Some((_, keys)) = SCHEMA.iter().find(|(s, _)| *s == section) else {
                return err(section, "unknown section");
            };
            for (key, value) in props.iter() {
                let field = format!("{section}.{key}");
                if !keys.contains(&key) {
                    return err(&field, "unknown key");
                }
                if map.insert(field.clone(), value.trim().to_string()).is_some() {
                    return err(&field, "given more than once");
                }
            }
        }
        Ok(Fields(map))
    }

    fn get(&self, field: &str) -> Option<&str> {
        self.0.get(field).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn parse<T: std::str::FromStr>(&self, field: &str, default: T) -> Result<T, ConfigError> {
        match self.get(field) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .or_else(|_| err(field, format!("cannot parse {v:?}"))),
        }
    }

    fn float(&self, field: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.parse(field, default)?;
        if !v.is_finite() {
            return err(field, "must be finite");
        }
        Ok(v)
    }

    fn positive(&self, field: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.float(field, default)?;
        if v <= 0.0 {
            return err(field, format!("must be positive, got {v}"));
        }
        Ok(v)
    }

    fn list(&self, field: &str) -> Result<Vec<usize>, ConfigError> {
        let Some(v) = self.get(field) else {
            return Ok(Vec::new());
        };
        v.split(',')
            .map(|s| s.trim())
            .map(|s| s.parse().or_else(|_| err(field, format!("cannot parse {s:?} as a count"))))
            .collect()
    }

    fn choice<T: Copy>(&self, field: &str, default: T, options: &[(&str, T)]) -> Result<T, ConfigError> {
        match self.get(field) {
            None => Ok(default),
            Some(v) => match options.iter().find(|(name, _)| *name == v) {
                Some(&(_, t)) => Ok(t),
                None => {
                    let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                    err(field, format!("{v:?} is not one of {}", names.join(", ")))
                }
            },
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let mut config = Self::parse(&text)?;
        // Relative snapshot paths are taken relative to the config file.
        if let Problem::Snapshots { path: p } = &mut config.problem {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str_noescape(text).or_else(|e| {
            err(
                "config",
                format!("line {}, column {}: {}", e.line, e.col, e.msg),
            )
        })?;
        let f = Fields::from_ini(&ini)?;

        let regime = f.choice(
            "regime.kind",
            Regime::Reconstructive,
            &[
                ("reconstructive", Regime::Reconstructive),
                ("cross-validation", Regime::CrossValidation),
                ("predictive", Regime::Predictive),
            ],
        )?;
        let mut exp = ExperimentConfig::burgers(regime);

        let problem = match f.get("problem.kind").unwrap_or("burgers") {
            "burgers" => {
                if f.get("problem.path").is_some() {
                    return err("problem.path", "only valid with kind = snapshots");
                }
                let n_cells = f.parse("problem.n_cells", exp.n_cells)?;
                if n_cells < 2 {
                    return err("problem.n_cells", format!("need at least 2 cells, got {n_cells}"));
                }
                exp.n_cells = n_cells;
                Problem::Burgers { n_cells }
            }
            "snapshots" => {
                let Some(p) = f.get("problem.path") else {
                    return err("problem.path", "required with kind = snapshots");
                };
                for key in ["n_cells", "dt", "tolerance", "max_iterations", "damping"] {
                    if f.get(&format!("problem.{key}")).is_some() {
                        return err(&format!("problem.{key}"), "only valid with kind = burgers");
                    }
                }
                Problem::Snapshots { path: PathBuf::from(p) }
            }
            other => return err("problem.kind", format!("{other:?} is not one of burgers, snapshots")),
        };
        exp.fom.nu = f.positive("problem.nu", exp.fom.nu)?;
        exp.fom.dt = f.positive("problem.dt", exp.fom.dt)?;
        exp.fom.tolerance = f.positive("problem.tolerance", exp.fom.tolerance)?;
        exp.fom.max_iterations = f.parse("problem.max_iterations", exp.fom.max_iterations)?;
        if exp.fom.max_iterations == 0 {
            return err("problem.max_iterations", "must be at least 1");
        }
        exp.fom.damping = f.float("problem.damping", exp.fom.damping)?;
        if !(exp.fom.damping > 0.0 && exp.fom.damping <= 1.0) {
            return err("problem.damping", format!("must lie in (0, 1], got {}", exp.fom.damping));
        }

        exp.r_max = f.parse("pod.r_max", exp.r_max)?;
        if exp.r_max == 0 {
            return err("pod.r_max", "must be at least 1");
        }
        let center = f.parse("pod.center", false)?;

        if f.get("rom.r").is_some() {
            exp.r_values = f.list("rom.r")?;
        }
        if exp.r_values.is_empty() {
            return err("rom.r", "needs at least one value");
        }
        for &r in &exp.r_values {
            if r == 0 {
                return err("rom.r", "values must be at least 1");
            }
            if r > exp.r_max {
                return err("rom.r", format!("r = {r} exceeds pod.r_max = {}", exp.r_max));
            }
        }
        let mut sorted = exp.r_values.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != exp.r_values.len() {
            return err("rom.r", "values must be distinct");
        }
        exp.r1_values = f.list("rom.r1")?;
        if exp.r1_values.contains(&0) {
            return err("rom.r1", "values must be at least 1");
        }
        exp.data_rank = match f.get("rom.d").unwrap_or("full") {
            "full" => DataRank::Full,
            "3r" => DataRank::ThreeR,
            v => match v.parse::<usize>() {
                Ok(k) if k > 0 => DataRank::Fixed(k),
                _ => return err("rom.d", format!("{v:?} is not full, 3r or a positive count")),
            },
        };
        exp.target_mode = f.choice(
            "rom.target",
            exp.target_mode,
            &[("nonlinear", TargetMode::NonlinearOnly), ("full-rhs", TargetMode::FullRhs)],
        )?;
        exp.integrate.scheme = f.choice(
            "rom.integrator",
            exp.integrate.scheme,
            &[("cn", Scheme::CrankNicolson), ("rk4", Scheme::Rk4)],
        )?;
        exp.rom_dt = f.positive("rom.dt", exp.rom_dt)?;

        exp.fom.t_end = f.positive("regime.t_end", exp.fom.t_end)?;
        exp.t_split = f.positive("regime.t_split", exp.t_split)?;
        if regime != Regime::Reconstructive && exp.t_split >= exp.fom.t_end {
            return err(
                "regime.t_split",
                format!("must be below regime.t_end = {}", exp.fom.t_end),
            );
        }
        exp.selection = f.choice(
            "regime.selection",
            exp.selection,
            &[("test", Selection::Test), ("train", Selection::Train)],
        )?;
        if matches!(problem, Problem::Burgers { .. }) {
            exp.fom
                .validate()
                .or_else(|e| err("regime.t_end", e.to_string().replace("invalid configuration: ", "")))?;
        }

        let grids = [("full", GridKind::Full), ("decade", GridKind::Decade)];
        exp.grid_2s = f.choice("sweep.grid_2s", exp.grid_2s, &grids)?;
        exp.grid_3s = f.choice("sweep.grid_3s", exp.grid_3s, &grids)?;

        let output = f.get("output.dir").map(PathBuf::from);

        Ok(PipelineConfig {
            problem,
            experiment: exp,
            center,
            output,
        })
    }

    /// Normalized `section.key = value` lines covering every setting that
    /// affects results; the output directory is excluded.
    pub fn canonical(&self) -> String {
        let e = &self.experiment;
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match &self.problem {
            Problem::Burgers { n_cells } => {
                line("problem.kind", "burgers".into());
                line("problem.n_cells", n_cells.to_string());
                line("problem.dt", format!("{:?}", e.fom.dt));
                line("problem.tolerance", format!("{:?}", e.fom.tolerance));
                line("problem.max_iterations", e.fom.max_iterations.to_string());
                line("problem.damping", format!("{:?}", e.fom.damping));
            }
            Problem::Snapshots { path } => {
                line("problem.kind", "snapshots".into());
                line("problem.path", path.display().to_string());
            }
        }
        line("problem.nu", format!("{:?}", e.fom.nu));
        line("pod.r_max", e.r_max.to_string());
        line("pod.center", self.center.to_string());
        line("rom.r", join(&e.r_values));
        line("rom.r1", join(&e.r1_values));
        line("rom.d", data_rank_name(e.data_rank));
        line("rom.target", e.target_mode.name().into());
        line("rom.integrator", format!("{:?}", e.integrate.scheme));
        line("rom.dt", format!("{:?}", e.rom_dt));
        line("regime.kind", e.regime.name().into());
        line("regime.t_split", format!("{:?}", e.t_split));
        line("regime.t_end", format!("{:?}", e.fom.t_end));
        line("regime.selection", format!("{:?}", e.selection));
        line("sweep.grid_2s", format!("{:?}", e.grid_2s));
        line("sweep.grid_3s", format!("{:?}", e.grid_3s));
        s
    }
}

pub fn data_rank_name(d: DataRank) -> String {
    match d {
        DataRank::Full => "full".into(),
        DataRank::ThreeR => "3r".into(),
        DataRank::Fixed(k) => k.to_string(),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}
