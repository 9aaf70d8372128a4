//! End-to-end Burgers experiments: FOM snapshots, POD on the training
//! window, Galerkin and closure operators per `r`, and the G-ROM / 2S / 3S
//! comparison on the test window.

use std::io::Write;

use crate::closure::{
    build_data_matrix, compute_closure_targets, ClosureProblem, ClosureTargets, TargetMode,
};
use crate::error::{Result, RomError};
use crate::fom::{assemble_fem, build_mesh, run_fom, FemSystem, FomConfig};
use crate::galerkin::{assemble_rom_operators, RomOperators};
use crate::integrate::IntegrateOptions;
use crate::pod::{compute_pod, project_history, CoeffHistory, PodBasis};
use crate::snapshot::{window, SnapshotSet};
use crate::sweep::{decade_m_grid, full_m_grid, sweep_2s, sweep_3s, SweepContext, SweepEntry, SweepResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    /// Basis, training and test on `[0, T₁]`.
    Reconstructive,
    /// Basis and training on `[0, T₂]`, test on `[0, T₃]`.
    CrossValidation,
    /// Basis and training on `[0, T₂]`, test on `[T₂, T₃]`.
    Predictive,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Reconstructive => "reconstructive",
            Regime::CrossValidation => "cross-validation",
            Regime::Predictive => "predictive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "reconstructive" => Some(Regime::Reconstructive),
            "cross-validation" => Some(Regime::CrossValidation),
            "predictive" => Some(Regime::Predictive),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Windows {
    pub train: (f64, f64),
    pub test: (f64, f64),
}

impl Windows {
    /// `t_split` is ignored for the reconstructive regime.
    pub fn new(regime: Regime, t_start: f64, t_split: f64, t_end: f64) -> Result<Self> {
        if !(t_start < t_end) || (regime != Regime::Reconstructive && !(t_start < t_split && t_split < t_end)) {
            return Err(RomError::InvalidConfig(format!(
                "regime times must satisfy {t_start} < {t_split} < {t_end}"
            )));
        }
        Ok(match regime {
            Regime::Reconstructive => Windows {
                train: (t_start, t_end),
                test: (t_start, t_end),
            },
            Regime::CrossValidation => Windows {
                train: (t_start, t_split),
                test: (t_start, t_end),
            },
            Regime::Predictive => Windows {
                train: (t_start, t_split),
                test: (t_split, t_end),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataRank {
    /// `d = min(3r, R)`.
    ThreeR,
    /// `d = min(k, R)` but never below `r`.
    Fixed(usize),
    /// `d = R`.
    Full,
}

impl DataRank {
    pub fn resolve(self, r: usize, r_max: usize) -> usize {
        match self {
            DataRank::ThreeR => (3 * r).min(r_max),
            DataRank::Fixed(k) => k.min(r_max).max(r),
            DataRank::Full => r_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridKind {
    /// Every retained count `1..=rank(D)`.
    Full,
    /// Decade tolerances mapped to retained counts.
    Decade,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Selection {
    /// Minimize the error on the test window.
    Test,
    /// Minimize the error on the training window.
    Train,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_cells: usize,
    pub fom: FomConfig,
    pub regime: Regime,
    pub t_split: f64,
    pub r_max: usize,
    pub r_values: Vec<usize>,
    /// Empty means `1..r`.
    pub r1_values: Vec<usize>,
    pub data_rank: DataRank,
    pub target_mode: TargetMode,
    pub rom_dt: f64,
    pub integrate: IntegrateOptions,
    pub grid_2s: GridKind,
    pub grid_3s: GridKind,
    pub selection: Selection,
}

impl ExperimentConfig {
    pub fn burgers(regime: Regime) -> Self {
        Self {
            n_cells: 2048,
            fom: FomConfig::burgers_default(),
            regime,
            t_split: 0.7,
            r_max: 200,
            r_values: vec![3, 7, 11, 17],
            r1_values: Vec::new(),
            data_rank: DataRank::Full,
            target_mode: TargetMode::NonlinearOnly,
            rom_dt: 1e-3,
            integrate: IntegrateOptions::default(),
            grid_2s: GridKind::Full,
            grid_3s: GridKind::Decade,
            selection: Selection::Test,
        }
    }

    pub fn windows(&self) -> Result<Windows> {
        Windows::new(self.regime, 0.0, self.t_split, self.fom.t_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.fom.validate()?;
        self.windows()?;
        if self.r_values.is_empty() {
            return Err(RomError::InvalidConfig("no r values".into()));
        }
        for &r in &self.r_values {
            if r == 0 || r > self.r_max {
                return Err(RomError::InvalidConfig(format!(
                    "r = {r} must lie in 1..={}",
                    self.r_max
                )));
            }
        }
        Ok(())
    }
}

/// FOM snapshots, training-window basis and the projected coefficients of
/// every snapshot.
#[derive(Debug, Clone)]
pub struct Offline {
    pub system: FemSystem,
    pub snapshots: SnapshotSet,
    pub basis: PodBasis,
    pub history: CoeffHistory,
    pub windows: Windows,
}

pub fn fom_snapshots(config: &ExperimentConfig) -> Result<(FemSystem, SnapshotSet)> {
    let mesh = build_mesh(config.n_cells, (0.0, 1.0))?;
    let system = assemble_fem(&mesh);
    let traj = run_fom(&config.fom, &system)?;
    let set = SnapshotSet::from_fom(&traj, &system.mass)?;
    Ok((system, set))
}

pub fn offline(config: &ExperimentConfig, system: FemSystem, snapshots: SnapshotSet) -> Result<Offline> {
    let windows = config.windows()?;
    let train = window(&snapshots, windows.train.0, windows.train.1)?;
    let r_max = config.r_max.min(train.n_snapshots()).min(train.n_dofs());
    let basis = compute_pod(&train, r_max)?;
    let history = project_history(&basis, &snapshots)?;
    Ok(Offline {
        system,
        snapshots,
        basis,
        history,
        windows,
    })
}

/// Operators and training data for one `r`.
#[derive(Debug, Clone)]
pub struct Stage {
    pub r: usize,
    pub d: usize,
    pub galerkin: RomOperators,
    pub targets: ClosureTargets,
    pub problem: ClosureProblem,
}

/// Assemble `r × d_max` operators once; every `(r, d)` pair is a sub-block.
pub fn assemble_all(config: &ExperimentConfig, off: &Offline) -> Result<RomOperators> {
    let r_top = *config.r_values.iter().max().expect("validated");
    let big_r = off.basis.len();
    let d_top = config
        .r_values
        .iter()
        .map(|&r| config.data_rank.resolve(r, big_r))
        .max()
        .expect("validated");
    if r_top > big_r {
        return Err(RomError::Truncation {
            requested: r_top,
            available: big_r,
        });
    }
    assemble_rom_operators(&off.basis, &off.system, config.fom.nu, r_top, d_top)
}

pub fn stage(config: &ExperimentConfig, off: &Offline, all: &RomOperators, r: usize) -> Result<Stage> {
    let d = config.data_rank.resolve(r, off.basis.len());
    let extended = all.sub_block(r, d)?;
    let galerkin = all.sub_block(r, r)?;
    let train = off.history.window(off.windows.train.0, off.windows.train.1)?;
    let targets = compute_closure_targets(&extended, &galerkin, &train, config.target_mode)?;
    let data = build_data_matrix(&train, r)?;
    let problem = ClosureProblem::new(&targets, &data)?;
    Ok(Stage {
        r,
        d,
        galerkin,
        targets,
        problem,
    })
}

/// Sweep context on the window `(t0, t1)`, starting from the projected
/// coefficients at `t0`.
pub fn context(config: &ExperimentConfig, off: &Offline, st: &Stage, (t0, t1): (f64, f64)) -> Result<SweepContext> {
    let reference = off.history.window(t0, t1)?.truncated(st.r)?;
    Ok(SweepContext {
        galerkin: st.galerkin.clone(),
        problem: st.problem.clone(),
        a0: reference.row(0, st.r),
        dt: config.rom_dt,
        t0: reference.times[0],
        t_end: *reference.times.last().expect("non-empty window"),
        reference,
        options: config.integrate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub r: usize,
    pub d: usize,
    pub rank: usize,
    pub grom_error: f64,
    pub two_scale: SweepEntry,
    pub three_scale: SweepEntry,
}

#[derive(Debug, Clone)]
pub struct RowDetail {
    pub row: TableRow,
    pub sweep_2s: SweepResult,
    pub sweep_3s: SweepResult,
}

fn grid(kind: GridKind, ctx: &SweepContext, extra: &[usize]) -> Vec<usize> {
    match kind {
        GridKind::Full => full_m_grid(ctx.problem.svd()),
        GridKind::Decade => decade_m_grid(ctx.problem.svd(), extra),
    }
}

/// Rescore the selected entry on the test window when selection ran on the
/// training window.
fn rescore(test: &SweepContext, entry: &SweepEntry) -> Result<SweepEntry> {
    let closure = test.closure_for(&entry.candidate)?;
    let error = test.score(Some(closure))?;
    Ok(SweepEntry {
        candidate: entry.candidate,
        error,
        diverged: error.is_infinite(),
    })
}

pub fn evaluate_row(config: &ExperimentConfig, off: &Offline, st: &Stage) -> Result<RowDetail> {
    let test = context(config, off, st, off.windows.test)?;
    let select = match config.selection {
        Selection::Test => test.clone(),
        Selection::Train => context(config, off, st, off.windows.train)?,
    };
    let grom_error = test.score(None)?;

    let m_grid = grid(config.grid_2s, &select, &[]);
    let s2 = sweep_2s(&select, &m_grid)?;
    let m_best = s2.best_entry().candidate.m_large;

    let r1_grid: Vec<usize> = if config.r1_values.is_empty() {
        (1..st.r).collect()
    } else {
        config.r1_values.iter().copied().filter(|&r1| r1 >= 1 && r1 < st.r).collect()
    };
    let s3 = if r1_grid.is_empty() {
        None
    } else {
        let g3 = grid(config.grid_3s, &select, &[m_best]);
        Some(sweep_3s(&select, &r1_grid, &g3, &g3)?)
    };

    let mut two = s2.best_entry().clone();
    // r = 1 has no split; the three-scale model degenerates to two scales.
    let mut three = match &s3 {
        Some(s) => s.best_entry().clone(),
        None => two.clone(),
    };
    if config.selection == Selection::Train {
        two = rescore(&test, &two)?;
        three = rescore(&test, &three)?;
    }
    Ok(RowDetail {
        row: TableRow {
            r: st.r,
            d: st.d,
            rank: st.problem.rank(),
            grom_error,
            two_scale: two,
            three_scale: three,
        },
        sweep_3s: s3.unwrap_or_else(|| s2.clone()),
        sweep_2s: s2,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RowDetail>> {
    config.validate()?;
    let (system, set) = fom_snapshots(config)?;
    run_on_snapshots(config, system, set)
}

pub fn run_on_snapshots(config: &ExperimentConfig, system: FemSystem, set: SnapshotSet) -> Result<Vec<RowDetail>> {
    let off = offline(config, system, set)?;
    let all = assemble_all(config, &off)?;
    config
        .r_values
        .iter()
        .map(|&r| evaluate_row(config, &off, &stage(config, &off, &all, r)?))
        .collect()
}

pub const TABLE_HEADER: &str =
    "r,grom_error,tol_2s,m_2s,error_2s,r1,tol_s,tol_l,m_s,m_l,error_3s";

pub fn write_table_row(out: &mut impl Write, row: &TableRow) -> Result<()> {
    let t = &row.two_scale.candidate;
    let s = &row.three_scale.candidate;
    write!(
        out,
        "{},{:.16e},{:.16e},{},{:.16e},{},{:.16e},{:.16e},{},{},{:.16e}",
        row.r,
        row.grom_error,
        t.tol_large,
        t.m_large,
        row.two_scale.error,
        s.r1,
        s.tol_small,
        s.tol_large,
        s.m_small,
        s.m_large,
        row.three_scale.error
    )?;
    Ok(())
}
