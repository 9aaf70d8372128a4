//! Stage runner with a content-addressed cache.
//!
//! Each stage's key hashes its own settings together with the keys of the
//! stages it reads, so changing a setting invalidates exactly the stages
//! downstream of it. A stage directory appears in the cache only once it is
//! complete (written under a temporary name, then renamed).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use vmsrom::closure::Closure;
use vmsrom::experiment::{self, Offline, RowDetail, Stage, TABLE_HEADER};
use vmsrom::fom::{assemble_fem, build_mesh, FemSystem};
use vmsrom::galerkin::RomOperators;
use vmsrom::integrate::{integrate_rom_with, RomModel, RomTrajectory};
use vmsrom::metrics::{avg_l2_error, kinetic_energy_series, time_avg_field_error, MeanReference};
use vmsrom::pod::{compute_pod_with, load_basis, project_history, save_basis, PodBasis, PodOptions};
use vmsrom::snapshot::{load_snapshots, save_snapshots, window, SnapshotSet};

use crate::config::{PipelineConfig, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageName {
    Fom,
    Pod,
    Operators,
    Train,
    Sweep,
    Integrate,
    Report,
}

impl StageName {
    pub const ALL: [StageName; 7] = [
        StageName::Fom,
        StageName::Pod,
        StageName::Operators,
        StageName::Train,
        StageName::Sweep,
        StageName::Integrate,
        StageName::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageName::Fom => "fom",
            StageName::Pod => "pod",
            StageName::Operators => "operators",
            StageName::Train => "train",
            StageName::Sweep => "sweep",
            StageName::Integrate => "integrate",
            StageName::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Config fields (by `section.key` prefix) the stage reads directly.
    fn fields(self) -> &'static [&'static str] {
        match self {
            StageName::Fom => &["problem.", "regime.t_end"],
            StageName::Pod => &["pod.", "regime.kind", "regime.t_split", "regime.t_end"],
            StageName::Operators => &["problem.nu", "rom.r ", "rom.d"],
            StageName::Train => &["rom.target"],
            StageName::Sweep => &["rom.", "regime.", "sweep."],
            StageName::Integrate => &[],
            StageName::Report => &[],
        }
    }

    fn upstream(self) -> Option<StageName> {
        let i = Self::ALL.iter().position(|&s| s == self).expect("listed");
        i.checked_sub(1).map(|j| Self::ALL[j])
    }
}

pub struct Options {
    pub out: PathBuf,
    pub cache: PathBuf,
    pub force: bool,
    pub quiet: bool,
}

pub struct Pipeline {
    config: PipelineConfig,
    opts: Options,
    config_hash: String,
    keys: BTreeMap<StageName, String>,
    snapshots: Option<SnapshotSet>,
    offline: Option<Offline>,
    operators: Option<RomOperators>,
    stages: BTreeMap<usize, Stage>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Pipeline {
    pub fn new(config: PipelineConfig, opts: Options) -> Result<Self> {
        let config_hash = sha256_hex(config.canonical().as_bytes());
        let external = match &config.problem {
            Problem::Snapshots { path } => {
                let bytes = fs::read(path)
                    .with_context(|| format!("problem.path: cannot read {}", path.display()))?;
                Some(sha256_hex(&bytes))
            }
            Problem::Burgers { .. } => None,
        };
        let canonical = config.canonical();
        let mut keys = BTreeMap::new();
        for stage in StageName::ALL {
            let mut text = format!("stage {}\n", stage.name());
            if let Some(up) = stage.upstream() {
                let _ = writeln!(text, "upstream {}", keys[&up]);
            }
            if let (StageName::Fom, Some(h)) = (stage, &external) {
                let _ = writeln!(text, "snapshot file {h}");
            }
            for line in canonical.lines() {
                if stage.fields().iter().any(|p| line.starts_with(p)) {
                    let _ = writeln!(text, "{line}");
                }
            }
            keys.insert(stage, sha256_hex(text.as_bytes()));
        }
        Ok(Self {
            config,
            opts,
            config_hash,
            keys,
            snapshots: None,
            offline: None,
            operators: None,
            stages: BTreeMap::new(),
        })
    }

    pub fn key(&self, stage: StageName) -> &str {
        &self.keys[&stage]
    }

    pub fn stage_dir(&self, stage: StageName) -> PathBuf {
        self.opts.cache.join(stage.name()).join(self.key(stage))
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.opts.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Run every stage up to and including `last`, then publish CSV
    /// artifacts to the output directory.
    pub fn run(&mut self, last: StageName) -> Result<()> {
        fs::create_dir_all(&self.opts.out)
            .with_context(|| format!("cannot create output directory {}", self.opts.out.display()))?;
        for stage in StageName::ALL.into_iter().filter(|&s| s <= last) {
            self.run_stage(stage)
                .with_context(|| format!("stage {} failed", stage.name()))?;
        }
        self.publish(last)
    }

    fn run_stage(&mut self, stage: StageName) -> Result<()> {
        if stage == StageName::Report {
            let started = Instant::now();
            self.report()?;
            self.log(format!("[report] written in {:.1?}", started.elapsed()));
            return Ok(());
        }
        let dir = self.stage_dir(stage);
        if dir.is_dir() && !self.opts.force {
            self.log(format!("[{}] cached {}", stage.name(), &self.key(stage)[..16]));
            return Ok(());
        }
        let started = Instant::now();
        let parent = dir.parent().expect("stage dir has a parent");
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!("{}.partial-{}", self.key(stage), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        let result = match stage {
            StageName::Fom => self.compute_fom(&tmp),
            StageName::Pod => self.compute_pod(&tmp),
            StageName::Operators => self.compute_operators(&tmp),
            StageName::Train => self.compute_train(&tmp),
            StageName::Sweep => self.compute_sweep(&tmp),
            StageName::Integrate => self.compute_integrate(&tmp),
            StageName::Report => unreachable!(),
        };
        if let Err(e) = result {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::rename(&tmp, &dir)?;
        self.log(format!(
            "[{}] computed {} in {:.1?}",
            stage.name(),
            &self.key(stage)[..16],
            started.elapsed()
        ));
        Ok(())
    }

    // ---- lazily loaded intermediate state ----

    fn snapshots(&mut self) -> Result<&SnapshotSet> {
        if self.snapshots.is_none() {
            let path = self.stage_dir(StageName::Fom).join("snapshots.bin");
            self.snapshots = Some(load_snapshots(&path).with_context(|| format!("loading {}", path.display()))?);
        }
        Ok(self.snapshots.as_ref().expect("just loaded"))
    }

    fn system(&mut self) -> Result<FemSystem> {
        let n_cells = match self.config.problem {
            Problem::Burgers { n_cells } => n_cells,
            Problem::Snapshots { .. } => self.snapshots()?.n_dofs() + 1,
        };
        Ok(assemble_fem(&build_mesh(n_cells, (0.0, 1.0))?))
    }

    fn offline(&mut self) -> Result<&Offline> {
        if self.offline.is_none() {
            let path = self.stage_dir(StageName::Pod).join("basis.bin");
            let basis: PodBasis = load_basis(&path).with_context(|| format!("loading {}", path.display()))?;
            let system = self.system()?;
            let snapshots = self.snapshots()?.clone();
            let history = project_history(&basis, &snapshots)?;
            let windows = self.config.experiment.windows()?;
            self.offline = Some(Offline {
                system,
                snapshots,
                basis,
                history,
                windows,
            });
        }
        Ok(self.offline.as_ref().expect("just built"))
    }

    fn operators(&mut self) -> Result<&RomOperators> {
        if self.operators.is_none() {
            let path = self.stage_dir(StageName::Operators).join("operators.bin");
            self.operators = Some(RomOperators::load(&path).with_context(|| format!("loading {}", path.display()))?);
        }
        Ok(self.operators.as_ref().expect("just loaded"))
    }

    fn stage_for(&mut self, r: usize) -> Result<Stage> {
        if !self.stages.contains_key(&r) {
            self.offline()?;
            self.operators()?;
            let off = self.offline.as_ref().expect("loaded");
            let all = self.operators.as_ref().expect("loaded");
            let st = experiment::stage(&self.config.experiment, off, all, r)
                .with_context(|| format!("closure data for r = {r}"))?;
            self.stages.insert(r, st);
        }
        Ok(self.stages[&r].clone())
    }

    // ---- stages ----

    fn compute_fom(&mut self, dir: &Path) -> Result<()> {
        let set = match &self.config.problem {
            Problem::Burgers { .. } => experiment::fom_snapshots(&self.config.experiment)?.1,
            Problem::Snapshots { path } => {
                let set = load_snapshots(path).with_context(|| format!("problem.path: {}", path.display()))?;
                if let Some(dim) = set.weight().dim() {
                    if dim != set.n_dofs() {
                        bail!("problem.path: weight dimension {dim} does not match {} dofs", set.n_dofs());
                    }
                }
                set
            }
        };
        save_snapshots(&set, dir.join("snapshots.bin"))?;
        let mut f = BufWriter::new(fs::File::create(dir.join("snapshot_times.csv"))?);
        writeln!(f, "j,t")?;
        for (j, t) in set.times().iter().enumerate() {
            writeln!(f, "{j},{t:.16e}")?;
        }
        f.flush()?;
        self.snapshots = Some(set);
        self.offline = None;
        Ok(())
    }

    fn compute_pod(&mut self, dir: &Path) -> Result<()> {
        let windows = self.config.experiment.windows()?;
        let r_max = self.config.experiment.r_max;
        let center = self.config.center;
        let set = self.snapshots()?;
        let train = window(set, windows.train.0, windows.train.1)?;
        let r_max = r_max.min(train.n_snapshots()).min(train.n_dofs());
        let basis = compute_pod_with(&train, PodOptions { r_max, center })?;
        save_basis(&basis, dir.join("basis.bin"))?;
        let total: f64 = basis.eigenvalues().iter().sum();
        let mut f = BufWriter::new(fs::File::create(dir.join("eigenvalues.csv"))?);
        writeln!(f, "i,lambda,captured")?;
        let mut running = 0.0;
        for (i, &l) in basis.eigenvalues().iter().enumerate() {
            running += l;
            writeln!(f, "{},{l:.16e},{:.16e}", i + 1, running / total)?;
        }
        f.flush()?;
        let system = self.system()?;
        let snapshots = self.snapshots()?.clone();
        let history = project_history(&basis, &snapshots)?;
        self.offline = Some(Offline {
            system,
            snapshots,
            basis,
            history,
            windows,
        });
        Ok(())
    }

    fn compute_operators(&mut self, dir: &Path) -> Result<()> {
        let cfg = self.config.experiment.clone();
        let off = self.offline()?;
        let all = experiment::assemble_all(&cfg, off)?;
        all.save(dir.join("operators.bin"))?;
        self.operators = Some(all);
        self.stages.clear();
        Ok(())
    }

    fn compute_train(&mut self, dir: &Path) -> Result<()> {
        let mut summary = BufWriter::new(fs::File::create(dir.join("train.csv"))?);
        writeln!(summary, "r,d,rows,unknowns,rank,sigma_1")?;
        for r in self.config.experiment.r_values.clone() {
            let st = self.stage_for(r)?;
            let svd = st.problem.svd();
            let sigma = svd.singular_values();
            writeln!(
                summary,
                "{r},{},{},{},{},{:.16e}",
                st.d,
                svd.data().n_rows(),
                svd.data().n_unknowns(),
                svd.rank(),
                sigma.first().copied().unwrap_or(0.0)
            )?;
            let mut f = BufWriter::new(fs::File::create(dir.join(format!("spectrum_r{r}.csv")))?);
            writeln!(f, "i,sigma,retained")?;
            for (i, s) in sigma.iter().enumerate() {
                writeln!(f, "{},{s:.16e},{}", i + 1, u8::from(i < svd.rank()))?;
            }
            f.flush()?;
        }
        summary.flush()?;
        Ok(())
    }

    fn compute_sweep(&mut self, dir: &Path) -> Result<()> {
        let cfg = self.config.experiment.clone();
        let mut rows = BufWriter::new(fs::File::create(dir.join("rows.csv"))?);
        writeln!(rows, "{TABLE_HEADER},d,rank")?;
        for &r in &cfg.r_values {
            let st = self.stage_for(r)?;
            let off = self.offline()?;
            let detail: RowDetail = experiment::evaluate_row(&cfg, off, &st)
                .with_context(|| format!("sweep for r = {r}"))?;
            experiment::write_table_row(&mut rows, &detail.row)?;
            writeln!(rows, ",{},{}", detail.row.d, detail.row.rank)?;

            let mut f = BufWriter::new(fs::File::create(dir.join(format!("sweep_2s_r{r}.csv")))?);
            detail.sweep_2s.write_csv(&mut f)?;
            f.flush()?;
            let mut f = BufWriter::new(fs::File::create(dir.join(format!("sweep_3s_r{r}.csv")))?);
            detail.sweep_3s.write_csv(&mut f)?;
            f.flush()?;

            let ctx = experiment::context(&cfg, off, &st, off.windows.test)?;
            ctx.closure_for(&detail.row.two_scale.candidate)?
                .save(dir.join(format!("closure_2s_r{r}.bin")))?;
            ctx.closure_for(&detail.row.three_scale.candidate)?
                .save(dir.join(format!("closure_3s_r{r}.bin")))?;
        }
        rows.flush()?;
        Ok(())
    }

    fn compute_integrate(&mut self, dir: &Path) -> Result<()> {
        let cfg = self.config.experiment.clone();
        let sweep_dir = self.stage_dir(StageName::Sweep);
        let all = self.operators()?.clone();
        let off = self.offline()?;
        let (t0, t1) = off.windows.test;
        let mut metrics = BufWriter::new(fs::File::create(dir.join("metrics.csv"))?);
        writeln!(metrics, "r,model,avg_l2_error,time_avg_field_error,diverged")?;
        for &r in &cfg.r_values {
            let reference = off.history.window(t0, t1)?;
            let resolved = reference.truncated(r)?;
            let a0 = resolved.row(0, r);
            let galerkin = all.sub_block(r, r)?;
            let mut trajectories: Vec<(&str, RomTrajectory)> = Vec::new();
            for (label, closure) in [
                ("grom", None),
                ("2s", Some(Closure::load(sweep_dir.join(format!("closure_2s_r{r}.bin")))?)),
                ("3s", Some(Closure::load(sweep_dir.join(format!("closure_3s_r{r}.bin")))?)),
            ] {
                let model = RomModel::new(galerkin.clone(), closure)?;
                let traj = integrate_rom_with(&model, &a0, cfg.rom_dt, resolved.times[0], t1, &cfg.integrate)?;
                let err = avg_l2_error(&traj, &resolved, r)?;
                let field = time_avg_field_error(&traj, &reference, r, MeanReference::Resolved)?;
                writeln!(
                    metrics,
                    "{r},{label},{:.16e},{field:.16e},{}",
                    err.mean,
                    u8::from(traj.diverged())
                )?;
                traj.save_csv(dir.join(format!("traj_{label}_r{r}.csv")))?;
                trajectories.push((label, traj));
            }

            let fom_energy: Vec<f64> = (0..resolved.n_times())
                .map(|j| 0.5 * resolved.row(j, r).iter().map(|v| v * v).sum::<f64>())
                .collect();
            let series: Vec<Vec<(f64, f64)>> =
                trajectories.iter().map(|(_, t)| kinetic_energy_series(t)).collect();
            let mut f = BufWriter::new(fs::File::create(dir.join(format!("energy_r{r}.csv")))?);
            writeln!(f, "t,fom,grom,2s,3s")?;
            for (j, t) in resolved.times.iter().enumerate() {
                write!(f, "{t:.16e},{:.16e}", fom_energy[j])?;
                for s in &series {
                    // Diverged trajectories stop early; their cells stay empty.
                    match s.get(j) {
                        Some((_, e)) => write!(f, ",{e:.16e}")?,
                        None => write!(f, ",")?,
                    }
                }
                writeln!(f)?;
            }
            f.flush()?;
        }
        metrics.flush()?;
        Ok(())
    }

    fn report(&mut self) -> Result<()> {
        let rows = fs::read_to_string(self.stage_dir(StageName::Sweep).join("rows.csv"))?;
        let hashed = [
            StageName::Fom,
            StageName::Pod,
            StageName::Operators,
            StageName::Train,
            StageName::Sweep,
            StageName::Integrate,
        ];
        let mut table = String::new();
        let mut lines = rows.lines();
        let header = lines.next().context("empty sweep rows")?;
        let _ = write!(table, "{header},config_hash");
        for st in hashed {
            let _ = write!(table, ",{}_hash", st.name());
        }
        table.push('\n');
        for line in lines {
            let _ = write!(table, "{line},{}", self.config_hash);
            for st in hashed {
                let _ = write!(table, ",{}", self.key(st));
            }
            table.push('\n');
        }
        fs::write(self.opts.out.join("table.csv"), table)?;

        let mut prov = String::new();
        let _ = writeln!(prov, "config_hash = {}", self.config_hash);
        for st in hashed {
            let _ = writeln!(prov, "{}_hash = {}", st.name(), self.key(st));
        }
        prov.push('\n');
        prov.push_str(&self.config.canonical());
        fs::write(self.opts.out.join("provenance.txt"), prov)?;
        Ok(())
    }

    /// Copy the CSV artifacts of every cached stage up to `last` into the
    /// output directory.
    fn publish(&self, last: StageName) -> Result<()> {
        for stage in StageName::ALL.into_iter().filter(|&s| s <= last && s != StageName::Report) {
            let dir = self.stage_dir(stage);
            let mut names: Vec<_> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name())
                .filter(|n| {
                    let n = n.to_string_lossy();
                    n.ends_with(".csv") && n != "rows.csv"
                })
                .collect();
            names.sort();
            for name in names {
                fs::copy(dir.join(&name), self.opts.out.join(&name))?;
            }
        }
        Ok(())
    }
}
