//! Truncation searches: train each candidate closure, integrate it and keep
//! the one with the smallest average L² error.
//!
//! Candidates are evaluated in parallel; the argmin is a total order on
//! `(error, candidate key)`, so results do not depend on scheduling.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;

use crate::closure::{Closure, ClosureProblem, DataSvd};
use crate::error::{Result, RomError};
use crate::galerkin::RomOperators;
use crate::integrate::{integrate_rom_with, IntegrateOptions, RomModel, RomTrajectory};
use crate::metrics::avg_l2_error;
use crate::pod::CoeffHistory;

/// Everything needed to score a closure: the Galerkin operators, the
/// factored training problem and the evaluation window.
#[derive(Debug, Clone)]
pub struct SweepContext {
    pub galerkin: RomOperators,
    pub problem: ClosureProblem,
    /// Initial coefficients at `t0`.
    pub a0: Vec<f64>,
    pub dt: f64,
    pub t0: f64,
    pub t_end: f64,
    /// Reference coefficients on the evaluation window (at least `r` modes).
    pub reference: CoeffHistory,
    pub options: IntegrateOptions,
}

impl SweepContext {
    pub fn r(&self) -> usize {
        self.galerkin.rows()
    }

    pub fn rank(&self) -> usize {
        self.problem.rank()
    }

    pub fn integrate(&self, closure: Option<Closure>) -> Result<RomTrajectory> {
        let model = RomModel::new(self.galerkin.clone(), closure)?;
        integrate_rom_with(&model, &self.a0, self.dt, self.t0, self.t_end, &self.options)
    }

    pub fn score(&self, closure: Option<Closure>) -> Result<f64> {
        let traj = self.integrate(closure)?;
        Ok(avg_l2_error(&traj, &self.reference, self.r())?.mean)
    }

    pub fn closure_for(&self, c: &Candidate) -> Result<Closure> {
        if c.r1 == 0 {
            Ok(Closure::TwoScale(self.problem.train_2s(c.m_large)?))
        } else {
            Ok(Closure::ThreeScale(
                self.problem.train_3s(c.r1, c.m_large, c.m_small)?,
            ))
        }
    }
}

/// A two-scale candidate has `r1 = 0` and `m_large = m_small = m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub r1: usize,
    pub m_large: usize,
    pub m_small: usize,
    pub tol_large: f64,
    pub tol_small: f64,
}

impl Candidate {
    fn key(&self) -> (usize, usize, usize) {
        (self.r1, self.m_large, self.m_small)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub candidate: Candidate,
    /// `+∞` for diverged candidates.
    pub error: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub r: usize,
    pub entries: Vec<SweepEntry>,
    pub best: usize,
    /// Number of entries sharing the minimal error.
    pub ties: usize,
}

impl SweepResult {
    pub fn best_entry(&self) -> &SweepEntry {
        &self.entries[self.best]
    }

    pub fn best_error(&self) -> f64 {
        self.entries[self.best].error
    }

    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "r,r1,m_l,m_s,tol_l,tol_s,error,diverged")?;
        for e in &self.entries {
            let c = &e.candidate;
            writeln!(
                out,
                "{},{},{},{},{:.16e},{:.16e},{:.16e},{}",
                self.r, c.r1, c.m_large, c.m_small, c.tol_large, c.tol_small, e.error, e.diverged
            )?;
        }
        Ok(())
    }
}

fn compare(a: &SweepEntry, b: &SweepEntry) -> Ordering {
    a.error
        .total_cmp(&b.error)
        .then_with(|| a.candidate.key().cmp(&b.candidate.key()))
}

fn run(ctx: &SweepContext, candidates: Vec<Candidate>) -> Result<SweepResult> {
    let entries: Vec<SweepEntry> = candidates
        .into_par_iter()
        .map(|candidate| {
            let closure = ctx.closure_for(&candidate)?;
            let traj = ctx.integrate(Some(closure))?;
            let report = avg_l2_error(&traj, &ctx.reference, ctx.r())?;
            Ok(SweepEntry {
                candidate,
                error: report.mean,
                diverged: report.diverged,
            })
        })
        .collect::<Result<_>>()?;
    let best = (0..entries.len())
        .min_by(|&i, &j| compare(&entries[i], &entries[j]))
        .expect("non-empty grid");
    let ties = entries
        .iter()
        .filter(|e| e.error.total_cmp(&entries[best].error) == Ordering::Equal)
        .count();
    Ok(SweepResult {
        r: ctx.r(),
        entries,
        best,
        ties,
    })
}

fn check_m(svd: &DataSvd, grid: &[usize], what: &'static str) -> Result<()> {
    if grid.is_empty() {
        return Err(RomError::EmptyGrid(what));
    }
    for &m in grid {
        if m == 0 || m > svd.rank() {
            return Err(RomError::RankExceeded {
                requested: m,
                rank: svd.rank(),
            });
        }
    }
    Ok(())
}

pub fn sweep_2s(ctx: &SweepContext, m_grid: &[usize]) -> Result<SweepResult> {
    let svd = ctx.problem.svd();
    check_m(svd, m_grid, "m grid")?;
    let sigma = svd.singular_values();
    let candidates = m_grid
        .iter()
        .map(|&m| Candidate {
            r1: 0,
            m_large: m,
            m_small: m,
            tol_large: sigma[m - 1],
            tol_small: sigma[m - 1],
        })
        .collect();
    run(ctx, candidates)
}

pub fn sweep_3s(
    ctx: &SweepContext,
    r1_grid: &[usize],
    ml_grid: &[usize],
    ms_grid: &[usize],
) -> Result<SweepResult> {
    let svd = ctx.problem.svd();
    if r1_grid.is_empty() {
        return Err(RomError::EmptyGrid("r1 grid"));
    }
    if let Some(&bad) = r1_grid.iter().find(|&&r1| r1 == 0 || r1 >= ctx.r()) {
        return Err(RomError::InvalidConfig(format!(
            "r1 = {bad} must satisfy 1 <= r1 < r = {}",
            ctx.r()
        )));
    }
    check_m(svd, ml_grid, "m_L grid")?;
    check_m(svd, ms_grid, "m_S grid")?;
    let sigma = svd.singular_values();
    let mut candidates = Vec::with_capacity(r1_grid.len() * ml_grid.len() * ms_grid.len());
    for &r1 in r1_grid {
        for &ml in ml_grid {
            for &ms in ms_grid {
                candidates.push(Candidate {
                    r1,
                    m_large: ml,
                    m_small: ms,
                    tol_large: sigma[ml - 1],
                    tol_small: sigma[ms - 1],
                });
            }
        }
    }
    run(ctx, candidates)
}

/// Every retained count `1..=rank(D)`.
pub fn full_m_grid(svd: &DataSvd) -> Vec<usize> {
    (1..=svd.rank()).collect()
}

pub const DECADE_TOLERANCES: [f64; 9] = [1e2, 1e1, 1e0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];

/// Retained counts for the decade tolerances (`#{σ ≥ tol}`, at least one),
/// merged with `extra`, sorted and deduplicated.
pub fn decade_m_grid(svd: &DataSvd, extra: &[usize]) -> Vec<usize> {
    let mut grid: Vec<usize> = DECADE_TOLERANCES
        .iter()
        .map(|&tol| svd.retained_for_tol(tol))
        .chain(extra.iter().copied())
        .collect();
    grid.sort_unstable();
    grid.dedup();
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closure::{build_data_matrix, ClosureTargets, TargetMode};
    use crate::integrate::integrate_rom;
    use nalgebra::DMatrix;

    /// Coefficients generated by `G + planted closure`; the Galerkin part
    /// alone misses the planted terms, which lie in the span of `D`.
    fn planted_context() -> SweepContext {
        let g = RomOperators::new(
            0.0,
            DMatrix::from_row_slice(2, 2, &[-0.2, 1.0, -1.0, -0.2]),
            vec![0.0, 0.3, 0.0, 0.0, 0.0, 0.0, -0.3, 0.0],
        )
        .unwrap();
        let planted = RomOperators::new(
            0.0,
            DMatrix::from_row_slice(2, 2, &[-0.3, 0.0, 0.1, -0.4]),
            vec![0.0, 0.1, 0.1, 0.0, 0.2, 0.0, 0.0, -0.1],
        )
        .unwrap();
        let truth = RomOperators::new(
            0.0,
            g.linear() + planted.linear(),
            g.quadratic().iter().zip(planted.quadratic()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let traj = integrate_rom(&RomModel::galerkin(truth).unwrap(), &[1.0, 0.0], 1e-2, 0.0, 2.0).unwrap();
        let reference = CoeffHistory::new(traj.times.clone(), traj.coeffs.clone()).unwrap();
        let data = build_data_matrix(&reference, 2).unwrap();
        let mut targets = DMatrix::zeros(reference.n_times(), 2);
        for j in 0..reference.n_times() {
            let a = reference.row(j, 2);
            for i in 0..2 {
                targets[(j, i)] = planted.linear_row(i, &a, 2) + planted.quadratic_row(i, &a, 2);
            }
        }
        let targets = ClosureTargets {
            times: reference.times.clone(),
            targets,
            mode: TargetMode::FullRhs,
            d: 2,
        };
        SweepContext {
            galerkin: g,
            problem: ClosureProblem::new(&targets, &data).unwrap(),
            a0: vec![1.0, 0.0],
            dt: 1e-2,
            t0: 0.0,
            t_end: 2.0,
            reference,
            options: IntegrateOptions::default(),
        }
    }

    #[test]
    fn planted_closure_is_recovered() {
        let ctx = planted_context();
        let galerkin_error = ctx.score(None).unwrap();
        let res = sweep_2s(&ctx, &full_m_grid(ctx.problem.svd())).unwrap();
        assert_eq!(res.entries.len(), ctx.rank());
        assert!(galerkin_error > 1e-2);
        assert!(res.best_error() < 1e-8, "{}", res.best_error());
    }

    #[test]
    fn single_candidate_grids() {
        let ctx = planted_context();
        let rank = ctx.rank();
        let res = sweep_2s(&ctx, &[rank]).unwrap();
        assert_eq!(res.best, 0);
        assert_eq!(res.ties, 1);
        let res = sweep_3s(&ctx, &[1], &[2], &[3]).unwrap();
        assert_eq!(res.entries.len(), 1);
        assert_eq!(res.best_entry().candidate.key(), (1, 2, 3));
    }

    #[test]
    fn three_scale_contains_two_scale_diagonal() {
        let ctx = planted_context();
        let grid = full_m_grid(ctx.problem.svd());
        let two = sweep_2s(&ctx, &grid).unwrap();
        let three = sweep_3s(&ctx, &[1], &grid, &grid).unwrap();
        assert!(three.best_error() <= two.best_error());
        for e in three.entries.iter().filter(|e| e.candidate.m_large == e.candidate.m_small) {
            let m = e.candidate.m_large;
            let d = two.entries.iter().find(|t| t.candidate.m_large == m).unwrap();
            assert_eq!(e.error, d.error);
        }
    }

    #[test]
    fn order_independent() {
        let ctx = planted_context();
        let a = sweep_2s(&ctx, &[1, 2, 3, 4, 5]).unwrap();
        let b = sweep_2s(&ctx, &[5, 4, 3, 2, 1]).unwrap();
        assert_eq!(a.best_entry(), b.best_entry());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| sweep_2s(&ctx, &[1, 2, 3, 4, 5]).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn ties_prefer_smallest_key() {
        let mk = |r1, ml, ms, error| SweepEntry {
            candidate: Candidate { r1, m_large: ml, m_small: ms, tol_large: 0.0, tol_small: 0.0 },
            error,
            diverged: false,
        };
        let mut v = vec![mk(2, 1, 1, 0.5), mk(1, 3, 1, 0.5), mk(1, 2, 9, 0.5), mk(1, 1, 1, 0.7)];
        v.sort_by(compare);
        assert_eq!(v[0].candidate.key(), (1, 2, 9));
        let inf = mk(1, 1, 1, f64::INFINITY);
        assert_eq!(compare(&mk(3, 3, 3, 1e9), &inf), Ordering::Less);
    }

    #[test]
    fn grid_errors() {
        let ctx = planted_context();
        assert!(matches!(sweep_2s(&ctx, &[]), Err(RomError::EmptyGrid(_))));
        assert!(sweep_2s(&ctx, &[ctx.rank() + 1]).is_err());
        assert!(sweep_3s(&ctx, &[2], &[1], &[1]).is_err());
        assert!(sweep_3s(&ctx, &[], &[1], &[1]).is_err());
    }

    #[test]
    fn decade_grid_mapping() {
        let ctx = planted_context();
        let svd = ctx.problem.svd();
        let grid = decade_m_grid(svd, &[3]);
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
        assert!(grid.contains(&3));
        assert!(grid.iter().all(|&m| (1..=svd.rank()).contains(&m)));
        let huge = svd.retained_for_tol(1e300);
        assert_eq!(huge, 1);
    }

    #[test]
    fn csv_layout() {
        let ctx = planted_context();
        let res = sweep_2s(&ctx, &[1, 2]).unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "r,r1,m_l,m_s,tol_l,tol_s,error,diverged");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("2,0,1,1,"));
    }
}
