//! Data-driven VMS closure: exact closure targets from FOM coefficients,
//! the quadratic feature matrix, truncated-SVD least squares and the two-
//! and three-scale closure operators.
//!
//! The monolithic problem over all entries of `Ã` (r×r) and `B̃` (r×r×r)
//! decouples by output mode: residual component `i` only involves row `i`
//! of `Ã` and slice `i` of `B̃`, and every mode shares the same features.
//! One SVD of the `M × (r + r²)` data matrix `D` therefore serves all modes,
//! and the three-scale split simply assigns different truncations to the
//! rows `1..r₁` and `r₁+1..r`.
//!
//! Unknown ordering for mode `i`: `[Ã_i1 .. Ã_ir, B̃_i11, B̃_i12, .., B̃_irr]`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SVD};

use crate::binio::{write_f64s, write_u32, write_u64, write_u8, LeReader};
use crate::error::{check_len, Result, RomError};
use crate::galerkin::RomOperators;
use crate::pod::CoeffHistory;

pub const CLOSURE_MAGIC: &[u8; 8] = b"ROMCLOS1";
pub const CLOSURE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetMode {
    /// Convective difference only: `(B^d)(a_d, a_d) − B(a_r, a_r)`.
    NonlinearOnly,
    /// Whole right-hand side difference, linear part included.
    FullRhs,
}

impl TargetMode {
    pub fn code(self) -> u8 {
        match self {
            TargetMode::NonlinearOnly => 0,
            TargetMode::FullRhs => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(TargetMode::NonlinearOnly),
            1 => Ok(TargetMode::FullRhs),
            c => Err(RomError::Format(format!("unknown target mode {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetMode::NonlinearOnly => "nonlinear-only",
            TargetMode::FullRhs => "full-rhs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosureTargets {
    pub times: Vec<f64>,
    /// `M × r`, entry `(j, i)` is `τ_i(t_j)`.
    pub targets: DMatrix<f64>,
    pub mode: TargetMode,
    pub d: usize,
}

impl ClosureTargets {
    pub fn r(&self) -> usize {
        self.targets.ncols()
    }
}

pub fn compute_closure_targets(
    extended: &RomOperators,
    square: &RomOperators,
    coeffs: &CoeffHistory,
    mode: TargetMode,
) -> Result<ClosureTargets> {
    let r = square.rows();
    let d = extended.cols();
    check_len("square operator columns", r, square.cols())?;
    check_len("extended operator rows", r, extended.rows())?;
    if d < r {
        return Err(RomError::InvalidConfig(format!("d = {d} < r = {r}")));
    }
    if coeffs.n_modes() < d {
        return Err(RomError::DimensionMismatch {
            context: "coefficient history modes (need >= d)",
            expected: d,
            actual: coeffs.n_modes(),
        });
    }
    if coeffs.n_times() < 2 {
        return Err(RomError::InvalidSnapshots(
            "closure targets need at least 2 snapshots".into(),
        ));
    }

    let m = coeffs.n_times();
    let mut targets = DMatrix::zeros(m, r);
    for j in 0..m {
        let a = coeffs.row(j, d);
        for i in 0..r {
            let mut tau = extended.quadratic_row(i, &a, d) - square.quadratic_row(i, &a, r);
            if mode == TargetMode::FullRhs {
                tau += extended.linear_row(i, &a, d) - square.linear_row(i, &a, r);
            }
            targets[(j, i)] = tau;
        }
    }
    Ok(ClosureTargets {
        times: coeffs.times.clone(),
        targets,
        mode,
        d,
    })
}

/// Feature rows `[a; a ⊗ a]` of the resolved FOM coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    r: usize,
    matrix: DMatrix<f64>,
}

impl DataMatrix {
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_unknowns(&self) -> usize {
        self.matrix.ncols()
    }
}

pub fn feature_row(a: &[f64], r: usize, out: &mut [f64]) {
    out[..r].copy_from_slice(&a[..r]);
    for m in 0..r {
        for n in 0..r {
            out[r + m * r + n] = a[m] * a[n];
        }
    }
}

pub fn build_data_matrix(coeffs: &CoeffHistory, r: usize) -> Result<DataMatrix> {
    if r == 0 || coeffs.n_modes() < r {
        return Err(RomError::DimensionMismatch {
            context: "coefficient history modes (need >= r)",
            expected: r,
            actual: coeffs.n_modes(),
        });
    }
    let p = r + r * r;
    let m = coeffs.n_times();
    let mut matrix = DMatrix::zeros(m, p);
    let mut row = vec![0.0; p];
    for j in 0..m {
        feature_row(&coeffs.row(j, r), r, &mut row);
        for (k, v) in row.iter().enumerate() {
            matrix[(j, k)] = *v;
        }
    }
    Ok(DataMatrix { r, matrix })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsvdReport {
    pub singular_values: Vec<f64>,
    /// Number of singular values actually used (ties at the cutoff kept).
    pub retained: usize,
    /// `σ_m` of the requested truncation.
    pub tol: f64,
    /// Frobenius norm of `rhs − D x`.
    pub residual_norm: f64,
}

/// Thin SVD of a data matrix with singular values in non-increasing order.
#[derive(Debug, Clone)]
pub struct DataSvd {
    data: DataMatrix,
    /// Left singular vectors as contiguous columns of length `M`.
    u: Vec<Vec<f64>>,
    /// Right singular vectors as contiguous columns of length `r + r²`.
    v: Vec<Vec<f64>>,
    sigma: Vec<f64>,
    rank: usize,
}

impl DataSvd {
    pub fn new(data: &DataMatrix) -> Result<Self> {
        let svd = SVD::new(data.matrix.clone(), true, true);
        let u_mat = svd.u.expect("requested U");
        let vt = svd.v_t.expect("requested Vᵀ");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let sigma: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
        let sigma1 = sigma.first().copied().unwrap_or(0.0);
        if !(sigma1 > 0.0) {
            return Err(RomError::ZeroDataMatrix);
        }
        let cutoff =
            f64::EPSILON * sigma1 * data.n_rows().max(data.n_unknowns()) as f64;
        let rank = sigma.iter().filter(|&&s| s > cutoff).count();
        let u = order
            .iter()
            .map(|&k| u_mat.column(k).iter().copied().collect())
            .collect();
        let v = order
            .iter()
            .map(|&k| vt.row(k).iter().copied().collect())
            .collect();
        Ok(Self {
            data: data.clone(),
            u,
            v,
            sigma,
            rank,
        })
    }

    pub fn data(&self) -> &DataMatrix {
        &self.data
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.sigma
    }

    /// Numerical rank: `#{σ_i > ε σ_1 max(M, r + r²)}`.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Retained count for a requested `m`, widened over ties `σ_i = σ_m`.
    pub fn effective_count(&self, m: usize) -> Result<usize> {
        if m == 0 || m > self.rank {
            return Err(RomError::RankExceeded {
                requested: m,
                rank: self.rank,
            });
        }
        let tol = self.sigma[m - 1];
        Ok(self.sigma[..self.rank].iter().filter(|&&s| s >= tol).count())
    }

    /// Count of singular values `≥ tol` (at least 1, at most the rank).
    pub fn retained_for_tol(&self, tol: f64) -> usize {
        self.sigma[..self.rank]
            .iter()
            .filter(|&&s| s >= tol)
            .count()
            .max(1)
    }

    /// `u_kᵀ f` for every singular index `k < rank`; fixed summation order so
    /// that any subset of columns reproduces identical bits.
    pub fn project(&self, f: &[f64]) -> Vec<f64> {
        self.u[..self.rank]
            .iter()
            .map(|uk| uk.iter().zip(f).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Minimum-norm solution from precomputed projections, `count` terms.
    pub fn solution_from_projection(&self, proj: &[f64], count: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.data.n_unknowns()];
        for k in 0..count {
            let c = proj[k] / self.sigma[k];
            x.iter_mut().zip(&self.v[k]).for_each(|(xi, vk)| *xi += c * vk);
        }
        x
    }

    /// Truncated-SVD solve for every column of `rhs` (`M × k`).
    pub fn solve(&self, rhs: &DMatrix<f64>, m: usize) -> Result<(DMatrix<f64>, TsvdReport)> {
        check_len("least-squares right-hand side rows", self.data.n_rows(), rhs.nrows())?;
        let count = self.effective_count(m)?;
        let p = self.data.n_unknowns();
        let mut x = DMatrix::zeros(p, rhs.ncols());
        for (c, col) in rhs.column_iter().enumerate() {
            let f: Vec<f64> = col.iter().copied().collect();
            let sol = self.solution_from_projection(&self.project(&f), count);
            x.column_mut(c).copy_from_slice(&sol);
        }
        let residual_norm = (&self.data.matrix * &x - rhs).norm();
        Ok((
            x,
            TsvdReport {
                singular_values: self.sigma.clone(),
                retained: count,
                tol: self.sigma[m - 1],
                residual_norm,
            },
        ))
    }
}

pub fn tsvd_solve(
    data: &DataMatrix,
    rhs: &DMatrix<f64>,
    m: usize,
) -> Result<(DMatrix<f64>, TsvdReport)> {
    DataSvd::new(data)?.solve(rhs, m)
}

/// Provenance of a trained closure.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosureMeta {
    pub r: usize,
    /// 0 for two-scale closures.
    pub r1: usize,
    pub m_large: usize,
    pub m_small: usize,
    pub tol_large: f64,
    pub tol_small: f64,
    pub mode: TargetMode,
    pub d: usize,
}

/// Two-scale closure `Ã a + aᵀ B̃ a`, stored as an `r × r` operator pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosureOperators {
    pub operators: RomOperators,
    pub report: TsvdReport,
    pub meta: ClosureMeta,
}

impl ClosureOperators {
    pub fn a_tilde(&self) -> &DMatrix<f64> {
        self.operators.linear()
    }

    pub fn b_tilde(&self) -> &[f64] {
        self.operators.quadratic()
    }
}

/// Three-scale closure: large-scale rows `1..r₁` and small-scale rows
/// `r₁+1..r`, each acting on the full resolved vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosureOperators3S {
    pub r1: usize,
    pub large: RomOperators,
    pub small: RomOperators,
    pub report_large: TsvdReport,
    pub report_small: TsvdReport,
    pub meta: ClosureMeta,
}

impl ClosureOperators3S {
    pub fn a_tilde_l(&self) -> &DMatrix<f64> {
        self.large.linear()
    }

    pub fn b_tilde_l(&self) -> &[f64] {
        self.large.quadratic()
    }

    pub fn a_tilde_s(&self) -> &DMatrix<f64> {
        self.small.linear()
    }

    pub fn b_tilde_s(&self) -> &[f64] {
        self.small.quadratic()
    }

    /// Large rows above small rows as one `r × r` operator.
    pub fn stacked(&self) -> RomOperators {
        let r = self.large.cols();
        let linear = DMatrix::from_fn(r, r, |i, m| {
            if i < self.r1 {
                self.large.linear()[(i, m)]
            } else {
                self.small.linear()[(i - self.r1, m)]
            }
        });
        let quadratic = self
            .large
            .quadratic()
            .iter()
            .chain(self.small.quadratic())
            .copied()
            .collect();
        RomOperators::new(0.0, linear, quadratic).expect("consistent block shapes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Closure {
    TwoScale(ClosureOperators),
    ThreeScale(ClosureOperators3S),
}

impl Closure {
    pub fn r(&self) -> usize {
        match self {
            Closure::TwoScale(c) => c.operators.rows(),
            Closure::ThreeScale(c) => c.large.cols(),
        }
    }

    pub fn meta(&self) -> &ClosureMeta {
        match self {
            Closure::TwoScale(c) => &c.meta,
            Closure::ThreeScale(c) => &c.meta,
        }
    }

    /// The closure as a single `r × r` operator pair.
    pub fn as_operators(&self) -> RomOperators {
        match self {
            Closure::TwoScale(c) => c.operators.clone(),
            Closure::ThreeScale(c) => c.stacked(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CLOSURE_MAGIC);
        write_u32(&mut out, CLOSURE_VERSION).unwrap();
        let meta = self.meta();
        for v in [meta.r, meta.r1, meta.m_large, meta.m_small, meta.d] {
            write_u64(&mut out, v as u64).unwrap();
        }
        write_f64s(&mut out, &[meta.tol_large, meta.tol_small]).unwrap();
        write_u8(&mut out, meta.mode.code()).unwrap();
        match self {
            Closure::TwoScale(c) => {
                write_u8(&mut out, 2).unwrap();
                c.operators.write_body(&mut out);
                write_report(&mut out, &c.report);
            }
            Closure::ThreeScale(c) => {
                write_u8(&mut out, 3).unwrap();
                c.large.write_body(&mut out);
                c.small.write_body(&mut out);
                write_report(&mut out, &c.report_large);
                write_report(&mut out, &c.report_small);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(bytes);
        let magic: [u8; 8] = r.bytes("magic")?;
        if &magic != CLOSURE_MAGIC {
            return Err(RomError::Format("not a closure blob".into()));
        }
        let version = r.u32("version")?;
        if version != CLOSURE_VERSION {
            return Err(RomError::UnsupportedVersion {
                found: version,
                supported: CLOSURE_VERSION,
            });
        }
        let mut ints = [0usize; 5];
        for (k, what) in ["r", "r1", "m_large", "m_small", "d"].iter().enumerate() {
            ints[k] = r.u64(what)? as usize;
        }
        let tol_large = r.f64("tol_large")?;
        let tol_small = r.f64("tol_small")?;
        let mode = TargetMode::from_code(r.u8("target mode")?)?;
        let meta = ClosureMeta {
            r: ints[0],
            r1: ints[1],
            m_large: ints[2],
            m_small: ints[3],
            tol_large,
            tol_small,
            mode,
            d: ints[4],
        };
        let closure = match r.u8("scale count")? {
            2 => {
                let operators = RomOperators::read_body(&mut r)?;
                let report = read_report(&mut r)?;
                Closure::TwoScale(ClosureOperators {
                    operators,
                    report,
                    meta,
                })
            }
            3 => {
                let large = RomOperators::read_body(&mut r)?;
                let small = RomOperators::read_body(&mut r)?;
                let report_large = read_report(&mut r)?;
                let report_small = read_report(&mut r)?;
                Closure::ThreeScale(ClosureOperators3S {
                    r1: meta.r1,
                    large,
                    small,
                    report_large,
                    report_small,
                    meta,
                })
            }
            k => return Err(RomError::Format(format!("unknown scale count {k}"))),
        };
        if !r.rest()?.is_empty() {
            return Err(RomError::Format("trailing bytes after closure".into()));
        }
        Ok(closure)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn write_report(out: &mut Vec<u8>, report: &TsvdReport) {
    write_u64(out, report.singular_values.len() as u64).unwrap();
    write_f64s(out, &report.singular_values).unwrap();
    write_u64(out, report.retained as u64).unwrap();
    write_f64s(out, &[report.tol, report.residual_norm]).unwrap();
}

fn read_report<R: Read>(r: &mut LeReader<R>) -> Result<TsvdReport> {
    let k = r.u64("singular value count")? as usize;
    let singular_values = r.f64s(k, "singular values")?;
    let retained = r.u64("retained")? as usize;
    let tol = r.f64("tol")?;
    let residual_norm = r.f64("residual")?;
    Ok(TsvdReport {
        singular_values,
        retained,
        tol,
        residual_norm,
    })
}

/// A factored training problem: the SVD of `D` and the projections of every
/// target column, shared by all truncations of a sweep.
#[derive(Debug, Clone)]
pub struct ClosureProblem {
    svd: DataSvd,
    targets: ClosureTargets,
    /// `projections[i][k] = u_kᵀ τ_i`.
    projections: Vec<Vec<f64>>,
}

impl ClosureProblem {
    pub fn new(targets: &ClosureTargets, data: &DataMatrix) -> Result<Self> {
        check_len("targets vs data matrix snapshots", data.n_rows(), targets.targets.nrows())?;
        check_len("targets vs data matrix r", data.r(), targets.r())?;
        let svd = DataSvd::new(data)?;
        Ok(Self::from_svd(svd, targets))
    }

    pub fn from_svd(svd: DataSvd, targets: &ClosureTargets) -> Self {
        let projections = targets
            .targets
            .column_iter()
            .map(|c| svd.project(&c.iter().copied().collect::<Vec<_>>()))
            .collect();
        Self {
            svd,
            targets: targets.clone(),
            projections,
        }
    }

    pub fn svd(&self) -> &DataSvd {
        &self.svd
    }

    pub fn rank(&self) -> usize {
        self.svd.rank()
    }

    pub fn r(&self) -> usize {
        self.targets.r()
    }

    /// Least-squares solve for output modes `rows`, returning the operator
    /// block and its report.
    fn solve_rows(
        &self,
        rows: std::ops::Range<usize>,
        m: usize,
    ) -> Result<(RomOperators, TsvdReport)> {
        let r = self.r();
        let count = self.svd.effective_count(m)?;
        let nrows = rows.len();
        let mut linear = DMatrix::zeros(nrows, r);
        let mut quadratic = vec![0.0; nrows * r * r];
        let mut x_all = DMatrix::zeros(r + r * r, nrows);
        for (local, i) in rows.clone().enumerate() {
            let x = self.svd.solution_from_projection(&self.projections[i], count);
            for m in 0..r {
                linear[(local, m)] = x[m];
            }
            quadratic[local * r * r..(local + 1) * r * r].copy_from_slice(&x[r..]);
            x_all.column_mut(local).copy_from_slice(&x);
        }
        let rhs = self.targets.targets.columns(rows.start, nrows);
        let residual_norm = (self.svd.data.matrix() * &x_all - rhs).norm();
        let report = TsvdReport {
            singular_values: self.svd.sigma.clone(),
            retained: count,
            tol: self.svd.sigma[m - 1],
            residual_norm,
        };
        Ok((RomOperators::new(0.0, linear, quadratic)?, report))
    }

    pub fn train_2s(&self, m: usize) -> Result<ClosureOperators> {
        let r = self.r();
        let (operators, report) = self.solve_rows(0..r, m)?;
        let meta = ClosureMeta {
            r,
            r1: 0,
            m_large: m,
            m_small: m,
            tol_large: report.tol,
            tol_small: report.tol,
            mode: self.targets.mode,
            d: self.targets.d,
        };
        Ok(ClosureOperators {
            operators,
            report,
            meta,
        })
    }

    pub fn train_3s(&self, r1: usize, m_large: usize, m_small: usize) -> Result<ClosureOperators3S> {
        let r = self.r();
        if r1 == 0 || r1 >= r {
            return Err(RomError::InvalidConfig(format!(
                "r1 = {r1} must satisfy 1 <= r1 < r = {r}"
            )));
        }
        let (large, report_large) = self.solve_rows(0..r1, m_large)?;
        let (small, report_small) = self.solve_rows(r1..r, m_small)?;
        let meta = ClosureMeta {
            r,
            r1,
            m_large,
            m_small,
            tol_large: report_large.tol,
            tol_small: report_small.tol,
            mode: self.targets.mode,
            d: self.targets.d,
        };
        Ok(ClosureOperators3S {
            r1,
            large,
            small,
            report_large,
            report_small,
            meta,
        })
    }
}

pub fn train_2s(targets: &ClosureTargets, data: &DataMatrix, m: usize) -> Result<ClosureOperators> {
    ClosureProblem::new(targets, data)?.train_2s(m)
}

pub fn train_3s(
    targets: &ClosureTargets,
    data: &DataMatrix,
    r1: usize,
    m_large: usize,
    m_small: usize,
) -> Result<ClosureOperators3S> {
    ClosureProblem::new(targets, data)?.train_3s(r1, m_large, m_small)
}

/// Closure correction `Ã a + aᵀ B̃ a` (three-scale: large rows then small).
pub fn closure_rhs(closure: &Closure, a: &[f64]) -> Result<Vec<f64>> {
    let r = closure.r();
    check_len("closure state", r, a.len())?;
    let eval = |ops: &RomOperators, out: &mut Vec<f64>| {
        for i in 0..ops.rows() {
            out.push(ops.linear_row(i, a, r) + ops.quadratic_row(i, a, r));
        }
    };
    let mut out = Vec::with_capacity(r);
    match closure {
        Closure::TwoScale(c) => eval(&c.operators, &mut out),
        Closure::ThreeScale(c) => {
            eval(&c.large, &mut out);
            eval(&c.small, &mut out);
        }
    }
    Ok(out)
}
