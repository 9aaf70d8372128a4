//! Time integration of the reduced coefficient ODE
//! `ȧ = (A + Ã) a + aᵀ (B + B̃) a`.
//!
//! Numerical blow-up is reported through [`BlowUp`] on the trajectory rather
//! than as an error so that sweeps can score divergent candidates.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::closure::Closure;
use crate::error::{check_len, Result, RomError};
use crate::galerkin::RomOperators;
use crate::snapshot::{SnapshotSet, Weight};

pub const BLOWUP_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    CrankNicolson,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrateOptions {
    pub scheme: Scheme,
    /// Fixed-point increment tolerance, relative to `max(1, ‖a‖₂)`.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub blowup_threshold: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::CrankNicolson,
            tolerance: 1e-12,
            max_iterations: 100,
            blowup_threshold: BLOWUP_THRESHOLD,
        }
    }
}

/// Galerkin operators plus an optional closure, merged into one operator pair.
#[derive(Debug, Clone)]
pub struct RomModel {
    galerkin: RomOperators,
    closure: Option<Closure>,
    total: RomOperators,
}

impl RomModel {
    pub fn galerkin(ops: RomOperators) -> Result<Self> {
        Self::new(ops, None)
    }

    pub fn new(ops: RomOperators, closure: Option<Closure>) -> Result<Self> {
        check_len("galerkin operator columns", ops.rows(), ops.cols())?;
        let total = match &closure {
            None => ops.clone(),
            Some(c) => {
                check_len("closure dimension", ops.rows(), c.r())?;
                let extra = c.as_operators();
                let linear = ops.linear() + extra.linear();
                let quadratic = ops
                    .quadratic()
                    .iter()
                    .zip(extra.quadratic())
                    .map(|(b, c)| b + c)
                    .collect();
                RomOperators::new(ops.nu(), linear, quadratic)?
            }
        };
        Ok(Self {
            galerkin: ops,
            closure,
            total,
        })
    }

    pub fn r(&self) -> usize {
        self.galerkin.rows()
    }

    pub fn r1(&self) -> Option<usize> {
        match &self.closure {
            Some(Closure::ThreeScale(c)) => Some(c.r1),
            _ => None,
        }
    }

    pub fn closure(&self) -> Option<&Closure> {
        self.closure.as_ref()
    }

    pub fn galerkin_operators(&self) -> &RomOperators {
        &self.galerkin
    }

    /// Combined `(A + Ã, B + B̃)`.
    pub fn operators(&self) -> &RomOperators {
        &self.total
    }

    pub fn rhs(&self, a: &[f64]) -> Vec<f64> {
        let r = self.r();
        (0..r)
            .map(|i| self.total.linear_row(i, a, r) + self.total.quadratic_row(i, a, r))
            .collect()
    }

    fn quadratic_into(&self, a: &[f64], out: &mut [f64]) {
        let r = self.r();
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.total.quadratic_row(i, a, r);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlowUpReason {
    Threshold,
    NonConvergence,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlowUp {
    /// Time of the first step that could not be completed.
    pub time: f64,
    pub reason: BlowUpReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RomTrajectory {
    pub times: Vec<f64>,
    /// One row per recorded time.
    pub coeffs: DMatrix<f64>,
    pub blowup: Option<BlowUp>,
    pub r: usize,
    pub r1: Option<usize>,
}

impl RomTrajectory {
    pub fn diverged(&self) -> bool {
        self.blowup.is_some()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, j: usize) -> Vec<f64> {
        self.coeffs.row(j).iter().copied().collect()
    }

    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=self.r).map(|i| format!("a{i}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (j, t) in self.times.iter().enumerate() {
            let mut line = format!("{t:.16e}");
            for v in self.coeffs.row(j).iter() {
                line.push_str(&format!(",{v:.16e}"));
            }
            writeln!(out, "{line}")?;
        }
        if let Some(b) = &self.blowup {
            writeln!(out, "# blow-up at t={:.16e}: {:?}", b.time, b.reason)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Coefficients as a snapshot set (`r × n_times`, identity weight).
    pub fn to_snapshot_set(&self) -> Result<SnapshotSet> {
        let provenance = match &self.blowup {
            Some(b) => format!("blow-up at t={:e}: {:?}", b.time, b.reason),
            None => String::new(),
        };
        SnapshotSet::new(
            self.times.clone(),
            self.coeffs.transpose(),
            Weight::Identity,
            provenance,
        )
    }
}

fn step_count(dt: f64, t0: f64, t_end: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(RomError::InvalidConfig(format!("dt = {dt} must be positive")));
    }
    if !(t_end > t0) {
        return Err(RomError::InvalidConfig(format!(
            "t_end = {t_end} must exceed t0 = {t0}"
        )));
    }
    let steps = ((t_end - t0) / dt).round();
    if (steps * dt - (t_end - t0)).abs() > 1e-9 * (t_end - t0) {
        return Err(RomError::InvalidConfig(format!(
            "window [{t0}, {t_end}] is not a multiple of dt = {dt}"
        )));
    }
    Ok(steps as usize)
}

pub fn integrate_rom(
    model: &RomModel,
    a0: &[f64],
    dt: f64,
    t0: f64,
    t_end: f64,
) -> Result<RomTrajectory> {
    integrate_rom_with(model, a0, dt, t0, t_end, &IntegrateOptions::default())
}

pub fn integrate_rom_with(
    model: &RomModel,
    a0: &[f64],
    dt: f64,
    t0: f64,
    t_end: f64,
    options: &IntegrateOptions,
) -> Result<RomTrajectory> {
    let r = model.r();
    check_len("initial coefficients", r, a0.len())?;
    let steps = step_count(dt, t0, t_end)?;
    let mut states: Vec<f64> = Vec::with_capacity((steps + 1) * r);
    let mut times = Vec::with_capacity(steps + 1);
    states.extend_from_slice(a0);
    times.push(t0);

    let mut stepper = Stepper::new(model, dt, options)?;
    let mut a = a0.to_vec();
    let mut blowup = None;
    for n in 1..=steps {
        let t = t0 + n as f64 * dt;
        match stepper.step(&a) {
            Ok(next) => {
                if next.iter().any(|v| !v.is_finite()) {
                    blowup = Some(BlowUp { time: t, reason: BlowUpReason::NonFinite });
                    break;
                }
                if next.iter().any(|v| v.abs() > options.blowup_threshold) {
                    blowup = Some(BlowUp { time: t, reason: BlowUpReason::Threshold });
                    break;
                }
                a = next;
                states.extend_from_slice(&a);
                times.push(t);
            }
            Err(reason) => {
                blowup = Some(BlowUp { time: t, reason });
                break;
            }
        }
    }
    let coeffs = DMatrix::from_row_slice(times.len(), r, &states);
    Ok(RomTrajectory {
        times,
        coeffs,
        blowup,
        r,
        r1: model.r1(),
    })
}

struct Stepper<'a> {
    model: &'a RomModel,
    dt: f64,
    options: &'a IntegrateOptions,
    /// LU of `I − dt/2 A` and the explicit `I + dt/2 A` for Crank–Nicolson.
    implicit: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    explicit: DMatrix<f64>,
    scratch: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a RomModel, dt: f64, options: &'a IntegrateOptions) -> Result<Self> {
        let r = model.r();
        let a = model.operators().linear();
        let id = DMatrix::<f64>::identity(r, r);
        let (implicit, explicit) = match options.scheme {
            Scheme::CrankNicolson => {
                let lu = (&id - a * (0.5 * dt)).lu();
                if !lu.is_invertible() {
                    return Err(RomError::InvalidConfig(
                        "I - dt/2 A is singular".into(),
                    ));
                }
                (Some(lu), &id + a * (0.5 * dt))
            }
            Scheme::Rk4 => (None, id),
        };
        Ok(Self {
            model,
            dt,
            options,
            implicit,
            explicit,
            scratch: vec![0.0; r],
        })
    }

    fn step(&mut self, a: &[f64]) -> std::result::Result<Vec<f64>, BlowUpReason> {
        match self.options.scheme {
            Scheme::CrankNicolson => self.cn_step(a),
            Scheme::Rk4 => Ok(self.rk4_step(a)),
        }
    }

    fn cn_step(&mut self, a: &[f64]) -> std::result::Result<Vec<f64>, BlowUpReason> {
        let r = a.len();
        let lu = self.implicit.as_ref().expect("factored for CN");
        let base = &self.explicit * DVector::from_column_slice(a);
        let mut next = a.to_vec();
        let mut mid = vec![0.0; r];
        for _ in 0..self.options.max_iterations {
            for k in 0..r {
                mid[k] = 0.5 * (a[k] + next[k]);
            }
            self.model.quadratic_into(&mid, &mut self.scratch);
            let mut rhs = base.clone();
            for k in 0..r {
                rhs[k] += self.dt * self.scratch[k];
            }
            let sol = lu.solve(&rhs).ok_or(BlowUpReason::NonFinite)?;
            if sol.iter().any(|v| !v.is_finite()) {
                return Err(BlowUpReason::NonFinite);
            }
            if sol.amax() > self.options.blowup_threshold {
                return Err(BlowUpReason::Threshold);
            }
            let mut diff = 0.0;
            let mut size = 0.0;
            for k in 0..r {
                diff += (sol[k] - next[k]).powi(2);
                size += sol[k] * sol[k];
                next[k] = sol[k];
            }
            if diff.sqrt() <= self.options.tolerance * size.sqrt().max(1.0) {
                return Ok(next);
            }
        }
        Err(BlowUpReason::NonConvergence)
    }

    fn rk4_step(&self, a: &[f64]) -> Vec<f64> {
        let dt = self.dt;
        let f = |x: &[f64]| self.model.rhs(x);
        let shift = |x: &[f64], k: &[f64], s: f64| -> Vec<f64> {
            x.iter().zip(k).map(|(xi, ki)| xi + s * ki).collect()
        };
        let k1 = f(a);
        let k2 = f(&shift(a, &k1, 0.5 * dt));
        let k3 = f(&shift(a, &k2, 0.5 * dt));
        let k4 = f(&shift(a, &k3, dt));
        (0..a.len())
            .map(|i| a[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    }
}
