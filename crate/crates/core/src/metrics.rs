//! Error measures and diagnostic series for reduced trajectories.
//!
//! All coefficient-space formulas rely on the POD basis being orthonormal in
//! the snapshot weight, so field norms equal Euclidean coefficient norms.

use std::f64::consts::PI;
use std::io::Write;

use crate::error::{Result, RomError};
use crate::fom::Mesh1D;
use crate::integrate::RomTrajectory;
use crate::pod::{CoeffHistory, PodBasis};

pub const TIME_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Mean over snapshots of `‖a_rom − a_fom,1:r‖₂`; `+∞` after blow-up.
    pub mean: f64,
    /// Per-snapshot errors for the times the trajectory reached.
    pub series: Vec<f64>,
    pub times: Vec<f64>,
    pub diverged: bool,
    pub r: usize,
}

/// Indices into `traj_times` matching each of `targets`; `None` for targets
/// beyond the end of a truncated trajectory.
fn align(traj_times: &[f64], targets: &[f64], truncated: bool) -> Result<Vec<Option<usize>>> {
    let mut out = Vec::with_capacity(targets.len());
    let mut k = 0;
    for &t in targets {
        let slack = TIME_SLACK * t.abs().max(1.0);
        while k < traj_times.len() && traj_times[k] < t - slack {
            k += 1;
        }
        if k < traj_times.len() && (traj_times[k] - t).abs() <= slack {
            out.push(Some(k));
        } else if truncated && k == traj_times.len() {
            out.push(None);
        } else {
            return Err(RomError::TimeMisalignment(format!(
                "no trajectory sample at snapshot time {t}"
            )));
        }
    }
    Ok(out)
}

fn check_r(traj: &RomTrajectory, fom: &CoeffHistory, r: usize) -> Result<()> {
    if traj.r != r {
        return Err(RomError::DimensionMismatch {
            context: "trajectory dimension vs r",
            expected: r,
            actual: traj.r,
        });
    }
    if fom.n_modes() < r {
        return Err(RomError::DimensionMismatch {
            context: "FOM coefficient modes (need >= r)",
            expected: r,
            actual: fom.n_modes(),
        });
    }
    Ok(())
}

pub fn avg_l2_error(traj: &RomTrajectory, fom: &CoeffHistory, r: usize) -> Result<ErrorReport> {
    check_r(traj, fom, r)?;
    let idx = align(&traj.times, &fom.times, traj.diverged())?;
    let mut series = Vec::new();
    let mut times = Vec::new();
    for (j, k) in idx.iter().enumerate() {
        let Some(k) = *k else { break };
        let e: f64 = (0..r)
            .map(|i| (traj.coeffs[(k, i)] - fom.coeffs[(j, i)]).powi(2))
            .sum();
        series.push(e.sqrt());
        times.push(fom.times[j]);
    }
    let mean = if traj.diverged() {
        f64::INFINITY
    } else {
        series.iter().sum::<f64>() / series.len() as f64
    };
    Ok(ErrorReport {
        mean,
        series,
        times,
        diverged: traj.diverged(),
        r,
    })
}

/// `(t, ½‖a(t)‖²)` for every recorded time.
pub fn kinetic_energy_series(traj: &RomTrajectory) -> Vec<(f64, f64)> {
    traj.times
        .iter()
        .enumerate()
        .map(|(j, &t)| (t, 0.5 * traj.coeffs.row(j).norm_squared()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeanReference {
    /// FOM mean restricted to the resolved modes `1..r`.
    Resolved,
    /// FOM mean over every available mode; adds the unresolved tail energy.
    Full,
}

/// Squared L² distance between the time-averaged FOM and ROM fields.
pub fn time_avg_field_error(
    traj: &RomTrajectory,
    fom: &CoeffHistory,
    r: usize,
    reference: MeanReference,
) -> Result<f64> {
    check_r(traj, fom, r)?;
    if traj.diverged() {
        return Ok(f64::INFINITY);
    }
    let idx = align(&traj.times, &fom.times, false)?;
    let m = idx.len() as f64;
    let modes = match reference {
        MeanReference::Resolved => r,
        MeanReference::Full => fom.n_modes(),
    };
    let mut total = 0.0;
    for i in 0..modes {
        let fom_mean: f64 = (0..idx.len()).map(|j| fom.coeffs[(j, i)]).sum::<f64>() / m;
        let rom_mean = if i < r {
            idx.iter().map(|k| traj.coeffs[(k.unwrap(), i)]).sum::<f64>() / m
        } else {
            0.0
        };
        total += (fom_mean - rom_mean).powi(2);
    }
    Ok(total)
}

/// Piecewise-linear value of an interior-node field at `x`, with the
/// homogeneous Dirichlet values at the ends.
pub fn interpolate(mesh: &Mesh1D, field: &[f64], x: f64) -> Result<f64> {
    let (lo, hi) = mesh.domain();
    if !(x >= lo && x <= hi) {
        return Err(RomError::InvalidConfig(format!(
            "probe location {x} outside [{lo}, {hi}]"
        )));
    }
    if field.len() != mesh.n_dofs() {
        return Err(RomError::DimensionMismatch {
            context: "probe field length",
            expected: mesh.n_dofs(),
            actual: field.len(),
        });
    }
    let s = (x - lo) / mesh.h();
    let e = (s.floor() as usize).min(mesh.n_cells() - 1);
    let xi = s - e as f64;
    let (left, right) = mesh.element_values(field, e);
    if xi == 0.0 {
        return Ok(left);
    }
    Ok(left * (1.0 - xi) + right * xi)
}

/// `Σ_i a_i(t) φ_i(x0)` over the trajectory.
pub fn probe_series(
    traj: &RomTrajectory,
    basis: &PodBasis,
    mesh: &Mesh1D,
    x0: f64,
) -> Result<Vec<(f64, f64)>> {
    if basis.len() < traj.r {
        return Err(RomError::Truncation {
            requested: traj.r,
            available: basis.len(),
        });
    }
    let phi: Vec<f64> = (0..traj.r)
        .map(|i| interpolate(mesh, basis.mode(i), x0))
        .collect::<Result<_>>()?;
    let offset = match basis.mean() {
        Some(mean) => interpolate(mesh, mean, x0)?,
        None => 0.0,
    };
    Ok(traj
        .times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let v: f64 = (0..traj.r).map(|i| traj.coeffs[(j, i)] * phi[i]).sum();
            (t, v + offset)
        })
        .collect())
}

/// `(frequency, |X_k|²)` for `k = 0..=N/2` by direct DFT.
pub fn power_spectrum(series: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    let n = series.len();
    if n < 4 {
        return Err(RomError::InvalidConfig(format!(
            "power spectrum needs at least 4 samples, got {n}"
        )));
    }
    let dt = series[1].0 - series[0].0;
    if !(dt > 0.0) {
        return Err(RomError::TimeMisalignment("non-increasing sample times".into()));
    }
    for w in series.windows(2) {
        if ((w[1].0 - w[0].0) - dt).abs() > 1e-6 * dt {
            return Err(RomError::TimeMisalignment(
                "power spectrum requires uniform sampling".into(),
            ));
        }
    }
    Ok((0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, (_, x)) in series.iter().enumerate() {
                let phase = -2.0 * PI * ((k * j) % n) as f64 / n as f64;
                re += x * phase.cos();
                im += x * phase.sin();
            }
            (k as f64 / (n as f64 * dt), re * re + im * im)
        })
        .collect())
}

pub fn write_series_csv(out: &mut impl Write, header: &str, series: &[(f64, f64)]) -> Result<()> {
    writeln!(out, "{header}")?;
    for (a, b) in series {
        writeln!(out, "{a:.16e},{b:.16e}")?;
    }
    Ok(())
}
