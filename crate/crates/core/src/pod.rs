//! Proper orthogonal decomposition by the method of snapshots.
//!
//! The `M × M` Gram matrix `C_jk = (u_j, u_k)_W / M` is diagonalized and the
//! modes are recovered as `φ_i = X v_i / sqrt(M λ_i)`. Modes are then
//! re-orthonormalized in the weighted inner product, since the snapshot
//! formula loses orthogonality like `ε λ_1 / λ_i` for the trailing modes.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{check_len, Result, RomError};
use crate::snapshot::{read_frame, write_frame, SnapshotSet, Weight, BASIS_FLAG, FORMAT_VERSION};

/// Relative eigenvalue cutoff below which modes are discarded.
pub const RANK_EPSILON: f64 = 1e-13;

const CENTERED_TAG: &str = "centered: mean stored as last column";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PodOptions {
    pub r_max: usize,
    /// Subtract the snapshot mean before the decomposition. Off by default:
    /// the Galerkin ROM carries no affine term.
    pub center: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    modes: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    weight: Weight,
    mean: Option<Vec<f64>>,
}

impl PodBasis {
    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn mode(&self, i: usize) -> &[f64] {
        let n = self.n_dofs();
        &self.modes.as_slice()[i * n..(i + 1) * n]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn weight(&self) -> &Weight {
        &self.weight
    }

    pub fn mean(&self) -> Option<&[f64]> {
        self.mean.as_deref()
    }

    /// Retained mode count `R`.
    pub fn len(&self) -> usize {
        self.modes.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_dofs(&self) -> usize {
        self.modes.nrows()
    }

    /// `max |Φᵀ W Φ − I|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = self.modes.tr_mul(&self.weight.apply_columns(&self.modes));
        let mut worst: f64 = 0.0;
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }

    /// Basis restricted to its first `r` modes.
    pub fn truncated(&self, r: usize) -> Result<PodBasis> {
        check_truncation(r, self.len())?;
        Ok(PodBasis {
            modes: self.modes.columns(0, r).into_owned(),
            eigenvalues: self.eigenvalues[..r].to_vec(),
            weight: self.weight.clone(),
            mean: self.mean.clone(),
        })
    }
}

pub fn compute_pod(set: &SnapshotSet, r_max: usize) -> Result<PodBasis> {
    compute_pod_with(set, PodOptions { r_max, center: false })
}

pub fn compute_pod_with(set: &SnapshotSet, options: PodOptions) -> Result<PodBasis> {
    let n = set.n_dofs();
    let m = set.n_snapshots();
    if options.r_max == 0 || options.r_max > n.min(m) {
        return Err(RomError::Truncation {
            requested: options.r_max,
            available: n.min(m),
        });
    }
    let weight = set.weight();
    weight.check_spd()?;

    let mut x = set.data().clone();
    let mean = if options.center {
        let mean: Vec<f64> = (0..n).map(|i| x.row(i).sum() / m as f64).collect();
        for mut col in x.column_iter_mut() {
            for (v, mu) in col.iter_mut().zip(&mean) {
                *v -= mu;
            }
        }
        Some(mean)
    } else {
        None
    };

    let wx = weight.apply_columns(&x);
    let mut gram = x.tr_mul(&wx);
    gram /= m as f64;
    // Symmetrize against round-off before the eigensolve.
    let gram = (&gram + gram.transpose()) * 0.5;

    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda1 = eig.eigenvalues[order[0]];
    if !(lambda1 > 0.0) {
        return Err(RomError::NoModes);
    }
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&k| eig.eigenvalues[k] >= RANK_EPSILON * lambda1)
        .take(options.r_max)
        .collect();

    let r = kept.len();
    let mut modes = DMatrix::zeros(n, r);
    for (i, &k) in kept.iter().enumerate() {
        let lambda = eig.eigenvalues[k];
        let v = eig.eigenvectors.column(k);
        let mut phi = &x * v;
        phi /= (m as f64 * lambda).sqrt();
        modes.column_mut(i).copy_from(&phi);
    }
    reorthonormalize(&mut modes, weight)?;
    for mut col in modes.column_iter_mut() {
        let pivot = col
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            col.neg_mut();
        }
    }

    Ok(PodBasis {
        modes,
        eigenvalues: kept.iter().map(|&k| eig.eigenvalues[k]).collect(),
        weight: weight.clone(),
        mean,
    })
}

/// Two passes of modified Gram–Schmidt in the `W` inner product.
fn reorthonormalize(modes: &mut DMatrix<f64>, weight: &Weight) -> Result<()> {
    let n = modes.nrows();
    let r = modes.ncols();
    let data = modes.as_mut_slice();
    for _pass in 0..2 {
        for i in 0..r {
            let (done, rest) = data.split_at_mut(i * n);
            let col = &mut rest[..n];
            let wcol = weight.apply(col);
            for j in 0..i {
                let prev = &done[j * n..(j + 1) * n];
                let c: f64 = prev.iter().zip(&wcol).map(|(a, b)| a * b).sum();
                col.iter_mut().zip(prev).for_each(|(v, p)| *v -= c * p);
            }
            let norm = weight.norm(col);
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(RomError::NonFinite(format!("POD mode {i} has norm {norm}")));
            }
            col.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(())
}

fn check_truncation(r: usize, available: usize) -> Result<()> {
    if r == 0 || r > available {
        Err(RomError::Truncation {
            requested: r,
            available,
        })
    } else {
        Ok(())
    }
}

/// `a_i = (field − mean, φ_i)_W` for all `R` modes.
pub fn project_coefficients(basis: &PodBasis, field: &[f64]) -> Result<Vec<f64>> {
    check_len("projected field", basis.n_dofs(), field.len())?;
    let centered;
    let field = match &basis.mean {
        Some(mean) => {
            centered = field.iter().zip(mean).map(|(u, m)| u - m).collect::<Vec<_>>();
            &centered[..]
        }
        None => field,
    };
    let wf = basis.weight.apply(field);
    Ok((0..basis.len())
        .map(|i| basis.mode(i).iter().zip(&wf).map(|(p, w)| p * w).sum())
        .collect())
}

/// `mean + Σ_{k ≤ r} a_k φ_k`.
pub fn reconstruct(basis: &PodBasis, a: &[f64], r: usize) -> Result<Vec<f64>> {
    check_truncation(r, basis.len())?;
    if a.len() < r {
        return Err(RomError::DimensionMismatch {
            context: "reconstruction coefficients",
            expected: r,
            actual: a.len(),
        });
    }
    let mut out = basis.mean.clone().unwrap_or_else(|| vec![0.0; basis.n_dofs()]);
    for (k, &ak) in a.iter().take(r).enumerate() {
        out.iter_mut()
            .zip(basis.mode(k))
            .for_each(|(o, p)| *o += ak * p);
    }
    Ok(out)
}

/// FOM coefficients `a^FOM(t_j)` of every snapshot, one row per time.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffHistory {
    pub times: Vec<f64>,
    /// `M × R`.
    pub coeffs: DMatrix<f64>,
}

impl CoeffHistory {
    pub fn new(times: Vec<f64>, coeffs: DMatrix<f64>) -> Result<Self> {
        check_len("coefficient history rows", times.len(), coeffs.nrows())?;
        Ok(Self { times, coeffs })
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_modes(&self) -> usize {
        self.coeffs.ncols()
    }

    /// First `r` coefficients at time index `j`.
    pub fn row(&self, j: usize, r: usize) -> Vec<f64> {
        (0..r).map(|k| self.coeffs[(j, k)]).collect()
    }

    pub fn window(&self, t0: f64, t1: f64) -> Result<CoeffHistory> {
        let idx = crate::snapshot::window_indices(&self.times, t0, t1)?;
        let coeffs = DMatrix::from_fn(idx.len(), self.n_modes(), |j, k| self.coeffs[(idx[j], k)]);
        CoeffHistory::new(idx.iter().map(|&j| self.times[j]).collect(), coeffs)
    }

    /// Keeps the first `r` columns.
    pub fn truncated(&self, r: usize) -> Result<CoeffHistory> {
        check_truncation(r, self.n_modes())?;
        CoeffHistory::new(self.times.clone(), self.coeffs.columns(0, r).into_owned())
    }
}

pub fn project_history(basis: &PodBasis, set: &SnapshotSet) -> Result<CoeffHistory> {
    check_len("snapshot dimension", basis.n_dofs(), set.n_dofs())?;
    let mut x = set.data().clone();
    if let Some(mean) = &basis.mean {
        for mut col in x.column_iter_mut() {
            col.iter_mut().zip(mean).for_each(|(v, m)| *v -= m);
        }
    }
    let wx = basis.weight.apply_columns(&x);
    CoeffHistory::new(set.times().to_vec(), wx.tr_mul(&basis.modes))
}

pub fn save_basis(basis: &PodBasis, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    let (data, tag) = match &basis.mean {
        Some(mean) => {
            let mut with_mean = basis.modes.clone().insert_column(basis.len(), 0.0);
            with_mean.column_mut(basis.len()).copy_from_slice(mean);
            (with_mean, CENTERED_TAG)
        }
        None => (basis.modes.clone(), ""),
    };
    let mut slot = basis.eigenvalues.clone();
    if basis.mean.is_some() {
        slot.push(0.0);
    }
    write_frame(&mut bytes, BASIS_FLAG | FORMAT_VERSION, &basis.weight, &slot, &data, tag)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_basis(path: impl AsRef<Path>) -> Result<PodBasis> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let frame = read_frame(&bytes, BASIS_FLAG | FORMAT_VERSION)?;
    let mut modes = frame.data;
    let mut eigenvalues = frame.slot;
    let mean = if frame.provenance == CENTERED_TAG {
        let last = modes.ncols() - 1;
        let mean = modes.column(last).iter().copied().collect();
        modes = modes.remove_column(last);
        eigenvalues.pop();
        Some(mean)
    } else {
        None
    };
    Ok(PodBasis {
        modes,
        eigenvalues,
        weight: frame.weight,
        mean,
    })
}
