//! Snapshot sets: full-order states at increasing times together with the
//! weight matrix of the discrete L² inner product.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! magic "ROMSNAP1"            8 bytes
//! version                     u32  (1; basis files set BASIS_FLAG)
//! N                           u64
//! M                           u64
//! weight kind                 u8   0 = identity, 1 = diagonal, 2 = tridiagonal
//! weight payload              f64s (none | N | N diagonal then N-1 off-diagonal)
//! times                       M f64
//! data                        N*M f64, column-major (one column per snapshot)
//! provenance (optional)       u32 length + UTF-8 bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::binio::{ensure_finite, write_f64s, write_u32, write_u64, write_u8, LeReader};
use crate::error::{check_len, Result, RomError};
use crate::fom::{FomTrajectory, SymTridiag};

pub const MAGIC: &[u8; 8] = b"ROMSNAP1";
pub const FORMAT_VERSION: u32 = 1;
/// Set in the version word of files that hold a POD basis rather than
/// snapshots.
pub const BASIS_FLAG: u32 = 0x8000_0000;

/// Weight matrix of the inner product `(u, v) = uᵀ W v`.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Identity,
    Diagonal(Vec<f64>),
    Tridiagonal(SymTridiag),
}

impl Weight {
    pub fn kind_code(&self) -> u8 {
        match self {
            Weight::Identity => 0,
            Weight::Diagonal(_) => 1,
            Weight::Tridiagonal(_) => 2,
        }
    }

    /// Dimension, if the weight carries one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Weight::Identity => None,
            Weight::Diagonal(d) => Some(d.len()),
            Weight::Tridiagonal(t) => Some(t.dim()),
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Weight::Identity => v.to_vec(),
            Weight::Diagonal(d) => d.iter().zip(v).map(|(w, x)| w * x).collect(),
            Weight::Tridiagonal(t) => t.mul_vec(v),
        }
    }

    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        match self {
            Weight::Identity => u.iter().zip(v).map(|(a, b)| a * b).sum(),
            Weight::Diagonal(d) => d.iter().zip(u.iter().zip(v)).map(|(w, (a, b))| w * a * b).sum(),
            Weight::Tridiagonal(t) => t.quad_form(u, v),
        }
    }

    pub fn norm(&self, v: &[f64]) -> f64 {
        self.inner(v, v).max(0.0).sqrt()
    }

    /// `W X` applied column by column.
    pub fn apply_columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        if let Weight::Identity = self {
            return out;
        }
        for (j, col) in x.column_iter().enumerate() {
            let wx = self.apply(col.as_slice());
            out.column_mut(j).copy_from_slice(&wx);
        }
        out
    }

    pub fn check_spd(&self) -> Result<()> {
        match self {
            Weight::Identity => Ok(()),
            Weight::Diagonal(d) => {
                if d.iter().all(|&w| w > 0.0 && w.is_finite()) {
                    Ok(())
                } else {
                    Err(RomError::WeightNotSpd)
                }
            }
            Weight::Tridiagonal(t) => t.factor().map(|_| ()),
        }
    }

    fn payload(&self) -> Vec<f64> {
        match self {
            Weight::Identity => Vec::new(),
            Weight::Diagonal(d) => d.clone(),
            Weight::Tridiagonal(t) => t.diag.iter().chain(&t.off).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    times: Vec<f64>,
    data: DMatrix<f64>,
    weight: Weight,
    provenance: String,
}

impl SnapshotSet {
    pub fn new(
        times: Vec<f64>,
        data: DMatrix<f64>,
        weight: Weight,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let m = times.len();
        if m < 2 {
            return Err(RomError::InvalidSnapshots(format!(
                "need at least 2 snapshots, got {m}"
            )));
        }
        check_len("snapshot data columns", m, data.ncols())?;
        if let Some(n) = weight.dim() {
            check_len("weight dimension", data.nrows(), n)?;
        }
        if data.nrows() == 0 {
            return Err(RomError::InvalidSnapshots("zero degrees of freedom".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(RomError::InvalidSnapshots(
                "times must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            times,
            data,
            weight,
            provenance: provenance.into(),
        })
    }

    /// Wraps a Burgers trajectory with the FE mass matrix as weight.
    pub fn from_fom(traj: &FomTrajectory, mass: &SymTridiag) -> Result<Self> {
        Self::new(
            traj.times.clone(),
            traj.states.clone(),
            Weight::Tridiagonal(mass.clone()),
            format!(
                "burgers-fom n_cells={} domain={:?}",
                traj.mesh.n_cells(),
                traj.mesh.domain()
            ),
        )
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn weight(&self) -> &Weight {
        &self.weight
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn n_dofs(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_snapshots(&self) -> usize {
        self.times.len()
    }

    pub fn snapshot(&self, j: usize) -> &[f64] {
        let n = self.n_dofs();
        &self.data.as_slice()[j * n..(j + 1) * n]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_frame(
            &mut out,
            FORMAT_VERSION,
            &self.weight,
            &self.times,
            &self.data,
            &self.provenance,
        )?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let frame = read_frame(bytes, FORMAT_VERSION)?;
        Self::new(frame.slot, frame.data, frame.weight, frame.provenance)
    }
}

pub fn save_snapshots(set: &SnapshotSet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = set.to_bytes()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Loads and validates a snapshot file. The weight is not checked for
/// positive definiteness here; consumers call [`Weight::check_spd`].
pub fn load_snapshots(path: impl AsRef<Path>) -> Result<SnapshotSet> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    SnapshotSet::from_bytes(&bytes)
}

/// Snapshots with `t0 ≤ t ≤ t1` (inclusive, 1e-9 relative slack).
pub fn window(set: &SnapshotSet, t0: f64, t1: f64) -> Result<SnapshotSet> {
    let idx = window_indices(&set.times, t0, t1)?;
    let n = set.n_dofs();
    let mut data = DMatrix::zeros(n, idx.len());
    for (k, &j) in idx.iter().enumerate() {
        data.column_mut(k).copy_from(&set.data.column(j));
    }
    SnapshotSet::new(
        idx.iter().map(|&j| set.times[j]).collect(),
        data,
        set.weight.clone(),
        set.provenance.clone(),
    )
}

pub(crate) fn window_indices(times: &[f64], t0: f64, t1: f64) -> Result<Vec<usize>> {
    if !(t0 < t1) {
        return Err(RomError::EmptyWindow { t0, t1 });
    }
    let slack = 1e-9 * t0.abs().max(t1.abs()).max(1.0);
    let idx: Vec<usize> = times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= t0 - slack && t <= t1 + slack)
        .map(|(j, _)| j)
        .collect();
    if idx.len() < 2 {
        return Err(RomError::EmptyWindow { t0, t1 });
    }
    Ok(idx)
}

pub(crate) fn write_frame(
    out: &mut Vec<u8>,
    version: u32,
    weight: &Weight,
    slot: &[f64],
    data: &DMatrix<f64>,
    provenance: &str,
) -> Result<()> {
    let payload = weight.payload();
    ensure_finite(&payload, "weight")?;
    ensure_finite(slot, "times")?;
    ensure_finite(data.as_slice(), "data")?;
    out.extend_from_slice(MAGIC);
    write_u32(out, version)?;
    write_u64(out, data.nrows() as u64)?;
    write_u64(out, data.ncols() as u64)?;
    write_u8(out, weight.kind_code())?;
    write_f64s(out, &payload)?;
    write_f64s(out, slot)?;
    write_f64s(out, data.as_slice())?;
    if !provenance.is_empty() {
        write_u32(out, provenance.len() as u32)?;
        out.extend_from_slice(provenance.as_bytes());
    }
    Ok(())
}

pub(crate) struct Frame {
    pub weight: Weight,
    pub slot: Vec<f64>,
    pub data: DMatrix<f64>,
    pub provenance: String,
}

pub(crate) fn read_frame(bytes: &[u8], expected_version: u32) -> Result<Frame> {
    let mut r = LeReader::new(bytes);
    let magic: [u8; 8] = r.bytes("magic")?;
    if &magic != MAGIC {
        return Err(RomError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    let version = r.u32("version")?;
    if version != expected_version {
        if version & BASIS_FLAG != expected_version & BASIS_FLAG {
            let holds = if version & BASIS_FLAG != 0 { "a POD basis" } else { "snapshots" };
            return Err(RomError::Format(format!("file holds {holds}")));
        }
        return Err(RomError::UnsupportedVersion {
            found: version & !BASIS_FLAG,
            supported: expected_version & !BASIS_FLAG,
        });
    }
    let n = r.u64("N")? as usize;
    let m = r.u64("M")? as usize;
    let weight = match r.u8("weight kind")? {
        0 => Weight::Identity,
        1 => Weight::Diagonal(r.f64s(n, "diagonal weight")?),
        2 => {
            let diag = r.f64s(n, "tridiagonal weight diagonal")?;
            let off = r.f64s(n.saturating_sub(1), "tridiagonal weight off-diagonal")?;
            Weight::Tridiagonal(SymTridiag::new(diag, off)?)
        }
        k => return Err(RomError::Format(format!("unknown weight kind {k}"))),
    };
    let slot = r.f64s(m, "times")?;
    let values = r.f64s(n.checked_mul(m).ok_or_else(|| {
        RomError::Format("N*M overflows".into())
    })?, "data")?;
    let data = DMatrix::from_vec(n, m, values);
    let trailer = r.rest()?;
    let provenance = if trailer.is_empty() {
        String::new()
    } else {
        let mut t = LeReader::new(trailer.as_slice());
        let len = t.u32("provenance length")? as usize;
        let rest = t.rest()?;
        if rest.len() != len {
            return Err(RomError::Format(format!(
                "provenance length {len} but {} bytes follow",
                rest.len()
            )));
        }
        String::from_utf8(rest).map_err(|_| RomError::Format("provenance is not UTF-8".into()))?
    };
    Ok(Frame {
        weight,
        slot,
        data,
        provenance,
    })
}
