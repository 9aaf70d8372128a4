//! Galerkin ROM operators for Burgers-type dynamics,
//! `da/dt = A a + aᵀ B a`, with
//! `A_im = −ν (φ_m', φ_i')` and `B_imn = −(φ_m φ_n', φ_i)`.
//!
//! Operators may be rectangular: `rows` output modes against `cols` input
//! modes. The square `r × r` G-ROM and the `r × d` operators used to evaluate
//! closure targets come from the same assembly.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::binio::{ensure_finite, write_f64s, write_u32, write_u64, LeReader};
use crate::error::{check_len, Result, RomError};
use crate::fom::{FemSystem, GAUSS2};
use crate::pod::PodBasis;

pub const OPERATORS_MAGIC: &[u8; 8] = b"ROMOPS01";
pub const OPERATORS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RomOperators {
    rows: usize,
    cols: usize,
    nu: f64,
    linear: DMatrix<f64>,
    /// Row-major `rows × cols × cols`: entry `(i, m, n)` at `(i*cols + m)*cols + n`.
    quadratic: Vec<f64>,
}

impl RomOperators {
    pub fn new(nu: f64, linear: DMatrix<f64>, quadratic: Vec<f64>) -> Result<Self> {
        let (rows, cols) = linear.shape();
        if rows == 0 || rows > cols {
            return Err(RomError::InvalidConfig(format!(
                "operator shape {rows}x{cols} needs 1 <= rows <= cols"
            )));
        }
        check_len("quadratic tensor", rows * cols * cols, quadratic.len())?;
        ensure_finite(linear.as_slice(), "linear operator")?;
        ensure_finite(&quadratic, "quadratic operator")?;
        Ok(Self {
            rows,
            cols,
            nu,
            linear,
            quadratic,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(0.0, DMatrix::zeros(rows, cols), vec![0.0; rows * cols * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn linear(&self) -> &DMatrix<f64> {
        &self.linear
    }

    pub fn quadratic(&self) -> &[f64] {
        &self.quadratic
    }

    pub fn b(&self, i: usize, m: usize, n: usize) -> f64 {
        self.quadratic[(i * self.cols + m) * self.cols + n]
    }

    /// Leading `rows × cols` block; entries are copied, not recomputed.
    pub fn sub_block(&self, rows: usize, cols: usize) -> Result<RomOperators> {
        if rows == 0 || rows > cols || rows > self.rows || cols > self.cols {
            return Err(RomError::InvalidConfig(format!(
                "block {rows}x{cols} not inside {}x{}",
                self.rows, self.cols
            )));
        }
        let mut q = Vec::with_capacity(rows * cols * cols);
        for i in 0..rows {
            for m in 0..cols {
                for n in 0..cols {
                    q.push(self.b(i, m, n));
                }
            }
        }
        RomOperators::new(self.nu, self.linear.view((0, 0), (rows, cols)).into_owned(), q)
    }

    /// `Σ_{m,n < k} a_m B_imn a_n` for one output row.
    pub(crate) fn quadratic_row(&self, i: usize, a: &[f64], k: usize) -> f64 {
        let mut s = 0.0;
        for m in 0..k {
            let slice = &self.quadratic[(i * self.cols + m) * self.cols..][..k];
            let inner: f64 = slice.iter().zip(a).map(|(b, an)| b * an).sum();
            s += a[m] * inner;
        }
        s
    }

    /// `Σ_{m < k} A_im a_m`.
    pub(crate) fn linear_row(&self, i: usize, a: &[f64], k: usize) -> f64 {
        (0..k).map(|m| self.linear[(i, m)] * a[m]).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(OPERATORS_MAGIC);
        write_u32(&mut out, OPERATORS_VERSION).unwrap();
        self.write_body(&mut out);
        out
    }

    pub(crate) fn write_body(&self, out: &mut Vec<u8>) {
        write_u64(out, self.rows as u64).unwrap();
        write_u64(out, self.cols as u64).unwrap();
        write_f64s(out, &[self.nu]).unwrap();
        let row_major: Vec<f64> = (0..self.rows)
            .flat_map(|i| (0..self.cols).map(move |m| (i, m)))
            .map(|(i, m)| self.linear[(i, m)])
            .collect();
        write_f64s(out, &row_major).unwrap();
        write_f64s(out, &self.quadratic).unwrap();
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(bytes);
        let magic: [u8; 8] = r.bytes("magic")?;
        if &magic != OPERATORS_MAGIC {
            return Err(RomError::Format("not a ROM operator blob".into()));
        }
        let version = r.u32("version")?;
        if version != OPERATORS_VERSION {
            return Err(RomError::UnsupportedVersion {
                found: version,
                supported: OPERATORS_VERSION,
            });
        }
        let ops = Self::read_body(&mut r)?;
        if !r.rest()?.is_empty() {
            return Err(RomError::Format("trailing bytes after operators".into()));
        }
        Ok(ops)
    }

    pub(crate) fn read_body<R: Read>(r: &mut LeReader<R>) -> Result<Self> {
        let rows = r.u64("rows")? as usize;
        let cols = r.u64("cols")? as usize;
        let nu = r.f64("nu")?;
        let lin = r.f64s(rows * cols, "linear operator")?;
        let quad = r.f64s(rows * cols * cols, "quadratic operator")?;
        Self::new(nu, DMatrix::from_row_slice(rows, cols, &lin), quad)
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

pub fn assemble_rom_operators(
    basis: &PodBasis,
    system: &FemSystem,
    nu: f64,
    rows: usize,
    cols: usize,
) -> Result<RomOperators> {
    if rows == 0 || rows > cols || cols > basis.len() {
        return Err(RomError::InvalidConfig(format!(
            "need 1 <= rows ({rows}) <= cols ({cols}) <= R ({})",
            basis.len()
        )));
    }
    check_len("basis vs FE system", system.n_dofs(), basis.n_dofs())?;
    if basis.mean().is_some() {
        return Err(RomError::InvalidConfig(
            "Galerkin operators need an uncentered basis (no affine term)".into(),
        ));
    }

    let linear = DMatrix::from_fn(rows, cols, |i, m| {
        -nu * system.stiffness.quad_form(basis.mode(i), basis.mode(m))
    });

    // Mode values at the Gauss points and per-element increments
    // h·φ_n' = φ_n(right) − φ_n(left); the Jacobian h cancels.
    let mesh = &system.mesh;
    let n_el = mesh.n_cells();
    let n_q = n_el * GAUSS2.len();
    let mut values = vec![0.0; n_q * cols];
    let mut weights = vec![0.0; n_q];
    let mut jumps = vec![0.0; n_q * cols];
    for k in 0..cols {
        let phi = basis.mode(k);
        for e in 0..n_el {
            let (l, r) = mesh.element_values(phi, e);
            for (g, (xi, w)) in GAUSS2.iter().enumerate() {
                let q = e * GAUSS2.len() + g;
                values[q * cols + k] = l * (1.0 - xi) + r * xi;
                jumps[q * cols + k] = r - l;
                weights[q] = *w;
            }
        }
    }

    let quadratic: Vec<f64> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut slab = vec![0.0; cols * cols];
            for q in 0..n_q {
                let vq = &values[q * cols..(q + 1) * cols];
                let jq = &jumps[q * cols..(q + 1) * cols];
                let c = weights[q] * vq[i];
                for m in 0..cols {
                    let cm = c * vq[m];
                    let row = &mut slab[m * cols..(m + 1) * cols];
                    row.iter_mut().zip(jq).for_each(|(s, j)| *s -= cm * j);
                }
            }
            slab
        })
        .collect();

    RomOperators::new(nu, linear, quadratic)
}

/// `A a + aᵀ B a`, length `rows`.
pub fn grom_rhs(ops: &RomOperators, a: &[f64]) -> Result<Vec<f64>> {
    check_len("G-ROM state", ops.cols, a.len())?;
    Ok((0..ops.rows)
        .map(|i| ops.linear_row(i, a, ops.cols) + ops.quadratic_row(i, a, ops.cols))
        .collect())
}
