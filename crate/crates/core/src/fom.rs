//! Full-order model: 1D viscous Burgers equation with homogeneous Dirichlet
//! boundary conditions, linear finite elements in space and Crank–Nicolson in
//! time.
//!
//! Only interior nodes carry unknowns; the boundary values are zero and never
//! stored. The weak form advanced in time is
//!
//! ```text
//! M (u^{n+1} - u^n) / dt + nu K (u^{n+1} + u^n) / 2 + N(u^{n+1/2}) = F^{n+1/2}
//! ```
//!
//! with `N(u)_i = ∫ u u_x φ_i`, solved by fixed-point iteration on `N`.

use nalgebra::DMatrix;

use crate::error::{check_len, Result, RomError};

/// Two-point Gauss rule on the reference element `[0, 1]`.
pub(crate) const GAUSS2: [(f64, f64); 2] = [
    (0.211_324_865_405_187_1, 0.5),
    (0.788_675_134_594_812_9, 0.5),
];

/// Five-point Gauss rule on `[0, 1]`, used for load vectors and L² errors of
/// non-polynomial functions.
const GAUSS5: [(f64, f64); 5] = [
    (0.046_910_077_030_668_0, 0.118_463_442_528_094_5),
    (0.230_765_344_947_158_5, 0.239_314_335_249_683_2),
    (0.5, 0.284_444_444_444_444_4),
    (0.769_234_655_052_841_5, 0.239_314_335_249_683_2),
    (0.953_089_922_969_332_0, 0.118_463_442_528_094_5),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mesh1D {
    n_cells: usize,
    x_lo: f64,
    x_hi: f64,
}

impl Mesh1D {
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x_lo, self.x_hi)
    }

    pub fn h(&self) -> f64 {
        (self.x_hi - self.x_lo) / self.n_cells as f64
    }

    /// Number of interior degrees of freedom (`n_cells - 1`).
    pub fn n_dofs(&self) -> usize {
        self.n_cells - 1
    }

    /// Coordinate of global node `k`, `0 ≤ k ≤ n_cells`.
    pub fn node(&self, k: usize) -> f64 {
        if k == self.n_cells {
            self.x_hi
        } else {
            self.x_lo + k as f64 * self.h()
        }
    }

    pub fn interior_nodes(&self) -> Vec<f64> {
        (1..self.n_cells).map(|k| self.node(k)).collect()
    }

    /// Values of an interior field at the two ends of element `e`, with the
    /// Dirichlet zeros filled in.
    pub(crate) fn element_values(&self, field: &[f64], e: usize) -> (f64, f64) {
        let left = if e == 0 { 0.0 } else { field[e - 1] };
        let right = if e + 1 == self.n_cells { 0.0 } else { field[e] };
        (left, right)
    }
}

pub fn build_mesh(n_cells: usize, domain: (f64, f64)) -> Result<Mesh1D> {
    if n_cells < 2 {
        return Err(RomError::InvalidMesh(format!(
            "need at least 2 cells, got {n_cells}"
        )));
    }
    let (x_lo, x_hi) = domain;
    if !(x_lo.is_finite() && x_hi.is_finite()) || x_hi <= x_lo {
        return Err(RomError::InvalidMesh(format!(
            "degenerate interval [{x_lo}, {x_hi}]"
        )));
    }
    Ok(Mesh1D {
        n_cells,
        x_lo,
        x_hi,
    })
}

/// Symmetric tridiagonal matrix stored as its diagonal and first
/// off-diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiag {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl SymTridiag {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Result<Self> {
        if diag.is_empty() {
            return Err(RomError::InvalidConfig("empty tridiagonal matrix".into()));
        }
        check_len("tridiagonal off-diagonal", diag.len() - 1, off.len())?;
        Ok(Self { diag, off })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n];
        self.mul_vec_into(v, &mut out);
        out
    }

    pub fn mul_vec_into(&self, v: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = self.diag[i] * v[i];
            if i > 0 {
                s += self.off[i - 1] * v[i - 1];
            }
            if i + 1 < n {
                s += self.off[i] * v[i + 1];
            }
            out[i] = s;
        }
    }

    pub fn quad_form(&self, u: &[f64], v: &[f64]) -> f64 {
        let n = self.dim();
        let mut s = 0.0;
        for i in 0..n {
            s += u[i] * self.diag[i] * v[i];
            if i + 1 < n {
                s += self.off[i] * (u[i] * v[i + 1] + u[i + 1] * v[i]);
            }
        }
        s
    }

    /// `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &SymTridiag, beta: f64) -> SymTridiag {
        SymTridiag {
            diag: self
                .diag
                .iter()
                .zip(&other.diag)
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
            off: self
                .off
                .iter()
                .zip(&other.off)
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        }
    }

    /// LDLᵀ factorization; fails unless the matrix is positive definite.
    pub fn factor(&self) -> Result<TridiagFactor> {
        let n = self.dim();
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n.saturating_sub(1)];
        d[0] = self.diag[0];
        for i in 1..n {
            if !(d[i - 1] > 0.0) {
                return Err(RomError::WeightNotSpd);
            }
            l[i - 1] = self.off[i - 1] / d[i - 1];
            d[i] = self.diag[i] - l[i - 1] * self.off[i - 1];
        }
        if !(d[n - 1] > 0.0) {
            return Err(RomError::WeightNotSpd);
        }
        Ok(TridiagFactor { d, l })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                self.diag[i]
            } else if i + 1 == j {
                self.off[i]
            } else if j + 1 == i {
                self.off[j]
            } else {
                0.0
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct TridiagFactor {
    d: Vec<f64>,
    l: Vec<f64>,
}

impl TridiagFactor {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.d.len();
        for i in 1..n {
            b[i] -= self.l[i - 1] * b[i - 1];
        }
        for i in 0..n {
            b[i] /= self.d[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            b[i] -= self.l[i] * b[i + 1];
        }
    }
}

/// Mass and stiffness matrices of the hat functions on the interior nodes.
#[derive(Debug, Clone)]
pub struct FemSystem {
    pub mesh: Mesh1D,
    pub mass: SymTridiag,
    pub stiffness: SymTridiag,
}

pub fn assemble_fem(mesh: &Mesh1D) -> FemSystem {
    let n = mesh.n_dofs();
    let h = mesh.h();
    let mut mass_d = vec![0.0; n];
    let mut mass_o = vec![0.0; n - 1];
    let mut stiff_d = vec![0.0; n];
    let mut stiff_o = vec![0.0; n - 1];
    // Element loop; element e joins global nodes e and e+1, interior index = global - 1.
    for e in 0..mesh.n_cells() {
        let left = e.checked_sub(1);
        let right = (e + 1 < mesh.n_cells()).then_some(e);
        for idx in [left, right].into_iter().flatten() {
            mass_d[idx] += h / 3.0;
            stiff_d[idx] += 1.0 / h;
        }
        if let (Some(i), Some(_)) = (left, right) {
            mass_o[i] += h / 6.0;
            stiff_o[i] -= 1.0 / h;
        }
    }
    FemSystem {
        mesh: *mesh,
        mass: SymTridiag {
            diag: mass_d,
            off: mass_o,
        },
        stiffness: SymTridiag {
            diag: stiff_d,
            off: stiff_o,
        },
    }
}

impl FemSystem {
    pub fn n_dofs(&self) -> usize {
        self.mesh.n_dofs()
    }

    /// Discrete L² norm `sqrt(vᵀ M v)`.
    pub fn l2_norm(&self, v: &[f64]) -> f64 {
        self.mass.quad_form(v, v).max(0.0).sqrt()
    }

    pub fn energy(&self, v: &[f64]) -> f64 {
        0.5 * self.mass.quad_form(v, v)
    }

    /// Convective term `N(u)_i = ∫ u u_x φ_i`, exact via 2-point Gauss.
    pub fn convection(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_dofs()];
        self.convection_into(u, &mut out);
        out
    }

    pub fn convection_into(&self, u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let nc = self.mesh.n_cells();
        for e in 0..nc {
            let (ul, ur) = self.mesh.element_values(u, e);
            // h * u_x = ur - ul; the Jacobian h cancels against 1/h.
            let du = ur - ul;
            let mut to_left = 0.0;
            let mut to_right = 0.0;
            for (xi, w) in GAUSS2 {
                let uq = ul * (1.0 - xi) + ur * xi;
                to_left += w * uq * (1.0 - xi);
                to_right += w * uq * xi;
            }
            if e > 0 {
                out[e - 1] += du * to_left;
            }
            if e + 1 < nc {
                out[e] += du * to_right;
            }
        }
    }

    /// Load vector `∫ f φ_i` for a smooth `f`.
    pub fn load_vector(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let mesh = &self.mesh;
        let h = mesh.h();
        let nc = mesh.n_cells();
        let mut out = vec![0.0; self.n_dofs()];
        for e in 0..nc {
            let x0 = mesh.node(e);
            let mut to_left = 0.0;
            let mut to_right = 0.0;
            for (xi, w) in GAUSS5 {
                let fx = f(x0 + xi * h);
                to_left += w * fx * (1.0 - xi);
                to_right += w * fx * xi;
            }
            if e > 0 {
                out[e - 1] += h * to_left;
            }
            if e + 1 < nc {
                out[e] += h * to_right;
            }
        }
        out
    }

    /// `‖u_h − u‖_{L²}` against a smooth reference function.
    pub fn l2_error(&self, u: &[f64], exact: impl Fn(f64) -> f64) -> f64 {
        let mesh = &self.mesh;
        let h = mesh.h();
        let mut s = 0.0;
        for e in 0..mesh.n_cells() {
            let (ul, ur) = mesh.element_values(u, e);
            let x0 = mesh.node(e);
            for (xi, w) in GAUSS5 {
                let diff = ul * (1.0 - xi) + ur * xi - exact(x0 + xi * h);
                s += h * w * diff * diff;
            }
        }
        s.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// 1 for `x ≤ 1/2`, 0 beyond, sampled at the nodes.
    Step,
    /// Interior nodal values supplied by the caller.
    Nodal(Vec<f64>),
}

impl InitialCondition {
    pub fn discretize(&self, mesh: &Mesh1D) -> Result<Vec<f64>> {
        match self {
            InitialCondition::Step => Ok(mesh
                .interior_nodes()
                .into_iter()
                .map(|x| if x <= 0.5 + 1e-14 { 1.0 } else { 0.0 })
                .collect()),
            InitialCondition::Nodal(values) => {
                check_len("initial condition", mesh.n_dofs(), values.len())?;
                Ok(values.clone())
            }
        }
    }
}

/// Manufactured solution `u(x, t) = e^{−t} sin(πx)` on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayingSine;

impl DecayingSine {
    pub fn exact(x: f64, t: f64) -> f64 {
        (-t).exp() * (std::f64::consts::PI * x).sin()
    }

    /// `f = u_t − ν u_xx + u u_x` for the manufactured solution.
    pub fn forcing(nu: f64, x: f64, t: f64) -> f64 {
        let pi = std::f64::consts::PI;
        let (s, c) = (pi * x).sin_cos();
        let e = (-t).exp();
        e * s * (nu * pi * pi - 1.0) + e * e * pi * s * c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FomConfig {
    pub nu: f64,
    pub dt: f64,
    pub t_end: f64,
    pub initial_condition: InitialCondition,
    pub forcing: Option<DecayingSine>,
    /// Relaxation factor of the fixed-point update, in `(0, 1]`.
    pub damping: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl FomConfig {
    /// ν = 1e-3, Δt = 1e-3 on [0, 1] with the step initial condition.
    pub fn burgers_default() -> Self {
        Self {
            nu: 1e-3,
            dt: 1e-3,
            t_end: 1.0,
            initial_condition: InitialCondition::Step,
            forcing: None,
            damping: 1.0,
            tolerance: 1e-12,
            max_iterations: 100,
        }
    }

    pub fn validate(&self) -> Result<usize> {
        let bad = |msg: String| Err(RomError::InvalidConfig(msg));
        if !(self.nu > 0.0) {
            return bad(format!("nu must be positive, got {}", self.nu));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_end > 0.0) {
            return bad(format!("t_end must be positive, got {}", self.t_end));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad(format!("damping must lie in (0, 1], got {}", self.damping));
        }
        let steps = (self.t_end / self.dt).round();
        if (steps * self.dt - self.t_end).abs() > 1e-9 * self.t_end {
            return bad(format!(
                "t_end = {} is not a multiple of dt = {}",
                self.t_end, self.dt
            ));
        }
        Ok(steps as usize)
    }
}

#[derive(Debug, Clone)]
pub struct FomTrajectory {
    pub times: Vec<f64>,
    /// One column of interior nodal values per recorded time.
    pub states: DMatrix<f64>,
    pub mesh: Mesh1D,
}

pub fn run_fom(config: &FomConfig, system: &FemSystem) -> Result<FomTrajectory> {
    let n_steps = config.validate()?;
    let n = system.n_dofs();
    let dt = config.dt;
    let nu = config.nu;

    let lhs = system
        .mass
        .combine(1.0 / dt, &system.stiffness, 0.5 * nu)
        .factor()?;
    let explicit = system.mass.combine(1.0 / dt, &system.stiffness, -0.5 * nu);

    let mut u = config.initial_condition.discretize(&system.mesh)?;
    let mut states = DMatrix::zeros(n, n_steps + 1);
    states.column_mut(0).copy_from_slice(&u);
    let mut times = Vec::with_capacity(n_steps + 1);
    times.push(0.0);

    let forcing_at = |t: f64| -> Option<Vec<f64>> {
        config
            .forcing
            .map(|_| system.load_vector(|x| DecayingSine::forcing(nu, x, t)))
    };
    let mut f_old = forcing_at(0.0);

    let mut base = vec![0.0; n];
    let mut mid = vec![0.0; n];
    let mut conv = vec![0.0; n];
    let mut next = u.clone();
    let mut trial = vec![0.0; n];
    let mut incr = vec![0.0; n];

    for step in 1..=n_steps {
        let t = step as f64 * dt;
        explicit.mul_vec_into(&u, &mut base);
        let f_new = forcing_at(t);
        if let (Some(f0), Some(f1)) = (&f_old, &f_new) {
            for i in 0..n {
                base[i] += 0.5 * (f0[i] + f1[i]);
            }
        }

        let mut residual = f64::INFINITY;
        let mut converged = false;
        for _ in 0..config.max_iterations {
            for i in 0..n {
                mid[i] = 0.5 * (u[i] + next[i]);
            }
            system.convection_into(&mid, &mut conv);
            for i in 0..n {
                trial[i] = base[i] - conv[i];
            }
            lhs.solve_in_place(&mut trial);
            for i in 0..n {
                let updated = config.damping * trial[i] + (1.0 - config.damping) * next[i];
                incr[i] = updated - next[i];
                next[i] = updated;
            }
            residual = system.l2_norm(&incr);
            if !residual.is_finite() {
                return Err(RomError::NonFinite(format!("FOM state at t = {t}")));
            }
            if residual <= config.tolerance {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(RomError::NonConvergence {
                time: t,
                iterations: config.max_iterations,
                residual,
            });
        }

        u.copy_from_slice(&next);
        states.column_mut(step).copy_from_slice(&u);
        times.push(t);
        f_old = f_new;
    }

    Ok(FomTrajectory {
        times,
        states,
        mesh: system.mesh,
    })
}
