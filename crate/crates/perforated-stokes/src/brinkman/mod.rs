//! Staggered-grid solver for the Stokes-Brinkman system
//!
//! ```text
//! rho u - Laplace(u) + grad(pi) = j,   div u = 0   on the cube,
//! u = g on the boundary,
//! ```
//!
//! which degenerates to the Stokes equations for `rho = 0` (the wall
//! correction of the N-hole field is solved exactly this way). Viscosity is
//! fixed to 1.
//!
//! Discretization: MAC grid, 7-point Laplacian with linear-reflection
//! ghosts for tangential components at the walls, centered pressure
//! gradient and divergence, cell `rho` averaged onto faces. The solve is an
//! Uzawa pressure-Schur conjugate gradient whose inner velocity solves are
//! diagonalized by sine transforms (exactly for constant `rho`, as a
//! preconditioner otherwise).

pub mod dst;
pub mod grid;

pub use grid::{read_field, write_field, StaggeredField};

use crate::cloud::Domain;
use crate::error::{Error, Result};
use crate::vec3::Vec3;
use dst::{AxisKind, FastDiagonal};
use std::sync::Arc;

/// Dirichlet boundary velocity on the cube walls.
#[derive(Clone)]
pub enum BoundaryVelocity {
    Zero,
    Constant(Vec3),
    Field(Arc<dyn Fn(Vec3) -> Vec3 + Send + Sync>),
}

impl std::fmt::Debug for BoundaryVelocity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BoundaryVelocity::Zero => write!(f, "Zero"),
            BoundaryVelocity::Constant(v) => write!(f, "Constant({v:?})"),
            BoundaryVelocity::Field(_) => write!(f, "Field(..)"),
        }
    }
}

impl BoundaryVelocity {
    pub fn eval(&self, x: Vec3) -> Vec3 {
        match self {
            BoundaryVelocity::Zero => Vec3::ZERO,
            BoundaryVelocity::Constant(v) => *v,
            BoundaryVelocity::Field(f) => f(x),
        }
    }
}

/// A Stokes-Brinkman problem on the cube at resolution `k`.
#[derive(Clone, Debug)]
pub struct BrinkmanProblem {
    pub domain: Domain,
    pub k: usize,
    /// Cell-sampled drag density, `k^3`, nonnegative.
    pub rho: Vec<f64>,
    /// Face-sampled forcing, full-size component arrays (boundary entries
    /// are ignored).
    pub forcing: [Vec<f64>; 3],
    pub boundary: BoundaryVelocity,
    /// Relative residual tolerance of the solve.
    pub tol: f64,
}

impl BrinkmanProblem {
    pub fn new(
        domain: Domain,
        k: usize,
        rho: Vec<f64>,
        forcing: [Vec<f64>; 3],
        boundary: BoundaryVelocity,
        tol: f64,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidInput(format!("resolution must be >= 2, got {k}")));
        }
        if !(tol > 0.0) {
            return Err(Error::InvalidInput("tolerance must be positive".into()));
        }
        if rho.len() != k * k * k {
            return Err(Error::ShapeMismatch(format!(
                "rho holds {} cells, expected {}",
                rho.len(),
                k * k * k
            )));
        }
        if let Some(bad) = rho.iter().find(|r| !(**r >= 0.0)) {
            return Err(Error::InvalidInput(format!("rho must be nonnegative, found {bad}")));
        }
        let probe = StaggeredField::zeros(domain, k);
        for c in 0..3 {
            let (nx, ny, nz) = probe.dims(c);
            if forcing[c].len() != nx * ny * nz {
                return Err(Error::ShapeMismatch(format!(
                    "forcing component {c} holds {} faces, expected {}",
                    forcing[c].len(),
                    nx * ny * nz
                )));
            }
        }
        let problem = BrinkmanProblem { domain, k, rho, forcing, boundary, tol };
        let defect = problem.boundary_flux_defect();
        let scale = problem.boundary_flux_scale().max(1.0);
        if defect.abs() > 1e-10 * scale {
            return Err(Error::InvalidInput(format!(
                "incompatible boundary data: net flux {defect:.3e} exceeds 1e-10 x scale {scale:.3e}"
            )));
        }
        Ok(problem)
    }

    /// Sample `rho` at cell centers and `j` at faces.
    pub fn from_fields<R, J>(
        domain: Domain,
        k: usize,
        rho_fn: R,
        j_fn: J,
        boundary: BoundaryVelocity,
        tol: f64,
    ) -> Result<Self>
    where
        R: Fn(Vec3) -> f64,
        J: Fn(Vec3) -> Vec3,
    {
        let probe = StaggeredField::zeros(domain, k);
        let mut rho = vec![0.0; k * k * k];
        for l in 0..k {
            for j in 0..k {
                for i in 0..k {
                    rho[probe.cell_index(i, j, l)] = rho_fn(probe.cell_center(i, j, l));
                }
            }
        }
        let mut forcing = [
            vec![0.0; (k + 1) * k * k],
            vec![0.0; k * (k + 1) * k],
            vec![0.0; k * k * (k + 1)],
        ];
        for (c, arr) in forcing.iter_mut().enumerate() {
            let (nx, ny, nz) = probe.dims(c);
            for l in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        arr[(l * ny + j) * nx + i] = j_fn(probe.face_position(c, i, j, l)).get(c);
                    }
                }
            }
        }
        BrinkmanProblem::new(domain, k, rho, forcing, boundary, tol)
    }

    /// Pure Stokes problem (`rho = 0`, `j = 0`) with boundary data `g`.
    pub fn stokes(domain: Domain, k: usize, boundary: BoundaryVelocity, tol: f64) -> Result<Self> {
        BrinkmanProblem::from_fields(domain, k, |_| 0.0, |_| Vec3::ZERO, boundary, tol)
    }

    /// Net outward boundary flux of the sampled normal data.
    pub fn boundary_flux_defect(&self) -> f64 {
        let (lo, hi) = self.sample_normal_walls();
        let h2 = (self.domain.side_length / self.k as f64).powi(2);
        let mut flux = 0.0;
        for c in 0..3 {
            flux += (hi[c].iter().sum::<f64>() - lo[c].iter().sum::<f64>()) * h2;
        }
        flux
    }

    fn boundary_flux_scale(&self) -> f64 {
        let (lo, hi) = self.sample_normal_walls();
        let h2 = (self.domain.side_length / self.k as f64).powi(2);
        let mut scale = 0.0;
        for c in 0..3 {
            scale += (hi[c].iter().map(|v| v.abs()).sum::<f64>()
                + lo[c].iter().map(|v| v.abs()).sum::<f64>())
                * h2;
        }
        scale
    }

    /// Normal velocity data on the two walls of each component, k*k each.
    fn sample_normal_walls(&self) -> ([Vec<f64>; 3], [Vec<f64>; 3]) {
        let k = self.k;
        let probe = StaggeredField::zeros(self.domain, k);
        let mut lo = [vec![0.0; k * k], vec![0.0; k * k], vec![0.0; k * k]];
        let mut hi = lo.clone();
        for c in 0..3 {
            for b in 0..k {
                for a in 0..k {
                    let (i, j, l) = match c {
                        0 => (0, a, b),
                        1 => (a, 0, b),
                        _ => (a, b, 0),
                    };
                    lo[c][b * k + a] = self.boundary.eval(probe.face_position(c, i, j, l)).get(c);
                    let (i, j, l) = match c {
                        0 => (k, a, b),
                        1 => (a, k, b),
                        _ => (a, b, k),
                    };
                    hi[c][b * k + a] = self.boundary.eval(probe.face_position(c, i, j, l)).get(c);
                }
            }
        }
        (lo, hi)
    }
}

/// Net outward flux of a velocity field sampled at the normal boundary
/// faces of a resolution-`k` grid.
pub fn boundary_flux_of<F>(domain: &Domain, k: usize, g: &F) -> f64
where
    F: Fn(Vec3) -> Vec3,
{
    let probe = StaggeredField::zeros(*domain, k);
    let h2 = (domain.side_length / k as f64).powi(2);
    let mut flux = 0.0;
    for c in 0..3 {
        for b in 0..k {
            for a in 0..k {
                let (i, j, l) = match c {
                    0 => (0, a, b),
                    1 => (a, 0, b),
                    _ => (a, b, 0),
                };
                flux -= g(probe.face_position(c, i, j, l)).get(c) * h2;
                let (i, j, l) = match c {
                    0 => (k, a, b),
                    1 => (a, k, b),
                    _ => (a, b, k),
                };
                flux += g(probe.face_position(c, i, j, l)).get(c) * h2;
            }
        }
    }
    flux
}

/// Momentum residual `rho u - Laplace(u) + grad p - j` on interior faces
/// (boundary entries zero) and the continuity residual `div u` per cell,
/// evaluated on the given field with the problem's boundary data supplying
/// tangential ghosts.
pub fn apply_operator(
    problem: &BrinkmanProblem,
    field: &StaggeredField,
) -> Result<([Vec<f64>; 3], Vec<f64>)> {
    if field.k != problem.k || field.domain != problem.domain {
        return Err(Error::ShapeMismatch("field grid does not match problem grid".into()));
    }
    let k = problem.k;
    let h = field.h;
    let h2 = h * h;
    let rho_face = face_rho(problem);
    let mut mom = [
        vec![0.0; field.u.len()],
        vec![0.0; field.v.len()],
        vec![0.0; field.w.len()],
    ];
    for c in 0..3 {
        let (nx, ny, nz) = field.dims(c);
        let arr = field.component(c);
        let idx = |i: usize, j: usize, l: usize| (l * ny + j) * nx + i;
        let (nix, niy, niz) = interior_dims(k, c);
        for ll in 0..niz {
            for jj in 0..niy {
                for ii in 0..nix {
                    let (i, j, l) = full_from_interior(c, ii, jj, ll);
                    let center = arr[idx(i, j, l)];
                    let mut lap = 6.0 * center;
                    for (axis, (d, n_ax)) in
                        [(i, nx), (j, ny), (l, nz)].into_iter().enumerate()
                    {
                        for dir in [-1isize, 1] {
                            let t = d as isize + dir;
                            let neighbor = if t >= 0 && (t as usize) < n_ax {
                                let (ti, tj, tl) = match axis {
                                    0 => (t as usize, j, l),
                                    1 => (i, t as usize, l),
                                    _ => (i, j, t as usize),
                                };
                                arr[idx(ti, tj, tl)]
                            } else {
                                // tangential wall: linear-reflection ghost
                                let mut wp = field.face_position(c, i, j, l);
                                let coord = if dir < 0 {
                                    problem.domain.origin.get(axis)
                                } else {
                                    problem.domain.origin.get(axis) + problem.domain.side_length
                                };
                                wp.set(axis, coord);
                                2.0 * problem.boundary.eval(wp).get(c) - center
                            };
                            lap -= neighbor;
                        }
                    }
                    let cell_hi = match c {
                        0 => field.cell_index(i, j, l),
                        1 => field.cell_index(i, j, l),
                        _ => field.cell_index(i, j, l),
                    };
                    let cell_lo = match c {
                        0 => field.cell_index(i - 1, j, l),
                        1 => field.cell_index(i, j - 1, l),
                        _ => field.cell_index(i, j, l - 1),
                    };
                    let grad_p = (field.p[cell_hi] - field.p[cell_lo]) / h;
                    let rf = rho_face[c][(ll * niy + jj) * nix + ii];
                    mom[c][idx(i, j, l)] =
                        rf * center + lap / h2 + grad_p - problem.forcing[c][idx(i, j, l)];
                }
            }
        }
    }
    let mut cont = vec![0.0; k * k * k];
    for l in 0..k {
        for j in 0..k {
            for i in 0..k {
                let iu = (l * k + j) * (k + 1) + i;
                let iv = (l * (k + 1) + j) * k + i;
                let iw = (l * k + j) * k + i;
                cont[field.cell_index(i, j, l)] = (field.u[iu + 1] - field.u[iu]
                    + field.v[iv + k] - field.v[iv]
                    + field.w[iw + k * k] - field.w[iw])
                    / h;
            }
        }
    }
    Ok((mom, cont))
}

/// Discrete Dirichlet energy: squared difference quotients between adjacent
/// samples of each component (including wall-normal boundary faces), times
/// h^3. Zero exactly when the field is constant.
pub fn dirichlet_energy(field: &StaggeredField) -> f64 {
    let h = field.h;
    let h3 = h * h * h;
    let mut total = 0.0;
    for c in 0..3 {
        let (nx, ny, nz) = field.dims(c);
        let arr = field.component(c);
        let idx = |i: usize, j: usize, l: usize| (l * ny + j) * nx + i;
        for l in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let a = arr[idx(i, j, l)];
                    if i + 1 < nx {
                        let d = (arr[idx(i + 1, j, l)] - a) / h;
                        total += d * d * h3;
                    }
                    if j + 1 < ny {
                        let d = (arr[idx(i, j + 1, l)] - a) / h;
                        total += d * d * h3;
                    }
                    if l + 1 < nz {
                        let d = (arr[idx(i, j, l + 1)] - a) / h;
                        total += d * d * h3;
                    }
                }
            }
        }
    }
    total
}

/// Both sides of the discrete energy identity, evaluated on a solved field.
#[derive(Clone, Copy, Debug)]
pub struct EnergyIdentity {
    /// `u^T A u h^3`: discrete `sum |grad u|^2 + rho |u|^2`.
    pub quadratic_form: f64,
    /// `u^T G p h^3`.
    pub pressure_work: f64,
    /// `u^T f h^3` with the boundary lift folded into `f`.
    pub forcing_work: f64,
    /// `|quadratic_form + pressure_work - forcing_work|` over the scale.
    pub relative_imbalance: f64,
}

/// Solver diagnostics.
#[derive(Clone, Debug)]
pub struct SolveStats {
    pub outer_iterations: usize,
    pub momentum_residual: f64,
    pub continuity_residual: f64,
    pub energy: EnergyIdentity,
    pub residual_history: Vec<f64>,
}

pub fn solve_brinkman(problem: &BrinkmanProblem) -> Result<StaggeredField> {
    solve_brinkman_with_stats(problem).map(|(f, _)| f)
}

pub fn solve_brinkman_with_stats(
    problem: &BrinkmanProblem,
) -> Result<(StaggeredField, SolveStats)> {
    let sys = System::build(problem)?;
    sys.solve()
}

/// `sum (|grad u|^2 + rho |u|^2) h^3` and the stability majorant
/// `||j||_{L2} ||u||_{L2}` plus the boundary and pressure work moduli;
/// the energy identity plus Cauchy-Schwarz makes lhs <= rhs on any solved
/// instance.
pub fn l2_stability_check(problem: &BrinkmanProblem, field: &StaggeredField) -> Result<(f64, f64)> {
    let sys = System::build(problem)?;
    let u0 = sys.extract_interior(field);
    let p = &field.p;
    let h3 = sys.h * sys.h * sys.h;

    let mut au = [Vec::new(), Vec::new(), Vec::new()];
    for c in 0..3 {
        au[c] = sys.apply_a(c, &u0[c]);
    }
    let quad: f64 = (0..3).map(|c| dot(&u0[c], &au[c])).sum::<f64>() * h3;
    let gp = sys.gradient(p);
    let pw: f64 = (0..3).map(|c| dot(&u0[c], &gp[c])).sum::<f64>() * h3;
    let fw: f64 = (0..3).map(|c| dot(&u0[c], &sys.f[c])).sum::<f64>() * h3;

    // interior forcing work and L2 norms
    let mut jw = 0.0;
    let mut j_norm2 = 0.0;
    let mut u_norm2 = 0.0;
    for c in 0..3 {
        let (nx, ny, _) = field_dims(sys.k, c);
        let (nix, niy, niz) = interior_dims(sys.k, c);
        for ll in 0..niz {
            for jj in 0..niy {
                for ii in 0..nix {
                    let (i, j, l) = full_from_interior(c, ii, jj, ll);
                    let jf = problem.forcing[c][(l * ny + j) * nx + i];
                    let uf = u0[c][(ll * niy + jj) * nix + ii];
                    jw += jf * uf;
                    j_norm2 += jf * jf;
                    u_norm2 += uf * uf;
                }
            }
        }
    }
    jw *= h3;
    let lhs = quad;
    let rhs = (j_norm2 * h3).sqrt() * (u_norm2 * h3).sqrt() + (fw - jw).abs() + pw.abs();
    Ok((lhs, rhs))
}

pub(crate) fn interior_dims(k: usize, c: usize) -> (usize, usize, usize) {
    match c {
        0 => (k - 1, k, k),
        1 => (k, k - 1, k),
        _ => (k, k, k - 1),
    }
}

fn field_dims(k: usize, c: usize) -> (usize, usize, usize) {
    match c {
        0 => (k + 1, k, k),
        1 => (k, k + 1, k),
        _ => (k, k, k + 1),
    }
}

pub(crate) fn full_from_interior(c: usize, ii: usize, jj: usize, ll: usize) -> (usize, usize, usize) {
    match c {
        0 => (ii + 1, jj, ll),
        1 => (ii, jj + 1, ll),
        _ => (ii, jj, ll + 1),
    }
}

/// Cell rho averaged to interior faces, compact layout per component.
fn face_rho(problem: &BrinkmanProblem) -> [Vec<f64>; 3] {
    let k = problem.k;
    let cell = |i: usize, j: usize, l: usize| problem.rho[(l * k + j) * k + i];
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (c, slot) in out.iter_mut().enumerate() {
        let (nix, niy, niz) = interior_dims(k, c);
        let mut arr = vec![0.0; nix * niy * niz];
        for ll in 0..niz {
            for jj in 0..niy {
                for ii in 0..nix {
                    let v = match c {
                        0 => 0.5 * (cell(ii, jj, ll) + cell(ii + 1, jj, ll)),
                        1 => 0.5 * (cell(ii, jj, ll) + cell(ii, jj + 1, ll)),
                        _ => 0.5 * (cell(ii, jj, ll) + cell(ii, jj, ll + 1)),
                    };
                    arr[(ll * niy + jj) * nix + ii] = v;
                }
            }
        }
        *slot = arr;
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Assembled interior system for one problem.
struct System<'a> {
    problem: &'a BrinkmanProblem,
    k: usize,
    h: f64,
    rho_face: [Vec<f64>; 3],
    rho_uniform: [Option<f64>; 3],
    fast: [FastDiagonal; 3],
    /// Interior momentum RHS with boundary lifts.
    f: [Vec<f64>; 3],
    /// Continuity RHS from known boundary faces.
    b: Vec<f64>,
    /// Full boundary-face values (interior entries zero) for final assembly.
    bc_full: [Vec<f64>; 3],
    velocity_scale: f64,
}

impl<'a> System<'a> {
    fn build(problem: &'a BrinkmanProblem) -> Result<System<'a>> {
        if let Some(bad) = problem.rho.iter().find(|r| !(**r >= 0.0)) {
            return Err(Error::InvalidInput(format!("rho must be nonnegative, found {bad}")));
        }
        let k = problem.k;
        let h = problem.domain.side_length / k as f64;
        let h2 = h * h;
        let probe = StaggeredField::zeros(problem.domain, k);
        let rho_face = face_rho(problem);
        let rho_uniform = [0, 1, 2].map(|c| {
            let arr: &Vec<f64> = &rho_face[c];
            let first = arr[0];
            let uniform = arr.iter().all(|&r| (r - first).abs() <= 1e-13 * (1.0 + first));
            uniform.then_some(first)
        });
        let fast = [0, 1, 2].map(|c| {
            let kinds = match c {
                0 => [AxisKind::Interior, AxisKind::HalfOffset, AxisKind::HalfOffset],
                1 => [AxisKind::HalfOffset, AxisKind::Interior, AxisKind::HalfOffset],
                _ => [AxisKind::HalfOffset, AxisKind::HalfOffset, AxisKind::Interior],
            };
            FastDiagonal::new(kinds, k, h)
        });

        // boundary faces in full layout + velocity scale
        let mut bc_full = [
            vec![0.0; (k + 1) * k * k],
            vec![0.0; k * (k + 1) * k],
            vec![0.0; k * k * (k + 1)],
        ];
        let mut velocity_scale = 0.0_f64;
        for c in 0..3 {
            let (nx, ny, nz) = field_dims(k, c);
            for l in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        let on_wall = match c {
                            0 => i == 0 || i == k,
                            1 => j == 0 || j == k,
                            _ => l == 0 || l == k,
                        };
                        if on_wall {
                            let g = problem.boundary.eval(probe.face_position(c, i, j, l)).get(c);
                            bc_full[c][(l * ny + j) * nx + i] = g;
                            velocity_scale = velocity_scale.max(g.abs());
                        }
                    }
                }
            }
        }

        // interior RHS with boundary lifts
        let mut f = [Vec::new(), Vec::new(), Vec::new()];
        for c in 0..3 {
            let (nx, ny, _) = field_dims(k, c);
            let (nix, niy, niz) = interior_dims(k, c);
            let mut arr = vec![0.0; nix * niy * niz];
            for ll in 0..niz {
                for jj in 0..niy {
                    for ii in 0..nix {
                        let (i, j, l) = full_from_interior(c, ii, jj, ll);
                        let mut rhs = problem.forcing[c][(l * ny + j) * nx + i];
                        // normal-direction Dirichlet neighbors
                        let (d, n_int) = match c {
                            0 => (ii, nix),
                            1 => (jj, niy),
                            _ => (ll, niz),
                        };
                        if d == 0 {
                            let (bi, bj, bl) = match c {
                                0 => (0, j, l),
                                1 => (i, 0, l),
                                _ => (i, j, 0),
                            };
                            rhs += bc_full[c][(bl * ny + bj) * nx + bi] / h2;
                        }
                        if d == n_int - 1 {
                            let (bi, bj, bl) = match c {
                                0 => (k, j, l),
                                1 => (i, k, l),
                                _ => (i, j, k),
                            };
                            rhs += bc_full[c][(bl * ny + bj) * nx + bi] / h2;
                        }
                        // tangential ghost lifts
                        for axis in 0..3 {
                            if axis == c {
                                continue;
                            }
                            let t = [i, j, l][axis];
                            if t == 0 || t == k - 1 {
                                let mut wp = probe.face_position(c, i, j, l);
                                let coord = if t == 0 {
                                    problem.domain.origin.get(axis)
                                } else {
                                    problem.domain.origin.get(axis) + problem.domain.side_length
                                };
                                wp.set(axis, coord);
                                rhs += 2.0 * problem.boundary.eval(wp).get(c) / h2;
                            }
                        }
                        arr[(ll * niy + jj) * nix + ii] = rhs;
                    }
                }
            }
            f[c] = arr;
        }

        // continuity RHS from boundary faces
        let mut b = vec![0.0; k * k * k];
        for l in 0..k {
            for j in 0..k {
                let iu = |i: usize| (l * k + j) * (k + 1) + i;
                b[(l * k + j) * k] += bc_full[0][iu(0)] / h;
                b[(l * k + j) * k + (k - 1)] -= bc_full[0][iu(k)] / h;
            }
        }
        for l in 0..k {
            for i in 0..k {
                let iv = |j: usize| (l * (k + 1) + j) * k + i;
                b[(l * k) * k + i] += bc_full[1][iv(0)] / h;
                b[(l * k + (k - 1)) * k + i] -= bc_full[1][iv(k)] / h;
            }
        }
        for j in 0..k {
            for i in 0..k {
                let iw = |l: usize| (l * k + j) * k + i;
                b[(j * k) + i] += bc_full[2][iw(0)] / h;
                b[((k - 1) * k + j) * k + i] -= bc_full[2][iw(k)] / h;
            }
        }

        Ok(System {
            problem,
            k,
            h,
            rho_face,
            rho_uniform,
            fast,
            f,
            b,
            bc_full,
            velocity_scale,
        })
    }

    /// Homogeneous operator `rho_f u - Laplace_h u` on a compact interior
    /// component array.
    fn apply_a(&self, c: usize, x: &[f64]) -> Vec<f64> {
        let (nix, niy, niz) = interior_dims(self.k, c);
        let h2 = self.h * self.h;
        let rho = &self.rho_face[c];
        let mut y = vec![0.0; x.len()];
        let idx = |i: usize, j: usize, l: usize| (l * niy + j) * nix + i;
        for l in 0..niz {
            for j in 0..niy {
                for i in 0..nix {
                    let center = x[idx(i, j, l)];
                    let mut lap = 6.0 * center;
                    // x-axis
                    let x_interior = c == 0;
                    lap -= if i > 0 {
                        x[idx(i - 1, j, l)]
                    } else if x_interior {
                        0.0
                    } else {
                        -center
                    };
                    lap -= if i + 1 < nix {
                        x[idx(i + 1, j, l)]
                    } else if x_interior {
                        0.0
                    } else {
                        -center
                    };
                    // y-axis
                    let y_interior = c == 1;
                    lap -= if j > 0 {
                        x[idx(i, j - 1, l)]
                    } else if y_interior {
                        0.0
                    } else {
                        -center
                    };
                    lap -= if j + 1 < niy {
                        x[idx(i, j + 1, l)]
                    } else if y_interior {
                        0.0
                    } else {
                        -center
                    };
                    // z-axis
                    let z_interior = c == 2;
                    lap -= if l > 0 {
                        x[idx(i, j, l - 1)]
                    } else if z_interior {
                        0.0
                    } else {
                        -center
                    };
                    lap -= if l + 1 < niz {
                        x[idx(i, j, l + 1)]
                    } else if z_interior {
                        0.0
                    } else {
                        -center
                    };
                    y[idx(i, j, l)] = rho[idx(i, j, l)] * center + lap / h2;
                }
            }
        }
        y
    }

    /// Inner velocity solve `A x = rhs`: direct sine-transform solve for
    /// uniform rho, PCG with the constant-shift solve as preconditioner
    /// otherwise.
    fn inner_solve(&self, c: usize, rhs: &[f64]) -> Result<Vec<f64>> {
        if let Some(shift) = self.rho_uniform[c] {
            return Ok(self.fast[c].solve(rhs, shift));
        }
        let rho_bar = self.rho_face[c].iter().sum::<f64>() / self.rho_face[c].len() as f64;
        let rhs_norm = dot(rhs, rhs).sqrt();
        if rhs_norm == 0.0 {
            return Ok(vec![0.0; rhs.len()]);
        }
        let mut x = vec![0.0; rhs.len()];
        let mut r = rhs.to_vec();
        let mut z = self.fast[c].solve(&r, rho_bar);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for _ in 0..400 {
            let ap = self.apply_a(c, &p);
            let alpha = rz / dot(&p, &ap);
            for i in 0..x.len() {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            if dot(&r, &r).sqrt() <= 1e-12 * rhs_norm {
                return Ok(x);
            }
            z = self.fast[c].solve(&r, rho_bar);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..p.len() {
                p[i] = z[i] + beta * p[i];
            }
        }
        Err(Error::NonConvergence {
            iterations: 400,
            residual: dot(&r, &r).sqrt() / rhs_norm,
            trend: vec![],
        })
    }

    /// Pressure gradient onto compact interior faces.
    fn gradient(&self, p: &[f64]) -> [Vec<f64>; 3] {
        let k = self.k;
        let h = self.h;
        let cell = |i: usize, j: usize, l: usize| p[(l * k + j) * k + i];
        let mut out = [Vec::new(), Vec::new(), Vec::new()];
        for (c, slot) in out.iter_mut().enumerate() {
            let (nix, niy, niz) = interior_dims(k, c);
            let mut arr = vec![0.0; nix * niy * niz];
            for ll in 0..niz {
                for jj in 0..niy {
                    for ii in 0..nix {
                        let d = match c {
                            0 => cell(ii + 1, jj, ll) - cell(ii, jj, ll),
                            1 => cell(ii, jj + 1, ll) - cell(ii, jj, ll),
                            _ => cell(ii, jj, ll + 1) - cell(ii, jj, ll),
                        };
                        arr[(ll * niy + jj) * nix + ii] = d / h;
                    }
                }
            }
            *slot = arr;
        }
        out
    }

    /// Divergence of compact interior faces per cell.
    fn divergence(&self, u: &[Vec<f64>; 3]) -> Vec<f64> {
        let k = self.k;
        let h = self.h;
        let mut div = vec![0.0; k * k * k];
        for c in 0..3 {
            let (nix, niy, _) = interior_dims(k, c);
            let arr = &u[c];
            let idx = |i: usize, j: usize, l: usize| (l * niy + j) * nix + i;
            for l in 0..k {
                for j in 0..k {
                    for i in 0..k {
                        let cell = (l * k + j) * k + i;
                        // face on the "high" side of the cell along axis c
                        let (hi_ok, hi) = match c {
                            0 => (i + 1 <= k - 1, if i + 1 <= k - 1 { idx(i, j, l) } else { 0 }),
                            1 => (j + 1 <= k - 1, if j + 1 <= k - 1 { idx(i, j, l) } else { 0 }),
                            _ => (l + 1 <= k - 1, if l + 1 <= k - 1 { idx(i, j, l) } else { 0 }),
                        };
                        if hi_ok {
                            div[cell] += arr[hi] / h;
                        }
                        // face on the "low" side
                        let (lo_ok, lo) = match c {
                            0 => (i >= 1, if i >= 1 { idx(i - 1, j, l) } else { 0 }),
                            1 => (j >= 1, if j >= 1 { idx(i, j - 1, l) } else { 0 }),
                            _ => (l >= 1, if l >= 1 { idx(i, j, l - 1) } else { 0 }),
                        };
                        if lo_ok {
                            div[cell] -= arr[lo] / h;
                        }
                    }
                }
            }
        }
        div
    }

    fn extract_interior(&self, field: &StaggeredField) -> [Vec<f64>; 3] {
        let k = self.k;
        let mut out = [Vec::new(), Vec::new(), Vec::new()];
        for (c, slot) in out.iter_mut().enumerate() {
            let (nx, ny, _) = field_dims(k, c);
            let (nix, niy, niz) = interior_dims(k, c);
            let arr = field.component(c);
            let mut compact = vec![0.0; nix * niy * niz];
            for ll in 0..niz {
                for jj in 0..niy {
                    for ii in 0..nix {
                        let (i, j, l) = full_from_interior(c, ii, jj, ll);
                        compact[(ll * niy + jj) * nix + ii] = arr[(l * ny + j) * nx + i];
                    }
                }
            }
            *slot = compact;
        }
        out
    }

    fn solve(&self) -> Result<(StaggeredField, SolveStats)> {
        let k = self.k;
        let ncells = k * k * k;
        let tol = self.problem.tol;

        // u_f = A^{-1} f
        let mut u_acc = [Vec::new(), Vec::new(), Vec::new()];
        for c in 0..3 {
            u_acc[c] = self.inner_solve(c, &self.f[c])?;
        }
        let scale = {
            let mut s = self.velocity_scale.max(1.0);
            for c in 0..3 {
                s = u_acc[c].iter().fold(s, |m, v| m.max(v.abs()));
            }
            s
        };
        let div_target = tol * scale;

        // rhs_p = b - div(u_f), de-meaned
        let mut rhs_p = self.divergence(&u_acc);
        for (r, bc) in rhs_p.iter_mut().zip(&self.b) {
            *r = bc - *r;
        }
        de_mean(&mut rhs_p);

        // CG on S p = rhs_p, S = -D A^{-1} G, accumulating
        // u = A^{-1}(f - G p) along the way.
        let mut p = vec![0.0; ncells];
        let mut r = rhs_p.clone();
        let mut d = r.clone();
        let mut rr = dot(&r, &r);
        let mut history = Vec::new();
        let mut outer = 0;
        let max_outer = 600;
        loop {
            let rinf = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            history.push(rinf);
            if rinf <= 0.5 * div_target {
                break;
            }
            if outer >= max_outer {
                let tail = history.iter().rev().take(12).cloned().collect::<Vec<_>>();
                return Err(Error::NonConvergence {
                    iterations: outer,
                    residual: rinf,
                    trend: tail.into_iter().rev().collect(),
                });
            }
            let gd = self.gradient(&d);
            let mut ad = [Vec::new(), Vec::new(), Vec::new()];
            for c in 0..3 {
                ad[c] = self.inner_solve(c, &gd[c])?;
            }
            let mut sd = self.divergence(&ad);
            for v in sd.iter_mut() {
                *v = -*v;
            }
            de_mean(&mut sd);
            let dsd = dot(&d, &sd);
            if dsd <= 0.0 {
                return Err(Error::NonConvergence {
                    iterations: outer,
                    residual: rinf,
                    trend: history.iter().rev().take(12).cloned().collect(),
                });
            }
            let alpha = rr / dsd;
            for i in 0..ncells {
                p[i] += alpha * d[i];
                r[i] -= alpha * sd[i];
            }
            for c in 0..3 {
                for (ua, da) in u_acc[c].iter_mut().zip(&ad[c]) {
                    *ua -= alpha * da;
                }
            }
            de_mean(&mut r);
            let rr_new = dot(&r, &r);
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..ncells {
                d[i] = r[i] + beta * d[i];
            }
            outer += 1;
        }

        // exact pressure gauge
        de_mean(&mut p);
        de_mean(&mut p);

        // assemble the full field
        let mut field = StaggeredField::zeros(self.problem.domain, k);
        for c in 0..3 {
            let (nx, ny, nz) = field_dims(k, c);
            let (nix, niy, niz) = interior_dims(k, c);
            let full = field.component_mut(c);
            for l in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        full[(l * ny + j) * nx + i] = self.bc_full[c][(l * ny + j) * nx + i];
                    }
                }
            }
            for ll in 0..niz {
                for jj in 0..niy {
                    for ii in 0..nix {
                        let (i, j, l) = full_from_interior(c, ii, jj, ll);
                        full[(l * ny + j) * nx + i] = u_acc[c][(ll * niy + jj) * nix + ii];
                    }
                }
            }
        }
        field.p = p.clone();

        // final honest residuals
        let gp = self.gradient(&p);
        let mut mom_res = 0.0_f64;
        let mut f_scale = 0.0_f64;
        let mut quad = 0.0;
        let mut pw = 0.0;
        let mut fw = 0.0;
        let h3 = self.h * self.h * self.h;
        for c in 0..3 {
            let au = self.apply_a(c, &u_acc[c]);
            quad += dot(&u_acc[c], &au) * h3;
            pw += dot(&u_acc[c], &gp[c]) * h3;
            fw += dot(&u_acc[c], &self.f[c]) * h3;
            for i in 0..au.len() {
                mom_res = mom_res.max((au[i] + gp[c][i] - self.f[c][i]).abs());
                f_scale = f_scale.max(self.f[c][i].abs());
            }
        }
        let cont_res = field.max_divergence();
        let energy_scale = quad.abs().max(fw.abs()).max(1e-30);
        let energy = EnergyIdentity {
            quadratic_form: quad,
            pressure_work: pw,
            forcing_work: fw,
            relative_imbalance: (quad + pw - fw).abs() / energy_scale,
        };
        let stats = SolveStats {
            outer_iterations: outer,
            momentum_residual: mom_res,
            continuity_residual: cont_res,
            energy,
            residual_history: history,
        };
        if cont_res > div_target * (1.0 + 1e-9) {
            return Err(Error::NonConvergence {
                iterations: outer,
                residual: cont_res,
                trend: stats.residual_history.iter().rev().take(12).cloned().collect(),
            });
        }
        if mom_res > tol * f_scale.max(1.0) {
            return Err(Error::NonConvergence {
                iterations: outer,
                residual: mom_res,
                trend: vec![],
            });
        }
        if energy.relative_imbalance > 1e-8 {
            return Err(Error::NonConvergence {
                iterations: outer,
                residual: energy.relative_imbalance,
                trend: vec![],
            });
        }
        Ok((field, stats))
    }
}

fn de_mean(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

/// Manufactured Stokes-Brinkman instance with a known smooth solution:
/// divergence-free trigonometric velocity, product-cosine pressure and a
/// strictly positive non-uniform rho. Returns the problem and the exact
/// solution sampled on the grid.
pub fn manufactured_problem(
    domain: Domain,
    k: usize,
    tol: f64,
) -> Result<(BrinkmanProblem, StaggeredField)> {
    use std::f64::consts::PI;
    let l = domain.side_length;
    let o = domain.origin;
    let t = move |x: Vec3| (x - o) / l;
    let u_exact = move |x: Vec3| {
        let t = t(x);
        let (sx, cx) = (PI * t.x).sin_cos();
        let (sy, cy) = (PI * t.y).sin_cos();
        let (sz, cz) = (PI * t.z).sin_cos();
        Vec3::new(sx * cy * cz, cx * sy * cz, -2.0 * cx * cy * sz)
    };
    let p_exact = move |x: Vec3| {
        let t = t(x);
        (PI * t.x).cos() * (PI * t.y).cos() * (PI * t.z).cos()
    };
    let rho_fn = move |x: Vec3| {
        let t = t(x);
        2.0 + (PI * t.x).sin() * (PI * t.y).sin() * (PI * t.z).sin()
    };
    let j_fn = move |x: Vec3| {
        let t = t(x);
        let (sx, cx) = (PI * t.x).sin_cos();
        let (sy, cy) = (PI * t.y).sin_cos();
        let (sz, cz) = (PI * t.z).sin_cos();
        let u = u_exact(x);
        let grad_p = Vec3::new(-sx * cy * cz, -cx * sy * cz, -cx * cy * sz) * (PI / l);
        u * (rho_fn(x) + 3.0 * PI * PI / (l * l)) + grad_p
    };
    let problem = BrinkmanProblem::from_fields(
        domain,
        k,
        rho_fn,
        j_fn,
        BoundaryVelocity::Field(Arc::new(u_exact)),
        tol,
    )?;
    let mut exact = StaggeredField::zeros(domain, k);
    for c in 0..3 {
        let (nx, ny, nz) = exact.dims(c);
        for ll in 0..nz {
            for jj in 0..ny {
                for ii in 0..nx {
                    let pos = exact.face_position(c, ii, jj, ll);
                    exact.component_mut(c)[(ll * ny + jj) * nx + ii] = u_exact(pos).get(c);
                }
            }
        }
    }
    for ll in 0..k {
        for jj in 0..k {
            for ii in 0..k {
                let ci = exact.cell_index(ii, jj, ll);
                exact.p[ci] = p_exact(exact.cell_center(ii, jj, ll));
            }
        }
    }
    let mean = exact.mean_pressure();
    for v in exact.p.iter_mut() {
        *v -= mean;
    }
    Ok((problem, exact))
}

/// L2 norm of the velocity difference between two fields on the same grid.
pub fn velocity_l2_error(a: &StaggeredField, b: &StaggeredField) -> f64 {
    assert_eq!(a.k, b.k);
    let h3 = a.h * a.h * a.h;
    let mut sum = 0.0;
    for c in 0..3 {
        for (x, y) in a.component(c).iter().zip(b.component(c)) {
            sum += (x - y) * (x - y) * h3;
        }
    }
    sum.sqrt()
}
