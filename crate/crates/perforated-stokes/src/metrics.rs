//! Distances for fields and measures: L^p grid norms, the C^{0,alpha}-dual
//! (bounded-Lipschitz at alpha = 1) distance of discrete measures by exact
//! linear programming, and Wasserstein-1 by a transport LP.
//!
//! The Hölder-dual LP on a finite support {x_i} is
//!
//! ```text
//! maximize  sum_i w_i phi_i
//! s.t.      |phi_i| <= s,  |phi_i - phi_j| <= t |x_i - x_j|^alpha,
//!           s + t <= 1,  s, t >= 0,
//! ```
//!
//! with `w = weights(mu) - weights(nu)` on the union support. Feasible
//! point values extend to the whole closed box with unchanged budgets
//! (McShane extension plus clamping), so the finite LP equals the
//! continuum dual norm restricted to these supports. Every solve is
//! certificate-checked: full-constraint primal feasibility, dual
//! feasibility, complementary slackness and a duality gap below 1e-8.

use crate::brinkman::StaggeredField;
use crate::cloud::DiscreteMeasure;
use crate::error::{Error, Result};
use crate::lp::{solve_with_cuts, DenseLp, SparseRow};
use crate::vec3::Vec3;
use serde::{Deserialize, Serialize};

/// Support-size cap for the Hölder-dual LP; coarsen the continuous side
/// (see `cloud::discretize_scalar`) to stay below it.
pub const MAX_DUAL_SUPPORT: usize = 2000;

const GAP_TOL: f64 = 1e-8;
const FEAS_TOL: f64 = 1e-9;

/// Primal/dual objective pair with their gap.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LpCertificate {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

/// Solution of the dual-norm LP for one scalar component.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualComponent {
    pub value: f64,
    /// Optimal test values at the union support points.
    pub phi: Vec<f64>,
    /// Sup-norm budget.
    pub s: f64,
    /// Hölder-seminorm budget.
    pub t: f64,
    pub certificate: LpCertificate,
}

/// Hölder-dual distance result; `value` is the Euclidean combination of the
/// per-component LP values (for scalar measures, just that value).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualNormResult {
    pub value: f64,
    pub support: Vec<Vec3>,
    pub components: Vec<DualComponent>,
}

impl DualNormResult {
    /// The single component of a scalar-measure distance.
    pub fn scalar(&self) -> &DualComponent {
        &self.components[0]
    }
}

/// Wasserstein-1 result with the optimal plan (indices into the two input
/// measures) and its certificate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransportResult {
    pub value: f64,
    pub plan: Vec<(usize, usize, f64)>,
    pub certificate: LpCertificate,
}

/// Midpoint-rule L^p distance of two velocity fields over cell-averaged
/// differences: `(sum |du_cell|^p h^3)^{1/p}`.
pub fn lp_distance(a: &StaggeredField, b: &StaggeredField, p: f64) -> Result<f64> {
    if a.k != b.k || a.domain != b.domain {
        return Err(Error::ShapeMismatch(format!("grids differ: k={} vs k={}", a.k, b.k)));
    }
    if !(p > 1.0 && p < 6.0) {
        return Err(Error::InvalidInput(format!("p must lie in (1, 6), got {p}")));
    }
    let h3 = a.h * a.h * a.h;
    let mut sum = 0.0;
    for l in 0..a.k {
        for j in 0..a.k {
            for i in 0..a.k {
                let d = a.cell_velocity(i, j, l) - b.cell_velocity(i, j, l);
                sum += d.norm().powf(p) * h3;
            }
        }
    }
    Ok(sum.powf(1.0 / p))
}

/// C^{0,alpha}-dual distance between two discrete measures on the union of
/// their supports; alpha = 1 is the bounded-Lipschitz (Fortet-Mourier)
/// distance. Vector measures are handled per component and combined as the
/// Euclidean norm of the component values.
pub fn dual_holder_distance(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    alpha: f64,
) -> Result<DualNormResult> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if mu.components != nu.components {
        return Err(Error::InvalidInput(format!(
            "component mismatch: {} vs {}",
            mu.components, nu.components
        )));
    }
    let comps = mu.components;
    let (support, weights) = union_support(mu, nu);
    let n = support.len();
    if n > MAX_DUAL_SUPPORT {
        return Err(Error::InvalidInput(format!(
            "union support {n} exceeds the cap {MAX_DUAL_SUPPORT}; coarsen the denser side"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidInput("both measures are empty".into()));
    }

    // pairwise alpha-distances
    let mut dmat = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = (support[i] - support[j]).norm().powf(alpha);
            dmat[i * n + j] = d;
            dmat[j * n + i] = d;
        }
    }

    let mut components = Vec::with_capacity(comps);
    let mut sq = 0.0;
    for c in 0..comps {
        let w: Vec<f64> = (0..n).map(|i| weights[i * comps + c]).collect();
        let comp = if w.iter().all(|&x| x == 0.0) {
            DualComponent {
                value: 0.0,
                phi: vec![0.0; n],
                s: 0.0,
                t: 0.0,
                certificate: LpCertificate { primal: 0.0, dual: 0.0, gap: 0.0 },
            }
        } else {
            solve_dual_component(&support, &w, &dmat)?
        };
        sq += comp.value * comp.value;
        components.push(comp);
    }
    let value = if comps == 1 { components[0].value } else { sq.sqrt() };
    Ok(DualNormResult { value, support, components })
}

/// One scalar dual-norm LP in shifted variables `psi_i = phi_i + s >= 0`.
fn solve_dual_component(support: &[Vec3], w: &[f64], dmat: &[f64]) -> Result<DualComponent> {
    let n = support.len();
    let s_col = n;
    let t_col = n + 1;
    let w_sum: f64 = w.iter().sum();
    let mut objective = w.to_vec();
    objective.push(-w_sum);
    objective.push(0.0);

    // base rows: psi_i - 2 s <= 0, the budget s + t <= 1, and
    // nearest-neighbor pair rows in both directions as a warm start
    let mut rows = Vec::with_capacity(3 * n + 1);
    let mut rhs = Vec::with_capacity(3 * n + 1);
    for i in 0..n {
        rows.push(SparseRow(vec![(i, 1.0), (s_col, -2.0)]));
        rhs.push(0.0);
    }
    rows.push(SparseRow(vec![(s_col, 1.0), (t_col, 1.0)]));
    rhs.push(1.0);
    if n > 1 {
        for i in 0..n {
            let mut jn = usize::MAX;
            let mut best = f64::INFINITY;
            for j in 0..n {
                if j != i && dmat[i * n + j] < best {
                    best = dmat[i * n + j];
                    jn = j;
                }
            }
            rows.push(SparseRow(vec![(i, 1.0), (jn, -1.0), (t_col, -best)]));
            rhs.push(0.0);
            rows.push(SparseRow(vec![(jn, 1.0), (i, -1.0), (t_col, -best)]));
            rhs.push(0.0);
        }
    }
    let lp = DenseLp { ncols: n + 2, rows, rhs, objective };

    let extra = 2 * n + 2048;
    let mut generated_keys = std::collections::HashSet::new();
    let (sol, generated) = solve_with_cuts(&lp, extra, 400, |x| {
        let t = x[t_col];
        let mut cuts: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let diff = x[i] - x[j];
                let bound = t * dmat[i * n + j] + FEAS_TOL;
                if diff > bound && !generated_keys.contains(&(i, j)) {
                    cuts.push((diff - bound, i, j));
                } else if -diff > bound && !generated_keys.contains(&(j, i)) {
                    cuts.push((-diff - bound, j, i));
                }
            }
        }
        cuts.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        cuts.truncate(256);
        cuts.into_iter()
            .map(|(_, i, j)| {
                generated_keys.insert((i, j));
                (SparseRow(vec![(i, 1.0), (j, -1.0), (t_col, -dmat[i * n + j])]), 0.0)
            })
            .collect()
    })?;

    let s = sol.x[s_col];
    let t = sol.x[t_col];
    let phi: Vec<f64> = (0..n).map(|i| sol.x[i] - s).collect();
    let value: f64 = phi.iter().zip(w).map(|(p, w)| p * w).sum();

    // certificate: full primal feasibility over every constraint
    let feas = FEAS_TOL * (1.0 + s.abs() + t.abs());
    if s < -feas || t < -feas || s + t > 1.0 + feas {
        return Err(Error::Lp(format!("budgets infeasible: s={s}, t={t}")));
    }
    for (i, p) in phi.iter().enumerate() {
        if p.abs() > s + feas {
            return Err(Error::Lp(format!("box constraint violated at point {i}")));
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if (phi[i] - phi[j]).abs() > t * dmat[i * n + j] + feas {
                return Err(Error::Lp(format!("pair constraint violated at ({i}, {j})")));
            }
        }
    }
    // dual feasibility and complementary slackness over generated rows
    if sol.duals.iter().any(|&y| y < -FEAS_TOL) {
        return Err(Error::Lp("negative dual multiplier".into()));
    }
    let all_rows = || lp.rows.iter().zip(&lp.rhs).chain(generated.iter().map(|(r, b)| (r, b)));
    let mut col_duals = vec![0.0; lp.ncols];
    for ((row, _), &y) in all_rows().zip(&sol.duals) {
        for &(jcol, a) in &row.0 {
            col_duals[jcol] += y * a;
        }
    }
    for (jcol, cd) in col_duals.iter().enumerate() {
        if cd - lp.objective[jcol] < -1e-7 {
            return Err(Error::Lp(format!("dual constraint violated at column {jcol}")));
        }
    }
    for ((row, b), &y) in all_rows().zip(&sol.duals) {
        let ax: f64 = row.0.iter().map(|&(jcol, a)| a * sol.x[jcol]).sum();
        if y * (b - ax) > 1e-7 * (1.0 + y.abs()) {
            return Err(Error::Lp("complementary slackness violated".into()));
        }
    }
    let gap = (sol.dual_value - value).abs();
    if gap > GAP_TOL * value.abs().max(1.0) {
        return Err(Error::Lp(format!("duality gap {gap:.3e} above tolerance")));
    }
    Ok(DualComponent {
        value,
        phi,
        s: s.max(0.0),
        t: t.max(0.0),
        certificate: LpCertificate { primal: value, dual: sol.dual_value, gap },
    })
}

/// Wasserstein-1 distance between equal-mass positive scalar measures with
/// Euclidean ground cost.
pub fn w1_distance(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<TransportResult> {
    if mu.components != 1 || nu.components != 1 {
        return Err(Error::InvalidInput(
            "Wasserstein-1 applies to scalar (positive) measures".into(),
        ));
    }
    let get = |m: &DiscreteMeasure| -> Result<(Vec<Vec3>, Vec<f64>, Vec<usize>)> {
        let mut pts = Vec::new();
        let mut ws = Vec::new();
        let mut index = Vec::new();
        for (i, (p, w)) in m.points.iter().zip(&m.weights).enumerate() {
            let w = w[0];
            if w < 0.0 {
                return Err(Error::InvalidInput(format!("negative weight {w} at point {i}")));
            }
            if w > 0.0 {
                pts.push(*p);
                ws.push(w);
                index.push(i);
            }
        }
        Ok((pts, ws, index))
    };
    let (pa, wa, ia) = get(mu)?;
    let (pb, wb, ib) = get(nu)?;
    let (ma, mb): (f64, f64) = (wa.iter().sum(), wb.iter().sum());
    if (ma - mb).abs() > 1e-10 * ma.abs().max(mb.abs()).max(1e-300) {
        return Err(Error::InvalidInput(format!(
            "masses differ: {ma} vs {mb}; Wasserstein-1 needs equal-mass measures"
        )));
    }
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::InvalidInput("empty measure".into()));
    }
    let cost = |i: usize, j: usize| (pa[i] - pb[j]).norm();
    let sol = crate::lp::solve_transport(&wa, &wb, cost)?;

    // certificate: marginals, dual feasibility, strong duality
    let mut rs = vec![0.0; wa.len()];
    let mut cs = vec![0.0; wb.len()];
    let mut value = 0.0;
    for &(i, j, q) in &sol.plan {
        if q < -1e-12 {
            return Err(Error::Lp("negative plan entry".into()));
        }
        rs[i] += q;
        cs[j] += q;
        value += q * cost(i, j);
    }
    let mscale = ma.max(1.0);
    for (r, w) in rs.iter().zip(&wa) {
        if (r - w).abs() > 1e-10 * mscale {
            return Err(Error::Lp("row marginal mismatch".into()));
        }
    }
    for (c, w) in cs.iter().zip(&wb) {
        if (c - w).abs() > 1e-10 * mscale {
            return Err(Error::Lp("column marginal mismatch".into()));
        }
    }
    let cost_scale = 1.0 + value.abs();
    for i in 0..wa.len() {
        for j in 0..wb.len() {
            if cost(i, j) - sol.row_potentials[i] - sol.col_potentials[j] < -FEAS_TOL * cost_scale
            {
                return Err(Error::Lp("transport dual infeasible".into()));
            }
        }
    }
    let dual: f64 = wa
        .iter()
        .zip(&sol.row_potentials)
        .map(|(a, u)| a * u)
        .chain(wb.iter().zip(&sol.col_potentials).map(|(b, v)| b * v))
        .sum();
    let gap = (dual - value).abs();
    if gap > GAP_TOL * value.abs().max(1.0) {
        return Err(Error::Lp(format!("transport duality gap {gap:.3e}")));
    }
    let plan = sol
        .plan
        .iter()
        .filter(|&&(_, _, q)| q > 0.0)
        .map(|&(i, j, q)| (ia[i], ib[j], q))
        .collect();
    Ok(TransportResult { value, plan, certificate: LpCertificate { primal: value, dual, gap } })
}

/// Merge the two supports, matching points bit-exactly; weights are
/// `mu - nu` per component.
fn union_support(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> (Vec<Vec3>, Vec<f64>) {
    let comps = mu.components;
    let key = |p: &Vec3| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits());
    let mut order: Vec<Vec3> = Vec::new();
    let mut map = std::collections::HashMap::new();
    for p in mu.points.iter().chain(&nu.points) {
        map.entry(key(p)).or_insert_with(|| {
            order.push(*p);
            order.len() - 1
        });
    }
    let mut weights = vec![0.0; order.len() * comps];
    for (p, ws) in mu.points.iter().zip(&mu.weights) {
        let i = map[&key(p)];
        for c in 0..comps {
            weights[i * comps + c] += ws[c];
        }
    }
    for (p, ws) in nu.points.iter().zip(&nu.weights) {
        let i = map[&key(p)];
        for c in 0..comps {
            weights[i * comps + c] -= ws[c];
        }
    }
    (order, weights)
}
