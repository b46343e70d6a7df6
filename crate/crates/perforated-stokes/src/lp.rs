//! Linear-programming backends: a dense-tableau simplex with lazy row
//! generation (for the Hölder-dual norm) and a transportation simplex (for
//! Wasserstein-1). Both return primal and dual data so callers can check
//! optimality certificates independently.

use crate::error::{Error, Result};

/// Number of consecutive degenerate pivots before switching to Bland's rule.
const DEGENERATE_STREAK: usize = 24;
const PIVOT_EPS: f64 = 1e-11;

/// `maximize c.x  s.t.  A x <= b, x >= 0`, with `b >= 0` so the slack basis
/// is feasible.
pub struct DenseLp {
    pub ncols: usize,
    pub rows: Vec<SparseRow>,
    pub rhs: Vec<f64>,
    pub objective: Vec<f64>,
}

/// One inequality `sum coeff_j x_j <= rhs`.
#[derive(Clone, Debug)]
pub struct SparseRow(pub Vec<(usize, f64)>);

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub x: Vec<f64>,
    /// Dual multipliers per row (nonnegative at optimality).
    pub duals: Vec<f64>,
    pub value: f64,
    pub dual_value: f64,
    pub pivots: usize,
}

/// Dense-tableau simplex. Dantzig pricing with a Bland fallback against
/// cycling; `extra_row_capacity` preallocates slack columns for rows added
/// later through [`Tableau::add_row`].
pub struct Tableau {
    ncols: usize, // structural columns
    nrows: usize,
    cap_rows: usize,
    width: usize, // ncols + cap_rows + 1 (rhs)
    /// Row-major tableau; row `cap_rows` is the objective row.
    t: Vec<f64>,
    basis: Vec<usize>,
    pivots: usize,
}

impl Tableau {
    pub fn new(lp: &DenseLp, extra_row_capacity: usize) -> Result<Tableau> {
        let nrows = lp.rows.len();
        let cap_rows = nrows + extra_row_capacity;
        let width = lp.ncols + cap_rows + 1;
        let mut t = vec![0.0; (cap_rows + 1) * width];
        for (r, row) in lp.rows.iter().enumerate() {
            if lp.rhs[r] < 0.0 {
                return Err(Error::Lp(format!("negative rhs {} in row {r}", lp.rhs[r])));
            }
            for &(j, v) in &row.0 {
                t[r * width + j] = v;
            }
            t[r * width + lp.ncols + r] = 1.0; // slack
            t[r * width + width - 1] = lp.rhs[r];
        }
        // objective row holds reduced costs, starting at -c (maximization)
        for j in 0..lp.ncols {
            t[cap_rows * width + j] = -lp.objective[j];
        }
        Ok(Tableau {
            ncols: lp.ncols,
            nrows,
            cap_rows,
            width,
            t,
            basis: (0..nrows).map(|r| lp.ncols + r).collect(),
            pivots: 0,
        })
    }

    fn obj_row(&self) -> usize {
        self.cap_rows
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.t[r * self.width + c]
    }

    fn rhs(&self, r: usize) -> f64 {
        self.at(r, self.width - 1)
    }

    /// Columns currently in play (structural + slacks of existing rows).
    fn active_cols(&self) -> usize {
        self.ncols + self.nrows
    }

    fn pivot(&mut self, prow: usize, pcol: usize) {
        let w = self.width;
        let inv = 1.0 / self.at(prow, pcol);
        let (start, end) = (prow * w, (prow + 1) * w);
        for v in &mut self.t[start..end] {
            *v *= inv;
        }
        let piv_row: Vec<f64> = self.t[start..end].to_vec();
        for r in 0..=self.obj_row() {
            if r == prow {
                continue;
            }
            let f = self.at(r, pcol);
            if f == 0.0 {
                continue;
            }
            let base = r * w;
            for (c, pv) in piv_row.iter().enumerate() {
                self.t[base + c] -= f * pv;
            }
            self.t[base + pcol] = 0.0;
        }
        self.basis[prow] = pcol;
        self.pivots += 1;
    }

    /// Primal simplex to optimality from the current (feasible) basis.
    pub fn optimize(&mut self, max_pivots: usize) -> Result<()> {
        let mut degenerate_streak = 0usize;
        loop {
            if self.pivots > max_pivots {
                return Err(Error::Lp(format!("pivot cap {max_pivots} exceeded")));
            }
            let bland = degenerate_streak >= DEGENERATE_STREAK;
            let obj = self.obj_row();
            // entering column: most negative reduced cost (Dantzig) or
            // first negative (Bland)
            let mut pcol = None;
            let mut best = -1e-9;
            for c in 0..self.active_cols() {
                let rc = self.at(obj, c);
                if rc < best {
                    pcol = Some(c);
                    if bland {
                        break;
                    }
                    best = rc;
                }
            }
            let Some(pcol) = pcol else {
                return Ok(());
            };
            // ratio test; ties broken toward the smallest basis label
            let mut prow: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for r in 0..self.nrows {
                let a = self.at(r, pcol);
                if a > PIVOT_EPS {
                    let ratio = self.rhs(r) / a;
                    let better = ratio < best_ratio - 1e-12
                        || (ratio < best_ratio + 1e-12
                            && prow.is_some_and(|p| self.basis[r] < self.basis[p]));
                    if prow.is_none() || better {
                        best_ratio = ratio;
                        prow = Some(r);
                    }
                }
            }
            let Some(prow) = prow else {
                return Err(Error::Lp("objective unbounded".into()));
            };
            if best_ratio < 1e-12 {
                degenerate_streak += 1;
            } else {
                degenerate_streak = 0;
            }
            self.pivot(prow, pcol);
        }
    }

    /// Add a violated row `sum coeff x <= rhs`; call [`Self::dual_optimize`]
    /// afterwards to restore primal feasibility.
    pub fn add_row(&mut self, row: &SparseRow, rhs: f64) -> Result<()> {
        if self.nrows == self.cap_rows {
            return Err(Error::Lp("tableau row capacity exhausted".into()));
        }
        let w = self.width;
        let r_new = self.nrows;
        let base = r_new * w;
        for v in &mut self.t[base..base + w] {
            *v = 0.0;
        }
        for &(j, v) in &row.0 {
            self.t[base + j] = v;
        }
        self.t[base + self.ncols + r_new] = 1.0;
        self.t[base + w - 1] = rhs;
        self.nrows += 1;
        self.basis.push(self.ncols + r_new);
        // express the new row in the current basis
        for r in 0..self.nrows - 1 {
            let bcol = self.basis[r];
            let f = self.at(r_new, bcol);
            if f != 0.0 {
                let rb = r * w;
                for c in 0..w {
                    self.t[base + c] -= f * self.t[rb + c];
                }
                self.t[base + bcol] = 0.0;
            }
        }
        Ok(())
    }

    /// Dual simplex: restore primal feasibility after row additions while
    /// keeping all reduced costs nonnegative.
    pub fn dual_optimize(&mut self, max_pivots: usize) -> Result<()> {
        loop {
            if self.pivots > max_pivots {
                return Err(Error::Lp(format!("pivot cap {max_pivots} exceeded (dual)")));
            }
            let mut prow = None;
            let mut most_neg = -1e-10;
            for r in 0..self.nrows {
                let b = self.rhs(r);
                if b < most_neg {
                    most_neg = b;
                    prow = Some(r);
                }
            }
            let Some(prow) = prow else {
                return Ok(());
            };
            let obj = self.obj_row();
            let mut pcol: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for c in 0..self.active_cols() {
                let a = self.at(prow, c);
                if a < -PIVOT_EPS {
                    let ratio = self.at(obj, c) / (-a);
                    if ratio < best_ratio - 1e-12
                        || (ratio < best_ratio + 1e-12 && pcol.is_some_and(|p| c < p))
                        || pcol.is_none()
                    {
                        best_ratio = ratio;
                        pcol = Some(c);
                    }
                }
            }
            let Some(pcol) = pcol else {
                return Err(Error::Lp("dual simplex: infeasible row has no pivot".into()));
            };
            self.pivot(prow, pcol);
        }
    }

    pub fn solution(&self) -> LpSolution {
        let mut x = vec![0.0; self.ncols];
        for (r, &b) in self.basis.iter().enumerate() {
            if b < self.ncols {
                x[b] = self.rhs(r);
            }
        }
        let obj = self.obj_row();
        let mut duals = vec![0.0; self.nrows];
        for (r, d) in duals.iter_mut().enumerate() {
            *d = self.at(obj, self.ncols + r);
        }
        let value = self.rhs(obj);
        LpSolution { x, duals, value, dual_value: value, pivots: self.pivots }
    }
}

/// Cutting-plane driver: solve with the base rows, then repeatedly add the
/// violated rows reported by `separate(x)` until none remain.
///
/// `separate` must report rows of the *full* LP, so the returned solution
/// certifies the full problem: the primal point satisfies every row
/// (separation returned none), and zero multipliers on non-generated rows
/// keep the dual feasible. `dual_value` is `y^T b` over base and generated
/// rows.
pub fn solve_with_cuts<F>(
    lp: &DenseLp,
    extra_row_capacity: usize,
    max_rounds: usize,
    mut separate: F,
) -> Result<(LpSolution, Vec<(SparseRow, f64)>)>
where
    F: FnMut(&[f64]) -> Vec<(SparseRow, f64)>,
{
    let mut tab = Tableau::new(lp, extra_row_capacity)?;
    let max_pivots = 400 * (lp.rows.len() + extra_row_capacity + lp.ncols) + 20_000;
    tab.optimize(max_pivots)?;
    let mut generated: Vec<(SparseRow, f64)> = Vec::new();
    for _ in 0..max_rounds {
        let sol = tab.solution();
        let cuts = separate(&sol.x);
        if cuts.is_empty() {
            let mut out = tab.solution();
            out.dual_value = dual_value(lp, &generated, &out.duals);
            return Ok((out, generated));
        }
        for (row, rhs) in cuts {
            tab.add_row(&row, rhs)?;
            generated.push((row, rhs));
        }
        tab.dual_optimize(max_pivots)?;
        tab.optimize(max_pivots)?;
    }
    Err(Error::Lp(format!("row generation did not settle in {max_rounds} rounds")))
}

/// Dual objective `y^T b` over base and generated rows.
fn dual_value(lp: &DenseLp, generated: &[(SparseRow, f64)], duals: &[f64]) -> f64 {
    let mut v = 0.0;
    for (r, &y) in duals.iter().enumerate() {
        let b = if r < lp.rhs.len() { lp.rhs[r] } else { generated[r - lp.rhs.len()].1 };
        v += y * b;
    }
    v
}

/// Transportation problem solution: `minimize sum c_ij gamma_ij` with row
/// sums `supply`, column sums `demand`, `gamma >= 0`.
#[derive(Clone, Debug)]
pub struct TransportSolution {
    /// Basic plan entries `(i, j, mass)`; may include degenerate zeros.
    pub plan: Vec<(usize, usize, f64)>,
    pub value: f64,
    pub row_potentials: Vec<f64>,
    pub col_potentials: Vec<f64>,
    pub iterations: usize,
}

/// Transportation simplex (MODI) with a northwest-corner start and a Bland
/// fallback on long degenerate streaks.
pub fn solve_transport(
    supply: &[f64],
    demand: &[f64],
    cost: impl Fn(usize, usize) -> f64,
) -> Result<TransportSolution> {
    let n = supply.len();
    let m = demand.len();
    if n == 0 || m == 0 {
        return Err(Error::InvalidInput("empty transport instance".into()));
    }
    let total_s: f64 = supply.iter().sum();
    let total_d: f64 = demand.iter().sum();
    let scale = total_s.abs().max(total_d.abs()).max(1e-300);
    if (total_s - total_d).abs() > 1e-10 * scale {
        return Err(Error::InvalidInput(format!(
            "transport masses differ: {total_s} vs {total_d}"
        )));
    }
    if supply.iter().chain(demand).any(|&v| v < 0.0) {
        return Err(Error::InvalidInput("transport marginals must be nonnegative".into()));
    }

    // Basis = spanning tree over rows 0..n and columns n..n+m.
    let mut basic: Vec<(usize, usize, f64)> = Vec::with_capacity(n + m - 1);
    {
        // northwest corner
        let mut s = supply.to_vec();
        let mut d = demand.to_vec();
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let q = s[i].min(d[j]);
            basic.push((i, j, q));
            s[i] -= q;
            d[j] -= q;
            if i + 1 == n && j + 1 == m {
                break;
            }
            if (s[i] <= d[j] && i + 1 < n) || j + 1 == m {
                i += 1;
            } else {
                j += 1;
            }
        }
        debug_assert_eq!(basic.len(), n + m - 1);
    }

    let cap = 200 * (n + m) + 20_000;
    let mut iterations = 0usize;
    let mut degenerate_streak = 0usize;
    loop {
        iterations += 1;
        if iterations > cap {
            return Err(Error::Lp(format!("transportation simplex cap {cap} exceeded")));
        }
        let (u, v) = potentials(n, m, &basic, &cost)?;
        // entering arc
        let bland = degenerate_streak >= DEGENERATE_STREAK;
        let mut entering = None;
        let mut best = -1e-10;
        'scan: for i in 0..n {
            for j in 0..m {
                let rc = cost(i, j) - u[i] - v[j];
                if rc < best {
                    entering = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    best = rc;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            let value = basic.iter().map(|&(i, j, q)| q * cost(i, j)).sum();
            return Ok(TransportSolution {
                plan: basic,
                value,
                row_potentials: u,
                col_potentials: v,
                iterations,
            });
        };
        // cycle through the tree; arcs at even path positions lose mass
        let cycle = tree_path(n, m, &basic, ei, ej)?;
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (pos, &arc_idx) in cycle.iter().enumerate() {
            if pos % 2 == 0 {
                let q = basic[arc_idx].2;
                if q < theta - 1e-15
                    || (q < theta + 1e-15 && (leave == usize::MAX || arc_idx < leave))
                {
                    theta = q;
                    leave = arc_idx;
                }
            }
        }
        if leave == usize::MAX {
            return Err(Error::Lp("transportation cycle without leaving arc".into()));
        }
        if theta <= 1e-15 {
            degenerate_streak += 1;
        } else {
            degenerate_streak = 0;
        }
        for (pos, &arc_idx) in cycle.iter().enumerate() {
            if pos % 2 == 0 {
                basic[arc_idx].2 -= theta;
            } else {
                basic[arc_idx].2 += theta;
            }
        }
        basic[leave] = (ei, ej, theta);
    }
}

/// Solve `u_i + v_j = c_ij` over the basis tree (root potential 0).
fn potentials(
    n: usize,
    m: usize,
    basic: &[(usize, usize, f64)],
    cost: &impl Fn(usize, usize) -> f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut u = vec![f64::NAN; n];
    let mut v = vec![f64::NAN; m];
    let mut row_arcs: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut col_arcs: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (idx, &(i, j, _)) in basic.iter().enumerate() {
        row_arcs[i].push(idx);
        col_arcs[j].push(idx);
    }
    u[0] = 0.0;
    let mut stack = vec![(true, 0usize)];
    while let Some((is_row, node)) = stack.pop() {
        let arcs = if is_row { &row_arcs[node] } else { &col_arcs[node] };
        for &a in arcs {
            let (i, j, _) = basic[a];
            if is_row && v[j].is_nan() {
                v[j] = cost(i, j) - u[i];
                stack.push((false, j));
            } else if !is_row && u[i].is_nan() {
                u[i] = cost(i, j) - v[j];
                stack.push((true, i));
            }
        }
    }
    if u.iter().any(|x| x.is_nan()) || v.iter().any(|x| x.is_nan()) {
        return Err(Error::Lp("transportation basis is not a spanning tree".into()));
    }
    Ok((u, v))
}

/// Alternating path in the basis tree from row `ei` to column `ej` as basic
/// arc indices; inserting the entering arc closes the cycle.
fn tree_path(
    n: usize,
    m: usize,
    basic: &[(usize, usize, f64)],
    ei: usize,
    ej: usize,
) -> Result<Vec<usize>> {
    let nn = n + m;
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nn];
    for (idx, &(i, j, _)) in basic.iter().enumerate() {
        adj[i].push((n + j, idx));
        adj[n + j].push((i, idx));
    }
    let start = ei;
    let goal = n + ej;
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; nn];
    let mut seen = vec![false; nn];
    seen[start] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == goal {
            break;
        }
        for &(next, arc) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                prev[next] = Some((node, arc));
                queue.push_back(next);
            }
        }
    }
    if !seen[goal] {
        return Err(Error::Lp("transportation basis disconnected".into()));
    }
    let mut path = Vec::new();
    let mut node = goal;
    while node != start {
        let (parent, arc) = prev[node].unwrap();
        path.push(arc);
        node = parent;
    }
    path.reverse();
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn simplex_solves_textbook_instance() {
        // max 3x + 5y s.t. x <= 4; 2y <= 12; 3x + 2y <= 18
        let lp = DenseLp {
            ncols: 2,
            rows: vec![
                SparseRow(vec![(0, 1.0)]),
                SparseRow(vec![(1, 2.0)]),
                SparseRow(vec![(0, 3.0), (1, 2.0)]),
            ],
            rhs: vec![4.0, 12.0, 18.0],
            objective: vec![3.0, 5.0],
        };
        let mut tab = Tableau::new(&lp, 0).unwrap();
        tab.optimize(10_000).unwrap();
        let sol = tab.solution();
        assert_relative_eq!(sol.value, 36.0, max_relative = 1e-12);
        assert_relative_eq!(sol.x[0], 2.0, max_relative = 1e-12);
        assert_relative_eq!(sol.x[1], 6.0, max_relative = 1e-12);
        // strong duality against the original rhs
        let dv: f64 = sol.duals.iter().zip(&lp.rhs).map(|(y, b)| y * b).sum();
        assert_relative_eq!(dv, 36.0, max_relative = 1e-12);
        assert!(sol.duals.iter().all(|&y| y >= -1e-12));
    }

    #[test]
    fn cutting_plane_reaches_full_lp_optimum() {
        // max x + y s.t. x <= 3, y <= 3 (base); lazily cut with x + y <= 4
        let lp = DenseLp {
            ncols: 2,
            rows: vec![SparseRow(vec![(0, 1.0)]), SparseRow(vec![(1, 1.0)])],
            rhs: vec![3.0, 3.0],
            objective: vec![1.0, 1.0],
        };
        let (sol, generated) = solve_with_cuts(&lp, 4, 10, |x| {
            if x[0] + x[1] > 4.0 + 1e-9 {
                vec![(SparseRow(vec![(0, 1.0), (1, 1.0)]), 4.0)]
            } else {
                vec![]
            }
        })
        .unwrap();
        assert_relative_eq!(sol.value, 4.0, max_relative = 1e-12);
        assert_eq!(generated.len(), 1);
        assert_relative_eq!(sol.dual_value, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn transport_two_by_two_matches_enumeration() {
        let supply = [0.6, 0.4];
        let demand = [0.5, 0.5];
        let cost = |i: usize, j: usize| [[1.0, 3.0], [2.0, 0.5]][i][j];
        let sol = solve_transport(&supply, &demand, cost).unwrap();
        // brute force over the single free variable gamma_00 in [0.1, 0.5]
        let mut best = f64::INFINITY;
        let mut g00 = 0.1;
        while g00 <= 0.5 + 1e-12 {
            let g01 = 0.6 - g00;
            let g10 = 0.5 - g00;
            let g11 = 0.5 - g01;
            let v = g00 * 1.0 + g01 * 3.0 + g10 * 2.0 + g11 * 0.5;
            best = best.min(v);
            g00 += 0.0005;
        }
        assert!((sol.value - best).abs() <= 1e-6, "{} vs {}", sol.value, best);
        let mut rs = [0.0; 2];
        let mut cs = [0.0; 2];
        for &(i, j, q) in &sol.plan {
            rs[i] += q;
            cs[j] += q;
            assert!(q >= -1e-12);
        }
        for i in 0..2 {
            assert_relative_eq!(rs[i], supply[i], epsilon = 1e-12);
            assert_relative_eq!(cs[i], demand[i], epsilon = 1e-12);
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!(cost(i, j) - sol.row_potentials[i] - sol.col_potentials[j] >= -1e-9);
            }
        }
    }

    #[test]
    fn transport_random_instances_satisfy_certificates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..25 {
            let n = 2 + (trial % 7);
            let m = 2 + (trial % 5);
            let supply: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
            let mut demand: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 0.01).collect();
            let s: f64 = supply.iter().sum();
            let d: f64 = demand.iter().sum();
            for v in demand.iter_mut() {
                *v *= s / d;
            }
            let costs: Vec<Vec<f64>> =
                (0..n).map(|_| (0..m).map(|_| rng.random::<f64>() * 3.0).collect()).collect();
            let sol = solve_transport(&supply, &demand, |i, j| costs[i][j]).unwrap();
            let mut rs = vec![0.0; n];
            let mut cs = vec![0.0; m];
            for &(i, j, q) in &sol.plan {
                assert!(q >= -1e-12);
                rs[i] += q;
                cs[j] += q;
            }
            for i in 0..n {
                assert_relative_eq!(rs[i], supply[i], epsilon = 1e-10);
            }
            for j in 0..m {
                assert_relative_eq!(cs[j], demand[j], epsilon = 1e-10);
            }
            let mut min_rc = f64::INFINITY;
            for i in 0..n {
                for j in 0..m {
                    min_rc =
                        min_rc.min(costs[i][j] - sol.row_potentials[i] - sol.col_potentials[j]);
                }
            }
            assert!(min_rc >= -1e-9, "dual infeasible by {min_rc}");
            let dual: f64 = supply
                .iter()
                .zip(&sol.row_potentials)
                .map(|(a, u)| a * u)
                .chain(demand.iter().zip(&sol.col_potentials).map(|(b, v)| b * v))
                .sum();
            assert_relative_eq!(dual, sol.value, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn transport_rejects_unbalanced_masses() {
        let err = solve_transport(&[1.0], &[0.5], |_, _| 1.0);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }
}
