//! Exact discrete optimal transport between small histograms, and the
//! mixture-Wasserstein distances built on it.
//!
//! The solver is the transportation simplex: a basis is a spanning tree of
//! the bipartite row/column graph with `m + n - 1` cells, potentials come from
//! the tree, and each pivot pushes flow around the unique cycle closed by the
//! entering cell. Entering cells follow Dantzig's rule; after a run of
//! degenerate pivots the solver switches to Bland's smallest-index rule
//! (for both entering and leaving cells) until flow moves again.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::gaussian::w2_sq_unchecked;
use crate::gmm::{Gmm, LabeledGmm};
use crate::simplex::check_simplex;

/// Coupling between two discrete marginals together with its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    matrix: Array2<f64>,
    cost: f64,
}

impl TransportPlan {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.matrix
    }

    /// Largest absolute deviation of row and column sums from `p` and `q`.
    pub fn marginal_residual(&self, p: &[f64], q: &[f64]) -> f64 {
        let rows = self.matrix.rows().into_iter().zip(p).map(|(r, &pi)| (r.sum() - pi).abs());
        let cols = self.matrix.columns().into_iter().zip(q).map(|(c, &qj)| (c.sum() - qj).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

/// Solves `min <C, w>` over couplings of `p` and `q`, returning an optimal
/// vertex of the transportation polytope.
pub fn solve_exact_ot(cost: ArrayView2<f64>, p: &[f64], q: &[f64]) -> Result<TransportPlan> {
    let (m, n) = cost.dim();
    if p.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: p.len() });
    }
    if q.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: q.len() });
    }
    check_simplex(p, "source marginal")?;
    check_simplex(q, "target marginal")?;
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }

    // Zero-mass rows and columns carry no flow; solve on the support only.
    let rows: Vec<usize> = (0..m).filter(|&i| p[i] > 0.0).collect();
    let cols: Vec<usize> = (0..n).filter(|&j| q[j] > 0.0).collect();
    let ps: f64 = rows.iter().map(|&i| p[i]).sum();
    let qs: f64 = cols.iter().map(|&j| q[j]).sum();
    let sub_p: Vec<f64> = rows.iter().map(|&i| p[i] / ps).collect();
    let sub_q: Vec<f64> = cols.iter().map(|&j| q[j] / qs).collect();
    let sub_cost = Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| cost[[rows[a], cols[b]]]);

    let flow = TransportSimplex::new(sub_cost.view(), &sub_p, &sub_q).solve()?;

    let mut matrix = Array2::zeros((m, n));
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            matrix[[i, j]] = flow[[a, b]];
        }
    }
    let total = (&matrix * &cost).sum();
    Ok(TransportPlan { matrix, cost: total })
}

struct TransportSimplex<'a> {
    cost: ArrayView2<'a, f64>,
    m: usize,
    n: usize,
    flow: Array2<f64>,
    basic: Vec<(usize, usize)>,
    eps: f64,
}

impl<'a> TransportSimplex<'a> {
    fn new(cost: ArrayView2<'a, f64>, p: &[f64], q: &[f64]) -> Self {
        let (m, n) = cost.dim();
        let scale = cost.iter().fold(1.0f64, |a, c| a.max(c.abs()));
        let mut s = Self { cost, m, n, flow: Array2::zeros((m, n)), basic: Vec::new(), eps: 1e-12 * scale };
        s.northwest_corner(p, q);
        s
    }

    /// Initial basis with exactly `m + n - 1` cells.
    fn northwest_corner(&mut self, p: &[f64], q: &[f64]) {
        let (mut supply, mut demand) = (p.to_vec(), q.to_vec());
        let (mut i, mut j) = (0, 0);
        loop {
            let x = supply[i].min(demand[j]);
            supply[i] -= x;
            demand[j] -= x;
            self.flow[[i, j]] = x;
            self.basic.push((i, j));
            if i == self.m - 1 && j == self.n - 1 {
                break;
            }
            if i == self.m - 1 {
                j += 1;
            } else if j == self.n - 1 || supply[i] <= demand[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
        // Rounding leftovers land in the last cell.
        let (li, lj) = (self.m - 1, self.n - 1);
        self.flow[[li, lj]] += supply[li].max(demand[lj]);
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        // nodes 0..m are rows, m..m+n columns; edge payload is the basis slot
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (slot, &(i, j)) in self.basic.iter().enumerate() {
            adj[i].push((self.m + j, slot));
            adj[self.m + j].push((i, slot));
        }
        adj
    }

    fn potentials(&self, adj: &[Vec<(usize, usize)>]) -> (Vec<f64>, Vec<f64>) {
        let mut pot = vec![f64::NAN; self.m + self.n];
        pot[0] = 0.0;
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            for &(next, slot) in &adj[node] {
                if pot[next].is_nan() {
                    let (i, j) = self.basic[slot];
                    let c = self.cost[[i, j]];
                    pot[next] = c - pot[node];
                    stack.push(next);
                }
            }
        }
        let v = pot.split_off(self.m);
        (pot, v)
    }

    /// Tree path from column node of `j` to row node `i`, as basis slots.
    fn path(&self, adj: &[Vec<(usize, usize)>], i: usize, j: usize) -> Vec<usize> {
        let total = self.m + self.n;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; total];
        let start = self.m + j;
        let mut seen = vec![false; total];
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(node) = stack.pop() {
            if node == i {
                break;
            }
            for &(next, slot) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, slot));
                    stack.push(next);
                }
            }
        }
        // walk back from i to start, then reverse to get start -> i order
        let mut slots = Vec::new();
        let mut node = i;
        while node != start {
            let (prev, slot) = parent[node].expect("basis is a spanning tree");
            slots.push(slot);
            node = prev;
        }
        slots.reverse();
        slots
    }

    fn solve(mut self) -> Result<Array2<f64>> {
        if self.m == 1 || self.n == 1 {
            return Ok(self.flow);
        }
        let max_pivots = 50 * self.m * self.n + 1000;
        let mut degenerate_run = 0usize;
        for _ in 0..max_pivots {
            let adj = self.adjacency();
            let (u, v) = self.potentials(&adj);
            let use_bland = degenerate_run > self.m + self.n;

            let mut entering: Option<(usize, usize)> = None;
            let mut best = -self.eps;
            'scan: for i in 0..self.m {
                for j in 0..self.n {
                    let r = self.cost[[i, j]] - u[i] - v[j];
                    if r < best {
                        entering = Some((i, j));
                        if use_bland {
                            break 'scan;
                        }
                        best = r;
                    }
                }
            }
            let Some((ei, ej)) = entering else {
                return Ok(self.flow);
            };

            let path = self.path(&adj, ei, ej);
            // Cells alternate -, +, -, ... starting next to the entering column.
            let mut leave_pos = None;
            let mut theta = f64::INFINITY;
            for (pos, &slot) in path.iter().enumerate().step_by(2) {
                let (i, j) = self.basic[slot];
                let f = self.flow[[i, j]];
                let better = match leave_pos {
                    None => true,
                    Some(lp) => {
                        let (li, lj): (usize, usize) = self.basic[path[lp]];
                        f < theta || (f == theta && (i, j) < (li, lj))
                    }
                };
                if better {
                    theta = f;
                    leave_pos = Some(pos);
                }
            }
            let leave_pos = leave_pos.expect("cycle has a decreasing cell");

            for (pos, &slot) in path.iter().enumerate() {
                let (i, j) = self.basic[slot];
                if pos % 2 == 0 {
                    self.flow[[i, j]] -= theta;
                } else {
                    self.flow[[i, j]] += theta;
                }
            }
            let leave_slot = path[leave_pos];
            let (li, lj) = self.basic[leave_slot];
            self.flow[[li, lj]] = 0.0;
            self.flow[[ei, ej]] = theta;
            self.basic[leave_slot] = (ei, ej);

            if theta > 0.0 {
                degenerate_run = 0;
            } else {
                degenerate_run += 1;
            }
        }
        Err(Error::Numerical(format!(
            "transportation simplex did not converge within {max_pivots} pivots"
        )))
    }
}

/// Pairwise squared W2 between the components of `p` and `q`.
pub fn component_cost_matrix(p: &Gmm, q: &Gmm) -> Result<Array2<f64>> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: q.dim() });
    }
    let (pc, qc) = (p.components(), q.components());
    Ok(Array2::from_shape_fn((pc.len(), qc.len()), |(a, b)| w2_sq_unchecked(&pc[a], &qc[b])))
}

/// Squared W2 plus `beta` times the squared distance between label rows.
pub fn labeled_cost_matrix(p: &LabeledGmm, q: &LabeledGmm, beta: f64) -> Result<Array2<f64>> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be a finite nonnegative number, got {beta}")));
    }
    if p.n_classes() != q.n_classes() {
        return Err(Error::DimensionMismatch { expected: p.n_classes(), got: q.n_classes() });
    }
    let mut c = component_cost_matrix(p.gmm(), q.gmm())?;
    if beta > 0.0 {
        for ((a, b), v) in c.indexed_iter_mut() {
            let dl: f64 = p.labels()[a]
                .iter()
                .zip(&q.labels()[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            *v += beta * dl;
        }
    }
    Ok(c)
}

/// Squared mixture-Wasserstein distance and its component plan.
pub fn mw2_sq(p: &Gmm, q: &Gmm) -> Result<(f64, TransportPlan)> {
    let c = component_cost_matrix(p, q)?;
    let plan = solve_exact_ot(c.view(), p.weights(), q.weights())?;
    Ok((plan.cost(), plan))
}

/// Squared supervised mixture-Wasserstein distance.
pub fn smw2_sq(p: &LabeledGmm, q: &LabeledGmm, beta: f64) -> Result<(f64, TransportPlan)> {
    let c = labeled_cost_matrix(p, q, beta)?;
    let plan = solve_exact_ot(c.view(), p.gmm().weights(), q.gmm().weights())?;
    Ok((plan.cost(), plan))
}
