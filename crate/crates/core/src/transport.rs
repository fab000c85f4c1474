//! Discrete optimal transport between two weighted copies of one ensemble.
//!
//! The coupling `t[i][j]` moves mass from prior member `j` (column marginal)
//! to posterior member `i` (row marginal). It is computed with a
//! transportation simplex on the bipartite `M x M` structure: a spanning-tree
//! basis of `2M - 1` cells, node potentials for the reduced costs, and cycle
//! pivots. Entering cells are picked by most negative reduced cost with the
//! lowest `(i, j)` winning ties; after a run of degenerate pivots the solver
//! switches to Bland's smallest-index rule until the objective moves again.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::ensemble_transform::{stable_sum, Ensemble};
use crate::error::{Error, Result};

/// Tolerance on each marginal summing to one.
pub const MARGINAL_SUM_TOL: f64 = 1e-12;
/// Maximum allowed difference between the row and column masses.
pub const FEASIBILITY_TOL: f64 = 1e-10;
/// Basic cells below this mass are degenerate but remain in the basis.
pub const DEGENERATE_TOL: f64 = 1e-14;
/// Relative threshold separating support from pivot dust.
pub const SUPPORT_REL_TOL: f64 = 1e-12;
/// Reduced costs above `-REDUCED_COST_TOL * max|c|` count as optimal.
const REDUCED_COST_TOL: f64 = 1e-12;

/// Pairwise squared Euclidean distances between ensemble members.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: DMatrix<f64>,
}

impl CostMatrix {
    /// Wraps an arbitrary square cost matrix with finite, nonnegative entries.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.nrows() != entries.ncols() {
            return Err(Error::InvalidInput(format!(
                "cost matrix must be square and nonempty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidInput(
                "cost entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Multiplies every entry by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "scale factor must be positive, got {factor}"
            )));
        }
        Self::new(&self.entries * factor)
    }
}

/// `entries[i][j] = |x_i - x_j|^2` over all state components.
pub fn cost_matrix(ensemble: &Ensemble) -> Result<CostMatrix> {
    let states = ensemble.states();
    if states.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(
            "ensemble has non-finite entries".into(),
        ));
    }
    let m = states.ncols();
    let mut entries = DMatrix::zeros(m, m);
    for j in 0..m {
        for i in 0..j {
            let d = (states.column(i) - states.column(j)).norm_squared();
            entries[(i, j)] = d;
            entries[(j, i)] = d;
        }
    }
    CostMatrix::new(entries)
}

/// Row (posterior) and column (prior) probability vectors of a coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPair {
    row: DVector<f64>,
    col: DVector<f64>,
}

impl MarginalPair {
    pub fn new(row: DVector<f64>, col: DVector<f64>) -> Result<Self> {
        if row.is_empty() || row.len() != col.len() {
            return Err(Error::InvalidInput(format!(
                "marginals must be nonempty with equal length, got {} and {}",
                row.len(),
                col.len()
            )));
        }
        if row
            .iter()
            .chain(col.iter())
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::InvalidInput(
                "marginal entries must be finite and nonnegative".into(),
            ));
        }
        let (row_mass, col_mass) = (stable_sum(row.iter()), stable_sum(col.iter()));
        if (row_mass - col_mass).abs() > FEASIBILITY_TOL {
            return Err(Error::Infeasible {
                row: row_mass,
                col: col_mass,
            });
        }
        if (row_mass - 1.0).abs() > MARGINAL_SUM_TOL || (col_mass - 1.0).abs() > MARGINAL_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "marginals must sum to one, got {row_mass} and {col_mass}"
            )));
        }
        Ok(Self { row, col })
    }

    /// Posterior weights on the rows, uniform `1/M` on the columns.
    pub fn uniform_prior(row: DVector<f64>) -> Result<Self> {
        let m = row.len();
        Self::new(row, DVector::from_element(m, 1.0 / m as f64))
    }

    pub fn row(&self) -> &DVector<f64> {
        &self.row
    }

    pub fn col(&self) -> &DVector<f64> {
        &self.col
    }

    pub fn len(&self) -> usize {
        self.row.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row.is_empty()
    }
}

/// Optimal coupling returned by [`solve_transport`].
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    t: DMatrix<f64>,
    objective: f64,
    support: Vec<(usize, usize)>,
    pivots: usize,
}

impl Coupling {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    /// Achieved expected cost `sum t_ij c_ij`.
    pub fn objective(&self) -> f64 {
        self.objective
    }

    /// Nonzero cells in lexicographic order.
    pub fn support(&self) -> &[(usize, usize)] {
        &self.support
    }

    /// Number of simplex pivots the solve took.
    pub fn pivots(&self) -> usize {
        self.pivots
    }

    pub fn size(&self) -> usize {
        self.t.nrows()
    }
}

/// Column-stochastic Markov matrix induced by a coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    p: DMatrix<f64>,
}

impl TransitionMatrix {
    /// Wraps a square matrix after checking it is nonnegative and column-stochastic.
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        if p.nrows() == 0 || p.nrows() != p.ncols() {
            return Err(Error::InvalidInput(format!(
                "transition matrix must be square and nonempty, got {}x{}",
                p.nrows(),
                p.ncols()
            )));
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidInput(
                "transition entries must be finite and nonnegative".into(),
            ));
        }
        for (j, col) in p.column_iter().enumerate() {
            let s = col.sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidInput(format!(
                    "transition column {j} sums to {s}, expected 1"
                )));
            }
        }
        Ok(Self { p })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            p: DMatrix::identity(m, m),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn size(&self) -> usize {
        self.p.nrows()
    }
}

/// `p[i][j] = t[i][j] / col[j]`.
///
/// A column with zero marginal and no mass maps its member onto itself.
pub fn transition_from_coupling(
    coupling: &Coupling,
    col_marginal: &DVector<f64>,
) -> Result<TransitionMatrix> {
    let t = coupling.matrix();
    let m = t.nrows();
    if col_marginal.len() != m {
        return Err(Error::InvalidInput(format!(
            "column marginal has length {}, coupling is {m}x{m}",
            col_marginal.len()
        )));
    }
    let mut p = DMatrix::zeros(m, m);
    for j in 0..m {
        let w = col_marginal[j];
        let mass = t.column(j).sum();
        if w > 0.0 {
            for i in 0..m {
                p[(i, j)] = t[(i, j)] / w;
            }
        } else if mass > FEASIBILITY_TOL {
            return Err(Error::DegenerateColumn { column: j, mass });
        } else {
            p[(j, j)] = 1.0;
        }
    }
    TransitionMatrix::new(p)
}

/// Outcome of a cyclical monotonicity check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityReport {
    pub monotone: bool,
    /// Largest cycle sum found; `-inf` when no cycles were checked.
    pub worst: f64,
}

/// Checks `<a_1, f_2 - f_1> + ... + <a_k, f_1 - f_k> <= tol` for every cycle,
/// where `pairs[c] = (f_c, a_c)` are (prior, posterior) points.
pub fn check_cyclical_monotonicity(
    pairs: &[(DVector<f64>, DVector<f64>)],
    cycles: &[Vec<usize>],
    tol: f64,
) -> Result<MonotonicityReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no support pairs given".into()));
    }
    let dim = pairs[0].0.len();
    if pairs.iter().any(|(f, a)| f.len() != dim || a.len() != dim) {
        return Err(Error::InvalidInput(
            "support pairs have mismatched dimensions".into(),
        ));
    }
    let mut worst = f64::NEG_INFINITY;
    for cycle in cycles {
        if cycle.len() < 2 {
            return Err(Error::InvalidInput(
                "cycles need at least two entries".into(),
            ));
        }
        if let Some(&bad) = cycle.iter().find(|&&c| c >= pairs.len()) {
            return Err(Error::InvalidInput(format!(
                "cycle index {bad} out of range for {} pairs",
                pairs.len()
            )));
        }
        let k = cycle.len();
        let sum: f64 = (0..k)
            .map(|s| {
                let (f_cur, a_cur) = &pairs[cycle[s]];
                let f_next = &pairs[cycle[(s + 1) % k]].0;
                a_cur.dot(&(f_next - f_cur))
            })
            .sum();
        worst = worst.max(sum);
    }
    Ok(MonotonicityReport {
        monotone: worst <= tol,
        worst,
    })
}

/// (prior, posterior) point pairs for every support cell `(i, j)`,
/// i.e. `(x_j, x_i)` with `x` the columns of `points`.
pub fn support_pairs(
    coupling: &Coupling,
    points: &DMatrix<f64>,
) -> Vec<(DVector<f64>, DVector<f64>)> {
    coupling
        .support()
        .iter()
        .map(|&(i, j)| (points.column(j).into_owned(), points.column(i).into_owned()))
        .collect()
}

/// All ordered 2-cycles `(a, b)` with `a < b`.
pub fn two_cycles(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| vec![a, b]))
        .collect()
}

/// `count` cycles of length `len` with indices drawn uniformly from `0..n`.
pub fn random_cycles<R: Rng + ?Sized>(
    n: usize,
    len: usize,
    count: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    (0..count)
        .map(|_| (0..len).map(|_| rng.random_range(0..n)).collect())
        .collect()
}

/// Sorted support of a coupling and its size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportPattern {
    pub entries: Vec<(usize, usize)>,
    pub count: usize,
}

pub fn support_pattern(coupling: &Coupling) -> SupportPattern {
    let entries = coupling.support().to_vec();
    SupportPattern {
        count: entries.len(),
        entries,
    }
}

/// Minimizes `sum t_ij c_ij` over couplings with the given marginals.
pub fn solve_transport(cost: &CostMatrix, marginals: &MarginalPair) -> Result<Coupling> {
    let m = cost.size();
    if marginals.len() != m {
        return Err(Error::InvalidInput(format!(
            "marginals have length {}, cost matrix is {m}x{m}",
            marginals.len()
        )));
    }
    let c = cost.entries();
    let mut tree = SpanningTree::northwest_corner(marginals.row(), marginals.col());
    let pivots = tree.optimize(c, 100 * m * m)?;

    let mut t = DMatrix::zeros(m, m);
    for (&(i, j), &x) in tree.cells.iter().zip(&tree.flow) {
        t[(i, j)] = x;
    }
    let objective = t.component_mul(c).sum();
    let threshold = SUPPORT_REL_TOL * marginals.row().max();
    let mut support: Vec<(usize, usize)> = tree
        .cells
        .iter()
        .zip(&tree.flow)
        .filter(|(_, &x)| x > threshold)
        .map(|(&cell, _)| cell)
        .collect();
    support.sort_unstable();
    Ok(Coupling {
        t,
        objective,
        support,
        pivots,
    })
}

/// Basis of the transportation simplex: `rows + cols - 1` cells forming a
/// spanning tree of the bipartite row/column graph.
struct SpanningTree {
    rows: usize,
    cols: usize,
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
    row_adj: Vec<Vec<usize>>,
    col_adj: Vec<Vec<usize>>,
    basic: Vec<bool>,
}

impl SpanningTree {
    fn northwest_corner(row: &DVector<f64>, col: &DVector<f64>) -> Self {
        let (rows, cols) = (row.len(), col.len());
        let mut tree = SpanningTree {
            rows,
            cols,
            cells: Vec::with_capacity(rows + cols - 1),
            flow: Vec::with_capacity(rows + cols - 1),
            row_adj: vec![Vec::new(); rows],
            col_adj: vec![Vec::new(); cols],
            basic: vec![false; rows * cols],
        };
        let mut supply = row.clone();
        let mut demand = col.clone();
        let (mut i, mut j) = (0, 0);
        loop {
            let x = supply[i].min(demand[j]).max(0.0);
            supply[i] -= x;
            demand[j] -= x;
            tree.push(i, j, x);
            if i + 1 == rows && j + 1 == cols {
                break;
            }
            if j + 1 == cols || (i + 1 < rows && supply[i] <= demand[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        tree
    }

    fn push(&mut self, i: usize, j: usize, x: f64) {
        let idx = self.cells.len();
        self.cells.push((i, j));
        self.flow.push(x);
        self.row_adj[i].push(idx);
        self.col_adj[j].push(idx);
        self.basic[i * self.cols + j] = true;
    }

    /// Dual potentials with `u_i + v_j = c_ij` on every basic cell, `u_0 = 0`.
    fn potentials(&self, c: &DMatrix<f64>, u: &mut [f64], v: &mut [f64]) {
        let mut row_seen = vec![false; self.rows];
        let mut col_seen = vec![false; self.cols];
        // Nodes: rows are 0..rows, columns are rows..rows+cols.
        let mut stack = vec![0usize];
        u[0] = 0.0;
        row_seen[0] = true;
        while let Some(node) = stack.pop() {
            if node < self.rows {
                let i = node;
                for &idx in &self.row_adj[i] {
                    let j = self.cells[idx].1;
                    if !col_seen[j] {
                        col_seen[j] = true;
                        v[j] = c[(i, j)] - u[i];
                        stack.push(self.rows + j);
                    }
                }
            } else {
                let j = node - self.rows;
                for &idx in &self.col_adj[j] {
                    let i = self.cells[idx].0;
                    if !row_seen[i] {
                        row_seen[i] = true;
                        u[i] = c[(i, j)] - v[j];
                        stack.push(i);
                    }
                }
            }
        }
    }

    /// Basic cells on the tree path from column `j` back to row `i`, in order.
    /// Signs alternate starting with `-` at the cell touching column `j`.
    fn cycle_path(&self, i: usize, j: usize) -> Vec<usize> {
        let n = self.rows + self.cols;
        let mut parent_cell = vec![usize::MAX; n];
        let mut seen = vec![false; n];
        let target = self.rows + j;
        let mut stack = vec![i];
        seen[i] = true;
        while let Some(node) = stack.pop() {
            if node == target {
                break;
            }
            let (adj, is_row) = if node < self.rows {
                (&self.row_adj[node], true)
            } else {
                (&self.col_adj[node - self.rows], false)
            };
            for &idx in adj {
                let (ci, cj) = self.cells[idx];
                let next = if is_row { self.rows + cj } else { ci };
                if !seen[next] {
                    seen[next] = true;
                    parent_cell[next] = idx;
                    stack.push(next);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = target;
        while node != i {
            let idx = parent_cell[node];
            path.push(idx);
            let (ci, cj) = self.cells[idx];
            node = if node < self.rows { self.rows + cj } else { ci };
        }
        path
    }

    fn optimize(&mut self, c: &DMatrix<f64>, max_pivots: usize) -> Result<usize> {
        let scale = c
            .iter()
            .fold(0.0f64, |a, &b| a.max(b.abs()))
            .max(f64::MIN_POSITIVE);
        let tol = REDUCED_COST_TOL * scale;
        let mut u = vec![0.0; self.rows];
        let mut v = vec![0.0; self.cols];
        let mut pivots = 0;
        let mut degenerate_run = 0;
        let stall_limit = self.rows + self.cols;
        loop {
            self.potentials(c, &mut u, &mut v);
            let bland = degenerate_run > stall_limit;
            let Some((ei, ej)) = self.entering(c, &u, &v, tol, bland) else {
                return Ok(pivots);
            };
            if pivots == max_pivots {
                return Err(Error::PivotLimit(max_pivots));
            }
            pivots += 1;

            let path = self.cycle_path(ei, ej);
            // Lowest flow among the `-` cells leaves; ties go to the smallest cell index.
            let mut leave = usize::MAX;
            let mut theta = f64::INFINITY;
            for &idx in path.iter().step_by(2) {
                let x = self.flow[idx];
                let better = x < theta
                    || (x == theta
                        && self.linear(self.cells[idx]) < self.linear(self.cells[leave]));
                if better {
                    theta = x;
                    leave = idx;
                }
            }
            for (k, &idx) in path.iter().enumerate() {
                if k % 2 == 0 {
                    self.flow[idx] -= theta;
                } else {
                    self.flow[idx] += theta;
                }
            }
            if theta < DEGENERATE_TOL {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.replace(leave, ei, ej, theta);
        }
    }

    fn linear(&self, (i, j): (usize, usize)) -> usize {
        i * self.cols + j
    }

    fn entering(
        &self,
        c: &DMatrix<f64>,
        u: &[f64],
        v: &[f64],
        tol: f64,
        bland: bool,
    ) -> Option<(usize, usize)> {
        let mut best = None;
        let mut best_d = -tol;
        for i in 0..self.rows {
            for j in 0..self.cols {
                if self.basic[i * self.cols + j] {
                    continue;
                }
                let d = c[(i, j)] - u[i] - v[j];
                if d < best_d {
                    if bland {
                        return Some((i, j));
                    }
                    best_d = d;
                    best = Some((i, j));
                }
            }
        }
        best
    }

    fn replace(&mut self, leave: usize, i: usize, j: usize, x: f64) {
        let (li, lj) = self.cells[leave];
        self.row_adj[li].retain(|&idx| idx != leave);
        self.col_adj[lj].retain(|&idx| idx != leave);
        self.basic[li * self.cols + lj] = false;
        self.cells[leave] = (i, j);
        self.flow[leave] = x;
        self.row_adj[i].push(leave);
        self.col_adj[j].push(leave);
        self.basic[i * self.cols + j] = true;
    }
}
