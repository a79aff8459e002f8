//! Exact earth mover's distance between two point sets under uniform
//! weights, solved with the transportation simplex. Intended for desk-scale
//! inputs (up to a few thousand points per side).

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmdError {
    #[error("point sets must be non-empty")]
    Empty,
    #[error("point dimensionality differs: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("transportation simplex failed to converge")]
    NoConvergence,
}

#[derive(Clone, Copy, Debug)]
struct Arc {
    source: usize,
    sink: usize,
    flow: i64,
}

/// Exact optimal-transport cost between rows of `a` and rows of `b`, both
/// uniformly weighted (1/n and 1/m). Deterministic: no internal randomness
/// or thread-dependent ordering.
pub fn emd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, EmdError> {
    let n = a.nrows();
    let m = b.nrows();
    if n == 0 || m == 0 {
        return Err(EmdError::Empty);
    }
    if a.ncols() != b.ncols() {
        return Err(EmdError::DimMismatch(a.ncols(), b.ncols()));
    }
    let dim = a.ncols();

    let mut cost = vec![0.0f64; n * m];
    let mut max_cost: f64 = 0.0;
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for c in 0..dim {
                let d = a[(i, c)] - b[(j, c)];
                acc += d * d;
            }
            let d = acc.sqrt();
            cost[i * m + j] = d;
            max_cost = max_cost.max(d);
        }
    }
    let tol = 1e-11 * (1.0 + max_cost);

    // Integer masses: source i supplies m units, sink j demands n units;
    // one unit is 1/(n*m) of the total mass.
    let mut basis: Vec<Arc> = Vec::with_capacity(n + m - 1);
    {
        let mut supply = vec![m as i64; n];
        let mut demand = vec![n as i64; m];
        let (mut i, mut j) = (0usize, 0usize);
        while i < n && j < m {
            let f = supply[i].min(demand[j]);
            basis.push(Arc {
                source: i,
                sink: j,
                flow: f,
            });
            supply[i] -= f;
            demand[j] -= f;
            if supply[i] == 0 && i < n - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        debug_assert_eq!(basis.len(), n + m - 1);
    }

    let nodes = n + m;
    let max_iters = (n * m * 4).max(20_000);
    let bland_after = 10 * (n + m).max(100);

    for iteration in 0..max_iters {
        // Adjacency of the basis tree; sinks are nodes n..n+m.
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
        for (idx, arc) in basis.iter().enumerate() {
            adj[arc.source].push((n + arc.sink, idx));
            adj[n + arc.sink].push((arc.source, idx));
        }

        // Duals from the tree: u[source] + v[sink] = cost on basis arcs.
        let mut potential = vec![f64::NAN; nodes];
        potential[0] = 0.0;
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            for &(next, arc_idx) in &adj[node] {
                if potential[next].is_nan() {
                    let arc = basis[arc_idx];
                    let c = cost[arc.source * m + arc.sink];
                    potential[next] = c - potential[node];
                    stack.push(next);
                }
            }
        }

        // Entering arc: most negative reduced cost, or Bland's rule once the
        // iteration count suggests degenerate stalling.
        let mut entering: Option<(usize, usize)> = None;
        let mut best = -tol;
        'scan: for i in 0..n {
            for j in 0..m {
                let reduced = cost[i * m + j] - potential[i] - potential[n + j];
                if reduced < best {
                    entering = Some((i, j));
                    if iteration >= bland_after {
                        break 'scan;
                    }
                    best = reduced;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            let total: f64 = basis
                .iter()
                .map(|arc| arc.flow as f64 * cost[arc.source * m + arc.sink])
                .sum();
            return Ok(total / (n as f64 * m as f64));
        };

        // Cycle: tree path from source ei to sink node n+ej.
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; nodes];
        let mut seen = vec![false; nodes];
        seen[ei] = true;
        let mut queue = std::collections::VecDeque::from([ei]);
        while let Some(node) = queue.pop_front() {
            if node == n + ej {
                break;
            }
            for &(next, arc_idx) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, arc_idx));
                    queue.push_back(next);
                }
            }
        }
        let mut path_arcs = Vec::new();
        let mut node = n + ej;
        while let Some((prev, arc_idx)) = parent[node] {
            path_arcs.push(arc_idx);
            node = prev;
        }
        path_arcs.reverse();

        // Signs alternate around the cycle; the arc touching the entering
        // sink takes -theta, working backwards from the end of the path.
        let len = path_arcs.len();
        let sign = |p: usize| -> i64 {
            if (len - 1 - p) % 2 == 0 {
                -1
            } else {
                1
            }
        };
        let mut theta = i64::MAX;
        for (p, &arc_idx) in path_arcs.iter().enumerate() {
            if sign(p) < 0 {
                theta = theta.min(basis[arc_idx].flow);
            }
        }

        let mut leaving: Option<usize> = None;
        for (p, &arc_idx) in path_arcs.iter().enumerate() {
            let s = sign(p);
            basis[arc_idx].flow += s * theta;
            if s < 0 && basis[arc_idx].flow == 0 && leaving.is_none() {
                leaving = Some(arc_idx);
            }
        }
        let leaving = leaving.expect("a minimum arc always empties");
        basis[leaving] = Arc {
            source: ei,
            sink: ej,
            flow: theta,
        };
    }
    Err(EmdError::NoConvergence)
}
