//! Communication graphs, consensus weights and time-varying schedules.
//!
//! Agents talk over an undirected graph. The consensus step mixes iterates
//! with a doubly stochastic matrix `W` whose support is the graph plus the
//! diagonal; the second largest singular value `σ₂(W)` measures how fast
//! disagreement contracts. For time-varying communication the schedule cycles
//! through a list of frames whose union over every `B` consecutive frames is
//! connected.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use thiserror::Error;

/// Row/column sum tolerance for weight matrices.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("graph must have at least one agent")]
    Empty,
    #[error("edge ({0}, {1}) is a self-loop")]
    SelfLoop(usize, usize),
    #[error("edge ({i}, {j}) references an agent outside 0..{n}")]
    IndexOutOfRange { i: usize, j: usize, n: usize },
    #[error("graph is disconnected ({components} components); σ₂ would equal 1")]
    Disconnected { components: usize },
    #[error("weight matrix is {rows}x{cols}, expected {n}x{n}")]
    Shape { rows: usize, cols: usize, n: usize },
    #[error("weight matrix invalid: {0}")]
    InvalidWeights(String),
    #[error("schedule has no frames")]
    EmptySchedule,
    #[error("schedule period must be positive")]
    ZeroPeriod,
    #[error("frame {frame} has {got} agents, expected {expected}")]
    FrameSize {
        frame: usize,
        got: usize,
        expected: usize,
    },
    #[error("window starting at frame {start} of length {period} has a disconnected union")]
    NotBConnected { start: usize, period: usize },
    #[error("got {got} weight matrices for {expected} frames")]
    WeightCount { got: usize, expected: usize },
}

/// Undirected simple graph on agents `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    /// Stored with `i < j`.
    edges: BTreeSet<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnectivityReport {
    pub connected: bool,
    pub components: usize,
}

impl Graph {
    pub fn new(
        n_agents: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        if n_agents == 0 {
            return Err(GraphError::Empty);
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= n_agents || j >= n_agents {
                return Err(GraphError::IndexOutOfRange { i, j, n: n_agents });
            }
            if i == j {
                return Err(GraphError::SelfLoop(i, j));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Self {
            n: n_agents,
            edges: set,
        })
    }

    /// Path `0 - 1 - ... - n-1`.
    pub fn line(n: usize) -> Result<Self, GraphError> {
        Self::new(n, (1..n).map(|i| (i - 1, i)))
    }

    pub fn ring(n: usize) -> Result<Self, GraphError> {
        let mut edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        if n > 2 {
            edges.push((n - 1, 0));
        }
        Self::new(n, edges)
    }

    pub fn complete(n: usize) -> Result<Self, GraphError> {
        Self::new(n, (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))))
    }

    /// Star centered on agent 0.
    pub fn star(n: usize) -> Result<Self, GraphError> {
        Self::new(n, (1..n).map(|i| (0, i)))
    }

    /// Erdős–Rényi `G(n, p)`.
    pub fn erdos_renyi<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        Self::new(n, edges)
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    /// Edge union of graphs on the same vertex set.
    pub fn union<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> Option<Graph> {
        let mut iter = graphs.into_iter();
        let first = iter.next()?;
        let mut out = first.clone();
        for g in iter {
            if g.n != out.n {
                return None;
            }
            out.edges.extend(g.edges.iter().copied());
        }
        Some(out)
    }

    /// Relabels agent `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        Graph {
            n: self.n,
            edges: self
                .edges
                .iter()
                .map(|&(i, j)| {
                    let (a, b) = (perm[i], perm[j]);
                    (a.min(b), a.max(b))
                })
                .collect(),
        }
    }
}

/// BFS component count.
pub fn validate_graph(g: &Graph) -> ConnectivityReport {
    let adj = g.adjacency();
    let mut seen = vec![false; g.n];
    let mut components = 0;
    for root in 0..g.n {
        if seen[root] {
            continue;
        }
        components += 1;
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    ConnectivityReport {
        connected: components == 1,
        components,
    }
}

/// Doubly stochastic consensus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    entries: DMatrix<f64>,
    symmetric: bool,
}

impl WeightMatrix {
    /// Accepts a user-supplied matrix after checking non-negativity, unit row
    /// and column sums and a positive diagonal. When `graph` is given the
    /// off-diagonal support must match its edge set exactly.
    pub fn from_matrix(entries: DMatrix<f64>, graph: Option<&Graph>) -> Result<Self, GraphError> {
        let n = entries.nrows();
        if n == 0 || entries.ncols() != n {
            return Err(GraphError::Shape {
                rows: n,
                cols: entries.ncols(),
                n: n.max(1),
            });
        }
        if let Some(g) = graph {
            if g.n_agents() != n {
                return Err(GraphError::Shape {
                    rows: n,
                    cols: n,
                    n: g.n_agents(),
                });
            }
        }
        for i in 0..n {
            for j in 0..n {
                let w = entries[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return Err(GraphError::InvalidWeights(format!(
                        "entry ({i}, {j}) = {w}"
                    )));
                }
                if i == j && w <= 0.0 {
                    return Err(GraphError::InvalidWeights(format!(
                        "diagonal entry {i} is not positive"
                    )));
                }
                if let Some(g) = graph {
                    if i != j && (w > 0.0) != g.has_edge(i, j) {
                        return Err(GraphError::InvalidWeights(format!(
                            "support of ({i}, {j}) does not match the graph"
                        )));
                    }
                }
            }
            let row: f64 = entries.row(i).iter().sum();
            let col: f64 = entries.column(i).iter().sum();
            if (row - 1.0).abs() > STOCHASTIC_TOL {
                return Err(GraphError::InvalidWeights(format!("row {i} sums to {row}")));
            }
            if (col - 1.0).abs() > STOCHASTIC_TOL {
                return Err(GraphError::InvalidWeights(format!(
                    "column {i} sums to {col}"
                )));
            }
        }
        let symmetric = (0..n).all(|i| (0..i).all(|j| entries[(i, j)] == entries[(j, i)]));
        Ok(Self { entries, symmetric })
    }

    pub fn n_agents(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Nonzero entries of row `i`, column-ascending.
    pub fn row_support(&self, i: usize) -> Vec<(usize, f64)> {
        (0..self.n_agents())
            .filter_map(|j| {
                let w = self.entries[(i, j)];
                (w != 0.0).then_some((j, w))
            })
            .collect()
    }

    /// `W'(perm[i], perm[j]) = W(i, j)`.
    pub fn permuted(&self, perm: &[usize]) -> WeightMatrix {
        let n = self.n_agents();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(perm[i], perm[j])] = self.entries[(i, j)];
            }
        }
        WeightMatrix {
            entries: out,
            symmetric: self.symmetric,
        }
    }
}

/// Lazy Metropolis weights for a connected graph:
/// `W(i,j) = 1 / (2 max(deg i, deg j))` on edges, remainder on the diagonal.
pub fn lazy_metropolis(g: &Graph) -> Result<WeightMatrix, GraphError> {
    let report = validate_graph(g);
    if !report.connected {
        return Err(GraphError::Disconnected {
            components: report.components,
        });
    }
    Ok(metropolis_frame(g))
}

/// Same construction without the connectivity requirement, for individual
/// frames of a time-varying schedule.
pub fn metropolis_frame(g: &Graph) -> WeightMatrix {
    let n = g.n_agents();
    let deg = g.degrees();
    let mut w = DMatrix::zeros(n, n);
    for (i, j) in g.edges() {
        let v = 1.0 / (2.0 * deg[i].max(deg[j]) as f64);
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    WeightMatrix {
        entries: w,
        symmetric: true,
    }
}

/// Second largest singular value of `W`.
///
/// Symmetric matrices go through a symmetric eigendecomposition (singular
/// values are the eigenvalue moduli); anything else through an SVD.
pub fn second_singular_value(w: &WeightMatrix) -> f64 {
    let n = w.n_agents();
    if n < 2 {
        return 0.0;
    }
    let mut values: Vec<f64> = if w.is_symmetric() {
        SymmetricEigen::new(w.matrix().clone())
            .eigenvalues
            .iter()
            .map(|l| l.abs())
            .collect()
    } else {
        w.matrix()
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .collect()
    };
    values.sort_by(|a, b| b.total_cmp(a));
    values[1].clamp(0.0, 1.0)
}

/// True iff every cyclic window of `period` consecutive frames has a
/// connected edge union.
pub fn validate_b_connectivity(frames: &[Graph], period: usize) -> bool {
    first_disconnected_window(frames, period).is_none()
}

fn first_disconnected_window(frames: &[Graph], period: usize) -> Option<usize> {
    let f = frames.len();
    if f == 0 || period == 0 {
        return Some(0);
    }
    (0..f).find(|&start| {
        let window = (0..period).map(|t| &frames[(start + t) % f]);
        match Graph::union(window) {
            Some(u) => !validate_graph(&u).connected,
            None => true,
        }
    })
}

/// Periodic sequence of communication graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSchedule {
    frames: Vec<Graph>,
    period: usize,
}

impl GraphSchedule {
    pub fn new(frames: Vec<Graph>, period: usize) -> Result<Self, GraphError> {
        if frames.is_empty() {
            return Err(GraphError::EmptySchedule);
        }
        if period == 0 {
            return Err(GraphError::ZeroPeriod);
        }
        let n = frames[0].n_agents();
        for (idx, g) in frames.iter().enumerate() {
            if g.n_agents() != n {
                return Err(GraphError::FrameSize {
                    frame: idx,
                    got: g.n_agents(),
                    expected: n,
                });
            }
        }
        if let Some(start) = first_disconnected_window(&frames, period) {
            return Err(GraphError::NotBConnected { start, period });
        }
        Ok(Self { frames, period })
    }

    pub fn frames(&self) -> &[Graph] {
        &self.frames
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn n_agents(&self) -> usize {
        self.frames[0].n_agents()
    }

    /// Graph active at iteration `k`.
    pub fn frame_at(&self, k: usize) -> &Graph {
        &self.frames[k % self.frames.len()]
    }

    /// Lazy Metropolis weights for each frame.
    pub fn weights(&self) -> Vec<WeightMatrix> {
        self.frames.iter().map(metropolis_frame).collect()
    }
}

/// `η = min{1 − 1/(2N³), min over windows of max σ₂(W_t) in the window}`,
/// with every cyclic window start taken as an alignment.
pub fn time_varying_eta(s: &GraphSchedule, weights: &[WeightMatrix]) -> Result<f64, GraphError> {
    if weights.len() != s.frames.len() {
        return Err(GraphError::WeightCount {
            got: weights.len(),
            expected: s.frames.len(),
        });
    }
    if let Some(start) = first_disconnected_window(&s.frames, s.period) {
        return Err(GraphError::NotBConnected {
            start,
            period: s.period,
        });
    }
    let n = s.n_agents() as f64;
    let sigmas: Vec<f64> = weights.iter().map(second_singular_value).collect();
    let f = sigmas.len();
    let best_window = (0..f)
        .map(|start| {
            (0..s.period)
                .map(|t| sigmas[(start + t) % f])
                .fold(0.0_f64, f64::max)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(best_window.min(1.0 - 1.0 / (2.0 * n * n * n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn path3() -> Graph {
        Graph::new(3, [(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn connectivity_examples() {
        assert!(validate_graph(&path3()).connected);
        let two = Graph::new(2, []).unwrap();
        assert_eq!(
            validate_graph(&two),
            ConnectivityReport {
                connected: false,
                components: 2
            }
        );
        assert!(validate_graph(&Graph::new(1, []).unwrap()).connected);
    }

    #[test]
    fn malformed_edges_rejected() {
        assert_eq!(
            Graph::new(3, [(0, 3)]),
            Err(GraphError::IndexOutOfRange { i: 0, j: 3, n: 3 })
        );
        assert_eq!(Graph::new(3, [(1, 1)]), Err(GraphError::SelfLoop(1, 1)));
        assert_eq!(Graph::new(0, []), Err(GraphError::Empty));
    }

    #[test]
    fn metropolis_two_nodes() {
        let w = lazy_metropolis(&Graph::line(2).unwrap()).unwrap();
        // both degrees are 1, so the edge weight is 1/2
        let expect = DMatrix::from_element(2, 2, 0.5);
        assert_eq!(w.matrix(), &expect);
    }

    #[test]
    fn metropolis_path_and_triangle() {
        let w = lazy_metropolis(&path3()).unwrap();
        let expect =
            DMatrix::from_row_slice(3, 3, &[0.75, 0.25, 0.0, 0.25, 0.5, 0.25, 0.0, 0.25, 0.75]);
        assert_eq!(w.matrix(), &expect);

        let k3 = lazy_metropolis(&Graph::complete(3).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(k3.get(i, j), if i == j { 0.5 } else { 0.25 });
            }
        }
    }

    #[test]
    fn metropolis_rejects_disconnected() {
        let g = Graph::new(3, [(0, 1)]).unwrap();
        assert_eq!(
            lazy_metropolis(&g),
            Err(GraphError::Disconnected { components: 2 })
        );
    }

    #[test]
    fn sigma2_examples() {
        let avg = WeightMatrix::from_matrix(DMatrix::from_element(2, 2, 0.5), None).unwrap();
        assert_abs_diff_eq!(second_singular_value(&avg), 0.0, epsilon = 1e-12);
        let w = lazy_metropolis(&path3()).unwrap();
        assert_abs_diff_eq!(second_singular_value(&w), 0.75, epsilon = 1e-10);
        let eye = WeightMatrix::from_matrix(DMatrix::identity(3, 3), None).unwrap();
        assert_abs_diff_eq!(second_singular_value(&eye), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn user_matrix_validation() {
        let bad = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]);
        assert!(matches!(
            WeightMatrix::from_matrix(bad, None),
            Err(GraphError::InvalidWeights(_))
        ));
        // support mismatch: (0,1) weighted but not an edge
        let g = Graph::new(2, []).unwrap();
        let w = DMatrix::from_element(2, 2, 0.5);
        assert!(WeightMatrix::from_matrix(w, Some(&g)).is_err());
        // non-symmetric doubly stochastic permutation mix
        let p = DMatrix::from_row_slice(3, 3, &[0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.5]);
        let w = WeightMatrix::from_matrix(p, None).unwrap();
        assert!(!w.is_symmetric());
        // singular values of 0.5(I + P) with P a 3-cycle: 1, 0.5, 0.5
        assert_abs_diff_eq!(second_singular_value(&w), 0.5, epsilon = 1e-10);
    }

    #[test]
    fn eta_examples() {
        let two = Graph::line(2).unwrap();
        let s = GraphSchedule::new(vec![two.clone()], 1).unwrap();
        // eigenvalues 1 and 3/4
        let w = WeightMatrix::from_matrix(
            DMatrix::from_row_slice(2, 2, &[0.875, 0.125, 0.125, 0.875]),
            Some(&two),
        )
        .unwrap();
        let eta = time_varying_eta(&s, &[w]).unwrap();
        assert_abs_diff_eq!(eta, 0.75, epsilon = 1e-12);

        let k3 = Graph::complete(3).unwrap();
        let avg =
            WeightMatrix::from_matrix(DMatrix::from_element(3, 3, 1.0 / 3.0), Some(&k3)).unwrap();
        let s = GraphSchedule::new(vec![k3.clone(), k3], 2).unwrap();
        let eta = time_varying_eta(&s, &[avg.clone(), avg]).unwrap();
        assert_abs_diff_eq!(eta, 0.0, epsilon = 1e-12);

        let single = Graph::new(1, []).unwrap();
        let s = GraphSchedule::new(vec![single], 1).unwrap();
        assert_eq!(time_varying_eta(&s, &s.weights()).unwrap(), 0.0);
    }

    #[test]
    fn eta_with_disconnected_frames_hits_floor() {
        let s = GraphSchedule::new(
            vec![
                Graph::new(3, [(0, 1)]).unwrap(),
                Graph::new(3, [(1, 2)]).unwrap(),
            ],
            2,
        )
        .unwrap();
        let eta = time_varying_eta(&s, &s.weights()).unwrap();
        assert_abs_diff_eq!(eta, 1.0 - 1.0 / 54.0, epsilon = 1e-12);
    }

    #[test]
    fn b_connectivity_examples() {
        let frames = vec![
            Graph::new(3, [(0, 1)]).unwrap(),
            Graph::new(3, [(1, 2)]).unwrap(),
        ];
        assert!(validate_b_connectivity(&frames, 2));
        assert!(!validate_b_connectivity(&frames, 1));
        assert!(validate_b_connectivity(&[path3()], 1));
        assert_eq!(
            GraphSchedule::new(frames, 1),
            Err(GraphError::NotBConnected {
                start: 0,
                period: 1
            })
        );
    }

    #[test]
    fn named_topologies() {
        assert_eq!(Graph::line(4).unwrap().n_edges(), 3);
        assert_eq!(Graph::ring(4).unwrap().n_edges(), 4);
        assert_eq!(Graph::ring(2).unwrap().n_edges(), 1);
        assert_eq!(Graph::complete(5).unwrap().n_edges(), 10);
        assert_eq!(Graph::star(5).unwrap().degrees()[0], 4);
    }
}
