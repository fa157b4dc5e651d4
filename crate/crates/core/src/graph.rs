//! The network-flow graph and its algebraic description.
//!
//! Every detection `i` owns three variables (birth `in`, existence `det`,
//! death `out`) and every admissible pair `(i, j)` one `link` variable. The
//! variable vector has the fixed layout
//!
//! ```text
//! [ in_0 .. in_{N-1} | det_0 .. det_{N-1} | out_0 .. out_{N-1} | link_0 .. link_{L-1} ]
//! ```
//!
//! so that cost vectors, flows and gradients line up across modules.
//! Conservation rows are `in_i + Σ_j link_ji − det_i = 0` (row `i`) and
//! `out_i + Σ_j link_ij − det_i = 0` (row `N + i`).

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::detections::{BoundingBox, Detection};
use crate::linalg;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    /// Links connect detections whose frame gap is in `1..max_gap`.
    pub max_gap: usize,
    /// Maximum center distance of a link, in mean box diagonals per frame of
    /// gap. `None` disables spatial pruning.
    pub prune_radius: Option<f64>,
    /// Flow placed on every link by [`interior_point`]; halved until the
    /// point is strictly interior.
    pub edge_epsilon: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            max_gap: 3,
            prune_radius: Some(2.0),
            edge_epsilon: 1e-3,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_gap < 1 {
            return Err(Error::InvalidInput("max_gap must be >= 1".into()));
        }
        if let Some(r) = self.prune_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidInput("prune_radius must be > 0".into()));
            }
        }
        if !(self.edge_epsilon > 0.0 && self.edge_epsilon < 0.5) {
            return Err(Error::InvalidInput(
                "edge_epsilon must be in (0, 0.5)".into(),
            ));
        }
        Ok(())
    }
}

/// Which kind of flow variable an index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    In(usize),
    Det(usize),
    Out(usize),
    Link(usize),
}

#[derive(Debug)]
pub struct FlowGraph {
    frames: Vec<usize>,
    links: Vec<(usize, usize)>,
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
    conservation: DMatrix<f64>,
    x0: DVector<f64>,
    edge_epsilon: f64,
    basis: OnceLock<std::result::Result<DMatrix<f64>, (usize, usize)>>,
    gram: OnceLock<Option<Cholesky<f64, Dyn>>>,
}

/// Builds the graph for `detections` (indices into the slice become
/// detection indices of the graph).
pub fn build_graph(detections: &[Detection], config: &GraphConfig) -> Result<FlowGraph> {
    config.validate()?;
    if detections.is_empty() {
        return Err(Error::InvalidInput(
            "cannot build a flow graph without detections".into(),
        ));
    }
    let mut links = Vec::new();
    for (i, a) in detections.iter().enumerate() {
        for (j, b) in detections.iter().enumerate() {
            if b.frame <= a.frame {
                continue;
            }
            let gap = b.frame - a.frame;
            if gap >= config.max_gap {
                continue;
            }
            if let Some(radius) = config.prune_radius {
                let (ax, ay) = a.bbox.center();
                let (bx, by) = b.bbox.center();
                let dist = (bx - ax).hypot(by - ay);
                let diag = 0.5 * (a.bbox.diagonal() + b.bbox.diagonal());
                if dist > radius * diag * gap as f64 {
                    continue;
                }
            }
            links.push((i, j));
        }
    }
    FlowGraph::from_links(
        detections.iter().map(|d| d.frame).collect(),
        links,
        config.edge_epsilon,
    )
}

impl FlowGraph {
    /// Graph over detections with the given frames and an explicit link list.
    /// Links must point strictly forward in time.
    pub fn from_links(
        frames: Vec<usize>,
        links: Vec<(usize, usize)>,
        edge_epsilon: f64,
    ) -> Result<Self> {
        let n = frames.len();
        if n == 0 {
            return Err(Error::InvalidInput(
                "cannot build a flow graph without detections".into(),
            ));
        }
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for (k, &(i, j)) in links.iter().enumerate() {
            if i >= n || j >= n || frames[i] >= frames[j] {
                return Err(Error::InvalidInput(format!(
                    "link ({i}, {j}) does not point forward in time"
                )));
            }
            outgoing[i].push(k);
            incoming[j].push(k);
        }
        let m = 3 * n + links.len();
        let mut c = DMatrix::zeros(2 * n, m);
        for i in 0..n {
            c[(i, i)] = 1.0;
            c[(i, n + i)] = -1.0;
            c[(n + i, 2 * n + i)] = 1.0;
            c[(n + i, n + i)] = -1.0;
        }
        for (k, &(i, j)) in links.iter().enumerate() {
            c[(j, 3 * n + k)] = 1.0;
            c[(n + i, 3 * n + k)] = 1.0;
        }

        let max_degree = incoming
            .iter()
            .chain(outgoing.iter())
            .map(Vec::len)
            .max()
            .unwrap_or(0);
        let mut eps = edge_epsilon;
        while eps * max_degree as f64 >= 0.5 {
            eps *= 0.5;
        }
        let mut graph = Self {
            frames,
            links,
            incoming,
            outgoing,
            conservation: c,
            x0: DVector::zeros(0),
            edge_epsilon: eps,
            basis: OnceLock::new(),
            gram: OnceLock::new(),
        };
        graph.x0 = interior_point(&graph, eps)?;
        Ok(graph)
    }

    /// Number of detections `N`.
    pub fn detection_count(&self) -> usize {
        self.frames.len()
    }

    /// Number of flow variables `M = 3N + |links|`.
    pub fn variable_count(&self) -> usize {
        3 * self.frames.len() + self.links.len()
    }

    pub fn links(&self) -> &[(usize, usize)] {
        &self.links
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    /// Link indices entering / leaving detection `i`.
    pub fn incoming(&self, i: usize) -> &[usize] {
        &self.incoming[i]
    }

    pub fn outgoing(&self, i: usize) -> &[usize] {
        &self.outgoing[i]
    }

    pub fn in_var(&self, i: usize) -> usize {
        i
    }

    pub fn det_var(&self, i: usize) -> usize {
        self.frames.len() + i
    }

    pub fn out_var(&self, i: usize) -> usize {
        2 * self.frames.len() + i
    }

    pub fn link_var(&self, k: usize) -> usize {
        3 * self.frames.len() + k
    }

    pub fn variable(&self, index: usize) -> Variable {
        let n = self.frames.len();
        match index / n.max(1) {
            _ if index >= 3 * n => Variable::Link(index - 3 * n),
            0 => Variable::In(index),
            1 => Variable::Det(index - n),
            _ => Variable::Out(index - 2 * n),
        }
    }

    /// Conservation matrix `C` (2N x M).
    pub fn conservation(&self) -> &DMatrix<f64> {
        &self.conservation
    }

    /// Box-constraint matrix `A = [I; -I]` (2M x M).
    pub fn box_matrix(&self) -> DMatrix<f64> {
        let m = self.variable_count();
        let mut a = DMatrix::zeros(2 * m, m);
        for k in 0..m {
            a[(k, k)] = 1.0;
            a[(m + k, k)] = -1.0;
        }
        a
    }

    /// Box-constraint bounds `b = [1; 0]` (length 2M).
    pub fn box_bounds(&self) -> DVector<f64> {
        let m = self.variable_count();
        DVector::from_fn(2 * m, |k, _| if k < m { 1.0 } else { 0.0 })
    }

    /// Strictly interior feasible point.
    pub fn interior(&self) -> &DVector<f64> {
        &self.x0
    }

    /// Link flow used by [`interior`](Self::interior) after automatic halving.
    pub fn edge_epsilon(&self) -> f64 {
        self.edge_epsilon
    }

    /// Orthonormal null-space basis `B` of `C` (M x (M - 2N)), computed on
    /// first use.
    pub fn null_basis(&self) -> Result<&DMatrix<f64>> {
        self.basis
            .get_or_init(|| {
                null_space_basis(&self.conservation).map_err(|e| match e {
                    Error::RankDeficient { rank, expected } => (rank, expected),
                    _ => (0, self.conservation.nrows()),
                })
            })
            .as_ref()
            .map_err(|&(rank, expected)| Error::RankDeficient { rank, expected })
    }

    /// Cholesky factor of `C Cᵀ`, used to project onto the null space
    /// without forming `B`.
    pub(crate) fn gram_factor(&self) -> Result<&Cholesky<f64, Dyn>> {
        self.gram
            .get_or_init(|| {
                let c = &self.conservation;
                Cholesky::new(c * c.transpose())
            })
            .as_ref()
            .ok_or(Error::NotPositiveDefinite("C Cᵀ"))
    }

    /// `C x`, evaluated from the sparse structure.
    pub fn conservation_product(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.frames.len();
        let mut r = DVector::zeros(2 * n);
        for i in 0..n {
            r[i] = x[i] - x[n + i];
            r[n + i] = x[2 * n + i] - x[n + i];
        }
        for (k, &(i, j)) in self.links.iter().enumerate() {
            let v = x[3 * n + k];
            r[j] += v;
            r[n + i] += v;
        }
        r
    }

    /// `Cᵀ y`, evaluated from the sparse structure.
    pub(crate) fn conservation_transpose_product(&self, y: &DVector<f64>) -> DVector<f64> {
        let n = self.frames.len();
        let mut r = DVector::zeros(self.variable_count());
        for i in 0..n {
            r[i] = y[i];
            r[n + i] = -y[i] - y[n + i];
            r[2 * n + i] = y[n + i];
        }
        for (k, &(i, j)) in self.links.iter().enumerate() {
            r[3 * n + k] = y[j] + y[n + i];
        }
        r
    }

    /// `‖C x‖_max`.
    pub fn conservation_residual(&self, x: &DVector<f64>) -> f64 {
        self.conservation_product(x).amax()
    }

    /// Length of the projection of `v` onto the null space of `C`; equals
    /// `‖Bᵀ v‖₂` for any orthonormal null-space basis `B`.
    pub fn projected_norm(&self, v: &DVector<f64>) -> Result<f64> {
        let chol = self.gram_factor()?;
        let y = chol.solve(&self.conservation_product(v));
        let p = v - self.conservation_transpose_product(&y);
        Ok(p.norm())
    }
}

/// Orthonormal basis of the null space of a full-row-rank matrix.
pub fn null_space_basis(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    linalg::null_space(c)
}

/// Strictly interior point with `det = 0.5`, every link at `edge_epsilon`
/// and `in`/`out` absorbing the difference.
pub fn interior_point(graph: &FlowGraph, edge_epsilon: f64) -> Result<DVector<f64>> {
    let n = graph.detection_count();
    let max_degree = (0..n)
        .map(|i| graph.incoming(i).len().max(graph.outgoing(i).len()))
        .max()
        .unwrap_or(0);
    if !(edge_epsilon > 0.0) || edge_epsilon * max_degree as f64 >= 0.5 {
        return Err(Error::InvalidInput(format!(
            "edge epsilon {edge_epsilon} too large for maximum degree {max_degree}; use a smaller value"
        )));
    }
    let mut x = DVector::zeros(graph.variable_count());
    for i in 0..n {
        x[graph.in_var(i)] = 0.5 - graph.incoming(i).len() as f64 * edge_epsilon;
        x[graph.det_var(i)] = 0.5;
        x[graph.out_var(i)] = 0.5 - graph.outgoing(i).len() as f64 * edge_epsilon;
    }
    for k in 0..graph.links().len() {
        x[graph.link_var(k)] = edge_epsilon;
    }
    Ok(x)
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.right().min(b.right()) - a.left.max(b.left)).max(0.0);
    let h = (a.bottom().min(b.bottom()) - a.top.max(b.top)).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}
