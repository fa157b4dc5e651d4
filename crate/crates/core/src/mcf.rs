//! Exact integer inference by successive shortest paths.
//!
//! The residual network has a source `S`, a sink `T` and two nodes per
//! detection joined by the detection arc. All arcs have unit capacity, so
//! every augmentation routes one trajectory. Node potentials start from a
//! label-correcting pass (costs may be negative) and keep reduced costs
//! non-negative for Dijkstra afterwards. Augmentation stops as soon as the
//! cheapest `S → T` path has non-negative true cost, which leaves the number
//! of trajectories to the costs.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use nalgebra::DVector;

use crate::detections::{Detection, Trajectory, TrajectorySet};
use crate::graph::FlowGraph;
use crate::{Error, Result};

/// A {0,1} flow with its objective `cᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerSolution {
    pub x: DVector<f64>,
    pub objective: f64,
}

impl IntegerSolution {
    pub fn track_count(&self, graph: &FlowGraph) -> usize {
        (0..graph.detection_count())
            .filter(|&i| self.x[graph.in_var(i)] == 1.0)
            .count()
    }
}

/// `cᵀx` summed in variable order.
pub fn objective(costs: &DVector<f64>, x: &DVector<f64>) -> f64 {
    costs.iter().zip(x.iter()).map(|(c, x)| c * x).sum()
}

#[derive(Debug, Clone)]
struct Arc {
    to: usize,
    residual: u8,
    cost: f64,
    rev: usize,
}

struct Residual {
    adj: Vec<Vec<usize>>,
    arcs: Vec<Arc>,
}

impl Residual {
    fn new(nodes: usize) -> Self {
        Self {
            adj: vec![Vec::new(); nodes],
            arcs: Vec::new(),
        }
    }

    fn add(&mut self, from: usize, to: usize, cost: f64) -> usize {
        let e = self.arcs.len();
        self.arcs.push(Arc {
            to,
            residual: 1,
            cost,
            rev: e + 1,
        });
        self.arcs.push(Arc {
            to: from,
            residual: 0,
            cost: -cost,
            rev: e,
        });
        self.adj[from].push(e);
        self.adj[to].push(e + 1);
        e
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance, then node index.
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

const SOURCE: usize = 0;
const SINK: usize = 1;

fn entry_node(i: usize) -> usize {
    2 + 2 * i
}

fn exit_node(i: usize) -> usize {
    3 + 2 * i
}

/// Bellman-Ford style label correction over residual arcs. Returns `None`
/// if a negative cycle is reachable from `from`.
fn label_correcting(net: &Residual, from: usize) -> Option<Vec<f64>> {
    let n = net.adj.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut queued = vec![false; n];
    let mut pushes = vec![0usize; n];
    let mut queue = VecDeque::new();
    dist[from] = 0.0;
    queue.push_back(from);
    queued[from] = true;
    while let Some(u) = queue.pop_front() {
        queued[u] = false;
        for &e in &net.adj[u] {
            let arc = &net.arcs[e];
            if arc.residual == 0 {
                continue;
            }
            let nd = dist[u] + arc.cost;
            if nd < dist[arc.to] {
                dist[arc.to] = nd;
                if !queued[arc.to] {
                    pushes[arc.to] += 1;
                    if pushes[arc.to] > n {
                        return None;
                    }
                    queued[arc.to] = true;
                    queue.push_back(arc.to);
                }
            }
        }
    }
    Some(dist)
}

fn dijkstra(net: &Residual, potential: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = net.adj.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[SOURCE] = 0.0;
    heap.push(Entry(0.0, SOURCE));
    while let Some(Entry(d, u)) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for &e in &net.adj[u] {
            let arc = &net.arcs[e];
            if arc.residual == 0 || done[arc.to] {
                continue;
            }
            let reduced = (arc.cost + potential[u] - potential[arc.to]).max(0.0);
            let nd = d + reduced;
            if nd < dist[arc.to] {
                dist[arc.to] = nd;
                parent[arc.to] = e;
                heap.push(Entry(nd, arc.to));
            }
        }
    }
    (dist, parent)
}

fn residual_network(graph: &FlowGraph, costs: &DVector<f64>) -> (Residual, Vec<usize>) {
    let n = graph.detection_count();
    let mut net = Residual::new(2 * n + 2);
    let mut arc_of_var = vec![0usize; graph.variable_count()];
    for i in 0..n {
        arc_of_var[graph.in_var(i)] = net.add(SOURCE, entry_node(i), costs[graph.in_var(i)]);
        arc_of_var[graph.det_var(i)] =
            net.add(entry_node(i), exit_node(i), costs[graph.det_var(i)]);
        arc_of_var[graph.out_var(i)] = net.add(exit_node(i), SINK, costs[graph.out_var(i)]);
    }
    for (k, &(i, j)) in graph.links().iter().enumerate() {
        arc_of_var[graph.link_var(k)] =
            net.add(exit_node(i), entry_node(j), costs[graph.link_var(k)]);
    }
    (net, arc_of_var)
}

/// Cheapest ways to change a {0,1} flow by one unit, found by label
/// correction on its residual network. A flow is optimal exactly when no
/// residual cycle is negative and neither value is negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    /// Cost of the cheapest `S → T` path (adding a trajectory), if any.
    pub cheapest_addition: Option<f64>,
    /// Cost of the cheapest `T → S` path (removing a trajectory), if any.
    pub cheapest_removal: Option<f64>,
}

impl Certificate {
    pub fn is_optimal(&self, tolerance: f64) -> bool {
        self.cheapest_addition.is_none_or(|c| c >= -tolerance)
            && self.cheapest_removal.is_none_or(|c| c >= -tolerance)
    }
}

/// Checks a flow for optimality. Fails if the flow is not a {0,1} vector of
/// the right length or if its residual network holds a negative cycle.
pub fn optimality_certificate(
    graph: &FlowGraph,
    costs: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<Certificate> {
    let m = graph.variable_count();
    if costs.len() != m || x.len() != m {
        return Err(Error::Shape {
            expected: m,
            actual: costs.len().min(x.len()),
            context: "certificate inputs",
        });
    }
    if let Some(k) = x.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput(format!(
            "flow variable {k} is not binary"
        )));
    }
    let (mut net, arc_of_var) = residual_network(graph, costs);
    for k in 0..m {
        if x[k] == 1.0 {
            let e = arc_of_var[k];
            let rev = net.arcs[e].rev;
            net.arcs[e].residual = 0;
            net.arcs[rev].residual = 1;
        }
    }
    let negative_cycle = || Error::InvalidInput("residual network has a negative cycle".into());
    let from_source = label_correcting(&net, SOURCE).ok_or_else(negative_cycle)?;
    let from_sink = label_correcting(&net, SINK).ok_or_else(negative_cycle)?;
    let finite = |d: f64| d.is_finite().then_some(d);
    Ok(Certificate {
        cheapest_addition: finite(from_source[SINK]),
        cheapest_removal: finite(from_sink[SOURCE]),
    })
}

/// Solves the min-cost flow exactly and returns the optimal {0,1} flow.
pub fn solve_min_cost_flow(graph: &FlowGraph, costs: &DVector<f64>) -> Result<IntegerSolution> {
    let m = graph.variable_count();
    if costs.len() != m {
        return Err(Error::Shape {
            expected: m,
            actual: costs.len(),
            context: "cost vector",
        });
    }
    if let Some(k) = costs.iter().position(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(format!("cost {k} is not finite")));
    }

    let (mut net, arc_of_var) = residual_network(graph, costs);
    // The initial residual network is acyclic.
    let mut potential = label_correcting(&net, SOURCE).expect("acyclic network");
    for p in potential.iter_mut() {
        if !p.is_finite() {
            *p = 0.0;
        }
    }
    let n = graph.detection_count();

    // At most one unit can leave through each entry arc.
    for _ in 0..n {
        let (dist, parent) = dijkstra(&net, &potential);
        if !dist[SINK].is_finite() {
            break;
        }
        let mut path = Vec::new();
        let mut v = SINK;
        while v != SOURCE {
            let e = parent[v];
            path.push(e);
            v = net.arcs[net.arcs[e].rev].to;
        }
        let true_cost: f64 = path.iter().rev().map(|&e| net.arcs[e].cost).sum();
        if !(true_cost < 0.0) {
            break;
        }
        for &e in &path {
            let rev = net.arcs[e].rev;
            net.arcs[e].residual -= 1;
            net.arcs[rev].residual += 1;
        }
        let cap = dist[SINK];
        for (p, d) in potential.iter_mut().zip(dist.iter()) {
            *p += d.min(cap);
        }
    }

    let x = DVector::from_fn(m, |k, _| {
        // Forward arcs carry flow exactly when their residual is used up.
        if net.arcs[arc_of_var[k]].residual == 0 {
            1.0
        } else {
            0.0
        }
    });
    let objective = objective(costs, &x);
    Ok(IntegerSolution { x, objective })
}

/// Decodes each unit `S → T` path of a {0,1} flow into a trajectory. Ids are
/// assigned from 1 in discovery order (by first detection index).
pub fn extract_trajectories(
    graph: &FlowGraph,
    solution: &IntegerSolution,
    detections: &[Detection],
) -> Result<TrajectorySet> {
    let n = graph.detection_count();
    if detections.len() != n {
        return Err(Error::Shape {
            expected: n,
            actual: detections.len(),
            context: "detections for trajectory extraction",
        });
    }
    let x = &solution.x;
    if x.len() != graph.variable_count() {
        return Err(Error::Shape {
            expected: graph.variable_count(),
            actual: x.len(),
            context: "flow vector",
        });
    }
    if let Some(k) = x.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput(format!(
            "flow variable {k} is not binary"
        )));
    }
    let residual = graph.conservation_product(x);
    if let Some(row) = residual.iter().position(|&r| r != 0.0) {
        return Err(Error::Conservation { detection: row % n });
    }

    let mut trajectories = Vec::new();
    for start in 0..n {
        if x[graph.in_var(start)] != 1.0 {
            continue;
        }
        let mut path = Vec::new();
        let mut cur = start;
        loop {
            path.push(detections[cur]);
            if x[graph.out_var(cur)] == 1.0 {
                break;
            }
            let next = graph
                .outgoing(cur)
                .iter()
                .find(|&&k| x[graph.link_var(k)] == 1.0)
                .map(|&k| graph.links()[k].1)
                .ok_or(Error::Conservation { detection: cur })?;
            cur = next;
        }
        trajectories.push(Trajectory::new(trajectories.len() as u64 + 1, path)?);
    }
    Ok(TrajectorySet {
        sequence: String::new(),
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detections::BoundingBox;

    fn two_linked() -> (FlowGraph, DVector<f64>) {
        let g = FlowGraph::from_links(vec![0, 1], vec![(0, 1)], 1e-3).unwrap();
        // in0 in1 det0 det1 out0 out1 link
        let c = DVector::from_vec(vec![0.2, 0.2, -0.5, -0.5, 0.2, 0.2, 0.1]);
        (g, c)
    }

    #[test]
    fn positive_costs_give_empty_flow() {
        let (g, _) = two_linked();
        let c = DVector::from_element(g.variable_count(), 0.3);
        let sol = solve_min_cost_flow(&g, &c).unwrap();
        assert_eq!(sol.x.sum(), 0.0);
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn linked_pair_is_one_path() {
        let (g, c) = two_linked();
        let sol = solve_min_cost_flow(&g, &c).unwrap();
        assert_eq!(sol.x.as_slice(), &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        assert!((sol.objective - -0.5).abs() < 1e-15);

        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let dets = [Detection::new(0, b, 0.9), Detection::new(1, b, 0.9)];
        let tracks = extract_trajectories(&g, &sol, &dets).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks.trajectories[0].len(), 2);
    }

    #[test]
    fn isolated_detection_with_positive_path_stays_off() {
        let g = FlowGraph::from_links(vec![0], vec![], 1e-3).unwrap();
        let c = DVector::from_vec(vec![0.3, -0.5, 0.3]);
        let sol = solve_min_cost_flow(&g, &c).unwrap();
        assert_eq!(sol.x.sum(), 0.0);
    }

    #[test]
    fn non_finite_cost_rejected() {
        let (g, mut c) = two_linked();
        c[3] = f64::NAN;
        assert!(solve_min_cost_flow(&g, &c).is_err());
    }

    #[test]
    fn zero_flow_decodes_to_nothing() {
        let (g, _) = two_linked();
        let sol = IntegerSolution {
            x: DVector::zeros(7),
            objective: 0.0,
        };
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let dets = [Detection::new(0, b, 0.9), Detection::new(1, b, 0.9)];
        assert!(extract_trajectories(&g, &sol, &dets).unwrap().is_empty());
    }

    #[test]
    fn broken_conservation_rejected() {
        let (g, _) = two_linked();
        let sol = IntegerSolution {
            x: DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
            objective: 0.0,
        };
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let dets = [Detection::new(0, b, 0.9), Detection::new(1, b, 0.9)];
        assert!(matches!(
            extract_trajectories(&g, &sol, &dets),
            Err(Error::Conservation { .. })
        ));
    }

    #[test]
    fn two_disjoint_paths_get_distinct_ids() {
        let g = FlowGraph::from_links(vec![0, 0, 1, 1], vec![(0, 2), (1, 3)], 1e-3).unwrap();
        let mut c = DVector::from_element(g.variable_count(), 0.1);
        for i in 0..4 {
            c[g.det_var(i)] = -1.0;
        }
        let sol = solve_min_cost_flow(&g, &c).unwrap();
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let dets: Vec<_> = [0, 0, 1, 1]
            .iter()
            .map(|&f| Detection::new(f, b, 0.5))
            .collect();
        let tracks = extract_trajectories(&g, &sol, &dets).unwrap();
        assert_eq!(tracks.len(), 2);
        assert_ne!(tracks.trajectories[0].id, tracks.trajectories[1].id);
        assert_eq!(sol.track_count(&g), 2);
    }
}
