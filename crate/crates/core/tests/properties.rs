use std::collections::HashSet;

use flowtrack::backward::grad_costs;
use flowtrack::cost::{CostModelParams, HandcraftedB};
use flowtrack::detections::{
    generate_synthetic, parse_groundtruth, write_results, BoundingBox, Detection, DetectionSet,
    Format, SynthConfig, Trajectory, TrajectorySet,
};
use flowtrack::graph::{build_graph, FlowGraph, GraphConfig, Variable};
use flowtrack::mcf::{
    extract_trajectories, objective, optimality_certificate, solve_min_cost_flow,
};
use flowtrack::metrics::evaluate;
use flowtrack::smoothed::{solve_smoothed, NewtonOptions};
use flowtrack::tracking::{hungarian, track_sequence, OutputMode, WindowConfig};
use flowtrack::training::{
    generate_gt_flow, gt_loss, weighted_loss, LinkLabel, LossKind, LossWeights,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = (f64, f64, f64, f64)> {
    (0.0..600.0f64, 0.0..400.0f64, 5.0..120.0f64, 5.0..200.0f64)
}

/// Rounds to the six decimals the writers emit.
fn r6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn trajectory_sets() -> impl Strategy<Value = TrajectorySet> {
    prop::collection::vec(
        prop::collection::btree_map(0usize..40, (boxes(), 0.01..0.99f64), 1..8),
        0..6,
    )
    .prop_map(|tracks| {
        let trajectories = tracks
            .into_iter()
            .enumerate()
            .map(|(k, frames)| {
                let dets = frames
                    .into_iter()
                    .map(|(f, ((l, t, w, h), c))| {
                        Detection::new(
                            f,
                            BoundingBox::new(r6(l), r6(t), r6(w), r6(h)).unwrap(),
                            r6(c),
                        )
                    })
                    .collect();
                Trajectory::new(k as u64 + 1, dets).unwrap()
            })
            .collect();
        TrajectorySet::new("", trajectories).unwrap()
    })
}

/// Small graph: detection frames plus a subset of the forward links.
fn small_graphs(max_n: usize) -> impl Strategy<Value = FlowGraph> {
    (1..=max_n)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0usize..4, n),
                prop::collection::vec(any::<bool>(), n * n),
            )
        })
        .prop_map(|(mut frames, mask)| {
            frames.sort();
            let n = frames.len();
            let mut links = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if frames[i] < frames[j] && mask[i * n + j] {
                        links.push((i, j));
                    }
                }
            }
            FlowGraph::from_links(frames, links, 1e-3).unwrap()
        })
}

fn costs_for(graph: &FlowGraph, seed: &[f64]) -> DVector<f64> {
    DVector::from_fn(graph.variable_count(), |k, _| {
        seed[k % seed.len()] * (1.0 + 0.37 * k as f64).sin().signum()
    })
}

/// Every {0,1} vector satisfying conservation, by brute force.
fn feasible_flows(graph: &FlowGraph) -> Vec<DVector<f64>> {
    let m = graph.variable_count();
    (0u32..1 << m)
        .map(|bits| DVector::from_fn(m, |k, _| ((bits >> k) & 1) as f64))
        .filter(|x| graph.conservation_residual(x) == 0.0)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn mot_round_trip(set in trajectory_sets()) {
        let text = write_results(Format::Mot, &set);
        let back = parse_groundtruth(Format::Mot, &text).unwrap();
        prop_assert_eq!(back.trajectories, set.trajectories);
    }

    #[test]
    fn kitti_round_trip(set in trajectory_sets()) {
        let text = write_results(Format::Kitti, &set);
        let back = parse_groundtruth(Format::Kitti, &text).unwrap();
        prop_assert_eq!(back.len(), set.len());
        for (a, b) in back.trajectories.iter().zip(&set.trajectories) {
            prop_assert_eq!(a.id, b.id);
            for (da, db) in a.detections.iter().zip(&b.detections) {
                prop_assert_eq!(da.frame, db.frame);
                prop_assert!((da.bbox.left - db.bbox.left).abs() < 2e-6);
                prop_assert!((da.bbox.width - db.bbox.width).abs() < 2e-6);
                prop_assert!((da.bbox.height - db.bbox.height).abs() < 2e-6);
                prop_assert!((da.confidence - db.confidence).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn synthetic_generation_is_pure(seed in 0u64..1000) {
        let cfg = SynthConfig { frame_count: 15, ..SynthConfig::default() };
        prop_assert_eq!(generate_synthetic(&cfg, seed).unwrap(), generate_synthetic(&cfg, seed).unwrap());
    }

    #[test]
    fn conservation_structure(graph in small_graphs(7)) {
        let n = graph.detection_count();
        prop_assert_eq!(graph.variable_count(), 3 * n + graph.links().len());
        let c = graph.conservation();
        prop_assert_eq!(c.nrows(), 2 * n);
        for row in 0..2 * n {
            let i = row % n;
            for k in 0..graph.variable_count() {
                let expected = match graph.variable(k) {
                    Variable::In(d) if row < n && d == i => 1.0,
                    Variable::Out(d) if row >= n && d == i => 1.0,
                    Variable::Det(d) if d == i => -1.0,
                    Variable::Link(l) => {
                        let (a, b) = graph.links()[l];
                        if (row < n && b == i) || (row >= n && a == i) { 1.0 } else { 0.0 }
                    }
                    _ => 0.0,
                };
                prop_assert_eq!(c[(row, k)], expected);
            }
        }
        let x0 = graph.interior();
        prop_assert!(x0.iter().all(|v| *v > 0.0 && *v < 1.0));
        prop_assert!(graph.conservation_residual(x0) <= 1e-15);
    }

    #[test]
    fn null_basis_is_orthonormal_and_projector_unique(graph in small_graphs(7)) {
        let b = graph.null_basis().unwrap();
        let m = graph.variable_count();
        prop_assert_eq!(b.ncols(), m - 2 * graph.detection_count());
        let gram = b.transpose() * b - DMatrix::identity(b.ncols(), b.ncols());
        prop_assert!(gram.amax() <= 1e-10);
        prop_assert!((graph.conservation() * b).amax() <= 1e-10);
        // A second factorization of a column-permuted C spans the same space.
        let rebuilt = FlowGraph::from_links(graph.frames().to_vec(), graph.links().to_vec(), 1e-3).unwrap();
        let b2 = rebuilt.null_basis().unwrap();
        prop_assert!((b * b.transpose() - b2 * b2.transpose()).amax() <= 1e-8);
        let flipped = flowtrack::graph::null_space_basis(&(-graph.conservation())).unwrap();
        prop_assert!((b * b.transpose() - &flipped * flipped.transpose()).amax() <= 1e-8);
    }

    #[test]
    fn built_graph_links_respect_gap(
        dets in prop::collection::vec((0usize..8, boxes()), 1..25),
        max_gap in 2usize..5,
    ) {
        let mut dets: Vec<Detection> = dets
            .into_iter()
            .map(|(f, (l, t, w, h))| Detection::new(f, BoundingBox::new(l, t, w, h).unwrap(), 0.5))
            .collect();
        dets.sort_by_key(|d| d.frame);
        let cfg = GraphConfig { max_gap, ..GraphConfig::default() };
        let g = build_graph(&dets, &cfg).unwrap();
        for &(i, j) in g.links() {
            let gap = dets[j].frame - dets[i].frame;
            prop_assert!(gap > 0 && gap < max_gap);
        }
    }

    #[test]
    fn exact_solution_is_feasible_and_certified(
        graph in small_graphs(8),
        seed in prop::collection::vec(-1.0..1.0f64, 5..12),
    ) {
        let c = costs_for(&graph, &seed);
        let sol = solve_min_cost_flow(&graph, &c).unwrap();
        prop_assert_eq!(graph.conservation_residual(&sol.x), 0.0);
        let cert = optimality_certificate(&graph, &c, &sol.x).unwrap();
        prop_assert!(cert.is_optimal(1e-12), "{:?}", cert);
        let dets: Vec<Detection> = graph
            .frames()
            .iter()
            .enumerate()
            .map(|(i, &f)| Detection::new(f, BoundingBox::new(i as f64, 0.0, 1.0, 1.0).unwrap(), 0.5))
            .collect();
        let tracks = extract_trajectories(&graph, &sol, &dets).unwrap();
        let mut seen = HashSet::new();
        for t in &tracks.trajectories {
            for d in &t.detections {
                prop_assert!(seen.insert(d.key()));
            }
        }
        let active = (0..graph.detection_count()).filter(|&i| sol.x[graph.det_var(i)] == 1.0).count();
        prop_assert_eq!(seen.len(), active);
    }

    #[test]
    fn exact_solver_matches_enumeration(
        graph in small_graphs(4).prop_filter("M <= 14", |g| g.variable_count() <= 14),
        seed in prop::collection::vec(-1.0..1.0f64, 14),
    ) {
        let c = DVector::from_fn(graph.variable_count(), |k, _| seed[k]);
        let best = feasible_flows(&graph).iter().map(|x| objective(&c, x)).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(solve_min_cost_flow(&graph, &c).unwrap().objective, best);
    }

    #[test]
    fn smoothed_solution_certificates(
        graph in small_graphs(6),
        seed in prop::collection::vec(-1.0..1.0f64, 5..12),
    ) {
        let c = costs_for(&graph, &seed);
        let sol = solve_smoothed(&graph, &c, &NewtonOptions::default()).unwrap();
        prop_assert!(sol.x.iter().all(|v| *v > 0.0 && *v < 1.0));
        prop_assert!(graph.conservation_residual(&sol.x) <= 1e-8);
        prop_assert!(sol.grad_norm <= 1e-8);
        prop_assert!(sol.iterations <= 100);
        prop_assert_eq!(sol.factorizations, sol.iterations);
        for w in sol.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn gradient_map_is_linear_symmetric_and_negative(
        graph in small_graphs(6),
        seed in prop::collection::vec(-1.0..1.0f64, 5..12),
        probes in prop::collection::vec(-1.0..1.0f64, 64),
        (alpha, beta) in (-2.0..2.0f64, -2.0..2.0f64),
    ) {
        let c = costs_for(&graph, &seed);
        let sol = solve_smoothed(&graph, &c, &NewtonOptions::default()).unwrap();
        let m = graph.variable_count();
        let u = DVector::from_fn(m, |k, _| probes[k % 64]);
        let v = DVector::from_fn(m, |k, _| probes[(k * 7 + 3) % 64]);
        let jac = grad_costs(&graph, &sol, &u).unwrap().jacobian;
        let (ju, jv) = (jac.apply(&u).unwrap(), jac.apply(&v).unwrap());
        let combo = jac.apply(&(&u * alpha + &v * beta)).unwrap();
        let scale = ju.amax().max(jv.amax()).max(1.0);
        prop_assert!((combo - (&ju * alpha + &jv * beta)).amax() <= 1e-10 * scale);
        prop_assert!((u.dot(&jv) - v.dot(&ju)).abs() <= 1e-10 * scale * m as f64);
        prop_assert!(u.dot(&ju) <= 1e-10 * scale);
    }

    #[test]
    fn hungarian_matches_brute_force(
        (rows, cols, vals) in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-5.0..5.0f64, r * c)))
    ) {
        let m = DMatrix::from_row_slice(rows, cols, &vals);
        let a = hungarian(&m);
        prop_assert_eq!(a.pairs().count(), rows.min(cols));
        let cols_used: HashSet<usize> = a.pairs().map(|(_, c)| c).collect();
        prop_assert_eq!(cols_used.len(), rows.min(cols));
        prop_assert!((a.cost - brute_force(&m)).abs() < 1e-9);
    }

    #[test]
    fn squared_loss_gradient_matches_finite_differences(
        x in prop::collection::vec(0.01..0.99f64, 6),
        target in prop::collection::vec(prop::bool::ANY, 6),
        w in prop::collection::vec(0.1..3.0f64, 6),
    ) {
        let x = DVector::from_vec(x);
        let t = DVector::from_iterator(6, target.iter().map(|b| if *b { 1.0 } else { 0.0 }));
        let w = DVector::from_vec(w);
        let (_, g) = weighted_loss(&x, &t, &w, LossKind::Squared).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (weighted_loss(&xp, &t, &w, LossKind::Squared).unwrap().0
                - weighted_loss(&xm, &t, &w, LossKind::Squared).unwrap().0) / (2.0 * h);
            prop_assert!((fd - g[k]).abs() <= 1e-8);
        }
    }
}

fn brute_force(m: &DMatrix<f64>) -> f64 {
    fn go(m: &DMatrix<f64>, row: usize, used: &mut Vec<bool>, skips: usize) -> f64 {
        if row == m.nrows() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        if skips > 0 {
            best = go(m, row + 1, used, skips - 1);
        }
        for c in 0..m.ncols() {
            if !used[c] {
                used[c] = true;
                best = best.min(m[(row, c)] + go(m, row + 1, used, skips));
                used[c] = false;
            }
        }
        best
    }
    let skips = m.nrows().saturating_sub(m.ncols());
    go(m, 0, &mut vec![false; m.ncols()], skips)
}

fn synthetic(seed: u64, frames: usize) -> (DetectionSet, TrajectorySet) {
    let cfg = SynthConfig {
        frame_count: frames,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn gt_flow_is_conserved_and_labels_are_exhaustive(seed in 0u64..500) {
        let (dets, gt) = synthetic(seed, 12);
        prop_assume!(!dets.is_empty());
        let g = build_graph(dets.detections(), &GraphConfig::default()).unwrap();
        let flow = generate_gt_flow(&g, dets.detections(), &gt).unwrap();
        prop_assert_eq!(g.conservation_residual(&flow.x), 0.0);
        prop_assert_eq!(flow.detection_labels.len(), g.detection_count());
        prop_assert_eq!(flow.link_labels.len(), g.links().len());
        for i in 0..g.detection_count() {
            let tp = flow.detection_labels[i].is_tp();
            prop_assert_eq!(flow.x[g.det_var(i)] == 1.0, tp);
            if !tp {
                prop_assert_eq!(flow.x[g.in_var(i)] + flow.x[g.out_var(i)], 0.0);
            }
        }
        for (k, l) in flow.link_labels.iter().enumerate() {
            prop_assert_eq!(flow.x[g.link_var(k)] == 1.0, *l == LinkLabel::TpTpPlus);
        }
        let x = DVector::from_fn(g.variable_count(), |k, _| ((k * 31 % 17) as f64) / 17.0);
        let (l, _) = gt_loss(&g, &x, &flow, &LossWeights::default()).unwrap();
        prop_assert!((l - (&x - &flow.x).norm_squared()).abs() < 1e-9);
    }

    #[test]
    fn tracker_output_is_valid(seed in 0u64..500, length in 3usize..8, mode in 0usize..3) {
        let (dets, gt) = synthetic(seed, 20);
        let mode = [OutputMode::Middle, OutputMode::Latest, OutputMode::Batch][mode];
        // stride = length - 1 is the smallest overlap allowed.
        for stride in [1, length - 1] {
            let window = WindowConfig { length, stride, mode };
            let model = CostModelParams::HandcraftedB(HandcraftedB::default());
            let out = track_sequence(&dets, &model, &window, &GraphConfig::default(), None).unwrap();
            let mut ids = HashSet::new();
            let mut boxes = HashSet::new();
            let emitted: HashSet<usize> = window.emitted_frames(dets.frame_count()).into_iter().collect();
            for t in &out.trajectories {
                prop_assert!(ids.insert(t.id));
                prop_assert!(t.detections.windows(2).all(|w| w[0].frame < w[1].frame));
                for d in &t.detections {
                    prop_assert!(boxes.insert(d.key()));
                    prop_assert!(emitted.contains(&d.frame));
                }
            }
            let _ = evaluate(&out, &gt, 0.5).unwrap();
        }
    }

    #[test]
    fn metrics_identities(seed in 0u64..500, stray in boxes()) {
        let (dets, gt) = synthetic(seed, 15);
        let model = CostModelParams::HandcraftedB(HandcraftedB::default());
        let window = WindowConfig { mode: OutputMode::Batch, ..WindowConfig::default() };
        let pred = track_sequence(&dets, &model, &window, &GraphConfig::default(), None).unwrap();
        let r = evaluate(&pred, &gt, 0.5).unwrap();
        if r.gt_boxes > 0 {
            let recomputed = 1.0 - (r.false_negatives + r.false_positives + r.id_switches) as f64 / r.gt_boxes as f64;
            prop_assert!((r.mota - recomputed).abs() < 1e-12);
            prop_assert!((r.recall - r.true_positives as f64 / r.gt_boxes as f64).abs() < 1e-15);
        }
        prop_assert_eq!(r.mostly_tracked + r.partially_tracked + r.mostly_lost, gt.len());
        prop_assert_eq!(r.true_positives + r.false_negatives, r.gt_boxes);

        // Relabeling prediction ids changes nothing.
        let relabeled = TrajectorySet::new(
            "",
            pred.trajectories.iter().map(|t| Trajectory { id: 10_000 - t.id, ..t.clone() }).collect(),
        )
        .unwrap();
        prop_assert_eq!(&evaluate(&relabeled, &gt, 0.5).unwrap(), &r);

        // A stray prediction never raises MOTA.
        let (l, t, w, h) = stray;
        let mut more = pred.clone();
        more.trajectories.push(Trajectory::new(99_999, vec![Detection::new(3, BoundingBox::new(l, t, w, h).unwrap(), 0.5)]).unwrap());
        prop_assert!(evaluate(&more, &gt, 0.5).unwrap().mota <= r.mota);
    }
}
