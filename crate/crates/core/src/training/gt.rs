use nalgebra::DVector;

use crate::detections::{Detection, TrajectorySet};
use crate::graph::{iou, FlowGraph};
use crate::{Error, Result};

/// Minimum overlap for a detection to count as a hit on a ground-truth box.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryLabel {
    /// True positive carrying the ground-truth identity it was matched to.
    TruePositive(u64),
    FalsePositive,
}

impl UnaryLabel {
    pub fn is_tp(self) -> bool {
        matches!(self, UnaryLabel::TruePositive(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkLabel {
    /// Both ends false positives.
    FpFp,
    /// One end a true positive, the other a false positive.
    TpFp,
    /// Same identity, active in the ground-truth flow.
    TpTpPlus,
    /// Same identity, bridging past a closer true positive; inactive.
    TpTpPlusFar,
    /// Different identities.
    TpTpMinus,
}

/// Target flow for one graph and the labels that drive the loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GtFlow {
    pub x: DVector<f64>,
    pub detection_labels: Vec<UnaryLabel>,
    pub link_labels: Vec<LinkLabel>,
}

/// Matches detections to ground-truth boxes frame by frame and derives the
/// target flow. Candidate pairs with IoU above [`MATCH_IOU`] are claimed
/// greedily by descending detection confidence, then lower detection index,
/// then higher IoU; each detection and each ground-truth box is claimed once.
pub fn generate_gt_flow(
    graph: &FlowGraph,
    detections: &[Detection],
    gt: &TrajectorySet,
) -> Result<GtFlow> {
    let n = graph.detection_count();
    if detections.len() != n {
        return Err(Error::Shape {
            expected: n,
            actual: detections.len(),
            context: "detections for ground-truth flow",
        });
    }
    if let Some(i) = (0..n).find(|&i| graph.frames()[i] != detections[i].frame) {
        return Err(Error::InvalidInput(format!(
            "detection {i} is in frame {} but the graph places it in frame {}",
            detections[i].frame,
            graph.frames()[i]
        )));
    }

    let mut labels = vec![UnaryLabel::FalsePositive; n];
    let mut start = 0;
    while start < n {
        let frame = detections[start].frame;
        let end = start
            + detections[start..]
                .iter()
                .take_while(|d| d.frame == frame)
                .count();
        let boxes: Vec<(u64, &Detection)> = gt
            .trajectories
            .iter()
            .filter_map(|t| t.at_frame(frame).map(|d| (t.id, d)))
            .collect();
        let mut candidates = Vec::new();
        for i in start..end {
            for (g, (_, b)) in boxes.iter().enumerate() {
                let o = iou(&detections[i].bbox, &b.bbox);
                if o > MATCH_IOU {
                    candidates.push((i, g, o));
                }
            }
        }
        candidates.sort_by(|a, b| {
            detections[b.0]
                .confidence
                .total_cmp(&detections[a.0].confidence)
                .then(a.0.cmp(&b.0))
                .then(b.2.total_cmp(&a.2))
                .then(a.1.cmp(&b.1))
        });
        let mut box_taken = vec![false; boxes.len()];
        for (i, g, _) in candidates {
            if labels[i] == UnaryLabel::FalsePositive && !box_taken[g] {
                labels[i] = UnaryLabel::TruePositive(boxes[g].0);
                box_taken[g] = true;
            }
        }
        start = end;
    }

    // Detections are sorted by frame, so index order is frame order.
    let mut active = vec![false; graph.links().len()];
    let mut has_incoming = vec![false; n];
    for i in 0..n {
        let UnaryLabel::TruePositive(id) = labels[i] else {
            continue;
        };
        let best = graph
            .outgoing(i)
            .iter()
            .copied()
            .filter(|&k| {
                let j = graph.links()[k].1;
                labels[j] == UnaryLabel::TruePositive(id) && !has_incoming[j]
            })
            .min_by(|&a, &b| {
                let (ja, jb) = (graph.links()[a].1, graph.links()[b].1);
                detections[ja]
                    .frame
                    .cmp(&detections[jb].frame)
                    .then(ja.cmp(&jb))
            });
        if let Some(k) = best {
            active[k] = true;
            has_incoming[graph.links()[k].1] = true;
        }
    }

    let mut x = DVector::zeros(graph.variable_count());
    for i in 0..n {
        if labels[i].is_tp() {
            x[graph.det_var(i)] = 1.0;
            x[graph.in_var(i)] = if has_incoming[i] { 0.0 } else { 1.0 };
            let leaves = graph.outgoing(i).iter().any(|&k| active[k]);
            x[graph.out_var(i)] = if leaves { 0.0 } else { 1.0 };
        }
    }
    let link_labels = graph
        .links()
        .iter()
        .enumerate()
        .map(|(k, &(i, j))| {
            if active[k] {
                x[graph.link_var(k)] = 1.0;
            }
            match (labels[i], labels[j]) {
                (UnaryLabel::FalsePositive, UnaryLabel::FalsePositive) => LinkLabel::FpFp,
                (UnaryLabel::TruePositive(_), UnaryLabel::FalsePositive)
                | (UnaryLabel::FalsePositive, UnaryLabel::TruePositive(_)) => LinkLabel::TpFp,
                (UnaryLabel::TruePositive(a), UnaryLabel::TruePositive(b)) => {
                    match (a == b, active[k]) {
                        (false, _) => LinkLabel::TpTpMinus,
                        (true, true) => LinkLabel::TpTpPlus,
                        (true, false) => LinkLabel::TpTpPlusFar,
                    }
                }
            }
        })
        .collect();
    Ok(GtFlow {
        x,
        detection_labels: labels,
        link_labels,
    })
}
