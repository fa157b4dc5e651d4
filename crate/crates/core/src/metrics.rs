//! CLEAR MOT and trajectory-level (MT/PT/ML) scores.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::detections::{Detection, TrajectorySet};
use crate::graph::iou;
use crate::tracking::hungarian;
use crate::{Error, Result};

const FORBIDDEN: f64 = 1e9;
const MOSTLY_TRACKED: f64 = 0.8;
const MOSTLY_LOST: f64 = 0.2;

/// A ratio whose denominator was zero, reported with a fixed convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ZeroDenominator {
    /// No ground-truth boxes: recall 1, MOTA 1 without false positives and
    /// `−FP` otherwise.
    GroundTruth,
    /// No predictions: precision 1.
    Predictions,
    /// No matches: MOTP 0.
    Matches,
    /// No ground-truth trajectories: MT/PT/ML shares 0.
    Trajectories,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mota: f64,
    /// Mean IoU of matched pairs.
    pub motp: f64,
    pub recall: f64,
    pub precision: f64,
    pub mostly_tracked: usize,
    pub partially_tracked: usize,
    pub mostly_lost: usize,
    pub id_switches: usize,
    pub fragmentations: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub gt_boxes: usize,
    pub gt_trajectories: usize,
    /// Sum of IoU over matches, kept so that reports can be combined.
    pub iou_sum: f64,
    pub flags: Vec<ZeroDenominator>,
}

impl MetricsReport {
    fn from_tallies(t: Tallies) -> Self {
        let mut flags = Vec::new();
        let gt = t.gt_boxes;
        let (mota, recall) = if gt == 0 {
            flags.push(ZeroDenominator::GroundTruth);
            (if t.fp == 0 { 1.0 } else { -(t.fp as f64) }, 1.0)
        } else {
            let errors = t.fn_ + t.fp + t.ids;
            (
                (gt as f64 - errors as f64) / gt as f64,
                t.tp as f64 / gt as f64,
            )
        };
        let precision = if t.tp + t.fp == 0 {
            flags.push(ZeroDenominator::Predictions);
            1.0
        } else {
            t.tp as f64 / (t.tp + t.fp) as f64
        };
        let motp = if t.tp == 0 {
            flags.push(ZeroDenominator::Matches);
            0.0
        } else {
            t.iou_sum / t.tp as f64
        };
        if t.mt + t.pt + t.ml == 0 {
            flags.push(ZeroDenominator::Trajectories);
        }
        Self {
            mota,
            motp,
            recall,
            precision,
            mostly_tracked: t.mt,
            partially_tracked: t.pt,
            mostly_lost: t.ml,
            id_switches: t.ids,
            fragmentations: t.frag,
            true_positives: t.tp,
            false_positives: t.fp,
            false_negatives: t.fn_,
            gt_boxes: gt,
            gt_trajectories: t.mt + t.pt + t.ml,
            iou_sum: t.iou_sum,
            flags,
        }
    }

    fn tallies(&self) -> Tallies {
        Tallies {
            tp: self.true_positives,
            fp: self.false_positives,
            fn_: self.false_negatives,
            ids: self.id_switches,
            frag: self.fragmentations,
            gt_boxes: self.gt_boxes,
            mt: self.mostly_tracked,
            pt: self.partially_tracked,
            ml: self.mostly_lost,
            iou_sum: self.iou_sum,
        }
    }

    /// Pools raw tallies of several sequences and recomputes the ratios.
    pub fn combine(reports: &[MetricsReport]) -> MetricsReport {
        let mut t = Tallies::default();
        for r in reports {
            let o = r.tallies();
            t.tp += o.tp;
            t.fp += o.fp;
            t.fn_ += o.fn_;
            t.ids += o.ids;
            t.frag += o.frag;
            t.gt_boxes += o.gt_boxes;
            t.mt += o.mt;
            t.pt += o.pt;
            t.ml += o.ml;
            t.iou_sum += o.iou_sum;
        }
        Self::from_tallies(t)
    }

    fn share(&self, count: usize) -> f64 {
        if self.gt_trajectories == 0 {
            0.0
        } else {
            count as f64 / self.gt_trajectories as f64
        }
    }

    pub fn mostly_tracked_share(&self) -> f64 {
        self.share(self.mostly_tracked)
    }

    pub fn partially_tracked_share(&self) -> f64 {
        self.share(self.partially_tracked)
    }

    pub fn mostly_lost_share(&self) -> f64 {
        self.share(self.mostly_lost)
    }

    fn rows(&self) -> Vec<(&'static str, String)> {
        let flags: Vec<String> = self.flags.iter().map(|f| format!("{f:?}")).collect();
        vec![
            ("mota", format!("{}", self.mota)),
            ("motp", format!("{}", self.motp)),
            ("recall", format!("{}", self.recall)),
            ("precision", format!("{}", self.precision)),
            ("mostly_tracked", self.mostly_tracked.to_string()),
            ("partially_tracked", self.partially_tracked.to_string()),
            ("mostly_lost", self.mostly_lost.to_string()),
            (
                "mostly_tracked_pct",
                format!("{}", 100.0 * self.mostly_tracked_share()),
            ),
            (
                "partially_tracked_pct",
                format!("{}", 100.0 * self.partially_tracked_share()),
            ),
            (
                "mostly_lost_pct",
                format!("{}", 100.0 * self.mostly_lost_share()),
            ),
            ("id_switches", self.id_switches.to_string()),
            ("fragmentations", self.fragmentations.to_string()),
            ("true_positives", self.true_positives.to_string()),
            ("false_positives", self.false_positives.to_string()),
            ("false_negatives", self.false_negatives.to_string()),
            ("gt_boxes", self.gt_boxes.to_string()),
            ("gt_trajectories", self.gt_trajectories.to_string()),
            ("zero_denominators", flags.join(";")),
        ]
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    /// Aligned two-column table.
    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            let v = match v.parse::<f64>() {
                Ok(x) if v.contains('.') => format!("{x:.4}"),
                _ if v.is_empty() => "-".into(),
                _ => v,
            };
            let _ = writeln!(s, "{k:<width$}  {v:>12}");
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Tallies {
    tp: usize,
    fp: usize,
    fn_: usize,
    ids: usize,
    frag: usize,
    gt_boxes: usize,
    mt: usize,
    pt: usize,
    ml: usize,
    iou_sum: f64,
}

#[derive(Default)]
struct TrackState {
    /// Prediction matched in the most recent matched frame.
    last_match: Option<u64>,
    frames: usize,
    matched: usize,
    in_gap: bool,
}

/// Scores `pred` against `gt`. A prediction and a ground-truth box can match
/// when their IoU is at least `iou_threshold`. Correspondences from earlier
/// frames are kept while still valid; the remaining boxes are matched by the
/// Hungarian method on `1 − IoU`.
pub fn evaluate(
    pred: &TrajectorySet,
    gt: &TrajectorySet,
    iou_threshold: f64,
) -> Result<MetricsReport> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::InvalidInput(format!(
            "IoU threshold must lie in (0, 1), got {iou_threshold}"
        )));
    }
    let frames = pred.frame_extent().max(gt.frame_extent());
    let gt_frames = gt.by_frame(frames);
    let mut pred_frames = pred.by_frame(frames);
    // Matching must not depend on the symbolic ids, so order by geometry.
    for f in &mut pred_frames {
        f.sort_by_key(|(id, d)| (d.key(), *id));
    }

    let mut t = Tallies::default();
    let mut states: HashMap<u64, TrackState> = HashMap::new();
    for (gts, preds) in gt_frames.iter().zip(&pred_frames) {
        t.gt_boxes += gts.len();
        let overlap = DMatrix::from_fn(gts.len(), preds.len(), |g, p| {
            iou(&gts[g].1.bbox, &preds[p].1.bbox)
        });
        let mut gt_match: Vec<Option<usize>> = vec![None; gts.len()];
        let mut pred_taken = vec![false; preds.len()];

        for (g, (gid, _)) in gts.iter().enumerate() {
            let Some(prev) = states.get(gid).and_then(|s| s.last_match) else {
                continue;
            };
            if let Some(p) = preds.iter().position(|(pid, _)| *pid == prev) {
                if !pred_taken[p] && overlap[(g, p)] >= iou_threshold {
                    gt_match[g] = Some(p);
                    pred_taken[p] = true;
                }
            }
        }
        let free_g: Vec<usize> = (0..gts.len()).filter(|&g| gt_match[g].is_none()).collect();
        let free_p: Vec<usize> = (0..preds.len()).filter(|&p| !pred_taken[p]).collect();
        let cost = DMatrix::from_fn(free_g.len(), free_p.len(), |a, b| {
            let o = overlap[(free_g[a], free_p[b])];
            if o >= iou_threshold {
                1.0 - o
            } else {
                FORBIDDEN
            }
        });
        for (a, b) in hungarian(&cost).pairs() {
            if cost[(a, b)] < FORBIDDEN {
                gt_match[free_g[a]] = Some(free_p[b]);
                pred_taken[free_p[b]] = true;
            }
        }

        for (g, (gid, _)) in gts.iter().enumerate() {
            let state = states.entry(*gid).or_default();
            state.frames += 1;
            match gt_match[g] {
                Some(p) => {
                    let pid = preds[p].0;
                    t.tp += 1;
                    t.iou_sum += overlap[(g, p)];
                    state.matched += 1;
                    if state.last_match.is_some_and(|prev| prev != pid) {
                        t.ids += 1;
                    }
                    if state.in_gap {
                        t.frag += 1;
                        state.in_gap = false;
                    }
                    state.last_match = Some(pid);
                }
                None => {
                    t.fn_ += 1;
                    if state.last_match.is_some() {
                        state.in_gap = true;
                    }
                }
            }
        }
        t.fp += pred_taken.iter().filter(|taken| !**taken).count();
    }

    for s in states.values() {
        let coverage = s.matched as f64 / s.frames as f64;
        if coverage >= MOSTLY_TRACKED {
            t.mt += 1;
        } else if coverage < MOSTLY_LOST {
            t.ml += 1;
        } else {
            t.pt += 1;
        }
    }
    Ok(MetricsReport::from_tallies(t))
}

/// Keeps only the observations that fall on the listed frames, for scoring
/// trackers that emit only part of a sequence.
pub fn restrict_frames(set: &TrajectorySet, frames: &[usize]) -> TrajectorySet {
    let keep: std::collections::HashSet<usize> = frames.iter().copied().collect();
    let trajectories = set
        .trajectories
        .iter()
        .filter_map(|t| {
            let detections: Vec<Detection> = t
                .detections
                .iter()
                .filter(|d| keep.contains(&d.frame))
                .copied()
                .collect();
            (!detections.is_empty()).then_some(crate::detections::Trajectory {
                id: t.id,
                detections,
            })
        })
        .collect();
    TrajectorySet {
        sequence: set.sequence.clone(),
        trajectories,
    }
}
