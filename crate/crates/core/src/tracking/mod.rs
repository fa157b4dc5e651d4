//! Sliding-window inference: exact per-window solves stitched together by
//! bipartite matching on shared detections.

mod hungarian;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;

pub use hungarian::{hungarian, Assignment};

use crate::cost::{AuxTable, CostModelParams};
use crate::detections::{Detection, DetectionKey, DetectionSet, Trajectory, TrajectorySet};
use crate::graph::{build_graph, GraphConfig};
use crate::mcf::{extract_trajectories, solve_min_cost_flow};
use crate::{Error, Result};

/// Cost placed on trajectory pairs that share no detection. Any matching
/// that uses one is discarded afterwards.
const FORBIDDEN: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputMode {
    /// Emit each window's middle frame; the first and last half-windows of
    /// the sequence are not emitted.
    #[default]
    Middle,
    /// Emit the newest frames of a window that grows up to its full length,
    /// as an on-line tracker would.
    Latest,
    /// Solve the whole sequence as one graph.
    Batch,
}

impl FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "middle" => Ok(OutputMode::Middle),
            "latest" => Ok(OutputMode::Latest),
            "batch" => Ok(OutputMode::Batch),
            _ => Err(Error::InvalidInput(format!(
                "unknown output mode {s:?}; expected middle, latest or batch"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    /// Frames per window.
    pub length: usize,
    /// Frames between consecutive windows, in `1..length`.
    pub stride: usize,
    pub mode: OutputMode,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            length: 10,
            stride: 1,
            mode: OutputMode::Middle,
        }
    }
}

/// One window position: the frames it solves and the frames it emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Span {
    start: usize,
    end: usize,
    emit_start: usize,
    emit_end: usize,
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode != OutputMode::Batch && !(self.stride > 0 && self.stride < self.length) {
            return Err(Error::InvalidInput(format!(
                "window stride must satisfy 0 < stride < length, got {} and {}",
                self.stride, self.length
            )));
        }
        if self.length == 0 {
            return Err(Error::InvalidInput("window length must be positive".into()));
        }
        Ok(())
    }

    /// Mode actually used for a sequence of `frames` frames.
    pub fn effective_mode(&self, frames: usize) -> OutputMode {
        if self.mode != OutputMode::Batch && self.length > frames {
            OutputMode::Batch
        } else {
            self.mode
        }
    }

    fn spans(&self, frames: usize) -> Vec<Span> {
        match self.effective_mode(frames) {
            OutputMode::Batch => vec![Span {
                start: 0,
                end: frames,
                emit_start: 0,
                emit_end: frames,
            }],
            OutputMode::Middle => {
                let mut starts: Vec<usize> =
                    (0..=frames - self.length).step_by(self.stride).collect();
                if *starts.last().unwrap() != frames - self.length {
                    starts.push(frames - self.length);
                }
                let middle = |s: usize| s + self.length / 2;
                starts
                    .iter()
                    .enumerate()
                    .map(|(w, &s)| Span {
                        start: s,
                        end: s + self.length,
                        emit_start: middle(s),
                        emit_end: starts.get(w + 1).map_or(middle(s) + 1, |&n| middle(n)),
                    })
                    .collect()
            }
            OutputMode::Latest => {
                let mut ends: Vec<usize> = (self.stride..=frames).step_by(self.stride).collect();
                if ends.last() != Some(&frames) {
                    ends.push(frames);
                }
                let mut prev = 0;
                ends.iter()
                    .map(|&e| {
                        let span = Span {
                            start: e.saturating_sub(self.length),
                            end: e,
                            emit_start: prev,
                            emit_end: e,
                        };
                        prev = e;
                        span
                    })
                    .collect()
            }
        }
    }

    /// Frames that [`track_sequence`] emits for a sequence of `frames` frames.
    pub fn emitted_frames(&self, frames: usize) -> Vec<usize> {
        if frames == 0 {
            return Vec::new();
        }
        self.spans(frames)
            .iter()
            .flat_map(|s| s.emit_start..s.emit_end)
            .collect()
    }
}

/// Hands out identities that are never reused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdCounter {
    next: u64,
}

impl Default for IdCounter {
    fn default() -> Self {
        Self { next: 1 }
    }
}

impl IdCounter {
    pub fn fresh(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        id
    }

    /// Makes sure ids at or below `id` are never handed out.
    pub fn reserve(&mut self, id: u64) {
        self.next = self.next.max(id + 1);
    }
}

/// Carries identities from `previous` to `current` trajectories. The cost of
/// a pair is `1 / (1 + shared)` where `shared` counts common detections;
/// pairs sharing nothing cannot match. Returns the id for every current
/// trajectory, drawing new ones from `ids` for unmatched trajectories.
pub fn associate_windows(
    previous: &TrajectorySet,
    current: &TrajectorySet,
    ids: &mut IdCounter,
) -> HashMap<u64, u64> {
    let sets: Vec<HashSet<DetectionKey>> = previous
        .trajectories
        .iter()
        .map(|t| t.detections.iter().map(Detection::key).collect())
        .collect();
    let cost = DMatrix::from_fn(current.len(), previous.len(), |c, p| {
        let shared = current.trajectories[c]
            .detections
            .iter()
            .filter(|d| sets[p].contains(&d.key()))
            .count();
        if shared == 0 {
            FORBIDDEN
        } else {
            1.0 / (1.0 + shared as f64)
        }
    });
    let assignment = hungarian(&cost);
    let mut mapping = HashMap::new();
    for (c, t) in current.trajectories.iter().enumerate() {
        let id = match assignment.rows[c] {
            Some(p) if cost[(c, p)] < FORBIDDEN => previous.trajectories[p].id,
            _ => ids.fresh(),
        };
        mapping.insert(t.id, id);
    }
    mapping
}

fn solve_window(
    detections: &[Detection],
    model: &CostModelParams,
    graph_config: &GraphConfig,
    aux: Option<&AuxTable>,
) -> Result<TrajectorySet> {
    if detections.is_empty() {
        return Ok(TrajectorySet::default());
    }
    let graph = build_graph(detections, graph_config)?;
    let costs = model.costs(&graph, detections, graph_config.max_gap, aux)?;
    let solution = solve_min_cost_flow(&graph, &costs)?;
    extract_trajectories(&graph, &solution, detections)
}

/// Tracks a whole sequence with the exact solver. Windows are solved in
/// parallel and associated in order. When the window is longer than the
/// sequence, sliding modes fall back to batch.
pub fn track_sequence(
    detections: &DetectionSet,
    model: &CostModelParams,
    window: &WindowConfig,
    graph_config: &GraphConfig,
    aux: Option<&AuxTable>,
) -> Result<TrajectorySet> {
    window.validate()?;
    graph_config.validate()?;
    let frames = detections.frame_count();
    if frames == 0 {
        return TrajectorySet::new(detections.sequence.clone(), Vec::new());
    }
    if window.effective_mode(frames) != window.mode {
        warn!(
            "window of {} frames exceeds the {frames}-frame sequence {:?}; solving it as one batch",
            window.length, detections.sequence
        );
    }
    let spans = window.spans(frames);
    let solved = spans
        .par_iter()
        .map(|s| {
            let dets = detections.frame_range(s.start, s.end);
            solve_window(dets.detections(), model, graph_config, aux)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ids = IdCounter::default();
    let mut previous = TrajectorySet::default();
    let mut output: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for (span, local) in spans.iter().zip(solved) {
        let mapping = associate_windows(&previous, &local, &mut ids);
        let mut relabeled = Vec::with_capacity(local.len());
        for t in local.trajectories {
            let id = mapping[&t.id];
            for d in &t.detections {
                if d.frame >= span.emit_start && d.frame < span.emit_end {
                    output.entry(id).or_default().push(*d);
                }
            }
            relabeled.push(Trajectory { id, ..t });
        }
        previous = TrajectorySet::new("", relabeled)?;
    }
    let trajectories = output
        .into_iter()
        .map(|(id, dets)| Trajectory::new(id, dets))
        .collect::<Result<Vec<_>>>()?;
    TrajectorySet::new(detections.sequence.clone(), trajectories)
}
