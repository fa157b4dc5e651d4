//! Detections, trajectories and the file formats they travel in.

mod io;
mod synth;

pub use io::{parse_detections, parse_groundtruth, write_detections, write_results, Format};
pub use synth::{generate_synthetic, SynthConfig};

use crate::{Error, Result};

/// Axis-aligned box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn new(left: f64, top: f64, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::InvalidInput(format!(
                "box extent must be positive, got {width}x{height}"
            )));
        }
        Ok(Self {
            left,
            top,
            width,
            height,
        })
    }

    pub fn right(&self) -> f64 {
        self.left + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.top + self.height
    }

    pub fn center(&self) -> (f64, f64) {
        (self.left + 0.5 * self.width, self.top + 0.5 * self.height)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }
}

/// A single detector output: a box in one frame with a confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// 0-based frame index.
    pub frame: usize,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(frame: usize, bbox: BoundingBox, confidence: f64) -> Self {
        Self {
            frame,
            bbox,
            confidence,
        }
    }

    /// Bit-exact identity of a detection. Trajectories built from the same
    /// [`DetectionSet`] hold copies of its detections, so two copies compare
    /// equal under this key.
    pub fn key(&self) -> DetectionKey {
        DetectionKey([
            self.frame as u64,
            self.bbox.left.to_bits(),
            self.bbox.top.to_bits(),
            self.bbox.width.to_bits(),
            self.bbox.height.to_bits(),
            self.confidence.to_bits(),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DetectionKey([u64; 6]);

/// All detections of one sequence, sorted by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub sequence: String,
    detections: Vec<Detection>,
    frame_count: usize,
    /// Image width and height in pixels, when known.
    pub image_size: Option<(f64, f64)>,
}

impl DetectionSet {
    /// Builds a set, stably sorting by frame. Fails if a detection lies at or
    /// beyond `frame_count`.
    pub fn new(
        sequence: impl Into<String>,
        mut detections: Vec<Detection>,
        frame_count: usize,
    ) -> Result<Self> {
        if let Some(d) = detections.iter().find(|d| d.frame >= frame_count) {
            return Err(Error::InvalidInput(format!(
                "detection in frame {} but sequence has {} frames",
                d.frame, frame_count
            )));
        }
        detections.sort_by_key(|d| d.frame);
        Ok(Self {
            sequence: sequence.into(),
            detections,
            frame_count,
            image_size: None,
        })
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    /// Detections with `start <= frame < end`, re-indexed so that frames keep
    /// their absolute values. The returned set keeps the full frame count.
    pub fn frame_range(&self, start: usize, end: usize) -> DetectionSet {
        let detections = self
            .detections
            .iter()
            .filter(|d| d.frame >= start && d.frame < end)
            .copied()
            .collect();
        DetectionSet {
            sequence: self.sequence.clone(),
            detections,
            frame_count: self.frame_count,
            image_size: self.image_size,
        }
    }
}

/// Detections of one target, at most one per frame, sorted by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub detections: Vec<Detection>,
}

impl Trajectory {
    pub fn new(id: u64, mut detections: Vec<Detection>) -> Result<Self> {
        detections.sort_by_key(|d| d.frame);
        if let Some(w) = detections.windows(2).find(|w| w[0].frame == w[1].frame) {
            return Err(Error::InvalidInput(format!(
                "trajectory {id} has two detections in frame {}",
                w[0].frame
            )));
        }
        Ok(Self { id, detections })
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn first_frame(&self) -> Option<usize> {
        self.detections.first().map(|d| d.frame)
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.detections.last().map(|d| d.frame)
    }

    pub fn at_frame(&self, frame: usize) -> Option<&Detection> {
        self.detections
            .binary_search_by_key(&frame, |d| d.frame)
            .ok()
            .map(|i| &self.detections[i])
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectorySet {
    pub sequence: String,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectorySet {
    /// Builds a set, rejecting duplicate target ids.
    pub fn new(sequence: impl Into<String>, trajectories: Vec<Trajectory>) -> Result<Self> {
        let mut ids: Vec<u64> = trajectories.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!("duplicate target id {}", w[0])));
        }
        Ok(Self {
            sequence: sequence.into(),
            trajectories,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    /// Total number of boxes over all trajectories.
    pub fn box_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Per-frame view: `(target id, detection)` pairs for every frame
    /// `0..frame_count`.
    pub fn by_frame(&self, frame_count: usize) -> Vec<Vec<(u64, Detection)>> {
        let mut frames = vec![Vec::new(); frame_count];
        for t in &self.trajectories {
            for d in &t.detections {
                if d.frame < frame_count {
                    frames[d.frame].push((t.id, *d));
                }
            }
        }
        frames
    }

    /// One past the last frame covered by any trajectory.
    pub fn frame_extent(&self) -> usize {
        self.trajectories
            .iter()
            .filter_map(|t| t.last_frame())
            .map(|f| f + 1)
            .max()
            .unwrap_or(0)
    }

    /// Restricts every trajectory to `start <= frame < end`, dropping the
    /// ones that become empty.
    pub fn frame_range(&self, start: usize, end: usize) -> TrajectorySet {
        let trajectories = self
            .trajectories
            .iter()
            .filter_map(|t| {
                let detections: Vec<_> = t
                    .detections
                    .iter()
                    .filter(|d| d.frame >= start && d.frame < end)
                    .copied()
                    .collect();
                (!detections.is_empty()).then_some(Trajectory {
                    id: t.id,
                    detections,
                })
            })
            .collect();
        TrajectorySet {
            sequence: self.sequence.clone(),
            trajectories,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(frame: usize) -> Detection {
        Detection::new(frame, BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), 0.5)
    }

    #[test]
    fn box_rejects_non_positive_extent() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn trajectory_rejects_two_boxes_in_one_frame() {
        assert!(Trajectory::new(1, vec![det(2), det(2)]).is_err());
        let t = Trajectory::new(1, vec![det(3), det(1)]).unwrap();
        assert_eq!(t.first_frame(), Some(1));
        assert!(t.at_frame(3).is_some());
        assert!(t.at_frame(2).is_none());
    }

    #[test]
    fn trajectory_set_rejects_duplicate_ids() {
        let a = Trajectory::new(4, vec![det(0)]).unwrap();
        assert!(TrajectorySet::new("s", vec![a.clone(), a]).is_err());
    }

    #[test]
    fn detection_set_sorts_and_bounds_frames() {
        let set = DetectionSet::new("s", vec![det(2), det(0)], 3).unwrap();
        assert_eq!(set.detections()[0].frame, 0);
        assert!(DetectionSet::new("s", vec![det(3)], 3).is_err());
    }
}
