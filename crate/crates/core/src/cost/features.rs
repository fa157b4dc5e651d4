use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::detections::{Detection, DetectionKey};
use crate::graph::{iou, FlowGraph};
use crate::{Error, Result};

/// Number of entries in a [`PairFeature`].
pub const PAIR_FEATURE_LEN: usize = 8;

/// Geometric and confidence description of a candidate link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFeature {
    /// Box differences (later minus earlier), divided by the mean height.
    pub delta_left: f64,
    pub delta_top: f64,
    pub delta_width: f64,
    pub delta_height: f64,
    pub confidence_a: f64,
    pub confidence_b: f64,
    /// Frame gap divided by the maximum gap, in `(0, 1]`.
    pub time: f64,
    pub iou: f64,
}

impl PairFeature {
    pub fn to_array(&self) -> [f64; PAIR_FEATURE_LEN] {
        [
            self.delta_left,
            self.delta_top,
            self.delta_width,
            self.delta_height,
            self.confidence_a,
            self.confidence_b,
            self.time,
            self.iou,
        ]
    }
}

/// Features of the pair `a → b`. Requires `0 < frame(b) − frame(a) ≤ max_gap`.
pub fn pair_features(a: &Detection, b: &Detection, max_gap: usize) -> Result<PairFeature> {
    if b.frame <= a.frame || b.frame - a.frame > max_gap {
        return Err(Error::InvalidInput(format!(
            "pair features need 0 < gap <= {max_gap}, got frames {} -> {}",
            a.frame, b.frame
        )));
    }
    let scale = 0.5 * (a.bbox.height + b.bbox.height);
    Ok(PairFeature {
        delta_left: (b.bbox.left - a.bbox.left) / scale,
        delta_top: (b.bbox.top - a.bbox.top) / scale,
        delta_width: (b.bbox.width - a.bbox.width) / scale,
        delta_height: (b.bbox.height - a.bbox.height) / scale,
        confidence_a: a.confidence,
        confidence_b: b.confidence,
        time: (b.frame - a.frame) as f64 / max_gap as f64,
        iou: iou(&a.bbox, &b.bbox),
    })
}

/// Externally computed per-link feature vectors, keyed by the two detections.
#[derive(Debug, Clone, Default)]
pub struct AuxTable {
    dim: usize,
    entries: HashMap<(DetectionKey, DetectionKey), Vec<f64>>,
}

impl AuxTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, a: &Detection, b: &Detection, values: Vec<f64>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                actual: values.len(),
                context: "auxiliary feature",
            });
        }
        self.entries.insert((a.key(), b.key()), values);
        Ok(())
    }

    pub fn get(&self, a: &Detection, b: &Detection) -> Option<&[f64]> {
        self.entries.get(&(a.key(), b.key())).map(Vec::as_slice)
    }
}

/// Model inputs for every edge of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFeatures {
    /// Detection confidence per detection.
    pub confidences: DVector<f64>,
    /// One row per link.
    pub pairs: DMatrix<f64>,
    /// One row per link when auxiliary features are available.
    pub aux: Option<DMatrix<f64>>,
}

impl EdgeFeatures {
    pub fn detection_count(&self) -> usize {
        self.confidences.len()
    }

    pub fn link_count(&self) -> usize {
        self.pairs.nrows()
    }
}

/// Collects [`PairFeature`]s (and auxiliary rows if a table is given) for all
/// links of `graph`, whose detection `i` is `detections[i]`.
pub fn edge_features(
    graph: &FlowGraph,
    detections: &[Detection],
    max_gap: usize,
    aux: Option<&AuxTable>,
) -> Result<EdgeFeatures> {
    if detections.len() != graph.detection_count() {
        return Err(Error::Shape {
            expected: graph.detection_count(),
            actual: detections.len(),
            context: "detections for edge features",
        });
    }
    let links = graph.links();
    let mut pairs = DMatrix::zeros(links.len(), PAIR_FEATURE_LEN);
    for (k, &(i, j)) in links.iter().enumerate() {
        let f = pair_features(&detections[i], &detections[j], max_gap)?.to_array();
        for (c, v) in f.iter().enumerate() {
            pairs[(k, c)] = *v;
        }
    }
    let aux = match aux {
        None => None,
        Some(table) => {
            let mut m = DMatrix::zeros(links.len(), table.dim());
            for (k, &(i, j)) in links.iter().enumerate() {
                let row = table.get(&detections[i], &detections[j]).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "no auxiliary feature for link frame {} -> frame {}",
                        detections[i].frame, detections[j].frame
                    ))
                })?;
                for (c, v) in row.iter().enumerate() {
                    m[(k, c)] = *v;
                }
            }
            Some(m)
        }
    };
    Ok(EdgeFeatures {
        confidences: DVector::from_iterator(
            detections.len(),
            detections.iter().map(|d| d.confidence),
        ),
        pairs,
        aux,
    })
}
