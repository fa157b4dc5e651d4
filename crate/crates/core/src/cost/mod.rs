//! Edge cost producers: pair features, hand-crafted baselines and learnable
//! networks with analytic parameter gradients.

mod features;
mod handcrafted;
mod model;
mod persist;

use std::path::Path;

use nalgebra::DVector;

pub use features::{
    edge_features, pair_features, AuxTable, EdgeFeatures, PairFeature, PAIR_FEATURE_LEN,
};
pub use handcrafted::{HandcraftedA, HandcraftedB};
pub use model::{Architecture, Dense, ForwardCache, LearnedModel};

use crate::detections::Detection;
use crate::graph::FlowGraph;
use crate::Result;

/// Any cost model the tracker can run.
#[derive(Debug, Clone, PartialEq)]
pub enum CostModelParams {
    HandcraftedA(HandcraftedA),
    HandcraftedB(HandcraftedB),
    Learned(LearnedModel),
}

impl CostModelParams {
    pub fn architecture(&self) -> Architecture {
        match self {
            CostModelParams::HandcraftedA(_) => Architecture::HandcraftedA,
            CostModelParams::HandcraftedB(_) => Architecture::HandcraftedB,
            CostModelParams::Learned(m) => m.architecture(),
        }
    }

    /// Default hand-crafted parameters or a freshly initialized network over
    /// [`PairFeature`]s.
    pub fn initial(
        architecture: Architecture,
        aux_dim: Option<usize>,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        Ok(match architecture {
            Architecture::HandcraftedA => CostModelParams::HandcraftedA(HandcraftedA::default()),
            Architecture::HandcraftedB => CostModelParams::HandcraftedB(HandcraftedB::default()),
            arch => {
                CostModelParams::Learned(LearnedModel::new(arch, PAIR_FEATURE_LEN, aux_dim, rng)?)
            }
        })
    }

    /// Costs for every variable of `graph`, whose detection `i` is
    /// `detections[i]`. `max_gap` normalizes the time feature. The hand-crafted
    /// overlap model reads its optional link score from the first auxiliary
    /// component.
    pub fn costs(
        &self,
        graph: &FlowGraph,
        detections: &[Detection],
        max_gap: usize,
        aux: Option<&AuxTable>,
    ) -> Result<DVector<f64>> {
        match self {
            CostModelParams::HandcraftedA(a) => a.costs(graph, detections),
            CostModelParams::HandcraftedB(b) => {
                let scores = match aux {
                    Some(table) if b.score_weight != 0.0 => {
                        let f = edge_features(graph, detections, max_gap, Some(table))?;
                        let aux = f.aux.unwrap();
                        Some(aux.column(0).iter().copied().collect::<Vec<_>>())
                    }
                    _ => None,
                };
                b.costs(graph, detections, scores.as_deref())
            }
            CostModelParams::Learned(m) => {
                let aux = if m.aux_dim().is_some() { aux } else { None };
                let f = edge_features(graph, detections, max_gap, aux)?;
                Ok(m.forward(&f)?.0)
            }
        }
    }

    /// Writes the binary container to `path` and a text summary next to it
    /// (same name with `.txt` appended).
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, persist::encode(self))?;
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".txt");
        std::fs::write(sidecar, persist::summary(self))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        persist::decode(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        persist::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        persist::decode(bytes)
    }

    pub fn summary(&self) -> String {
        persist::summary(self)
    }
}
