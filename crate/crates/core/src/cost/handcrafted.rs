use nalgebra::DVector;

use crate::detections::Detection;
use crate::graph::{iou, FlowGraph};
use crate::{Error, Result};

/// Largest confidence used inside `log(1 − p)`.
const MAX_CONFIDENCE: f64 = 1.0 - 1e-6;

/// Motion-based costs: a velocity likelihood from the error function plus a
/// geometric penalty on skipped frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandcraftedA {
    /// Birth and death cost.
    pub entry_cost: f64,
    /// Per-skipped-frame probability, in `(0, 1)`.
    pub skip_rate: f64,
    /// Velocity scale in pixels per frame; the likelihood is one half at
    /// half this value and nearly zero at the value itself.
    pub max_velocity: f64,
}

impl Default for HandcraftedA {
    fn default() -> Self {
        Self {
            entry_cost: 1.0,
            skip_rate: 0.3,
            max_velocity: 20.0,
        }
    }
}

impl HandcraftedA {
    pub fn validate(&self) -> Result<()> {
        if !(self.skip_rate > 0.0 && self.skip_rate < 1.0) {
            return Err(Error::InvalidInput("skip_rate must lie in (0, 1)".into()));
        }
        if !(self.max_velocity > 0.0) || !self.entry_cost.is_finite() {
            return Err(Error::InvalidInput(
                "max_velocity must be positive and entry_cost finite".into(),
            ));
        }
        Ok(())
    }

    /// `E(v) = ½ + ½ erf((−v + ½ v_max) / (¼ v_max))`.
    pub fn velocity_likelihood(&self, velocity: f64) -> f64 {
        let vm = self.max_velocity;
        0.5 + 0.5 * libm::erf((-velocity + 0.5 * vm) / (0.25 * vm))
    }

    pub fn detection_cost(confidence: f64) -> f64 {
        (1.0 - confidence.min(MAX_CONFIDENCE)).ln()
    }

    pub fn link_cost(&self, a: &Detection, b: &Detection) -> f64 {
        let gap = (b.frame - a.frame) as f64;
        let (ax, ay) = a.bbox.center();
        let (bx, by) = b.bbox.center();
        let velocity = (bx - ax).hypot(by - ay) / gap;
        // E underflows to 0 far beyond v_max; keep the cost finite.
        let e = self.velocity_likelihood(velocity).max(f64::MIN_POSITIVE);
        -e.ln() - (gap - 1.0) * self.skip_rate.ln()
    }

    pub fn costs(&self, graph: &FlowGraph, detections: &[Detection]) -> Result<DVector<f64>> {
        self.validate()?;
        check_len(graph, detections)?;
        let mut c = DVector::zeros(graph.variable_count());
        for (i, d) in detections.iter().enumerate() {
            c[graph.in_var(i)] = self.entry_cost;
            c[graph.out_var(i)] = self.entry_cost;
            c[graph.det_var(i)] = Self::detection_cost(d.confidence);
        }
        for (k, &(i, j)) in graph.links().iter().enumerate() {
            c[graph.link_var(k)] = self.link_cost(&detections[i], &detections[j]);
        }
        Ok(c)
    }
}

/// Overlap-based costs: `c_det = α·p`, `c_link = (1 − IoU) + β(Δt − 1) + γ(1 − s)`
/// where `s` is an optional external per-link score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandcraftedB {
    pub entry_cost: f64,
    pub confidence_weight: f64,
    pub gap_penalty: f64,
    pub score_weight: f64,
}

impl Default for HandcraftedB {
    fn default() -> Self {
        Self {
            entry_cost: 0.3,
            confidence_weight: -1.0,
            gap_penalty: 0.3,
            score_weight: 0.0,
        }
    }
}

impl HandcraftedB {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.entry_cost,
            self.confidence_weight,
            self.gap_penalty,
            self.score_weight,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "handcrafted parameters must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn link_cost(&self, a: &Detection, b: &Detection, score: Option<f64>) -> f64 {
        let gap = (b.frame - a.frame) as f64;
        let mut c = (1.0 - iou(&a.bbox, &b.bbox)) + self.gap_penalty * (gap - 1.0);
        if let Some(s) = score {
            c += self.score_weight * (1.0 - s);
        }
        c
    }

    /// `scores`, when given, holds one value per link.
    pub fn costs(
        &self,
        graph: &FlowGraph,
        detections: &[Detection],
        scores: Option<&[f64]>,
    ) -> Result<DVector<f64>> {
        self.validate()?;
        check_len(graph, detections)?;
        if let Some(s) = scores {
            if s.len() != graph.links().len() {
                return Err(Error::Shape {
                    expected: graph.links().len(),
                    actual: s.len(),
                    context: "link scores",
                });
            }
        }
        let mut c = DVector::zeros(graph.variable_count());
        for (i, d) in detections.iter().enumerate() {
            c[graph.in_var(i)] = self.entry_cost;
            c[graph.out_var(i)] = self.entry_cost;
            c[graph.det_var(i)] = self.confidence_weight * d.confidence;
        }
        for (k, &(i, j)) in graph.links().iter().enumerate() {
            let score = scores.map(|s| s[k]);
            c[graph.link_var(k)] = self.link_cost(&detections[i], &detections[j], score);
        }
        Ok(c)
    }
}

fn check_len(graph: &FlowGraph, detections: &[Detection]) -> Result<()> {
    if detections.len() != graph.detection_count() {
        return Err(Error::Shape {
            expected: graph.detection_count(),
            actual: detections.len(),
            context: "detections for cost computation",
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detections::BoundingBox;
    use crate::graph::{build_graph, GraphConfig};

    fn det(frame: usize, l: f64, t: f64, c: f64) -> Detection {
        Detection::new(frame, BoundingBox::new(l, t, 10.0, 20.0).unwrap(), c)
    }

    #[test]
    fn likelihood_is_half_at_midpoint() {
        let m = HandcraftedA::default();
        assert_eq!(m.velocity_likelihood(0.5 * m.max_velocity), 0.5);
        let a = det(0, 0.0, 0.0, 0.5);
        let b = det(1, 0.5 * m.max_velocity, 0.0, 0.5);
        assert!((m.link_cost(&a, &b) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn consecutive_frames_have_no_skip_term() {
        let m = HandcraftedA::default();
        let a = det(0, 0.0, 0.0, 0.5);
        let b1 = det(1, 0.0, 0.0, 0.5);
        let b3 = det(3, 0.0, 0.0, 0.5);
        let e0 = -m.velocity_likelihood(0.0).ln();
        assert_eq!(m.link_cost(&a, &b1), e0);
        assert!((m.link_cost(&a, &b3) - (e0 - 2.0 * 0.3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn detection_cost_is_log_miss_probability() {
        assert!((HandcraftedA::detection_cost(0.9) + std::f64::consts::LN_10).abs() < 1e-12);
        assert!(HandcraftedA::detection_cost(1.0).is_finite());
    }

    #[test]
    fn overlap_costs() {
        let m = HandcraftedB {
            gap_penalty: 0.3,
            confidence_weight: 1.0,
            ..HandcraftedB::default()
        };
        let a = det(0, 0.0, 0.0, 0.5);
        assert_eq!(m.link_cost(&a, &det(1, 0.0, 0.0, 0.5), None), 0.0);
        assert!((m.link_cost(&a, &det(2, 100.0, 0.0, 0.5), None) - 1.3).abs() < 1e-15);
        let g = FlowGraph::from_links(vec![0], vec![], 1e-3).unwrap();
        let c = m.costs(&g, &[a], None).unwrap();
        assert_eq!(c[g.det_var(0)], 0.5);
        assert_eq!(c[g.in_var(0)], m.entry_cost);
    }

    #[test]
    fn score_term() {
        let m = HandcraftedB {
            score_weight: 2.0,
            ..HandcraftedB::default()
        };
        let a = det(0, 0.0, 0.0, 0.5);
        let b = det(1, 0.0, 0.0, 0.5);
        assert!((m.link_cost(&a, &b, Some(0.25)) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn costs_are_permutation_equivariant() {
        let dets = vec![
            det(0, 0.0, 0.0, 0.9),
            det(0, 40.0, 0.0, 0.3),
            det(1, 2.0, 1.0, 0.8),
            det(1, 41.0, 0.0, 0.4),
            det(2, 4.0, 2.0, 0.7),
        ];
        let perm = [1, 0, 3, 2, 4];
        let permuted: Vec<_> = perm.iter().map(|&p| dets[p]).collect();
        let cfg = GraphConfig {
            prune_radius: None,
            ..GraphConfig::default()
        };
        let g = build_graph(&dets, &cfg).unwrap();
        let gp = build_graph(&permuted, &cfg).unwrap();
        let a = HandcraftedA::default();
        let b = HandcraftedB::default();
        let (ca, cpa) = (
            a.costs(&g, &dets).unwrap(),
            a.costs(&gp, &permuted).unwrap(),
        );
        let (cb, cpb) = (
            b.costs(&g, &dets, None).unwrap(),
            b.costs(&gp, &permuted, None).unwrap(),
        );
        // inverse: new index q holds old detection perm[q]
        for q in 0..dets.len() {
            let p = perm[q];
            for (c, cp) in [(&ca, &cpa), (&cb, &cpb)] {
                assert_eq!(cp[gp.in_var(q)], c[g.in_var(p)]);
                assert_eq!(cp[gp.det_var(q)], c[g.det_var(p)]);
                assert_eq!(cp[gp.out_var(q)], c[g.out_var(p)]);
            }
        }
        for (kq, &(qi, qj)) in gp.links().iter().enumerate() {
            let kp = g
                .links()
                .iter()
                .position(|&l| l == (perm[qi], perm[qj]))
                .unwrap();
            assert_eq!(cpa[gp.link_var(kq)], ca[g.link_var(kp)]);
            assert_eq!(cpb[gp.link_var(kq)], cb[g.link_var(kp)]);
        }
    }
}
