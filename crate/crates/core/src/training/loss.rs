use nalgebra::DVector;

use super::gt::{GtFlow, LinkLabel};
use crate::graph::FlowGraph;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Squared,
    L1,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "squared" | "l2" => Ok(LossKind::Squared),
            "l1" => Ok(LossKind::L1),
            _ => Err(Error::InvalidInput(format!(
                "unknown loss {s:?}; expected squared or l1"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Applied to ambiguous links: false positive pairs and same-identity
    /// links that skip a closer true positive. In `(0, 1]`.
    pub ambiguous: f64,
    /// Applied to every variable touching a true positive detection.
    pub positive: f64,
    /// Applied to every link variable.
    pub link: f64,
    pub kind: LossKind,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ambiguous: 1.0,
            positive: 1.0,
            link: 1.0,
            kind: LossKind::Squared,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.ambiguous > 0.0 && self.ambiguous <= 1.0) {
            return Err(Error::InvalidInput(
                "ambiguous weight must lie in (0, 1]".into(),
            ));
        }
        if !(self.positive > 0.0 && self.link > 0.0)
            || !self.positive.is_finite()
            || !self.link.is_finite()
        {
            return Err(Error::InvalidInput(
                "positive and link weights must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Per-variable weights for one ground-truth flow.
    pub fn per_variable(&self, graph: &FlowGraph, gt: &GtFlow) -> DVector<f64> {
        let mut w = DVector::from_element(graph.variable_count(), 1.0);
        for (i, label) in gt.detection_labels.iter().enumerate() {
            if label.is_tp() {
                for v in [graph.in_var(i), graph.det_var(i), graph.out_var(i)] {
                    w[v] *= self.positive;
                }
            }
        }
        for (k, label) in gt.link_labels.iter().enumerate() {
            let v = graph.link_var(k);
            if matches!(label, LinkLabel::FpFp | LinkLabel::TpTpPlusFar) {
                w[v] *= self.ambiguous;
            }
            if !matches!(label, LinkLabel::FpFp) {
                w[v] *= self.positive;
            }
            w[v] *= self.link;
        }
        w
    }
}

/// Weighted distance between a flow and its target, with its gradient.
pub fn weighted_loss(
    x: &DVector<f64>,
    target: &DVector<f64>,
    variable_weights: &DVector<f64>,
    kind: LossKind,
) -> Result<(f64, DVector<f64>)> {
    if x.len() != target.len() || x.len() != variable_weights.len() {
        return Err(Error::Shape {
            expected: target.len(),
            actual: x.len(),
            context: "loss inputs",
        });
    }
    let diff = x - target;
    Ok(match kind {
        LossKind::Squared => {
            let loss = diff
                .iter()
                .zip(variable_weights.iter())
                .map(|(d, w)| w * d * d)
                .sum();
            (loss, diff.component_mul(variable_weights) * 2.0)
        }
        LossKind::L1 => {
            let loss = diff
                .iter()
                .zip(variable_weights.iter())
                .map(|(d, w)| w * d.abs())
                .sum();
            let grad = diff.zip_map(variable_weights, |d, w| {
                if d == 0.0 {
                    0.0
                } else {
                    w * d.signum()
                }
            });
            (loss, grad)
        }
    })
}

/// Loss of a flow against a [`GtFlow`] under the given weights.
pub fn gt_loss(
    graph: &FlowGraph,
    x: &DVector<f64>,
    gt: &GtFlow,
    weights: &LossWeights,
) -> Result<(f64, DVector<f64>)> {
    weighted_loss(x, &gt.x, &weights.per_variable(graph, gt), weights.kind)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: DVector<f64>,
    pub second: DVector<f64>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first: DVector::zeros(len),
            second: DVector::zeros(len),
            step: 0,
        }
    }
}

/// One bias-corrected ADAM update, in place.
pub fn adam_step(
    params: &mut DVector<f64>,
    grads: &DVector<f64>,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::Shape {
            expected: params.len(),
            actual: grads.len(),
            context: "ADAM update",
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for k in 0..params.len() {
        let g = grads[k];
        state.first[k] = hyper.beta1 * state.first[k] + (1.0 - hyper.beta1) * g;
        state.second[k] = hyper.beta2 * state.second[k] + (1.0 - hyper.beta2) * g * g;
        let m = state.first[k] / c1;
        let v = state.second[k] / c2;
        params[k] -= hyper.learning_rate * m / (v.sqrt() + hyper.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::gt::UnaryLabel;

    fn single_pair() -> (FlowGraph, GtFlow) {
        let g = FlowGraph::from_links(vec![0, 1], vec![(0, 1)], 1e-3).unwrap();
        let gt = GtFlow {
            x: DVector::zeros(7),
            detection_labels: vec![UnaryLabel::FalsePositive; 2],
            link_labels: vec![LinkLabel::FpFp],
        };
        (g, gt)
    }

    #[test]
    fn exact_match_has_zero_loss() {
        let t = DVector::from_vec(vec![1.0, 0.0, 1.0]);
        let (l, g) =
            weighted_loss(&t, &t, &DVector::from_element(3, 2.0), LossKind::Squared).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.amax(), 0.0);
        let (l, g) = weighted_loss(&t, &t, &DVector::from_element(3, 2.0), LossKind::L1).unwrap();
        assert_eq!((l, g.amax()), (0.0, 0.0));
    }

    #[test]
    fn unary_true_positive_term() {
        let (l, g) = weighted_loss(
            &DVector::from_vec(vec![0.25]),
            &DVector::from_vec(vec![1.0]),
            &DVector::from_vec(vec![1.0]),
            LossKind::Squared,
        )
        .unwrap();
        assert_eq!(l, 0.5625);
        assert_eq!(g[0], -1.5);
    }

    #[test]
    fn ambiguous_link_weight_multiplies() {
        let (g, gt) = single_pair();
        let w = LossWeights {
            ambiguous: 0.1,
            link: 2.0,
            ..LossWeights::default()
        };
        let per = w.per_variable(&g, &gt);
        assert!((per[6] - 0.2).abs() < 1e-15);
        let mut x = DVector::zeros(7);
        x[6] = 0.5;
        let (l, _) = gt_loss(&g, &x, &gt, &w).unwrap();
        assert!((l - 0.05).abs() < 1e-15);
    }

    #[test]
    fn positive_weight_reaches_unaries_and_links() {
        let (g, mut gt) = single_pair();
        gt.detection_labels[0] = UnaryLabel::TruePositive(1);
        gt.link_labels[0] = LinkLabel::TpFp;
        let w = LossWeights {
            positive: 1.5,
            ..LossWeights::default()
        };
        let per = w.per_variable(&g, &gt);
        assert_eq!(per.as_slice(), &[1.5, 1.0, 1.5, 1.0, 1.5, 1.0, 1.5]);
    }

    #[test]
    fn unit_weights_give_plain_squared_error() {
        let x = DVector::from_fn(7, |k, _| k as f64 / 10.0);
        let (g, gt) = single_pair();
        let (l, _) = gt_loss(&g, &x, &gt, &LossWeights::default()).unwrap();
        assert!((l - x.norm_squared()).abs() < 1e-15);
    }

    #[test]
    fn l1_subgradient() {
        let (_, g) = weighted_loss(
            &DVector::from_vec(vec![0.2, 0.7, 1.0]),
            &DVector::from_vec(vec![0.0, 1.0, 1.0]),
            &DVector::from_element(3, 3.0),
            LossKind::L1,
        )
        .unwrap();
        assert_eq!(g.as_slice(), &[3.0, -3.0, 0.0]);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = DVector::from_vec(vec![1.0, -2.0]);
        let mut s = AdamState::new(2);
        adam_step(&mut p, &DVector::zeros(2), &mut s, &AdamHyper::default()).unwrap();
        assert_eq!(p.as_slice(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let mut p = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let mut s = AdamState::new(3);
        let h = AdamHyper {
            learning_rate: 0.01,
            ..AdamHyper::default()
        };
        adam_step(
            &mut p,
            &DVector::from_vec(vec![3.0, -0.02, 500.0]),
            &mut s,
            &h,
        )
        .unwrap();
        for (v, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - (1.0 + sign * 0.01)).abs() < 1e-8);
        }
        assert!(adam_step(&mut p, &DVector::zeros(2), &mut s, &h).is_err());
    }

    #[test]
    fn adam_descends_a_parabola() {
        // Momentum overshoots zero, so |w| shrinks over the run but not at
        // every step; compare against a scalar re-derivation of the update.
        let h = AdamHyper {
            learning_rate: 0.1,
            ..AdamHyper::default()
        };
        let mut w = DVector::from_vec(vec![1.0]);
        let mut s = AdamState::new(1);
        let (mut rw, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = &w * 2.0;
            adam_step(&mut w, &g, &mut s, &h).unwrap();
            let rg = 2.0 * rw;
            m = 0.9 * m + 0.1 * rg;
            v = 0.999 * v + 0.001 * rg * rg;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            rw -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((w[0] - rw).abs() < 1e-14);
        }
        assert!(w[0].abs() < 0.01);
    }
}
