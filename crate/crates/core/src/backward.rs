//! Backward pass: gradient of a loss on `x*` with respect to the costs.
//!
//! Differentiating the optimality condition `Bᵀ(t·c + ∇P(x*)) = 0` gives
//! `∂L/∂c = −t · B (Bᵀ ∇²P B)⁻¹ Bᵀ ∂L/∂x`.

use nalgebra::DVector;

use crate::graph::FlowGraph;
use crate::smoothed::{Factor, NewtonSystem, SmoothedSolution};
use crate::{Error, Result};

/// The linear map `∂L/∂x ↦ ∂L/∂c` at one smoothed optimum, factorized once.
pub struct CostJacobian<'g> {
    graph: &'g FlowGraph,
    temperature: f64,
    factor: Factor<'g>,
}

impl<'g> CostJacobian<'g> {
    pub fn new(
        graph: &'g FlowGraph,
        solution: &SmoothedSolution,
        system: NewtonSystem,
    ) -> Result<Self> {
        if solution.x.len() != graph.variable_count() {
            return Err(Error::Shape {
                expected: graph.variable_count(),
                actual: solution.x.len(),
                context: "smoothed solution",
            });
        }
        let hessian = solution.barrier().hessian_diag;
        let factor = Factor::new(graph, &hessian, system)?;
        Ok(Self {
            graph,
            temperature: solution.temperature,
            factor,
        })
    }

    pub fn apply(&self, dl_dx: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.graph.variable_count();
        if dl_dx.len() != m {
            return Err(Error::Shape {
                expected: m,
                actual: dl_dx.len(),
                context: "dL/dx",
            });
        }
        let v = self.factor.restricted_inverse(self.graph, dl_dx).step;
        Ok(v * -self.temperature)
    }
}

pub struct GradResult<'g> {
    pub dl_dc: DVector<f64>,
    /// Factorized map, reusable for further vectors at the same optimum.
    pub jacobian: CostJacobian<'g>,
}

/// `∂L/∂c` using the Newton system the forward pass used.
pub fn grad_costs<'g>(
    graph: &'g FlowGraph,
    solution: &SmoothedSolution,
    dl_dx: &DVector<f64>,
) -> Result<GradResult<'g>> {
    grad_costs_with(graph, solution, dl_dx, solution.system)
}

pub fn grad_costs_with<'g>(
    graph: &'g FlowGraph,
    solution: &SmoothedSolution,
    dl_dx: &DVector<f64>,
    system: NewtonSystem,
) -> Result<GradResult<'g>> {
    let jacobian = CostJacobian::new(graph, solution, system)?;
    let dl_dc = jacobian.apply(dl_dx)?;
    Ok(GradResult { dl_dc, jacobian })
}
