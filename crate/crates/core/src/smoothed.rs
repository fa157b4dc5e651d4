//! Forward pass of the differentiable layer: the log-barrier smoothed LP.
//!
//! Box constraints `0 ≤ x ≤ 1` become the barrier
//! `P(x) = −Σ_k [log x_k + log(1 − x_k)]`, and the conservation constraints
//! are eliminated by writing `x = x0 + B z`. The resulting unconstrained
//! problem `min_z t·cᵀx(z) + P(x(z))` with `t = M / ε` is solved by damped
//! Newton steps from `z = 0`.
//!
//! Two algebraically identical ways of computing the Newton step are
//! provided. [`NewtonSystem::NullSpace`] factorizes `H = Bᵀ ∇²P B` directly.
//! [`NewtonSystem::RangeSpace`] solves the equivalent KKT system through the
//! Schur complement `C ∇²P⁻¹ Cᵀ`, whose size is `2N` instead of `M − 2N`,
//! and never forms `B`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::graph::FlowGraph;
use crate::{Error, Result};

/// Keeps iterates this far from the box boundary.
const BOUNDARY_MARGIN: f64 = 1e-12;

/// Newton decrement below which a full step is accepted without the
/// sufficient-decrease test (the quadratic convergence region; the test is
/// dominated by rounding error there).
const QUADRATIC_REGION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NewtonSystem {
    #[default]
    NullSpace,
    RangeSpace,
}

impl std::str::FromStr for NewtonSystem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "null" | "nullspace" => Ok(NewtonSystem::NullSpace),
            "range" | "rangespace" => Ok(NewtonSystem::RangeSpace),
            _ => Err(Error::InvalidInput(format!(
                "unknown Newton system {s:?}; expected null_space or range_space"
            ))),
        }
    }
}

/// Solve a sequence of problems with decreasing `ε`, warm-starting each from
/// the previous optimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annealing {
    pub start_epsilon: f64,
    /// Multiplier applied to `ε` between stages, in `(0, 1)`.
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOptions {
    /// Barrier accuracy; the temperature is `t = M / epsilon`.
    pub epsilon: f64,
    pub grad_tolerance: f64,
    pub max_iterations: usize,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    pub system: NewtonSystem,
    pub annealing: Option<Annealing>,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            grad_tolerance: 1e-8,
            max_iterations: 100,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            system: NewtonSystem::NullSpace,
            annealing: None,
        }
    }
}

impl NewtonOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.epsilon,
            self.grad_tolerance,
            self.shrink,
            self.sufficient_decrease,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.max_iterations == 0 {
            return Err(Error::InvalidInput(
                "newton options must be positive".into(),
            ));
        }
        if self.shrink >= 1.0 || self.sufficient_decrease >= 0.5 {
            return Err(Error::InvalidInput(
                "shrink must be < 1 and sufficient_decrease < 0.5".into(),
            ));
        }
        if let Some(a) = self.annealing {
            if !(a.factor > 0.0 && a.factor < 1.0 && a.start_epsilon >= self.epsilon) {
                return Err(Error::InvalidInput(
                    "annealing needs 0 < factor < 1 and start_epsilon >= epsilon".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SmoothedSolution {
    /// Null-space coordinates; only tracked by [`NewtonSystem::NullSpace`].
    pub z: Option<DVector<f64>>,
    /// Optimal flow `x* = x0 + B z*`.
    pub x: DVector<f64>,
    /// `1 − x*`, tracked separately so that coordinates close to 1 keep
    /// full relative precision.
    pub upper: DVector<f64>,
    pub temperature: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub system: NewtonSystem,
    /// Objective value after every accepted step, starting at `x0`.
    pub objective_trace: Vec<f64>,
    /// Number of successful positive-definite factorizations.
    pub factorizations: usize,
}

/// Barrier value, gradient and (diagonal) Hessian at a point of the box.
#[derive(Debug, Clone)]
pub struct BarrierTerms {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian_diag: DVector<f64>,
}

/// `P(x) = −Σ log(1 − x_k) − Σ log(x_k)` with its derivatives. Because the
/// box matrix is `[I; −I]`, the Hessian `Σ a_i a_iᵀ / (b_i − a_iᵀx)²` is
/// diagonal.
pub fn barrier_terms(x: &DVector<f64>) -> Result<BarrierTerms> {
    if let Some((index, &value)) = x
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0 && **v < 1.0))
    {
        return Err(Error::NotInterior { index, value });
    }
    let upper = x.map(|v| 1.0 - v);
    Ok(barrier_from_slacks(x, &upper))
}

fn barrier_from_slacks(lower: &DVector<f64>, upper: &DVector<f64>) -> BarrierTerms {
    let value = -lower
        .iter()
        .zip(upper.iter())
        .map(|(l, u)| l.ln() + u.ln())
        .sum::<f64>();
    let gradient = upper.zip_map(lower, |u, l| 1.0 / u - 1.0 / l);
    let hessian_diag = upper.zip_map(lower, |u, l| 1.0 / (u * u) + 1.0 / (l * l));
    BarrierTerms {
        value,
        gradient,
        hessian_diag,
    }
}

fn objective(t: f64, costs: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> f64 {
    let barrier: f64 = lower
        .iter()
        .zip(upper.iter())
        .map(|(l, u)| l.ln() + u.ln())
        .sum();
    t * costs.dot(lower) - barrier
}

/// Objective change along `alpha·dx`, free of the cancellation in `f_new - f`.
fn objective_change(
    t: f64,
    costs: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    dx: &DVector<f64>,
    alpha: f64,
) -> f64 {
    let barrier: f64 = lower
        .iter()
        .zip(upper.iter())
        .zip(dx.iter())
        .map(|((l, u), d)| (alpha * d / l).ln_1p() + (-alpha * d / u).ln_1p())
        .sum();
    t * alpha * costs.dot(dx) - barrier
}

/// `C D⁻¹ Cᵀ` for a diagonal `D`, assembled from the sparse structure of `C`.
pub(crate) fn schur_complement(graph: &FlowGraph, inv_diag: &DVector<f64>) -> DMatrix<f64> {
    let n = graph.detection_count();
    let mut s = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        // in_i: +1 in row i; out_i: +1 in row N+i; det_i: -1 in rows i and N+i.
        s[(i, i)] += inv_diag[graph.in_var(i)];
        s[(n + i, n + i)] += inv_diag[graph.out_var(i)];
        let w = inv_diag[graph.det_var(i)];
        s[(i, i)] += w;
        s[(n + i, n + i)] += w;
        s[(i, n + i)] += w;
        s[(n + i, i)] += w;
    }
    for (k, &(i, j)) in graph.links().iter().enumerate() {
        // link (i, j): +1 in the in-row of j and the out-row of i.
        let w = inv_diag[graph.link_var(k)];
        let (a, b) = (j, n + i);
        s[(a, a)] += w;
        s[(b, b)] += w;
        s[(a, b)] += w;
        s[(b, a)] += w;
    }
    s
}

/// Factorized Newton system at one point.
pub(crate) enum Factor<'g> {
    NullSpace {
        basis: &'g DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
    },
    RangeSpace {
        inv_diag: DVector<f64>,
        chol: Cholesky<f64, Dyn>,
    },
}

impl<'g> Factor<'g> {
    pub(crate) fn new(
        graph: &'g FlowGraph,
        hessian_diag: &DVector<f64>,
        system: NewtonSystem,
    ) -> Result<Self> {
        match system {
            NewtonSystem::NullSpace => {
                let basis = graph.null_basis()?;
                let scaled = DMatrix::from_fn(basis.nrows(), basis.ncols(), |r, c| {
                    basis[(r, c)] * hessian_diag[r]
                });
                let h = basis.transpose() * scaled;
                let chol = Cholesky::new(h).ok_or(Error::NotPositiveDefinite("Bᵀ ∇²P B"))?;
                Ok(Factor::NullSpace { basis, chol })
            }
            NewtonSystem::RangeSpace => {
                let inv_diag = hessian_diag.map(|d| 1.0 / d);
                let s = schur_complement(graph, &inv_diag);
                let chol = Cholesky::new(s).ok_or(Error::NotPositiveDefinite("C ∇²P⁻¹ Cᵀ"))?;
                Ok(Factor::RangeSpace { inv_diag, chol })
            }
        }
    }

    /// `B (Bᵀ D B)⁻¹ Bᵀ v`, the inverse Hessian restricted to the null space
    /// of `C`.
    pub(crate) fn restricted_inverse(&self, graph: &FlowGraph, v: &DVector<f64>) -> Restricted {
        match self {
            Factor::NullSpace { basis, chol } => {
                let w = chol.solve(&(basis.transpose() * v));
                Restricted {
                    step: *basis * &w,
                    coordinates: Some(w),
                    multipliers: None,
                }
            }
            Factor::RangeSpace { inv_diag, chol } => {
                // D⁻¹v − D⁻¹Cᵀ (C D⁻¹ Cᵀ)⁻¹ C D⁻¹ v
                let dv = inv_diag.component_mul(v);
                let nu = chol.solve(&graph.conservation_product(&dv));
                let corr = inv_diag.component_mul(&graph.conservation_transpose_product(&nu));
                Restricted {
                    step: dv - corr,
                    coordinates: None,
                    multipliers: Some(nu),
                }
            }
        }
    }
}

pub(crate) struct Restricted {
    pub step: DVector<f64>,
    /// `(Bᵀ D B)⁻¹ Bᵀ v` in null-space form.
    pub coordinates: Option<DVector<f64>>,
    /// The `ν` with `v = D·step + Cᵀν` in range-space form.
    pub multipliers: Option<DVector<f64>>,
}

fn projected_gradient_norm(
    graph: &FlowGraph,
    system: NewtonSystem,
    v: &DVector<f64>,
) -> Result<f64> {
    match system {
        NewtonSystem::NullSpace => Ok((graph.null_basis()?.transpose() * v).norm()),
        NewtonSystem::RangeSpace => graph.projected_norm(v),
    }
}

struct Stage {
    lower: DVector<f64>,
    upper: DVector<f64>,
    z: Option<DVector<f64>>,
    grad_norm: f64,
    iterations: usize,
    trace: Vec<f64>,
    factorizations: usize,
}

fn newton(
    graph: &FlowGraph,
    costs: &DVector<f64>,
    t: f64,
    options: &NewtonOptions,
    mut lower: DVector<f64>,
    mut upper: DVector<f64>,
    mut z: Option<DVector<f64>>,
) -> Result<Stage> {
    let mut f = objective(t, costs, &lower, &upper);
    let mut trace = vec![f];
    let mut factorizations = 0;
    let mut iterations = 0;
    let mut multipliers = DVector::zeros(2 * graph.detection_count());
    loop {
        let barrier = barrier_from_slacks(&lower, &upper);
        let v = costs * t + &barrier.gradient;
        let grad_norm = projected_gradient_norm(graph, options.system, &v)?;
        if grad_norm <= options.grad_tolerance {
            return Ok(Stage {
                lower,
                upper,
                z,
                grad_norm,
                iterations,
                trace,
                factorizations,
            });
        }
        if iterations >= options.max_iterations {
            return Err(Error::NotConverged {
                iterations,
                grad_norm,
            });
        }

        let factor = Factor::new(graph, &barrier.hessian_diag, options.system)?;
        factorizations += 1;
        // Cᵀλ lies in the kernel of the restricted inverse. Removing the
        // running multiplier estimate keeps the range-space right-hand side
        // small near the optimum, where D⁻¹v would otherwise cancel badly.
        let shifted = &v - graph.conservation_transpose_product(&multipliers);
        let restricted = factor.restricted_inverse(graph, &shifted);
        if let Some(nu) = &restricted.multipliers {
            multipliers += nu;
        }
        let dz = restricted.coordinates;
        let dx = -restricted.step;
        // Equals -vᵀdx for an exact Newton step, without its cancellation.
        let decrement_sq = dx.dot(&barrier.hessian_diag.component_mul(&dx));

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..200 {
            let feasible = lower
                .iter()
                .zip(upper.iter())
                .zip(dx.iter())
                .all(|((l, u), d)| {
                    l + alpha * d > BOUNDARY_MARGIN && u - alpha * d > BOUNDARY_MARGIN
                });
            if feasible {
                let change = objective_change(t, costs, &lower, &upper, &dx, alpha);
                let armijo = change <= -options.sufficient_decrease * alpha * decrement_sq;
                let quadratic = alpha == 1.0 && decrement_sq < QUADRATIC_REGION && change <= 0.0;
                if armijo || quadratic {
                    accepted = Some((&lower + &dx * alpha, &upper - &dx * alpha, f + change));
                    break;
                }
            }
            alpha *= options.shrink;
        }
        let Some((new_lower, new_upper, f_new)) = accepted else {
            return Err(Error::NotConverged {
                iterations,
                grad_norm,
            });
        };
        lower = new_lower;
        upper = new_upper;
        f = f_new;
        trace.push(f);
        if let (Some(z), Some(dz)) = (z.as_mut(), dz) {
            *z -= dz * alpha;
        }
        iterations += 1;
    }
}

/// Minimizes `t·cᵀx + P(x)` over the affine set `C x = 0` starting from the
/// graph's interior point, with `t = M / ε`.
pub fn solve_smoothed(
    graph: &FlowGraph,
    costs: &DVector<f64>,
    options: &NewtonOptions,
) -> Result<SmoothedSolution> {
    options.validate()?;
    let m = graph.variable_count();
    if costs.len() != m {
        return Err(Error::Shape {
            expected: m,
            actual: costs.len(),
            context: "cost vector",
        });
    }
    if let Some(k) = costs.iter().position(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(format!("cost {k} is not finite")));
    }

    let mut epsilons = Vec::new();
    if let Some(a) = options.annealing {
        let mut eps = a.start_epsilon;
        while eps > options.epsilon {
            epsilons.push(eps);
            eps *= a.factor;
        }
    }
    epsilons.push(options.epsilon);

    let x0 = graph.interior().clone();
    let mut lower = x0.clone();
    let mut upper = x0.map(|v| 1.0 - v);
    let mut z = match options.system {
        NewtonSystem::NullSpace => Some(DVector::zeros(m - 2 * graph.detection_count())),
        NewtonSystem::RangeSpace => None,
    };
    let mut iterations = 0;
    let mut factorizations = 0;
    let mut trace = Vec::new();
    let mut grad_norm = f64::INFINITY;
    let mut temperature = 0.0;
    for eps in epsilons {
        temperature = m as f64 / eps;
        let stage =
            newton(graph, costs, temperature, options, lower, upper, z).map_err(|e| match e {
                Error::NotConverged {
                    iterations: it,
                    grad_norm,
                } => Error::NotConverged {
                    iterations: iterations + it,
                    grad_norm,
                },
                other => other,
            })?;
        lower = stage.lower;
        upper = stage.upper;
        z = stage.z;
        iterations += stage.iterations;
        factorizations += stage.factorizations;
        grad_norm = stage.grad_norm;
        trace = stage.trace;
    }
    Ok(SmoothedSolution {
        z,
        x: lower,
        upper,
        temperature,
        grad_norm,
        iterations,
        system: options.system,
        objective_trace: trace,
        factorizations,
    })
}

impl SmoothedSolution {
    /// Barrier derivatives at the optimum, using both tracked slacks.
    pub fn barrier(&self) -> BarrierTerms {
        barrier_from_slacks(&self.x, &self.upper)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcf::solve_min_cost_flow;

    #[test]
    fn barrier_at_center_and_quarter() {
        let b = barrier_terms(&DVector::from_vec(vec![0.5, 0.25])).unwrap();
        assert_eq!(b.gradient[0], 0.0);
        assert_eq!(b.hessian_diag[0], 8.0);
        assert!((b.hessian_diag[1] - (16.0 / 9.0 + 16.0)).abs() < 1e-12);
        assert!(barrier_terms(&DVector::from_vec(vec![0.5, 1.0])).is_err());
        assert!(barrier_terms(&DVector::from_vec(vec![0.0])).is_err());
    }

    #[test]
    fn barrier_gradient_matches_finite_differences() {
        let x = DVector::from_vec(vec![0.1, 0.37, 0.5, 0.82, 0.97]);
        let b = barrier_terms(&x).unwrap();
        let h = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd =
                (barrier_terms(&xp).unwrap().value - barrier_terms(&xm).unwrap().value) / (2.0 * h);
            let rel = (fd - b.gradient[k]).abs() / b.gradient[k].abs().max(1e-12);
            assert!(
                rel <= 1e-6 || (fd - b.gradient[k]).abs() < 1e-8,
                "k={k} fd={fd} an={}",
                b.gradient[k]
            );
        }
    }

    #[test]
    fn zero_cost_isolated_detection_sits_at_center() {
        let g = FlowGraph::from_links(vec![0], vec![], 1e-3).unwrap();
        let sol = solve_smoothed(&g, &DVector::zeros(3), &NewtonOptions::default()).unwrap();
        for k in 0..3 {
            assert!((sol.x[k] - 0.5).abs() < 1e-12);
        }
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn rounding_matches_exact_on_linked_pair() {
        let g = FlowGraph::from_links(vec![0, 1], vec![(0, 1)], 1e-3).unwrap();
        let c = DVector::from_vec(vec![0.2, 0.2, -0.5, -0.5, 0.2, 0.2, 0.1]);
        let opts = NewtonOptions {
            epsilon: 0.01,
            ..NewtonOptions::default()
        };
        let sol = solve_smoothed(&g, &c, &opts).unwrap();
        let exact = solve_min_cost_flow(&g, &c).unwrap();
        let rounded = sol.x.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        assert_eq!(rounded, exact.x);
        assert!(sol.grad_norm <= 1e-8);
    }

    #[test]
    fn null_and_range_space_agree() {
        let g = FlowGraph::from_links(
            vec![0, 0, 1, 1, 2],
            vec![(0, 2), (0, 3), (1, 2), (1, 3), (2, 4), (3, 4)],
            1e-3,
        )
        .unwrap();
        let c = DVector::from_fn(g.variable_count(), |k, _| {
            ((k * 37 % 11) as f64 - 5.0) / 7.0
        });
        let a = solve_smoothed(&g, &c, &NewtonOptions::default()).unwrap();
        let b = solve_smoothed(
            &g,
            &c,
            &NewtonOptions {
                system: NewtonSystem::RangeSpace,
                ..NewtonOptions::default()
            },
        )
        .unwrap();
        assert!((&a.x - &b.x).amax() < 1e-10);
        assert!(b.z.is_none());
        let z = a.z.as_ref().unwrap();
        let recon = g.interior() + g.null_basis().unwrap() * z;
        assert!((recon - &a.x).amax() < 1e-10);
    }

    #[test]
    fn annealing_reaches_same_optimum() {
        let g = FlowGraph::from_links(vec![0, 1, 2], vec![(0, 1), (1, 2), (0, 2)], 1e-3).unwrap();
        let c = DVector::from_fn(g.variable_count(), |k, _| (k as f64 * 0.7).sin());
        let plain = solve_smoothed(&g, &c, &NewtonOptions::default()).unwrap();
        let annealed = solve_smoothed(
            &g,
            &c,
            &NewtonOptions {
                annealing: Some(Annealing {
                    start_epsilon: 10.0,
                    factor: 0.1,
                }),
                ..NewtonOptions::default()
            },
        )
        .unwrap();
        assert!((plain.x - annealed.x).amax() < 1e-9);
    }

    #[test]
    fn non_convergence_reports_gradient_norm() {
        let g = FlowGraph::from_links(vec![0, 1], vec![(0, 1)], 1e-3).unwrap();
        let c = DVector::from_element(7, -3.0);
        let opts = NewtonOptions {
            max_iterations: 1,
            ..NewtonOptions::default()
        };
        match solve_smoothed(&g, &c, &opts) {
            Err(Error::NotConverged { grad_norm, .. }) => assert!(grad_norm > 1e-8),
            other => panic!("unexpected {other:?}"),
        }
    }
}
