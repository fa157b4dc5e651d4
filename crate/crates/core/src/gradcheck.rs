//! Finite-difference validation of the backward pass and of the full chain
//! from model parameters to the training loss.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backward::grad_costs;
use crate::cost::{Architecture, AuxTable, LearnedModel, PAIR_FEATURE_LEN};
use crate::detections::{generate_synthetic, SynthConfig};
use crate::graph::{FlowGraph, GraphConfig};
use crate::smoothed::{solve_smoothed, NewtonOptions};
use crate::training::{weighted_loss, LossKind, LossWeights, TrainingWindow};
use crate::{Error, Result};

const AUX_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub graphs: usize,
    pub max_detections: usize,
    /// Detections are spread over this many frames.
    pub frames: usize,
    pub delta: f64,
    pub tolerance: f64,
    pub chain_windows: usize,
    pub chain_architecture: Architecture,
    pub chain_delta: f64,
    pub chain_tolerance: f64,
    pub newton: NewtonOptions,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            graphs: 50,
            max_detections: 6,
            frames: 4,
            delta: 1e-4,
            tolerance: 1e-4,
            chain_windows: 3,
            chain_architecture: Architecture::Mlp2,
            // Small enough to rarely straddle a ReLU kink.
            chain_delta: 1e-5,
            chain_tolerance: 1e-3,
            newton: NewtonOptions::default(),
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_detections == 0 || self.frames == 0 {
            return Err(Error::InvalidInput(
                "gradcheck needs at least one detection and frame".into(),
            ));
        }
        if !self.chain_architecture.is_learned() {
            return Err(Error::InvalidInput(format!(
                "{} has no parameters to check",
                self.chain_architecture
            )));
        }
        for (name, v) in [
            ("delta", self.delta),
            ("tolerance", self.tolerance),
            ("chain_delta", self.chain_delta),
            ("chain_tolerance", self.chain_tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        self.newton.validate()
    }
}

/// Cost-gradient check on one random graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphCheck {
    pub detections: usize,
    pub variables: usize,
    /// Largest componentwise `|fd − analytic| / max(|fd|, |analytic|)`.
    pub max_rel_error: f64,
    /// `∂x*_k/∂c_k < 0` for the most active variable, analytically and by
    /// finite differences.
    pub sign_ok: bool,
}

/// Parameter-gradient check on one synthetic window.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainCheck {
    pub detections: usize,
    pub parameters: usize,
    /// `‖fd − analytic‖ / max(‖fd‖, ‖analytic‖)` over all parameters.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub graphs: Vec<GraphCheck>,
    pub chains: Vec<ChainCheck>,
}

impl GraphCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance && self.sign_ok
    }
}

impl GradcheckReport {
    pub fn max_cost_error(&self) -> f64 {
        self.graphs
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn max_chain_error(&self) -> f64 {
        self.chains.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.graphs.iter().all(|g| g.passed(self.config.tolerance))
            && self
                .chains
                .iter()
                .all(|c| c.rel_error <= self.config.chain_tolerance)
    }

    pub fn to_text(&self) -> String {
        let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let cfg = &self.config;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "gradcheck seed={} graphs={} delta={:e} tolerance={:e} chain={} chain_delta={:e} chain_tolerance={:e}",
            cfg.seed, cfg.graphs, cfg.delta, cfg.tolerance, cfg.chain_architecture, cfg.chain_delta, cfg.chain_tolerance
        );
        for (i, g) in self.graphs.iter().enumerate() {
            let _ = writeln!(
                out,
                "graph {i}: detections={} variables={} max_rel_error={:.3e} sign={} {}",
                g.detections,
                g.variables,
                g.max_rel_error,
                if g.sign_ok { "ok" } else { "wrong" },
                verdict(g.passed(cfg.tolerance))
            );
        }
        for (i, c) in self.chains.iter().enumerate() {
            let _ = writeln!(
                out,
                "chain {i}: detections={} parameters={} rel_error={:.3e} {}",
                c.detections,
                c.parameters,
                c.rel_error,
                verdict(c.rel_error <= cfg.chain_tolerance)
            );
        }
        let _ = writeln!(
            out,
            "result: {} (max cost error {:.3e}, max chain error {:.3e})",
            verdict(self.passed()),
            self.max_cost_error(),
            self.max_chain_error()
        );
        out
    }
}

fn random_graph(rng: &mut ChaCha8Rng, config: &GradcheckConfig) -> Result<FlowGraph> {
    let n = rng.random_range(1..=config.max_detections);
    let mut frames: Vec<usize> = (0..n).map(|_| rng.random_range(0..config.frames)).collect();
    frames.sort_unstable();
    let mut links = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if frames[i] < frames[j] && rng.random_bool(0.6) {
                links.push((i, j));
            }
        }
    }
    FlowGraph::from_links(frames, links, GraphConfig::default().edge_epsilon)
}

fn check_graph(seed: u64, config: &GradcheckConfig) -> Result<GraphCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = random_graph(&mut rng, config)?;
    let m = graph.variable_count();
    let costs = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    let target = DVector::from_fn(m, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let weights = DVector::from_element(m, 1.0);

    let solve = |c: &DVector<f64>| solve_smoothed(&graph, c, &config.newton);
    let loss = |c: &DVector<f64>| -> Result<f64> {
        Ok(weighted_loss(&solve(c)?.x, &target, &weights, LossKind::Squared)?.0)
    };
    let solution = solve(&costs)?;
    let (_, dl_dx) = weighted_loss(&solution.x, &target, &weights, LossKind::Squared)?;
    let grad = grad_costs(&graph, &solution, &dl_dx)?;

    let mut max_rel_error: f64 = 0.0;
    for k in 0..m {
        let fd = central_difference(&costs, k, config.delta, &loss)?;
        max_rel_error = max_rel_error.max(relative_error(fd, grad.dl_dc[k]));
    }

    let k = solution.x.imax();
    let unit = DVector::from_fn(m, |i, _| if i == k { 1.0 } else { 0.0 });
    let analytic = grad.jacobian.apply(&unit)?[k];
    let fd = central_difference(&costs, k, config.delta, &|c| Ok(solve(c)?.x[k]))?;
    Ok(GraphCheck {
        detections: graph.detection_count(),
        variables: m,
        max_rel_error,
        sign_ok: analytic < 0.0 && fd < 0.0,
    })
}

fn check_chain(seed: u64, config: &GradcheckConfig) -> Result<ChainCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let synth = SynthConfig {
        frame_count: 3,
        initial_objects: 2,
        birth_rate: 0.0,
        death_prob: 0.0,
        miss_rate: 0.1,
        fp_rate: 0.3,
        ..SynthConfig::default()
    };
    let (dets, gt) = generate_synthetic(&synth, rng.random())?;
    let aux = (config.chain_architecture == Architecture::TwoStream).then(|| {
        let mut table = AuxTable::new(AUX_DIM);
        for a in dets.detections() {
            for b in dets.detections() {
                if a.frame < b.frame {
                    let values = (0..AUX_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
                    table.insert(a, b, values).expect("dimension matches");
                }
            }
        }
        table
    });
    let window = TrainingWindow::new(
        dets.detections(),
        &gt,
        aux.as_ref(),
        &GraphConfig::default(),
        &LossWeights::default(),
    )?
    .ok_or_else(|| Error::InvalidInput("synthetic window has no detections".into()))?;
    let aux_dim = aux.as_ref().map(|a| a.dim());
    let model = LearnedModel::new(
        config.chain_architecture,
        PAIR_FEATURE_LEN,
        aux_dim,
        &mut rng,
    )?;
    let (_, analytic) = window.loss_and_gradient(&model, &config.newton, LossKind::Squared)?;

    let theta = model.to_flat();
    let loss = |p: &DVector<f64>| -> Result<f64> {
        let mut m = model.clone();
        m.set_flat(p.as_slice())?;
        window.loss(&m, &config.newton, LossKind::Squared)
    };
    let fd = (0..theta.len())
        .into_par_iter()
        .map(|k| central_difference(&theta, k, config.chain_delta, &loss))
        .collect::<Result<Vec<_>>>()?;
    let fd = DVector::from_vec(fd);
    let denom = fd.norm().max(analytic.norm()).max(f64::MIN_POSITIVE);
    Ok(ChainCheck {
        detections: window.graph.detection_count(),
        parameters: theta.len(),
        rel_error: (&fd - &analytic).norm() / denom,
    })
}

fn central_difference(
    at: &DVector<f64>,
    k: usize,
    delta: f64,
    f: &(dyn Fn(&DVector<f64>) -> Result<f64> + Sync),
) -> Result<f64> {
    let mut plus = at.clone();
    plus[k] += delta;
    let mut minus = at.clone();
    minus[k] -= delta;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * delta))
}

/// Componentwise relative error; exact zeros on both sides count as agreement.
fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

/// Runs the whole finite-difference suite. The result depends only on the
/// configuration.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    config.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    let graph_seeds: Vec<u64> = (0..config.graphs).map(|_| seeds.random()).collect();
    let chain_seeds: Vec<u64> = (0..config.chain_windows).map(|_| seeds.random()).collect();
    let graphs = graph_seeds
        .par_iter()
        .map(|&s| check_graph(s, config))
        .collect::<Result<Vec<_>>>()?;
    let chains = chain_seeds
        .iter()
        .map(|&s| check_chain(s, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        config: config.clone(),
        graphs,
        chains,
    })
}
