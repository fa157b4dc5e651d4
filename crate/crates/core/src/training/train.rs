use std::collections::VecDeque;
use std::fmt::Write as _;

use log::{info, warn};
use nalgebra::DVector;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::gt::generate_gt_flow;
use super::loss::{adam_step, weighted_loss, AdamHyper, AdamState, LossKind, LossWeights};
use crate::backward::grad_costs;
use crate::cost::{edge_features, AuxTable, EdgeFeatures, LearnedModel};
use crate::detections::{Detection, DetectionSet, TrajectorySet};
use crate::graph::{build_graph, FlowGraph, GraphConfig};
use crate::smoothed::{solve_smoothed, NewtonOptions, NewtonSystem};
use crate::{Error, Result};

/// Iterations over which the skipped-window rate is watched.
const SKIP_WINDOW: usize = 100;
const MAX_SKIP_RATE: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct TrainingSequence {
    pub detections: DetectionSet,
    pub groundtruth: TrajectorySet,
    pub aux: Option<AuxTable>,
}

impl From<(DetectionSet, TrajectorySet)> for TrainingSequence {
    fn from((detections, groundtruth): (DetectionSet, TrajectorySet)) -> Self {
        Self {
            detections,
            groundtruth,
            aux: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Learning rate multiplier applied every `decay_period` iterations.
    pub decay_factor: f64,
    pub decay_period: usize,
    /// Frames per training window.
    pub window: usize,
    /// Windows per iteration.
    pub batch_size: usize,
    pub seed: u64,
    /// Barrier accuracy of the smoothed LP.
    pub epsilon: f64,
    /// Trailing share of every sequence held out for validation.
    pub validation_fraction: f64,
    /// Validation loss is computed every this many iterations (and before
    /// the first and after the last).
    pub validation_interval: usize,
    pub graph: GraphConfig,
    pub weights: LossWeights,
    pub newton: NewtonOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 1e-4,
            decay_factor: 0.1,
            decay_period: 20_000,
            window: 10,
            batch_size: 8,
            seed: 0,
            epsilon: 0.1,
            validation_fraction: 0.25,
            validation_interval: 100,
            graph: GraphConfig::default(),
            weights: LossWeights::default(),
            newton: NewtonOptions {
                system: NewtonSystem::RangeSpace,
                ..NewtonOptions::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("iterations", self.iterations),
            ("decay_period", self.decay_period),
            ("window", self.window),
            ("batch_size", self.batch_size),
            ("validation_interval", self.validation_interval),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidInput(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::InvalidInput(
                "decay_factor must lie in (0, 1]".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidInput("epsilon must be positive".into()));
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidInput(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        self.graph.validate()?;
        self.weights.validate()?;
        self.newton_options().validate()
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        self.learning_rate
            * self
                .decay_factor
                .powi((iteration / self.decay_period) as i32)
    }

    fn newton_options(&self) -> NewtonOptions {
        NewtonOptions {
            epsilon: self.epsilon,
            ..self.newton.clone()
        }
    }

    /// First validation frame of a sequence with `frames` frames.
    pub fn split_frame(&self, frames: usize) -> usize {
        frames - (frames as f64 * self.validation_fraction).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    /// Number of parameter updates applied before this record.
    pub iteration: usize,
    /// Mean batch loss, NaN when every window of the batch was skipped or for
    /// the initial record.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub learning_rate: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
}

impl TrainHistory {
    pub fn validation(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.records
            .iter()
            .filter_map(|r| r.val_loss.map(|v| (r.iteration, v)))
    }

    pub fn initial_val_loss(&self) -> Option<f64> {
        self.validation().next().map(|(_, v)| v)
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.validation().last().map(|(_, v)| v)
    }

    pub fn train_losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.records
            .iter()
            .filter(|r| r.iteration > 0)
            .map(|r| r.train_loss)
    }

    /// `iter,train_loss,val_loss` rows; empty fields where no value exists.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,train_loss,val_loss\n");
        let fmt = |v: f64| {
            if v.is_finite() {
                format!("{v}")
            } else {
                String::new()
            }
        };
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{}",
                r.iteration,
                fmt(r.train_loss),
                r.val_loss.map(fmt).unwrap_or_default()
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LearnedModel,
    pub history: TrainHistory,
}

/// A window of one sequence with everything that does not depend on the
/// model parameters precomputed.
pub struct TrainingWindow {
    pub graph: FlowGraph,
    pub features: EdgeFeatures,
    pub target: DVector<f64>,
    pub weights: DVector<f64>,
}

impl TrainingWindow {
    /// `None` when the window holds no detections.
    pub fn new(
        detections: &[Detection],
        groundtruth: &TrajectorySet,
        aux: Option<&AuxTable>,
        graph_config: &GraphConfig,
        weights: &LossWeights,
    ) -> Result<Option<Self>> {
        if detections.is_empty() {
            return Ok(None);
        }
        let graph = build_graph(detections, graph_config)?;
        let features = edge_features(&graph, detections, graph_config.max_gap, aux)?;
        let gt = generate_gt_flow(&graph, detections, groundtruth)?;
        let weights = weights.per_variable(&graph, &gt);
        Ok(Some(Self {
            graph,
            features,
            target: gt.x,
            weights,
        }))
    }

    /// Loss of the smoothed solution under `model`.
    pub fn loss(
        &self,
        model: &LearnedModel,
        newton: &NewtonOptions,
        kind: LossKind,
    ) -> Result<f64> {
        let (costs, _) = model.forward(&self.features)?;
        let solution = solve_smoothed(&self.graph, &costs, newton)?;
        Ok(weighted_loss(&solution.x, &self.target, &self.weights, kind)?.0)
    }

    /// Loss and its gradient with respect to the flat model parameters.
    pub fn loss_and_gradient(
        &self,
        model: &LearnedModel,
        newton: &NewtonOptions,
        kind: LossKind,
    ) -> Result<(f64, DVector<f64>)> {
        let (costs, cache) = model.forward(&self.features)?;
        let solution = solve_smoothed(&self.graph, &costs, newton)?;
        let (loss, dl_dx) = weighted_loss(&solution.x, &self.target, &self.weights, kind)?;
        let dl_dc = grad_costs(&self.graph, &solution, &dl_dx)?.dl_dc;
        Ok((loss, model.backward(&cache, &dl_dc)?))
    }
}

fn build_instances(
    sequences: &[TrainingSequence],
    config: &TrainConfig,
    validation: bool,
) -> Result<Vec<TrainingWindow>> {
    let mut spans = Vec::new();
    for (s, seq) in sequences.iter().enumerate() {
        let frames = seq.detections.frame_count();
        let split = config.split_frame(frames);
        let (lo, hi) = if validation {
            (split, frames)
        } else {
            (0, split)
        };
        let mut start = lo;
        while start + config.window <= hi {
            spans.push((s, start));
            start += 1;
        }
    }
    spans
        .par_iter()
        .map(|&(s, start)| {
            let seq = &sequences[s];
            let window = seq.detections.frame_range(start, start + config.window);
            TrainingWindow::new(
                window.detections(),
                &seq.groundtruth,
                seq.aux.as_ref(),
                &config.graph,
                &config.weights,
            )
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

/// Loss and parameter gradient of one window, or `None` if the forward solve
/// failed.
fn evaluate(
    model: &LearnedModel,
    instance: &TrainingWindow,
    newton: &NewtonOptions,
    kind: LossKind,
    with_gradient: bool,
) -> Result<Option<(f64, Option<DVector<f64>>)>> {
    let result = if with_gradient {
        instance
            .loss_and_gradient(model, newton, kind)
            .map(|(l, g)| (l, Some(g)))
    } else {
        instance.loss(model, newton, kind).map(|l| (l, None))
    };
    match result {
        Ok(v) => Ok(Some(v)),
        Err(e @ (Error::NotConverged { .. } | Error::NotPositiveDefinite(_))) => {
            warn!("skipping window: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn validation_loss(
    model: &LearnedModel,
    instances: &[TrainingWindow],
    newton: &NewtonOptions,
    kind: LossKind,
) -> Result<Option<f64>> {
    let losses = instances
        .par_iter()
        .map(|inst| evaluate(model, inst, newton, kind, false))
        .collect::<Result<Vec<_>>>()?;
    let ok: Vec<f64> = losses.into_iter().flatten().map(|(l, _)| l).collect();
    Ok((!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64))
}

/// Fits `model` by ADAM on randomly sampled training windows. Windows whose
/// forward solve fails are skipped; training aborts when more than 10% of the
/// windows in any run of 100 iterations were skipped.
pub fn train(
    sequences: &[TrainingSequence],
    config: &TrainConfig,
    mut model: LearnedModel,
) -> Result<TrainOutcome> {
    config.validate()?;
    if sequences.is_empty() {
        return Err(Error::InvalidInput(
            "training needs at least one sequence".into(),
        ));
    }
    let newton = config.newton_options();
    let kind = config.weights.kind;
    let train_set = build_instances(sequences, config, false)?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no training window of {} frames fits before the validation split",
            config.window
        )));
    }
    let val_set = build_instances(sequences, config, true)?;
    info!(
        "training on {} windows, validating on {}, {} parameters",
        train_set.len(),
        val_set.len(),
        model.parameter_count()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = model.to_flat();
    let mut adam = AdamState::new(params.len());
    let mut history = TrainHistory::default();
    history.records.push(TrainRecord {
        iteration: 0,
        train_loss: f64::NAN,
        val_loss: validation_loss(&model, &val_set, &newton, kind)?,
        learning_rate: config.learning_rate_at(0),
        skipped: 0,
    });
    let mut recent: VecDeque<(usize, usize)> = VecDeque::new();
    let batch = config.batch_size.min(train_set.len());

    for it in 0..config.iterations {
        let picks = sample(&mut rng, train_set.len(), batch).into_vec();
        let results = picks
            .par_iter()
            .map(|&w| evaluate(&model, &train_set[w], &newton, kind, true))
            .collect::<Result<Vec<_>>>()?;
        let mut grad = DVector::zeros(params.len());
        let mut loss = 0.0;
        let mut used = 0;
        for (l, g) in results.iter().flatten() {
            loss += l;
            grad += g.as_ref().unwrap();
            used += 1;
        }
        let skipped = batch - used;
        let lr = config.learning_rate_at(it);
        if used > 0 {
            grad /= used as f64;
            loss /= used as f64;
            let hyper = AdamHyper {
                learning_rate: lr,
                ..AdamHyper::default()
            };
            adam_step(&mut params, &grad, &mut adam, &hyper)?;
            model.set_flat(params.as_slice())?;
        } else {
            loss = f64::NAN;
        }

        recent.push_back((batch, skipped));
        if recent.len() > SKIP_WINDOW {
            recent.pop_front();
        }
        if recent.len() == SKIP_WINDOW || it + 1 == config.iterations {
            let total: usize = recent.iter().map(|r| r.0).sum();
            let bad: usize = recent.iter().map(|r| r.1).sum();
            if bad as f64 > MAX_SKIP_RATE * total as f64 {
                return Err(Error::TrainingAborted(format!(
                    "{bad} of {total} windows skipped in the {} iterations before iteration {}",
                    recent.len(),
                    it + 1
                )));
            }
        }

        let done = it + 1;
        let val_loss = if done % config.validation_interval == 0 || done == config.iterations {
            validation_loss(&model, &val_set, &newton, kind)?
        } else {
            None
        };
        info!(
            "iter {done} loss {loss:.6} lr {lr:e} skipped {skipped}{}",
            val_loss.map(|v| format!(" val {v:.6}")).unwrap_or_default()
        );
        history.records.push(TrainRecord {
            iteration: done,
            train_loss: loss,
            val_loss,
            learning_rate: lr,
            skipped,
        });
    }
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{Architecture, PAIR_FEATURE_LEN};
    use crate::detections::{generate_synthetic, SynthConfig};

    fn data(seed: u64) -> Vec<TrainingSequence> {
        let cfg = SynthConfig {
            frame_count: 20,
            ..SynthConfig::default()
        };
        (0..2)
            .map(|k| generate_synthetic(&cfg, seed + k).unwrap().into())
            .collect()
    }

    fn linear(seed: u64) -> LearnedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LearnedModel::new(Architecture::Linear, PAIR_FEATURE_LEN, None, &mut rng).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            iterations: 6,
            window: 5,
            batch_size: 3,
            validation_interval: 3,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let seqs = data(1);
        let a = train(&seqs, &quick(), linear(2)).unwrap();
        let b = train(&seqs, &quick(), linear(2)).unwrap();
        assert_eq!(a.model.to_flat(), b.model.to_flat());
        assert_eq!(a.history.to_csv(), b.history.to_csv());
        assert_ne!(a.model.to_flat(), linear(2).to_flat());
        let vals: Vec<_> = a.history.validation().map(|(i, _)| i).collect();
        assert_eq!(vals, vec![0, 3, 6]);
    }

    #[test]
    fn csv_header_and_rows() {
        let out = train(&data(3), &quick(), linear(4)).unwrap();
        let csv = out.history.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "iter,train_loss,val_loss");
        assert_eq!(lines.len(), 1 + 1 + 6);
        assert!(lines[1].starts_with("0,,"));
    }

    #[test]
    fn rejects_windows_that_do_not_fit() {
        let cfg = TrainConfig {
            window: 40,
            ..quick()
        };
        assert!(matches!(
            train(&data(5), &cfg, linear(6)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn learning_rate_steps_down() {
        let cfg = TrainConfig {
            decay_period: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(9), 1e-4);
        assert!((cfg.learning_rate_at(10) - 1e-5).abs() < 1e-20);
        assert_eq!(cfg.split_frame(50), 38);
    }

    #[test]
    fn repeated_solver_failure_aborts() {
        let cfg = TrainConfig {
            newton: NewtonOptions {
                max_iterations: 1,
                system: NewtonSystem::RangeSpace,
                ..NewtonOptions::default()
            },
            ..quick()
        };
        assert!(matches!(
            train(&data(7), &cfg, linear(8)),
            Err(Error::TrainingAborted(_))
        ));
    }
}
