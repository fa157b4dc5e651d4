//! Run configuration: a TOML document with a versioned schema, dotted
//! command-line overrides and validation that reports the offending field.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use flowtrack::cost::{Architecture, HandcraftedA, HandcraftedB};
use flowtrack::detections::{Format, SynthConfig};
use flowtrack::gradcheck::GradcheckConfig;
use flowtrack::graph::GraphConfig;
use flowtrack::smoothed::{NewtonOptions, NewtonSystem};
use flowtrack::tracking::WindowConfig;
use flowtrack::training::{LossKind, LossWeights, TrainConfig};
use serde::Deserialize;
use toml::{Table, Value};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Field { path: String, message: String },
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config is not valid TOML: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("override {0:?} is not of the form --section.key=value")]
    Override(String),
}

pub fn field_error(path: impl Into<String>, message: impl ToString) -> ConfigError {
    ConfigError::Field {
        path: path.into(),
        message: message.to_string(),
    }
}

/// One path or a list of paths.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum PathList {
    #[default]
    None,
    One(PathBuf),
    Many(Vec<PathBuf>),
}

impl PathList {
    pub fn paths(&self) -> Vec<PathBuf> {
        match self {
            PathList::None => Vec::new(),
            PathList::One(p) => vec![p.clone()],
            PathList::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub formats: Formats,
    pub graph: GraphSection,
    pub window: WindowSection,
    pub cost: CostSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub synth: SynthSection,
    pub eval: EvalSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            paths: Paths::default(),
            formats: Formats::default(),
            graph: GraphSection::default(),
            window: WindowSection::default(),
            cost: CostSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            synth: SynthSection::default(),
            eval: EvalSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub detections: PathList,
    pub groundtruth: PathList,
    /// Tracker output scored by `eval`.
    pub results: PathList,
    /// Parameter container read by `track` for learned models.
    pub model: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            detections: PathList::None,
            groundtruth: PathList::None,
            results: PathList::None,
            model: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Formats {
    pub detections: String,
    pub groundtruth: String,
    pub results: String,
}

impl Default for Formats {
    fn default() -> Self {
        Self {
            detections: "mot".into(),
            groundtruth: "mot".into(),
            results: "mot".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub max_gap: usize,
    /// Zero disables spatial pruning.
    pub prune_radius: f64,
    pub edge_epsilon: f64,
}

impl Default for GraphSection {
    fn default() -> Self {
        let d = GraphConfig::default();
        Self {
            max_gap: d.max_gap,
            prune_radius: d.prune_radius.unwrap_or(0.0),
            edge_epsilon: d.edge_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub length: usize,
    pub stride: usize,
    pub mode: String,
}

impl Default for WindowSection {
    fn default() -> Self {
        let d = WindowConfig::default();
        Self {
            length: d.length,
            stride: d.stride,
            mode: "middle".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    /// `handcrafted_A`, `handcrafted_B`, or a learned architecture whose
    /// parameters are read from `paths.model`.
    pub model: String,
    pub handcrafted_a: HandcraftedASection,
    pub handcrafted_b: HandcraftedBSection,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            model: "handcrafted_B".into(),
            handcrafted_a: HandcraftedASection::default(),
            handcrafted_b: HandcraftedBSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandcraftedASection {
    pub entry_cost: f64,
    pub skip_rate: f64,
    pub max_velocity: f64,
}

impl Default for HandcraftedASection {
    fn default() -> Self {
        let d = HandcraftedA::default();
        Self {
            entry_cost: d.entry_cost,
            skip_rate: d.skip_rate,
            max_velocity: d.max_velocity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandcraftedBSection {
    pub entry_cost: f64,
    pub confidence_weight: f64,
    pub gap_penalty: f64,
    pub score_weight: f64,
}

impl Default for HandcraftedBSection {
    fn default() -> Self {
        let d = HandcraftedB::default();
        Self {
            entry_cost: d.entry_cost,
            confidence_weight: d.confidence_weight,
            gap_penalty: d.gap_penalty,
            score_weight: d.score_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub architecture: String,
    pub iterations: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub window: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    pub validation_fraction: f64,
    pub validation_interval: usize,
    pub newton_system: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            architecture: "linear".into(),
            iterations: d.iterations,
            learning_rate: d.learning_rate,
            decay_factor: d.decay_factor,
            decay_period: d.decay_period,
            window: d.window,
            batch_size: d.batch_size,
            epsilon: d.epsilon,
            validation_fraction: d.validation_fraction,
            validation_interval: d.validation_interval,
            newton_system: "range_space".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub ambiguous: f64,
    pub positive: f64,
    pub link: f64,
    pub kind: String,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossWeights::default();
        Self {
            ambiguous: d.ambiguous,
            positive: d.positive,
            link: d.link,
            kind: "squared".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Sequences written by `synth`, seeded `seed`, `seed + 1`, ...
    pub sequences: usize,
    pub noiseless: bool,
    pub frame_count: usize,
    pub image_width: f64,
    pub image_height: f64,
    pub initial_objects: usize,
    pub birth_rate: f64,
    pub death_prob: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub box_height_min: f64,
    pub box_height_max: f64,
    pub aspect_ratio: f64,
    pub jitter_std: f64,
    pub miss_rate: f64,
    pub fp_rate: f64,
    pub tp_confidence: f64,
    pub fp_confidence: f64,
    pub confidence_noise_std: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            sequences: 1,
            noiseless: false,
            frame_count: d.frame_count,
            image_width: d.image_width,
            image_height: d.image_height,
            initial_objects: d.initial_objects,
            birth_rate: d.birth_rate,
            death_prob: d.death_prob,
            speed_min: d.speed_min,
            speed_max: d.speed_max,
            box_height_min: d.box_height_min,
            box_height_max: d.box_height_max,
            aspect_ratio: d.aspect_ratio,
            jitter_std: d.jitter_std,
            miss_rate: d.miss_rate,
            fp_rate: d.fp_rate,
            tp_confidence: d.tp_confidence,
            fp_confidence: d.fp_confidence,
            confidence_noise_std: d.confidence_noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub iou_threshold: f64,
    /// Score only the frames the tracking window emits.
    pub emitted_only: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            emitted_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub graphs: usize,
    pub max_detections: usize,
    pub frames: usize,
    pub delta: f64,
    pub tolerance: f64,
    pub chain_windows: usize,
    pub chain_architecture: String,
    pub chain_delta: f64,
    pub chain_tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let d = GradcheckConfig::default();
        Self {
            graphs: d.graphs,
            max_detections: d.max_detections,
            frames: d.frames,
            delta: d.delta,
            tolerance: d.tolerance,
            chain_windows: d.chain_windows,
            chain_architecture: d.chain_architecture.to_string(),
            chain_delta: d.chain_delta,
            chain_tolerance: d.chain_tolerance,
        }
    }
}

/// Parses a `--section.key=value` argument into its dotted key and value.
pub fn parse_override(arg: &str) -> Result<(String, Value), ConfigError> {
    let body = arg
        .strip_prefix("--")
        .ok_or_else(|| ConfigError::Override(arg.into()))?;
    let (key, raw) = body
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(arg.into()))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(arg.into()));
    }
    // TOML literals keep their type; anything else is a bare string.
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.into()));
    Ok((key.into(), value))
}

fn apply_override(table: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut node = table;
    let mut walked = String::new();
    for part in parts {
        if !walked.is_empty() {
            walked.push('.');
        }
        walked.push_str(part);
        node = match node
            .entry(part)
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            _ => return Err(field_error(walked, "is not a section")),
        };
    }
    node.insert(last.into(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies overrides in order and
    /// checks the schema version.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                toml::from_str::<Table>(&text)?
            }
            None => Table::new(),
        };
        for (key, value) in overrides {
            apply_override(&mut table, key, value.clone())?;
        }
        let config: RunConfig =
            serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
                let path = e.path().to_string();
                field_error(
                    if path == "." { "config".into() } else { path },
                    e.into_inner(),
                )
            })?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(field_error(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", config.schema_version),
            ));
        }
        Ok(config)
    }

    pub fn graph_config(&self) -> Result<GraphConfig, ConfigError> {
        let g = &self.graph;
        let config = GraphConfig {
            max_gap: g.max_gap,
            prune_radius: (g.prune_radius > 0.0).then_some(g.prune_radius),
            edge_epsilon: g.edge_epsilon,
        };
        config.validate().map_err(|e| field_error("graph", e))?;
        Ok(config)
    }

    pub fn window_config(&self) -> Result<WindowConfig, ConfigError> {
        let w = &self.window;
        let config = WindowConfig {
            length: w.length,
            stride: w.stride,
            mode: parse_field("window.mode", &w.mode)?,
        };
        config.validate().map_err(|e| field_error("window", e))?;
        Ok(config)
    }

    pub fn format(&self, which: &str) -> Result<Format, ConfigError> {
        let raw = match which {
            "detections" => &self.formats.detections,
            "groundtruth" => &self.formats.groundtruth,
            _ => &self.formats.results,
        };
        parse_field(&format!("formats.{which}"), raw)
    }

    pub fn cost_architecture(&self) -> Result<Architecture, ConfigError> {
        parse_field("cost.model", &self.cost.model)
    }

    pub fn handcrafted_a(&self) -> HandcraftedA {
        let a = &self.cost.handcrafted_a;
        HandcraftedA {
            entry_cost: a.entry_cost,
            skip_rate: a.skip_rate,
            max_velocity: a.max_velocity,
        }
    }

    pub fn handcrafted_b(&self) -> HandcraftedB {
        let b = &self.cost.handcrafted_b;
        HandcraftedB {
            entry_cost: b.entry_cost,
            confidence_weight: b.confidence_weight,
            gap_penalty: b.gap_penalty,
            score_weight: b.score_weight,
        }
    }

    pub fn loss_weights(&self) -> Result<LossWeights, ConfigError> {
        let l = &self.loss;
        let weights = LossWeights {
            ambiguous: l.ambiguous,
            positive: l.positive,
            link: l.link,
            kind: parse_field::<LossKind>("loss.kind", &l.kind)?,
        };
        weights.validate().map_err(|e| field_error("loss", e))?;
        Ok(weights)
    }

    pub fn train_architecture(&self) -> Result<Architecture, ConfigError> {
        let arch: Architecture = parse_field("train.architecture", &self.train.architecture)?;
        if !arch.is_learned() {
            return Err(field_error(
                "train.architecture",
                format!("{arch} has no trainable parameters"),
            ));
        }
        Ok(arch)
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let t = &self.train;
        let config = TrainConfig {
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            decay_factor: t.decay_factor,
            decay_period: t.decay_period,
            window: t.window,
            batch_size: t.batch_size,
            seed: self.seed,
            epsilon: t.epsilon,
            validation_fraction: t.validation_fraction,
            validation_interval: t.validation_interval,
            graph: self.graph_config()?,
            weights: self.loss_weights()?,
            newton: NewtonOptions {
                system: parse_field::<NewtonSystem>("train.newton_system", &t.newton_system)?,
                ..NewtonOptions::default()
            },
        };
        config.validate().map_err(|e| field_error("train", e))?;
        Ok(config)
    }

    pub fn synth_config(&self) -> Result<SynthConfig, ConfigError> {
        let s = &self.synth;
        let mut config = SynthConfig {
            frame_count: s.frame_count,
            image_width: s.image_width,
            image_height: s.image_height,
            initial_objects: s.initial_objects,
            birth_rate: s.birth_rate,
            death_prob: s.death_prob,
            speed_min: s.speed_min,
            speed_max: s.speed_max,
            box_height_min: s.box_height_min,
            box_height_max: s.box_height_max,
            aspect_ratio: s.aspect_ratio,
            jitter_std: s.jitter_std,
            miss_rate: s.miss_rate,
            fp_rate: s.fp_rate,
            tp_confidence: s.tp_confidence,
            fp_confidence: s.fp_confidence,
            confidence_noise_std: s.confidence_noise_std,
        };
        if s.noiseless {
            let quiet = SynthConfig::noiseless();
            config.jitter_std = quiet.jitter_std;
            config.miss_rate = quiet.miss_rate;
            config.fp_rate = quiet.fp_rate;
            config.confidence_noise_std = quiet.confidence_noise_std;
        }
        if s.sequences == 0 {
            return Err(field_error("synth.sequences", "must be positive"));
        }
        config.validate().map_err(|e| field_error("synth", e))?;
        Ok(config)
    }

    pub fn gradcheck_config(&self) -> Result<GradcheckConfig, ConfigError> {
        let g = &self.gradcheck;
        let config = GradcheckConfig {
            graphs: g.graphs,
            max_detections: g.max_detections,
            frames: g.frames,
            delta: g.delta,
            tolerance: g.tolerance,
            chain_windows: g.chain_windows,
            chain_architecture: parse_field("gradcheck.chain_architecture", &g.chain_architecture)?,
            chain_delta: g.chain_delta,
            chain_tolerance: g.chain_tolerance,
            newton: NewtonOptions::default(),
            seed: self.seed,
        };
        config.validate().map_err(|e| field_error("gradcheck", e))?;
        Ok(config)
    }

    pub fn eval_threshold(&self) -> Result<f64, ConfigError> {
        let t = self.eval.iou_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(field_error(
                "eval.iou_threshold",
                format!("must lie in (0, 1], got {t}"),
            ));
        }
        Ok(t)
    }

    /// Non-empty list of existing files at `paths.<name>`.
    pub fn input_files(&self, name: &str, command: &str) -> Result<Vec<PathBuf>, ConfigError> {
        let list = match name {
            "detections" => &self.paths.detections,
            "groundtruth" => &self.paths.groundtruth,
            _ => &self.paths.results,
        };
        let files = list.paths();
        if files.is_empty() {
            return Err(field_error(
                format!("paths.{name}"),
                format!("required by `{command}`"),
            ));
        }
        for (i, f) in files.iter().enumerate() {
            if !f.is_file() {
                let path = match list {
                    PathList::Many(_) => format!("paths.{name}[{i}]"),
                    _ => format!("paths.{name}"),
                };
                return Err(field_error(path, format!("no such file: {}", f.display())));
            }
        }
        Ok(files)
    }
}

fn parse_field<T>(path: &str, raw: &str) -> Result<T, ConfigError>
where
    T: FromStr,
    T::Err: ToString,
{
    raw.parse()
        .map_err(|e: T::Err| field_error(path, e.to_string()))
}
