//! Synthetic annotated sequences with constant-velocity targets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::{BoundingBox, Detection, DetectionSet, Trajectory, TrajectorySet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frame_count: usize,
    pub image_width: f64,
    pub image_height: f64,
    /// Targets alive in frame 0.
    pub initial_objects: usize,
    /// Expected number of new targets per frame (Poisson).
    pub birth_rate: f64,
    /// Probability that a target disappears after each frame.
    pub death_prob: f64,
    /// Speed range in pixels per frame; direction is uniform.
    pub speed_min: f64,
    pub speed_max: f64,
    pub box_height_min: f64,
    pub box_height_max: f64,
    /// Width / height of every box.
    pub aspect_ratio: f64,
    /// Standard deviation of detection box noise in pixels.
    pub jitter_std: f64,
    pub miss_rate: f64,
    /// Expected false positives per frame (Poisson).
    pub fp_rate: f64,
    pub tp_confidence: f64,
    pub fp_confidence: f64,
    pub confidence_noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frame_count: 50,
            image_width: 640.0,
            image_height: 480.0,
            initial_objects: 3,
            birth_rate: 0.08,
            death_prob: 0.02,
            speed_min: 1.0,
            speed_max: 6.0,
            box_height_min: 40.0,
            box_height_max: 120.0,
            aspect_ratio: 0.5,
            jitter_std: 2.0,
            miss_rate: 0.2,
            fp_rate: 0.5,
            tp_confidence: 0.75,
            fp_confidence: 0.35,
            confidence_noise_std: 0.15,
        }
    }
}

impl SynthConfig {
    /// Noise-free variant: no misses, no false positives, no jitter.
    pub fn noiseless() -> Self {
        Self {
            jitter_std: 0.0,
            miss_rate: 0.0,
            fp_rate: 0.0,
            confidence_noise_std: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidInput(format!("synth config: {m}")));
        if self.frame_count == 0 {
            return fail("frame_count must be positive");
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return fail("image size must be positive");
        }
        if !(self.birth_rate >= 0.0 && self.birth_rate.is_finite()) {
            return fail("birth_rate must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.death_prob) {
            return fail("death_prob must be in [0, 1]");
        }
        if !(self.speed_min >= 0.0 && self.speed_max >= self.speed_min) {
            return fail("speed range must satisfy 0 <= min <= max");
        }
        if !(self.box_height_min > 0.0 && self.box_height_max >= self.box_height_min) {
            return fail("box height range must satisfy 0 < min <= max");
        }
        if !(self.aspect_ratio > 0.0) {
            return fail("aspect_ratio must be positive");
        }
        if !(self.jitter_std >= 0.0) {
            return fail("jitter_std must be >= 0");
        }
        if !(0.0..1.0).contains(&self.miss_rate) {
            return fail("miss_rate must be in [0, 1)");
        }
        if !(self.fp_rate >= 0.0 && self.fp_rate.is_finite()) {
            return fail("fp_rate must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.tp_confidence) || !(0.0..=1.0).contains(&self.fp_confidence)
        {
            return fail("mean confidences must be in [0, 1]");
        }
        if !(self.confidence_noise_std >= 0.0) {
            return fail("confidence_noise_std must be >= 0");
        }
        Ok(())
    }
}

struct Target {
    id: u64,
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    height: f64,
    boxes: Vec<Detection>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn poisson(rng: &mut ChaCha8Rng, rate: f64) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    // Poisson::new only fails for non-positive or non-finite rates.
    let dist = Poisson::new(rate).expect("validated rate");
    dist.sample(rng) as usize
}

/// Generates one sequence of detections together with its ground truth.
///
/// The output is a pure function of `(config, seed)`.
pub fn generate_synthetic(
    config: &SynthConfig,
    seed: u64,
) -> Result<(DetectionSet, TrajectorySet)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (config.image_width, config.image_height);
    let mut next_id = 1u64;
    let mut alive: Vec<Target> = Vec::new();
    let mut finished: Vec<Target> = Vec::new();
    let mut detections = Vec::new();

    let spawn = |rng: &mut ChaCha8Rng, next_id: &mut u64| {
        let height = rng.random_range(config.box_height_min..=config.box_height_max);
        let speed = rng.random_range(config.speed_min..=config.speed_max);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let t = Target {
            id: *next_id,
            cx: rng.random_range(0.1 * w..0.9 * w),
            cy: rng.random_range(0.1 * h..0.9 * h),
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            height,
            boxes: Vec::new(),
        };
        *next_id += 1;
        t
    };

    for _ in 0..config.initial_objects {
        alive.push(spawn(&mut rng, &mut next_id));
    }

    for frame in 0..config.frame_count {
        if frame > 0 {
            for _ in 0..poisson(&mut rng, config.birth_rate) {
                alive.push(spawn(&mut rng, &mut next_id));
            }
        }

        let mut frame_dets = Vec::new();
        for t in alive.iter_mut() {
            let width = config.aspect_ratio * t.height;
            let gt_box = BoundingBox {
                left: t.cx - 0.5 * width,
                top: t.cy - 0.5 * t.height,
                width,
                height: t.height,
            };
            t.boxes.push(Detection::new(frame, gt_box, 1.0));

            let detected = rng.random::<f64>() >= config.miss_rate;
            let noise = [
                normal(&mut rng),
                normal(&mut rng),
                normal(&mut rng),
                normal(&mut rng),
            ];
            let conf_noise = normal(&mut rng);
            if detected {
                let s = config.jitter_std;
                let bbox = BoundingBox {
                    left: gt_box.left + s * noise[0],
                    top: gt_box.top + s * noise[1],
                    width: (gt_box.width + 0.5 * s * noise[2]).max(1.0),
                    height: (gt_box.height + 0.5 * s * noise[3]).max(1.0),
                };
                let confidence = (config.tp_confidence + config.confidence_noise_std * conf_noise)
                    .clamp(0.0, 1.0);
                frame_dets.push(Detection::new(frame, bbox, confidence));
            }
        }

        for _ in 0..poisson(&mut rng, config.fp_rate) {
            let height = rng.random_range(config.box_height_min..=config.box_height_max);
            let width = config.aspect_ratio * height;
            let bbox = BoundingBox {
                left: rng.random_range(0.0..(w - width).max(1.0)),
                top: rng.random_range(0.0..(h - height).max(1.0)),
                width,
                height,
            };
            let confidence = (config.fp_confidence
                + config.confidence_noise_std * normal(&mut rng))
            .clamp(0.0, 1.0);
            frame_dets.push(Detection::new(frame, bbox, confidence));
        }
        frame_dets.shuffle(&mut rng);
        detections.extend(frame_dets);

        // Advance: move, then retire targets that left the image or died.
        let mut still = Vec::with_capacity(alive.len());
        for mut t in alive.drain(..) {
            t.cx += t.vx;
            t.cy += t.vy;
            let inside = t.cx > 0.0 && t.cx < w && t.cy > 0.0 && t.cy < h;
            let dies = rng.random::<f64>() < config.death_prob;
            if inside && !dies {
                still.push(t);
            } else {
                finished.push(t);
            }
        }
        alive = still;
    }
    finished.extend(alive);
    finished.sort_by_key(|t| t.id);

    let sequence = format!("synth-{seed}");
    let mut dets = DetectionSet::new(sequence.clone(), detections, config.frame_count)?;
    dets.image_size = Some((w, h));
    let trajectories = finished
        .into_iter()
        .filter(|t| !t.boxes.is_empty())
        .map(|t| Trajectory {
            id: t.id,
            detections: t.boxes,
        })
        .collect();
    Ok((
        dets,
        TrajectorySet {
            sequence,
            trajectories,
        },
    ))
}
