use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use flowtrack::cost::{Architecture, CostModelParams};
use flowtrack::detections::{
    generate_synthetic, parse_detections, parse_groundtruth, write_detections, write_results,
    DetectionSet, Format, TrajectorySet,
};
use flowtrack::gradcheck::run_gradcheck;
use flowtrack::metrics::{evaluate, restrict_frames, MetricsReport};
use flowtrack::tracking::track_sequence;
use flowtrack::training::{train, TrainingSequence};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{field_error, RunConfig};

/// What a command reports besides errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// `gradcheck` ran but some check failed.
    ChecksFailed,
}

fn output_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.paths.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating output dir {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

/// File name without a trailing `.txt` and `.det`/`.gt`/`.res` tag.
fn sequence_name(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = name.strip_suffix(".txt").unwrap_or(&name);
    [".det", ".gt", ".res"]
        .iter()
        .find_map(|tag| name.strip_suffix(tag))
        .unwrap_or(name)
        .to_string()
}

fn read_detections(path: &Path, format: Format) -> Result<DetectionSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut set =
        parse_detections(format, &text).with_context(|| format!("parsing {}", path.display()))?;
    set.sequence = sequence_name(path);
    Ok(set)
}

fn read_trajectories(path: &Path, format: Format) -> Result<TrajectorySet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut set =
        parse_groundtruth(format, &text).with_context(|| format!("parsing {}", path.display()))?;
    set.sequence = sequence_name(path);
    Ok(set)
}

fn paired(
    config: &RunConfig,
    first: &str,
    second: &str,
    command: &str,
) -> Result<Vec<(PathBuf, PathBuf)>> {
    let a = config.input_files(first, command)?;
    let b = config.input_files(second, command)?;
    if a.len() != b.len() {
        return Err(field_error(
            format!("paths.{second}"),
            format!(
                "{} files do not pair with the {} files of paths.{first}",
                b.len(),
                a.len()
            ),
        )
        .into());
    }
    Ok(a.into_iter().zip(b).collect())
}

pub fn synth(config: &RunConfig) -> Result<Status> {
    let synth = config.synth_config()?;
    let det_format = config.format("detections")?;
    let gt_format = config.format("groundtruth")?;
    let dir = output_dir(config)?;
    for i in 0..config.synth.sequences {
        let seed = config.seed + i as u64;
        let (dets, gt) = generate_synthetic(&synth, seed)?;
        let name = format!("synth-{i:03}");
        write(
            &dir.join(format!("{name}.det.txt")),
            &write_detections(det_format, &dets),
        )?;
        write(
            &dir.join(format!("{name}.gt.txt")),
            &write_results(gt_format, &gt),
        )?;
        info!(
            "{name}: seed {seed}, {} detections, {} targets",
            dets.len(),
            gt.len()
        );
    }
    Ok(Status::Ok)
}

fn cost_model(config: &RunConfig) -> Result<CostModelParams> {
    let arch = config.cost_architecture()?;
    Ok(match arch {
        Architecture::HandcraftedA => CostModelParams::HandcraftedA(config.handcrafted_a()),
        Architecture::HandcraftedB => CostModelParams::HandcraftedB(config.handcrafted_b()),
        learned => {
            let path = config.paths.model.as_ref().ok_or_else(|| {
                field_error("paths.model", format!("required by cost.model = {learned}"))
            })?;
            if !path.is_file() {
                return Err(field_error(
                    "paths.model",
                    format!("no such file: {}", path.display()),
                )
                .into());
            }
            let model = CostModelParams::load(path)
                .with_context(|| format!("loading {}", path.display()))?;
            if model.architecture() != learned {
                return Err(field_error(
                    "cost.model",
                    format!("{} holds a {} model", path.display(), model.architecture()),
                )
                .into());
            }
            model
        }
    })
}

pub fn track(config: &RunConfig) -> Result<Status> {
    let files = config.input_files("detections", "track")?;
    let det_format = config.format("detections")?;
    let out_format = config.format("results")?;
    let window = config.window_config()?;
    let graph = config.graph_config()?;
    let model = cost_model(config)?;
    let dir = output_dir(config)?;
    let mut timing = String::new();
    for file in files {
        let dets = read_detections(&file, det_format)?;
        let start = Instant::now();
        let tracks = track_sequence(&dets, &model, &window, &graph, None)
            .with_context(|| format!("tracking {}", file.display()))?;
        let seconds = start.elapsed().as_secs_f64();
        write(
            &dir.join(format!("{}.res.txt", dets.sequence)),
            &write_results(out_format, &tracks),
        )?;
        timing.push_str(&format!(
            "sequence={} frames={} detections={} trajectories={} seconds={seconds:.6}\n",
            dets.sequence,
            dets.frame_count(),
            dets.len(),
            tracks.len()
        ));
    }
    write(&dir.join("track_timing.log"), &timing)?;
    Ok(Status::Ok)
}

pub fn train_model(config: &RunConfig) -> Result<Status> {
    let pairs = paired(config, "detections", "groundtruth", "train")?;
    let train_config = config.train_config()?;
    let arch = config.train_architecture()?;
    let det_format = config.format("detections")?;
    let gt_format = config.format("groundtruth")?;
    let sequences = pairs
        .iter()
        .map(|(d, g)| {
            Ok(TrainingSequence::from((
                read_detections(d, det_format)?,
                read_trajectories(g, gt_format)?,
            )))
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = output_dir(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let CostModelParams::Learned(initial) = CostModelParams::initial(arch, None, &mut rng)? else {
        unreachable!("train_architecture only yields learned architectures");
    };
    let outcome = train(&sequences, &train_config, initial)?;
    let model = CostModelParams::Learned(outcome.model);
    model.save(&dir.join("model.bin"))?;
    write(&dir.join("loss.csv"), &outcome.history.to_csv())?;
    if let (Some(first), Some(last)) = (
        outcome.history.initial_val_loss(),
        outcome.history.final_val_loss(),
    ) {
        info!("validation loss {first:.4} -> {last:.4}");
    }
    Ok(Status::Ok)
}

pub fn eval(config: &RunConfig) -> Result<Status> {
    let pairs = paired(config, "results", "groundtruth", "eval")?;
    let threshold = config.eval_threshold()?;
    let res_format = config.format("results")?;
    let gt_format = config.format("groundtruth")?;
    let window = config.window_config()?;
    let mut reports = Vec::new();
    for (r, g) in &pairs {
        let mut pred = read_trajectories(r, res_format)?;
        let mut gt = read_trajectories(g, gt_format)?;
        if config.eval.emitted_only {
            let frames = window.emitted_frames(gt.frame_extent().max(pred.frame_extent()));
            pred = restrict_frames(&pred, &frames);
            gt = restrict_frames(&gt, &frames);
        }
        let report = evaluate(&pred, &gt, threshold)?;
        info!("{}: MOTA {:.4}", gt.sequence, report.mota);
        reports.push(report);
    }
    let report = MetricsReport::combine(&reports);
    let dir = output_dir(config)?;
    write(&dir.join("metrics.csv"), &report.to_csv())?;
    print!("{}", report.to_table());
    Ok(Status::Ok)
}

pub fn gradcheck(config: &RunConfig) -> Result<Status> {
    let report = run_gradcheck(&config.gradcheck_config()?)?;
    let text = report.to_text();
    let dir = output_dir(config)?;
    write(&dir.join("gradcheck.txt"), &text)?;
    print!("{text}");
    Ok(if report.passed() {
        Status::Ok
    } else {
        Status::ChecksFailed
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_names_drop_tags() {
        assert_eq!(sequence_name(Path::new("a/synth-000.det.txt")), "synth-000");
        assert_eq!(sequence_name(Path::new("b.gt.txt")), "b");
        assert_eq!(sequence_name(Path::new("c.txt")), "c");
        assert_eq!(sequence_name(Path::new("d")), "d");
    }
}
