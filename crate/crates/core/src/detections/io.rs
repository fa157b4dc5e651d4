//! MOTChallenge CSV and KITTI tracking text formats.
//!
//! MOTChallenge rows are `frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z`
//! with 1-based frames. In ground-truth files column 7 doubles as the
//! consider-flag: rows where it is 0 are dropped. KITTI rows are
//! `frame trackid type truncated occluded alpha left top right bottom h w l x y z ry [score]`
//! with 0-based frames; `DontCare` rows are dropped and raw scores are mapped
//! to probabilities with the logistic function. Frames are 0-based internally.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use super::{BoundingBox, Detection, DetectionSet, Trajectory, TrajectorySet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Mot,
    Kitti,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mot" | "motchallenge" => Ok(Format::Mot),
            "kitti" => Ok(Format::Kitti),
            other => Err(Error::InvalidInput(format!("unknown format '{other}'"))),
        }
    }
}

/// One parsed row before grouping.
struct Row {
    id: i64,
    detection: Detection,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn number(field: &str, line: usize, name: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("{name}: '{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{name}: '{field}' is not finite")));
    }
    Ok(v)
}

fn integer(field: &str, line: usize, name: &str) -> Result<i64> {
    let t = field.trim();
    if let Ok(v) = t.parse::<i64>() {
        return Ok(v);
    }
    // Some writers emit integral floats ("12.0") for ids and frames.
    let v = number(t, line, name)?;
    if v.fract() != 0.0 {
        return Err(parse_err(
            line,
            format!("{name}: '{field}' is not an integer"),
        ));
    }
    Ok(v as i64)
}

fn make_box(left: f64, top: f64, width: f64, height: f64, line: usize) -> Result<BoundingBox> {
    if width <= 0.0 || height <= 0.0 {
        return Err(parse_err(
            line,
            format!("box extent must be positive, got {width}x{height}"),
        ));
    }
    Ok(BoundingBox {
        left,
        top,
        width,
        height,
    })
}

fn logistic(score: f64) -> f64 {
    1.0 / (1.0 + (-score).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_mot_row(fields: &[&str], line: usize, groundtruth: bool) -> Result<Option<Row>> {
    let min = if groundtruth { 6 } else { 7 };
    if fields.len() < min || fields.len() > 10 {
        return Err(parse_err(
            line,
            format!("expected {min} to 10 fields, found {}", fields.len()),
        ));
    }
    let frame = integer(fields[0], line, "frame")?;
    if frame < 1 {
        return Err(parse_err(line, format!("frame {frame} is not 1-based")));
    }
    let id = integer(fields[1], line, "id")?;
    let left = number(fields[2], line, "bb_left")?;
    let top = number(fields[3], line, "bb_top")?;
    let width = number(fields[4], line, "bb_width")?;
    let height = number(fields[5], line, "bb_height")?;
    let conf = match fields.get(6) {
        Some(f) => number(f, line, "conf")?,
        None => 1.0,
    };
    let bbox = make_box(left, top, width, height, line)?;
    if groundtruth && fields.len() > 6 && conf == 0.0 {
        return Ok(None);
    }
    Ok(Some(Row {
        id,
        detection: Detection::new((frame - 1) as usize, bbox, conf.clamp(0.0, 1.0)),
    }))
}

fn parse_kitti_row(fields: &[&str], line: usize) -> Result<Option<Row>> {
    if fields.len() != 17 && fields.len() != 18 {
        return Err(parse_err(
            line,
            format!("expected 17 or 18 fields, found {}", fields.len()),
        ));
    }
    let frame = integer(fields[0], line, "frame")?;
    if frame < 0 {
        return Err(parse_err(line, format!("negative frame {frame}")));
    }
    let id = integer(fields[1], line, "trackid")?;
    let left = number(fields[6], line, "left")?;
    let top = number(fields[7], line, "top")?;
    let right = number(fields[8], line, "right")?;
    let bottom = number(fields[9], line, "bottom")?;
    let conf = match fields.get(17) {
        Some(f) => logistic(number(f, line, "score")?),
        None => 1.0,
    };
    if fields[2] == "DontCare" {
        return Ok(None);
    }
    let bbox = make_box(left, top, right - left, bottom - top, line)?;
    Ok(Some(Row {
        id,
        detection: Detection::new(frame as usize, bbox, conf.clamp(0.0, 1.0)),
    }))
}

fn parse_rows(format: Format, text: &str, groundtruth: bool) -> Result<Vec<(usize, Row)>> {
    let mut rows = Vec::new();
    for (line, content) in data_lines(text) {
        let row = match format {
            Format::Mot => {
                let fields: Vec<&str> = content.split(',').collect();
                parse_mot_row(&fields, line, groundtruth)?
            }
            Format::Kitti => {
                let fields: Vec<&str> = content.split_whitespace().collect();
                parse_kitti_row(&fields, line)?
            }
        };
        if let Some(row) = row {
            rows.push((line, row));
        }
    }
    Ok(rows)
}

/// Parses a detection file. Confidences outside `[0, 1]` are clamped.
pub fn parse_detections(format: Format, text: &str) -> Result<DetectionSet> {
    let rows = parse_rows(format, text, false)?;
    let frame_count = rows
        .iter()
        .map(|(_, r)| r.detection.frame + 1)
        .max()
        .unwrap_or(0);
    DetectionSet::new(
        "",
        rows.into_iter().map(|(_, r)| r.detection).collect(),
        frame_count,
    )
}

/// Parses a ground-truth file into one trajectory per target id.
pub fn parse_groundtruth(format: Format, text: &str) -> Result<TrajectorySet> {
    let rows = parse_rows(format, text, true)?;
    let mut groups: BTreeMap<u64, Vec<(usize, Detection)>> = BTreeMap::new();
    for (line, row) in rows {
        if row.id < 0 {
            return Err(parse_err(line, format!("target id {} is negative", row.id)));
        }
        let group = groups.entry(row.id as u64).or_default();
        if group.iter().any(|(_, d)| d.frame == row.detection.frame) {
            return Err(parse_err(
                line,
                format!(
                    "target {} appears twice in frame {}",
                    row.id, row.detection.frame
                ),
            ));
        }
        group.push((line, row.detection));
    }
    let trajectories = groups
        .into_iter()
        .map(|(id, rows)| {
            let mut detections: Vec<Detection> = rows.into_iter().map(|(_, d)| d).collect();
            detections.sort_by_key(|d| d.frame);
            Trajectory { id, detections }
        })
        .collect();
    Ok(TrajectorySet {
        sequence: String::new(),
        trajectories,
    })
}

/// Serializes trajectories, rows ordered by frame then target id.
pub fn write_results(format: Format, trajectories: &TrajectorySet) -> String {
    let mut rows: Vec<(usize, i64, &Detection)> = trajectories
        .trajectories
        .iter()
        .flat_map(|t| t.detections.iter().map(move |d| (d.frame, t.id as i64, d)))
        .collect();
    rows.sort_by_key(|&(frame, id, _)| (frame, id));
    write_rows(format, rows)
}

/// Writes raw detections with the "no identity" id of −1.
pub fn write_detections(format: Format, detections: &DetectionSet) -> String {
    write_rows(
        format,
        detections.detections().iter().map(|d| (d.frame, -1, d)),
    )
}

fn write_rows<'a>(
    format: Format,
    rows: impl IntoIterator<Item = (usize, i64, &'a Detection)>,
) -> String {
    let mut out = String::new();
    for (frame, id, d) in rows {
        let b = &d.bbox;
        // Writing to a String cannot fail.
        let _ = match format {
            Format::Mot => writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},-1,-1,-1",
                frame + 1,
                id,
                b.left,
                b.top,
                b.width,
                b.height,
                d.confidence
            ),
            Format::Kitti => writeln!(
                out,
                "{} {} Car 0 0 -10 {:.6} {:.6} {:.6} {:.6} -1 -1 -1 -1000 -1000 -1000 -10 {:.6}",
                frame,
                id,
                b.left,
                b.top,
                b.right(),
                b.bottom(),
                logit(d.confidence)
            ),
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mot_detection_row() {
        let set = parse_detections(Format::Mot, "1,-1,10,20,30,40,0.9,-1,-1,-1\n").unwrap();
        assert_eq!(set.len(), 1);
        let d = set.detections()[0];
        assert_eq!(d.frame, 0);
        assert_eq!(d.bbox, BoundingBox::new(10.0, 20.0, 30.0, 40.0).unwrap());
        assert_eq!(d.confidence, 0.9);
        assert_eq!(set.frame_count(), 1);
    }

    #[test]
    fn detections_round_trip() {
        for format in [Format::Mot, Format::Kitti] {
            let text = "1,-1,10.5,20,30,40,0.25,-1,-1,-1\n3,-1,1,2,3,4,0.75,-1,-1,-1\n";
            let set = parse_detections(Format::Mot, text).unwrap();
            let back = parse_detections(format, &write_detections(format, &set)).unwrap();
            assert_eq!(back.len(), 2);
            for (a, b) in back.detections().iter().zip(set.detections()) {
                assert_eq!(a.frame, b.frame);
                assert!((a.bbox.width - b.bbox.width).abs() < 1e-9);
                assert!((a.confidence - b.confidence).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_file_is_empty_set() {
        assert!(parse_detections(Format::Mot, "").unwrap().is_empty());
        assert!(parse_detections(Format::Kitti, "\n\n").unwrap().is_empty());
        assert!(parse_groundtruth(Format::Mot, "").unwrap().is_empty());
    }

    #[test]
    fn confidence_is_clamped() {
        let set = parse_detections(Format::Mot, "1,-1,10,20,30,40,1.7,-1,-1,-1").unwrap();
        assert_eq!(set.detections()[0].confidence, 1.0);
        let set = parse_detections(Format::Mot, "1,-1,10,20,30,40,-3,-1,-1,-1").unwrap();
        assert_eq!(set.detections()[0].confidence, 0.0);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let text = "1,-1,10,20,30,40,0.9,-1,-1,-1\n2,-1,10,abc,30,40,0.9,-1,-1,-1\n";
        match parse_detections(Format::Mot, text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse_detections(Format::Mot, "1,-1,10,20") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_detections(Format::Mot, "1,-1,10,20,-30,40,0.9").is_err());
        assert!(parse_detections(Format::Mot, "0,-1,10,20,30,40,0.9").is_err());
    }

    #[test]
    fn detections_sorted_by_frame_then_file_order() {
        let text = "3,-1,1,1,1,1,0.1\n1,-1,2,2,1,1,0.2\n3,-1,3,3,1,1,0.3\n";
        let set = parse_detections(Format::Mot, text).unwrap();
        let confs: Vec<f64> = set.detections().iter().map(|d| d.confidence).collect();
        assert_eq!(confs, vec![0.2, 0.1, 0.3]);
    }

    #[test]
    fn groundtruth_grouped_by_id() {
        let text = "4,5,0,0,10,10,1,1,1\n5,5,1,0,10,10,1,1,1\n4,6,50,0,10,10,1,1,1\n";
        let gt = parse_groundtruth(Format::Mot, text).unwrap();
        assert_eq!(gt.len(), 2);
        let t = gt.get(5).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.detections[0].frame, 3);
        assert_eq!(t.detections[1].frame, 4);
    }

    #[test]
    fn groundtruth_consider_flag_zero_dropped() {
        let text = "1,1,0,0,10,10,0,1,1\n2,1,0,0,10,10,1,1,1\n";
        let gt = parse_groundtruth(Format::Mot, text).unwrap();
        assert_eq!(gt.box_count(), 1);
    }

    #[test]
    fn groundtruth_duplicate_id_frame_rejected() {
        let text = "3,1,0,0,10,10,1\n3,1,5,5,10,10,1\n";
        assert!(matches!(
            parse_groundtruth(Format::Mot, text),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn groundtruth_negative_id_rejected() {
        assert!(parse_groundtruth(Format::Mot, "3,-1,0,0,10,10,1").is_err());
    }

    #[test]
    fn kitti_dontcare_dropped_and_boxes_converted() {
        let text = "0 2 Car 0 0 -10 10 20 50 80 -1 -1 -1 -1000 -1000 -1000 -10\n\
                    0 -1 DontCare -1 -1 -10 0 0 5 5 -1 -1 -1 -1000 -1000 -1000 -10\n";
        let gt = parse_groundtruth(Format::Kitti, text).unwrap();
        assert_eq!(gt.box_count(), 1);
        let d = gt.get(2).unwrap().detections[0];
        assert_eq!(d.bbox, BoundingBox::new(10.0, 20.0, 40.0, 60.0).unwrap());
        assert_eq!(d.confidence, 1.0);
    }

    #[test]
    fn kitti_scores_are_squashed() {
        let text = "3 -1 Car 0 0 -10 10 20 50 80 -1 -1 -1 -1000 -1000 -1000 -10 0\n";
        let set = parse_detections(Format::Kitti, text).unwrap();
        assert_eq!(set.detections()[0].confidence, 0.5);
        assert_eq!(set.detections()[0].frame, 3);
    }

    #[test]
    fn write_one_row() {
        assert_eq!(write_results(Format::Mot, &TrajectorySet::default()), "");
        let d = Detection::new(0, BoundingBox::new(1.0, 2.0, 3.0, 4.0).unwrap(), 0.5);
        let set = TrajectorySet::new("s", vec![Trajectory::new(9, vec![d]).unwrap()]).unwrap();
        let text = write_results(Format::Mot, &set);
        assert_eq!(text.lines().count(), 1);
        assert_eq!(
            text,
            "1,9,1.000000,2.000000,3.000000,4.000000,0.500000,-1,-1,-1\n"
        );
        assert_eq!(write_results(Format::Kitti, &set).lines().count(), 1);
    }
}
