//! On-disk formats: the JSON-lines dataset file and the prediction file.
//!
//! A dataset file starts with one header object describing the skeleton,
//! followed by one object per sequence. A prediction file has the same shape
//! but each record carries only the forecast frames plus a `source_input_id`
//! that links it back to the evaluated window. All indices in files are
//! 0-based.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Dataset, PoseSequence, SkeletonSpec};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    joints: Vec<String>,
    neck_index: usize,
    dims: usize,
    frame_interval_ms: f64,
    image_bounds: Option<(f64, f64)>,
    left_right_swap: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    sequence_id: String,
    video_id: String,
    frames: Vec<Vec<Vec<f64>>>,
    visibility: Vec<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    source_input_id: Option<String>,
}

/// One forecast window: `tau` predicted frames plus the id of the input
/// window it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub seq: PoseSequence,
    pub source_input_id: String,
}

/// A set of forecasts over one dataset, shaped like a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub skeleton: SkeletonSpec,
    pub frame_interval_ms: f64,
    pub predictions: Vec<Prediction>,
}

fn record_to_sequence(rec: Record, dims: usize, interval: f64, line: usize) -> Result<PoseSequence> {
    let n = rec.frames.len();
    if n == 0 {
        return Err(Error::parse(line, "record has no frames"));
    }
    let j = rec.frames[0].len();
    let mut coords = Array3::zeros((n, j, dims));
    for (t, frame) in rec.frames.iter().enumerate() {
        if frame.len() != j {
            return Err(Error::parse(
                line,
                format!("frame {t} has {} joints, expected {j}", frame.len()),
            ));
        }
        for (jj, point) in frame.iter().enumerate() {
            if point.len() != dims {
                return Err(Error::parse(
                    line,
                    format!("joint {jj} of frame {t} has {} coords, header says dims={dims}", point.len()),
                ));
            }
            for (d, &c) in point.iter().enumerate() {
                coords[[t, jj, d]] = c;
            }
        }
    }
    if rec.visibility.len() != n {
        return Err(Error::parse(
            line,
            format!("visibility has {} frames, expected {n}", rec.visibility.len()),
        ));
    }
    let mut vis = Array2::zeros((n, j));
    for (t, row) in rec.visibility.iter().enumerate() {
        if row.len() != j {
            return Err(Error::parse(
                line,
                format!("visibility frame {t} has {} entries, expected {j}", row.len()),
            ));
        }
        for (jj, &v) in row.iter().enumerate() {
            if v > 1 {
                return Err(Error::parse(line, format!("visibility value {v} outside {{0,1}}")));
            }
            vis[[t, jj]] = v;
        }
    }
    PoseSequence::new(coords, vis, interval, rec.sequence_id, rec.video_id)
        .map_err(|e| Error::parse(line, e.to_string()))
}

fn sequence_to_record(seq: &PoseSequence, source_input_id: Option<String>) -> Record {
    let (n, j, d) = seq.coords().dim();
    let frames = (0..n)
        .map(|t| {
            (0..j)
                .map(|jj| (0..d).map(|dd| seq.coords()[[t, jj, dd]]).collect())
                .collect()
        })
        .collect();
    let visibility = (0..n)
        .map(|t| (0..j).map(|jj| seq.visibility()[[t, jj]]).collect())
        .collect();
    Record {
        sequence_id: seq.sequence_id.clone(),
        video_id: seq.video_id.clone(),
        frames,
        visibility,
        source_input_id,
    }
}

fn parse_header(line: &str) -> Result<(SkeletonSpec, f64, usize)> {
    let header: Header =
        serde_json::from_str(line).map_err(|e| Error::parse(1, format!("bad header: {e}")))?;
    if header.dims != 2 && header.dims != 3 {
        return Err(Error::parse(1, format!("dims must be 2 or 3, got {}", header.dims)));
    }
    let skeleton = SkeletonSpec {
        joint_names: header.joints,
        neck_index: header.neck_index,
        left_right_swap: header.left_right_swap,
        image_bounds: header.image_bounds,
    };
    skeleton.validate().map_err(|e| Error::parse(1, e.to_string()))?;
    Ok((skeleton, header.frame_interval_ms, header.dims))
}

fn write_header(out: &mut impl Write, skeleton: &SkeletonSpec, interval: f64, dims: usize) -> Result<()> {
    let header = Header {
        joints: skeleton.joint_names.clone(),
        neck_index: skeleton.neck_index,
        dims,
        frame_interval_ms: interval,
        image_bounds: skeleton.image_bounds,
        left_right_swap: skeleton.left_right_swap.clone(),
    };
    serde_json::to_writer(&mut *out, &header).map_err(|e| Error::Invalid(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Load a dataset file, validating every record.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = File::open(path.as_ref()).map_err(|e| Error::io_at(path.as_ref(), e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty file, expected header"))??;
    let (skeleton, interval, dims) = parse_header(&header_line)?;

    let mut sequences = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::parse(line_no, e.to_string()))?;
        if rec.source_input_id.is_some() {
            return Err(Error::parse(
                line_no,
                "record carries source_input_id; this is a prediction file, not a dataset",
            ));
        }
        sequences.push(record_to_sequence(rec, dims, interval, line_no)?);
    }
    Dataset::new(skeleton, interval, sequences)
}

/// Write a dataset file. Refuses to write non-finite coordinates.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let dims = dataset.dims().unwrap_or(3);
    for seq in &dataset.sequences {
        if !seq.all_finite() {
            return Err(Error::NonFinite(format!(
                "sequence {} contains a non-finite coordinate",
                seq.sequence_id
            )));
        }
    }
    let file = File::create(path.as_ref()).map_err(|e| Error::io_at(path.as_ref(), e))?;
    let mut out = BufWriter::new(file);
    write_header(&mut out, &dataset.skeleton, dataset.frame_interval_ms, dims)?;
    for seq in &dataset.sequences {
        serde_json::to_writer(&mut out, &sequence_to_record(seq, None))
            .map_err(|e| Error::Invalid(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Load a prediction file. Every record must carry a `source_input_id`.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<PredictionSet> {
    let file = File::open(path.as_ref()).map_err(|e| Error::io_at(path.as_ref(), e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty file, expected header"))??;
    let (skeleton, interval, dims) = parse_header(&header_line)?;

    let mut predictions = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::parse(line_no, e.to_string()))?;
        let source = rec
            .source_input_id
            .clone()
            .ok_or_else(|| Error::parse(line_no, "prediction record missing source_input_id"))?;
        predictions.push(Prediction {
            seq: record_to_sequence(rec, dims, interval, line_no)?,
            source_input_id: source,
        });
    }
    Ok(PredictionSet {
        skeleton,
        frame_interval_ms: interval,
        predictions,
    })
}

/// Write a prediction file.
pub fn save_predictions(set: &PredictionSet, path: impl AsRef<Path>) -> Result<()> {
    let dims = set.predictions.first().map(|p| p.seq.dims()).unwrap_or(3);
    for p in &set.predictions {
        if !p.seq.all_finite() {
            return Err(Error::NonFinite(format!(
                "prediction {} contains a non-finite coordinate",
                p.source_input_id
            )));
        }
    }
    let file = File::create(path.as_ref()).map_err(|e| Error::io_at(path.as_ref(), e))?;
    let mut out = BufWriter::new(file);
    write_header(&mut out, &set.skeleton, set.frame_interval_ms, dims)?;
    for p in &set.predictions {
        serde_json::to_writer(
            &mut out,
            &sequence_to_record(&p.seq, Some(p.source_input_id.clone())),
        )
        .map_err(|e| Error::Invalid(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
