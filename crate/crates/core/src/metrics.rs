//! Evaluation: the visibility-ignored metric (VIM), the visibility-aware
//! metric (VAM, penalty `beta` on visibility mistakes), millisecond-offset
//! frame selection, report aggregation, and the zero-velocity reference
//! baseline.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::PredictionSet;
use crate::pose::{Dataset, MotionSample, PoseSequence};
use crate::preprocess::{self, WindowSpec};

/// Which metric a report holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Vim,
    Vam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    /// Penalty added when predicted and true visibility disagree (VAM).
    pub beta: f64,
    /// Forecast timestamps to report, in milliseconds.
    pub offsets_ms: Vec<f64>,
    /// Multiplier on position errors (100 turns meters into centimeters).
    pub unit_scale: f64,
    /// Force a metric; `None` selects VIM for 3D and VAM for 2D.
    pub metric: Option<MetricKind>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self::default_for_dims(3)
    }
}

impl MetricConfig {
    pub fn default_for_dims(dims: usize) -> Self {
        if dims == 2 {
            Self {
                beta: 200.0,
                offsets_ms: vec![80.0, 160.0, 320.0, 400.0, 560.0],
                unit_scale: 1.0,
                metric: None,
            }
        } else {
            Self {
                beta: 200.0,
                offsets_ms: vec![100.0, 240.0, 500.0, 640.0, 900.0],
                unit_scale: 100.0,
                metric: None,
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::Invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.offsets_ms.is_empty() {
            return Err(Error::Invalid("offsets_ms must not be empty".into()));
        }
        Ok(())
    }

    pub fn kind_for_dims(&self, dims: usize) -> MetricKind {
        self.metric
            .unwrap_or(if dims == 2 { MetricKind::Vam } else { MetricKind::Vim })
    }
}

/// Map a millisecond offset to a 1-based forecast frame number:
/// `round(offset / interval)`, clamped to `[1, tau]`. Clamping is reported
/// with a warning, not an error.
pub fn offset_to_frame(offset_ms: f64, frame_interval_ms: f64, tau: usize) -> Result<usize> {
    if !(offset_ms > 0.0) {
        return Err(Error::Invalid(format!("offset must be positive, got {offset_ms} ms")));
    }
    if !(frame_interval_ms > 0.0) {
        return Err(Error::Invalid(format!(
            "frame interval must be positive, got {frame_interval_ms} ms"
        )));
    }
    if tau == 0 {
        return Err(Error::Invalid("forecast horizon is empty".into()));
    }
    let raw = (offset_ms / frame_interval_ms).round() as i64;
    let clamped = raw.clamp(1, tau as i64) as usize;
    if raw < 1 || raw > tau as i64 {
        log::warn!("offset {offset_ms} ms maps to frame {raw}, clamped to {clamped} (tau = {tau})");
    }
    Ok(clamped)
}

fn joint_distance(pred: &PoseSequence, gt: &PoseSequence, frame: usize, joint: usize) -> f64 {
    (0..pred.dims())
        .map(|d| {
            let e = pred.coords()[[frame, joint, d]] - gt.coords()[[frame, joint, d]];
            e * e
        })
        .sum::<f64>()
        .sqrt()
}

fn check_frames(pred: &PoseSequence, gt: &PoseSequence, frame: usize) -> Result<()> {
    if pred.joints() != gt.joints() || pred.dims() != gt.dims() || pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} vs ground truth {}x{}x{}",
            pred.len(),
            pred.joints(),
            pred.dims(),
            gt.len(),
            gt.joints(),
            gt.dims()
        )));
    }
    if frame >= pred.len() {
        return Err(Error::Shape(format!(
            "frame {frame} out of range for {} forecast frames",
            pred.len()
        )));
    }
    Ok(())
}

/// Mean Euclidean error over ground-truth-visible joints at one forecast
/// frame (0-based), times `unit_scale`. A frame with no visible joints
/// contributes 0 and is flagged with a warning.
pub fn vim(pred: &PoseSequence, gt: &PoseSequence, frame: usize, cfg: &MetricConfig) -> Result<f64> {
    check_frames(pred, gt, frame)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in 0..gt.joints() {
        if gt.visibility()[[frame, j]] == 1 {
            sum += joint_distance(pred, gt, frame, j);
            count += 1;
        }
    }
    if count == 0 {
        log::warn!("vim: no visible ground-truth joints at frame {frame}, scoring 0");
        return Ok(0.0);
    }
    Ok(sum / count as f64 * cfg.unit_scale)
}

/// Visibility-aware error at one forecast frame (0-based), averaged over all
/// joints: raw position error where predicted and true visibility are both 1,
/// zero where both are 0, and the penalty `beta` on any mismatch.
/// `unit_scale` does not apply here; VAM is reported in input (pixel) units.
pub fn vam(pred: &PoseSequence, gt: &PoseSequence, frame: usize, cfg: &MetricConfig) -> Result<f64> {
    check_frames(pred, gt, frame)?;
    let j = gt.joints();
    let mut sum = 0.0;
    for jj in 0..j {
        let pv = pred.visibility()[[frame, jj]];
        let gv = gt.visibility()[[frame, jj]];
        sum += match (pv, gv) {
            (1, 1) => joint_distance(pred, gt, frame, jj),
            (0, 0) => 0.0,
            _ => cfg.beta,
        };
    }
    Ok(sum / j as f64)
}

/// Per-sample metric values at each configured offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub per_offset: Vec<f64>,
}

/// Per-offset averages over an evaluation set, plus their grand average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    pub offsets_ms: Vec<f64>,
    /// 1-based forecast frame selected for each offset.
    pub frames: Vec<usize>,
    pub per_offset: Vec<f64>,
    pub average: f64,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per sample plus an `average` row; columns are the offsets.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for (off, frame) in self.offsets_ms.iter().zip(&self.frames) {
            out.push_str(&format!(",{off}ms(frame{frame})"));
        }
        out.push_str(",average\n");
        for sample in &self.per_sample {
            out.push_str(&sample.id);
            let mut sum = 0.0;
            for v in &sample.per_offset {
                out.push_str(&format!(",{v}"));
                sum += v;
            }
            out.push_str(&format!(",{}\n", sum / sample.per_offset.len() as f64));
        }
        out.push_str("average");
        for v in &self.per_offset {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", self.average));
        out
    }
}

/// Score a prediction set against the windows of a ground-truth dataset.
///
/// Windows are re-derived deterministically from `window` (which must match
/// the spec used to produce the predictions); each prediction's
/// `source_input_id` selects its window. Unmatched ids are an error.
pub fn evaluate(
    preds: &PredictionSet,
    gt: &Dataset,
    window: &WindowSpec,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    let dims = gt.dims().ok_or_else(|| Error::Invalid("ground-truth dataset is empty".into()))?;
    let kind = cfg.kind_for_dims(dims);
    // Window enumeration is deterministic for stride sampling; the rng is
    // only consulted for random sampling, which evaluation never uses.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let gt_samples = preprocess::extend_and_window(gt, window, &mut rng)?;
    let by_id: std::collections::HashMap<&str, &MotionSample> =
        gt_samples.iter().map(|s| (s.id.as_str(), s)).collect();

    let tau = window.output_frames;
    let frames: Vec<usize> = cfg
        .offsets_ms
        .iter()
        .map(|&off| offset_to_frame(off, gt.frame_interval_ms, tau))
        .collect::<Result<_>>()?;

    let unmatched: Vec<&str> = preds
        .predictions
        .iter()
        .filter(|p| !by_id.contains_key(p.source_input_id.as_str()))
        .map(|p| p.source_input_id.as_str())
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Invalid(format!(
            "predictions without matching ground-truth window: {}",
            unmatched.join(", ")
        )));
    }
    if preds.predictions.is_empty() {
        return Err(Error::Invalid("prediction set is empty".into()));
    }

    let mut per_sample = Vec::with_capacity(preds.predictions.len());
    let mut sums = vec![0.0; frames.len()];
    for pred in &preds.predictions {
        let sample = by_id[pred.source_input_id.as_str()];
        let mut values = Vec::with_capacity(frames.len());
        for &frame in &frames {
            let value = match kind {
                MetricKind::Vim => vim(&pred.seq, &sample.target, frame - 1, cfg)?,
                MetricKind::Vam => vam(&pred.seq, &sample.target, frame - 1, cfg)?,
            };
            values.push(value);
        }
        for (sum, v) in sums.iter_mut().zip(&values) {
            *sum += v;
        }
        per_sample.push(SampleMetrics {
            id: pred.source_input_id.clone(),
            per_offset: values,
        });
    }
    let count = per_sample.len() as f64;
    let per_offset: Vec<f64> = sums.into_iter().map(|s| s / count).collect();
    let average = per_offset.iter().sum::<f64>() / per_offset.len() as f64;
    Ok(MetricReport {
        metric: kind,
        offsets_ms: cfg.offsets_ms.clone(),
        frames,
        per_offset,
        average,
        per_sample,
    })
}

/// The reference predictor: repeat the last observed pose for `tau` frames,
/// with visibility padded from the last observed frame.
pub fn zero_velocity_baseline(sample: &MotionSample) -> PoseSequence {
    let input = &sample.input;
    let t = input.len();
    let tau = sample.target_len();
    let (j, d) = (input.joints(), input.dims());
    let mut coords = ndarray::Array3::zeros((tau, j, d));
    for f in 0..tau {
        for jj in 0..j {
            for dd in 0..d {
                coords[[f, jj, dd]] = input.coords()[[t - 1, jj, dd]];
            }
        }
    }
    let vis = preprocess::pad_visibility(input.visibility().row(t - 1), tau);
    PoseSequence::new(
        coords,
        vis,
        input.frame_interval_ms(),
        input.sequence_id.clone(),
        input.video_id.clone(),
    )
    .expect("baseline shapes valid by construction")
}

/// Minimal per-offset bar chart of a report.
pub fn render_svg(report: &MetricReport) -> String {
    let width = 80 + report.per_offset.len() * 90;
    let height = 260;
    let max = report
        .per_offset
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(*v))
        .max(1e-9);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    );
    svg.push_str(&format!(
        "<text x=\"10\" y=\"20\" font-family=\"monospace\" font-size=\"14\">{:?} per offset (avg {:.4})</text>\n",
        report.metric, report.average
    ));
    for (i, (off, v)) in report.offsets_ms.iter().zip(&report.per_offset).enumerate() {
        let bar_h = (v / max * 170.0).round();
        let x = 50 + i * 90;
        let y = 220.0 - bar_h;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"60\" height=\"{bar_h}\" fill=\"#4878a8\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">{v:.3}</text>\n",
            y - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"238\" font-family=\"monospace\" font-size=\"11\">{off}ms</text>\n"
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
