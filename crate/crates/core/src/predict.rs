//! End-to-end inference: preprocessing, model invocation, inverse transforms,
//! visibility padding, boundary filtering, and short/long-term fusion.

use serde::{Deserialize, Serialize};

use crate::dct;
use crate::error::{Error, Result};
use crate::gcnet::{self, GcnModel, InputRepr};
use crate::metrics::MetricReport;
use crate::pose::{PoseSequence, SkeletonSpec};
use crate::preprocess::{self, PreprocessConfig, WindowSpec};

/// Short/long-term model stitching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Forecast frames taken from the short-term model.
    pub short_frames: usize,
    pub short_model: Option<std::path::PathBuf>,
    pub long_model: Option<std::path::PathBuf>,
    /// Additional checkpoints whose outputs are averaged in (off by default).
    pub extra_models: Vec<std::path::PathBuf>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            short_frames: 4,
            short_model: None,
            long_model: None,
            extra_models: Vec::new(),
        }
    }
}

/// Everything inference needs besides the raw input: the trained model and
/// the preprocessing choices it was trained under. Models trained with
/// different scales or input representations stay self-describing, so a
/// short-term and a long-term model can be fused even when their stacks
/// differ.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: GcnModel,
    pub input_repr: InputRepr,
    pub preprocess: PreprocessConfig,
    pub window: WindowSpec,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    input_repr: InputRepr,
    preprocess: PreprocessConfig,
    window: WindowSpec,
    model: serde_json::Value,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            input_repr: self.input_repr,
            preprocess: self.preprocess.clone(),
            window: self.window.clone(),
            model: gcnet::model_to_json(&self.model),
        };
        let json = serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path.as_ref(), json).map_err(|e| Error::io_at(path.as_ref(), e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io_at(path.as_ref(), e))?;
        let file: CheckpointFile = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
                file.format_version
            )));
        }
        Ok(Self {
            model: gcnet::model_from_json(file.model)?,
            input_repr: file.input_repr,
            preprocess: file.preprocess,
            window: file.window,
        })
    }
}

/// Run the full inference pipeline on a raw `T`-frame input window and
/// return the forecast in the input's original coordinate units:
/// interpolate gaps, center and scale, encode, forward in eval mode, decode,
/// undo the transform, pad visibility from the last observed frame, and
/// boundary-filter 2D joints.
pub fn run_inference(
    ckpt: &Checkpoint,
    raw_input: &PoseSequence,
    skeleton: &SkeletonSpec,
) -> Result<PoseSequence> {
    let t = ckpt.window.input_frames;
    let tau = ckpt.window.output_frames;
    if raw_input.len() != t {
        return Err(Error::Shape(format!(
            "input has {} frames, model expects {t}",
            raw_input.len()
        )));
    }
    let input = if ckpt.preprocess.interpolate_invisible {
        preprocess::interpolate_invisible(raw_input)?.0
    } else {
        raw_input.clone()
    };
    let (centered, transform) = preprocess::center_and_scale(&input, skeleton, &ckpt.preprocess)?;
    let basis = dct::make_basis(t + tau, ckpt.model.config().coeffs)?;
    let pred = gcnet::predict(&ckpt.model, &centered, tau, &basis, ckpt.input_repr)?;
    let restored = preprocess::uncenter_and_unscale(&pred, &transform)?;

    let vis = preprocess::pad_visibility(raw_input.visibility().row(t - 1), tau);
    let mut out = restored.with_visibility(vis)?;
    if out.dims() == 2 && ckpt.preprocess.boundary_filter {
        if let Some(bounds) = skeleton.image_bounds {
            out = preprocess::boundary_filter(&out, bounds)?;
        }
    }
    Ok(out)
}

/// Stitch two forecasts: frames `1..=short_frames` from the short-term
/// prediction, the rest from the long-term one. Visibility is fused the same
/// way; there is no interpolation between the models.
pub fn fuse(
    short_pred: &PoseSequence,
    long_pred: &PoseSequence,
    cfg: &FusionConfig,
) -> Result<PoseSequence> {
    if short_pred.coords().dim() != long_pred.coords().dim() {
        return Err(Error::Shape(format!(
            "short {:?} vs long {:?}",
            short_pred.coords().dim(),
            long_pred.coords().dim()
        )));
    }
    let tau = short_pred.len();
    if cfg.short_frames < 1 || cfg.short_frames > tau {
        return Err(Error::Invalid(format!(
            "short_frames {} outside [1, {tau}]",
            cfg.short_frames
        )));
    }
    let k = cfg.short_frames;
    let mut coords = long_pred.coords().clone();
    let mut vis = long_pred.visibility().clone();
    coords
        .slice_mut(ndarray::s![..k, .., ..])
        .assign(&short_pred.coords().slice(ndarray::s![..k, .., ..]));
    vis.slice_mut(ndarray::s![..k, ..])
        .assign(&short_pred.visibility().slice(ndarray::s![..k, ..]));
    long_pred.with_coords(coords)?.with_visibility(vis)
}

/// Coordinate-wise mean of several forecasts of the same window. Visibility
/// is taken from the first prediction.
pub fn average_predictions(preds: &[PoseSequence]) -> Result<PoseSequence> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Invalid("cannot average zero predictions".into()))?;
    let mut coords = first.coords().clone();
    for p in &preds[1..] {
        if p.coords().dim() != first.coords().dim() {
            return Err(Error::Shape("prediction shapes differ".into()));
        }
        coords = coords + p.coords();
    }
    coords /= preds.len() as f64;
    first.with_coords(coords)
}

/// One column of a fused report: the winning value and which labeled report
/// supplied it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedColumn {
    pub offset_ms: f64,
    pub value: f64,
    pub source: String,
}

/// Column-wise best-value selection across several evaluation reports — an
/// evaluation convenience, not a predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedReport {
    pub columns: Vec<FusedColumn>,
    pub average: f64,
}

/// For each offset, report the minimum value across the candidate reports
/// together with the label of the report that supplied it.
pub fn fuse_reports(reports: &[(String, MetricReport)]) -> Result<FusedReport> {
    let (_, first) = reports
        .first()
        .ok_or_else(|| Error::Invalid("cannot fuse zero reports".into()))?;
    for (label, r) in reports {
        if r.offsets_ms != first.offsets_ms {
            return Err(Error::Invalid(format!(
                "report '{label}' has offsets {:?}, expected {:?}",
                r.offsets_ms, first.offsets_ms
            )));
        }
    }
    let mut columns = Vec::with_capacity(first.offsets_ms.len());
    for (i, &offset_ms) in first.offsets_ms.iter().enumerate() {
        let (label, value) = reports
            .iter()
            .map(|(label, r)| (label, r.per_offset[i]))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty");
        columns.push(FusedColumn {
            offset_ms,
            value,
            source: label.clone(),
        });
    }
    let average = columns.iter().map(|c| c.value).sum::<f64>() / columns.len() as f64;
    Ok(FusedReport { columns, average })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcnet::{init_model, GcnConfig, NodeMode};
    use crate::metrics::{MetricKind, MetricReport};
    use ndarray::{Array, Array2, Array3};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn skeleton_2d(j: usize) -> SkeletonSpec {
        SkeletonSpec {
            joint_names: (0..j).map(|i| format!("j{i}")).collect(),
            neck_index: 0,
            left_right_swap: None,
            image_bounds: Some((100.0, 100.0)),
        }
    }

    fn zero_checkpoint(j: usize, dims: usize, t: usize, tau: usize) -> Checkpoint {
        let config = GcnConfig {
            joints: j,
            dims,
            coeffs: t + tau,
            hidden_channels: 8,
            num_blocks: 1,
            dropout_rate: 0.0,
            node_mode: NodeMode::OneNodePerJoint,
            norm_enabled: true,
        };
        let mut model = init_model(&config, 0).unwrap();
        model.zero_all();
        Checkpoint {
            model,
            input_repr: InputRepr::Position,
            preprocess: PreprocessConfig {
                scale: 1.0,
                interpolate_invisible: true,
                boundary_filter: true,
            },
            window: WindowSpec {
                input_frames: t,
                output_frames: tau,
                sampling: crate::preprocess::Sampling::Stride(1),
            },
        }
    }

    #[test]
    fn zero_model_inference_repeats_last_pose_in_original_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords = Array::from_shape_fn((6, 3, 2), |_| rng.random_range(10.0..90.0));
        let input = PoseSequence::new(coords, Array2::ones((6, 3)), 40.0, "s", "v").unwrap();
        let ckpt = zero_checkpoint(3, 2, 6, 4);
        let out = run_inference(&ckpt, &input, &skeleton_2d(3)).unwrap();
        assert_eq!(out.len(), 4);
        for f in 0..4 {
            for j in 0..3 {
                for d in 0..2 {
                    assert!(
                        (out.coords()[[f, j, d]] - input.coords()[[5, j, d]]).abs() < 1e-9
                    );
                }
            }
        }
        // Determinism: same call, same output.
        let again = run_inference(&ckpt, &input, &skeleton_2d(3)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn inference_marks_out_of_bounds_forecast_invisible() {
        // Last observed pose already outside the image: the repeated pose
        // must be filtered to invisible.
        let mut coords = Array3::zeros((4, 2, 2));
        for f in 0..4 {
            coords[[f, 0, 0]] = 50.0;
            coords[[f, 0, 1]] = 50.0;
            coords[[f, 1, 0]] = 90.0 + 5.0 * f as f64; // walks out at f=2
            coords[[f, 1, 1]] = 50.0;
        }
        let input = PoseSequence::new(coords, Array2::ones((4, 2)), 40.0, "s", "v").unwrap();
        let ckpt = zero_checkpoint(2, 2, 4, 2);
        let out = run_inference(&ckpt, &input, &skeleton_2d(2)).unwrap();
        for f in 0..2 {
            assert_eq!(out.visibility()[[f, 0]], 1);
            assert_eq!(out.visibility()[[f, 1]], 0, "joint 1 is at x=105");
        }
    }

    #[test]
    fn inference_pads_visibility_from_last_input_frame() {
        let coords = Array3::from_elem((4, 2, 2), 50.0);
        let mut vis = Array2::ones((4, 2));
        vis[[3, 1]] = 0;
        let input = PoseSequence::new(coords, vis, 40.0, "s", "v").unwrap();
        let ckpt = zero_checkpoint(2, 2, 4, 3);
        let out = run_inference(&ckpt, &input, &skeleton_2d(2)).unwrap();
        for f in 0..3 {
            assert_eq!(out.visibility()[[f, 0]], 1);
            assert_eq!(out.visibility()[[f, 1]], 0);
        }
    }

    fn pred_with(value: f64, vis_value: u8, tau: usize) -> PoseSequence {
        PoseSequence::new(
            Array3::from_elem((tau, 2, 3), value),
            Array2::from_elem((tau, 2), vis_value),
            64.3,
            "s",
            "v",
        )
        .unwrap()
    }

    #[test]
    fn fuse_splices_frames() {
        let short = pred_with(1.0, 1, 14);
        let long = pred_with(2.0, 0, 14);
        let cfg = FusionConfig::default(); // short_frames = 4
        let fused = fuse(&short, &long, &cfg).unwrap();
        for f in 0..14 {
            let expect = if f < 4 { 1.0 } else { 2.0 };
            assert_eq!(fused.coords()[[f, 0, 0]], expect);
            assert_eq!(fused.visibility()[[f, 0]], if f < 4 { 1 } else { 0 });
        }
    }

    #[test]
    fn fuse_degenerate_cases() {
        let a = pred_with(3.0, 1, 5);
        let b = pred_with(4.0, 1, 5);
        let all_short = FusionConfig {
            short_frames: 5,
            ..Default::default()
        };
        assert_eq!(fuse(&a, &b, &all_short).unwrap().coords(), a.coords());
        // Identical inputs: output equals both.
        let cfg = FusionConfig {
            short_frames: 2,
            ..Default::default()
        };
        assert_eq!(fuse(&a, &a, &cfg).unwrap(), a);
    }

    #[test]
    fn average_predictions_is_coordinate_mean() {
        let a = pred_with(1.0, 1, 3);
        let b = pred_with(3.0, 1, 3);
        let avg = average_predictions(&[a, b]).unwrap();
        assert!(avg.coords().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    fn report(values: &[f64]) -> MetricReport {
        MetricReport {
            metric: MetricKind::Vim,
            offsets_ms: vec![100.0, 240.0, 500.0],
            frames: vec![2, 4, 8],
            per_offset: values.to_vec(),
            average: values.iter().sum::<f64>() / values.len() as f64,
            per_sample: vec![],
        }
    }

    #[test]
    fn fuse_reports_takes_columnwise_minimum() {
        let early = report(&[1.0, 2.0, 9.0]);
        let late = report(&[3.0, 2.5, 4.0]);
        let fused = fuse_reports(&[("early".into(), early.clone()), ("late".into(), late.clone())])
            .unwrap();
        assert_eq!(fused.columns[0].value, 1.0);
        assert_eq!(fused.columns[0].source, "early");
        assert_eq!(fused.columns[2].value, 4.0);
        assert_eq!(fused.columns[2].source, "late");
        // Column-wise <= every input row.
        for (i, col) in fused.columns.iter().enumerate() {
            assert!(col.value <= early.per_offset[i]);
            assert!(col.value <= late.per_offset[i]);
        }
        // Single report fuses to itself.
        let single = fuse_reports(&[("only".into(), early.clone())]).unwrap();
        for (col, v) in single.columns.iter().zip(&early.per_offset) {
            assert_eq!(col.value, *v);
        }
    }

    #[test]
    fn fuse_reports_rejects_offset_mismatch() {
        let a = report(&[1.0, 2.0, 3.0]);
        let mut b = report(&[1.0, 2.0, 3.0]);
        b.offsets_ms = vec![80.0, 160.0, 320.0];
        assert!(fuse_reports(&[("a".into(), a), ("b".into(), b)]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let ckpt = zero_checkpoint(3, 2, 6, 4);
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
    }
}
