//! Data-processing stages: coordinate centering/scaling, gap interpolation,
//! visibility padding, boundary filtering, window extraction over
//! concatenated videos, and the reversal/flip augmentations.
//!
//! Every transform here is a pure function; the windowing stream may be
//! consumed by parallel workers as long as each worker derives its own rng
//! from the master seed.

use ndarray::{Array2, Array3, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Dataset, MotionSample, PoseSequence, SkeletonSpec};

/// Coordinate-transform settings applied before encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Divisor applied after centering. The sweep defaults are 100 for 3D
    /// (meters) and 1 for 2D (pixels).
    pub scale: f64,
    pub interpolate_invisible: bool,
    pub boundary_filter: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            scale: 100.0,
            interpolate_invisible: true,
            boundary_filter: true,
        }
    }
}

impl PreprocessConfig {
    pub fn default_for_dims(dims: usize) -> Self {
        Self {
            scale: if dims == 2 { 1.0 } else { 100.0 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Invalid(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

/// How windows are drawn from the concatenated per-video streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum Sampling {
    /// Every valid start, stepped by the given stride.
    Stride(usize),
    /// `count` starts drawn uniformly (with replacement) over valid starts.
    Random { count: usize },
}

/// Input/output window sizes and the sampling strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub input_frames: usize,
    pub output_frames: usize,
    pub sampling: Sampling,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            input_frames: 16,
            output_frames: 14,
            sampling: Sampling::Stride(1),
        }
    }
}

impl WindowSpec {
    pub fn total_frames(&self) -> usize {
        self.input_frames + self.output_frames
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_frames < 2 {
            return Err(Error::Invalid("input_frames must be at least 2".into()));
        }
        if self.output_frames < 1 {
            return Err(Error::Invalid("output_frames must be at least 1".into()));
        }
        if let Sampling::Stride(0) = self.sampling {
            return Err(Error::Invalid("stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which center was actually used by [`center_and_scale`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterSource {
    /// Neck joint at the given frame (0 unless the neck was occluded there).
    Neck { frame: usize },
    /// Neck never visible; fell back to the centroid of visible coordinates.
    Centroid,
}

/// The recorded, invertible transform from [`center_and_scale`].
#[derive(Debug, Clone, PartialEq)]
pub struct CenterScale {
    pub offset: Vec<f64>,
    pub scale: f64,
    pub source: CenterSource,
}

/// Subtract the first-frame neck position from every coordinate, then divide
/// by `cfg.scale`. Falls back to the first frame where the neck is visible,
/// then to the centroid of all visible coordinates.
pub fn center_and_scale(
    seq: &PoseSequence,
    spec: &SkeletonSpec,
    cfg: &PreprocessConfig,
) -> Result<(PoseSequence, CenterScale)> {
    cfg.validate()?;
    let jc = spec.neck_index;
    if jc >= seq.joints() {
        return Err(Error::Invalid(format!(
            "neck index {jc} out of range for {} joints",
            seq.joints()
        )));
    }
    let d = seq.dims();
    let neck_frame = (0..seq.len()).find(|&t| seq.visibility()[[t, jc]] == 1);
    let (offset, source) = match neck_frame {
        Some(t) => {
            let offset: Vec<f64> = (0..d).map(|dd| seq.coords()[[t, jc, dd]]).collect();
            (offset, CenterSource::Neck { frame: t })
        }
        None => {
            log::warn!(
                "sequence {}: neck joint never visible, centering on visible centroid",
                seq.sequence_id
            );
            let mut sums = vec![0.0; d];
            let mut count = 0usize;
            for t in 0..seq.len() {
                for j in 0..seq.joints() {
                    if seq.visibility()[[t, j]] == 1 {
                        for (dd, sum) in sums.iter_mut().enumerate() {
                            *sum += seq.coords()[[t, j, dd]];
                        }
                        count += 1;
                    }
                }
            }
            if count > 0 {
                for s in &mut sums {
                    *s /= count as f64;
                }
            }
            (sums, CenterSource::Centroid)
        }
    };
    let mut coords = seq.coords().clone();
    for t in 0..seq.len() {
        for j in 0..seq.joints() {
            for dd in 0..d {
                coords[[t, j, dd]] = (coords[[t, j, dd]] - offset[dd]) / cfg.scale;
            }
        }
    }
    let out = seq.with_coords(coords)?;
    Ok((
        out,
        CenterScale {
            offset,
            scale: cfg.scale,
            source,
        },
    ))
}

/// Apply an already-computed transform to another sequence (e.g. the target
/// window, which must share its input window's center).
pub fn center_with(seq: &PoseSequence, transform: &CenterScale) -> Result<PoseSequence> {
    if transform.offset.len() != seq.dims() {
        return Err(Error::Shape(format!(
            "offset has {} entries, sequence has D={}",
            transform.offset.len(),
            seq.dims()
        )));
    }
    let mut coords = seq.coords().clone();
    for t in 0..seq.len() {
        for j in 0..seq.joints() {
            for (dd, &o) in transform.offset.iter().enumerate() {
                coords[[t, j, dd]] = (coords[[t, j, dd]] - o) / transform.scale;
            }
        }
    }
    seq.with_coords(coords)
}

/// Invert [`center_and_scale`]: multiply by the scale, add the offset back.
pub fn uncenter_and_unscale(seq: &PoseSequence, transform: &CenterScale) -> Result<PoseSequence> {
    uncenter_coords_seq(seq, &transform.offset, transform.scale)
}

/// Invert a recorded `(offset, scale)` transform on a sequence.
pub fn uncenter_coords_seq(seq: &PoseSequence, offset: &[f64], scale: f64) -> Result<PoseSequence> {
    if offset.len() != seq.dims() {
        return Err(Error::Shape(format!(
            "offset has {} entries, sequence has D={}",
            offset.len(),
            seq.dims()
        )));
    }
    let mut coords = seq.coords().clone();
    for t in 0..seq.len() {
        for j in 0..seq.joints() {
            for (dd, &o) in offset.iter().enumerate() {
                coords[[t, j, dd]] = coords[[t, j, dd]] * scale + o;
            }
        }
    }
    seq.with_coords(coords)
}

/// Fill invisible-joint coordinates. Interior gaps between two visible frames
/// are linearly interpolated; leading/trailing gaps repeat the nearest
/// visible frame. Visibility flags are left untouched. Returns the joints
/// that were never visible (their coordinates are kept as-is).
pub fn interpolate_invisible(seq: &PoseSequence) -> Result<(PoseSequence, Vec<usize>)> {
    let (n, j, d) = seq.coords().dim();
    let mut coords = seq.coords().clone();
    let mut never_visible = Vec::new();
    for jj in 0..j {
        let visible: Vec<usize> = (0..n).filter(|&t| seq.visibility()[[t, jj]] == 1).collect();
        if visible.is_empty() {
            never_visible.push(jj);
            continue;
        }
        if visible.len() == n {
            continue;
        }
        let first = visible[0];
        let last = *visible.last().unwrap();
        for t in 0..first {
            for dd in 0..d {
                coords[[t, jj, dd]] = coords[[first, jj, dd]];
            }
        }
        for t in last + 1..n {
            for dd in 0..d {
                coords[[t, jj, dd]] = coords[[last, jj, dd]];
            }
        }
        // Interior gaps: for each pair of consecutive visible frames t and
        // t+m, the i-th hidden frame gets x_t + (i/m) * (x_{t+m} - x_t).
        for w in visible.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            let m = (t1 - t0) as f64;
            for t in t0 + 1..t1 {
                let frac = (t - t0) as f64 / m;
                for dd in 0..d {
                    let a = coords[[t0, jj, dd]];
                    let b = coords[[t1, jj, dd]];
                    coords[[t, jj, dd]] = frac * (b - a) + a;
                }
            }
        }
    }
    if !never_visible.is_empty() {
        log::warn!(
            "sequence {}: joints {:?} never visible, coordinates left as-is",
            seq.sequence_id,
            never_visible
        );
    }
    Ok((seq.with_coords(coords)?, never_visible))
}

/// Copy the last observed frame's visibility to all `tau` forecast frames.
pub fn pad_visibility(input_vis_last: ArrayView1<u8>, tau: usize) -> Array2<u8> {
    let j = input_vis_last.len();
    Array2::from_shape_fn((tau, j), |(_, jj)| input_vis_last[jj])
}

/// Mark predicted 2D joints outside `[0, w) x [0, h)` as invisible.
/// Coordinates are untouched.
pub fn boundary_filter(pred: &PoseSequence, bounds: (f64, f64)) -> Result<PoseSequence> {
    if pred.dims() != 2 {
        return Err(Error::Invalid(format!(
            "boundary filter applies to 2D data, got D={}",
            pred.dims()
        )));
    }
    let (w, h) = bounds;
    let mut vis = pred.visibility().clone();
    for t in 0..pred.len() {
        for j in 0..pred.joints() {
            let x = pred.coords()[[t, j, 0]];
            let y = pred.coords()[[t, j, 1]];
            if x < 0.0 || x >= w || y < 0.0 || y >= h {
                vis[[t, j]] = 0;
            }
        }
    }
    pred.with_visibility(vis)
}

/// Concatenate sequences that share a `video_id` (in dataset order) and cut
/// training windows out of the joined streams. Streams shorter than
/// `T + tau` are skipped with a warning. Window ids are `video_id:start`.
pub fn extend_and_window(
    dataset: &Dataset,
    spec: &WindowSpec,
    rng: &mut impl Rng,
) -> Result<Vec<MotionSample>> {
    spec.validate()?;
    let total = spec.total_frames();

    // Group by video_id, preserving first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<&PoseSequence>> =
        std::collections::HashMap::new();
    for seq in &dataset.sequences {
        let entry = groups.entry(seq.video_id.clone()).or_default();
        if entry.is_empty() {
            order.push(seq.video_id.clone());
        }
        entry.push(seq);
    }

    let mut samples = Vec::new();
    for video in &order {
        let seqs = &groups[video];
        let mut stream = seqs[0].clone();
        for seq in &seqs[1..] {
            stream = stream.concat(seq)?;
        }
        if stream.len() < total {
            log::warn!(
                "video {video}: {} frames < window of {total}, skipped",
                stream.len()
            );
            continue;
        }
        let max_start = stream.len() - total;
        let starts: Vec<usize> = match spec.sampling {
            Sampling::Stride(stride) => (0..=max_start).step_by(stride).collect(),
            Sampling::Random { count } => (0..count)
                .map(|_| rng.random_range(0..=max_start))
                .collect(),
        };
        for start in starts {
            let window = stream.window(start, total)?;
            let mut input = window.window(0, spec.input_frames)?;
            let mut target = window.window(spec.input_frames, spec.output_frames)?;
            let id = format!("{video}:{start}");
            input.sequence_id = id.clone();
            target.sequence_id = id.clone();
            samples.push(MotionSample::new(id, input, target)?);
        }
    }
    Ok(samples)
}

/// Reverse the concatenated input‖target sequence and re-split it: the last
/// `T` frames (in reverse order) become the new input, the first `tau`
/// frames become the new label. An involution.
pub fn reverse_augment(sample: &MotionSample) -> Result<MotionSample> {
    let t = sample.input_len();
    let tau = sample.target_len();
    let full = sample.input.concat(&sample.target)?;
    let n = t + tau;
    let mut coords = Array3::zeros(full.coords().dim());
    let mut vis = Array2::zeros(full.visibility().dim());
    for frame in 0..n {
        let src = n - 1 - frame;
        coords
            .slice_mut(ndarray::s![frame, .., ..])
            .assign(&full.coords().slice(ndarray::s![src, .., ..]));
        vis.slice_mut(ndarray::s![frame, ..])
            .assign(&full.visibility().slice(ndarray::s![src, ..]));
    }
    let reversed = full.with_coords(coords)?.with_visibility(vis)?;
    let input = reversed.window(0, t)?;
    let target = reversed.window(t, tau)?;
    Ok(MotionSample {
        id: sample.id.clone(),
        input,
        target,
        center_offset: sample.center_offset.clone(),
        scale: sample.scale,
    })
}

/// Negate one coordinate axis (about the centered origin) and relabel mirror
/// joints according to the skeleton's swap pairs. An involution.
pub fn flip_augment(
    sample: &MotionSample,
    spec: &SkeletonSpec,
    axis: usize,
) -> Result<MotionSample> {
    if axis >= sample.dims() {
        return Err(Error::Invalid(format!(
            "flip axis {axis} out of range for D={}",
            sample.dims()
        )));
    }
    let flip_seq = |seq: &PoseSequence| -> Result<PoseSequence> {
        let mut coords = seq.coords().clone();
        let mut vis = seq.visibility().clone();
        for t in 0..seq.len() {
            for j in 0..seq.joints() {
                coords[[t, j, axis]] = -coords[[t, j, axis]];
            }
        }
        if let Some(pairs) = &spec.left_right_swap {
            for &(a, b) in pairs {
                for t in 0..seq.len() {
                    for dd in 0..seq.dims() {
                        coords.swap([t, a, dd], [t, b, dd]);
                    }
                    vis.swap([t, a], [t, b]);
                }
            }
        }
        seq.with_coords(coords)?.with_visibility(vis)
    };
    Ok(MotionSample {
        id: sample.id.clone(),
        input: flip_seq(&sample.input)?,
        target: flip_seq(&sample.target)?,
        center_offset: sample.center_offset.clone(),
        scale: sample.scale,
    })
}
