//! Domain types shared by every module: pose sequences, training samples,
//! skeleton descriptions, and dataset containers.
//!
//! All types here are immutable after construction and safe to share
//! read-only across concurrent workers. Frame indices are 0-based in code;
//! the prose documentation of individual operations uses 1-based frames.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

/// A single person's global joint trajectory over `N` frames.
///
/// Coordinates are stored frame-major as an `(N, J, D)` tensor in the input
/// units (pixels for 2D data, meters for 3D). Visibility is a binary `(N, J)`
/// mask; invisible-joint coordinates are kept exactly as the source wrote
/// them (typically zero) and carry no meaning of their own.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    coords: Array3<f64>,
    visibility: Array2<u8>,
    frame_interval_ms: f64,
    pub sequence_id: String,
    pub video_id: String,
}

impl PoseSequence {
    pub fn new(
        coords: Array3<f64>,
        visibility: Array2<u8>,
        frame_interval_ms: f64,
        sequence_id: impl Into<String>,
        video_id: impl Into<String>,
    ) -> Result<Self> {
        let (n, j, d) = coords.dim();
        if n < 1 || j < 1 {
            return Err(Error::Invalid(format!(
                "pose sequence needs at least one frame and one joint, got {n} x {j}"
            )));
        }
        if d != 2 && d != 3 {
            return Err(Error::Invalid(format!("coordinate dims must be 2 or 3, got {d}")));
        }
        if visibility.dim() != (n, j) {
            return Err(Error::Shape(format!(
                "visibility is {:?}, expected ({n}, {j})",
                visibility.dim()
            )));
        }
        if let Some(v) = visibility.iter().find(|v| **v > 1) {
            return Err(Error::Invalid(format!("visibility value {v} outside {{0,1}}")));
        }
        if !(frame_interval_ms > 0.0) {
            return Err(Error::Invalid(format!(
                "frame_interval_ms must be positive, got {frame_interval_ms}"
            )));
        }
        Ok(Self {
            coords,
            visibility,
            frame_interval_ms,
            sequence_id: sequence_id.into(),
            video_id: video_id.into(),
        })
    }

    /// Number of frames `N`.
    pub fn len(&self) -> usize {
        self.coords.dim().0
    }

    pub fn is_empty(&self) -> bool {
        false // N >= 1 by construction
    }

    /// Number of joints `J`.
    pub fn joints(&self) -> usize {
        self.coords.dim().1
    }

    /// Coordinate dimensionality `D` (2 or 3).
    pub fn dims(&self) -> usize {
        self.coords.dim().2
    }

    pub fn frame_interval_ms(&self) -> f64 {
        self.frame_interval_ms
    }

    pub fn coords(&self) -> &Array3<f64> {
        &self.coords
    }

    pub fn visibility(&self) -> &Array2<u8> {
        &self.visibility
    }

    /// Rebuild with new coordinates, keeping visibility and metadata.
    pub fn with_coords(&self, coords: Array3<f64>) -> Result<Self> {
        Self::new(
            coords,
            self.visibility.clone(),
            self.frame_interval_ms,
            self.sequence_id.clone(),
            self.video_id.clone(),
        )
    }

    /// Rebuild with new visibility, keeping coordinates and metadata.
    pub fn with_visibility(&self, visibility: Array2<u8>) -> Result<Self> {
        Self::new(
            self.coords.clone(),
            visibility,
            self.frame_interval_ms,
            self.sequence_id.clone(),
            self.video_id.clone(),
        )
    }

    /// A copy of the frame range `[start, start+len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() || len == 0 {
            return Err(Error::Invalid(format!(
                "window [{start}, {}) out of range for {} frames",
                start + len,
                self.len()
            )));
        }
        Self::new(
            self.coords.slice(ndarray::s![start..start + len, .., ..]).to_owned(),
            self.visibility.slice(ndarray::s![start..start + len, ..]).to_owned(),
            self.frame_interval_ms,
            self.sequence_id.clone(),
            self.video_id.clone(),
        )
    }

    /// Concatenate `other`'s frames after this sequence's frames.
    pub fn concat(&self, other: &PoseSequence) -> Result<Self> {
        if other.joints() != self.joints() || other.dims() != self.dims() {
            return Err(Error::Shape(format!(
                "cannot concatenate {}x{} sequence with {}x{}",
                self.joints(),
                self.dims(),
                other.joints(),
                other.dims()
            )));
        }
        let coords = ndarray::concatenate(Axis(0), &[self.coords.view(), other.coords.view()])
            .expect("shapes checked");
        let visibility =
            ndarray::concatenate(Axis(0), &[self.visibility.view(), other.visibility.view()])
                .expect("shapes checked");
        Self::new(
            coords,
            visibility,
            self.frame_interval_ms,
            self.sequence_id.clone(),
            self.video_id.clone(),
        )
    }

    /// True when every coordinate is finite.
    pub fn all_finite(&self) -> bool {
        self.coords.iter().all(|c| c.is_finite())
    }
}

/// Joint naming and structural metadata for one dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    /// Index of the centering joint ("neck").
    pub neck_index: usize,
    /// Mirror-image joint pairs, swapped when a pose is flipped.
    pub left_right_swap: Option<Vec<(usize, usize)>>,
    /// (width, height) of the image plane for 2D datasets.
    pub image_bounds: Option<(f64, f64)>,
}

impl SkeletonSpec {
    pub fn joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joints();
        if j == 0 {
            return Err(Error::Invalid("skeleton has no joints".into()));
        }
        if self.neck_index >= j {
            return Err(Error::Invalid(format!(
                "neck_index {} out of range for {j} joints",
                self.neck_index
            )));
        }
        if let Some(pairs) = &self.left_right_swap {
            let mut seen = vec![false; j];
            for &(a, b) in pairs {
                if a >= j || b >= j {
                    return Err(Error::Invalid(format!("swap pair ({a},{b}) out of range")));
                }
                if a == b || seen[a] || seen[b] {
                    return Err(Error::Invalid(format!("swap pairs not disjoint at ({a},{b})")));
                }
                seen[a] = true;
                seen[b] = true;
            }
        }
        if let Some((w, h)) = self.image_bounds {
            if !(w > 0.0 && h > 0.0) {
                return Err(Error::Invalid(format!("image bounds ({w},{h}) must be positive")));
            }
        }
        Ok(())
    }
}

/// One training or evaluation unit: an input window of `T` frames, the
/// `tau`-frame target that follows it, and the coordinate transform that was
/// applied to both (identity = offset 0, scale 1).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSample {
    /// Stable window identifier (`video_id:start_frame`), used to link
    /// predictions back to ground truth.
    pub id: String,
    pub input: PoseSequence,
    pub target: PoseSequence,
    /// The subtracted center, in original units (length `D`).
    pub center_offset: Vec<f64>,
    /// The divisor applied after centering.
    pub scale: f64,
}

impl MotionSample {
    pub fn new(id: impl Into<String>, input: PoseSequence, target: PoseSequence) -> Result<Self> {
        if input.joints() != target.joints() || input.dims() != target.dims() {
            return Err(Error::Shape(format!(
                "input {}x{} and target {}x{} disagree",
                input.joints(),
                input.dims(),
                target.joints(),
                target.dims()
            )));
        }
        let dims = input.dims();
        Ok(Self {
            id: id.into(),
            input,
            target,
            center_offset: vec![0.0; dims],
            scale: 1.0,
        })
    }

    /// Input window length `T`.
    pub fn input_len(&self) -> usize {
        self.input.len()
    }

    /// Target window length `tau`.
    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    pub fn joints(&self) -> usize {
        self.input.joints()
    }

    pub fn dims(&self) -> usize {
        self.input.dims()
    }
}

/// A collection of pose sequences sharing one skeleton and frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub skeleton: SkeletonSpec,
    pub frame_interval_ms: f64,
    pub sequences: Vec<PoseSequence>,
}

impl Dataset {
    pub fn new(
        skeleton: SkeletonSpec,
        frame_interval_ms: f64,
        sequences: Vec<PoseSequence>,
    ) -> Result<Self> {
        skeleton.validate()?;
        if !(frame_interval_ms > 0.0) {
            return Err(Error::Invalid(format!(
                "frame_interval_ms must be positive, got {frame_interval_ms}"
            )));
        }
        let ds = Self {
            skeleton,
            frame_interval_ms,
            sequences,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.skeleton.joints();
        for seq in &self.sequences {
            if seq.joints() != j {
                return Err(Error::Shape(format!(
                    "sequence {} has {} joints, skeleton has {j}",
                    seq.sequence_id,
                    seq.joints()
                )));
            }
        }
        if let Some(first) = self.sequences.first() {
            let d = first.dims();
            for seq in &self.sequences {
                if seq.dims() != d {
                    return Err(Error::Shape(format!(
                        "sequence {} has D={}, dataset has D={d}",
                        seq.sequence_id,
                        seq.dims()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Coordinate dimensionality of the dataset (2 or 3); `None` when empty.
    pub fn dims(&self) -> Option<usize> {
        self.sequences.first().map(|s| s.dims())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn seq(n: usize, j: usize, d: usize) -> PoseSequence {
        let coords = Array::from_shape_fn((n, j, d), |(t, jj, dd)| (t * 100 + jj * 10 + dd) as f64);
        let vis = Array2::ones((n, j));
        PoseSequence::new(coords, vis, 50.0, "s0", "v0").unwrap()
    }

    #[test]
    fn rejects_bad_visibility_value() {
        let coords = Array3::zeros((2, 3, 2));
        let mut vis = Array2::ones((2, 3));
        vis[[1, 2]] = 2;
        let err = PoseSequence::new(coords, vis, 50.0, "s", "v").unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn rejects_bad_dims() {
        let coords = Array3::zeros((2, 3, 4));
        let vis = Array2::ones((2, 3));
        assert!(PoseSequence::new(coords, vis, 50.0, "s", "v").is_err());
    }

    #[test]
    fn rejects_visibility_shape_mismatch() {
        let coords = Array3::zeros((2, 3, 2));
        let vis = Array2::ones((2, 2));
        assert!(matches!(
            PoseSequence::new(coords, vis, 50.0, "s", "v"),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn window_and_concat_roundtrip() {
        let s = seq(10, 3, 3);
        let a = s.window(0, 4).unwrap();
        let b = s.window(4, 6).unwrap();
        assert_eq!(a.concat(&b).unwrap().coords(), s.coords());
    }

    #[test]
    fn window_out_of_range() {
        let s = seq(5, 2, 2);
        assert!(s.window(3, 3).is_err());
    }

    #[test]
    fn skeleton_swap_pairs_must_be_disjoint() {
        let spec = SkeletonSpec {
            joint_names: vec!["a".into(), "b".into(), "c".into()],
            neck_index: 0,
            left_right_swap: Some(vec![(1, 2), (2, 0)]),
            image_bounds: None,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn sample_requires_matching_shapes() {
        let input = seq(4, 3, 3);
        let target = seq(2, 2, 3);
        assert!(MotionSample::new("w", input, target).is_err());
    }
}
