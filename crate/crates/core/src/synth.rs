//! Seeded synthetic motion generator: a root joint under linear global
//! translation with smooth random acceleration, limb joints riding on fixed
//! offsets plus sinusoidal oscillation. 2D mode adds Bernoulli occlusion runs
//! (zeroing coordinates, as real 2D datasets do) and boundary clipping.
//!
//! The motion model is deliberately simple so that the zero-velocity and
//! constant-velocity baselines have closed-form errors on it.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Dataset, PoseSequence, SkeletonSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_sequences: usize,
    pub frames_per_sequence: usize,
    pub joints: usize,
    pub dims: usize,
    /// Root speed per frame is drawn from this range (per axis magnitude).
    pub velocity_range: (f64, f64),
    pub limb_amplitude_range: (f64, f64),
    /// Oscillation frequency in radians per frame.
    pub limb_frequency_range: (f64, f64),
    /// Probability per visible frame of starting an occlusion run (2D only).
    pub occlusion_rate: f64,
    /// Image plane for 2D data; required when `dims == 2`.
    pub image_bounds: Option<(f64, f64)>,
    pub frame_interval_ms: f64,
    /// Consecutive sequences sharing one video id, to exercise concatenation.
    pub sequences_per_video: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_sequences: 8,
            frames_per_sequence: 60,
            joints: 13,
            dims: 3,
            velocity_range: (0.01, 0.06),
            limb_amplitude_range: (0.05, 0.25),
            limb_frequency_range: (0.2, 0.9),
            occlusion_rate: 0.0,
            image_bounds: None,
            frame_interval_ms: 64.3,
            sequences_per_video: 1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn default_2d() -> Self {
        Self {
            dims: 2,
            velocity_range: (1.0, 6.0),
            limb_amplitude_range: (4.0, 20.0),
            occlusion_rate: 0.05,
            image_bounds: Some((1920.0, 1080.0)),
            frame_interval_ms: 40.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 || self.frames_per_sequence == 0 || self.joints == 0 {
            return Err(Error::Invalid("synthetic sizes must be positive".into()));
        }
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::Invalid(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return Err(Error::Invalid(format!(
                "occlusion_rate must be in [0,1), got {}",
                self.occlusion_rate
            )));
        }
        if self.dims == 2 && self.image_bounds.is_none() {
            return Err(Error::Invalid("2D synthesis needs image_bounds".into()));
        }
        if self.sequences_per_video == 0 {
            return Err(Error::Invalid("sequences_per_video must be positive".into()));
        }
        if !(self.frame_interval_ms > 0.0) {
            return Err(Error::Invalid("frame_interval_ms must be positive".into()));
        }
        Ok(())
    }

    fn skeleton(&self) -> SkeletonSpec {
        let mut names = vec!["root".to_string()];
        names.extend((1..self.joints).map(|i| format!("j{i}")));
        // Pair up the limb joints as mirror twins: (1,2), (3,4), ...
        let mut pairs = Vec::new();
        let mut i = 1;
        while i + 1 < self.joints {
            pairs.push((i, i + 1));
            i += 2;
        }
        SkeletonSpec {
            joint_names: names,
            neck_index: 0,
            left_right_swap: (!pairs.is_empty()).then_some(pairs),
            image_bounds: self.image_bounds,
        }
    }
}

/// Generate a dataset according to the spec. Fully determined by the seed.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let skeleton = spec.skeleton();
    let d = spec.dims;
    let n = spec.frames_per_sequence;
    let j = spec.joints;

    // Keep every joint well inside the image so boundary clipping cannot
    // occlude anything on its own; occlusion_rate stays the only source of
    // invisibility.
    let limb_reach = spec.limb_amplitude_range.1 * 2.0;
    let (lo, hi): (Vec<f64>, Vec<f64>) = match spec.image_bounds {
        Some((w, h)) => {
            let margin_x = (w * 0.25).max(limb_reach * 1.5);
            let margin_y = (h * 0.25).max(limb_reach * 1.5);
            (vec![margin_x, margin_y], vec![w - margin_x, h - margin_y])
        }
        None => (vec![-5.0; d], vec![5.0; d]),
    };

    let mut sequences = Vec::with_capacity(spec.num_sequences);
    for s in 0..spec.num_sequences {
        let video = format!("video{}", s / spec.sequences_per_video);
        let mut root = vec![0.0; d];
        let mut velocity = vec![0.0; d];
        for dd in 0..d {
            root[dd] = rng.random_range(lo[dd]..hi[dd]);
            let speed = rng.random_range(spec.velocity_range.0..=spec.velocity_range.1);
            velocity[dd] = if rng.random_range(0..2) == 0 { speed } else { -speed };
        }
        // Smooth random acceleration: one low-frequency sinusoid per axis.
        let accel_amp: Vec<f64> = (0..d)
            .map(|_| rng.random_range(0.0..spec.velocity_range.1 * 0.3))
            .collect();
        let accel_freq: Vec<f64> = (0..d).map(|_| rng.random_range(0.02..0.15)).collect();
        let accel_phase: Vec<f64> = (0..d)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();

        // Limbs: fixed offset from the root plus per-joint oscillation.
        let mut offsets = vec![vec![0.0; d]; j];
        let mut amps = vec![vec![0.0; d]; j];
        let mut freqs = vec![0.0; j];
        let mut phases = vec![0.0; j];
        for jj in 1..j {
            for dd in 0..d {
                offsets[jj][dd] = rng.random_range(-limb_reach / 2.0..limb_reach / 2.0);
                amps[jj][dd] =
                    rng.random_range(spec.limb_amplitude_range.0..=spec.limb_amplitude_range.1);
            }
            freqs[jj] =
                rng.random_range(spec.limb_frequency_range.0..=spec.limb_frequency_range.1);
            phases[jj] = rng.random_range(0.0..std::f64::consts::TAU);
        }

        let mut coords = Array3::zeros((n, j, d));
        let mut pos = root.clone();
        let mut vel = velocity.clone();
        for t in 0..n {
            for dd in 0..d {
                coords[[t, 0, dd]] = pos[dd];
            }
            for jj in 1..j {
                let osc = (freqs[jj] * t as f64 + phases[jj]).sin();
                for dd in 0..d {
                    coords[[t, jj, dd]] = pos[dd] + offsets[jj][dd] + amps[jj][dd] * osc;
                }
            }
            for dd in 0..d {
                let accel = accel_amp[dd] * (accel_freq[dd] * t as f64 + accel_phase[dd]).sin();
                vel[dd] = velocity[dd] + accel;
                pos[dd] += vel[dd];
                // Reflect at the walking box so long videos stay in frame.
                if pos[dd] < lo[dd] {
                    pos[dd] = 2.0 * lo[dd] - pos[dd];
                    velocity[dd] = -velocity[dd];
                } else if pos[dd] > hi[dd] {
                    pos[dd] = 2.0 * hi[dd] - pos[dd];
                    velocity[dd] = -velocity[dd];
                }
            }
        }

        let mut vis = Array2::ones((n, j));
        if spec.dims == 2 {
            if spec.occlusion_rate > 0.0 {
                for jj in 0..j {
                    let mut t = 0;
                    while t < n {
                        if rng.random_range(0.0..1.0) < spec.occlusion_rate {
                            let run = rng.random_range(1..=5usize);
                            for f in t..(t + run).min(n) {
                                vis[[f, jj]] = 0;
                            }
                            t += run;
                        } else {
                            t += 1;
                        }
                    }
                }
            }
            // Boundary clipping: anything generated out of frame (should not
            // happen inside the margins, but the rule is part of the format).
            if let Some((w, h)) = spec.image_bounds {
                for t in 0..n {
                    for jj in 0..j {
                        let x = coords[[t, jj, 0]];
                        let y = coords[[t, jj, 1]];
                        if x < 0.0 || x >= w || y < 0.0 || y >= h {
                            vis[[t, jj]] = 0;
                        }
                    }
                }
            }
            // Invisible joints are stored zeroed, like the real annotations.
            for t in 0..n {
                for jj in 0..j {
                    if vis[[t, jj]] == 0 {
                        for dd in 0..d {
                            coords[[t, jj, dd]] = 0.0;
                        }
                    }
                }
            }
        }

        sequences.push(PoseSequence::new(
            coords,
            vis,
            spec.frame_interval_ms,
            format!("seq{s}"),
            video,
        )?);
    }
    Dataset::new(skeleton, spec.frame_interval_ms, sequences)
}
