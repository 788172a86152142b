//! Training: smooth-L1 loss with online hard keypoint mining, curriculum
//! frame unmasking, Adam with per-epoch exponential learning-rate decay, and
//! the epoch loop itself.
//!
//! The loss is computed over the model's reconstruction of the whole
//! concatenated `T + tau` trajectory (the completion formulation), masked by
//! the curriculum vector; target entries whose visibility is 0 contribute
//! nothing, so no gradient flows through unobserved ground truth.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dct::{self, DctBasis};
use crate::error::{Error, Result};
use crate::gcnet::{self, ForwardCache, GcnConfig, GcnModel, Gradients, InputRepr};
use crate::metrics::{self, MetricConfig, MetricKind};
use crate::pose::{Dataset, MotionSample};
use crate::predict::{run_inference, Checkpoint};
use crate::preprocess::{self, PreprocessConfig, WindowSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Number of hardest joints kept by OHKM (paper defaults: 8 for 2D, 6
    /// for 3D).
    pub ohkm_k: usize,
    pub ohkm_enabled: bool,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::default_for_dims(3)
    }
}

impl LossConfig {
    pub fn default_for_dims(dims: usize) -> Self {
        Self {
            ohkm_k: if dims == 2 { 8 } else { 6 },
            ohkm_enabled: true,
            smooth_l1_beta: 1.0,
        }
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.ohkm_k < 1 || self.ohkm_k > joints {
            return Err(Error::Invalid(format!(
                "ohkm_k {} outside [1, {joints}]",
                self.ohkm_k
            )));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Invalid("smooth_l1_beta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Forecast frame `t` joins the loss once `epoch >= epochs_per_frame * t`.
    pub epochs_per_frame: usize,
    pub enabled: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            epochs_per_frame: 2,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    /// Learning-rate multiplier applied every epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            lr_decay: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.base_lr * self.lr_decay.powi(epoch as i32)
    }
}

/// Elementwise smooth-L1: `e^2 / (2 beta)` inside `|e| < beta`, linear
/// `|e| - beta/2` outside.
pub fn smooth_l1(pred: f64, target: f64, beta: f64) -> f64 {
    let e = (pred - target).abs();
    if e < beta {
        e * e / (2.0 * beta)
    } else {
        e - beta / 2.0
    }
}

/// d smooth_l1 / d pred.
pub fn smooth_l1_grad(pred: f64, target: f64, beta: f64) -> f64 {
    let e = pred - target;
    if e.abs() < beta {
        e / beta
    } else {
        e.signum()
    }
}

/// Per-joint mean smooth-L1 over active frames and channels. Entries whose
/// target visibility is 0 are excluded from the mean; a joint with nothing
/// to score gets 0.
pub fn joint_losses(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    target_vis: &Array2<u8>,
    frame_mask: &[bool],
    beta: f64,
) -> Result<Array1<f64>> {
    let (n, j, d) = pred.dim();
    if target.dim() != (n, j, d) {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if target_vis.dim() != (n, j) || frame_mask.len() != n {
        return Err(Error::Shape("visibility or mask length mismatch".into()));
    }
    if !frame_mask.iter().any(|&m| m) {
        return Err(Error::Invalid("frame mask has no active frames".into()));
    }
    let mut sums = Array1::zeros(j);
    let mut counts = vec![0usize; j];
    for t in 0..n {
        if !frame_mask[t] {
            continue;
        }
        for jj in 0..j {
            if target_vis[[t, jj]] == 0 {
                continue;
            }
            for dd in 0..d {
                sums[jj] += smooth_l1(pred[[t, jj, dd]], target[[t, jj, dd]], beta);
            }
            counts[jj] += d;
        }
    }
    for jj in 0..j {
        if counts[jj] > 0 {
            sums[jj] /= counts[jj] as f64;
        }
    }
    Ok(sums)
}

/// Indices of the `k` largest losses, ties broken toward lower joint index.
fn ohkm_select(losses: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Online hard keypoint mining: the mean of the `k` largest per-joint losses.
pub fn ohkm(losses: &[f64], k: usize) -> Result<f64> {
    if k < 1 || k > losses.len() {
        return Err(Error::Invalid(format!(
            "k = {k} outside [1, {}]",
            losses.len()
        )));
    }
    let selected = ohkm_select(losses, k);
    Ok(selected.iter().map(|&i| losses[i]).sum::<f64>() / k as f64)
}

/// Binary mask over the `T + tau` completed trajectory: observed frames are
/// always active, forecast frame `t` (1-based) activates once
/// `epoch >= epochs_per_frame * t`.
pub fn curriculum_mask(epoch: usize, t: usize, tau: usize, cfg: &CurriculumConfig) -> Vec<bool> {
    let mut mask = vec![true; t + tau];
    if cfg.enabled {
        for i in 0..tau {
            mask[t + i] = epoch >= cfg.epochs_per_frame * (i + 1);
        }
    }
    mask
}

/// The scalar training loss and its gradient with respect to the predicted
/// completion: OHKM over per-joint losses when enabled, plain mean otherwise.
pub fn masked_ohkm_loss(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    target_vis: &Array2<u8>,
    frame_mask: &[bool],
    cfg: &LossConfig,
) -> Result<(f64, Array3<f64>)> {
    let (n, j, d) = pred.dim();
    cfg.validate(j)?;
    let losses = joint_losses(pred, target, target_vis, frame_mask, cfg.smooth_l1_beta)?;
    let selected = if cfg.ohkm_enabled {
        ohkm_select(losses.as_slice().unwrap(), cfg.ohkm_k)
    } else {
        (0..j).collect()
    };
    let loss = selected.iter().map(|&i| losses[i]).sum::<f64>() / selected.len() as f64;

    let mut counts = vec![0usize; j];
    for t in 0..n {
        if frame_mask[t] {
            for jj in 0..j {
                if target_vis[[t, jj]] == 1 {
                    counts[jj] += d;
                }
            }
        }
    }
    let mut grad = Array3::zeros((n, j, d));
    let weight = 1.0 / selected.len() as f64;
    for &jj in &selected {
        if counts[jj] == 0 {
            continue;
        }
        let per_term = weight / counts[jj] as f64;
        for t in 0..n {
            if !frame_mask[t] || target_vis[[t, jj]] == 0 {
                continue;
            }
            for dd in 0..d {
                grad[[t, jj, dd]] = per_term
                    * smooth_l1_grad(pred[[t, jj, dd]], target[[t, jj, dd]], cfg.smooth_l1_beta);
            }
        }
    }
    Ok((loss, grad))
}

/// Adam moment accumulators, one slot per model tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    slots: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(model: &GcnModel) -> Self {
        let slots = model
            .param_tensors()
            .into_iter()
            .map(|(name, p)| (name, vec![0.0; p.len()], vec![0.0; p.len()]))
            .collect();
        Self { step: 0, slots }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every model tensor. Fails on
/// non-finite gradients, leaving the parameters untouched.
pub fn adam_step(
    model: &mut GcnModel,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::Diverged("non-finite gradient in adam step".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let params = model.param_tensors_mut();
    if params.len() != state.slots.len() || params.len() != grads.tensors().len() {
        return Err(Error::Shape("optimizer state does not match model".into()));
    }
    for (((pname, param), (sname, m, v)), (gname, grad)) in params
        .into_iter()
        .zip(state.slots.iter_mut())
        .zip(grads.tensors().iter())
    {
        if pname != *sname || pname != *gname || param.len() != grad.len() {
            return Err(Error::Shape(format!(
                "tensor mismatch: param {pname}, state {sname}, grad {gname}"
            )));
        }
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Forward one preprocessed sample through features, the network, decode and
/// integration; return the completion loss, parameter gradients, and the
/// forward cache (for running-statistics updates).
#[allow(clippy::too_many_arguments)]
pub fn sample_step(
    model: &GcnModel,
    input: &crate::pose::PoseSequence,
    target_full: &Array3<f64>,
    target_vis: &Array2<u8>,
    frame_mask: &[bool],
    basis: &DctBasis,
    input_repr: InputRepr,
    loss_cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients, ForwardCache)> {
    let node_mode = model.config().node_mode;
    let features = gcnet::node_features(input, basis, node_mode, input_repr)?;
    let (out, cache) = model.forward_train(&features, rng)?;
    let joint_out = gcnet::features_to_joint_layout(&out, input.joints(), input.dims(), node_mode)?;
    let decoded = dct::decode_sequence(&joint_out, basis, input.dims())?;
    let positions = gcnet::reconstruct_positions(&decoded, input, input_repr);
    let (loss, grad_pos) = masked_ohkm_loss(&positions, target_full, target_vis, frame_mask, loss_cfg)?;
    let grad_decoded = gcnet::reconstruct_backward(&grad_pos, input.len(), input_repr);
    let grad_joint = dct::decode_sequence_backward(&grad_decoded, basis)?;
    let grad_out = gcnet::features_from_joint_layout(
        &grad_joint,
        node_mode,
        input.dims(),
        model.config().coeffs,
    );
    let grads = model.backward(&cache, &grad_out)?;
    Ok((loss, grads, cache))
}

/// Loss-only version of [`sample_step`], used by finite-difference checks.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    model: &GcnModel,
    input: &crate::pose::PoseSequence,
    target_full: &Array3<f64>,
    target_vis: &Array2<u8>,
    frame_mask: &[bool],
    basis: &DctBasis,
    input_repr: InputRepr,
    loss_cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let node_mode = model.config().node_mode;
    let features = gcnet::node_features(input, basis, node_mode, input_repr)?;
    let (out, _) = model.forward_train(&features, rng)?;
    let joint_out = gcnet::features_to_joint_layout(&out, input.joints(), input.dims(), node_mode)?;
    let decoded = dct::decode_sequence(&joint_out, basis, input.dims())?;
    let positions = gcnet::reconstruct_positions(&decoded, input, input_repr);
    let (loss, _) = masked_ohkm_loss(&positions, target_full, target_vis, frame_mask, loss_cfg)?;
    Ok(loss)
}

/// Loop-level switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub input_repr: InputRepr,
    /// Emit each sample in both temporal orientations every epoch.
    pub augment_reverse: bool,
    /// Mirror samples about axis 0 with `flip_probability`.
    pub augment_flip: bool,
    pub flip_probability: f64,
    /// Held-out fraction of training windows when no validation set is given.
    pub val_fraction: f64,
    /// Restrict forecast loss to the first `k` frames (short-term model).
    pub short_term_frames: Option<usize>,
    /// Start with the output layer zeroed so training begins at the
    /// zero-velocity identity and learns corrections from there. At
    /// desk-scale step counts this matters a lot; the global residual makes
    /// it the natural starting point.
    pub zero_init_output: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self::default_for_dims(3)
    }
}

impl TrainOptions {
    pub fn default_for_dims(dims: usize) -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            input_repr: if dims == 2 { InputRepr::Position } else { InputRepr::Velocity },
            augment_reverse: dims == 3,
            augment_flip: dims == 3,
            flip_probability: 0.5,
            val_fraction: 0.1,
            short_term_frames: None,
            zero_init_output: true,
        }
    }
}

/// Everything `train` needs in one bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub gcn: GcnConfig,
    pub preprocess: PreprocessConfig,
    pub window: WindowSpec,
    pub loss: LossConfig,
    pub curriculum: CurriculumConfig,
    pub optimizer: OptimizerConfig,
    pub metric: MetricConfig,
    pub options: TrainOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::default_for_dims(3)
    }
}

impl TrainConfig {
    pub fn default_for_dims(dims: usize) -> Self {
        Self {
            gcn: GcnConfig {
                dims,
                ..GcnConfig::default()
            },
            preprocess: PreprocessConfig::default_for_dims(dims),
            window: WindowSpec::default(),
            loss: LossConfig::default_for_dims(dims),
            curriculum: CurriculumConfig::default(),
            optimizer: OptimizerConfig::default(),
            metric: MetricConfig::default_for_dims(dims),
            options: TrainOptions::default_for_dims(dims),
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
    pub lr: f64,
    pub active_frames: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub diverged: bool,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_metric,lr,active_frames,seconds\n");
        for e in &self.epochs {
            let val = e.val_metric.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.train_loss, val, e.lr, e.active_frames, e.seconds
            ));
        }
        out
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

struct Prepared {
    sample: MotionSample,
}

fn prepare_samples(
    raw: &[MotionSample],
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<Prepared>> {
    raw.iter()
        .map(|s| {
            let input = if cfg.preprocess.interpolate_invisible {
                preprocess::interpolate_invisible(&s.input)?.0
            } else {
                s.input.clone()
            };
            let (input_c, transform) =
                preprocess::center_and_scale(&input, &dataset.skeleton, &cfg.preprocess)?;
            let target_c = preprocess::center_with(&s.target, &transform)?;
            Ok(Prepared {
                sample: MotionSample {
                    id: s.id.clone(),
                    input: input_c,
                    target: target_c,
                    center_offset: transform.offset,
                    scale: transform.scale,
                },
            })
        })
        .collect()
}

fn completion_target(sample: &MotionSample) -> (Array3<f64>, Array2<u8>) {
    let coords = ndarray::concatenate(
        Axis(0),
        &[sample.input.coords().view(), sample.target.coords().view()],
    )
    .expect("matching shapes");
    let vis = ndarray::concatenate(
        Axis(0),
        &[
            sample.input.visibility().view(),
            sample.target.visibility().view(),
        ],
    )
    .expect("matching shapes");
    (coords, vis)
}

fn validate_model(
    model: &GcnModel,
    cfg: &TrainConfig,
    val_samples: &[MotionSample],
    dataset: &Dataset,
) -> Result<Option<f64>> {
    if val_samples.is_empty() {
        return Ok(None);
    }
    let dims = val_samples[0].dims();
    let kind = cfg.metric.kind_for_dims(dims);
    let ckpt = Checkpoint {
        model: model.clone(),
        input_repr: cfg.options.input_repr,
        preprocess: cfg.preprocess.clone(),
        window: cfg.window.clone(),
    };
    let tau = cfg.window.output_frames;
    let frames: Vec<usize> = cfg
        .metric
        .offsets_ms
        .iter()
        .map(|&off| metrics::offset_to_frame(off, dataset.frame_interval_ms, tau))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for sample in val_samples {
        let pred = run_inference(&ckpt, &sample.input, &dataset.skeleton)?;
        let mut sample_sum = 0.0;
        for &frame in &frames {
            sample_sum += match kind {
                MetricKind::Vim => metrics::vim(&pred, &sample.target, frame - 1, &cfg.metric)?,
                MetricKind::Vam => metrics::vam(&pred, &sample.target, frame - 1, &cfg.metric)?,
            };
        }
        total += sample_sum / frames.len() as f64;
    }
    Ok(Some(total / val_samples.len() as f64))
}

/// Run the full training recipe on a dataset. When `val` is `None`, a
/// `val_fraction` share of the training windows is held out instead; with no
/// validation at all, the final model is returned.
///
/// On divergence (non-finite loss or gradient) the loop stops and the last
/// good checkpoint is returned with `report.diverged` set.
pub fn train(
    dataset: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.window.validate()?;
    cfg.preprocess.validate()?;
    let dims = dataset
        .dims()
        .ok_or_else(|| Error::Invalid("training dataset is empty".into()))?;
    // The architecture must match the data it is trained on.
    let gcn = GcnConfig {
        joints: dataset.skeleton.joints(),
        dims,
        ..cfg.gcn.clone()
    };
    gcn.validate()?;
    cfg.loss.validate(gcn.joints)?;
    if let Some(k) = cfg.options.short_term_frames {
        if k < 1 || k > cfg.window.output_frames {
            return Err(Error::Invalid(format!(
                "short_term_frames {k} outside [1, {}]",
                cfg.window.output_frames
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw_windows = preprocess::extend_and_window(dataset, &cfg.window, &mut rng)?;
    if raw_windows.is_empty() {
        return Err(Error::Invalid("no training windows after windowing".into()));
    }

    // Validation windows: explicit dataset, or a held-out share of training.
    let (train_raw, val_raw): (Vec<MotionSample>, Vec<MotionSample>) = match val {
        Some(vd) => {
            let spec = WindowSpec {
                sampling: preprocess::Sampling::Stride(1),
                ..cfg.window.clone()
            };
            let mut vrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            (raw_windows, preprocess::extend_and_window(vd, &spec, &mut vrng)?)
        }
        None if cfg.options.val_fraction > 0.0 && raw_windows.len() > 1 => {
            let mut windows = raw_windows;
            windows.shuffle(&mut rng);
            let n_val = ((windows.len() as f64 * cfg.options.val_fraction) as usize)
                .clamp(1, windows.len() - 1);
            let train = windows.split_off(n_val);
            (train, windows)
        }
        None => (raw_windows, Vec::new()),
    };

    let prepared = prepare_samples(&train_raw, dataset, cfg)?;
    let t = cfg.window.input_frames;
    let tau = cfg.window.output_frames;
    let basis = dct::make_basis(t + tau, gcn.coeffs.min(t + tau))?;
    let gcn = GcnConfig {
        coeffs: basis.l(),
        ..gcn
    };

    let mut model = gcnet::init_model(&gcn, seed)?;
    if cfg.options.zero_init_output {
        model.zero_output_layer();
    }
    let mut adam = AdamState::new(&model);
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val: None,
        diverged: false,
    };
    let mut best_model = model.clone();
    let have_val = !val_raw.is_empty();

    'epochs: for epoch in 0..cfg.options.epochs {
        let started = std::time::Instant::now();
        let lr = cfg.optimizer.lr_at_epoch(epoch);
        let mut mask = curriculum_mask(epoch, t, tau, &cfg.curriculum);
        if let Some(k) = cfg.options.short_term_frames {
            for i in k..tau {
                mask[t + i] = false;
            }
        }
        let active_frames = mask.iter().filter(|&&m| m).count();

        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);

        // Reversal doubles the sample stream; flips are drawn per emitted
        // sample.
        let mut emitted: Vec<MotionSample> = Vec::new();
        for &idx in &order {
            let base = &prepared[idx].sample;
            let mut variants = vec![base.clone()];
            if cfg.options.augment_reverse {
                variants.push(preprocess::reverse_augment(base)?);
            }
            for mut v in variants {
                if cfg.options.augment_flip
                    && rng.random_range(0.0..1.0) < cfg.options.flip_probability
                {
                    v = preprocess::flip_augment(&v, &dataset.skeleton, 0)?;
                }
                emitted.push(v);
            }
        }

        let mut epoch_loss = 0.0;
        for batch in emitted.chunks(cfg.options.batch_size.max(1)) {
            let mut batch_grads: Option<Gradients> = None;
            for sample in batch {
                let (target_full, vis_full) = completion_target(sample);
                let step = sample_step(
                    &model,
                    &sample.input,
                    &target_full,
                    &vis_full,
                    &mask,
                    &basis,
                    cfg.options.input_repr,
                    &cfg.loss,
                    &mut rng,
                );
                let (loss, grads, cache) = match step {
                    Ok(v) => v,
                    Err(Error::NonFinite(msg)) => {
                        log::error!("epoch {epoch}: diverged ({msg}); stopping");
                        report.diverged = true;
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    log::error!("epoch {epoch}: non-finite loss; stopping");
                    report.diverged = true;
                    break 'epochs;
                }
                epoch_loss += loss;
                model.update_running_stats(&cache);
                match &mut batch_grads {
                    Some(acc) => acc.accumulate(&grads)?,
                    None => batch_grads = Some(grads),
                }
            }
            if let Some(mut grads) = batch_grads {
                grads.scale(1.0 / batch.len() as f64);
                match adam_step(&mut model, &grads, &mut adam, lr, &cfg.optimizer) {
                    Ok(()) => {}
                    Err(Error::Diverged(msg)) => {
                        log::error!("epoch {epoch}: {msg}; stopping");
                        report.diverged = true;
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let train_loss = epoch_loss / emitted.len().max(1) as f64;

        let val_metric = validate_model(&model, cfg, &val_raw, dataset)?;
        if let Some(v) = val_metric {
            if report.best_val.map_or(true, |best| v < best) {
                report.best_val = Some(v);
                report.best_epoch = Some(epoch);
                best_model = model.clone();
            }
        } else {
            best_model = model.clone();
        }

        report.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_metric,
            lr,
            active_frames,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    let final_model = if have_val { best_model } else { model };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: final_model,
            input_repr: cfg.options.input_repr,
            preprocess: cfg.preprocess.clone(),
            window: cfg.window.clone(),
        },
        report,
    })
}

/// The short-term specialization: identical pipeline with forecast loss
/// restricted to the first `k_frames` frames (on top of the curriculum).
pub fn train_short_term(
    dataset: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    k_frames: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        options: TrainOptions {
            short_term_frames: Some(k_frames),
            ..cfg.options.clone()
        },
        ..cfg.clone()
    };
    train(dataset, val, &cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcnet::NodeMode;
    use crate::pose::{PoseSequence, SkeletonSpec};
    use ndarray::Array;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(1.0, 1.0, 1.0), 0.0);
        assert!((smooth_l1(0.5, 0.0, 1.0) - 0.125).abs() < 1e-15);
        assert!((smooth_l1(2.0, 0.0, 1.0) - 1.5).abs() < 1e-15);
        assert!((smooth_l1(-2.0, 0.0, 1.0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn smooth_l1_grad_matches_finite_difference() {
        let h = 1e-7;
        for &(p, beta) in &[(0.3, 1.0), (-0.7, 1.0), (2.5, 1.0), (0.4, 0.5)] {
            let numeric = (smooth_l1(p + h, 0.0, beta) - smooth_l1(p - h, 0.0, beta)) / (2.0 * h);
            assert!((smooth_l1_grad(p, 0.0, beta) - numeric).abs() < 1e-6);
        }
    }

    #[test]
    fn ohkm_examples() {
        assert_eq!(ohkm(&[5.0, 1.0, 3.0, 2.0], 2).unwrap(), 4.0);
        // k = J: plain mean.
        assert!((ohkm(&[5.0, 1.0, 3.0, 2.0], 4).unwrap() - 2.75).abs() < 1e-15);
        // All equal: mean regardless of k.
        assert_eq!(ohkm(&[2.0, 2.0, 2.0], 2).unwrap(), 2.0);
        assert!(ohkm(&[1.0], 2).is_err());
        assert!(ohkm(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn ohkm_ties_prefer_lower_index() {
        assert_eq!(ohkm_select(&[3.0, 5.0, 5.0, 1.0], 2), vec![1, 2]);
        assert_eq!(ohkm_select(&[5.0, 5.0, 5.0], 2), vec![0, 1]);
    }

    #[test]
    fn ohkm_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let len = rng.random_range(1..=20usize);
            let v: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..10.0)).collect();
            let k = rng.random_range(1..=len);
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let expect = sorted[..k].iter().sum::<f64>() / k as f64;
            assert!((ohkm(&v, k).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn curriculum_table() {
        let cfg = CurriculumConfig::default(); // E = 2
        let active = |epoch| {
            curriculum_mask(epoch, 16, 14, &cfg)
                .iter()
                .filter(|&&m| m)
                .count()
        };
        assert_eq!(active(0), 16);
        assert_eq!(active(1), 16);
        assert_eq!(active(2), 17);
        assert_eq!(active(27), 29);
        assert_eq!(active(28), 30);
        assert_eq!(active(100), 30);
        // Disabled: everything active from the start.
        let off = CurriculumConfig {
            enabled: false,
            ..cfg
        };
        assert_eq!(
            curriculum_mask(0, 16, 14, &off).iter().filter(|&&m| m).count(),
            30
        );
    }

    #[test]
    fn curriculum_is_monotone_in_epoch() {
        let cfg = CurriculumConfig {
            epochs_per_frame: 3,
            enabled: true,
        };
        for epoch in 0..50 {
            let now = curriculum_mask(epoch, 16, 14, &cfg);
            let next = curriculum_mask(epoch + 1, 16, 14, &cfg);
            for (a, b) in now.iter().zip(next.iter()) {
                assert!(!a | b, "active set must grow");
            }
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = OptimizerConfig::default();
        assert!((cfg.lr_at_epoch(0) - 0.001).abs() < 1e-18);
        assert!((cfg.lr_at_epoch(10) - 0.001 * 0.95_f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn joint_losses_basics() {
        let pred = Array3::zeros((2, 2, 2));
        let target = Array3::zeros((2, 2, 2));
        let vis = Array2::ones((2, 2));
        let mask = vec![true, true];
        let jl = joint_losses(&pred, &target, &vis, &mask, 1.0).unwrap();
        assert!(jl.iter().all(|&v| v == 0.0));

        // Single active frame, single erroneous channel on joint 0.
        let mut pred = Array3::zeros((2, 2, 2));
        pred[[1, 0, 0]] = 0.5;
        let jl = joint_losses(&pred, &target, &vis, &vec![false, true], 1.0).unwrap();
        // Mean over 2 channels of (0.125, 0).
        assert!((jl[0] - 0.0625).abs() < 1e-15);
        assert_eq!(jl[1], 0.0);

        // Masking the only erroneous frame zeroes the loss.
        let jl = joint_losses(&pred, &target, &vis, &vec![true, false], 1.0).unwrap();
        assert!(jl.iter().all(|&v| v == 0.0));

        // Invisible target entries are excluded.
        let mut vis0 = Array2::ones((2, 2));
        vis0[[1, 0]] = 0;
        let jl = joint_losses(&pred, &target, &vis0, &vec![true, true], 1.0).unwrap();
        assert_eq!(jl[0], 0.0);

        // No active frames is an error.
        assert!(joint_losses(&pred, &target, &vis, &vec![false, false], 1.0).is_err());
    }

    #[test]
    fn masked_entries_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred = Array::from_shape_fn((4, 3, 2), |_| rng.random_range(-2.0..2.0));
        let mut target = Array::from_shape_fn((4, 3, 2), |_| rng.random_range(-2.0..2.0));
        let mut vis = Array2::ones((4, 3));
        vis[[2, 1]] = 0;
        let mask = vec![true, false, true, true];
        let cfg = LossConfig {
            ohkm_k: 2,
            ohkm_enabled: true,
            smooth_l1_beta: 1.0,
        };
        let (loss, grad) = masked_ohkm_loss(&pred, &target, &vis, &mask, &cfg).unwrap();
        assert!(loss >= 0.0);
        // Masked frame and invisible entries carry no gradient.
        for jj in 0..3 {
            for dd in 0..2 {
                assert_eq!(grad[[1, jj, dd]], 0.0);
            }
        }
        assert_eq!(grad[[2, 1, 0]], 0.0);
        // Perturbing a masked target leaves loss and gradient unchanged.
        target[[1, 0, 0]] += 123.0;
        target[[2, 1, 1]] -= 55.0;
        let (loss2, grad2) = masked_ohkm_loss(&pred, &target, &vis, &mask, &cfg).unwrap();
        assert_eq!(loss, loss2);
        assert_eq!(grad, grad2);
    }

    #[test]
    fn masked_ohkm_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = Array::from_shape_fn((3, 4, 3), |_| rng.random_range(-2.0..2.0));
        let target = Array::from_shape_fn((3, 4, 3), |_| rng.random_range(-2.0..2.0));
        let vis = Array2::ones((3, 4));
        let mask = vec![true, true, false];
        let cfg = LossConfig {
            ohkm_k: 2,
            ohkm_enabled: true,
            smooth_l1_beta: 1.0,
        };
        let (_, grad) = masked_ohkm_loss(&pred, &target, &vis, &mask, &cfg).unwrap();
        let h = 1e-6;
        for idx in [[0usize, 0, 0], [1, 2, 1], [0, 3, 2], [1, 1, 0]] {
            let mut plus = pred.clone();
            plus[idx] += h;
            let mut minus = pred.clone();
            minus[idx] -= h;
            let lp = masked_ohkm_loss(&plus, &target, &vis, &mask, &cfg).unwrap().0;
            let lm = masked_ohkm_loss(&minus, &target, &vis, &mask, &cfg).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (grad[idx] - numeric).abs() < 1e-6,
                "at {idx:?}: {} vs {numeric}",
                grad[idx]
            );
        }
    }

    fn tiny_model() -> GcnModel {
        gcnet::init_model(
            &GcnConfig {
                joints: 2,
                dims: 3,
                coeffs: 4,
                hidden_channels: 4,
                num_blocks: 1,
                dropout_rate: 0.0,
                node_mode: NodeMode::OneNodePerJoint,
                norm_enabled: true,
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut model = tiny_model();
        let before: Vec<Vec<f64>> = model
            .param_tensors()
            .iter()
            .map(|(_, p)| p.to_vec())
            .collect();
        let mut state = AdamState::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::zeros((2, 12));
        let (_, cache) = model.forward_train(&x, &mut rng).unwrap();
        let zero = model.backward(&cache, &Array2::zeros((2, 12))).unwrap();
        adam_step(&mut model, &zero, &mut state, 0.01, &OptimizerConfig::default()).unwrap();
        let after: Vec<Vec<f64>> = model
            .param_tensors()
            .iter()
            .map(|(_, p)| p.to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn adam_minimizes_quadratic_and_matches_scalar_recurrence() {
        // Drive f(w) = w^2 from w = 1 with lr 0.1 for 200 steps, checking the
        // optimizer against an independently coded scalar Adam.
        let cfg = OptimizerConfig::default();
        let mut w = 1.0_f64;
        let mut m = 0.0;
        let mut v = 0.0;
        let lr = 0.1;
        let mut w_scalar = 1.0_f64;

        let gcn_cfg = GcnConfig {
            joints: 1,
            dims: 2,
            coeffs: 1,
            hidden_channels: 1,
            num_blocks: 1,
            dropout_rate: 0.0,
            node_mode: NodeMode::OneNodePerJoint,
            norm_enabled: false,
        };
        let mut model = gcnet::init_model(&gcn_cfg, 0).unwrap();
        model.zero_all();
        // Use the first parameter slot as the scalar w.
        model.param_tensors_mut()[0].1[0] = 1.0;
        let mut state = AdamState::new(&model);

        for step in 1..=200 {
            // Independent scalar recurrence.
            let g = 2.0 * w_scalar;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(step));
            let v_hat = v / (1.0 - cfg.beta2.powi(step));
            w_scalar -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);

            // Library path: hand it the same gradient layout.
            w = model.param_tensors()[0].1[0];
            let mut tensors: Vec<(String, Vec<f64>)> = model
                .param_tensors()
                .iter()
                .map(|(name, p)| (name.clone(), vec![0.0; p.len()]))
                .collect();
            tensors[0].1[0] = 2.0 * w;
            let grads = Gradients::from_tensors(tensors);
            adam_step(&mut model, &grads, &mut state, lr, &cfg).unwrap();
        }
        let w_final = model.param_tensors()[0].1[0];
        assert!(w_final.abs() < 1e-3, "w = {w_final}");
        assert!((w_final - w_scalar).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut model = tiny_model();
        let mut state = AdamState::new(&model);
        let mut tensors: Vec<(String, Vec<f64>)> = model
            .param_tensors()
            .iter()
            .map(|(name, p)| (name.clone(), vec![0.0; p.len()]))
            .collect();
        tensors[0].1[0] = f64::NAN;
        let grads = Gradients::from_tensors(tensors);
        let err = adam_step(&mut model, &grads, &mut state, 0.01, &OptimizerConfig::default());
        assert!(matches!(err, Err(Error::Diverged(_))));
    }

    fn synthetic_3d_dataset(sequences: usize, frames: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skeleton = SkeletonSpec {
            joint_names: (0..3).map(|i| format!("j{i}")).collect(),
            neck_index: 0,
            left_right_swap: Some(vec![(1, 2)]),
            image_bounds: None,
        };
        let mut seqs = Vec::new();
        for s in 0..sequences {
            let v: [f64; 3] = [
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                0.0,
            ];
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let coords = Array3::from_shape_fn((frames, 3, 3), |(t, j, d)| {
                let base = v[d] * t as f64 + j as f64 * 0.3;
                base + 0.1 * ((t as f64 * 0.7 + phase) + (j * 2 + d) as f64).sin()
            });
            seqs.push(
                PoseSequence::new(
                    coords,
                    Array2::ones((frames, 3)),
                    64.3,
                    format!("s{s}"),
                    format!("v{s}"),
                )
                .unwrap(),
            );
        }
        Dataset::new(skeleton, 64.3, seqs).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            gcn: GcnConfig {
                joints: 3,
                dims: 3,
                coeffs: 12,
                hidden_channels: 8,
                num_blocks: 1,
                dropout_rate: 0.0,
                node_mode: NodeMode::OneNodePerJoint,
                norm_enabled: true,
            },
            preprocess: PreprocessConfig {
                scale: 1.0,
                interpolate_invisible: true,
                boundary_filter: false,
            },
            window: WindowSpec {
                input_frames: 8,
                output_frames: 4,
                sampling: preprocess::Sampling::Stride(4),
            },
            loss: LossConfig {
                ohkm_k: 2,
                ohkm_enabled: true,
                smooth_l1_beta: 1.0,
            },
            curriculum: CurriculumConfig {
                epochs_per_frame: 1,
                enabled: true,
            },
            optimizer: OptimizerConfig::default(),
            metric: MetricConfig {
                offsets_ms: vec![64.3, 257.2],
                ..MetricConfig::default_for_dims(3)
            },
            options: TrainOptions {
                epochs: 3,
                batch_size: 8,
                input_repr: InputRepr::Velocity,
                augment_reverse: true,
                augment_flip: true,
                flip_probability: 0.5,
                val_fraction: 0.25,
                short_term_frames: None,
                zero_init_output: false,
            },
        }
    }

    fn strip_timing(mut report: TrainReport) -> TrainReport {
        for e in &mut report.epochs {
            e.seconds = 0.0;
        }
        report
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = synthetic_3d_dataset(4, 40, 7);
        let cfg = quick_cfg();
        let a = train(&data, None, &cfg, 11).unwrap();
        let b = train(&data, None, &cfg, 11).unwrap();
        assert_eq!(strip_timing(a.report), strip_timing(b.report));
        assert_eq!(a.checkpoint, b.checkpoint);
        let c = train(&data, None, &cfg, 12).unwrap();
        assert_ne!(a.checkpoint, c.checkpoint);
    }

    #[test]
    fn training_reduces_loss() {
        let data = synthetic_3d_dataset(4, 60, 8);
        let mut cfg = quick_cfg();
        cfg.options.epochs = 12;
        cfg.curriculum.enabled = false;
        let out = train(&data, None, &cfg, 1).unwrap();
        assert!(!out.report.diverged);
        let first = out.report.epochs.first().unwrap().train_loss;
        let last = out.report.epochs.last().unwrap().train_loss;
        assert!(
            last < first,
            "loss should drop: first {first}, last {last}"
        );
    }

    #[test]
    fn curriculum_only_changes_mask_not_order() {
        // With curriculum on vs off, per-epoch active frame counts differ but
        // sample-order-dependent quantities (the emitted sample stream) stay
        // aligned; we check that the first epoch's loss over frames 1..T is
        // computed on the same shuffled order by comparing reports between a
        // run with curriculum and one without beyond the horizon threshold.
        let data = synthetic_3d_dataset(3, 40, 9);
        let mut cfg = quick_cfg();
        cfg.options.epochs = 1;
        cfg.options.augment_flip = false;
        cfg.options.augment_reverse = false;
        let on = train(&data, None, &cfg, 5).unwrap();
        let mut cfg_off = cfg.clone();
        cfg_off.curriculum.enabled = false;
        let off = train(&data, None, &cfg_off, 5).unwrap();
        assert_eq!(on.report.epochs[0].active_frames, 8);
        assert_eq!(off.report.epochs[0].active_frames, 12);
    }

    #[test]
    fn short_term_restricts_forecast_loss() {
        let data = synthetic_3d_dataset(3, 40, 10);
        let mut cfg = quick_cfg();
        cfg.options.epochs = 1;
        cfg.curriculum.enabled = false;
        let out = train_short_term(&data, None, &cfg, 2, 3).unwrap();
        // 8 observed + 2 short-term forecast frames.
        assert_eq!(out.report.epochs[0].active_frames, 10);
        // k = tau is identical to plain training.
        let full = train_short_term(&data, None, &cfg, 4, 3).unwrap();
        let plain = train(&data, None, &cfg, 3).unwrap();
        assert_eq!(full.checkpoint, plain.checkpoint);
    }
}
