//! The residual graph-convolution forecaster.
//!
//! Each layer multiplies node features by a learnable dense adjacency and a
//! weight matrix (`A * H * W`). A block is two such layers, each followed by
//! per-feature normalization over the node dimension, tanh, and dropout, with
//! a residual connection around the pair. The model output is added to its
//! input features (global residual), so a zero-weight network is the
//! identity on the DCT spectrum — which decodes to the last-frame-padded
//! input, i.e. the zero-velocity forecast.
//!
//! Nodes are either whole joints (all `D` channels bound to one node sharing
//! edge weights, the `J x J` adjacency) or individual channels (the original
//! `J*D x J*D` layout).
//!
//! The backward pass is analytic and covers every learnable tensor,
//! including the adjacency matrices; it is validated against central finite
//! differences in the test suite.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dct::{self, DctBasis};
use crate::error::{Error, Result};
use crate::pose::PoseSequence;

pub const MODEL_FORMAT_VERSION: u32 = 1;

const NORM_MOMENTUM: f64 = 0.1;
const NORM_EPS: f64 = 1e-5;

/// Graph-node granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeMode {
    /// All of a joint's channels share one node and one set of edge weights.
    OneNodePerJoint,
    /// Every channel is its own node.
    OneNodePerChannel,
}

/// What the encoded trajectories represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRepr {
    Position,
    Velocity,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcnConfig {
    pub joints: usize,
    pub dims: usize,
    /// Retained DCT coefficients per channel.
    pub coeffs: usize,
    pub hidden_channels: usize,
    pub num_blocks: usize,
    pub dropout_rate: f64,
    pub node_mode: NodeMode,
    pub norm_enabled: bool,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            joints: 13,
            dims: 3,
            coeffs: 30,
            hidden_channels: 256,
            num_blocks: 12,
            dropout_rate: 0.5,
            node_mode: NodeMode::OneNodePerJoint,
            // Per-node statistics are too sample-dependent for the running
            // averages that eval mode needs: a trained model can score far
            // worse in eval mode than its train loss implies. Off by
            // default; the layers and their gradients stay available.
            norm_enabled: false,
        }
    }
}

impl GcnConfig {
    /// Number of graph nodes `n`.
    pub fn nodes(&self) -> usize {
        match self.node_mode {
            NodeMode::OneNodePerJoint => self.joints,
            NodeMode::OneNodePerChannel => self.joints * self.dims,
        }
    }

    /// Per-node input/output feature width `F`.
    pub fn feature_dim(&self) -> usize {
        match self.node_mode {
            NodeMode::OneNodePerJoint => self.dims * self.coeffs,
            NodeMode::OneNodePerChannel => self.coeffs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.coeffs == 0 {
            return Err(Error::Invalid("joints and coeffs must be positive".into()));
        }
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::Invalid(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        if self.hidden_channels < 1 {
            return Err(Error::Invalid("hidden_channels must be at least 1".into()));
        }
        if self.num_blocks < 1 {
            return Err(Error::Invalid("num_blocks must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// One graph convolution: `y = A * h * W` with learnable `A` and `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub adj: Array2<f64>,
    pub weight: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    h_in: Array2<f64>,
    hw: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerGrads {
    adj: Array2<f64>,
    weight: Array2<f64>,
}

impl GcnLayer {
    fn zeros(n: usize, f_in: usize, f_out: usize) -> Self {
        Self {
            adj: Array2::zeros((n, n)),
            weight: Array2::zeros((f_in, f_out)),
        }
    }

    fn init(n: usize, f_in: usize, f_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::zeros(n, f_in, f_out);
        let b_adj = (6.0 / (2 * n) as f64).sqrt();
        for v in layer.adj.iter_mut() {
            *v = rng.random_range(-b_adj..b_adj);
        }
        let b_w = (6.0 / (f_in + f_out) as f64).sqrt();
        for v in layer.weight.iter_mut() {
            *v = rng.random_range(-b_w..b_w);
        }
        layer
    }

    pub fn forward(&self, h: &Array2<f64>) -> Array2<f64> {
        self.adj.dot(&h.dot(&self.weight))
    }

    fn forward_cached(&self, h: &Array2<f64>) -> (Array2<f64>, LayerCache) {
        let hw = h.dot(&self.weight);
        let out = self.adj.dot(&hw);
        (
            out,
            LayerCache {
                h_in: h.clone(),
                hw,
            },
        )
    }

    /// Given dL/dy, return (dL/dA, dL/dW, dL/dh).
    fn backward(&self, grad_out: &Array2<f64>, cache: &LayerCache) -> (LayerGrads, Array2<f64>) {
        let d_adj = grad_out.dot(&cache.hw.t());
        let ah = self.adj.dot(&cache.h_in);
        let d_weight = ah.t().dot(grad_out);
        let d_h = self.adj.t().dot(grad_out).dot(&self.weight.t());
        (
            LayerGrads {
                adj: d_adj,
                weight: d_weight,
            },
            d_h,
        )
    }
}

/// Per-feature normalization over the node dimension with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

#[derive(Debug, Clone)]
struct NormGrads {
    gamma: Array1<f64>,
    beta: Array1<f64>,
}

impl NormLayer {
    fn new(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
        }
    }

    fn forward_train(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let xhat = &centered * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        (
            y,
            NormCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        )
    }

    fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let xhat = (x - &self.running_mean) * &inv_std;
        &xhat * &self.gamma + &self.beta
    }

    fn backward(&self, grad_out: &Array2<f64>, cache: &NormCache) -> (NormGrads, Array2<f64>) {
        let n = grad_out.nrows() as f64;
        let d_gamma = (grad_out * &cache.xhat).sum_axis(Axis(0));
        let d_beta = grad_out.sum_axis(Axis(0));
        let d_xhat = grad_out * &self.gamma;
        let sum_dxhat = d_xhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&d_xhat * &cache.xhat).sum_axis(Axis(0));
        let dx = (d_xhat * n - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat) * &cache.inv_std / n;
        (
            NormGrads {
                gamma: d_gamma,
                beta: d_beta,
            },
            dx,
        )
    }

    fn update_running(&mut self, cache: &NormCache) {
        self.running_mean = &self.running_mean * (1.0 - NORM_MOMENTUM) + &cache.batch_mean * NORM_MOMENTUM;
        self.running_var = &self.running_var * (1.0 - NORM_MOMENTUM) + &cache.batch_var * NORM_MOMENTUM;
    }
}

/// gc -> norm -> tanh -> dropout, the repeated processing stage.
#[derive(Debug, Clone, PartialEq)]
struct Stage {
    gc: GcnLayer,
    norm: Option<NormLayer>,
}

#[derive(Debug, Clone)]
struct StageCache {
    layer: LayerCache,
    norm: Option<NormCache>,
    tanh_out: Array2<f64>,
    dropout_mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct StageGrads {
    layer: LayerGrads,
    norm: Option<NormGrads>,
}

impl Stage {
    fn forward_train(
        &self,
        h: &Array2<f64>,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> (Array2<f64>, StageCache) {
        let (a, layer_cache) = self.gc.forward_cached(h);
        let (normed, norm_cache) = match &self.norm {
            Some(norm) => {
                let (y, c) = norm.forward_train(&a);
                (y, Some(c))
            }
            None => (a, None),
        };
        let tanh_out = normed.mapv(f64::tanh);
        let (out, mask) = if dropout_rate > 0.0 {
            // Inverted dropout: surviving activations are rescaled at train
            // time so eval needs no adjustment.
            let keep = 1.0 - dropout_rate;
            let mask = Array2::from_shape_fn(tanh_out.dim(), |_| {
                if rng.random_range(0.0..1.0) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            (&tanh_out * &mask, Some(mask))
        } else {
            (tanh_out.clone(), None)
        };
        (
            out,
            StageCache {
                layer: layer_cache,
                norm: norm_cache,
                tanh_out,
                dropout_mask: mask,
            },
        )
    }

    fn forward_eval(&self, h: &Array2<f64>) -> Array2<f64> {
        let a = self.gc.forward(h);
        let normed = match &self.norm {
            Some(norm) => norm.forward_eval(&a),
            None => a,
        };
        normed.mapv(f64::tanh)
    }

    fn backward(&self, grad_out: &Array2<f64>, cache: &StageCache) -> (StageGrads, Array2<f64>) {
        let g = match &cache.dropout_mask {
            Some(mask) => grad_out * mask,
            None => grad_out.clone(),
        };
        let g = &g * &cache.tanh_out.mapv(|y| 1.0 - y * y);
        let (norm_grads, g) = match (&self.norm, &cache.norm) {
            (Some(norm), Some(nc)) => {
                let (ng, gx) = norm.backward(&g, nc);
                (Some(ng), gx)
            }
            _ => (None, g),
        };
        let (layer_grads, g_in) = self.gc.backward(&g, &cache.layer);
        (
            StageGrads {
                layer: layer_grads,
                norm: norm_grads,
            },
            g_in,
        )
    }
}

/// A residual block: two stages plus a skip connection around the pair.
#[derive(Debug, Clone, PartialEq)]
struct Block {
    s1: Stage,
    s2: Stage,
}

/// The full forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    config: GcnConfig,
    rng_seed: u64,
    input_stage: Stage,
    blocks: Vec<Block>,
    output: GcnLayer,
}

/// Activation record from a train-mode forward, consumed by [`GcnModel::backward`]
/// and [`GcnModel::update_running_stats`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input_stage: StageCache,
    blocks: Vec<(StageCache, StageCache)>,
    output_layer: LayerCache,
}

/// Parameter gradients in the model's canonical tensor order.
#[derive(Debug, Clone)]
pub struct Gradients {
    tensors: Vec<(String, Vec<f64>)>,
}

impl Gradients {
    /// Assemble gradients from externally computed tensors; the order must
    /// match [`GcnModel::param_tensors`].
    pub fn from_tensors(tensors: Vec<(String, Vec<f64>)>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[(String, Vec<f64>)] {
        &self.tensors
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Element-wise accumulate another gradient set (same tensor order).
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Shape("gradient tensor count mismatch".into()));
        }
        for ((name_a, a), (name_b, b)) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            if name_a != name_b || a.len() != b.len() {
                return Err(Error::Shape(format!("gradient tensor mismatch at {name_a}/{name_b}")));
            }
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, v) in &mut self.tensors {
            for x in v.iter_mut() {
                *x *= factor;
            }
        }
    }
}

fn stage(n: usize, f_in: usize, f_out: usize, norm_enabled: bool, rng: &mut ChaCha8Rng) -> Stage {
    Stage {
        gc: GcnLayer::init(n, f_in, f_out, rng),
        norm: norm_enabled.then(|| NormLayer::new(f_out)),
    }
}

/// Build a model with seeded uniform initialization: each tensor is drawn
/// from `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn init_model(config: &GcnConfig, seed: u64) -> Result<GcnModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.nodes();
    let f = config.feature_dim();
    let h = config.hidden_channels;
    let input_stage = stage(n, f, h, config.norm_enabled, &mut rng);
    let blocks = (0..config.num_blocks)
        .map(|_| Block {
            s1: stage(n, h, h, config.norm_enabled, &mut rng),
            s2: stage(n, h, h, config.norm_enabled, &mut rng),
        })
        .collect();
    let output = GcnLayer::init(n, h, f, &mut rng);
    Ok(GcnModel {
        config: config.clone(),
        rng_seed: seed,
        input_stage,
        blocks,
        output,
    })
}

impl GcnModel {
    pub fn config(&self) -> &GcnConfig {
        &self.config
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Zero the output projection, making the model's global residual exact:
    /// the forward pass returns its input features unchanged. The output
    /// adjacency is left initialized — with both factors zeroed the output
    /// path would be a stationary point and could never start training.
    pub fn zero_output_layer(&mut self) {
        self.output.weight.fill(0.0);
    }

    /// Zero every learnable tensor.
    pub fn zero_all(&mut self) {
        for (_, slice) in self.param_tensors_mut() {
            for v in slice {
                *v = 0.0;
            }
        }
    }

    fn check_input(&self, features: &Array2<f64>) -> Result<()> {
        let expect = (self.config.nodes(), self.config.feature_dim());
        if features.dim() != expect {
            return Err(Error::Shape(format!(
                "features are {:?}, model expects {:?}",
                features.dim(),
                expect
            )));
        }
        Ok(())
    }

    /// Train-mode forward: batch statistics, dropout active. Returns the
    /// output features and the cache needed by [`Self::backward`].
    pub fn forward_train(
        &self,
        features: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(features)?;
        let p = self.config.dropout_rate;
        let (mut h, input_cache) = self.input_stage.forward_train(features, p, rng);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (a, c1) = block.s1.forward_train(&h, p, rng);
            let (b, c2) = block.s2.forward_train(&a, p, rng);
            h = &h + &b;
            block_caches.push((c1, c2));
        }
        let (out, output_cache) = self.output.forward_cached(&h);
        let y = &out + features;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward pass produced non-finite activations".into()));
        }
        Ok((
            y,
            ForwardCache {
                input_stage: input_cache,
                blocks: block_caches,
                output_layer: output_cache,
            },
        ))
    }

    /// Eval-mode forward: running statistics, dropout disabled, deterministic.
    pub fn forward_eval(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(features)?;
        let mut h = self.input_stage.forward_eval(features);
        for block in &self.blocks {
            let a = block.s1.forward_eval(&h);
            let b = block.s2.forward_eval(&a);
            h = &h + &b;
        }
        let y = self.output.forward(&h) + features;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward pass produced non-finite activations".into()));
        }
        Ok(y)
    }

    /// Analytic gradients of every learnable tensor given dL/d(output).
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Array2<f64>) -> Result<Gradients> {
        self.check_input(grad_output)?;
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::Shape("stale cache: block count mismatch".into()));
        }
        let (output_grads, mut g) = self.output.backward(grad_output, &cache.output_layer);
        let mut block_grads: Vec<(StageGrads, StageGrads)> = Vec::with_capacity(self.blocks.len());
        for (block, (c1, c2)) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            let (g2, g_mid) = block.s2.backward(&g, c2);
            let (g1, g_path) = block.s1.backward(&g_mid, c1);
            g = &g + &g_path; // residual skip
            block_grads.push((g1, g2));
        }
        block_grads.reverse();
        let (input_grads, _) = self.input_stage.backward(&g, &cache.input_stage);
        // Global residual reaches the input features directly, but input
        // features are data, not parameters, so that branch ends here.

        let mut tensors = Vec::new();
        let push_stage = |prefix: &str, sg: &StageGrads, tensors: &mut Vec<(String, Vec<f64>)>| {
            tensors.push((format!("{prefix}.adj"), sg.layer.adj.iter().copied().collect()));
            tensors.push((format!("{prefix}.weight"), sg.layer.weight.iter().copied().collect()));
            if let Some(ng) = &sg.norm {
                tensors.push((format!("{prefix}.gamma"), ng.gamma.to_vec()));
                tensors.push((format!("{prefix}.beta"), ng.beta.to_vec()));
            }
        };
        push_stage("input", &input_grads, &mut tensors);
        for (i, (g1, g2)) in block_grads.iter().enumerate() {
            push_stage(&format!("block{i}.s1"), g1, &mut tensors);
            push_stage(&format!("block{i}.s2"), g2, &mut tensors);
        }
        tensors.push(("output.adj".into(), output_grads.adj.iter().copied().collect()));
        tensors.push(("output.weight".into(), output_grads.weight.iter().copied().collect()));
        Ok(Gradients { tensors })
    }

    /// Fold a train-mode forward's batch statistics into the running
    /// normalization statistics. Called by the training loop; this is the
    /// only forward-related mutation of the model.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if let (Some(norm), Some(nc)) = (&mut self.input_stage.norm, &cache.input_stage.norm) {
            norm.update_running(nc);
        }
        for (block, (c1, c2)) in self.blocks.iter_mut().zip(cache.blocks.iter()) {
            if let (Some(norm), Some(nc)) = (&mut block.s1.norm, &c1.norm) {
                norm.update_running(nc);
            }
            if let (Some(norm), Some(nc)) = (&mut block.s2.norm, &c2.norm) {
                norm.update_running(nc);
            }
        }
    }

    /// Learnable tensors in canonical order, as (name, flat slice) pairs.
    pub fn param_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        fn push_stage<'a>(
            prefix: &str,
            stage: &'a mut Stage,
            out: &mut Vec<(String, &'a mut [f64])>,
        ) {
            out.push((format!("{prefix}.adj"), stage.gc.adj.as_slice_mut().unwrap()));
            out.push((format!("{prefix}.weight"), stage.gc.weight.as_slice_mut().unwrap()));
            if let Some(norm) = &mut stage.norm {
                out.push((format!("{prefix}.gamma"), norm.gamma.as_slice_mut().unwrap()));
                out.push((format!("{prefix}.beta"), norm.beta.as_slice_mut().unwrap()));
            }
        }
        push_stage("input", &mut self.input_stage, &mut out);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            push_stage(&format!("block{i}.s1"), &mut block.s1, &mut out);
            push_stage(&format!("block{i}.s2"), &mut block.s2, &mut out);
        }
        out.push(("output.adj".into(), self.output.adj.as_slice_mut().unwrap()));
        out.push(("output.weight".into(), self.output.weight.as_slice_mut().unwrap()));
        out
    }

    /// Immutable view of the learnable tensors, same order as
    /// [`Self::param_tensors_mut`].
    pub fn param_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        fn push_stage<'a>(prefix: &str, stage: &'a Stage, out: &mut Vec<(String, &'a [f64])>) {
            out.push((format!("{prefix}.adj"), stage.gc.adj.as_slice().unwrap()));
            out.push((format!("{prefix}.weight"), stage.gc.weight.as_slice().unwrap()));
            if let Some(norm) = &stage.norm {
                out.push((format!("{prefix}.gamma"), norm.gamma.as_slice().unwrap()));
                out.push((format!("{prefix}.beta"), norm.beta.as_slice().unwrap()));
            }
        }
        push_stage("input", &self.input_stage, &mut out);
        for (i, block) in self.blocks.iter().enumerate() {
            push_stage(&format!("block{i}.s1"), &block.s1, &mut out);
            push_stage(&format!("block{i}.s2"), &block.s2, &mut out);
        }
        out.push(("output.adj".into(), self.output.adj.as_slice().unwrap()));
        out.push(("output.weight".into(), self.output.weight.as_slice().unwrap()));
        out
    }

    /// All tensors including running statistics, for serialization.
    fn state_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        fn push_stage(prefix: &str, stage: &Stage, out: &mut Vec<(String, Vec<usize>, Vec<f64>)>) {
            out.push((
                format!("{prefix}.adj"),
                stage.gc.adj.shape().to_vec(),
                stage.gc.adj.iter().copied().collect(),
            ));
            out.push((
                format!("{prefix}.weight"),
                stage.gc.weight.shape().to_vec(),
                stage.gc.weight.iter().copied().collect(),
            ));
            if let Some(norm) = &stage.norm {
                out.push((format!("{prefix}.gamma"), vec![norm.gamma.len()], norm.gamma.to_vec()));
                out.push((format!("{prefix}.beta"), vec![norm.beta.len()], norm.beta.to_vec()));
                out.push((
                    format!("{prefix}.running_mean"),
                    vec![norm.running_mean.len()],
                    norm.running_mean.to_vec(),
                ));
                out.push((
                    format!("{prefix}.running_var"),
                    vec![norm.running_var.len()],
                    norm.running_var.to_vec(),
                ));
            }
        }
        push_stage("input", &self.input_stage, &mut out);
        for (i, block) in self.blocks.iter().enumerate() {
            push_stage(&format!("block{i}.s1"), &block.s1, &mut out);
            push_stage(&format!("block{i}.s2"), &block.s2, &mut out);
        }
        out.push((
            "output.adj".into(),
            self.output.adj.shape().to_vec(),
            self.output.adj.iter().copied().collect(),
        ));
        out.push((
            "output.weight".into(),
            self.output.weight.shape().to_vec(),
            self.output.weight.iter().copied().collect(),
        ));
        out
    }

    fn load_state_tensors(&mut self, tensors: &[TensorRecord]) -> Result<()> {
        let mut expected: std::collections::BTreeMap<String, Vec<usize>> = self
            .state_tensors()
            .into_iter()
            .map(|(name, shape, _)| (name, shape))
            .collect();
        for rec in tensors {
            let shape = expected.remove(&rec.name).ok_or_else(|| {
                Error::Checkpoint(format!("unexpected or duplicate tensor '{}'", rec.name))
            })?;
            if shape != rec.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, config expects {:?}",
                    rec.name, rec.shape, shape
                )));
            }
            let len: usize = shape.iter().product();
            if rec.values.len() != len {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has {} values, shape {:?} needs {len}",
                    rec.name,
                    rec.values.len(),
                    rec.shape
                )));
            }
            self.set_tensor(&rec.name, &rec.values);
        }
        if let Some((name, _)) = expected.into_iter().next() {
            return Err(Error::Checkpoint(format!("missing tensor '{name}'")));
        }
        Ok(())
    }

    fn set_tensor(&mut self, name: &str, values: &[f64]) {
        let assign2 = |arr: &mut Array2<f64>, values: &[f64]| {
            arr.as_slice_mut().unwrap().copy_from_slice(values);
        };
        let assign1 = |arr: &mut Array1<f64>, values: &[f64]| {
            arr.as_slice_mut().unwrap().copy_from_slice(values);
        };
        let (prefix, field) = name.rsplit_once('.').expect("validated tensor name");
        let stage: Option<&mut Stage> = if prefix == "input" {
            Some(&mut self.input_stage)
        } else if let Some(rest) = prefix.strip_prefix("block") {
            let (idx, which) = rest.split_once('.').expect("validated tensor name");
            let block = &mut self.blocks[idx.parse::<usize>().expect("validated")];
            Some(if which == "s1" { &mut block.s1 } else { &mut block.s2 })
        } else {
            None
        };
        match (stage, field) {
            (Some(stage), "adj") => assign2(&mut stage.gc.adj, values),
            (Some(stage), "weight") => assign2(&mut stage.gc.weight, values),
            (Some(stage), "gamma") => assign1(&mut stage.norm.as_mut().unwrap().gamma, values),
            (Some(stage), "beta") => assign1(&mut stage.norm.as_mut().unwrap().beta, values),
            (Some(stage), "running_mean") => {
                assign1(&mut stage.norm.as_mut().unwrap().running_mean, values)
            }
            (Some(stage), "running_var") => {
                assign1(&mut stage.norm.as_mut().unwrap().running_var, values)
            }
            (None, "adj") => assign2(&mut self.output.adj, values),
            (None, "weight") => assign2(&mut self.output.weight, values),
            _ => unreachable!("validated tensor name"),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: GcnConfig,
    rng_seed: u64,
    tensors: Vec<TensorRecord>,
}

/// The self-describing checkpoint payload: format version, config, and every
/// tensor (name, shape, row-major values).
pub fn model_to_json(model: &GcnModel) -> serde_json::Value {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        config: model.config.clone(),
        rng_seed: model.rng_seed,
        tensors: model
            .state_tensors()
            .into_iter()
            .map(|(name, shape, values)| TensorRecord { name, shape, values })
            .collect(),
    };
    serde_json::to_value(&file).expect("model serializes")
}

/// Rebuild a model from [`model_to_json`] output, verifying the format
/// version and every tensor's presence and shape.
pub fn model_from_json(value: serde_json::Value) -> Result<GcnModel> {
    let file: ModelFile = serde_json::from_value(value)
        .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {MODEL_FORMAT_VERSION})",
            file.format_version
        )));
    }
    file.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = init_model(&file.config, file.rng_seed)?;
    model.load_state_tensors(&file.tensors)?;
    Ok(model)
}

/// Serialize a model (parameters, running statistics, config) to JSON.
pub fn save_model(model: &GcnModel, path: impl AsRef<std::path::Path>) -> Result<()> {
    let json = serde_json::to_string(&model_to_json(model))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path.as_ref(), json).map_err(|e| Error::io_at(path.as_ref(), e))?;
    Ok(())
}

/// Load a model saved by [`save_model`], verifying version and every tensor.
pub fn load_model(path: impl AsRef<std::path::Path>) -> Result<GcnModel> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io_at(path.as_ref(), e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    model_from_json(value)
}

/// Build the model input: pad each per-joint, per-channel trajectory with its
/// last value out to the basis length, encode it, and lay the spectra out
/// according to the node mode.
///
/// In velocity mode the trajectory is first turned into frame-to-frame
/// differences with a leading zero (so length is preserved), then padded —
/// the padding repeats the final observed velocity.
pub fn node_features(
    input: &PoseSequence,
    basis: &DctBasis,
    node_mode: NodeMode,
    input_repr: InputRepr,
) -> Result<Array2<f64>> {
    let t = input.len();
    let n = basis.n();
    if n < t {
        return Err(Error::Shape(format!(
            "basis length {n} shorter than input length {t}"
        )));
    }
    let tau = n - t;
    let (_, j, d) = input.coords().dim();
    let mut padded = Array3::zeros((n, j, d));
    for jj in 0..j {
        for dd in 0..d {
            let traj: Vec<f64> = (0..t).map(|f| input.coords()[[f, jj, dd]]).collect();
            let series = match input_repr {
                InputRepr::Position => traj,
                InputRepr::Velocity => {
                    let mut v = Vec::with_capacity(t);
                    v.push(0.0);
                    for f in 1..t {
                        v.push(traj[f] - traj[f - 1]);
                    }
                    v
                }
            };
            let full = dct::pad_future(&series, tau)?;
            for (f, value) in full.iter().enumerate() {
                padded[[f, jj, dd]] = *value;
            }
        }
    }
    let features = dct::encode_coords(&padded, basis)?;
    match node_mode {
        NodeMode::OneNodePerJoint => Ok(features),
        NodeMode::OneNodePerChannel => {
            // Channel-major rows make this a pure reinterpretation.
            let l = basis.l();
            Ok(features
                .into_shape_with_order((j * d, l))
                .expect("row-major reshape"))
        }
    }
}

/// Reverse the node-mode layout back to a `(J, D*L)` feature matrix.
pub fn features_to_joint_layout(
    features: &Array2<f64>,
    joints: usize,
    dims: usize,
    node_mode: NodeMode,
) -> Result<Array2<f64>> {
    match node_mode {
        NodeMode::OneNodePerJoint => Ok(features.clone()),
        NodeMode::OneNodePerChannel => {
            let (rows, l) = features.dim();
            if rows != joints * dims {
                return Err(Error::Shape(format!(
                    "{rows} rows do not match {joints} joints x {dims} channels"
                )));
            }
            Ok(features
                .clone()
                .into_shape_with_order((joints, dims * l))
                .expect("row-major reshape"))
        }
    }
}

/// Inverse of [`features_to_joint_layout`], for routing gradients.
pub fn features_from_joint_layout(
    features: &Array2<f64>,
    node_mode: NodeMode,
    dims: usize,
    coeffs: usize,
) -> Array2<f64> {
    match node_mode {
        NodeMode::OneNodePerJoint => features.clone(),
        NodeMode::OneNodePerChannel => {
            let j = features.nrows();
            features
                .clone()
                .into_shape_with_order((j * dims, coeffs))
                .expect("row-major reshape")
        }
    }
}

/// Turn decoded trajectories into positions.
///
/// Position mode returns them unchanged. Velocity mode integrates: the
/// observed region accumulates from the first observed position, while the
/// forecast region restarts the sum at the last observed position so that
/// reconstruction noise over frames `1..T` cannot drift into the forecast.
pub fn reconstruct_positions(
    decoded: &Array3<f64>,
    input: &PoseSequence,
    input_repr: InputRepr,
) -> Array3<f64> {
    match input_repr {
        InputRepr::Position => decoded.clone(),
        InputRepr::Velocity => {
            let (n, j, d) = decoded.dim();
            let t = input.len();
            let mut out = Array3::zeros((n, j, d));
            for jj in 0..j {
                for dd in 0..d {
                    out[[0, jj, dd]] = input.coords()[[0, jj, dd]];
                    for f in 1..t.min(n) {
                        out[[f, jj, dd]] = out[[f - 1, jj, dd]] + decoded[[f, jj, dd]];
                    }
                    if t < n {
                        let anchor = input.coords()[[t - 1, jj, dd]];
                        out[[t, jj, dd]] = anchor + decoded[[t, jj, dd]];
                        for f in t + 1..n {
                            out[[f, jj, dd]] = out[[f - 1, jj, dd]] + decoded[[f, jj, dd]];
                        }
                    }
                }
            }
            out
        }
    }
}

/// Gradient of [`reconstruct_positions`] with respect to the decoded values.
pub fn reconstruct_backward(
    grad_positions: &Array3<f64>,
    input_len: usize,
    input_repr: InputRepr,
) -> Array3<f64> {
    match input_repr {
        InputRepr::Position => grad_positions.clone(),
        InputRepr::Velocity => {
            let (n, j, d) = grad_positions.dim();
            let t = input_len;
            let mut out = Array3::zeros((n, j, d));
            for jj in 0..j {
                for dd in 0..d {
                    // d position[f] / d velocity[s] = 1 for s <= f within the
                    // same integration segment; frame 0 and the anchors are
                    // constants.
                    let mut suffix = 0.0;
                    for f in (t..n).rev() {
                        suffix += grad_positions[[f, jj, dd]];
                        out[[f, jj, dd]] = suffix;
                    }
                    suffix = 0.0;
                    for f in (1..t.min(n)).rev() {
                        suffix += grad_positions[[f, jj, dd]];
                        out[[f, jj, dd]] = suffix;
                    }
                }
            }
            out
        }
    }
}

/// End-to-end single-sample inference in the sample's coordinate space:
/// features, eval-mode forward, decode, integrate, and return the `tau`
/// forecast frames with all-ones visibility.
pub fn predict(
    model: &GcnModel,
    input: &PoseSequence,
    tau: usize,
    basis: &DctBasis,
    input_repr: InputRepr,
) -> Result<PoseSequence> {
    let t = input.len();
    if basis.n() != t + tau {
        return Err(Error::Shape(format!(
            "basis length {} != input {t} + forecast {tau}",
            basis.n()
        )));
    }
    let node_mode = model.config().node_mode;
    let features = node_features(input, basis, node_mode, input_repr)?;
    let out = model.forward_eval(&features)?;
    let joint_features = features_to_joint_layout(&out, input.joints(), input.dims(), node_mode)?;
    let decoded = dct::decode_sequence(&joint_features, basis, input.dims())?;
    let positions = reconstruct_positions(&decoded, input, input_repr);
    let forecast = positions.slice(ndarray::s![t.., .., ..]).to_owned();
    let vis = Array2::ones((tau, input.joints()));
    PoseSequence::new(
        forecast,
        vis,
        input.frame_interval_ms(),
        input.sequence_id.clone(),
        input.video_id.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dct::make_basis;
    use ndarray::Array;

    fn small_config() -> GcnConfig {
        GcnConfig {
            joints: 5,
            dims: 3,
            coeffs: 8,
            hidden_channels: 16,
            num_blocks: 2,
            dropout_rate: 0.0,
            node_mode: NodeMode::OneNodePerJoint,
            norm_enabled: true,
        }
    }

    fn random_features(config: &GcnConfig, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((config.nodes(), config.feature_dim()), |_| {
            rng.random_range(-1.0..1.0)
        })
    }

    fn random_input(t: usize, j: usize, d: usize, seed: u64) -> PoseSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = Array::from_shape_fn((t, j, d), |_| rng.random_range(-2.0..2.0));
        PoseSequence::new(coords, Array2::ones((t, j)), 64.3, "s", "v").unwrap()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let config = small_config();
        let a = init_model(&config, 9).unwrap();
        let b = init_model(&config, 9).unwrap();
        assert_eq!(a, b);
        let c = init_model(&config, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_dims_match_paper_scale() {
        let config = GcnConfig::default();
        let model = init_model(&config, 0).unwrap();
        // J=13, D=3, L=30: input weight is 90 x 256.
        let params = model.param_tensors();
        let (name, w) = &params[1];
        assert_eq!(name, "input.weight");
        assert_eq!(w.len(), 90 * 256);
        // Edge counts: one node per joint gives J^2 adjacency entries.
        assert_eq!(params[0].1.len(), 13 * 13);
        let per_channel = GcnConfig {
            node_mode: NodeMode::OneNodePerChannel,
            ..config
        };
        let m2 = init_model(&per_channel, 0).unwrap();
        assert_eq!(m2.param_tensors()[0].1.len(), (13 * 3) * (13 * 3));
    }

    #[test]
    fn adjacency_edge_counts_for_three_joints() {
        let base = GcnConfig {
            joints: 3,
            ..small_config()
        };
        assert_eq!(init_model(&base, 0).unwrap().param_tensors()[0].1.len(), 9);
        let per_channel = GcnConfig {
            node_mode: NodeMode::OneNodePerChannel,
            ..base
        };
        assert_eq!(init_model(&per_channel, 0).unwrap().param_tensors()[0].1.len(), 81);
    }

    #[test]
    fn zero_model_is_identity() {
        let config = small_config();
        let mut model = init_model(&config, 1).unwrap();
        model.zero_all();
        let x = random_features(&config, 2);
        let y = model.forward_eval(&x).unwrap();
        assert_eq!(y, x);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (y_train, _) = model.forward_train(&x, &mut rng).unwrap();
        assert_eq!(y_train, x);
    }

    #[test]
    fn zero_output_layer_is_identity_despite_other_weights() {
        let config = small_config();
        let mut model = init_model(&config, 1).unwrap();
        model.zero_output_layer();
        let x = random_features(&config, 2);
        assert_eq!(model.forward_eval(&x).unwrap(), x);
    }

    #[test]
    fn identity_single_layer_passthrough() {
        // A = I, W = I, no norm/activation around it: y = h.
        let layer = GcnLayer {
            adj: Array2::eye(4),
            weight: Array2::eye(6),
        };
        let h = Array::from_shape_fn((4, 6), |(i, j)| (i * 10 + j) as f64);
        assert_eq!(layer.forward(&h), h);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let config = small_config();
        let model = init_model(&config, 5).unwrap();
        let x = random_features(&config, 6);
        assert_eq!(model.forward_eval(&x).unwrap(), model.forward_eval(&x).unwrap());
    }

    #[test]
    fn dropout_changes_train_forward_but_not_eval() {
        let config = GcnConfig {
            dropout_rate: 0.5,
            ..small_config()
        };
        let model = init_model(&config, 5).unwrap();
        let x = random_features(&config, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, _) = model.forward_train(&x, &mut rng).unwrap();
        let (b, _) = model.forward_train(&x, &mut rng).unwrap();
        assert_ne!(a, b);
        assert_eq!(model.forward_eval(&x).unwrap(), model.forward_eval(&x).unwrap());
    }

    #[test]
    fn zero_grad_output_gives_zero_gradients() {
        let config = small_config();
        let model = init_model(&config, 7).unwrap();
        let x = random_features(&config, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, cache) = model.forward_train(&x, &mut rng).unwrap();
        let grads = model
            .backward(&cache, &Array2::zeros((config.nodes(), config.feature_dim())))
            .unwrap();
        for (name, g) in grads.tensors() {
            assert!(g.iter().all(|v| *v == 0.0), "nonzero gradient in {name}");
        }
    }

    #[test]
    fn adjacency_gradient_structure_single_layer() {
        // For y = A h W with W = I: dL/dA = g (hW)^T = g h^T.
        let n = 3;
        let f = 4;
        let layer = GcnLayer {
            adj: Array2::eye(n),
            weight: Array2::eye(f),
        };
        let h = Array::from_shape_fn((n, f), |(i, j)| (i + 1) as f64 * 0.5 + j as f64);
        let (_, cache) = layer.forward_cached(&h);
        let g = Array::from_shape_fn((n, f), |(i, j)| ((i * f + j) as f64).sin());
        let (grads, _) = layer.backward(&g, &cache);
        let expect = g.dot(&h.t());
        for i in 0..n {
            for jj in 0..n {
                assert!((grads.adj[[i, jj]] - expect[[i, jj]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Quick smoke version of the full acceptance check: scalar loss
        // 0.5 * sum(y^2) on a tiny model.
        let config = GcnConfig {
            joints: 3,
            coeffs: 4,
            hidden_channels: 6,
            num_blocks: 1,
            ..small_config()
        };
        let model = init_model(&config, 11).unwrap();
        let x = random_features(&config, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, cache) = model.forward_train(&x, &mut rng).unwrap();
        let analytic = model.backward(&cache, &y).unwrap();

        let h = 1e-5;
        let loss = |m: &GcnModel| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (y, _) = m.forward_train(&x, &mut rng).unwrap();
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        let n_tensors = analytic.tensors().len();
        for ti in 0..n_tensors {
            let len = analytic.tensors()[ti].1.len();
            for i in (0..len).step_by(1.max(len / 5)) {
                let mut probe_plus = model.clone();
                probe_plus.param_tensors_mut()[ti].1[i] += h;
                let mut probe_minus = model.clone();
                probe_minus.param_tensors_mut()[ti].1[i] -= h;
                let numeric = (loss(&probe_plus) - loss(&probe_minus)) / (2.0 * h);
                let a = analytic.tensors()[ti].1[i];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                assert!(
                    rel < 1e-4,
                    "tensor {} [{i}]: analytic {a}, numeric {numeric}, rel {rel}",
                    analytic.tensors()[ti].0
                );
            }
        }
    }

    #[test]
    fn node_features_shapes_and_equivalence() {
        let input = random_input(16, 13, 3, 21);
        let basis = make_basis(30, 30).unwrap();
        let per_joint =
            node_features(&input, &basis, NodeMode::OneNodePerJoint, InputRepr::Position).unwrap();
        assert_eq!(per_joint.dim(), (13, 90));
        let per_channel =
            node_features(&input, &basis, NodeMode::OneNodePerChannel, InputRepr::Position)
                .unwrap();
        assert_eq!(per_channel.dim(), (39, 30));
        // Same scalars, different layout.
        let back =
            features_to_joint_layout(&per_channel, 13, 3, NodeMode::OneNodePerChannel).unwrap();
        assert_eq!(back, per_joint);
    }

    #[test]
    fn constant_trajectory_velocity_features_vanish() {
        let coords = Array3::from_elem((16, 2, 3), 4.2);
        let input =
            PoseSequence::new(coords, Array2::ones((16, 2)), 64.3, "s", "v").unwrap();
        let basis = make_basis(30, 30).unwrap();
        let f = node_features(&input, &basis, NodeMode::OneNodePerJoint, InputRepr::Velocity)
            .unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_model_predicts_last_frame_in_position_mode() {
        let config = GcnConfig {
            joints: 4,
            coeffs: 20,
            ..small_config()
        };
        let mut model = init_model(&config, 3).unwrap();
        model.zero_all();
        let input = random_input(16, 4, 3, 33);
        let basis = make_basis(20, 20).unwrap();
        let pred = predict(&model, &input, 4, &basis, InputRepr::Position).unwrap();
        assert_eq!(pred.len(), 4);
        for f in 0..4 {
            for j in 0..4 {
                for d in 0..3 {
                    let expect = input.coords()[[15, j, d]];
                    assert!(
                        (pred.coords()[[f, j, d]] - expect).abs() < 1e-9,
                        "frame {f} joint {j} dim {d}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_model_velocity_mode_extends_final_velocity() {
        // Two observed frames (a, b): padded velocities repeat (b - a), so
        // the forecast walks on at exactly that final observed velocity.
        let config = GcnConfig {
            joints: 1,
            dims: 2,
            coeffs: 4,
            ..small_config()
        };
        let mut model = init_model(&config, 3).unwrap();
        model.zero_all();
        let coords =
            Array3::from_shape_vec((2, 1, 2), vec![1.0, 10.0, 3.0, 14.0]).unwrap();
        let input = PoseSequence::new(coords, Array2::ones((2, 1)), 64.3, "s", "v").unwrap();
        let basis = make_basis(4, 4).unwrap();
        let pred = predict(&model, &input, 2, &basis, InputRepr::Velocity).unwrap();
        // v = (2, 4); forecast = b + v, b + 2v.
        assert!((pred.coords()[[0, 0, 0]] - 5.0).abs() < 1e-9);
        assert!((pred.coords()[[0, 0, 1]] - 18.0).abs() < 1e-9);
        assert!((pred.coords()[[1, 0, 0]] - 7.0).abs() < 1e-9);
        assert!((pred.coords()[[1, 0, 1]] - 22.0).abs() < 1e-9);
    }

    #[test]
    fn velocity_roundtrip_recovers_input_region() {
        let input = random_input(16, 3, 3, 44);
        let basis = make_basis(30, 30).unwrap();
        let f = node_features(&input, &basis, NodeMode::OneNodePerJoint, InputRepr::Velocity)
            .unwrap();
        let decoded = crate::dct::decode_sequence(&f, &basis, 3).unwrap();
        let positions = reconstruct_positions(&decoded, &input, InputRepr::Velocity);
        for t in 0..16 {
            for j in 0..3 {
                for d in 0..3 {
                    assert!(
                        (positions[[t, j, d]] - input.coords()[[t, j, d]]).abs() < 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn reconstruct_backward_matches_finite_differences() {
        let input = random_input(6, 2, 2, 55);
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let decoded = Array::from_shape_fn((10, 2, 2), |_| rng.random_range(-1.0..1.0));
        let weights = Array::from_shape_fn((10, 2, 2), |_| rng.random_range(-1.0..1.0));
        let loss = |dec: &Array3<f64>| -> f64 {
            (reconstruct_positions(dec, &input, InputRepr::Velocity) * &weights).sum()
        };
        let grad = reconstruct_backward(&weights, 6, InputRepr::Velocity);
        let h = 1e-6;
        for idx in [[0usize, 0, 0], [1, 0, 1], [5, 1, 0], [6, 0, 0], [9, 1, 1]] {
            let mut plus = decoded.clone();
            plus[idx] += h;
            let mut minus = decoded.clone();
            minus[idx] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((grad[idx] - numeric).abs() < 1e-6, "at {idx:?}");
        }
    }

    #[test]
    fn save_load_roundtrip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let config = small_config();
        let model = init_model(&config, 77).unwrap();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, model);
        let x = random_features(&config, 78);
        assert_eq!(
            model.forward_eval(&x).unwrap(),
            loaded.forward_eval(&x).unwrap()
        );
    }

    #[test]
    fn load_rejects_truncated_and_tampered_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = init_model(&small_config(), 1).unwrap();
        save_model(&model, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        let truncated = dir.path().join("truncated.json");
        std::fs::write(&truncated, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_model(&truncated), Err(Error::Checkpoint(_))));

        // Mismatched tensor shape vs the declared config.
        let mut file: serde_json::Value = serde_json::from_str(&text).unwrap();
        file["config"]["hidden_channels"] = serde_json::json!(32);
        let mismatched = dir.path().join("mismatched.json");
        std::fs::write(&mismatched, serde_json::to_string(&file).unwrap()).unwrap();
        let err = load_model(&mismatched).unwrap_err();
        match err {
            Error::Checkpoint(msg) => assert!(msg.contains("shape"), "message: {msg}"),
            other => panic!("expected checkpoint error, got {other}"),
        }

        let bad_version = dir.path().join("version.json");
        let mut file: serde_json::Value = serde_json::from_str(&text).unwrap();
        file["format_version"] = serde_json::json!(99);
        std::fs::write(&bad_version, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(matches!(load_model(&bad_version), Err(Error::Checkpoint(_))));
    }
}
