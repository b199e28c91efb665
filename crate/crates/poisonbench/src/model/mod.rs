//! The desk-scale image classifier: a small stack of 3x3 conv blocks with
//! average pooling, a dense latent layer, and a linear classification head.
//!
//! The forward pass decomposes exactly into `head(latents(x))`: the latent
//! vector is the penultimate activation (input to the final linear layer).
//! Backward passes can start from the logits, from the latent layer, or from
//! injected gradients on intermediate feature maps, which is what the latent
//! regularizers and attention-distillation losses need.

mod layers;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::error::{Error, Result};
use crate::exec;
use crate::image::Image;

pub use layers::*;

/// Network shape description. Stored in checkpoints so a loaded model always
/// rebuilds the exact same parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub id: String,
    pub in_channels: usize,
    pub image_size: usize,
    pub conv_channels: Vec<usize>,
    pub latent_dim: usize,
    pub class_count: usize,
}

const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];

impl Architecture {
    /// Standard tiny classifier for a square image of side `image_size`
    /// (must be a power of two, at least 8). Uses one conv block per halving
    /// until the spatial size reaches 1.
    pub fn tiny(in_channels: usize, image_size: usize, class_count: usize) -> Result<Self> {
        if image_size < 8 || !image_size.is_power_of_two() {
            return Err(Error::InvalidArg(format!(
                "image_size must be a power of two >= 8, got {image_size}"
            )));
        }
        let blocks = image_size.trailing_zeros() as usize;
        let conv_channels: Vec<usize> = (0..blocks)
            .map(|i| DEFAULT_WIDTHS[i.min(DEFAULT_WIDTHS.len() - 1)])
            .collect();
        Ok(Self {
            id: format!("tiny-cnn-v1/{}x{}x{}", in_channels, image_size, image_size),
            in_channels,
            image_size,
            conv_channels,
            latent_dim: 64,
            class_count,
        })
    }

    pub fn block_count(&self) -> usize {
        self.conv_channels.len()
    }

    /// Spatial side length at the input of block `i`.
    pub fn spatial(&self, block: usize) -> usize {
        self.image_size >> block
    }

    /// Flattened size after the last pooling stage.
    pub fn flatten_len(&self) -> usize {
        let s = self.image_size >> self.block_count();
        self.conv_channels[self.block_count() - 1] * s * s
    }

    pub fn layout(&self) -> ParamLayout {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize, offset: &mut usize| {
            entries.push(LayoutEntry { name, offset: *offset, len });
            *offset += len;
        };
        let mut prev = self.in_channels;
        for (i, &ch) in self.conv_channels.iter().enumerate() {
            push(format!("conv{i}.w"), ch * prev * 9, &mut offset);
            push(format!("conv{i}.b"), ch, &mut offset);
            prev = ch;
        }
        push("latent.w".to_string(), self.latent_dim * self.flatten_len(), &mut offset);
        push("latent.b".to_string(), self.latent_dim, &mut offset);
        push("head.w".to_string(), self.class_count * self.latent_dim, &mut offset);
        push("head.b".to_string(), self.class_count, &mut offset);
        ParamLayout { entries, total: offset }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.c != self.in_channels || image.h != self.image_size || image.w != self.image_size {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", self.in_channels, self.image_size, self.image_size),
                got: image.shape_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<LayoutEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn slice<'a>(&self, name: &str, data: &'a [f64]) -> &'a [f64] {
        let e = self.entries.iter().find(|e| e.name == name).expect("unknown parameter name");
        &data[e.offset..e.offset + e.len]
    }
}

/// Flat parameter vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(layout: ParamLayout) -> Self {
        let data = vec![0.0; layout.total];
        Self { layout, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn named(&self, name: &str) -> &[f64] {
        self.layout.slice(name, &self.data)
    }

    pub fn l2_distance(&self, other: &ParamSet) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Bookkeeping carried inside checkpoints: seed lineage and, for poisoned
/// models, the attack that produced the training data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub init_seed: u64,
    pub train_seeds: Vec<u64>,
    pub attack: Option<AttackSpec>,
}

#[derive(Debug, Clone)]
pub struct ModelHandle {
    pub arch: Architecture,
    pub params: ParamSet,
    /// Optional per-parameter trainability mask; when present, optimizers
    /// only touch entries flagged `true`.
    pub trainable_mask: Option<Vec<bool>>,
    pub meta: ModelMeta,
}

impl ModelHandle {
    /// He-initialized random model.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let layout = arch.layout();
        let mut params = ParamSet::zeros(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = arch.in_channels;
        for (i, &ch) in arch.conv_channels.iter().enumerate() {
            let fan_in = prev * 9;
            init_normal(&mut params, &format!("conv{i}.w"), (2.0 / fan_in as f64).sqrt(), &mut rng);
            prev = ch;
        }
        init_normal(&mut params, "latent.w", (2.0 / arch.flatten_len() as f64).sqrt(), &mut rng);
        init_normal(&mut params, "head.w", (1.0 / arch.latent_dim as f64).sqrt(), &mut rng);
        Self {
            arch,
            params,
            trainable_mask: None,
            meta: ModelMeta { init_seed: seed, ..Default::default() },
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn class_count(&self) -> usize {
        self.arch.class_count
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn forward_cached(&self, image: &Image) -> Result<ForwardCache> {
        self.arch.check_image(image)?;
        Ok(forward_cached_impl(&self.arch, &self.params, image.data()))
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward_cached(image)?.logits)
    }

    pub fn predict(&self, image: &Image) -> Result<usize> {
        Ok(argmax(&self.logits(image)?))
    }

    pub fn predict_batch(&self, images: &[Image]) -> Result<Vec<usize>> {
        let preds = exec::map(images, |im| self.predict(im));
        preds.into_iter().collect()
    }

    pub fn latent(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward_cached(image)?.latent)
    }

    /// Latent vectors for a batch; rows align with `images`.
    pub fn latents(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let rows = exec::map(images, |im| self.latent(im));
        rows.into_iter().collect()
    }

    /// Apply the classification head to an externally computed latent vector.
    pub fn head(&self, latent: &[f64]) -> Vec<f64> {
        let mut logits = vec![0.0; self.arch.class_count];
        dense_forward(
            latent,
            self.params.named("head.w"),
            self.params.named("head.b"),
            self.arch.latent_dim,
            self.arch.class_count,
            &mut logits,
        );
        logits
    }

    pub fn backward(&self, cache: &ForwardCache, request: &BackwardRequest) -> BackwardResult {
        backward_impl(&self.arch, &self.params, cache, request)
    }
}

fn init_normal(params: &mut ParamSet, name: &str, std: f64, rng: &mut ChaCha8Rng) {
    let e = params
        .layout
        .entries
        .iter()
        .find(|e| e.name == name)
        .expect("unknown parameter name")
        .clone();
    for v in &mut params.data[e.offset..e.offset + e.len] {
        // Box-Muller normal
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        *v = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each conv block (post-pool output of the previous block).
    pub block_inputs: Vec<Vec<f64>>,
    /// Conv outputs before the ReLU, per block.
    pub conv_pre_relu: Vec<Vec<f64>>,
    /// Post-ReLU feature maps, per block (pre-pool).
    pub features: Vec<Vec<f64>>,
    pub flatten: Vec<f64>,
    pub latent_pre: Vec<f64>,
    pub latent: Vec<f64>,
    pub logits: Vec<f64>,
}

/// What a backward pass should compute. Gradients given here are added at
/// the corresponding point of the graph.
#[derive(Debug, Clone, Default)]
pub struct BackwardRequest {
    /// dL/dlogits.
    pub grad_logits: Option<Vec<f64>>,
    /// dL/dlatent, injected at the post-ReLU latent vector.
    pub grad_latent: Option<Vec<f64>>,
    /// Per-block dL/dfeature-map, injected at the post-ReLU feature maps.
    pub grad_features: Option<Vec<Option<Vec<f64>>>>,
    /// Whether to propagate all the way to the input image.
    pub want_input_grad: bool,
}

#[derive(Debug, Clone)]
pub struct BackwardResult {
    /// Flat gradient aligned with `ParamSet::data`.
    pub param_grads: Vec<f64>,
    pub input_grad: Option<Vec<f64>>,
}

fn forward_cached_impl(arch: &Architecture, params: &ParamSet, input: &[f64]) -> ForwardCache {
    let blocks = arch.block_count();
    let mut block_inputs = Vec::with_capacity(blocks);
    let mut conv_pre_relu = Vec::with_capacity(blocks);
    let mut features = Vec::with_capacity(blocks);

    let mut current = input.to_vec();
    let mut c_in = arch.in_channels;
    for (i, &c_out) in arch.conv_channels.iter().enumerate() {
        let s = arch.spatial(i);
        let mut pre = vec![0.0; c_out * s * s];
        conv3x3_forward(
            &current,
            params.named(&format!("conv{i}.w")),
            params.named(&format!("conv{i}.b")),
            c_in,
            c_out,
            s,
            s,
            &mut pre,
        );
        let mut feat = vec![0.0; pre.len()];
        relu_forward(&pre, &mut feat);
        let mut pooled = vec![0.0; c_out * (s / 2) * (s / 2)];
        avgpool2_forward(&feat, c_out, s, s, &mut pooled);

        block_inputs.push(current);
        conv_pre_relu.push(pre);
        features.push(feat);
        current = pooled;
        c_in = c_out;
    }

    let flatten = current;
    let mut latent_pre = vec![0.0; arch.latent_dim];
    dense_forward(
        &flatten,
        params.named("latent.w"),
        params.named("latent.b"),
        arch.flatten_len(),
        arch.latent_dim,
        &mut latent_pre,
    );
    let mut latent = vec![0.0; arch.latent_dim];
    relu_forward(&latent_pre, &mut latent);
    let mut logits = vec![0.0; arch.class_count];
    dense_forward(
        &latent,
        params.named("head.w"),
        params.named("head.b"),
        arch.latent_dim,
        arch.class_count,
        &mut logits,
    );

    ForwardCache { block_inputs, conv_pre_relu, features, flatten, latent_pre, latent, logits }
}

fn backward_impl(
    arch: &Architecture,
    params: &ParamSet,
    cache: &ForwardCache,
    request: &BackwardRequest,
) -> BackwardResult {
    let layout = &params.layout;
    let mut grads = vec![0.0; layout.total];
    let entry = |name: &str| layout.entries.iter().find(|e| e.name == name).unwrap().clone();

    // head and latent layers
    let mut grad_latent_post = vec![0.0; arch.latent_dim];
    if let Some(gl) = &request.grad_logits {
        let head_w = entry("head.w");
        let head_b = entry("head.b");
        // split the flat grad buffer around the head entries
        {
            let (gw, gb) = {
                let (left, right) = grads.split_at_mut(head_b.offset);
                (&mut left[head_w.offset..head_w.offset + head_w.len], &mut right[..head_b.len])
            };
            dense_backward(
                &cache.latent,
                params.named("head.w"),
                gl,
                arch.latent_dim,
                arch.class_count,
                gw,
                gb,
                Some(&mut grad_latent_post),
            );
        }
    }
    if let Some(extra) = &request.grad_latent {
        for (g, e) in grad_latent_post.iter_mut().zip(extra) {
            *g += e;
        }
    }

    let mut grad_latent_pre = vec![0.0; arch.latent_dim];
    relu_backward(&cache.latent_pre, &grad_latent_post, &mut grad_latent_pre);

    let mut grad_flatten = vec![0.0; arch.flatten_len()];
    {
        let lw = entry("latent.w");
        let lb = entry("latent.b");
        let (gw, gb) = {
            let (left, right) = grads.split_at_mut(lb.offset);
            (&mut left[lw.offset..lw.offset + lw.len], &mut right[..lb.len])
        };
        dense_backward(
            &cache.flatten,
            params.named("latent.w"),
            &grad_latent_pre,
            arch.flatten_len(),
            arch.latent_dim,
            gw,
            gb,
            Some(&mut grad_flatten),
        );
    }

    // conv blocks, last to first
    let mut grad_pooled = grad_flatten;
    let mut grad_input_out = None;
    for i in (0..arch.block_count()).rev() {
        let c_out = arch.conv_channels[i];
        let c_in = if i == 0 { arch.in_channels } else { arch.conv_channels[i - 1] };
        let s = arch.spatial(i);

        let mut grad_feat = vec![0.0; c_out * s * s];
        avgpool2_backward(&grad_pooled, c_out, s, s, &mut grad_feat);
        if let Some(per_block) = &request.grad_features {
            if let Some(Some(extra)) = per_block.get(i) {
                for (g, e) in grad_feat.iter_mut().zip(extra) {
                    *g += e;
                }
            }
        }
        let mut grad_pre = vec![0.0; grad_feat.len()];
        relu_backward(&cache.conv_pre_relu[i], &grad_feat, &mut grad_pre);

        let want_input = i > 0 || request.want_input_grad;
        let mut grad_in = if want_input { Some(vec![0.0; c_in * s * s]) } else { None };
        {
            let wk = entry(&format!("conv{i}.w"));
            let bk = entry(&format!("conv{i}.b"));
            let (gw, gb) = {
                let (left, right) = grads.split_at_mut(bk.offset);
                (&mut left[wk.offset..wk.offset + wk.len], &mut right[..bk.len])
            };
            conv3x3_backward(
                &cache.block_inputs[i],
                params.named(&format!("conv{i}.w")),
                &grad_pre,
                c_in,
                c_out,
                s,
                s,
                gw,
                gb,
                grad_in.as_deref_mut(),
            );
        }
        if i == 0 {
            grad_input_out = grad_in;
        } else {
            grad_pooled = grad_in.unwrap();
        }
    }

    BackwardResult { param_grads: grads, input_grad: grad_input_out }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Cross-entropy of a logit vector against a target class, with the gradient
/// with respect to the logits.
pub fn cross_entropy_with_grad(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let loss = -(probs[target].max(1e-300)).ln();
    let mut grad = probs;
    grad[target] -= 1.0;
    (loss, grad)
}
