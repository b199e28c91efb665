//! Differentiable trigger parameterization for reverse-engineering.
//!
//! The trigger is a pattern plus a continuous mask, both squashed into
//! `(0, 1)` through a sigmoid so the raw optimization variables are
//! unconstrained. Application is `x' = (1 - m) * x + m * p` with the mask
//! broadcast over channels; the L1 norm is measured on the squashed mask.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::attack::Trigger;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{cross_entropy_with_grad, BackwardRequest, ModelHandle};

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Debug, Clone)]
pub struct TriggerParams {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Raw pattern variables, shape (c, h, w).
    pub raw_pattern: Vec<f64>,
    /// Raw mask variables, shape (h, w).
    pub raw_mask: Vec<f64>,
}

impl TriggerParams {
    /// Random initialization: pattern raw values around 0, mask biased
    /// toward small alpha so reversal starts near the clean image.
    pub fn init(c: usize, h: usize, w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw_pattern = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let raw_mask = (0..h * w).map(|_| rng.gen_range(-3.5..-2.5)).collect();
        Self { c, h, w, raw_pattern, raw_mask }
    }

    pub fn pattern(&self) -> Image {
        let mut img = Image::zeros(self.c, self.h, self.w);
        for (o, &r) in img.data_mut().iter_mut().zip(&self.raw_pattern) {
            *o = sigmoid(r);
        }
        img
    }

    pub fn mask(&self) -> Image {
        let mut img = Image::zeros(1, self.h, self.w);
        for (o, &r) in img.data_mut().iter_mut().zip(&self.raw_mask) {
            *o = sigmoid(r);
        }
        img
    }

    pub fn mask_l1(&self) -> f64 {
        self.raw_mask.iter().map(|&r| sigmoid(r)).sum()
    }

    /// Blend the squashed trigger over an image.
    pub fn apply(&self, image: &Image) -> Result<Image> {
        if image.c != self.c || image.h != self.h || image.w != self.w {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", self.c, self.h, self.w),
                got: image.shape_string(),
            });
        }
        let mut out = image.clone();
        let plane = self.h * self.w;
        for ch in 0..self.c {
            for i in 0..plane {
                let m = sigmoid(self.raw_mask[i]);
                let p = sigmoid(self.raw_pattern[ch * plane + i]);
                let x = out.data()[ch * plane + i];
                out.data_mut()[ch * plane + i] = (1.0 - m) * x + m * p;
            }
        }
        Ok(out)
    }

    /// Freeze into an applicable trigger (a full-image blend with unit
    /// opacity and the continuous mask as alpha).
    pub fn to_trigger(&self) -> Trigger {
        Trigger::blend(self.pattern(), self.mask(), 1.0)
    }

    /// Fold an input-space gradient back onto the raw variables.
    fn accumulate_input_grad(
        &self,
        image: &Image,
        grad_input: &[f64],
        grad_pattern: &mut [f64],
        grad_mask: &mut [f64],
    ) {
        let plane = self.h * self.w;
        for ch in 0..self.c {
            for i in 0..plane {
                let g = grad_input[ch * plane + i];
                if g == 0.0 {
                    continue;
                }
                let m = sigmoid(self.raw_mask[i]);
                let p = sigmoid(self.raw_pattern[ch * plane + i]);
                let x = image.data()[ch * plane + i];
                // x' = (1-m)x + m p
                grad_pattern[ch * plane + i] += g * m * p * (1.0 - p);
                grad_mask[i] += g * (p - x) * m * (1.0 - m);
            }
        }
    }
}

/// Gradient of the plain reversal objective
/// `CE(model(x'), target) + norm_weight * ||mask||_1`
/// with respect to the raw trigger variables, for one image.
pub fn reversal_objective_grad(
    model: &ModelHandle,
    image: &Image,
    target: usize,
    norm_weight: f64,
    params: &TriggerParams,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let stamped = params.apply(image)?;
    let cache = model.forward_cached(&stamped)?;
    let (ce, grad_logits) = cross_entropy_with_grad(&cache.logits, target);
    let back = model.backward(
        &cache,
        &BackwardRequest { grad_logits: Some(grad_logits), want_input_grad: true, ..Default::default() },
    );
    let grad_input = back.input_grad.expect("input grad requested");
    if grad_input.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient("trigger reversal"));
    }

    let mut grad_pattern = vec![0.0; params.raw_pattern.len()];
    let mut grad_mask = vec![0.0; params.raw_mask.len()];
    params.accumulate_input_grad(image, &grad_input, &mut grad_pattern, &mut grad_mask);

    let mut loss = ce;
    if norm_weight > 0.0 {
        for (gm, &r) in grad_mask.iter_mut().zip(&params.raw_mask) {
            let m = sigmoid(r);
            loss += norm_weight * m;
            *gm += norm_weight * m * (1.0 - m);
        }
    } else {
        loss += norm_weight * params.mask_l1();
    }
    Ok((loss, grad_pattern, grad_mask))
}

/// Gradient of the calibrated objective
/// `CE(pivot(x'), target) + CE(repaired(x'), true_label)`
/// with respect to the raw trigger variables, for one image.
pub fn calibrated_objective_grad(
    pivot: &ModelHandle,
    repaired: &ModelHandle,
    image: &Image,
    target: usize,
    true_label: usize,
    params: &TriggerParams,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let stamped = params.apply(image)?;
    let mut loss = 0.0;
    let mut grad_input_total = vec![0.0; image.len()];
    for (model, label) in [(pivot, target), (repaired, true_label)] {
        let cache = model.forward_cached(&stamped)?;
        let (ce, grad_logits) = cross_entropy_with_grad(&cache.logits, label);
        let back = model.backward(
            &cache,
            &BackwardRequest {
                grad_logits: Some(grad_logits),
                want_input_grad: true,
                ..Default::default()
            },
        );
        let grad_input = back.input_grad.expect("input grad requested");
        if !ce.is_finite() || grad_input.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient("calibrated trigger reversal"));
        }
        loss += ce;
        for (acc, g) in grad_input_total.iter_mut().zip(&grad_input) {
            *acc += g;
        }
    }
    let mut grad_pattern = vec![0.0; params.raw_pattern.len()];
    let mut grad_mask = vec![0.0; params.raw_mask.len()];
    params.accumulate_input_grad(image, &grad_input_total, &mut grad_pattern, &mut grad_mask);
    Ok((loss, grad_pattern, grad_mask))
}

/// Adam state over the concatenated raw trigger variables.
pub struct TriggerOptimizer {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl TriggerOptimizer {
    pub fn new(params: &TriggerParams, lr: f64) -> Self {
        let dim = params.raw_pattern.len() + params.raw_mask.len();
        Self { m: vec![0.0; dim], v: vec![0.0; dim], t: 0, lr }
    }

    pub fn step(&mut self, params: &mut TriggerParams, grad_pattern: &[f64], grad_mask: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - 0.9f64.powi(self.t as i32);
        let bc2 = 1.0 - 0.999f64.powi(self.t as i32);
        let np = grad_pattern.len();
        for (i, g) in grad_pattern.iter().chain(grad_mask.iter()).enumerate() {
            self.m[i] = 0.9 * self.m[i] + 0.1 * g;
            self.v[i] = 0.999 * self.v[i] + 0.001 * g * g;
            let update = self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + 1e-8);
            if i < np {
                params.raw_pattern[i] -= update;
            } else {
                params.raw_mask[i - np] -= update;
            }
        }
    }
}
