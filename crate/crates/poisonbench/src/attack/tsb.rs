//! Trigger-scattering backdoor: train on one small trigger segment per
//! poisoned sample, exploit with all segments at once.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::attack::trigger::{effective_patch_side, Trigger};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsbMode {
    /// Data poisoning before training: stamp one uniformly chosen segment.
    Inject,
    /// Inference-time exploitation: stamp every segment in index order.
    Exploit,
}

/// Poison or exploit one image with the scattered trigger set. Returns the
/// stamped image and the attacker's target label.
pub fn tsb_poison(
    image: &Image,
    y_target: usize,
    triggers: &[Trigger],
    mode: TsbMode,
    rng: &mut impl Rng,
) -> Result<(Image, usize)> {
    if triggers.is_empty() {
        return Err(Error::InvalidArg("scattered trigger set must not be empty".into()));
    }
    match mode {
        TsbMode::Inject => {
            let pick = rng.gen_range(0..triggers.len());
            Ok((triggers[pick].apply(image)?, y_target))
        }
        TsbMode::Exploit => {
            // overlapping stamps apply in index order; later segments win
            let mut out = image.clone();
            for t in triggers {
                out = t.apply(&out)?;
            }
            Ok((out, y_target))
        }
    }
}

/// Build `k` pairwise-distinct patch segments at disjoint locations, drawn
/// once from `seed`.
pub fn scattered_triggers(
    channels: usize,
    image_side: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Trigger>> {
    if k == 0 {
        return Err(Error::InvalidArg("trigger count k must be at least 1".into()));
    }
    let side = effective_patch_side(image_side);
    let mut slots = Vec::new();
    let mut y = 0;
    while y + side <= image_side {
        let mut x = 0;
        while x + side <= image_side {
            slots.push((y, x));
            x += side + 1;
        }
        y += side + 1;
    }
    if slots.len() < k {
        return Err(Error::InvalidArg(format!(
            "cannot place {k} disjoint {side}x{side} segments on a {image_side}x{image_side} image"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    slots.shuffle(&mut rng);

    let mut triggers = Vec::with_capacity(k);
    for &(y, x) in slots.iter().take(k) {
        loop {
            let pattern = Image::from_fn(channels, side, side, |_, _, _| {
                if rng.gen::<bool>() { 1.0 } else { 0.0 }
            });
            if triggers.iter().all(|t: &Trigger| t.pattern.data() != pattern.data()) {
                triggers.push(Trigger::stamp(pattern, (y, x)));
                break;
            }
        }
    }
    Ok(triggers)
}
