//! Trigger patterns and their application rules.
//!
//! A trigger is a pattern image, an alpha mask (single channel, broadcast
//! across color channels), an application rule, and a pixel location for
//! patch-style stamps. Every application maps in-range images to in-range
//! images and preserves the sample id.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{upsample_grid, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApplyRule {
    /// Replace masked pixels with the pattern at `location`.
    Stamp,
    /// `out = (1 - opacity*mask) * x + opacity*mask * pattern`, full image.
    Blend { opacity: f64 },
    /// `out = clip(x + mask * pattern)`, full image; pattern may be signed.
    Additive,
    /// Smooth coordinate warp; the pattern holds a 2-channel low-resolution
    /// displacement field in `[-1, 1]`, scaled to `strength` pixels.
    Warp { strength: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub pattern: Image,
    /// Alpha mask, shape (1, pattern.h, pattern.w).
    pub mask: Image,
    pub rule: ApplyRule,
    /// Top-left stamp position (y, x); only used by `Stamp`.
    pub location: (usize, usize),
}

impl Trigger {
    pub fn stamp(pattern: Image, location: (usize, usize)) -> Self {
        let mask = Image::from_fn(1, pattern.h, pattern.w, |_, _, _| 1.0);
        Self { pattern, mask, rule: ApplyRule::Stamp, location }
    }

    pub fn blend(pattern: Image, mask: Image, opacity: f64) -> Self {
        Self { pattern, mask, rule: ApplyRule::Blend { opacity }, location: (0, 0) }
    }

    pub fn additive(pattern: Image) -> Self {
        let mask = Image::from_fn(1, pattern.h, pattern.w, |_, _, _| 1.0);
        Self { pattern, mask, rule: ApplyRule::Additive, location: (0, 0) }
    }

    pub fn warp(field: Image, strength: f64) -> Self {
        let mask = Image::from_fn(1, field.h, field.w, |_, _, _| 1.0);
        Self { pattern: field, mask, rule: ApplyRule::Warp { strength }, location: (0, 0) }
    }

    /// Apply the trigger to an image. The output keeps the input's id.
    pub fn apply(&self, image: &Image) -> Result<Image> {
        match self.rule {
            ApplyRule::Stamp => stamp_patch(image, self),
            ApplyRule::Blend { opacity } => blend(image, self, opacity),
            ApplyRule::Additive => {
                if !self.pattern.same_shape(image) {
                    return Err(Error::ShapeMismatch {
                        expected: image.shape_string(),
                        got: self.pattern.shape_string(),
                    });
                }
                let mut out = image.clone();
                for c in 0..image.c {
                    for y in 0..image.h {
                        for x in 0..image.w {
                            let v = out.get(c, y, x)
                                + self.mask.get(0, y, x) * self.pattern.get(c, y, x);
                            out.set(c, y, x, v.clamp(0.0, 1.0));
                        }
                    }
                }
                Ok(out)
            }
            ApplyRule::Warp { strength } => Ok(warp_apply(image, &self.pattern, strength)),
        }
    }

    /// L1 norm of the mask; the anomaly statistic used by trigger reversal.
    pub fn mask_l1(&self) -> f64 {
        self.mask.data().iter().map(|v| v.abs()).sum()
    }
}

/// Replace the masked patch region with the pattern. Pixels outside the mask
/// are bit-identical to the input; stamping is idempotent.
pub fn stamp_patch(image: &Image, trigger: &Trigger) -> Result<Image> {
    let (y0, x0) = trigger.location;
    let (ph, pw) = (trigger.pattern.h, trigger.pattern.w);
    if y0 + ph > image.h || x0 + pw > image.w {
        return Err(Error::PatchOutOfBounds { side: ph.max(pw), y: y0, x: x0, h: image.h, w: image.w });
    }
    if trigger.pattern.c != image.c {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", image.c),
            got: format!("{} channels", trigger.pattern.c),
        });
    }
    let mut out = image.clone();
    for py in 0..ph {
        for px in 0..pw {
            if trigger.mask.get(0, py, px) > 0.5 {
                for c in 0..image.c {
                    out.set(c, y0 + py, x0 + px, trigger.pattern.get(c, py, px).clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(out)
}

/// Alpha-blend the pattern over the image on masked cells.
pub fn blend(image: &Image, trigger: &Trigger, opacity: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&opacity) {
        return Err(Error::InvalidArg(format!("opacity {opacity} outside [0,1]")));
    }
    if !trigger.pattern.same_shape(image) {
        return Err(Error::ShapeMismatch {
            expected: image.shape_string(),
            got: trigger.pattern.shape_string(),
        });
    }
    let mut out = image.clone();
    for c in 0..image.c {
        for y in 0..image.h {
            for x in 0..image.w {
                let alpha = opacity * trigger.mask.get(0, y, x);
                let v = (1.0 - alpha) * image.get(c, y, x) + alpha * trigger.pattern.get(c, y, x);
                out.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

fn warp_apply(image: &Image, field: &Image, strength: f64) -> Image {
    let dy = upsample_grid(
        &field.data()[..field.h * field.w],
        field.h,
        field.w,
        image.h,
        image.w,
    );
    let dx = upsample_grid(
        &field.data()[field.h * field.w..2 * field.h * field.w],
        field.h,
        field.w,
        image.h,
        image.w,
    );
    let mut out = Image::zeros(image.c, image.h, image.w).with_id(image.id);
    for c in 0..image.c {
        for y in 0..image.h {
            for x in 0..image.w {
                let sy = y as f64 + strength * dy[y * image.w + x];
                let sx = x as f64 + strength * dx[y * image.w + x];
                out.set(c, y, x, image.sample_bilinear(c, sy, sx));
            }
        }
    }
    out
}

/// Patch side from the relative-size rule used for patch triggers:
/// `floor(3/32 * w)` pixels for an image of side `w`.
pub fn patch_side(image_side: usize) -> usize {
    3 * image_side / 32
}

/// Patch side actually used at a given image size: the relative rule, floored
/// at 3 pixels so the patch stays learnable on very small images.
pub fn effective_patch_side(image_side: usize) -> usize {
    patch_side(image_side).max(3)
}

/// Fixed high-contrast checkerboard patch pattern.
pub const CHECKER_3X3: [f64; 9] = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];

/// The standard patch trigger: a checkerboard stamped at the top-left corner.
pub fn checker_patch_trigger(channels: usize, image_side: usize) -> Trigger {
    let side = effective_patch_side(image_side);
    let pattern = Image::from_fn(channels, side, side, |_, y, x| {
        if (y + x) % 2 == 0 { 1.0 } else { 0.0 }
    });
    Trigger::stamp(pattern, (0, 0))
}

/// Random occlusion mask: an `s x s` grid over an `h x w` area where each
/// cell is kept (value 1) independently with probability `1 - rate`.
pub fn occlusion_mask(h: usize, w: usize, s: usize, rate: f64, seed: u64) -> Result<Image> {
    if s == 0 {
        return Err(Error::InvalidArg("grid size s must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArg(format!("occlusion rate {rate} outside [0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = vec![1.0; s * s];
    for cell in &mut cells {
        if rng.gen::<f64>() < rate {
            *cell = 0.0;
        }
    }
    let cell_h = h.div_ceil(s);
    let cell_w = w.div_ceil(s);
    Ok(Image::from_fn(1, h, w, |_, y, x| cells[(y / cell_h) * s + (x / cell_w)]))
}

/// Ghosting-style trigger: add a shifted, blurred, intensity-scaled copy of
/// `reflection` to the image. Shift is 2 pixels diagonal, blur sigma is 1.
pub fn refool_trigger(image: &Image, reflection: &Image, intensity: f64) -> Result<Image> {
    if intensity < 0.0 {
        return Err(Error::InvalidArg("intensity must be non-negative".into()));
    }
    if intensity == 0.0 {
        return Ok(image.clone());
    }
    if !reflection.same_shape(image) {
        return Err(Error::ShapeMismatch {
            expected: image.shape_string(),
            got: reflection.shape_string(),
        });
    }
    let ghost = reflection.shifted(2, 2).blurred(1.0);
    let mut out = image.clone();
    for (o, g) in out.data_mut().iter_mut().zip(ghost.data()) {
        *o = (*o + intensity * g).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Control-grid side of the warp displacement field.
pub const WARP_GRID: usize = 4;

const DEFAULT_WARP_SEED: u64 = 0x57414e45;

/// Seeded low-resolution displacement field, normalized so the largest
/// displacement magnitude is exactly 1.
pub fn warp_field(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = Image::zeros(2, WARP_GRID, WARP_GRID);
    for v in field.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let max = field.data().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    for v in field.data_mut() {
        *v /= max;
    }
    field
}

/// Warp an image with the crate's default displacement field; `strength` is
/// the maximum displacement in pixels.
pub fn wanet_trigger(image: &Image, strength: f64) -> Result<Image> {
    if strength < 0.0 {
        return Err(Error::InvalidArg("warp strength must be non-negative".into()));
    }
    Trigger::warp(warp_field(DEFAULT_WARP_SEED), strength).apply(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(3, 16, 16, |_, _, _| rng.gen())
    }

    #[test]
    fn patch_side_rule() {
        assert_eq!(patch_side(32), 3);
        assert_eq!(patch_side(224), 21);
        assert_eq!(effective_patch_side(16), 3);
    }

    #[test]
    fn stamp_is_idempotent_and_local() {
        let trigger = checker_patch_trigger(3, 16);
        for seed in 0..50 {
            let img = probe_image(seed);
            let once = trigger.apply(&img).unwrap();
            let twice = trigger.apply(&once).unwrap();
            assert_eq!(once, twice);
            // pixels outside the patch are untouched
            for c in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        if y >= 3 || x >= 3 {
                            assert_eq!(once.get(c, y, x), img.get(c, y, x));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn stamp_out_of_bounds_errors() {
        let mut trigger = checker_patch_trigger(3, 16);
        trigger.location = (15, 15);
        assert!(trigger.apply(&probe_image(0)).is_err());
    }

    #[test]
    fn blend_endpoints() {
        let img = probe_image(1);
        let pattern = Image::from_fn(3, 16, 16, |_, _, _| 1.0);
        let mask = Image::from_fn(1, 16, 16, |_, _, _| 1.0);
        let zero = blend(&img, &Trigger::blend(pattern.clone(), mask.clone(), 0.0), 0.0).unwrap();
        assert_eq!(zero, img);
        let full = blend(&img, &Trigger::blend(pattern.clone(), mask.clone(), 1.0), 1.0).unwrap();
        assert_eq!(full.data(), pattern.data());
        let black = Image::zeros(3, 16, 16);
        let mixed = blend(&black, &Trigger::blend(pattern, mask, 0.3), 0.3).unwrap();
        assert!((mixed.get(0, 5, 5) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn occlusion_endpoints() {
        let all_on = occlusion_mask(16, 16, 4, 0.0, 0).unwrap();
        assert!(all_on.data().iter().all(|&v| v == 1.0));
        let all_off = occlusion_mask(16, 16, 4, 1.0, 0).unwrap();
        assert!(all_off.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn occlusion_keep_rate_converges() {
        let mut kept = 0usize;
        let mut total = 0usize;
        for seed in 0..10_000u64 {
            let m = occlusion_mask(4, 4, 4, 0.5, seed).unwrap();
            kept += m.data().iter().filter(|&&v| v == 1.0).count();
            total += 16;
        }
        let frac = kept as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.02, "kept fraction {frac}");
    }

    #[test]
    fn refool_identity_at_zero_and_changes_pixels() {
        let img = probe_image(2);
        let reflection = probe_image(3);
        assert_eq!(refool_trigger(&img, &reflection, 0.0).unwrap(), img);
        let ghosted = refool_trigger(&img, &reflection, 1.0).unwrap();
        assert!(ghosted.in_range());
        let differing = ghosted.count_differing(&img, 1e-9);
        assert!(differing > img.len() / 2, "only {differing} pixels changed");
    }

    #[test]
    fn warp_identity_at_zero_and_in_range() {
        let img = probe_image(4);
        assert_eq!(wanet_trigger(&img, 0.0).unwrap(), img);
        let warped = wanet_trigger(&img, 2.0).unwrap();
        assert!(warped.in_range());
        assert_ne!(warped, img);
    }

    #[test]
    fn additive_clips_to_range() {
        let img = probe_image(5);
        let pattern = Image::from_fn(3, 16, 16, |_, _, _| 0.9);
        let out = Trigger::additive(pattern).apply(&img).unwrap();
        assert!(out.in_range());
    }
}
