//! Labeled image sets, the ground-truth oracle, and the synthetic dataset
//! generator used for desk-scale experiments.

use std::collections::HashSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{upsample_grid, Image};
use crate::seed;

/// Where a sample came from. Poisoned payload samples carry the attacker's
/// target label; regularization samples carry their ground-truth label while
/// still containing the trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Clean,
    PoisonedPayload,
    PoisonedRegularization,
}

#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
    pub class_count: usize,
}

impl LabeledSet {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let provenance = vec![Provenance::Clean; images.len()];
        let set = Self { images, labels, provenance, class_count };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(class_count: usize) -> Self {
        Self { images: Vec::new(), labels: Vec::new(), provenance: Vec::new(), class_count }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, image: Image, label: usize, provenance: Provenance) {
        self.images.push(image);
        self.labels.push(label);
        self.provenance.push(provenance);
    }

    /// Check the type invariants: intensities in range, labels in range,
    /// provenance aligned with the image list.
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.images.len() || self.provenance.len() != self.images.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels/provenance entries", self.images.len()),
                got: format!("{} labels, {} provenance", self.labels.len(), self.provenance.len()),
            });
        }
        for (i, img) in self.images.iter().enumerate() {
            if !img.in_range() {
                return Err(Error::InvalidArg(format!("image {i} has intensities outside [0,1]")));
            }
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::InvalidArg(format!(
                "label {bad} out of range for {} classes",
                self.class_count
            )));
        }
        Ok(())
    }

    /// Indices of samples with the given label.
    pub fn indices_with_label(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        let mut out = LabeledSet::empty(self.class_count);
        for &i in indices {
            out.push(self.images[i].clone(), self.labels[i], self.provenance[i]);
        }
        out
    }
}

/// Ground-truth labeling function. Realized as a table keyed by sample id, so
/// it keeps answering correctly for trigger-stamped copies of its samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Oracle {
    labels: Vec<usize>,
    pub class_count: usize,
}

impl Oracle {
    pub fn from_labels(labels: Vec<usize>, class_count: usize) -> Self {
        Self { labels, class_count }
    }

    /// Build from a dataset's label column, keyed by each image's id.
    pub fn from_set(set: &LabeledSet) -> Result<Self> {
        let max_id = set.images.iter().map(|im| im.id).max().unwrap_or(0) as usize;
        let mut labels = vec![usize::MAX; max_id + 1];
        for (img, &label) in set.images.iter().zip(&set.labels) {
            labels[img.id as usize] = label;
        }
        if labels.iter().any(|&l| l == usize::MAX) {
            return Err(Error::InvalidArg("sample ids are not contiguous".into()));
        }
        Ok(Self { labels, class_count: set.class_count })
    }

    pub fn label_of(&self, image: &Image) -> Result<usize> {
        self.labels
            .get(image.id as usize)
            .copied()
            .ok_or(Error::UnknownSampleId(image.id))
    }

    pub fn labels_of(&self, images: &[Image]) -> Result<Vec<usize>> {
        images.iter().map(|im| self.label_of(im)).collect()
    }
}

/// Smallest image side that can host the 3-pixel patch trigger with margin.
pub const MIN_IMAGE_SIZE: usize = 8;

/// Channels of the synthetic dataset.
pub const SYNTHETIC_CHANNELS: usize = 3;

const SIGNATURE_GRID: usize = 4;
const NOISE_SIGMA: f64 = 0.1;

/// Intra-class variation: each class is a mixture of this many distinct
/// visual modes. A trusted draw of a few samples per class therefore never
/// covers a class completely, which keeps limited-trust repair non-trivial
/// (retraining from the trusted set alone loses the unseen modes).
pub const SIGNATURE_MODES: usize = 3;

/// Generate a balanced synthetic classification dataset.
///
/// Each class owns a fixed set of low-frequency mode patterns (seeded coarse
/// grids, bilinearly upsampled); a sample is one of its class's modes plus
/// per-pixel Gaussian noise, clipped to `[0, 1]`. Modes cycle deterministically
/// within a class, so every class is an even mixture. The returned oracle
/// maps sample ids back to the generating class, so it stays exact under
/// trigger stamping.
pub fn generate_synthetic_dataset(
    classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<(LabeledSet, Oracle)> {
    if classes < 2 {
        return Err(Error::InvalidArg(format!("need at least 2 classes, got {classes}")));
    }
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::InvalidArg(format!(
            "image_size {image_size} too small to host a 3-pixel patch trigger (minimum {MIN_IMAGE_SIZE})"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "synthetic"));
    let c = SYNTHETIC_CHANNELS;

    let mut modes = Vec::with_capacity(classes * SIGNATURE_MODES);
    for _ in 0..classes * SIGNATURE_MODES {
        let mut base = Image::zeros(c, image_size, image_size);
        for ch in 0..c {
            let grid: Vec<f64> =
                (0..SIGNATURE_GRID * SIGNATURE_GRID).map(|_| rng.gen_range(0.15..0.85)).collect();
            let up = upsample_grid(&grid, SIGNATURE_GRID, SIGNATURE_GRID, image_size, image_size);
            for y in 0..image_size {
                for x in 0..image_size {
                    base.set(ch, y, x, up[y * image_size + x]);
                }
            }
        }
        modes.push(base);
    }

    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    let mut id: u64 = 0;
    for class in 0..classes {
        for sample in 0..per_class {
            let mode = sample % SIGNATURE_MODES;
            let mut img = modes[class * SIGNATURE_MODES + mode].clone();
            for v in img.data_mut() {
                *v += NOISE_SIGMA * rng.sample::<f64, _>(rand_distributions::StandardNormal);
            }
            img.clip();
            images.push(img.with_id(id));
            labels.push(class);
            id += 1;
        }
    }

    let set = LabeledSet::new(images, labels.clone(), classes)?;
    let oracle = Oracle::from_labels(labels, classes);
    Ok((set, oracle))
}

// rand 0.8 re-exports StandardNormal from rand_distr only; keep a tiny local
// sampler instead of pulling the whole crate for one distribution.
mod rand_distributions {
    use rand::Rng;

    pub struct StandardNormal;

    impl rand::distributions::Distribution<f64> for StandardNormal {
        fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            // Box-Muller
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }
}

/// A sampling distribution over images: a fixed pool plus its oracle.
#[derive(Debug, Clone)]
pub struct Distribution {
    pub pool: LabeledSet,
    pub oracle: Oracle,
}

impl Distribution {
    pub fn new(pool: LabeledSet, oracle: Oracle) -> Self {
        Self { pool, oracle }
    }

    pub fn synthetic(classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Self> {
        let (pool, oracle) = generate_synthetic_dataset(classes, per_class, image_size, seed)?;
        Ok(Self { pool, oracle })
    }

    pub fn sampler(&self, seed: u64) -> Sampler<'_> {
        Sampler {
            dist: self,
            order: {
                let mut order: Vec<usize> = (0..self.pool.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                order
            },
            cursor: 0,
            used: HashSet::new(),
        }
    }
}

/// Draws samples from a [`Distribution`] without replacement. Successive
/// draws within one sampler never overlap, which is how the games keep the
/// trusted set disjoint from training data.
pub struct Sampler<'a> {
    dist: &'a Distribution,
    order: Vec<usize>,
    cursor: usize,
    used: HashSet<usize>,
}

impl<'a> Sampler<'a> {
    pub fn draw(&mut self, n: usize) -> Result<LabeledSet> {
        let mut out = LabeledSet::empty(self.dist.pool.class_count);
        while out.len() < n {
            let idx = self.next_unused()?;
            out.push(
                self.dist.pool.images[idx].clone(),
                self.dist.pool.labels[idx],
                Provenance::Clean,
            );
        }
        Ok(out)
    }

    /// Draw `n` samples spread as evenly as possible across classes; every
    /// class receives at least one sample when `n >= class_count`.
    pub fn draw_stratified(&mut self, n: usize) -> Result<LabeledSet> {
        let classes = self.dist.pool.class_count;
        let mut picked: Vec<Vec<usize>> = vec![Vec::new(); classes];
        let mut counts = vec![0usize; classes];
        let mut total = 0;
        // Walk the shuffled order, taking a sample when its class is still
        // below the evolving per-class quota.
        let mut scan = self.cursor;
        while total < n {
            if scan >= self.order.len() {
                return Err(Error::InsufficientSamples {
                    needed: n,
                    available: total,
                });
            }
            let idx = self.order[scan];
            scan += 1;
            if self.used.contains(&idx) {
                continue;
            }
            let class = self.dist.pool.labels[idx];
            let quota = n / classes + usize::from(class < n % classes);
            if counts[class] < quota {
                self.used.insert(idx);
                picked[class].push(idx);
                counts[class] += 1;
                total += 1;
            }
        }
        let mut out = LabeledSet::empty(classes);
        for class_indices in picked {
            for idx in class_indices {
                out.push(
                    self.dist.pool.images[idx].clone(),
                    self.dist.pool.labels[idx],
                    Provenance::Clean,
                );
            }
        }
        Ok(out)
    }

    /// Draw `count` samples whose label is `class`.
    pub fn draw_class(&mut self, class: usize, count: usize) -> Result<LabeledSet> {
        let mut out = LabeledSet::empty(self.dist.pool.class_count);
        let mut scan = self.cursor;
        while out.len() < count {
            if scan >= self.order.len() {
                return Err(Error::InsufficientSamples { needed: count, available: out.len() });
            }
            let idx = self.order[scan];
            scan += 1;
            if self.used.contains(&idx) || self.dist.pool.labels[idx] != class {
                continue;
            }
            self.used.insert(idx);
            out.push(
                self.dist.pool.images[idx].clone(),
                self.dist.pool.labels[idx],
                Provenance::Clean,
            );
        }
        Ok(out)
    }

    fn next_unused(&mut self) -> Result<usize> {
        while self.cursor < self.order.len() {
            let idx = self.order[self.cursor];
            self.cursor += 1;
            if !self.used.contains(&idx) {
                self.used.insert(idx);
                return Ok(idx);
            }
        }
        Err(Error::InsufficientSamples { needed: 1, available: 0 })
    }
}
