//! Dense float images in CHW layout.
//!
//! All pixel math in the crate happens on `f64` intensities in `[0, 1]`.
//! Every image carries the sample id it was generated under; trigger
//! application and other per-image transforms preserve the id so ground-truth
//! labels stay attached to perturbed copies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Sample id assigned at generation time; preserved by transforms.
    pub id: u64,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { h, w, c, id: 0, data: vec![0.0; c * h * w] }
    }

    pub fn from_fn<F: FnMut(usize, usize, usize) -> f64>(
        c: usize,
        h: usize,
        w: usize,
        mut f: F,
    ) -> Self {
        let mut img = Self::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    img.set(ch, y, x, f(ch, y, x));
                }
            }
        }
        img
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{} = {}", c, h, w, c * h * w),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { h, w, c, id: 0, data })
    }

    pub fn with_id(mut self, id: u64) -> Self {
        self.id = id;
        self
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.c, self.h, self.w)
    }

    /// Clamp all intensities into `[0, 1]` in place.
    pub fn clip(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn linf_distance(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Count of pixels (across channels) that differ by more than `tol`.
    pub fn count_differing(&self, other: &Image, tol: f64) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| (*a - *b).abs() > tol)
            .count()
    }

    /// Bilinear sample of one channel at fractional coordinates, clamped to
    /// the image border.
    pub fn sample_bilinear(&self, c: usize, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let v00 = self.get(c, y0, x0);
        let v01 = self.get(c, y0, x1);
        let v10 = self.get(c, y1, x0);
        let v11 = self.get(c, y1, x1);
        v00 * (1.0 - fy) * (1.0 - fx)
            + v01 * (1.0 - fy) * fx
            + v10 * fy * (1.0 - fx)
            + v11 * fy * fx
    }

    /// Shift by integer offsets with zero fill.
    pub fn shifted(&self, dy: isize, dx: isize) -> Image {
        let mut out = Image::zeros(self.c, self.h, self.w).with_id(self.id);
        for c in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    let sy = y as isize - dy;
                    let sx = x as isize - dx;
                    if sy >= 0 && sx >= 0 && (sy as usize) < self.h && (sx as usize) < self.w {
                        out.set(c, y, x, self.get(c, sy as usize, sx as usize));
                    }
                }
            }
        }
        out
    }

    /// Separable Gaussian blur with standard deviation `sigma` (pixels).
    pub fn blurred(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        for k in -radius..=radius {
            kernel.push((-0.5 * (k as f64 / sigma).powi(2)).exp());
        }
        let norm: f64 = kernel.iter().sum();
        for k in &mut kernel {
            *k /= norm;
        }

        // horizontal pass then vertical pass, clamped borders
        let mut tmp = Image::zeros(self.c, self.h, self.w);
        for c in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let sx = (x as isize + ki as isize - radius)
                            .clamp(0, self.w as isize - 1) as usize;
                        acc += k * self.get(c, y, sx);
                    }
                    tmp.set(c, y, x, acc);
                }
            }
        }
        let mut out = Image::zeros(self.c, self.h, self.w).with_id(self.id);
        for c in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let sy = (y as isize + ki as isize - radius)
                            .clamp(0, self.h as isize - 1) as usize;
                        acc += k * tmp.get(c, sy, x);
                    }
                    out.set(c, y, x, acc);
                }
            }
        }
        out
    }
}

/// Bilinearly upsample a coarse `grid_h x grid_w` value grid to `h x w`.
/// Control points sit at the corners and are spaced evenly across the target.
pub fn upsample_grid(grid: &[f64], grid_h: usize, grid_w: usize, h: usize, w: usize) -> Vec<f64> {
    assert_eq!(grid.len(), grid_h * grid_w);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gy = if h > 1 { y as f64 / (h - 1) as f64 * (grid_h - 1) as f64 } else { 0.0 };
            let gx = if w > 1 { x as f64 / (w - 1) as f64 * (grid_w - 1) as f64 } else { 0.0 };
            let y0 = gy.floor() as usize;
            let x0 = gx.floor() as usize;
            let y1 = (y0 + 1).min(grid_h - 1);
            let x1 = (x0 + 1).min(grid_w - 1);
            let fy = gy - y0 as f64;
            let fx = gx - x0 as f64;
            out[y * w + x] = grid[y0 * grid_w + x0] * (1.0 - fy) * (1.0 - fx)
                + grid[y0 * grid_w + x1] * (1.0 - fy) * fx
                + grid[y1 * grid_w + x0] * fy * (1.0 - fx)
                + grid[y1 * grid_w + x1] * fy * fx;
        }
    }
    out
}
