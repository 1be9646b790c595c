//! Dense per-pixel containers shared by every stage.
//!
//! All grids are row-major with pixel `(u, v)` at index `v * width + u`;
//! `u` is the column and pixel centres sit on integer coordinates.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Flow components with magnitude above this are "unknown" sentinels.
pub const FLOW_SENTINEL: f32 = 1e9;

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Domain(format!("empty grid {}x{}", width, height)));
    }
    if width.checked_mul(height) != Some(len) {
        return Err(Error::Domain(format!(
            "buffer of length {} does not match {}x{}",
            len, width, height
        )));
    }
    Ok(())
}

/// RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        check_dims(width, height, pixels.len())?;
        if let Some(bad) = pixels.iter().flatten().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::Domain(format!("channel value {} outside [0, 1]", bad)));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Result<Self> {
        Self::new(width, height, vec![color; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        self.pixels[v * self.width + u]
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }
}

/// Per-pixel depth with a validity mask.
///
/// Values of invalid pixels are retained verbatim so file round trips stay
/// lossless; solver code must consult [`DepthMap::get`].
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Marks non-positive and non-finite values invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(width, height, values.len())?;
        let valid = values.iter().map(|&d| d > 0.0 && d.is_finite()).collect();
        Ok(Self { width, height, values, valid })
    }

    /// Uses `mask` in addition to the positivity test.
    pub fn with_mask(width: usize, height: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        check_dims(width, height, values.len())?;
        check_dims(width, height, mask.len())?;
        let valid = values
            .iter()
            .zip(&mask)
            .map(|(&d, &m)| m && d > 0.0 && d.is_finite())
            .collect();
        Ok(Self { width, height, values, valid })
    }

    pub fn invalid(width: usize, height: usize) -> Result<Self> {
        Self::from_values(width, height, vec![0.0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then(|| self.values[i])
    }

    pub fn set(&mut self, u: usize, v: usize, depth: Option<f64>) {
        let i = v * self.width + u;
        match depth {
            Some(d) if d > 0.0 && d.is_finite() => {
                self.values[i] = d;
                self.valid[i] = true;
            }
            _ => {
                self.values[i] = 0.0;
                self.valid[i] = false;
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Applies `f` to every valid value; results that are not positive
    /// become invalid.
    pub fn map_valid(&self, mut f: impl FnMut(usize, usize, f64) -> Option<f64>) -> DepthMap {
        let mut out = self.clone();
        for v in 0..self.height {
            for u in 0..self.width {
                if let Some(d) = self.get(u, v) {
                    out.set(u, v, f(u, v, d));
                }
            }
        }
        out
    }
}

/// Dense forward optical flow from the reference to the next frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
    valid: Vec<bool>,
}

impl FlowField {
    /// Components with magnitude above [`FLOW_SENTINEL`] (or non-finite)
    /// mark their pixel invalid.
    pub fn new(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        check_dims(width, height, u.len())?;
        check_dims(width, height, v.len())?;
        let ok = |x: f32| x.is_finite() && x.abs() <= FLOW_SENTINEL;
        let valid = u.iter().zip(&v).map(|(&a, &b)| ok(a) && ok(b)).collect();
        Ok(Self { width, height, u, v, valid })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height], vec![0.0; width * height])
    }

    pub fn uniform(width: usize, height: usize, du: f32, dv: f32) -> Result<Self> {
        Self::new(width, height, vec![du; width * height], vec![dv; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<[f64; 2]> {
        let i = v * self.width + u;
        self.valid[i].then(|| [self.u[i] as f64, self.v[i] as f64])
    }

    /// Bilinear sample at a sub-pixel position inside the grid. Returns
    /// `None` outside the grid or when any contributing pixel is invalid.
    pub fn sample(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let mut acc = [0.0; 2];
        for (uu, vv, wt) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ] {
            if wt == 0.0 {
                continue;
            }
            let f = self.get(uu, vv)?;
            acc[0] += wt * f[0];
            acc[1] += wt * f[1];
        }
        Some(acc)
    }
}

/// Pixel-to-superpixel labelling of the reference frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    count: usize,
}

impl Segmentation {
    /// Validates that labels are exactly `0..count` with every id used.
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        check_dims(width, height, labels.len())?;
        let count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut used = vec![false; count];
        for &l in &labels {
            used[l as usize] = true;
        }
        if let Some(missing) = used.iter().position(|&u| !u) {
            return Err(Error::Domain(format!("label {} is unused", missing)));
        }
        Ok(Self { width, height, labels, count })
    }

    /// Renumbers arbitrary labels to `0..count` in raster order of first
    /// appearance.
    pub fn from_raw_labels(width: usize, height: usize, raw: &[u32]) -> Result<Self> {
        check_dims(width, height, raw.len())?;
        let mut map = alloc::collections::BTreeMap::new();
        let labels = raw
            .iter()
            .map(|&r| {
                let next = map.len() as u32;
                *map.entry(r).or_insert(next)
            })
            .collect();
        Self::new(width, height, labels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn label(&self, u: usize, v: usize) -> usize {
        self.labels[v * self.width + u] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.count];
        for &l in &self.labels {
            s[l as usize] += 1;
        }
        s
    }

    /// Pixel coordinates of every superpixel, in raster order.
    pub fn members(&self) -> Vec<Vec<(usize, usize)>> {
        let mut m = vec![Vec::new(); self.count];
        for v in 0..self.height {
            for u in 0..self.width {
                m[self.label(u, v)].push((u, v));
            }
        }
        m
    }
}
