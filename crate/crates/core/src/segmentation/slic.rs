//! SLIC over-segmentation with connectivity enforcement.
//!
//! Colours are compared directly in the input RGB space, scaled by
//! [`COLOR_SCALE`] so that the compactness parameter has the same meaning
//! as for CIELAB inputs (where L spans 0..100).

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::raster::{Image, Segmentation};

pub const COLOR_SCALE: f64 = 100.0;
const ITERATIONS: usize = 10;
const UNASSIGNED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Center {
    x: f64,
    y: f64,
    c: [f64; 3],
}

pub fn slic_segment(image: &Image, target_count: usize, compactness: f64) -> Result<Segmentation> {
    let (w, h) = image.dims();
    let npix = w * h;
    if target_count < 2 {
        return Err(Error::Domain(format!("target superpixel count {} < 2", target_count)));
    }
    if target_count > npix {
        return Err(Error::Domain(format!(
            "target superpixel count {} exceeds pixel count {}",
            target_count, npix
        )));
    }
    if !(compactness > 0.0) {
        return Err(Error::Domain(format!("compactness must be positive, got {}", compactness)));
    }

    let step = (npix as f64 / target_count as f64).sqrt();
    let mut centers = seed_centers(image, step);
    let color = |u: usize, v: usize| {
        let p = image.get(u, v);
        [p[0] * COLOR_SCALE, p[1] * COLOR_SCALE, p[2] * COLOR_SCALE]
    };
    let spatial_w = (compactness / step) * (compactness / step);
    let radius = step.ceil() as i64 + 1;

    let mut labels = vec![UNASSIGNED; npix];
    let mut dist = vec![f64::INFINITY; npix];
    for _ in 0..ITERATIONS {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let cx = c.x.round() as i64;
            let cy = c.y.round() as i64;
            let u0 = (cx - radius).max(0) as usize;
            let u1 = ((cx + radius) as usize).min(w - 1);
            let v0 = (cy - radius).max(0) as usize;
            let v1 = ((cy + radius) as usize).min(h - 1);
            for v in v0..=v1 {
                for u in u0..=u1 {
                    let p = color(u, v);
                    let dc = (p[0] - c.c[0]).powi(2) + (p[1] - c.c[1]).powi(2) + (p[2] - c.c[2]).powi(2);
                    let ds = (u as f64 - c.x).powi(2) + (v as f64 - c.y).powi(2);
                    let d = dc + ds * spatial_w;
                    let i = v * w + u;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for v in 0..h {
            for u in 0..w {
                let l = labels[v * w + u];
                if l == UNASSIGNED {
                    continue;
                }
                let p = color(u, v);
                let a = &mut acc[l as usize];
                a[0] += u as f64;
                a[1] += v as f64;
                a[2] += p[0];
                a[3] += p[1];
                a[4] += p[2];
                a[5] += 1.0;
            }
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                let n = a[5];
                *c = Center { x: a[0] / n, y: a[1] / n, c: [a[2] / n, a[3] / n, a[4] / n] };
            }
        }
    }

    // pixels no window reached take the spatially nearest centre
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if labels[i] == UNASSIGNED {
                let mut best = (f64::INFINITY, 0u32);
                for (k, c) in centers.iter().enumerate() {
                    let d = (u as f64 - c.x).powi(2) + (v as f64 - c.y).powi(2);
                    if d < best.0 {
                        best = (d, k as u32);
                    }
                }
                labels[i] = best.1;
            }
        }
    }

    let min_size = ((step * step) / 4.0).floor().max(1.0) as usize;
    enforce_connectivity(w, h, &mut labels, min_size);
    Segmentation::from_raw_labels(w, h, &labels)
}

fn seed_centers(image: &Image, step: f64) -> Vec<Center> {
    let (w, h) = image.dims();
    let nx = ((w as f64 / step).round() as usize).clamp(1, w);
    let ny = ((h as f64 / step).round() as usize).clamp(1, h);
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = ((i as f64 + 0.5) * w as f64 / nx as f64 - 0.5).round().max(0.0) as usize;
            let y = ((j as f64 + 0.5) * h as f64 / ny as f64 - 0.5).round().max(0.0) as usize;
            let (x, y) = lowest_gradient(image, x.min(w - 1), y.min(h - 1));
            let p = image.get(x, y);
            centers.push(Center {
                x: x as f64,
                y: y as f64,
                c: [p[0] * COLOR_SCALE, p[1] * COLOR_SCALE, p[2] * COLOR_SCALE],
            });
        }
    }
    centers
}

/// Moves a seed to the lowest-gradient position of its 3x3 neighbourhood.
fn lowest_gradient(image: &Image, x: usize, y: usize) -> (usize, usize) {
    let (w, h) = image.dims();
    if w < 3 || h < 3 {
        return (x, y);
    }
    let grad = |u: usize, v: usize| -> f64 {
        let d = |a: [f64; 3], b: [f64; 3]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
        d(image.get(u + 1, v), image.get(u - 1, v)) + d(image.get(u, v + 1), image.get(u, v - 1))
    };
    let mut best = (f64::INFINITY, x, y);
    for v in y.saturating_sub(1)..=(y + 1).min(h - 1) {
        for u in x.saturating_sub(1)..=(x + 1).min(w - 1) {
            if u == 0 || v == 0 || u == w - 1 || v == h - 1 {
                continue;
            }
            let g = grad(u, v);
            if g < best.0 {
                best = (g, u, v);
            }
        }
    }
    if best.0.is_finite() {
        (best.1, best.2)
    } else {
        (x, y)
    }
}

/// Keeps the largest 4-connected component of each label (if at least
/// `min_size` pixels) and absorbs every other component into the largest
/// adjacent kept superpixel.
pub(crate) fn enforce_connectivity(w: usize, h: usize, labels: &mut [u32], min_size: usize) {
    let npix = w * h;
    let (comp, comp_label, comp_size) = components(w, h, labels);
    let ncomp = comp_size.len();

    let nlabels = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut main = vec![usize::MAX; nlabels];
    for c in 0..ncomp {
        let l = comp_label[c] as usize;
        if main[l] == usize::MAX || comp_size[c] > comp_size[main[l]] {
            main[l] = c;
        }
    }
    let mut kept = vec![false; ncomp];
    for &m in main.iter().filter(|&&m| m != usize::MAX) {
        kept[m] = comp_size[m] >= min_size;
    }
    if !kept.iter().any(|&k| k) {
        let largest = (0..ncomp).max_by_key(|&c| (comp_size[c], core::cmp::Reverse(c))).unwrap();
        kept[largest] = true;
    }

    let mut label_size = vec![0usize; nlabels];
    for c in (0..ncomp).filter(|&c| kept[c]) {
        label_size[comp_label[c] as usize] += comp_size[c];
    }
    let mut comp_pixels = vec![Vec::new(); ncomp];
    for i in 0..npix {
        comp_pixels[comp[i]].push(i);
    }

    loop {
        let mut changed = false;
        let mut pending = false;
        for c in 0..ncomp {
            if kept[c] {
                continue;
            }
            let mut best: Option<u32> = None;
            for &i in &comp_pixels[c] {
                for j in neighbours(w, h, i) {
                    let cj = comp[j];
                    if cj == c || !kept[cj] {
                        continue;
                    }
                    let l = labels[j];
                    best = match best {
                        None => Some(l),
                        Some(b) => {
                            let (sb, sl) = (label_size[b as usize], label_size[l as usize]);
                            if sl > sb || (sl == sb && l < b) {
                                Some(l)
                            } else {
                                Some(b)
                            }
                        }
                    };
                }
            }
            match best {
                Some(l) => {
                    for &i in &comp_pixels[c] {
                        labels[i] = l;
                    }
                    label_size[l as usize] += comp_size[c];
                    kept[c] = true;
                    changed = true;
                }
                None => pending = true,
            }
        }
        if !pending || !changed {
            break;
        }
    }
}

/// 4-connected components of equal labels: (pixel -> component, label, size).
fn components(w: usize, h: usize, labels: &[u32]) -> (Vec<usize>, Vec<u32>, Vec<usize>) {
    let npix = w * h;
    let mut comp = vec![usize::MAX; npix];
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..npix {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_label.len();
        let l = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbours(w, h, i) {
                if comp[j] == usize::MAX && labels[j] == l {
                    comp[j] = id;
                    queue.push_back(j);
                }
            }
        }
        comp_label.push(l);
        comp_size.push(size);
    }
    (comp, comp_label, comp_size)
}

#[inline]
pub(crate) fn neighbours(w: usize, h: usize, i: usize) -> impl Iterator<Item = usize> {
    let (u, v) = (i % w, i / w);
    let left = (u > 0).then(|| i - 1);
    let right = (u + 1 < w).then(|| i + 1);
    let up = (v > 0).then(|| i - w);
    let down = (v + 1 < h).then(|| i + w);
    [left, right, up, down].into_iter().flatten()
}

/// True when every label forms a single 4-connected region.
pub fn is_connected(seg: &Segmentation) -> bool {
    let (w, h) = seg.dims();
    let (_, comp_label, _) = components(w, h, seg.labels());
    comp_label.len() == seg.count()
}
