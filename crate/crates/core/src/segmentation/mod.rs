//! Piecewise-planar scene model: superpixels, anchor triples, the k-NN
//! rigidity graph and boundary pixel pairs.

mod slic;

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::raster::{Image, Segmentation};

pub use slic::{is_connected, slic_segment, COLOR_SCALE};

/// Minimum image-space triangle area of an anchor triple, in px².
pub const MIN_TRIPLE_AREA: f64 = 0.5;

pub type Pixel = (usize, usize);

/// Three non-collinear pixels of one superpixel. `anchor` is the pixel
/// closest to the superpixel centroid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorTriple {
    pub superpixel: usize,
    pub anchor: Pixel,
    pub p1: Pixel,
    pub p2: Pixel,
}

impl AnchorTriple {
    /// Pixels in point order: anchor, p1, p2.
    pub fn pixels(&self) -> [Pixel; 3] {
        [self.anchor, self.p1, self.p2]
    }

    pub fn area(&self) -> f64 {
        triangle_area(self.anchor, self.p1, self.p2)
    }
}

pub fn triangle_area(a: Pixel, b: Pixel, c: Pixel) -> f64 {
    let (ax, ay) = (a.0 as f64, a.1 as f64);
    let cross = (b.0 as f64 - ax) * (c.1 as f64 - ay) - (b.1 as f64 - ay) * (c.0 as f64 - ax);
    0.5 * cross.abs()
}

fn dist2(a: Pixel, b: Pixel) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    dx * dx + dy * dy
}

/// Chooses the triple for superpixel `id` from its member pixels.
///
/// The centroid is taken over all members; only pixels passing `accept`
/// are eligible as triple points. Ties go to the earlier pixel in `pixels`.
pub fn triple_from_pixels(
    id: usize,
    pixels: &[Pixel],
    accept: impl Fn(Pixel) -> bool,
) -> Result<AnchorTriple> {
    let degenerate = Error::DegenerateSuperpixel { superpixel: id };
    if pixels.is_empty() {
        return Err(degenerate);
    }
    let n = pixels.len() as f64;
    let cx = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cy = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;

    let candidates: Vec<Pixel> = pixels.iter().copied().filter(|&p| accept(p)).collect();
    if candidates.len() < 3 {
        return Err(degenerate);
    }
    let argmax = |score: &dyn Fn(Pixel) -> f64| {
        let mut best = (f64::NEG_INFINITY, candidates[0]);
        for &p in &candidates {
            let s = score(p);
            if s > best.0 {
                best = (s, p);
            }
        }
        best
    };
    let (_, anchor) = argmax(&|p| {
        let dx = p.0 as f64 - cx;
        let dy = p.1 as f64 - cy;
        -(dx * dx + dy * dy)
    });
    let (_, p1) = argmax(&|p| dist2(p, anchor));
    let (area, p2) = argmax(&|p| triangle_area(anchor, p1, p));
    if area < MIN_TRIPLE_AREA {
        return Err(degenerate);
    }
    Ok(AnchorTriple { superpixel: id, anchor, p1, p2 })
}

pub fn select_anchor_triple(seg: &Segmentation, superpixel_id: usize) -> Result<AnchorTriple> {
    if superpixel_id >= seg.count() {
        return Err(Error::Domain(alloc::format!(
            "superpixel {} out of range (count {})",
            superpixel_id,
            seg.count()
        )));
    }
    let (w, h) = seg.dims();
    let pixels: Vec<Pixel> = (0..h)
        .flat_map(|v| (0..w).map(move |u| (u, v)))
        .filter(|&(u, v)| seg.label(u, v) == superpixel_id)
        .collect();
    triple_from_pixels(superpixel_id, &pixels, |_| true)
}

/// Merges every superpixel for which no triple exists (fewer than three
/// pixels, or all collinear) into its largest adjacent superpixel.
pub fn merge_degenerate(seg: &Segmentation) -> Result<Segmentation> {
    let (w, h) = seg.dims();
    let mut current = seg.clone();
    loop {
        let members = current.members();
        let sizes = current.sizes();
        let degenerate: Vec<usize> = (0..current.count())
            .filter(|&id| triple_from_pixels(id, &members[id], |_| true).is_err())
            .collect();
        if degenerate.is_empty() {
            return Ok(current);
        }
        if current.count() == 1 {
            return Err(Error::DegenerateSuperpixel { superpixel: 0 });
        }
        let mut target: BTreeMap<u32, u32> = BTreeMap::new();
        for &id in &degenerate {
            let mut best: Option<usize> = None;
            for &(u, v) in &members[id] {
                let i = v * w + u;
                for j in slic::neighbours(w, h, i) {
                    let l = current.labels()[j] as usize;
                    if l == id {
                        continue;
                    }
                    best = match best {
                        Some(b) if sizes[b] > sizes[l] || (sizes[b] == sizes[l] && b < l) => Some(b),
                        _ => Some(l),
                    };
                }
            }
            if let Some(b) = best {
                target.insert(id as u32, b as u32);
            }
        }
        // resolve chains so a→b→a cycles collapse deterministically
        let resolve = |mut l: u32| {
            for _ in 0..target.len() + 1 {
                match target.get(&l) {
                    Some(&t) if t != l => l = t,
                    _ => break,
                }
            }
            l
        };
        let labels: Vec<u32> = current.labels().iter().map(|&l| resolve(l)).collect();
        let next = Segmentation::from_raw_labels(w, h, &labels)?;
        if next.count() == current.count() {
            return Err(Error::DegenerateSuperpixel { superpixel: degenerate[0] });
        }
        current = next;
    }
}

/// Directed k-nearest-neighbour graph over superpixel anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidityGraph {
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
    /// Effective neighbour count after clamping to `N - 1`.
    pub k: usize,
    pub tau: f64,
    /// Set when the requested `k` was clamped.
    pub clamped_from: Option<usize>,
}

impl RigidityGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

/// Builds the k-NN graph over anchor pixels. `tau = None` uses the mean
/// k-NN anchor distance of the graph (or 1 if that is zero).
pub fn build_knn_graph(triples: &[AnchorTriple], k: usize, tau: Option<f64>) -> Result<RigidityGraph> {
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    if let Some(t) = tau {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Domain(alloc::format!("tau must be positive, got {}", t)));
        }
    }
    let n = triples.len();
    let k_eff = k.min(n.saturating_sub(1));
    let clamped_from = (k_eff != k).then_some(k);

    let mut neighbors = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, ti) in triples.iter().enumerate() {
        order.clear();
        order.extend(
            triples
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, tj)| (dist2(ti.anchor, tj.anchor), j)),
        );
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k_eff < order.len() {
            order.select_nth_unstable_by(k_eff, by_dist);
            order.truncate(k_eff);
        }
        order.sort_by(by_dist);
        neighbors.push(order.iter().map(|&(_, j)| j).collect::<Vec<_>>());
        dists.push(order.iter().map(|&(d, _)| d.sqrt()).collect::<Vec<_>>());
    }

    let tau = match tau {
        Some(t) => t,
        None => {
            let total: f64 = dists.iter().flatten().sum();
            let count = dists.iter().map(Vec::len).sum::<usize>();
            let mean = if count > 0 { total / count as f64 } else { 0.0 };
            if mean > 0.0 {
                mean
            } else {
                1.0
            }
        }
    };
    let weights = dists
        .iter()
        .map(|row| row.iter().map(|d| libm::exp(-d / tau)).collect())
        .collect();
    Ok(RigidityGraph { neighbors, weights, k: k_eff, tau, clamped_from })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPair {
    pub pixel_i: Pixel,
    pub pixel_j: Pixel,
    pub superpixel_i: usize,
    pub superpixel_j: usize,
    /// Colour-consistency weight `exp(-beta * |I_i - I_j|)`.
    pub weight: f64,
}

/// All 4-adjacent pixel pairs straddling a superpixel boundary, each
/// stored once (right and down neighbours of each pixel).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundarySet {
    pub pairs: Vec<BoundaryPair>,
}

impl BoundarySet {
    /// Pair indices grouped by unordered superpixel pair `(lo, hi)`.
    pub fn adjacency(&self) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut adj: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (idx, p) in self.pairs.iter().enumerate() {
            let key = (p.superpixel_i.min(p.superpixel_j), p.superpixel_i.max(p.superpixel_j));
            adj.entry(key).or_default().push(idx);
        }
        adj
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn color_weight(a: [f64; 3], b: [f64; 3], beta: f64) -> f64 {
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    libm::exp(-beta * d)
}

pub fn boundary_pairs(seg: &Segmentation, image: &Image, beta: f64) -> Result<BoundarySet> {
    if !(beta >= 0.0) {
        return Err(Error::Domain(alloc::format!("beta must be non-negative, got {}", beta)));
    }
    if seg.dims() != image.dims() {
        return Err(Error::DimensionMismatch { expected: seg.dims(), got: image.dims() });
    }
    let (w, h) = seg.dims();
    let mut pairs = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let li = seg.label(u, v);
            for (uu, vv) in [(u + 1, v), (u, v + 1)] {
                if uu >= w || vv >= h {
                    continue;
                }
                let lj = seg.label(uu, vv);
                if li != lj {
                    pairs.push(BoundaryPair {
                        pixel_i: (u, v),
                        pixel_j: (uu, vv),
                        superpixel_i: li,
                        superpixel_j: lj,
                        weight: color_weight(image.get(u, v), image.get(uu, vv), beta),
                    });
                }
            }
        }
    }
    Ok(BoundarySet { pairs })
}

/// Per-superpixel neighbour lists derived from pixel adjacency.
pub fn superpixel_adjacency(seg: &Segmentation) -> Vec<Vec<usize>> {
    let (w, h) = seg.dims();
    let mut adj = vec![Vec::new(); seg.count()];
    for v in 0..h {
        for u in 0..w {
            let a = seg.label(u, v);
            for (uu, vv) in [(u + 1, v), (u, v + 1)] {
                if uu < w && vv < h {
                    let b = seg.label(uu, vv);
                    if a != b {
                        adj[a].push(b);
                        adj[b].push(a);
                    }
                }
            }
        }
    }
    for l in adj.iter_mut() {
        l.sort_unstable();
        l.dedup();
    }
    adj
}
