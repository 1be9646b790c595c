//! Two-frame propagation and multi-frame chaining.
//!
//! segment -> triples -> kNN graph -> ARAP solve -> plane fit ->
//! label transfer + render -> TRW-S refinement -> re-render.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::arap::{self, ArapProblem, SolveReport, SolverConfig};
use crate::error::{Error, Result};
use crate::geometry::{self, CameraIntrinsics, PlaneParams, UnitRay, Vec3};
use crate::raster::{DepthMap, FlowField, Image, Segmentation};
use crate::refine::{self, FitDiagnostic, RefineConfig, RefineEdge, RefineOutput, RefineProblem, ShapePair};
use crate::segmentation::{self, AnchorTriple, Pixel};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub superpixels: usize,
    pub compactness: f64,
    pub knn: usize,
    /// kNN weight scale; `None` uses the mean neighbour distance.
    pub knn_tau: Option<f64>,
    /// Colour-similarity sharpness of boundary weights.
    pub beta: f64,
    pub smoothing_eps: f64,
    pub solver: SolverConfig,
    pub refine: RefineConfig,
    /// Skip TRW-S refinement and return the ARAP-fit rendering.
    pub skip_refine: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            superpixels: 1100,
            compactness: 10.0,
            knn: 20,
            knn_tau: None,
            beta: 10.0,
            smoothing_eps: arap::DEFAULT_EPS,
            solver: SolverConfig::default(),
            refine: RefineConfig::default(),
            skip_refine: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.superpixels < 2 {
            return Err(Error::Config("superpixels must be at least 2".into()));
        }
        if !(self.compactness > 0.0) {
            return Err(Error::Config(format!("compactness must be positive, got {}", self.compactness)));
        }
        if self.knn == 0 {
            return Err(Error::Config("knn must be at least 1".into()));
        }
        if let Some(t) = self.knn_tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("knn_tau must be positive, got {}", t)));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.smoothing_eps > 0.0) {
            return Err(Error::Config(format!("smoothing_eps must be positive, got {}", self.smoothing_eps)));
        }
        self.solver.validate()?;
        self.refine.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub image: Image,
    /// Range depth prior; only the triple pixels are read.
    pub depth: Option<DepthMap>,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Superpixels removed by merging degenerate regions.
    pub merged_superpixels: usize,
    /// Requested k when it exceeded the number of superpixels minus one.
    pub knn_clamped_from: Option<usize>,
    /// Triple points whose flow target left the image.
    pub out_of_bounds_points: usize,
    pub fit: Vec<FitDiagnostic>,
    /// Boundary pairs skipped in the shape term for lack of flow.
    pub skipped_boundary_pairs: usize,
    /// Rendered pixels invalidated because the ray grazed or missed its plane.
    pub grazing_pixels: usize,
    pub grazing_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub next_depth: DepthMap,
    /// Rendering of the ARAP-fit planes, before refinement.
    pub unrefined_depth: DepthMap,
    pub planes: Vec<PlaneParams>,
    pub fitted_planes: Vec<PlaneParams>,
    pub segmentation: Segmentation,
    pub triples: Vec<AnchorTriple>,
    pub next_labels: Vec<u32>,
    pub solve_report: SolveReport,
    pub refine_trace: Option<RefineOutput>,
    pub diagnostics: Diagnostics,
}

/// Propagates the reference frame's sparse depth to the next frame.
pub fn propagate_depth(
    reference: &SceneFrame,
    next_image: &Image,
    flow: &FlowField,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    cfg.validate()?;
    let k = &reference.intrinsics;
    k.validate()?;
    let dims = reference.image.dims();
    for got in [next_image.dims(), flow.dims()] {
        if got != dims {
            return Err(Error::DimensionMismatch { expected: dims, got });
        }
    }
    let prior = reference
        .depth
        .as_ref()
        .ok_or_else(|| Error::Domain("reference frame has no depth prior".into()))?;
    if prior.dims() != dims {
        return Err(Error::DimensionMismatch { expected: dims, got: prior.dims() });
    }
    let mut diagnostics = Diagnostics::default();

    // segmentation and triples
    let raw = segmentation::slic_segment(&reference.image, cfg.superpixels, cfg.compactness)?;
    let seg = segmentation::merge_degenerate(&raw)?;
    diagnostics.merged_superpixels = raw.count() - seg.count();
    let members = seg.members();
    let triples = members
        .iter()
        .enumerate()
        .map(|(id, px)| {
            segmentation::triple_from_pixels(id, px, |(u, v)| prior.get(u, v).is_some())
                .map_err(|_| Error::UnusablePrior { superpixel: id })
        })
        .collect::<Result<Vec<_>>>()?;

    // ARAP
    let points = arap::triple_points(&triples);
    let ref_rays = points
        .iter()
        .map(|&p| geometry::backproject_ray(k, p))
        .collect::<Result<Vec<_>>>()?;
    let ref_depths: Vec<f64> = triples
        .iter()
        .flat_map(|t| t.pixels())
        .map(|(u, v)| prior.get(u, v).expect("triple pixels have valid prior"))
        .collect();
    let graph = segmentation::build_knn_graph(&triples, cfg.knn, cfg.knn_tau)?;
    diagnostics.knn_clamped_from = graph.clamped_from;
    let edges = arap::expand_graph_to_points(&graph, &triples)?;
    let (next_rays, valid) = arap::warp_to_next_rays(&points, flow, k)?;
    diagnostics.out_of_bounds_points = valid.iter().filter(|v| !**v).count();
    let problem = ArapProblem::new(ref_depths.clone(), ref_rays.clone(), next_rays.clone(), valid.clone(), edges, cfg.smoothing_eps)?;
    let solve_report = arap::solve_arap(&problem, &ref_depths, &cfg.solver)?;

    // planes
    let reference_planes = reference_planes(&ref_depths, &ref_rays);
    let (fitted_planes, fit_diag) =
        refine::fit_planes(&solve_report.final_depths, &next_rays, &valid, &reference_planes)?;
    diagnostics.fit = fit_diag;

    let next_labels = transfer_labels_visible(&seg, &reference.image, next_image, flow, |label, [x, y]| {
        geometry::ray_plane_depth(&fitted_planes[label], geometry::ray_unchecked(k, x, y)).ok()
    });
    let (unrefined_depth, grazing) = render_depth(&fitted_planes, &next_labels, dims, k)?;

    let (planes, next_depth, refine_trace) = if cfg.skip_refine {
        diagnostics.grazing_pixels = grazing;
        (fitted_planes.clone(), unrefined_depth.clone(), None)
    } else {
        let (refine_edges, skipped) =
            refine_edges(&seg, &reference.image, prior, &reference_planes, flow, k, cfg.beta)?;
        diagnostics.skipped_boundary_pairs = skipped;
        let anchor_rays = (0..triples.len()).map(|i| next_rays[3 * i]).collect();
        let rp = RefineProblem { planes: fitted_planes.clone(), anchor_rays, edges: refine_edges };
        let out = refine::trws_refine(&rp, &cfg.refine)?;
        diagnostics.grazing_pairs = out.grazing_pairs;
        let (depth, grazing) = render_depth(&out.planes, &next_labels, dims, k)?;
        diagnostics.grazing_pixels = grazing;
        (out.planes.clone(), depth, Some(out))
    };

    Ok(PipelineResult {
        next_depth,
        unrefined_depth,
        planes,
        fitted_planes,
        segmentation: seg,
        triples,
        next_labels,
        solve_report,
        refine_trace,
        diagnostics,
    })
}

/// Reference-frame plane of each triple; falls back to a fronto-parallel
/// plane through the anchor if the three points are numerically collinear.
fn reference_planes(depths: &[f64], rays: &[UnitRay]) -> Vec<PlaneParams> {
    (0..depths.len() / 3)
        .map(|i| {
            let p = |k: usize| rays[k].dir() * depths[k];
            PlaneParams::through(p(3 * i), p(3 * i + 1), p(3 * i + 2)).unwrap_or(PlaneParams {
                normal: Vec3::new(0.0, 0.0, 1.0),
                depth: p(3 * i).z,
            })
        })
        .collect()
}

/// Boundary pixel pairs between adjacent superpixels, grouped per
/// superpixel pair and oriented so the first pixel lies in the lower id.
fn refine_edges(
    seg: &Segmentation,
    image: &Image,
    prior: &DepthMap,
    reference_planes: &[PlaneParams],
    flow: &FlowField,
    k: &CameraIntrinsics,
    beta: f64,
) -> Result<(Vec<RefineEdge>, usize)> {
    let boundary = segmentation::boundary_pairs(seg, image, beta)?;
    let (w, h) = flow.dims();
    let ref_point = |(u, v): Pixel, sp: usize| -> Option<Vec3> {
        let ray = geometry::backproject_ray(k, [u as f64, v as f64]).ok()?;
        let d = prior.get(u, v).or_else(|| geometry::ray_plane_depth(&reference_planes[sp], ray).ok())?;
        Some(ray.dir() * d)
    };
    let next_ray = |(u, v): Pixel| -> Option<UnitRay> {
        let f = flow.get(u, v)?;
        let (x, y) = (u as f64 + f[0], v as f64 + f[1]);
        if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
            return None;
        }
        geometry::backproject_ray(k, [x, y]).ok()
    };
    let mut skipped = 0;
    let mut out = Vec::new();
    for ((i, j), idx) in boundary.adjacency() {
        let mut pairs = Vec::with_capacity(idx.len());
        for &b in &idx {
            let bp = &boundary.pairs[b];
            let (pi, pj) = if bp.superpixel_i == i { (bp.pixel_i, bp.pixel_j) } else { (bp.pixel_j, bp.pixel_i) };
            let shape = (|| {
                let gap = ref_point(pi, i)? - ref_point(pj, j)?;
                Some(ShapePair { ray_i: next_ray(pi)?, ray_j: next_ray(pj)?, ref_gap2: gap.norm_squared(), weight: bp.weight })
            })();
            match shape {
                Some(s) => pairs.push(s),
                None => skipped += 1,
            }
        }
        out.push(RefineEdge { i, j, pairs });
    }
    Ok((out, skipped))
}

/// Carries reference-grid labels to the next grid along the flow.
///
/// Each reference pixel is splatted to the nearest next-frame pixel of its
/// displaced position; collisions go to the nearer source, then the lower
/// label. Unreached pixels take the label of the nearest reached one
/// (breadth-first, 4-connected). With no usable flow at all the reference
/// labels are returned unchanged.
pub fn transfer_labels(seg: &Segmentation, flow: &FlowField, next_dims: (usize, usize)) -> Vec<u32> {
    let labels = splat_labels(seg, flow, next_dims);
    fill_labels(labels, seg, next_dims)
}

fn splat_labels(seg: &Segmentation, flow: &FlowField, next_dims: (usize, usize)) -> Vec<Option<u32>> {
    let (w, h) = next_dims;
    let (sw, sh) = seg.dims();
    let mut best: Vec<Option<(f64, u32)>> = vec![None; w * h];
    for v in 0..sh {
        for u in 0..sw {
            let Some(f) = flow.get(u, v) else { continue };
            let (x, y) = (u as f64 + f[0], v as f64 + f[1]);
            let (tx, ty) = (x.round(), y.round());
            if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                continue;
            }
            let d = (x - tx) * (x - tx) + (y - ty) * (y - ty);
            let label = seg.label(u, v) as u32;
            let slot = &mut best[ty as usize * w + tx as usize];
            let better = match *slot {
                None => true,
                Some((bd, bl)) => d < bd || (d == bd && label < bl),
            };
            if better {
                *slot = Some((d, label));
            }
        }
    }
    best.into_iter().map(|b| b.map(|(_, l)| l)).collect()
}

/// Calls `f(x, y, outside)` for every grid pixel inside the triangle
/// grown by `margin` pixels (each edge moved outward by `margin`), where
/// `outside` is the largest distance by which the pixel lies beyond an
/// edge (0 inside).
fn rasterize(p: [[f64; 2]; 3], margin: f64, w: usize, h: usize, mut f: impl FnMut(usize, usize, f64)) {
    let edge = |a: [f64; 2], b: [f64; 2], q: [f64; 2]| (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
    let area = edge(p[0], p[1], p[2]);
    if area == 0.0 {
        return;
    }
    let sign = area.signum();
    let len = |a: [f64; 2], b: [f64; 2]| ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let lens = [len(p[1], p[2]), len(p[2], p[0]), len(p[0], p[1])];
    let lo = |k: usize| (p.iter().map(|q| q[k]).fold(f64::INFINITY, f64::min) - margin).ceil().max(0.0);
    let hi = |k: usize, n: usize| (p.iter().map(|q| q[k]).fold(f64::NEG_INFINITY, f64::max) + margin).floor().min(n as f64 - 1.0);
    let (x0, x1, y0, y1) = (lo(0), hi(0, w), lo(1), hi(1, h));
    if x0 > x1 || y0 > y1 {
        return;
    }
    // signed distances to the edges, positive inside; a hair of slack
    // keeps pixels exactly on an edge inside
    let slack = margin + 1e-9;
    for y in y0 as usize..=y1 as usize {
        for x in x0 as usize..=x1 as usize {
            let q = [x as f64, y as f64];
            let e = [edge(p[1], p[2], q), edge(p[2], p[0], q), edge(p[0], p[1], q)];
            if (0..3).all(|i| sign * e[i] >= -slack * lens[i]) {
                let outside = (0..3).map(|i| -sign * e[i] / lens[i]).fold(0.0, f64::max);
                f(x, y, outside);
            }
        }
    }
}

/// How far (pixels) beyond its warped pixel centres a label competes for
/// next-frame pixels in [`transfer_labels_visible`].
pub const SILHOUETTE_MARGIN: f64 = 2.0;

/// Weight of the distance-outside-triangle term relative to colour
/// difference when choosing among competing labels.
const OUTSIDE_WEIGHT: f64 = 0.05;

#[derive(Clone, Copy)]
struct Candidate {
    label: u32,
    score: f64,
    depth: f64,
}

/// [`transfer_labels`] with visibility and colour evidence.
///
/// The reference pixel grid is treated as a triangle mesh (two triangles
/// per 2x2 block) and warped by the flow. Every triangle whose corners
/// share a label competes for the next-frame pixels within
/// [`SILHOUETTE_MARGIN`] of it. Competitors are ranked by the colour
/// difference between the next image at the pixel and the reference
/// colour of the triangle's nearest corner, plus a small penalty for
/// lying outside the triangle; ties go to the smaller `depth(label,
/// [x, y])` (the label's next-frame range at that pixel), then the lower
/// label. Pixels no such triangle reaches take the nearest corner of a
/// covering mixed-label triangle; the rest are filled breadth-first as in
/// [`transfer_labels`].
pub fn transfer_labels_visible(
    seg: &Segmentation,
    ref_image: &Image,
    next_image: &Image,
    flow: &FlowField,
    depth: impl Fn(usize, [f64; 2]) -> Option<f64>,
) -> Vec<u32> {
    let next_dims = next_image.dims();
    let (w, h) = next_dims;
    let (sw, sh) = seg.dims();
    let warped = |u: usize, v: usize| flow.get(u, v).map(|f| [u as f64 + f[0], v as f64 + f[1]]);
    let mut best: Vec<Option<Candidate>> = vec![None; w * h];
    let mut mixed: Vec<Option<(f64, u32)>> = vec![None; w * h];
    for v in 0..sh.saturating_sub(1) {
        for u in 0..sw.saturating_sub(1) {
            for tri in [[(u, v), (u + 1, v), (u + 1, v + 1)], [(u, v), (u + 1, v + 1), (u, v + 1)]] {
                let (Some(p0), Some(p1), Some(p2)) =
                    (warped(tri[0].0, tri[0].1), warped(tri[1].0, tri[1].1), warped(tri[2].0, tri[2].1))
                else {
                    continue;
                };
                let pts = [p0, p1, p2];
                let labels = tri.map(|(a, b)| seg.label(a, b) as u32);
                if labels[0] == labels[1] && labels[1] == labels[2] {
                    let label = labels[0];
                    rasterize(pts, SILHOUETTE_MARGIN, w, h, |x, y, outside| {
                        let q = [x as f64, y as f64];
                        let k = nearest_corner(&pts, q);
                        let c_ref = ref_image.get(tri[k].0, tri[k].1);
                        let c_next = next_image.get(x, y);
                        let colour = (0..3).map(|c| (c_ref[c] - c_next[c]).powi(2)).sum::<f64>().sqrt();
                        let cand = Candidate {
                            label,
                            score: colour + OUTSIDE_WEIGHT * outside,
                            depth: depth(label as usize, q).unwrap_or(f64::INFINITY),
                        };
                        let slot = &mut best[y * w + x];
                        let better = match *slot {
                            None => true,
                            Some(b) => (cand.score, cand.depth, cand.label) < (b.score, b.depth, b.label),
                        };
                        if better {
                            *slot = Some(cand);
                        }
                    });
                } else {
                    rasterize(pts, 0.0, w, h, |x, y, _| {
                        let q = [x as f64, y as f64];
                        let k = nearest_corner(&pts, q);
                        let d = (pts[k][0] - q[0]).powi(2) + (pts[k][1] - q[1]).powi(2);
                        let slot = &mut mixed[y * w + x];
                        let better = match *slot {
                            None => true,
                            Some((bd, bl)) => d < bd || (d == bd && labels[k] < bl),
                        };
                        if better {
                            *slot = Some((d, labels[k]));
                        }
                    });
                }
            }
        }
    }
    let mut labels: Vec<Option<u32>> =
        best.iter().zip(&mixed).map(|(s, m)| s.map(|c| c.label).or(m.map(|(_, l)| l))).collect();
    if sw == 1 || sh == 1 {
        // no triangles on a degenerate grid: fall back to plain splatting
        labels = splat_labels(seg, flow, next_dims);
    }
    fill_labels(labels, seg, next_dims)
}

fn nearest_corner(pts: &[[f64; 2]; 3], q: [f64; 2]) -> usize {
    let d = |p: [f64; 2]| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
    let mut k = 0;
    for i in 1..3 {
        if d(pts[i]) < d(pts[k]) {
            k = i;
        }
    }
    k
}

/// Breadth-first nearest fill of unlabelled pixels.
fn fill_labels(mut labels: Vec<Option<u32>>, seg: &Segmentation, next_dims: (usize, usize)) -> Vec<u32> {
    let (w, h) = next_dims;
    let (sw, sh) = seg.dims();
    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| labels[i].is_some()).collect();
    if queue.is_empty() {
        return if (sw, sh) == next_dims { seg.labels().to_vec() } else { vec![0; w * h] };
    }
    while let Some(i) = queue.pop_front() {
        let l = labels[i];
        let (u, v) = (i % w, i / w);
        let mut visit = |n: usize| {
            if labels[n].is_none() {
                labels[n] = l;
                queue.push_back(n);
            }
        };
        if u > 0 {
            visit(i - 1);
        }
        if u + 1 < w {
            visit(i + 1);
        }
        if v > 0 {
            visit(i - w);
        }
        if v + 1 < h {
            visit(i + w);
        }
    }
    labels.into_iter().map(|l| l.expect("every pixel reached")).collect()
}

/// Intersects every pixel's ray with its superpixel's plane. Returns the
/// range-depth map and the number of pixels invalidated (grazing or
/// behind the camera).
pub fn render_depth(
    planes: &[PlaneParams],
    labels: &[u32],
    dims: (usize, usize),
    k: &CameraIntrinsics,
) -> Result<(DepthMap, usize)> {
    k.validate()?;
    let (w, h) = dims;
    if labels.len() != w * h {
        return Err(Error::Domain(format!("{} labels for a {}x{} grid", labels.len(), w, h)));
    }
    let mut depth = DepthMap::invalid(w, h)?;
    let mut invalid = 0;
    for v in 0..h {
        for u in 0..w {
            let l = labels[v * w + u] as usize;
            let plane = planes
                .get(l)
                .ok_or_else(|| Error::Domain(format!("label {} has no plane ({} planes)", l, planes.len())))?;
            let ray = geometry::ray_unchecked(k, u as f64, v as f64);
            match geometry::ray_plane_depth(plane, ray) {
                Ok(d) if d.is_finite() => depth.set(u, v, Some(d)),
                _ => invalid += 1,
            }
        }
    }
    Ok((depth, invalid))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub result: PipelineResult,
    /// MRE against the target frame's own depth map, when it has one.
    pub mre: Option<f64>,
}

/// Chains [`propagate_depth`] along a sequence. Each step's dense output
/// is the prior for the next step. The depth maps of frames after the
/// first are only used as ground truth for the per-step MRE.
///
/// Step `t` refines with seed `cfg.refine.random_seed + t`.
pub fn propagate_multiframe(
    frames: &[SceneFrame],
    flows: &[FlowField],
    cfg: &PipelineConfig,
    eval_cap: Option<f64>,
) -> Result<Vec<FrameResult>> {
    if frames.len() != flows.len() + 1 || flows.is_empty() {
        return Err(Error::Domain(format!(
            "need F frames and F-1 flows with F >= 2, got {} frames and {} flows",
            frames.len(),
            flows.len()
        )));
    }
    let mut out: Vec<FrameResult> = Vec::with_capacity(flows.len());
    let mut prior = frames[0].depth.clone();
    for (t, flow) in flows.iter().enumerate() {
        let reference = SceneFrame { image: frames[t].image.clone(), depth: prior, intrinsics: frames[t].intrinsics };
        let mut step_cfg = cfg.clone();
        step_cfg.refine.random_seed = cfg.refine.random_seed.wrapping_add(t as u64);
        let result = propagate_depth(&reference, &frames[t + 1].image, flow, &step_cfg).map_err(|e| e.at_frame(t))?;
        let mre = match &frames[t + 1].depth {
            Some(gt) => Some(crate::eval::mre(&result.next_depth, gt, eval_cap).map_err(|e| e.at_frame(t + 1))?.mre),
            None => None,
        };
        prior = Some(result.next_depth.clone());
        out.push(FrameResult { result, mre });
    }
    Ok(out)
}
