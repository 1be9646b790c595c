//! Ray-cast synthetic scenes with exact depth and flow.
//!
//! A textured background plane and two triangulated objects are moved by
//! one shared rigid motion per frame. Object control vertices are in
//! addition displaced by smooth sinusoidal deformation, so with zero
//! amplitude the whole scene is rigid. Depth is the range of the first
//! triangle hit; flow follows each surface point (fixed barycentric
//! coordinates in its triangle) into the next frame.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Vec3};
use crate::raster::{DepthMap, FlowField, Image};

/// Objects closer than this (z) are rejected.
pub const MIN_SCENE_Z: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub focal: f64,
    /// z of the background plane at the optical axis.
    pub background_depth: f64,
    /// Background tilt about the x axis, radians.
    pub background_tilt: f64,
    /// Base z of the first object; the second sits 0.5 further away.
    pub object_depth: f64,
    /// Side length of each object, scene units.
    pub object_size: f64,
    /// Control vertices per object side (>= 2).
    pub object_grid: usize,
    /// Peak z relief of the object surface.
    pub object_relief: f64,
    /// Peak deformation displacement, scene units; 0 keeps the scene rigid.
    pub amplitude: f64,
    /// Deformation phase advance per frame, radians.
    pub deformation_frequency: f64,
    /// Rigid rotation per frame, radians, about a fixed tilted y axis.
    pub rotation_per_frame: f64,
    pub translation_per_frame: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            frames: 2,
            focal: 160.0,
            background_depth: 8.0,
            background_tilt: 0.15,
            object_depth: 4.0,
            object_size: 1.4,
            object_grid: 4,
            object_relief: 0.3,
            amplitude: 0.0,
            deformation_frequency: 0.6,
            rotation_per_frame: 0.01,
            translation_per_frame: [0.02, -0.01, -0.04],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.width < 2 || self.height < 2 {
            return bad("scene must be at least 2x2 pixels");
        }
        if self.frames < 1 {
            return bad("scene needs at least one frame");
        }
        if self.object_grid < 2 {
            return bad("object_grid must be at least 2");
        }
        for (name, v) in [
            ("focal", self.focal),
            ("background_depth", self.background_depth),
            ("object_size", self.object_size),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{} must be positive, got {}", name, v)));
            }
        }
        for (name, v) in [
            ("background_tilt", self.background_tilt),
            ("object_depth", self.object_depth),
            ("object_relief", self.object_relief),
            ("amplitude", self.amplitude),
            ("deformation_frequency", self.deformation_frequency),
            ("rotation_per_frame", self.rotation_per_frame),
        ]
        .into_iter()
        .chain(self.translation_per_frame.iter().map(|&t| ("translation_per_frame", t)))
        {
            if !v.is_finite() {
                return Err(Error::Config(format!("{} must be finite, got {}", name, v)));
            }
        }
        if self.amplitude < 0.0 {
            return bad("amplitude must be non-negative");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            skew: 0.0,
        }
    }
}

/// Triangle soup of one frame: vertex positions plus per-triangle indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub intrinsics: CameraIntrinsics,
    pub images: Vec<Image>,
    /// Ground-truth range depth per frame.
    pub depths: Vec<DepthMap>,
    /// Flow from frame `t` to `t + 1` (f32 storage).
    pub flows: Vec<FlowField>,
    /// The same flow in full precision; `None` where no surface was hit.
    pub flows_exact: Vec<Vec<Option<[f64; 2]>>>,
    /// Scene geometry per frame (same topology in every frame).
    pub meshes: Vec<Mesh>,
    /// Triangle hit by each pixel per frame.
    pub hit_triangles: Vec<Vec<Option<usize>>>,
}

struct Topology {
    triangles: Vec<[usize; 3]>,
    /// Per-triangle flat colour, `None` for the textured background.
    colors: Vec<Option<[f64; 3]>>,
    /// Texture coordinates per vertex (used for the background).
    uv: Vec<[f64; 2]>,
    /// Per-vertex deformation direction and phase; zero for background.
    deform: Vec<(Vec3, f64)>,
    rest: Vec<Vec3>,
}

fn rotation(axis: Vec3, angle: f64, v: Vec3) -> Vec3 {
    let (s, c) = (angle.sin(), angle.cos());
    v * c + axis.cross(v) * s + axis * (axis.dot(v) * (1.0 - c))
}

fn build_topology(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Topology {
    let mut rest = Vec::new();
    let mut uv = Vec::new();
    let mut deform = Vec::new();
    let mut triangles = Vec::new();
    let mut colors = Vec::new();

    // background quad, generously sized so it fills the view in all frames
    let zb = spec.background_depth;
    let half_w = 2.0 * zb * spec.width as f64 / spec.focal;
    let half_h = 2.0 * zb * spec.height as f64 / spec.focal;
    let (st, ct) = (spec.background_tilt.sin(), spec.background_tilt.cos());
    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
        let (x, y) = (sx * half_w, sy * half_h);
        rest.push(Vec3::new(x, y * ct, zb + y * st));
        uv.push([x, y]);
        deform.push((Vec3::ZERO, 0.0));
    }
    triangles.push([0, 1, 2]);
    triangles.push([0, 2, 3]);
    colors.push(None);
    colors.push(None);

    let g = spec.object_grid;
    let centers = [
        Vec3::new(-0.45 * spec.object_size - 0.2, -0.1, spec.object_depth),
        Vec3::new(0.45 * spec.object_size + 0.25, 0.15, spec.object_depth + 0.5),
    ];
    for (o, c) in centers.iter().enumerate() {
        let base = rest.len();
        let phase0: f64 = rng.random_range(0.0..core::f64::consts::TAU);
        let tilt = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0).normalized().unwrap();
        for j in 0..g {
            for i in 0..g {
                let s = i as f64 / (g - 1) as f64 - 0.5;
                let t = j as f64 / (g - 1) as f64 - 0.5;
                // dome-like relief: facets are planar but mutually tilted
                let relief = -spec.object_relief * (1.0 - 2.0 * (s * s + t * t));
                let p = *c + Vec3::new(s * spec.object_size, t * spec.object_size, relief);
                rest.push(p);
                uv.push([s, t]);
                let dir = (tilt + Vec3::new(0.3 * s, 0.3 * t, 0.0)).normalized().unwrap();
                deform.push((dir, phase0 + 1.3 * (i as f64) + 0.9 * (j as f64) + o as f64));
            }
        }
        for j in 0..g - 1 {
            for i in 0..g - 1 {
                let v00 = base + j * g + i;
                let (v10, v01, v11) = (v00 + 1, v00 + g, v00 + g + 1);
                for tri in [[v00, v10, v11], [v00, v11, v01]] {
                    triangles.push(tri);
                    // well separated hues so adjacent facets differ
                    let h = (colors.len() as f64 * 0.618_033_988_75 + 0.37 * o as f64) % 1.0;
                    let l = 0.35 + 0.3 * rng.random::<f64>();
                    colors.push(Some(hsl(h, 0.8, l)));
                }
            }
        }
    }
    Topology { triangles, colors, uv, deform, rest }
}

fn hsl(h: f64, s: f64, l: f64) -> [f64; 3] {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h * 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    [r + m, g + m, b + m].map(|v| v.clamp(0.0, 1.0))
}

fn background_texture(uv: [f64; 2]) -> [f64; 3] {
    let (x, y) = (uv[0], uv[1]);
    [
        0.55 + 0.2 * (1.7 * x).sin() * (1.1 * y).cos(),
        0.5 + 0.2 * (1.3 * y + 0.5).sin(),
        0.45 + 0.15 * (0.9 * x - 1.4 * y).cos(),
    ]
}

fn frame_vertices(spec: &SceneSpec, topo: &Topology, frame: usize) -> Vec<Vec3> {
    let t = frame as f64;
    let axis = Vec3::new(0.2, 1.0, 0.1).normalized().unwrap();
    let pivot = Vec3::new(0.0, 0.0, spec.object_depth);
    let tr = Vec3::new(spec.translation_per_frame[0], spec.translation_per_frame[1], spec.translation_per_frame[2]) * t;
    topo.rest
        .iter()
        .zip(&topo.deform)
        .map(|(&p, &(dir, phase))| {
            let local = p + dir * (spec.amplitude * (spec.deformation_frequency * t + phase).sin());
            rotation(axis, spec.rotation_per_frame * t, local - pivot) + pivot + tr
        })
        .collect()
}

/// Ray/triangle intersection (Moller-Trumbore). Returns the range along
/// the unit ray and barycentric weights `(w0, w1, w2)`.
fn intersect(dir: Vec3, tri: [Vec3; 3]) -> Option<(f64, [f64; 3])> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = -tri[0];
    let b1 = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&b1) {
        return None;
    }
    let q = s.cross(e1);
    let b2 = dir.dot(q) * inv;
    if b2 < 0.0 || b1 + b2 > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv;
    (t > 0.0).then_some((t, [1.0 - b1 - b2, b1, b2]))
}

struct Hit {
    range: f64,
    triangle: usize,
    bary: [f64; 3],
}

fn cast(k: &CameraIntrinsics, mesh: &Mesh, u: usize, v: usize) -> Option<Hit> {
    let dir = k.unproject(u as f64, v as f64).normalized()?;
    let mut best: Option<Hit> = None;
    for t in 0..mesh.triangles.len() {
        if let Some((range, bary)) = intersect(dir, mesh.triangle(t)) {
            // ties go to later (object) triangles, which sit in front
            if best.as_ref().is_none_or(|b| range <= b.range) {
                best = Some(Hit { range, triangle: t, bary });
            }
        }
    }
    best
}

/// Generates all frames of `spec`. The seed drives facet colours and the
/// deformation phases/directions.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let k = spec.intrinsics();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = build_topology(spec, &mut rng);
    let meshes: Vec<Mesh> = (0..spec.frames)
        .map(|f| Mesh { vertices: frame_vertices(spec, &topo, f), triangles: topo.triangles.clone() })
        .collect();
    for (f, m) in meshes.iter().enumerate() {
        if let Some(p) = m.vertices.iter().skip(4).find(|p| p.z < MIN_SCENE_Z) {
            return Err(Error::Config(format!("object vertex at z={} in frame {} is behind the camera", p.z, f)));
        }
    }

    let (w, h) = (spec.width, spec.height);
    let mut images = Vec::with_capacity(spec.frames);
    let mut depths = Vec::with_capacity(spec.frames);
    let mut hits = Vec::with_capacity(spec.frames);
    let mut flows = Vec::new();
    let mut flows_exact = Vec::new();
    for (f, mesh) in meshes.iter().enumerate() {
        let mut pixels = vec![[0.0; 3]; w * h];
        let mut depth = vec![0.0; w * h];
        let mut hit_tri = vec![None; w * h];
        let mut flow = vec![None; w * h];
        for v in 0..h {
            for u in 0..w {
                let i = v * w + u;
                let Some(hit) = cast(&k, mesh, u, v) else { continue };
                let [a, b, c] = topo.triangles[hit.triangle];
                pixels[i] = topo.colors[hit.triangle].unwrap_or_else(|| {
                    let uv = |n: usize| topo.uv[n];
                    background_texture([
                        hit.bary[0] * uv(a)[0] + hit.bary[1] * uv(b)[0] + hit.bary[2] * uv(c)[0],
                        hit.bary[0] * uv(a)[1] + hit.bary[1] * uv(b)[1] + hit.bary[2] * uv(c)[1],
                    ])
                });
                depth[i] = hit.range;
                hit_tri[i] = Some(hit.triangle);
                if let Some(next) = meshes.get(f + 1) {
                    // difference of two projections, so unmoved points get exactly zero flow
                    let at = |m: &Mesh| {
                        let [p0, p1, p2] = m.triangle(hit.triangle);
                        p0 * hit.bary[0] + p1 * hit.bary[1] + p2 * hit.bary[2]
                    };
                    let p = at(next);
                    if p.z > 0.0 {
                        let [x, y] = k.project(p);
                        let [x0, y0] = k.project(at(mesh));
                        flow[i] = Some([x - x0, y - y0]);
                    }
                }
            }
        }
        images.push(Image::new(w, h, pixels)?);
        depths.push(DepthMap::from_values(w, h, depth)?);
        hits.push(hit_tri);
        if f + 1 < spec.frames {
            let fu = flow.iter().map(|x| x.map_or(f32::NAN, |d| d[0] as f32)).collect();
            let fv = flow.iter().map(|x| x.map_or(f32::NAN, |d| d[1] as f32)).collect();
            flows.push(FlowField::new(w, h, fu, fv)?);
            flows_exact.push(flow);
        }
    }
    Ok(SyntheticScene { spec: spec.clone(), intrinsics: k, images, depths, flows, flows_exact, meshes, hit_triangles: hits })
}

impl SyntheticScene {
    /// Largest distance, in pixels, between a pixel displaced by the exact
    /// flow and the projection of its surface point in the next frame,
    /// recomputed from the meshes.
    pub fn flow_residual(&self, frame: usize) -> f64 {
        let k = &self.intrinsics;
        let (w, h) = (self.spec.width, self.spec.height);
        let mut worst: f64 = 0.0;
        for v in 0..h {
            for u in 0..w {
                let i = v * w + u;
                let (Some(t), Some(fl)) = (self.hit_triangles[frame][i], self.flows_exact[frame][i]) else { continue };
                let tri = self.meshes[frame].triangle(t);
                let dir = k.unproject(u as f64, v as f64).normalized().unwrap();
                let x = dir * self.depths[frame].get(u, v).unwrap();
                let bary = barycentric(x, tri);
                let [q0, q1, q2] = self.meshes[frame + 1].triangle(t);
                let proj = k.project(q0 * bary[0] + q1 * bary[1] + q2 * bary[2]);
                let r = ((u as f64 + fl[0] - proj[0]).powi(2) + (v as f64 + fl[1] - proj[1]).powi(2)).sqrt();
                worst = worst.max(r);
            }
        }
        worst
    }
}

/// Barycentric coordinates of `p` (assumed in the triangle's plane).
pub fn barycentric(p: Vec3, tri: [Vec3; 3]) -> [f64; 3] {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let d = p - tri[0];
    let (d11, d12, d22) = (e1.dot(e1), e1.dot(e2), e2.dot(e2));
    let (dp1, dp2) = (d.dot(e1), d.dot(e2));
    let den = d11 * d22 - d12 * d12;
    let b1 = (d22 * dp1 - d12 * dp2) / den;
    let b2 = (d11 * dp2 - d12 * dp1) / den;
    [1.0 - b1 - b2, b1, b2]
}
