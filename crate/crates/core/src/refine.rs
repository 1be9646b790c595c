//! Next-frame plane fitting and discrete plane refinement.
//!
//! After the ARAP solve each superpixel's plane is fit through its three
//! recovered points. Refinement then treats every superpixel as a node of
//! a pairwise MRF whose labels are candidate planes ("particles"):
//!
//! - unary: `unary_weight * (anchor depth under candidate - fitted anchor depth)^2`
//! - pairwise: orientation cost + shape cost along shared boundary pixels
//!
//! Each move draws fresh particles around the incumbent planes (the
//! incumbent is always particle 0) and solves the MRF with TRW-S.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{self, PlaneParams, UnitRay, Vec3};
use crate::mrf::{trws, PairwiseMrf, TrwsOptions};

/// Unary cost assigned to a candidate plane that does not intersect its
/// anchor ray in front of the camera.
pub const INVALID_PLANE_PENALTY: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    /// Orientation weight.
    pub lambda1: f64,
    /// Truncation of the orientation penalty.
    pub sigma1: f64,
    /// Truncation of the per-pair shape penalty.
    pub sigma2: f64,
    pub particles_per_move: usize,
    pub moves: usize,
    /// Standard deviation of the normal rotation angle, radians.
    pub perturb_sigma_normal: f64,
    /// Standard deviation of the log plane-depth scale.
    pub perturb_sigma_depth: f64,
    pub unary_weight: f64,
    pub trws_max_passes: usize,
    pub trws_tolerance: f64,
    pub random_seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            sigma1: 0.5,
            sigma2: 0.5,
            particles_per_move: 10,
            moves: 5,
            perturb_sigma_normal: 5f64.to_radians(),
            perturb_sigma_depth: 0.05,
            unary_weight: 1.0,
            trws_max_passes: 50,
            trws_tolerance: 1e-6,
            random_seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("sigma1", self.sigma1),
            ("sigma2", self.sigma2),
            ("unary_weight", self.unary_weight),
            ("trws_tolerance", self.trws_tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(alloc::format!("{} must be positive, got {}", name, v)));
            }
        }
        for (name, v) in [
            ("perturb_sigma_normal", self.perturb_sigma_normal),
            ("perturb_sigma_depth", self.perturb_sigma_depth),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Domain(alloc::format!("{} must be non-negative, got {}", name, v)));
            }
        }
        if self.particles_per_move < 2 {
            return Err(Error::Domain("particles_per_move must be at least 2".into()));
        }
        if self.trws_max_passes == 0 {
            return Err(Error::Domain("trws_max_passes must be at least 1".into()));
        }
        Ok(())
    }

    fn trws_options(&self) -> TrwsOptions {
        TrwsOptions { max_passes: self.trws_max_passes, tolerance: self.trws_tolerance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitIssue {
    /// One or more triple points were warped out of the image.
    InvalidPoint,
    /// The three recovered points are (nearly) collinear.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitDiagnostic {
    pub superpixel: usize,
    pub issue: FitIssue,
}

/// Fits one plane per superpixel through points `3i..3i+3` at the solved
/// depths along the next-frame rays.
///
/// When a triple is unusable the reference plane's normal is kept and the
/// plane is moved through the warped anchor point (or left unchanged when
/// the anchor itself is unusable).
pub fn fit_planes(
    solved_depths: &[f64],
    next_rays: &[UnitRay],
    valid: &[bool],
    reference_planes: &[PlaneParams],
) -> Result<(Vec<PlaneParams>, Vec<FitDiagnostic>)> {
    let n = reference_planes.len();
    if solved_depths.len() != 3 * n || next_rays.len() != 3 * n || valid.len() != 3 * n {
        return Err(Error::Domain(alloc::format!(
            "expected {} points for {} planes, got depths {}, rays {}, flags {}",
            3 * n,
            n,
            solved_depths.len(),
            next_rays.len(),
            valid.len()
        )));
    }
    let mut planes = Vec::with_capacity(n);
    let mut diagnostics = Vec::new();
    for (i, reference) in reference_planes.iter().enumerate() {
        let idx = [3 * i, 3 * i + 1, 3 * i + 2];
        let point = |k: usize| geometry::point_from_depth(solved_depths[k], next_rays[k]);
        let fitted = if idx.iter().all(|&k| valid[k]) {
            match (point(idx[0]), point(idx[1]), point(idx[2])) {
                (Ok(a), Ok(b), Ok(c)) => PlaneParams::through(a, b, c).map_err(|_| FitIssue::Degenerate),
                _ => Err(FitIssue::Degenerate),
            }
        } else {
            Err(FitIssue::InvalidPoint)
        };
        match fitted {
            Ok(p) => planes.push(p),
            Err(issue) => {
                diagnostics.push(FitDiagnostic { superpixel: i, issue });
                let moved = valid[idx[0]]
                    .then(|| point(idx[0]).ok())
                    .flatten()
                    .map(|a| geometry::plane_depth(reference.normal, a))
                    .filter(|d| *d > 0.0 && d.is_finite());
                planes.push(match moved {
                    Some(depth) => PlaneParams { normal: reference.normal, depth },
                    None => *reference,
                });
            }
        }
    }
    Ok((planes, diagnostics))
}

/// `lambda1 * min(1 - |n_i . n_j|, sigma1)` for unit normals.
pub fn orientation_cost(n_i: Vec3, n_j: Vec3, cfg: &RefineConfig) -> f64 {
    let x = (1.0 - n_i.dot(n_j).abs()).max(0.0);
    cfg.lambda1 * x.min(cfg.sigma1)
}

/// One boundary pixel pair between superpixels `i` (first pixel) and `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapePair {
    pub ray_i: UnitRay,
    pub ray_j: UnitRay,
    /// Squared 3D gap of the pair in the reference frame (constant).
    pub ref_gap2: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ShapeCost {
    pub cost: f64,
    /// Pairs charged the truncation value because a ray grazed its plane.
    pub grazing: usize,
}

/// Sum over pairs of `w * min(ref_gap2 + next_gap2, sigma2)`, where the
/// next-frame gap joins the two pixels' intersections with their planes.
pub fn shape_cost(plane_i: &PlaneParams, plane_j: &PlaneParams, pairs: &[ShapePair], sigma2: f64) -> ShapeCost {
    let mut out = ShapeCost::default();
    for p in pairs {
        let gap = match (geometry::ray_plane_depth(plane_i, p.ray_i), geometry::ray_plane_depth(plane_j, p.ray_j)) {
            (Ok(a), Ok(b)) => Some((p.ray_i.dir() * a - p.ray_j.dir() * b).norm_squared()),
            _ => None,
        };
        match gap {
            Some(g) => out.cost += p.weight * (p.ref_gap2 + g).min(sigma2),
            None => {
                out.cost += p.weight * sigma2;
                out.grazing += 1;
            }
        }
    }
    out
}

/// Candidate planes around `current`; the first is always `current`.
pub fn generate_particles(current: &PlaneParams, cfg: &RefineConfig, rng: &mut ChaCha8Rng) -> Vec<PlaneParams> {
    let mut out = Vec::with_capacity(cfg.particles_per_move);
    out.push(*current);
    while out.len() < cfg.particles_per_move {
        let axis = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let angle_noise: f64 = rng.sample(StandardNormal);
        let depth_noise: f64 = rng.sample(StandardNormal);
        let angle = cfg.perturb_sigma_normal * angle_noise;
        let normal = match axis.normalized() {
            Some(k) if angle != 0.0 => rotate(current.normal, k, angle).normalized().unwrap_or(current.normal),
            _ => current.normal,
        };
        let depth = current.depth * libm::exp(cfg.perturb_sigma_depth * depth_noise);
        out.push(PlaneParams { normal, depth });
    }
    out
}

/// Rodrigues rotation of `v` about unit `axis` by `angle`.
fn rotate(v: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    if angle == 0.0 {
        return v;
    }
    let (s, c) = (angle.sin(), angle.cos());
    v * c + axis.cross(v) * s + axis * (axis.dot(v) * (1.0 - c))
}

/// Adjacent superpixel pair with its boundary pixel pairs; `i < j` and
/// every pair's first pixel lies in `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineEdge {
    pub i: usize,
    pub j: usize,
    pub pairs: Vec<ShapePair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineProblem {
    /// Planes fit after the ARAP solve; also define the unary targets.
    pub planes: Vec<PlaneParams>,
    /// Next-frame ray of each superpixel's anchor.
    pub anchor_rays: Vec<UnitRay>,
    pub edges: Vec<RefineEdge>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoveRecord {
    pub energy_before: f64,
    pub energy_after: f64,
    /// TRW-S lower bound after each pass of this move.
    pub lower_bounds: Vec<f64>,
    /// Whether the TRW-S labelling replaced the incumbent planes.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutput {
    pub planes: Vec<PlaneParams>,
    pub moves: Vec<MoveRecord>,
    /// Boundary pairs charged the truncation value for grazing rays, summed
    /// over the evaluation of the final planes.
    pub grazing_pairs: usize,
}

impl RefineProblem {
    pub fn validate(&self) -> Result<()> {
        let n = self.planes.len();
        if self.anchor_rays.len() != n {
            return Err(Error::Domain(alloc::format!(
                "{} anchor rays for {} planes",
                self.anchor_rays.len(),
                n
            )));
        }
        for e in &self.edges {
            if e.i >= e.j || e.j >= n {
                return Err(Error::Domain(alloc::format!("invalid refinement edge ({}, {})", e.i, e.j)));
            }
        }
        Ok(())
    }

    fn targets(&self) -> Vec<Option<f64>> {
        self.planes
            .iter()
            .zip(&self.anchor_rays)
            .map(|(p, r)| geometry::ray_plane_depth(p, *r).ok())
            .collect()
    }

    fn unary(&self, i: usize, target: Option<f64>, plane: &PlaneParams, cfg: &RefineConfig) -> f64 {
        match (geometry::ray_plane_depth(plane, self.anchor_rays[i]), target) {
            (Ok(d), Some(t)) => cfg.unary_weight * (d - t) * (d - t),
            (Ok(_), None) => 0.0,
            (Err(_), _) => INVALID_PLANE_PENALTY,
        }
    }

    fn pairwise(&self, e: &RefineEdge, a: &PlaneParams, b: &PlaneParams, cfg: &RefineConfig) -> ShapeCost {
        let mut s = shape_cost(a, b, &e.pairs, cfg.sigma2);
        s.cost += orientation_cost(a.normal, b.normal, cfg);
        s
    }

    /// Combined unary + orientation + shape energy of a plane assignment.
    pub fn energy(&self, planes: &[PlaneParams], cfg: &RefineConfig) -> f64 {
        let targets = self.targets();
        let unary: f64 = (0..planes.len()).map(|i| self.unary(i, targets[i], &planes[i], cfg)).sum();
        let pair: f64 = self
            .edges
            .iter()
            .map(|e| self.pairwise(e, &planes[e.i], &planes[e.j], cfg).cost)
            .sum();
        unary + pair
    }

    fn build_mrf(&self, particles: &[Vec<PlaneParams>], targets: &[Option<f64>], cfg: &RefineConfig) -> Result<PairwiseMrf> {
        let unary = particles
            .iter()
            .enumerate()
            .map(|(i, cands)| cands.iter().map(|p| self.unary(i, targets[i], p, cfg)).collect())
            .collect();
        let mut mrf = PairwiseMrf::new(unary);
        for e in &self.edges {
            let (pa, pb) = (&particles[e.i], &particles[e.j]);
            let mut table = Vec::with_capacity(pa.len() * pb.len());
            for a in pa {
                for b in pb {
                    table.push(self.pairwise(e, a, b, cfg).cost);
                }
            }
            mrf.add_edge(e.i, e.j, table)?;
        }
        Ok(mrf)
    }
}

/// Runs `cfg.moves` particle moves of TRW-S refinement.
///
/// A move's labelling is only accepted when its combined energy does not
/// exceed the incumbent's, so the energy trace is non-increasing.
pub fn trws_refine(problem: &RefineProblem, cfg: &RefineConfig) -> Result<RefineOutput> {
    cfg.validate()?;
    problem.validate()?;
    let targets = problem.targets();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.random_seed);
    let mut current = problem.planes.clone();
    let mut moves = Vec::with_capacity(cfg.moves);

    for _ in 0..cfg.moves {
        let particles: Vec<Vec<PlaneParams>> =
            current.iter().map(|p| generate_particles(p, cfg, &mut rng)).collect();
        let mrf = problem.build_mrf(&particles, &targets, cfg)?;
        let incumbent = vec![0usize; current.len()];
        let before = mrf.energy(&incumbent);
        let result = trws(&mrf, &cfg.trws_options())?;
        let accepted = result.energy < before;
        let after = if accepted { result.energy } else { before };
        if accepted {
            current = result.labels.iter().enumerate().map(|(i, &l)| particles[i][l]).collect();
        }
        moves.push(MoveRecord { energy_before: before, energy_after: after, lower_bounds: result.lower_bounds, accepted });
    }

    let grazing_pairs = problem
        .edges
        .iter()
        .map(|e| shape_cost(&current[e.i], &current[e.j], &e.pairs, cfg.sigma2).grazing)
        .sum();
    Ok(RefineOutput { planes: current, moves, grazing_pairs })
}
