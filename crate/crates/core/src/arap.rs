//! As-rigid-as-possible depth recovery for the 3N triple points.
//!
//! The energy compares 3D edge lengths between the reference frame (known
//! depths) and the next frame (unknown depths along flow-warped rays):
//!
//! `E(d~) = sum_(a,b) w_ab * phi(L_ab - L~_ab)`, with
//! `phi(x) = sqrt(x^2 + eps^2) - eps` a smoothed absolute value.
//!
//! It is minimised by projected gradient descent with Armijo backtracking
//! on the box `[max(floor, d - d_sigma), d + d_sigma]` (or `[floor, inf)`
//! without the restricted-isometry box).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::time::Duration;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, CameraIntrinsics, UnitRay, Vec3};
use crate::raster::FlowField;
use crate::segmentation::{AnchorTriple, Pixel, RigidityGraph};

/// Default smoothing of the absolute value.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Directed point-level edge carrying its rigidity weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Expands superpixel edges to point edges: point `3i + t` is triple point
/// `t` (anchor, p1, p2) of superpixel `i`.
///
/// Each superpixel contributes its three internal edges with weight 1, and
/// every graph edge `(i, j)` contributes the 9 edges from `i`'s points to
/// `j`'s points with weight `w_ij`.
pub fn expand_graph_to_points(graph: &RigidityGraph, triples: &[AnchorTriple]) -> Result<Vec<PointEdge>> {
    if graph.len() != triples.len() {
        return Err(Error::Domain(format!(
            "graph has {} nodes but {} triples were given",
            graph.len(),
            triples.len()
        )));
    }
    let mut edges = Vec::with_capacity(triples.len() * (3 + 9 * graph.k));
    for i in 0..graph.len() {
        let base = 3 * i;
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            edges.push(PointEdge { a: base + a, b: base + b, weight: 1.0 });
        }
        for (&j, &w) in graph.neighbors[i].iter().zip(&graph.weights[i]) {
            if j >= graph.len() {
                return Err(Error::Domain(format!("edge ({}, {}) out of range", i, j)));
            }
            for a in 0..3 {
                for b in 0..3 {
                    edges.push(PointEdge { a: base + a, b: 3 * j + b, weight: w });
                }
            }
        }
    }
    Ok(edges)
}

/// Next-frame rays of reference pixels displaced by the flow. Pixels whose
/// flow is unknown or whose target falls outside the image come back with
/// `false` and a placeholder ray (their reference ray).
pub fn warp_to_next_rays(
    pixels: &[[f64; 2]],
    flow: &FlowField,
    k: &CameraIntrinsics,
) -> Result<(Vec<UnitRay>, Vec<bool>)> {
    k.validate()?;
    let (w, h) = (flow.width() as f64, flow.height() as f64);
    let mut rays = Vec::with_capacity(pixels.len());
    let mut valid = Vec::with_capacity(pixels.len());
    for &[x, y] in pixels {
        let reference = geometry::backproject_ray(k, [x, y])?;
        let target = flow
            .sample(x, y)
            .map(|f| [x + f[0], y + f[1]])
            .filter(|t| t[0] >= 0.0 && t[1] >= 0.0 && t[0] <= w - 1.0 && t[1] <= h - 1.0);
        match target {
            Some(t) => {
                rays.push(geometry::backproject_ray(k, t)?);
                valid.push(true);
            }
            None => {
                rays.push(reference);
                valid.push(false);
            }
        }
    }
    Ok((rays, valid))
}

/// Pixel centres of triple points in point order.
pub fn triple_points(triples: &[AnchorTriple]) -> Vec<[f64; 2]> {
    triples
        .iter()
        .flat_map(|t| t.pixels())
        .map(|(u, v): Pixel| [u as f64, v as f64])
        .collect()
}

#[derive(Debug, Clone)]
struct ActiveEdge {
    a: usize,
    b: usize,
    weight: f64,
    ref_len: f64,
}

/// Immutable ARAP instance over `n` points.
#[derive(Debug, Clone)]
pub struct ArapProblem {
    ref_depths: Vec<f64>,
    ref_rays: Vec<UnitRay>,
    next_rays: Vec<UnitRay>,
    valid: Vec<bool>,
    edges: Vec<PointEdge>,
    active: Vec<ActiveEdge>,
    eps: f64,
}

impl ArapProblem {
    pub fn new(
        ref_depths: Vec<f64>,
        ref_rays: Vec<UnitRay>,
        next_rays: Vec<UnitRay>,
        valid: Vec<bool>,
        edges: Vec<PointEdge>,
        smoothing_eps: f64,
    ) -> Result<Self> {
        let n = ref_depths.len();
        if ref_rays.len() != n || next_rays.len() != n || valid.len() != n {
            return Err(Error::Domain(format!(
                "point arrays disagree: depths {}, rays {}, next rays {}, flags {}",
                n,
                ref_rays.len(),
                next_rays.len(),
                valid.len()
            )));
        }
        if let Some(d) = ref_depths.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(Error::Domain(format!("reference depth {} is not positive", d)));
        }
        if !(smoothing_eps > 0.0) {
            return Err(Error::Domain(format!("smoothing eps must be positive, got {}", smoothing_eps)));
        }
        let mut active = Vec::with_capacity(edges.len());
        for e in &edges {
            if e.a >= n || e.b >= n {
                return Err(Error::Domain(format!("edge ({}, {}) references a missing point", e.a, e.b)));
            }
            if valid[e.a] && valid[e.b] {
                let pa = ref_rays[e.a].dir() * ref_depths[e.a];
                let pb = ref_rays[e.b].dir() * ref_depths[e.b];
                active.push(ActiveEdge { a: e.a, b: e.b, weight: e.weight, ref_len: (pa - pb).norm() });
            }
        }
        Ok(Self { ref_depths, ref_rays, next_rays, valid, edges, active, eps: smoothing_eps })
    }

    pub fn len(&self) -> usize {
        self.ref_depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ref_depths.is_empty()
    }

    pub fn ref_depths(&self) -> &[f64] {
        &self.ref_depths
    }

    pub fn ref_rays(&self) -> &[UnitRay] {
        &self.ref_rays
    }

    pub fn next_rays(&self) -> &[UnitRay] {
        &self.next_rays
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn edges(&self) -> &[PointEdge] {
        &self.edges
    }

    /// Number of edges whose endpoints are both valid.
    pub fn active_edge_count(&self) -> usize {
        self.active.len()
    }

    pub fn smoothing_eps(&self) -> f64 {
        self.eps
    }

    fn check(&self, next_depths: &[f64]) -> Result<()> {
        if next_depths.len() != self.len() {
            return Err(Error::Domain(format!(
                "expected {} depths, got {}",
                self.len(),
                next_depths.len()
            )));
        }
        Ok(())
    }

    #[inline]
    fn next_len(&self, e: &ActiveEdge, d: &[f64]) -> (f64, Vec3) {
        let diff = self.next_rays[e.a].dir() * d[e.a] - self.next_rays[e.b].dir() * d[e.b];
        (diff.norm(), diff)
    }

    pub fn energy(&self, next_depths: &[f64]) -> Result<f64> {
        self.check(next_depths)?;
        Ok(self.energy_with(next_depths, self.eps))
    }

    pub fn gradient(&self, next_depths: &[f64]) -> Result<Vec<f64>> {
        Ok(self.energy_and_gradient(next_depths)?.1)
    }

    pub fn energy_and_gradient(&self, next_depths: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(next_depths)?;
        Ok(self.energy_and_gradient_with(next_depths, self.eps))
    }

    /// Mean reference length over active edges (1 when there are none).
    pub fn mean_edge_length(&self) -> f64 {
        if self.active.is_empty() {
            return 1.0;
        }
        self.active.iter().map(|e| e.ref_len).sum::<f64>() / self.active.len() as f64
    }

    fn energy_with(&self, d: &[f64], eps: f64) -> f64 {
        self.active
            .iter()
            .map(|e| {
                let x = e.ref_len - self.next_len(e, d).0;
                e.weight * (libm::hypot(x, eps) - eps)
            })
            .sum()
    }

    fn energy_and_gradient_with(&self, d: &[f64], eps: f64) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.len()];
        let mut energy = 0.0;
        for e in &self.active {
            let (len, diff) = self.next_len(e, d);
            let x = e.ref_len - len;
            let s = libm::hypot(x, eps);
            energy += e.weight * (s - eps);
            if len > 0.0 {
                // dE/dL~ = -w * phi'(x); dL~/dd_a = e_a . diff / L~
                let c = -e.weight * (x / s) / len;
                grad[e.a] += c * self.next_rays[e.a].dir().dot(diff);
                grad[e.b] -= c * self.next_rays[e.b].dir().dot(diff);
            }
        }
        (energy, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop once the projected-gradient norm falls below this.
    pub gradient_tolerance: f64,
    pub use_isometry_box: bool,
    /// Half-width of the box around the reference depths, scene units.
    pub d_sigma: f64,
    /// Closed surrogate for the strict positivity constraint.
    pub depth_floor: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    pub initial_step: f64,
    /// Use Barzilai-Borwein step lengths as the first trial step.
    pub spectral_steps: bool,
    /// Give up the line search below this step length.
    pub min_step: f64,
    /// Solve a sequence of more strongly smoothed energies first, each
    /// warm-starting the next, ending at the problem's own eps.
    pub continuation: bool,
    /// First smoothing level, relative to the mean reference edge length.
    pub continuation_start: f64,
    /// Ratio between consecutive smoothing levels (in (0, 1)).
    pub continuation_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 3000,
            gradient_tolerance: 1e-9,
            use_isometry_box: true,
            d_sigma: 1.0,
            depth_floor: 1e-4,
            armijo_c: 1e-4,
            initial_step: 1e-2,
            spectral_steps: true,
            min_step: 1e-20,
            continuation: true,
            continuation_start: 1e-2,
            continuation_factor: 0.1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.use_isometry_box && !(self.d_sigma > 0.0) {
            return Err(Error::Domain(format!(
                "d_sigma must be positive when the isometry box is enabled, got {}",
                self.d_sigma
            )));
        }
        for (name, v) in [
            ("gradient_tolerance", self.gradient_tolerance),
            ("depth_floor", self.depth_floor),
            ("armijo_c", self.armijo_c),
            ("initial_step", self.initial_step),
            ("min_step", self.min_step),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{} must be positive, got {}", name, v)));
            }
        }
        if self.continuation && !(self.continuation_start > 0.0 && self.continuation_start.is_finite()) {
            return Err(Error::Domain(format!("continuation_start must be positive, got {}", self.continuation_start)));
        }
        if self.continuation && !(self.continuation_factor > 0.0 && self.continuation_factor < 1.0) {
            return Err(Error::Domain(format!(
                "continuation_factor must lie in (0, 1), got {}",
                self.continuation_factor
            )));
        }
        if self.armijo_c >= 1.0 {
            return Err(Error::Domain("armijo_c must be below 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub final_depths: Vec<f64>,
    /// Energy at the initial point followed by one entry per iteration.
    pub energy_trace: Vec<f64>,
    /// Accepted step length per iteration (0 for the initial entry).
    pub step_trace: Vec<f64>,
    /// Projected-gradient norm of the energy being descended (the current
    /// smoothing stage), aligned with `energy_trace`.
    pub pgrad_trace: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    pub wall_time: Duration,
}

impl SolveReport {
    pub fn final_energy(&self) -> f64 {
        *self.energy_trace.last().expect("trace holds the initial energy")
    }

    /// First iteration whose energy is within `fraction` of the total
    /// decrease from the final energy: `E_t - E_final <= fraction * (E_0 - E_final)`.
    pub fn iterations_to_fraction(&self, fraction: f64) -> usize {
        let e0 = self.energy_trace[0];
        let ef = self.final_energy();
        let target = ef + fraction * (e0 - ef);
        self.energy_trace.iter().position(|&e| e <= target).unwrap_or(self.iterations_used)
    }
}

struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    fn new(problem: &ArapProblem, cfg: &SolverConfig) -> Self {
        let lo = problem
            .ref_depths
            .iter()
            .map(|&d| {
                if cfg.use_isometry_box {
                    (d - cfg.d_sigma).max(cfg.depth_floor)
                } else {
                    cfg.depth_floor
                }
            })
            .collect::<Vec<_>>();
        let hi = problem
            .ref_depths
            .iter()
            .zip(&lo)
            .map(|(&d, &l)| if cfg.use_isometry_box { (d + cfg.d_sigma).max(l) } else { f64::INFINITY })
            .collect();
        Self { lo, hi }
    }

    #[inline]
    fn clamp(&self, i: usize, x: f64) -> f64 {
        x.max(self.lo[i]).min(self.hi[i])
    }
}

struct Timer {
    #[cfg(feature = "std")]
    start: std::time::Instant,
}

impl Timer {
    fn start() -> Self {
        Self {
            #[cfg(feature = "std")]
            start: std::time::Instant::now(),
        }
    }

    fn elapsed(&self) -> Duration {
        #[cfg(feature = "std")]
        {
            self.start.elapsed()
        }
        #[cfg(not(feature = "std"))]
        {
            Duration::ZERO
        }
    }
}

/// Smoothing levels visited by the solver, ending at the problem's eps.
pub fn smoothing_schedule(problem: &ArapProblem, cfg: &SolverConfig) -> Vec<f64> {
    let target = problem.eps;
    let mut levels = Vec::new();
    if cfg.continuation {
        let mut e = cfg.continuation_start * problem.mean_edge_length();
        while e > target {
            levels.push(e);
            e *= cfg.continuation_factor;
        }
    }
    levels.push(target);
    levels
}

/// Minimises the ARAP energy from `init` (projected into the feasible box)
/// by projected gradient descent with Armijo backtracking.
///
/// With continuation enabled the descent directions and Armijo test use a
/// more strongly smoothed energy in early stages, but a step is only taken
/// if it also does not increase the target energy; the recorded energy
/// trace is always the target energy. The iteration budget is split evenly
/// over the stages, the last stage also receiving whatever earlier stages
/// left unused. Points flagged invalid keep their projected initial value.
pub fn solve_arap(problem: &ArapProblem, init: &[f64], cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.validate()?;
    problem.check(init)?;
    let timer = Timer::start();
    let bounds = Bounds::new(problem, cfg);
    let n = problem.len();
    let schedule = smoothing_schedule(problem, cfg);

    let mut x: Vec<f64> = init
        .iter()
        .enumerate()
        .map(|(i, &v)| if v.is_finite() { bounds.clamp(i, v) } else { problem.ref_depths[i] })
        .collect();
    let mut f_target = problem.energy_with(&x, problem.eps);
    if !f_target.is_finite() {
        return Err(Error::NumericalFailure { iteration: 0 });
    }

    let pgrad = |x: &[f64], g: &[f64]| -> f64 {
        (0..n).map(|i| (x[i] - bounds.clamp(i, x[i] - g[i])).powi(2)).sum::<f64>().sqrt()
    };
    let masked_grad = |x: &[f64], eps: f64| -> (f64, Vec<f64>) {
        let (f, mut g) = problem.energy_and_gradient_with(x, eps);
        for (i, gi) in g.iter_mut().enumerate() {
            if !problem.valid[i] {
                *gi = 0.0;
            }
        }
        (f, g)
    };

    let mut report = SolveReport {
        final_depths: Vec::new(),
        energy_trace: vec![f_target],
        step_trace: vec![0.0],
        pgrad_trace: Vec::new(),
        iterations_used: 0,
        converged: false,
        wall_time: Duration::ZERO,
    };

    let stage_budget = cfg.max_iterations.div_ceil(schedule.len());
    let mut trial = vec![0.0; n];
    let mut iter = 0;
    for (stage, &eps) in schedule.iter().enumerate() {
        let last = stage + 1 == schedule.len();
        let budget_end = if last { cfg.max_iterations } else { (iter + stage_budget).min(cfg.max_iterations) };
        let (mut f, mut g) = masked_grad(&x, eps);
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure { iteration: iter });
        }
        let mut pg = pgrad(&x, &g);
        if stage == 0 {
            report.pgrad_trace.push(pg);
        }
        let mut step = cfg.initial_step;
        let mut stage_converged = false;
        while iter < budget_end {
            if pg < cfg.gradient_tolerance {
                stage_converged = true;
                break;
            }
            let mut alpha = step;
            let accepted = loop {
                let mut decrease = 0.0;
                let mut moved = false;
                for i in 0..n {
                    trial[i] = bounds.clamp(i, x[i] - alpha * g[i]);
                    let d = trial[i] - x[i];
                    moved |= d != 0.0;
                    decrease += g[i] * d;
                }
                if !moved {
                    break None;
                }
                let ft = problem.energy_with(&trial, eps);
                if !ft.is_finite() {
                    return Err(Error::NumericalFailure { iteration: iter + 1 });
                }
                if ft <= f + cfg.armijo_c * decrease && ft <= f {
                    let target = if last { ft } else { problem.energy_with(&trial, problem.eps) };
                    if target <= f_target {
                        break Some((ft, target));
                    }
                }
                alpha *= 0.5;
                if alpha < cfg.min_step {
                    break None;
                }
            };
            // no acceptable descent at representable step lengths
            let Some((f_new, target_new)) = accepted else { break };
            iter += 1;

            let (_, g_new) = masked_grad(&trial, eps);
            if g_new.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure { iteration: iter });
            }
            step = if cfg.spectral_steps {
                let (mut ss, mut sy) = (0.0, 0.0);
                for i in 0..n {
                    let s = trial[i] - x[i];
                    ss += s * s;
                    sy += s * (g_new[i] - g[i]);
                }
                if sy > 0.0 {
                    (ss / sy).clamp(1e-12, 1e12)
                } else {
                    (alpha * 2.0).min(1e12)
                }
            } else {
                (alpha * 2.0).min(1e12)
            };

            core::mem::swap(&mut x, &mut trial);
            g = g_new;
            f = f_new;
            f_target = target_new;
            pg = pgrad(&x, &g);
            report.energy_trace.push(f_target);
            report.step_trace.push(alpha);
            report.pgrad_trace.push(pg);
            report.iterations_used = iter;
        }
        if last {
            report.converged = stage_converged || pg < cfg.gradient_tolerance;
        }
    }
    report.final_depths = x;
    report.wall_time = timer.elapsed();
    Ok(report)
}

/// Random ARAP instance for gradient checks: `points` rays in a 60° cone,
/// depths in `[1, 10]`, each point linked to up to five random others.
/// Returns the problem and a random evaluation point.
pub fn random_instance(seed: u64, points: usize, eps: f64) -> Result<(ArapProblem, Vec<f64>)> {
    if points < 2 {
        return Err(Error::Domain("a random instance needs at least two points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ray = |rng: &mut ChaCha8Rng| {
        let x: f64 = rng.random_range(-0.6..0.6);
        let y: f64 = rng.random_range(-0.6..0.6);
        UnitRay::new(Vec3::new(x, y, 1.0))
    };
    let mut ref_rays = Vec::with_capacity(points);
    let mut next_rays = Vec::with_capacity(points);
    for _ in 0..points {
        ref_rays.push(ray(&mut rng)?);
        next_rays.push(ray(&mut rng)?);
    }
    let ref_depths: Vec<f64> = (0..points).map(|_| rng.random_range(1.0..10.0)).collect();
    let at: Vec<f64> = (0..points).map(|_| rng.random_range(1.0..10.0)).collect();
    let mut edges = Vec::new();
    for a in 0..points {
        for _ in 0..5.min(points - 1) {
            let mut b = rng.random_range(0..points - 1);
            if b >= a {
                b += 1;
            }
            edges.push(PointEdge { a, b, weight: rng.random_range(0.1..1.0) });
        }
    }
    let problem = ArapProblem::new(ref_depths, ref_rays, next_rays, vec![true; points], edges, eps)?;
    Ok((problem, at))
}

/// Worst relative error `|g - g_fd| / |g_fd|` between the analytic gradient
/// and central differences with step `h`, over `instances` random instances
/// seeded `seed, seed + 1, ...`.
pub fn gradient_check(seed: u64, instances: usize, points: usize, h: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for s in 0..instances as u64 {
        let (p, x) = random_instance(seed.wrapping_add(s), points, DEFAULT_EPS)?;
        let g = p.gradient(&x)?;
        let mut diff = 0.0;
        let mut norm = 0.0;
        let mut probe = x.clone();
        for i in 0..x.len() {
            probe[i] = x[i] + h;
            let fp = p.energy(&probe)?;
            probe[i] = x[i] - h;
            let fm = p.energy(&probe)?;
            probe[i] = x[i];
            let fd = (fp - fm) / (2.0 * h);
            diff += (g[i] - fd) * (g[i] - fd);
            norm += fd * fd;
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::build_knn_graph;
    use rand::Rng;
    use proptest::prelude::*;

    fn ray(x: f64, y: f64, z: f64) -> UnitRay {
        UnitRay::new(Vec3::new(x, y, z)).unwrap()
    }

    fn triples(n: usize) -> Vec<AnchorTriple> {
        (0..n)
            .map(|i| AnchorTriple { superpixel: i, anchor: (4 * i, 0), p1: (4 * i + 1, 0), p2: (4 * i, 1) })
            .collect()
    }

    fn central_diff(p: &ArapProblem, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (p.energy(&xp).unwrap() - p.energy(&xm).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        diff / scale
    }

    #[test]
    fn continuation_schedule_ends_at_target() {
        let (p, _) = random_instance(3, 20, 1e-6).unwrap();
        let cfg = SolverConfig::default();
        let levels = smoothing_schedule(&p, &cfg);
        assert_eq!(*levels.last().unwrap(), 1e-6);
        assert!(levels.windows(2).all(|w| w[1] < w[0]));
        assert!((levels[0] - 1e-2 * p.mean_edge_length()).abs() < 1e-15);
        let off = SolverConfig { continuation: false, ..cfg };
        assert_eq!(smoothing_schedule(&p, &off), vec![1e-6]);
        assert!(SolverConfig { continuation_factor: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn continuation_trace_is_target_energy_and_monotone() {
        let (p, init) = random_instance(8, 30, 1e-6).unwrap();
        let r = solve_arap(&p, &init, &SolverConfig::default()).unwrap();
        // the trace starts at the box-projected initial point
        assert!(r.energy_trace[0] <= p.energy(&init).unwrap());
        assert_eq!(r.final_energy(), p.energy(&r.final_depths).unwrap());
        assert!(r.energy_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.energy_trace.len(), r.iterations_used + 1);
        assert_eq!(r.pgrad_trace.len(), r.energy_trace.len());
    }

    #[test]
    fn expansion_counts() {
        let g = build_knn_graph(&triples(2), 1, None).unwrap();
        assert_eq!(expand_graph_to_points(&g, &triples(2)).unwrap().len(), 24);

        let g = build_knn_graph(&triples(1), 1, None).unwrap();
        assert_eq!(g.k, 0);
        let e = expand_graph_to_points(&g, &triples(1)).unwrap();
        assert_eq!(e.len(), 3);
        assert!(e.iter().all(|e| e.weight == 1.0));

        for (n, k) in [(5, 2), (7, 3), (10, 9)] {
            let g = build_knn_graph(&triples(n), k, None).unwrap();
            assert_eq!(expand_graph_to_points(&g, &triples(n)).unwrap().len(), 9 * n * k + 3 * n);
        }
        assert!(expand_graph_to_points(&g, &triples(3)).is_err());
    }

    #[test]
    fn warp_examples() {
        let k = CameraIntrinsics::identity();
        let px = [[10.0, 10.0], [3.0, 4.0]];
        let (rays, ok) = warp_to_next_rays(&px, &FlowField::zeros(20, 20).unwrap(), &k).unwrap();
        assert_eq!(ok, vec![true, true]);
        assert_eq!(rays[0], geometry::backproject_ray(&k, [10.0, 10.0]).unwrap());

        let (rays, ok) = warp_to_next_rays(&px[..1], &FlowField::uniform(20, 20, 5.0, 0.0).unwrap(), &k).unwrap();
        assert!(ok[0]);
        assert_eq!(rays[0], geometry::backproject_ray(&k, [15.0, 10.0]).unwrap());

        let flow = FlowField::uniform(20, 20, -13.0, -3.0).unwrap();
        let (_, ok) = warp_to_next_rays(&px[..1], &flow, &k).unwrap();
        assert_eq!(ok, vec![false]);
    }

    #[test]
    fn energy_two_points() {
        let rays = vec![ray(0.0, 0.0, 1.0), ray(0.6, 0.0, 0.8)];
        let p = ArapProblem::new(
            vec![1.0, 1.0],
            rays.clone(),
            rays.clone(),
            vec![true; 2],
            vec![PointEdge { a: 0, b: 1, weight: 1.0 }],
            1e-14,
        )
        .unwrap();
        assert!((p.energy(&[2.0, 2.0]).unwrap() - 0.4f64.sqrt()).abs() < 1e-12);
        assert!((p.energy(&[2.0, 2.0]).unwrap() - 0.63246).abs() < 1e-5);
        assert!(p.energy(&[1.0, 1.0]).unwrap().abs() < 1e-12);
        assert!(p.energy(&[1.0]).is_err());
    }

    #[test]
    fn rigid_motion_has_zero_energy_and_gradient() {
        // points on a small cloud, moved by a rotation about y plus translation
        let pts = [
            Vec3::new(0.0, 0.0, 5.0),
            Vec3::new(1.0, 0.2, 6.0),
            Vec3::new(-0.5, 0.8, 4.5),
            Vec3::new(0.3, -0.9, 5.5),
        ];
        let (s, c) = (0.1f64.sin(), 0.1f64.cos());
        let moved: Vec<Vec3> = pts
            .iter()
            .map(|p| Vec3::new(c * p.x + s * p.z + 0.2, p.y - 0.1, -s * p.x + c * p.z + 0.3))
            .collect();
        let mut edges = Vec::new();
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    edges.push(PointEdge { a, b, weight: 0.5 });
                }
            }
        }
        let p = ArapProblem::new(
            pts.iter().map(|p| p.norm()).collect(),
            pts.iter().map(|p| UnitRay::new(*p).unwrap()).collect(),
            moved.iter().map(|p| UnitRay::new(*p).unwrap()).collect(),
            vec![true; 4],
            edges,
            1e-6,
        )
        .unwrap();
        let truth: Vec<f64> = moved.iter().map(|p| p.norm()).collect();
        let (e, g) = p.energy_and_gradient(&truth).unwrap();
        assert!(e < 1e-9);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8);
    }

    #[test]
    fn single_edge_gradient_closed_form() {
        // one edge: E = phi(L - sqrt(a^2 + b^2 - 2ab c)); dE/da by hand
        let (ea, eb) = (ray(0.1, 0.0, 1.0), ray(-0.2, 0.3, 1.0));
        let p = ArapProblem::new(
            vec![2.0, 3.0],
            vec![ray(0.0, 0.0, 1.0), ray(0.5, 0.0, 1.0)],
            vec![ea, eb],
            vec![true; 2],
            vec![PointEdge { a: 0, b: 1, weight: 0.7 }],
            1e-6,
        )
        .unwrap();
        let (a, b) = (2.5, 3.5);
        let cos = ea.dir().dot(eb.dir());
        let big_l = (ray(0.0, 0.0, 1.0).dir() * 2.0 - ray(0.5, 0.0, 1.0).dir() * 3.0).norm();
        let small_l = (a * a + b * b - 2.0 * a * b * cos).sqrt();
        let x = big_l - small_l;
        let dphi = x / (x * x + 1e-12).sqrt();
        let ga = 0.7 * dphi * -((a - b * cos) / small_l);
        let gb = 0.7 * dphi * -((b - a * cos) / small_l);
        let g = p.gradient(&[a, b]).unwrap();
        assert!((g[0] - ga).abs() < 1e-12);
        assert!((g[1] - gb).abs() < 1e-12);
    }

    #[test]
    fn gradient_check_reports_small_error() {
        assert!(gradient_check(100, 5, 20, 1e-6).unwrap() < 1e-5);
        assert!(gradient_check(0, 1, 1, 1e-6).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let (p, x) = random_instance(seed, 20, 1e-6).unwrap();
            let g = p.gradient(&x).unwrap();
            let fd = central_diff(&p, &x, 1e-6);
            assert!(rel_err(&g, &fd) < 1e-5, "seed {}: {}", seed, rel_err(&g, &fd));
        }
    }

    #[test]
    fn invalid_points_excluded() {
        let (p, x) = random_instance(3, 12, 1e-6).unwrap();
        let mut valid = vec![true; 12];
        valid[4] = false;
        let q = ArapProblem::new(
            p.ref_depths().to_vec(),
            p.ref_rays().to_vec(),
            p.next_rays().to_vec(),
            valid,
            p.edges().to_vec(),
            1e-6,
        )
        .unwrap();
        let kept: Vec<PointEdge> = p.edges().iter().copied().filter(|e| e.a != 4 && e.b != 4).collect();
        let r = ArapProblem::new(
            p.ref_depths().to_vec(),
            p.ref_rays().to_vec(),
            p.next_rays().to_vec(),
            vec![true; 12],
            kept,
            1e-6,
        )
        .unwrap();
        assert_eq!(q.energy(&x).unwrap(), r.energy(&x).unwrap());
        let mut y = x.clone();
        y[4] += 3.0;
        assert_eq!(q.energy(&y).unwrap(), q.energy(&x).unwrap());
        let rep = solve_arap(&q, &x, &SolverConfig { max_iterations: 50, ..Default::default() }).unwrap();
        assert_eq!(rep.final_depths[4], x[4].clamp(p.ref_depths()[4] - 1.0, p.ref_depths()[4] + 1.0));
    }

    #[test]
    fn zero_box_rejected() {
        let (p, x) = random_instance(1, 5, 1e-6).unwrap();
        let cfg = SolverConfig { d_sigma: 0.0, use_isometry_box: true, ..Default::default() };
        assert!(matches!(solve_arap(&p, &x, &cfg), Err(Error::Domain(_))));
        let cfg = SolverConfig { d_sigma: 0.0, use_isometry_box: false, ..Default::default() };
        assert!(solve_arap(&p, &x, &cfg).is_ok());
    }

    #[test]
    fn solve_respects_box_and_descends() {
        for seed in 0..10 {
            let (p, _) = random_instance(seed, 15, 1e-6).unwrap();
            let init = p.ref_depths().to_vec();
            for use_box in [true, false] {
                let cfg = SolverConfig { use_isometry_box: use_box, max_iterations: 300, ..Default::default() };
                let rep = solve_arap(&p, &init, &cfg).unwrap();
                for w in rep.energy_trace.windows(2) {
                    assert!(w[1] <= w[0]);
                }
                for (d, r) in rep.final_depths.iter().zip(p.ref_depths()) {
                    assert!(*d >= cfg.depth_floor);
                    if use_box {
                        assert!((d - r).abs() <= cfg.d_sigma);
                    }
                }
            }
        }
    }

    #[test]
    fn solve_recovers_rigid_configuration() {
        // random cloud moved rigidly, fully connected graph
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..12)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(5.0..8.0),
                )
            })
            .collect();
        let (s, c) = (0.05f64.sin(), 0.05f64.cos());
        let moved: Vec<Vec3> = pts
            .iter()
            .map(|p| Vec3::new(c * p.x - s * p.y + 0.1, s * p.x + c * p.y, p.z + 0.2))
            .collect();
        let mut edges = Vec::new();
        for a in 0..12 {
            for b in 0..12 {
                if a != b {
                    edges.push(PointEdge { a, b, weight: 1.0 });
                }
            }
        }
        let p = ArapProblem::new(
            pts.iter().map(|p| p.norm()).collect(),
            pts.iter().map(|p| UnitRay::new(*p).unwrap()).collect(),
            moved.iter().map(|p| UnitRay::new(*p).unwrap()).collect(),
            vec![true; 12],
            edges,
            1e-6,
        )
        .unwrap();
        let rep = solve_arap(&p, p.ref_depths(), &SolverConfig::default()).unwrap();
        for (d, m) in rep.final_depths.iter().zip(&moved) {
            assert!((d - m.norm()).abs() / m.norm() < 1e-3, "{} vs {}", d, m.norm());
        }
    }

    proptest! {
        #[test]
        fn energy_nonnegative_and_scale_covariant(seed in 0u64..1000, s in 0.1f64..10.0) {
            let (p, x) = random_instance(seed, 8, 1e-15).unwrap();
            let e = p.energy(&x).unwrap();
            prop_assert!(e >= 0.0);
            let scaled = ArapProblem::new(
                p.ref_depths().iter().map(|d| d * s).collect(),
                p.ref_rays().to_vec(),
                p.next_rays().to_vec(),
                p.valid().to_vec(),
                p.edges().to_vec(),
                1e-15,
            ).unwrap();
            let xs: Vec<f64> = x.iter().map(|d| d * s).collect();
            let es = scaled.energy(&xs).unwrap();
            prop_assert!((es - s * e).abs() <= 1e-9 * (1.0 + s * e));
        }

        #[test]
        fn energy_invariant_under_relabelling(seed in 0u64..1000, rot in 1usize..7) {
            let (p, x) = random_instance(seed, 8, 1e-6).unwrap();
            let n = p.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let mut inv = vec![0; n];
            for (i, &j) in perm.iter().enumerate() { inv[j] = i; }
            let pick = |v: &[UnitRay]| (0..n).map(|i| v[perm[i]]).collect::<Vec<_>>();
            let q = ArapProblem::new(
                (0..n).map(|i| p.ref_depths()[perm[i]]).collect(),
                pick(p.ref_rays()),
                pick(p.next_rays()),
                vec![true; n],
                p.edges().iter().map(|e| PointEdge { a: inv[e.a], b: inv[e.b], weight: e.weight }).collect(),
                1e-6,
            ).unwrap();
            let xq: Vec<f64> = (0..n).map(|i| x[perm[i]]).collect();
            let (ep, eq) = (p.energy(&x).unwrap(), q.energy(&xq).unwrap());
            prop_assert!((ep - eq).abs() <= 1e-12 * (1.0 + ep));
        }
    }
}
