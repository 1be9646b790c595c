//! Scene directories and the parameter-sweep / error-accumulation studies.

use std::path::{Path, PathBuf};
use std::time::Instant;

use arapdepth_core::eval::{self, add_depth_noise};
use arapdepth_core::pipeline::{propagate_depth, PipelineConfig, SceneFrame};
use arapdepth_core::synth::SyntheticScene;
use arapdepth_core::{CameraIntrinsics, DepthMap, FlowField};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::io::{self, BitDepth, DepthConvention};
use crate::table::Table;

pub const FRAMES_LIST: &str = "frames.txt";
pub const DEPTHS_LIST: &str = "depths.txt";
pub const FLOWS_LIST: &str = "flows.txt";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";

/// Fraction of the total energy decrease used for convergence counts.
pub const CONVERGENCE_FRACTION: f64 = 0.01;

/// Reads a list file: one path per non-empty line, relative paths resolved
/// against the list file's directory.
pub fn read_list(path: &Path) -> AppResult<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(|l| base.join(l)).collect())
}

fn write_list(path: &Path, names: &[String]) -> AppResult<()> {
    let text: String = names.iter().map(|n| format!("{n}\n")).collect();
    std::fs::write(path, text).map_err(|e| AppError::io(path, e))
}

/// Writes a generated scene as 16-bit PPM frames, PFM depths (in the given
/// convention), `.flo` flows, intrinsics and list files. Returns the
/// written paths.
pub fn write_scene(dir: &Path, scene: &SyntheticScene, convention: DepthConvention) -> AppResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let k = &scene.intrinsics;
    let mut written = Vec::new();
    let (mut frames, mut depths, mut flows) = (Vec::new(), Vec::new(), Vec::new());
    for (t, img) in scene.images.iter().enumerate() {
        let name = format!("frame_{t:03}.ppm");
        io::write_image(&dir.join(&name), img, BitDepth::Sixteen)?;
        frames.push(name);
        let name = format!("depth_{t:03}.pfm");
        io::write_depth(&dir.join(&name), &scene.depths[t], convention, k)?;
        depths.push(name);
    }
    for (t, flow) in scene.flows.iter().enumerate() {
        let name = format!("flow_{t:03}.flo");
        io::write_flo(&dir.join(&name), flow)?;
        flows.push(name);
    }
    for n in frames.iter().chain(&depths).chain(&flows) {
        written.push(dir.join(n));
    }
    io::write_intrinsics(&dir.join(INTRINSICS_FILE), k)?;
    write_list(&dir.join(FRAMES_LIST), &frames)?;
    write_list(&dir.join(DEPTHS_LIST), &depths)?;
    write_list(&dir.join(FLOWS_LIST), &flows)?;
    for n in [INTRINSICS_FILE, FRAMES_LIST, DEPTHS_LIST, FLOWS_LIST] {
        written.push(dir.join(n));
    }
    Ok(written)
}

/// A scene read back from disk: every frame carries its ground-truth depth.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub frames: Vec<SceneFrame>,
    pub flows: Vec<FlowField>,
    pub intrinsics: CameraIntrinsics,
    pub files: Vec<PathBuf>,
}

impl LoadedScene {
    /// Wraps a generated scene without going through files.
    pub fn from_synthetic(scene: &SyntheticScene) -> Self {
        let frames = scene
            .images
            .iter()
            .zip(&scene.depths)
            .map(|(image, depth)| SceneFrame { image: image.clone(), depth: Some(depth.clone()), intrinsics: scene.intrinsics })
            .collect();
        Self { frames, flows: scene.flows.clone(), intrinsics: scene.intrinsics, files: Vec::new() }
    }

    pub fn truth(&self, t: usize) -> &DepthMap {
        self.frames[t].depth.as_ref().expect("loaded scenes carry depth")
    }
}

pub fn load_scene(dir: &Path, convention: DepthConvention) -> AppResult<LoadedScene> {
    let k = io::read_intrinsics(&dir.join(INTRINSICS_FILE))?;
    let frame_paths = read_list(&dir.join(FRAMES_LIST))?;
    let depth_paths = read_list(&dir.join(DEPTHS_LIST))?;
    let flow_paths = read_list(&dir.join(FLOWS_LIST))?;
    if depth_paths.len() != frame_paths.len() || flow_paths.len() + 1 != frame_paths.len() {
        return Err(AppError::Config(format!(
            "{}: need F frames, F depths and F-1 flows, found {}, {}, {}",
            dir.display(),
            frame_paths.len(),
            depth_paths.len(),
            flow_paths.len()
        )));
    }
    let frames = frame_paths
        .iter()
        .zip(&depth_paths)
        .map(|(f, d)| {
            Ok(SceneFrame { image: io::read_image(f)?, depth: Some(io::read_depth(d, convention, &k)?), intrinsics: k })
        })
        .collect::<AppResult<Vec<_>>>()?;
    let flows = flow_paths.iter().map(|p| io::read_flo(p)).collect::<AppResult<Vec<_>>>()?;
    let mut files = vec![dir.join(INTRINSICS_FILE)];
    files.extend(frame_paths.into_iter().chain(depth_paths).chain(flow_paths));
    Ok(LoadedScene { frames, flows, intrinsics: k, files })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    SuperpixelCount,
    KnnK,
    DSigma,
    NoisePercent,
}

impl std::str::FromStr for SweepParameter {
    type Err = AppError;
    fn from_str(s: &str) -> AppResult<Self> {
        Ok(match s {
            "superpixel_count" => SweepParameter::SuperpixelCount,
            "knn_k" => SweepParameter::KnnK,
            "d_sigma" => SweepParameter::DSigma,
            "noise_percent" => SweepParameter::NoisePercent,
            _ => {
                return Err(AppError::Config(format!(
                    "unknown sweep parameter '{s}' (expected superpixel_count, knn_k, d_sigma or noise_percent)"
                )))
            }
        })
    }
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::SuperpixelCount => "superpixel_count",
            SweepParameter::KnnK => "knn_k",
            SweepParameter::DSigma => "d_sigma",
            SweepParameter::NoisePercent => "noise_percent",
        }
    }

    /// Applies one sweep value; `d_sigma = inf` disables the isometry box.
    fn apply(self, cfg: &mut PipelineConfig, value: f64) -> AppResult<()> {
        let count = |v: f64| {
            if v >= 1.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(AppError::Config(format!("{} must be a positive integer, got {v}", self.name())))
            }
        };
        match self {
            SweepParameter::SuperpixelCount => cfg.superpixels = count(value)?,
            SweepParameter::KnnK => cfg.knn = count(value)?,
            SweepParameter::DSigma if value == f64::INFINITY => cfg.solver.use_isometry_box = false,
            SweepParameter::DSigma => {
                cfg.solver.use_isometry_box = true;
                cfg.solver.d_sigma = value;
            }
            SweepParameter::NoisePercent => {}
        }
        Ok(())
    }
}

/// Outcome of one pipeline run inside a study.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub mre: f64,
    pub iterations_to_converge: usize,
    pub iterations: usize,
    pub final_energy: f64,
    pub seconds: f64,
}

/// Propagates frame 0 of the scene to frame 1 with the given settings and
/// evaluates against frame 1's ground truth.
pub fn run_once(
    scene: &LoadedScene,
    cfg: &PipelineConfig,
    noise_percent: f64,
    seed: u64,
    eval_cap: Option<f64>,
) -> AppResult<RunOutcome> {
    let mut reference = scene.frames[0].clone();
    let truth0 = scene.truth(0);
    reference.depth = Some(add_depth_noise(truth0, noise_percent, seed, cfg.solver.depth_floor)?);
    let mut cfg = cfg.clone();
    cfg.refine.random_seed = seed;
    let start = Instant::now();
    let r = propagate_depth(&reference, &scene.frames[1].image, &scene.flows[0], &cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let mre = eval::mre(&r.next_depth, scene.truth(1), eval_cap)?.mre;
    Ok(RunOutcome {
        mre,
        iterations_to_converge: r.solve_report.iterations_to_fraction(CONVERGENCE_FRACTION),
        iterations: r.solve_report.iterations_used,
        final_energy: r.solve_report.final_energy(),
        seconds,
    })
}

/// Sweeps one parameter. Each value is run `repetitions` times with seeds
/// `base.seed + r`; columns are averaged over repetitions. Rows are sorted
/// by value. The wall-time column is only added with `timing`, since it
/// is the one output that is not reproducible.
pub fn run_sweep(
    parameter: SweepParameter,
    values: &[f64],
    base: &RunConfig,
    scene: &LoadedScene,
    repetitions: usize,
    timing: bool,
) -> AppResult<Table> {
    if repetitions == 0 {
        return Err(AppError::Config("repetitions must be at least 1".into()));
    }
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return Err(AppError::Config("sweep needs at least one numeric value".into()));
    }
    if scene.frames.len() < 2 {
        return Err(AppError::Config("sweep needs a scene with at least two frames".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);

    let jobs: Vec<(usize, usize)> = (0..sorted.len()).flat_map(|i| (0..repetitions).map(move |r| (i, r))).collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(i, r)| {
            let value = sorted[i];
            let at = |e: AppError| e.context(format!("sweep {}={value}, repetition {r}", parameter.name()));
            let mut cfg = base.pipeline();
            parameter.apply(&mut cfg, value).map_err(at)?;
            let noise = if parameter == SweepParameter::NoisePercent { value } else { 0.0 };
            run_once(scene, &cfg, noise, base.seed.wrapping_add(r as u64), base.eval_cap()).map_err(at)
        })
        .collect::<AppResult<Vec<_>>>()?;

    let mut header = vec![parameter.name(), "mre", "iterations_to_1pct", "iterations", "final_energy"];
    if timing {
        header.extend(["wall_time_s", "seconds_per_iteration"]);
    }
    let mut table = Table::new(header);
    for (i, &value) in sorted.iter().enumerate() {
        let runs = &outcomes[i * repetitions..(i + 1) * repetitions];
        let mean = |f: &dyn Fn(&RunOutcome) -> f64| runs.iter().map(f).sum::<f64>() / repetitions as f64;
        let mut row = vec![
            value,
            mean(&|o| o.mre),
            mean(&|o| o.iterations_to_converge as f64),
            mean(&|o| o.iterations as f64),
            mean(&|o| o.final_energy),
        ];
        if timing {
            row.push(mean(&|o| o.seconds));
            row.push(mean(&|o| o.seconds / o.iterations.max(1) as f64));
        }
        table.push(row);
    }
    Ok(table)
}

/// Frame index, MRE and first difference per evaluated frame.
pub fn accumulation_table(per_frame: &[(usize, f64)]) -> AppResult<Table> {
    let mut table = Table::new(["frame", "mre", "first_difference"]);
    for (f, m, d) in eval::error_accumulation(per_frame)? {
        table.push(vec![f as f64, m, d]);
    }
    Ok(table)
}
