//! Line-oriented `key=value` configuration files.
//!
//! Every tunable of the pipeline has exactly one key; command-line flags
//! use the same names. Absent keys keep their defaults, unknown keys are
//! an error. Floats are written in shortest round-trip form, so writing
//! and re-reading a configuration is value-exact.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use arapdepth_core::pipeline::PipelineConfig;
use arapdepth_core::synth::SceneSpec;

use crate::error::{AppError, AppResult};
use crate::io::DepthConvention;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    /// Seeds refinement particles and noise injection.
    pub seed: u64,
    pub depth_convention: DepthConvention,
    /// Enables the evaluation depth cap.
    pub kitti_like: bool,
    pub eval_cap: f64,
    pub repetitions: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            seed: 0,
            depth_convention: DepthConvention::Range,
            kitti_like: false,
            eval_cap: 50.0,
            repetitions: 10,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.trim().parse().map_err(|_| format!("invalid value '{value}' for key '{key}'"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("invalid value '{value}' for key '{key}' (expected true or false)")),
    }
}

/// Types with a fixed set of textual keys.
pub trait KeyValue: Default {
    const KEYS: &'static [&'static str];
    fn get(&self, key: &str) -> Option<String>;
    fn set(&mut self, key: &str, value: &str) -> Result<(), String>;

    fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k}={}\n", self.get(k).expect("listed key"))).collect()
    }

    fn from_text(text: &str, path: &Path) -> AppResult<Self> {
        let mut out = Self::default();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let at = offset;
            offset += line.len() as u64;
            let body = line.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let (key, value) =
                body.split_once('=').ok_or_else(|| AppError::parse(path, at, format!("expected key=value, found '{body}'")))?;
            out.set(key.trim(), value).map_err(|m| AppError::parse(path, at, m))?;
        }
        Ok(out)
    }

    fn read(path: &Path) -> AppResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::from_text(&text, path)
    }

    fn write(&self, path: &Path) -> AppResult<()> {
        fs::write(path, self.to_text()).map_err(|e| AppError::io(path, e))
    }
}

fn show<T: Display>(v: T) -> Option<String> {
    Some(v.to_string())
}

impl KeyValue for RunConfig {
    const KEYS: &'static [&'static str] = &[
        "superpixels",
        "compactness",
        "knn",
        "knn_tau",
        "beta",
        "smoothing_eps",
        "max_iterations",
        "gradient_tolerance",
        "use_isometry_box",
        "d_sigma",
        "depth_floor",
        "armijo_c",
        "initial_step",
        "spectral_steps",
        "min_step",
        "continuation",
        "continuation_start",
        "continuation_factor",
        "lambda1",
        "sigma1",
        "sigma2",
        "particles_per_move",
        "moves",
        "perturb_sigma_normal",
        "perturb_sigma_depth",
        "unary_weight",
        "trws_max_passes",
        "trws_tolerance",
        "skip_refine",
        "seed",
        "depth_convention",
        "kitti_like",
        "eval_cap",
        "repetitions",
    ];

    fn get(&self, key: &str) -> Option<String> {
        let p = &self.pipeline;
        let (s, r) = (&p.solver, &p.refine);
        match key {
            "superpixels" => show(p.superpixels),
            "compactness" => show(p.compactness),
            "knn" => show(p.knn),
            "knn_tau" => Some(p.knn_tau.map_or_else(|| "auto".to_string(), |t| t.to_string())),
            "beta" => show(p.beta),
            "smoothing_eps" => show(p.smoothing_eps),
            "max_iterations" => show(s.max_iterations),
            "gradient_tolerance" => show(s.gradient_tolerance),
            "use_isometry_box" => show(s.use_isometry_box),
            "d_sigma" => show(s.d_sigma),
            "depth_floor" => show(s.depth_floor),
            "armijo_c" => show(s.armijo_c),
            "initial_step" => show(s.initial_step),
            "spectral_steps" => show(s.spectral_steps),
            "min_step" => show(s.min_step),
            "continuation" => show(s.continuation),
            "continuation_start" => show(s.continuation_start),
            "continuation_factor" => show(s.continuation_factor),
            "lambda1" => show(r.lambda1),
            "sigma1" => show(r.sigma1),
            "sigma2" => show(r.sigma2),
            "particles_per_move" => show(r.particles_per_move),
            "moves" => show(r.moves),
            "perturb_sigma_normal" => show(r.perturb_sigma_normal),
            "perturb_sigma_depth" => show(r.perturb_sigma_depth),
            "unary_weight" => show(r.unary_weight),
            "trws_max_passes" => show(r.trws_max_passes),
            "trws_tolerance" => show(r.trws_tolerance),
            "skip_refine" => show(p.skip_refine),
            "seed" => show(self.seed),
            "depth_convention" => show(self.depth_convention),
            "kitti_like" => show(self.kitti_like),
            "eval_cap" => show(self.eval_cap),
            "repetitions" => show(self.repetitions),
            _ => None,
        }
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let p = &mut self.pipeline;
        match key {
            "superpixels" => p.superpixels = parse(key, v)?,
            "compactness" => p.compactness = parse(key, v)?,
            "knn" => p.knn = parse(key, v)?,
            "knn_tau" => p.knn_tau = if v.trim() == "auto" { None } else { Some(parse(key, v)?) },
            "beta" => p.beta = parse(key, v)?,
            "smoothing_eps" => p.smoothing_eps = parse(key, v)?,
            "max_iterations" => p.solver.max_iterations = parse(key, v)?,
            "gradient_tolerance" => p.solver.gradient_tolerance = parse(key, v)?,
            "use_isometry_box" => p.solver.use_isometry_box = parse_bool(key, v)?,
            "d_sigma" => p.solver.d_sigma = parse(key, v)?,
            "depth_floor" => p.solver.depth_floor = parse(key, v)?,
            "armijo_c" => p.solver.armijo_c = parse(key, v)?,
            "initial_step" => p.solver.initial_step = parse(key, v)?,
            "spectral_steps" => p.solver.spectral_steps = parse_bool(key, v)?,
            "min_step" => p.solver.min_step = parse(key, v)?,
            "continuation" => p.solver.continuation = parse_bool(key, v)?,
            "continuation_start" => p.solver.continuation_start = parse(key, v)?,
            "continuation_factor" => p.solver.continuation_factor = parse(key, v)?,
            "lambda1" => p.refine.lambda1 = parse(key, v)?,
            "sigma1" => p.refine.sigma1 = parse(key, v)?,
            "sigma2" => p.refine.sigma2 = parse(key, v)?,
            "particles_per_move" => p.refine.particles_per_move = parse(key, v)?,
            "moves" => p.refine.moves = parse(key, v)?,
            "perturb_sigma_normal" => p.refine.perturb_sigma_normal = parse(key, v)?,
            "perturb_sigma_depth" => p.refine.perturb_sigma_depth = parse(key, v)?,
            "unary_weight" => p.refine.unary_weight = parse(key, v)?,
            "trws_max_passes" => p.refine.trws_max_passes = parse(key, v)?,
            "trws_tolerance" => p.refine.trws_tolerance = parse(key, v)?,
            "skip_refine" => p.skip_refine = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "depth_convention" => self.depth_convention = v.trim().parse()?,
            "kitti_like" => self.kitti_like = parse_bool(key, v)?,
            "eval_cap" => self.eval_cap = parse(key, v)?,
            "repetitions" => self.repetitions = parse(key, v)?,
            _ => return Err(format!("unknown configuration key '{key}'")),
        }
        Ok(())
    }
}

impl RunConfig {
    /// Pipeline settings with the run seed applied to refinement.
    pub fn pipeline(&self) -> PipelineConfig {
        let mut p = self.pipeline.clone();
        p.refine.random_seed = self.seed;
        p
    }

    /// The evaluation cap, applied only for KITTI-like data.
    pub fn eval_cap(&self) -> Option<f64> {
        self.kitti_like.then_some(self.eval_cap)
    }

    pub fn validate(&self) -> AppResult<()> {
        self.pipeline().validate()?;
        if !(self.eval_cap > 0.0) {
            return Err(AppError::Config(format!("eval_cap must be positive, got {}", self.eval_cap)));
        }
        if self.repetitions == 0 {
            return Err(AppError::Config("repetitions must be at least 1".into()));
        }
        Ok(())
    }
}

impl KeyValue for SceneSpec {
    const KEYS: &'static [&'static str] = &[
        "width",
        "height",
        "frames",
        "focal",
        "background_depth",
        "background_tilt",
        "object_depth",
        "object_size",
        "object_grid",
        "object_relief",
        "amplitude",
        "deformation_frequency",
        "rotation_per_frame",
        "translation_x",
        "translation_y",
        "translation_z",
    ];

    fn get(&self, key: &str) -> Option<String> {
        match key {
            "width" => show(self.width),
            "height" => show(self.height),
            "frames" => show(self.frames),
            "focal" => show(self.focal),
            "background_depth" => show(self.background_depth),
            "background_tilt" => show(self.background_tilt),
            "object_depth" => show(self.object_depth),
            "object_size" => show(self.object_size),
            "object_grid" => show(self.object_grid),
            "object_relief" => show(self.object_relief),
            "amplitude" => show(self.amplitude),
            "deformation_frequency" => show(self.deformation_frequency),
            "rotation_per_frame" => show(self.rotation_per_frame),
            "translation_x" => show(self.translation_per_frame[0]),
            "translation_y" => show(self.translation_per_frame[1]),
            "translation_z" => show(self.translation_per_frame[2]),
            _ => None,
        }
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "width" => self.width = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "focal" => self.focal = parse(key, v)?,
            "background_depth" => self.background_depth = parse(key, v)?,
            "background_tilt" => self.background_tilt = parse(key, v)?,
            "object_depth" => self.object_depth = parse(key, v)?,
            "object_size" => self.object_size = parse(key, v)?,
            "object_grid" => self.object_grid = parse(key, v)?,
            "object_relief" => self.object_relief = parse(key, v)?,
            "amplitude" => self.amplitude = parse(key, v)?,
            "deformation_frequency" => self.deformation_frequency = parse(key, v)?,
            "rotation_per_frame" => self.rotation_per_frame = parse(key, v)?,
            "translation_x" => self.translation_per_frame[0] = parse(key, v)?,
            "translation_y" => self.translation_per_frame[1] = parse(key, v)?,
            "translation_z" => self.translation_per_frame[2] = parse(key, v)?,
            _ => return Err(format!("unknown scene key '{key}'")),
        }
        Ok(())
    }
}
