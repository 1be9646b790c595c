//! Command-line interface. Exit codes: 0 success, 1 input or configuration
//! error, 2 numerical failure, 3 unusable depth prior.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use arapdepth_core::arap::gradient_check;
use arapdepth_core::eval;
use arapdepth_core::pipeline::{propagate_depth, propagate_multiframe, PipelineResult, SceneFrame};
use arapdepth_core::synth::{generate_scene, SceneSpec};
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use serde_json::json;

use crate::config::{KeyValue, RunConfig};
use crate::error::{AppError, AppResult};
use crate::experiments::{self, SweepParameter};
use crate::io;
use crate::manifest::Manifest;
use crate::table::Table;

/// `println!` that ignores a closed stdout (e.g. output piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PATH").value_parser(value_parser!(PathBuf)).required(true).help(help)
}

pub fn command() -> Command {
    let mut cmd = Command::new("arapdepth")
        .about("Dense depth propagation for dynamic scenes without explicit 3D motion")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg(Arg::new("config").long("config").global(true).value_name("PATH").value_parser(value_parser!(PathBuf)))
        .arg(Arg::new("seed").long("seed").global(true).value_name("INT").value_parser(value_parser!(u64)))
        .arg(Arg::new("threads").long("threads").global(true).value_name("INT").value_parser(value_parser!(usize)))
        .arg(Arg::new("verbose").long("verbose").short('v').global(true).action(ArgAction::Count));
    for &key in RunConfig::KEYS.iter().filter(|&&k| k != "seed") {
        cmd = cmd.arg(
            Arg::new(key)
                .long(key)
                .global(true)
                .value_name("VALUE")
                .hide_short_help(true)
                .help(format!("Override the '{key}' configuration value")),
        );
    }
    cmd.subcommand(
        Command::new("propagate")
            .about("Propagate a reference depth map to the next frame")
            .arg(path_arg("ref-image", "Reference image (PNM or PNG)"))
            .arg(path_arg("next-image", "Next image (PNM or PNG)"))
            .arg(path_arg("flow", "Forward optical flow (.flo)"))
            .arg(path_arg("ref-depth", "Reference depth prior (PFM)"))
            .arg(path_arg("intrinsics", "Camera intrinsics: fx fy cx cy [skew]"))
            .arg(path_arg("out-depth", "Output next-frame depth (PFM)"))
            .arg(path_arg("out-manifest", "Output run manifest (JSON)"))
            .arg(path_arg("trace-dir", "Directory for energy-trace CSVs").required(false))
            .arg(path_arg("gt-depth", "Ground-truth next-frame depth for evaluation").required(false)),
    )
    .subcommand(
        Command::new("multiframe")
            .about("Chain propagation over a frame sequence")
            .arg(path_arg("frames", "List file of F images"))
            .arg(path_arg("flows", "List file of F-1 flows"))
            .arg(path_arg("init-depth", "Depth prior of the first frame (PFM)"))
            .arg(path_arg("intrinsics", "Camera intrinsics"))
            .arg(path_arg("out-dir", "Output directory"))
            .arg(path_arg("gt-depths", "List file of F ground-truth depths (first entry unused)").required(false)),
    )
    .subcommand(
        Command::new("synth")
            .about("Generate a synthetic deforming scene")
            .arg(path_arg("spec", "Scene description (key=value)").required(false))
            .arg(path_arg("out-dir", "Output directory")),
    )
    .subcommand(
        Command::new("eval")
            .about("Print the mean relative error between two depth maps")
            .arg(path_arg("est", "Estimated depth (PFM)"))
            .arg(path_arg("gt", "Ground-truth depth (PFM)"))
            .arg(Arg::new("cap").long("cap").value_name("DEPTH").value_parser(value_parser!(f64))),
    )
    .subcommand(
        Command::new("sweep")
            .about("Sweep one parameter on a scene directory")
            .arg(Arg::new("parameter").long("parameter").required(true).help("superpixel_count, knn_k, d_sigma or noise_percent"))
            .arg(Arg::new("values").long("values").required(true).help("Comma-separated values; d_sigma accepts inf"))
            .arg(path_arg("scene-dir", "Directory written by the synth command"))
            .arg(path_arg("out-csv", "Output CSV"))
            .arg(Arg::new("timing").long("timing").action(ArgAction::SetTrue).help("Add wall-time columns")),
    )
    .subcommand(
        Command::new("gradcheck")
            .about("Compare the analytic energy gradient with finite differences")
            .arg(Arg::new("size").long("size").default_value("20").value_parser(value_parser!(usize)))
            .arg(Arg::new("instances").long("instances").default_value("100").value_parser(value_parser!(usize))),
    )
}

struct Ctx {
    cfg: RunConfig,
    verbose: u8,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn build_config(m: &ArgMatches) -> AppResult<RunConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    for &key in RunConfig::KEYS.iter().filter(|&&k| k != "seed") {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v).map_err(|e| AppError::Config(format!("--{key}: {e}")))?;
        }
    }
    if let Some(&s) = m.get_one::<u64>("seed") {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&matches) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(m: &ArgMatches) -> AppResult<i32> {
    let cfg = build_config(m)?;
    if let Some(&n) = m.get_one::<usize>("threads") {
        // A second initialisation (e.g. repeated in-process runs) keeps the
        // existing pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ctx = Ctx { cfg, verbose: m.get_count("verbose") };
    match m.subcommand() {
        Some(("propagate", sub)) => cmd_propagate(&ctx, sub),
        Some(("multiframe", sub)) => cmd_multiframe(&ctx, sub),
        Some(("synth", sub)) => cmd_synth(&ctx, sub),
        Some(("eval", sub)) => cmd_eval(&ctx, sub),
        Some(("sweep", sub)) => cmd_sweep(&ctx, sub),
        Some(("gradcheck", sub)) => cmd_gradcheck(&ctx, sub),
        _ => unreachable!("clap enforces a subcommand"),
    }
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    m.get_one::<PathBuf>(name).expect("required argument")
}

fn opt_path<'a>(m: &'a ArgMatches, name: &str) -> Option<&'a Path> {
    m.get_one::<PathBuf>(name).map(PathBuf::as_path)
}

fn create_dir(dir: &Path) -> AppResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

fn summary(r: &PipelineResult) -> serde_json::Value {
    let d = &r.diagnostics;
    json!({
        "superpixels": r.segmentation.count(),
        "solver_iterations": r.solve_report.iterations_used,
        "solver_converged": r.solve_report.converged,
        "final_energy": r.solve_report.final_energy(),
        "refine_moves": r.refine_trace.as_ref().map_or(0, |t| t.moves.len()),
        "merged_superpixels": d.merged_superpixels,
        "knn_clamped_from": d.knn_clamped_from,
        "out_of_bounds_points": d.out_of_bounds_points,
        "fit_fallbacks": d.fit.len(),
        "skipped_boundary_pairs": d.skipped_boundary_pairs,
        "grazing_pixels": d.grazing_pixels,
        "grazing_pairs": d.grazing_pairs,
        "valid_output_pixels": r.next_depth.valid_count(),
    })
}

fn write_traces(dir: &Path, r: &PipelineResult) -> AppResult<Vec<PathBuf>> {
    create_dir(dir)?;
    let s = &r.solve_report;
    let mut energy = Table::new(["iteration", "energy", "step", "projected_gradient"]);
    for i in 0..s.energy_trace.len() {
        energy.push(vec![
            i as f64,
            s.energy_trace[i],
            s.step_trace.get(i).copied().unwrap_or(f64::NAN),
            s.pgrad_trace.get(i).copied().unwrap_or(f64::NAN),
        ]);
    }
    let mut moves = Table::new(["move", "energy_before", "energy_after", "final_lower_bound", "accepted"]);
    if let Some(t) = &r.refine_trace {
        for (i, mv) in t.moves.iter().enumerate() {
            moves.push(vec![
                i as f64,
                mv.energy_before,
                mv.energy_after,
                mv.lower_bounds.last().copied().unwrap_or(f64::NAN),
                f64::from(u8::from(mv.accepted)),
            ]);
        }
    }
    let (pe, pm) = (dir.join("energy_trace.csv"), dir.join("refine_moves.csv"));
    energy.write(&pe)?;
    moves.write(&pm)?;
    Ok(vec![pe, pm])
}

fn cmd_propagate(ctx: &Ctx, m: &ArgMatches) -> AppResult<i32> {
    let cfg = &ctx.cfg;
    let k = io::read_intrinsics(path(m, "intrinsics"))?;
    let image = io::read_image(path(m, "ref-image"))?;
    let next = io::read_image(path(m, "next-image"))?;
    let flow = io::read_flo(path(m, "flow"))?;
    let depth = io::read_depth(path(m, "ref-depth"), cfg.depth_convention, &k)?;
    let reference = SceneFrame { image, depth: Some(depth), intrinsics: k };
    let r = propagate_depth(&reference, &next, &flow, &cfg.pipeline())?;

    let out = path(m, "out-depth");
    io::write_depth(out, &r.next_depth, cfg.depth_convention, &k)?;
    let mut man = Manifest::new("propagate");
    for name in ["ref-image", "next-image", "flow", "ref-depth", "intrinsics"] {
        man.input(name, path(m, name));
    }
    man.output("depth", out);
    if let Some(dir) = opt_path(m, "trace-dir") {
        for p in write_traces(dir, &r)? {
            man.output("trace", &p);
        }
    }
    let mut details = summary(&r);
    if let Some(gt) = opt_path(m, "gt-depth") {
        let truth = io::read_depth(gt, cfg.depth_convention, &k)?;
        let rep = eval::mre(&r.next_depth, &truth, cfg.eval_cap())?;
        say!("mre {:?} over {} pixels", rep.mre, rep.valid_pixel_count);
        man.input("gt-depth", gt);
        details["mre"] = json!(rep.mre);
    }
    man.note("result", details);
    man.write(path(m, "out-manifest"), cfg)?;
    ctx.log(format!(
        "{} superpixels, {} solver iterations, final energy {:e}",
        r.segmentation.count(),
        r.solve_report.iterations_used,
        r.solve_report.final_energy()
    ));
    say!("wrote {}", out.display());
    Ok(0)
}

fn cmd_multiframe(ctx: &Ctx, m: &ArgMatches) -> AppResult<i32> {
    let cfg = &ctx.cfg;
    let k = io::read_intrinsics(path(m, "intrinsics"))?;
    let frame_paths = experiments::read_list(path(m, "frames"))?;
    let flow_paths = experiments::read_list(path(m, "flows"))?;
    if frame_paths.len() < 2 || flow_paths.len() + 1 != frame_paths.len() {
        return Err(AppError::Config(format!(
            "need F >= 2 frames and F-1 flows, got {} frames and {} flows",
            frame_paths.len(),
            flow_paths.len()
        )));
    }
    let gt_paths = match opt_path(m, "gt-depths") {
        Some(p) => {
            let l = experiments::read_list(p)?;
            if l.len() != frame_paths.len() {
                return Err(AppError::Config(format!(
                    "ground-truth list has {} entries for {} frames",
                    l.len(),
                    frame_paths.len()
                )));
            }
            Some(l)
        }
        None => None,
    };
    let mut frames = Vec::with_capacity(frame_paths.len());
    for (t, fp) in frame_paths.iter().enumerate() {
        let depth = if t == 0 {
            Some(io::read_depth(path(m, "init-depth"), cfg.depth_convention, &k)?)
        } else if let Some(g) = &gt_paths {
            Some(io::read_depth(&g[t], cfg.depth_convention, &k)?)
        } else {
            None
        };
        frames.push(SceneFrame { image: io::read_image(fp)?, depth, intrinsics: k });
    }
    let flows = flow_paths.iter().map(|p| io::read_flo(p)).collect::<AppResult<Vec<_>>>()?;
    let results = propagate_multiframe(&frames, &flows, &cfg.pipeline(), cfg.eval_cap())?;

    let dir = path(m, "out-dir");
    create_dir(dir)?;
    let mut man = Manifest::new("multiframe");
    man.input("init-depth", path(m, "init-depth")).input("intrinsics", path(m, "intrinsics"));
    for p in &frame_paths {
        man.input("frame", p);
    }
    for p in &flow_paths {
        man.input("flow", p);
    }
    let mut per_frame = Vec::new();
    let mut summaries = Vec::new();
    for (t, fr) in results.iter().enumerate() {
        let out = dir.join(format!("depth_{:03}.pfm", t + 1));
        io::write_depth(&out, &fr.result.next_depth, cfg.depth_convention, &k)?;
        man.output("depth", &out);
        let mut s = summary(&fr.result);
        s["frame"] = json!(t + 1);
        if let Some(mre) = fr.mre {
            per_frame.push((t + 1, mre));
            s["mre"] = json!(mre);
            say!("frame {} mre {:?}", t + 1, mre);
        }
        summaries.push(s);
    }
    if let Some(g) = &gt_paths {
        for p in &g[1..] {
            man.input("gt-depth", p);
        }
    }
    if per_frame.len() >= 2 {
        let csv = dir.join("accumulation.csv");
        experiments::accumulation_table(&per_frame)?.write(&csv)?;
        man.output("accumulation", &csv);
        let rows = eval::error_accumulation(&per_frame)?;
        say!("mean first difference {:?}", eval::mean_first_difference(&rows));
    }
    man.note("frames", json!(summaries));
    man.write(&dir.join("manifest.json"), cfg)?;
    say!("wrote {} depth maps to {}", results.len(), dir.display());
    Ok(0)
}

fn cmd_synth(ctx: &Ctx, m: &ArgMatches) -> AppResult<i32> {
    let spec = match opt_path(m, "spec") {
        Some(p) => SceneSpec::read(p)?,
        None => SceneSpec::default(),
    };
    let scene = generate_scene(&spec, ctx.cfg.seed)?;
    let dir = path(m, "out-dir");
    let written = experiments::write_scene(dir, &scene, ctx.cfg.depth_convention)?;
    let spec_out = dir.join("scene.txt");
    spec.write(&spec_out)?;
    let mut man = Manifest::new("synth");
    if let Some(p) = opt_path(m, "spec") {
        man.input("spec", p);
    }
    for p in written.iter().chain([&spec_out]) {
        man.output("scene", p);
    }
    let residual = (0..scene.flows.len()).map(|t| scene.flow_residual(t)).fold(0.0, f64::max);
    man.note("max_flow_residual_px", json!(residual));
    man.write(&dir.join("manifest.json"), &ctx.cfg)?;
    ctx.log(format!("max flow reprojection residual {residual:e} px"));
    say!("wrote {} frames to {}", scene.images.len(), dir.display());
    Ok(0)
}

fn cmd_eval(ctx: &Ctx, m: &ArgMatches) -> AppResult<i32> {
    // Relative error along a fixed ray is the same for range and z depth,
    // so the stored values are compared directly.
    let est = io::read_pfm(path(m, "est"))?;
    let gt = io::read_pfm(path(m, "gt"))?;
    let cap = m.get_one::<f64>("cap").copied().or(ctx.cfg.eval_cap());
    let rep = eval::mre(&est, &gt, cap)?;
    ctx.log(format!("{} mutually valid pixels", rep.valid_pixel_count));
    say!("{:?}", rep.mre);
    Ok(0)
}

fn parse_values(s: &str) -> AppResult<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| AppError::Config(format!("invalid sweep value '{v}'"))))
        .collect()
}

fn cmd_sweep(ctx: &Ctx, m: &ArgMatches) -> AppResult<i32> {
    let parameter: SweepParameter = m.get_one::<String>("parameter").expect("required").parse()?;
    let values = parse_values(m.get_one::<String>("values").expect("required"))?;
    let dir = path(m, "scene-dir");
    let scene = experiments::load_scene(dir, ctx.cfg.depth_convention)?;
    let table = experiments::run_sweep(parameter, &values, &ctx.cfg, &scene, ctx.cfg.repetitions, m.get_flag("timing"))?;
    let out = path(m, "out-csv");
    table.write(out)?;
    let mut man = Manifest::new("sweep");
    for p in &scene.files {
        man.input("scene", p);
    }
    man.output("table", out);
    man.note("parameter", json!(parameter.name()));
    man.note("values", json!(values.iter().map(|v| v.to_string()).collect::<Vec<_>>()));
    man.write(&out.with_extension("manifest.json"), &ctx.cfg)?;
    for row in &table.rows {
        ctx.log(format!("{}={} mre {:?}", parameter.name(), row[0], row[1]));
    }
    say!("wrote {}", out.display());
    Ok(0)
}

fn cmd_gradcheck(ctx: &Ctx, m: &ArgMatches) -> AppResult<i32> {
    let size = *m.get_one::<usize>("size").expect("defaulted");
    let instances = *m.get_one::<usize>("instances").expect("defaulted");
    let err = gradient_check(ctx.cfg.seed, instances, size, 1e-6)?;
    say!("max relative gradient error {err:e} over {instances} instances of {size} points");
    if err <= GRADCHECK_TOLERANCE {
        Ok(0)
    } else {
        eprintln!("error: gradient error exceeds {GRADCHECK_TOLERANCE:e}");
        Ok(2)
    }
}
