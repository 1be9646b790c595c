//! Acceptance criteria 1-11. Each test prints one PASS/FAIL line.
//!
//! Run with `cargo test -p arapdepth --test acceptance -- --nocapture` to
//! see the lines and measured values.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use arapdepth::config::{KeyValue, RunConfig};
use arapdepth::experiments::{run_sweep, LoadedScene, SweepParameter};
use arapdepth::io::{self, BitDepth};
use arapdepth_core::arap::{self, ArapProblem, SolverConfig};
use arapdepth_core::eval::{error_accumulation, mean_first_difference, mre};
use arapdepth_core::geometry::backproject_ray;
use arapdepth_core::mrf::{trws, PairwiseMrf, TrwsOptions};
use arapdepth_core::pipeline::{propagate_depth, propagate_multiframe, PipelineConfig, SceneFrame};
use arapdepth_core::refine::{generate_particles, trws_refine, RefineConfig, RefineEdge, RefineProblem, ShapePair};
use arapdepth_core::segmentation::build_knn_graph;
use arapdepth_core::synth::{barycentric, generate_scene, SceneSpec, SyntheticScene};
use arapdepth_core::{DepthMap, Error, FlowField, Image, PlaneParams, UnitRay, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deformation amplitude of the "moderate" two-object scene.
const MODERATE_AMPLITUDE: f64 = 0.08;

fn verdict(n: u32, name: &str, ok: bool, detail: String) {
    println!("criterion {n:>2} {}: {name} -- {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn rigid_config() -> PipelineConfig {
    PipelineConfig { superpixels: 150, knn: 10, ..Default::default() }
}

fn deforming_scene(frames: usize) -> SyntheticScene {
    generate_scene(&SceneSpec { amplitude: MODERATE_AMPLITUDE, frames, ..Default::default() }, 5).unwrap()
}

fn reference_frame(scene: &SyntheticScene, t: usize) -> SceneFrame {
    SceneFrame { image: scene.images[t].clone(), depth: Some(scene.depths[t].clone()), intrinsics: scene.intrinsics }
}

/// True next-frame range of the surface point seen at pixel `(u, v)` of
/// frame `t`: same barycentric coordinates on the same triangle one frame
/// later.
fn tracked_depth(scene: &SyntheticScene, t: usize, u: usize, v: usize) -> f64 {
    let k = &scene.intrinsics;
    let idx = v * scene.spec.width + u;
    let tri = scene.hit_triangles[t][idx].expect("pixel sees a surface");
    let p = backproject_ray(k, [u as f64, v as f64]).unwrap().dir() * scene.depths[t].get(u, v).unwrap();
    let b = barycentric(p, scene.meshes[t].triangle(tri));
    let next = scene.meshes[t + 1].triangle(tri);
    (next[0] * b[0] + next[1] * b[1] + next[2] * b[2]).norm()
}

#[test]
fn criterion_01_rigid_scene_recovery() {
    let scene = generate_scene(&SceneSpec::default(), 1).unwrap();
    assert_eq!(scene.spec.amplitude, 0.0);
    let cfg = rigid_config();
    let start = Instant::now();
    let r = propagate_depth(&reference_frame(&scene, 0), &scene.images[1], &scene.flows[0], &cfg).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let dense = mre(&r.next_depth, &scene.depths[1], None).unwrap().mre;
    let unrefined = mre(&r.unrefined_depth, &scene.depths[1], None).unwrap().mre;

    // ARAP energy of the selected triples at their true next-frame depths,
    // with next-frame rays from the generator's exact flow.
    let k = &scene.intrinsics;
    let points = arap::triple_points(&r.triples);
    let pix: Vec<(usize, usize)> = r.triples.iter().flat_map(|t| t.pixels()).collect();
    let ref_rays: Vec<UnitRay> = points.iter().map(|&p| backproject_ray(k, p).unwrap()).collect();
    let ref_depths: Vec<f64> = pix.iter().map(|&(u, v)| scene.depths[0].get(u, v).unwrap()).collect();
    let next_rays: Vec<UnitRay> = pix
        .iter()
        .map(|&(u, v)| {
            let f = scene.flows_exact[0][v * scene.spec.width + u].unwrap();
            backproject_ray(k, [u as f64 + f[0], v as f64 + f[1]]).unwrap()
        })
        .collect();
    let truth: Vec<f64> = pix.iter().map(|&(u, v)| tracked_depth(&scene, 0, u, v)).collect();
    let graph = build_knn_graph(&r.triples, cfg.knn, cfg.knn_tau).unwrap();
    let edges = arap::expand_graph_to_points(&graph, &r.triples).unwrap();
    let n = points.len();
    let problem = ArapProblem::new(ref_depths, ref_rays, next_rays, vec![true; n], edges, 1e-6).unwrap();
    let e_truth = problem.energy(&truth).unwrap();

    let ok = dense < 1e-3 && e_truth < 1e-9 && seconds < 60.0;
    verdict(
        1,
        "rigid-scene exact recovery",
        ok,
        format!(
            "dense MRE {dense:.3e} (< 1e-3; before refinement {unrefined:.3e}), energy at truth {e_truth:.3e} (< 1e-9), \
             solver final energy {:.3e}, {} superpixels, {seconds:.2} s (< 60 s)",
            r.solve_report.final_energy(),
            r.segmentation.count()
        ),
    );
}

#[test]
fn criterion_02_gradient_correctness() {
    let start = Instant::now();
    let (h, mut worst) = (1e-6, 0.0f64);
    for seed in 0..100 {
        let (p, x) = arap::random_instance(seed, 24, 1e-6).unwrap();
        let g = p.gradient(&x).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (p.energy(&xp).unwrap() - p.energy(&xm).unwrap()) / (2.0 * h);
            num += (g[i] - fd).powi(2);
            den += fd * fd;
        }
        worst = worst.max((num / den).sqrt());
    }
    let seconds = start.elapsed().as_secs_f64();
    verdict(
        2,
        "gradient correctness",
        worst < 1e-5 && seconds < 10.0,
        format!("max relative error {worst:.3e} over 100 instances of 24 points (< 1e-5), {seconds:.2} s (< 10 s)"),
    );
}

#[test]
fn criterion_03_monotone_descent() {
    let mut traces = 0;
    let mut bad = Vec::new();
    fn check_trace(bad: &mut Vec<String>, traces: &mut usize, label: String, trace: &[f64]) {
        *traces += 1;
        if let Some(i) = trace.windows(2).position(|w| w[1] > w[0]) {
            bad.push(format!("{label} energy rises at iteration {}", i + 1));
        }
    }
    for seed in 0..20 {
        let (p, x) = arap::random_instance(seed, 30, 1e-6).unwrap();
        for cfg in [SolverConfig::default(), SolverConfig { use_isometry_box: false, ..Default::default() }] {
            let r = arap::solve_arap(&p, &x, &cfg).unwrap();
            check_trace(&mut bad, &mut traces, format!("random instance {seed}"), &r.energy_trace);
        }
    }
    let scene = deforming_scene(2);
    let mut moves = 0;
    for seed in 0..3 {
        let mut cfg = rigid_config();
        cfg.refine.random_seed = seed;
        let r = propagate_depth(&reference_frame(&scene, 0), &scene.images[1], &scene.flows[0], &cfg).unwrap();
        check_trace(&mut bad, &mut traces, format!("pipeline seed {seed}"), &r.solve_report.energy_trace);
        let t = r.refine_trace.unwrap();
        for (m, mv) in t.moves.iter().enumerate() {
            moves += 1;
            if let Some(i) = mv.lower_bounds.windows(2).position(|w| w[1] < w[0]) {
                bad.push(format!("seed {seed} move {m}: lower bound drops at pass {}", i + 1));
            }
            if mv.energy_after > mv.energy_before {
                bad.push(format!("seed {seed} move {m}: energy rises"));
            }
        }
        let first = t.moves.first().unwrap().energy_before;
        let last = t.moves.last().unwrap().energy_after;
        if last > first {
            bad.push(format!("seed {seed}: refinement energy {last} above initial {first}"));
        }
    }
    verdict(
        3,
        "monotone descent",
        bad.is_empty(),
        format!("{traces} solver traces and {moves} refinement moves checked; violations: {bad:?}"),
    );
}

fn random_tree_problem(rng: &mut ChaCha8Rng) -> (RefineProblem, RefineConfig) {
    let n = rng.random_range(3..=6);
    let planes: Vec<PlaneParams> = (0..n)
        .map(|_| {
            let normal = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0);
            PlaneParams::new(normal.normalized().unwrap(), rng.random_range(2.0..6.0)).unwrap()
        })
        .collect();
    let ray = |rng: &mut ChaCha8Rng| {
        UnitRay::new(Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 1.0)).unwrap()
    };
    let anchor_rays = (0..n).map(|_| ray(rng)).collect();
    let edges = (1..n)
        .map(|j| {
            let i = rng.random_range(0..j);
            let pairs = (0..rng.random_range(1..4))
                .map(|_| ShapePair {
                    ray_i: ray(rng),
                    ray_j: ray(rng),
                    ref_gap2: rng.random_range(0.0..0.05),
                    weight: rng.random_range(0.1..1.0),
                })
                .collect();
            RefineEdge { i, j, pairs }
        })
        .collect();
    let cfg = RefineConfig {
        lambda1: rng.random_range(0.1..2.0),
        sigma1: rng.random_range(0.05..0.5),
        sigma2: rng.random_range(0.1..1.0),
        particles_per_move: rng.random_range(2..=4),
        moves: 1,
        perturb_sigma_normal: 0.3,
        perturb_sigma_depth: 0.2,
        unary_weight: rng.random_range(0.1..2.0),
        random_seed: rng.random(),
        ..Default::default()
    };
    (RefineProblem { planes, anchor_rays, edges }, cfg)
}

#[test]
fn criterion_04_mrf_exact_on_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut worst_gap = 0.0f64;
    for _ in 0..1000 {
        let (problem, cfg) = random_tree_problem(&mut rng);
        // the particle sets trws_refine will draw for its single move
        let mut prng = ChaCha8Rng::seed_from_u64(cfg.random_seed);
        let particles: Vec<Vec<PlaneParams>> =
            problem.planes.iter().map(|p| generate_particles(p, &cfg, &mut prng)).collect();
        let n = particles.len();
        let mut labels = vec![0usize; n];
        let mut best = f64::INFINITY;
        loop {
            let planes: Vec<PlaneParams> = (0..n).map(|i| particles[i][labels[i]]).collect();
            best = best.min(problem.energy(&planes, &cfg));
            let mut i = 0;
            while i < n {
                labels[i] += 1;
                if labels[i] < particles[i].len() {
                    break;
                }
                labels[i] = 0;
                i += 1;
            }
            if i == n {
                break;
            }
        }
        let out = trws_refine(&problem, &cfg).unwrap();
        let got = problem.energy(&out.planes, &cfg);
        let gap = (got - best).abs() / best.abs().max(1.0);
        worst_gap = worst_gap.max(gap);
        if gap > 1e-9 {
            mismatches += 1;
        }
    }
    // the message-passing core alone, on random tables
    let mut core_mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(3..=6);
        let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(1..=4)).collect();
        let unary = sizes.iter().map(|&s| (0..s).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let mut mrf = PairwiseMrf::new(unary);
        for j in 1..n {
            let i = rng.random_range(0..j);
            let cost = (0..sizes[i] * sizes[j]).map(|_| rng.random_range(0.0..1.0)).collect();
            mrf.add_edge(i, j, cost).unwrap();
        }
        let mut labels = vec![0usize; n];
        let mut best = f64::INFINITY;
        'enumerate: loop {
            best = best.min(mrf.energy(&labels));
            for i in 0..n {
                labels[i] += 1;
                if labels[i] < sizes[i] {
                    continue 'enumerate;
                }
                labels[i] = 0;
            }
            break;
        }
        let r = trws(&mrf, &TrwsOptions::default()).unwrap();
        if (r.energy - best).abs() > 1e-9 {
            core_mismatches += 1;
        }
    }
    verdict(
        4,
        "MRF exactness on trees",
        mismatches == 0 && core_mismatches == 0,
        format!(
            "refinement: {mismatches}/1000 trials differ from brute force (worst relative gap {worst_gap:.1e}); \
             message passing: {core_mismatches}/1000"
        ),
    );
}

#[test]
fn criterion_05_deforming_scene_accuracy() {
    let scene = deforming_scene(2);
    let cfg = rigid_config();
    let r = propagate_depth(&reference_frame(&scene, 0), &scene.images[1], &scene.flows[0], &cfg).unwrap();
    let dense = mre(&r.next_depth, &scene.depths[1], None).unwrap().mre;
    // planar-approximation error: re-render the reference frame onto itself
    let (w, h) = scene.images[0].dims();
    let still =
        propagate_depth(&reference_frame(&scene, 0), &scene.images[0], &FlowField::zeros(w, h).unwrap(), &cfg).unwrap();
    let planar = mre(&still.next_depth, &scene.depths[0], None).unwrap().mre;
    verdict(
        5,
        "deforming-scene accuracy",
        dense < 0.05,
        format!("amplitude {MODERATE_AMPLITUDE}: dense MRE {dense:.3e} (< 0.05); measured planar-approximation error {planar:.3e}"),
    );
}

#[test]
fn criterion_06_noise_trend() {
    let scene = LoadedScene::from_synthetic(&deforming_scene(2));
    let base = RunConfig { pipeline: rigid_config(), ..Default::default() };
    let t = run_sweep(SweepParameter::NoisePercent, &[1.0, 9.0], &base, &scene, 10, false).unwrap();
    let m = t.column("mre").unwrap();
    verdict(
        6,
        "noise trend",
        m[1] > m[0],
        format!("mean MRE over 10 seeds: 1% noise {:.4e}, 9% noise {:.4e}", m[0], m[1]),
    );
}

#[test]
fn criterion_07_isometry_box_speedup() {
    let scene = LoadedScene::from_synthetic(&deforming_scene(2));
    let base = RunConfig { pipeline: rigid_config(), ..Default::default() };
    let t = run_sweep(SweepParameter::DSigma, &[1.0, f64::INFINITY], &base, &scene, 1, true).unwrap();
    let iters = t.column("iterations_to_1pct").unwrap();
    let m = t.column("mre").unwrap();
    let per_iter = t.column("seconds_per_iteration").unwrap();
    let rel = (m[0] - m[1]).abs() / m[1];
    verdict(
        7,
        "restricted-isometry speedup",
        iters[0] <= iters[1] && rel < 0.1,
        format!(
            "iterations to 1% of the energy decrease: box {} vs free {}; MRE {:.4e} vs {:.4e} (relative difference {rel:.2e} < 0.1); \
             per-iteration cost ratio box/free {:.3} (logged only)",
            iters[0],
            iters[1],
            m[0],
            m[1],
            per_iter[0] / per_iter[1]
        ),
    );
}

#[test]
fn criterion_08_error_accumulation() {
    let scene = deforming_scene(5);
    let frames: Vec<SceneFrame> = (0..5).map(|t| reference_frame(&scene, t)).collect();
    let results = propagate_multiframe(&frames, &scene.flows, &rigid_config(), None).unwrap();
    let per_frame: Vec<(usize, f64)> = results.iter().enumerate().map(|(t, r)| (t + 1, r.mre.unwrap())).collect();
    let rows = error_accumulation(&per_frame).unwrap();
    let mean = mean_first_difference(&rows);
    verdict(
        8,
        "error accumulation",
        mean >= 0.0,
        format!("per-frame MRE {:?}; mean first difference {mean:.3e} (>= 0)", per_frame.iter().map(|r| r.1).collect::<Vec<_>>()),
    );
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_arapdepth"))
}

fn run_ok(args: &[&str]) -> Vec<u8> {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn criterion_09_cli_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();
    let spec = root.join("spec.txt");
    std::fs::write(&spec, "width=80\nheight=60\nfocal=80\nframes=3\namplitude=0.05\n").unwrap();
    let common = ["--superpixels", "60", "--knn", "8", "--seed", "7"];
    let mut checked = Vec::new();
    let mut differing = Vec::new();
    let mut compare = |name: &str, a: Vec<(String, Vec<u8>)>, b: Vec<(String, Vec<u8>)>| {
        checked.push(name.to_string());
        if a != b || a.is_empty() {
            differing.push(name.to_string());
        }
    };

    let mut dirs = Vec::new();
    for run in 0..2 {
        let dir = root.join(format!("run{run}"));
        std::fs::create_dir_all(&dir).unwrap();
        let scene = dir.join("scene");
        let out = |n: &str| s(&dir.join(n));
        run_ok(&[&["synth", "--spec", &s(&spec), "--out-dir", &s(&scene)][..], &common[..]].concat());
        // later runs read the first run's scene so inputs are identical
        let sc = |n: &str| s(&root.join("run0/scene").join(n));
        run_ok(
            &[
                &[
                    "propagate",
                    "--ref-image",
                    &sc("frame_000.ppm"),
                    "--next-image",
                    &sc("frame_001.ppm"),
                    "--flow",
                    &sc("flow_000.flo"),
                    "--ref-depth",
                    &sc("depth_000.pfm"),
                    "--intrinsics",
                    &sc("intrinsics.txt"),
                    "--out-depth",
                    &out("next.pfm"),
                    "--out-manifest",
                    &out("propagate.json"),
                    "--trace-dir",
                    &out("traces"),
                    "--gt-depth",
                    &sc("depth_001.pfm"),
                ][..],
                &common[..],
            ]
            .concat(),
        );
        run_ok(
            &[
                &[
                    "multiframe",
                    "--frames",
                    &sc("frames.txt"),
                    "--flows",
                    &sc("flows.txt"),
                    "--init-depth",
                    &sc("depth_000.pfm"),
                    "--intrinsics",
                    &sc("intrinsics.txt"),
                    "--gt-depths",
                    &sc("depths.txt"),
                    "--out-dir",
                    &out("multi"),
                ][..],
                &common[..],
            ]
            .concat(),
        );
        run_ok(
            &[
                &[
                    "sweep",
                    "--parameter",
                    "noise_percent",
                    "--values",
                    "3,1",
                    "--repetitions",
                    "2",
                    "--scene-dir",
                    &s(&root.join("run0/scene")),
                    "--out-csv",
                    &out("sweep.csv"),
                ][..],
                &common[..],
            ]
            .concat(),
        );
        let eval = run_ok(&["eval", "--est", &out("next.pfm"), "--gt", &sc("depth_001.pfm")]);
        let grad = run_ok(&["gradcheck", "--instances", "10", "--seed", "3"]);
        std::fs::write(dir.join("eval.out"), eval).unwrap();
        std::fs::write(dir.join("gradcheck.out"), grad).unwrap();
        dirs.push(dir);
    }
    let (a, b) = (&dirs[0], &dirs[1]);
    compare("synth", files_in(&a.join("scene")), files_in(&b.join("scene")));
    compare("propagate, sweep, eval and gradcheck outputs", files_in(a), files_in(b));
    compare("propagate traces", files_in(&a.join("traces")), files_in(&b.join("traces")));
    compare("multiframe", files_in(&a.join("multi")), files_in(&b.join("multi")));
    verdict(
        9,
        "CLI determinism",
        differing.is_empty(),
        format!("bit-identical outputs for {checked:?} (including sweep, eval and gradcheck output); differing: {differing:?}"),
    );
}

#[test]
fn criterion_10_format_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut failures = Vec::new();
    for trial in 0..100 {
        let (w, h) = (rng.random_range(1..12usize), rng.random_range(1..12usize));
        let n = w * h;

        // flow: arbitrary finite floats plus unknown-flow sentinels
        let f32v = |rng: &mut ChaCha8Rng| -> f32 {
            match rng.random_range(0..10) {
                0 => 1e10,
                1 => -3.5e9,
                _ => rng.random_range(-200.0f32..200.0),
            }
        };
        let u: Vec<f32> = (0..n).map(|_| f32v(&mut rng)).collect();
        let v: Vec<f32> = (0..n).map(|_| f32v(&mut rng)).collect();
        let flow = FlowField::new(w, h, u, v).unwrap();
        let p = d.join("f.flo");
        io::write_flo(&p, &flow).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = io::read_flo(&p).unwrap();
        let same_bits = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        let q = d.join("g.flo");
        io::write_flo(&q, &back).unwrap();
        if !same_bits(back.u(), flow.u()) || !same_bits(back.v(), flow.v()) || std::fs::read(&q).unwrap() != bytes {
            failures.push(format!("flo trial {trial}"));
        }

        // depth: positive, zero, negative and infinite values
        let vals: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..12) {
                0 => 0.0,
                1 => -(rng.random_range(0.0f32..5.0) as f64),
                2 => f64::INFINITY,
                _ => rng.random_range(1e-3f32..1e3) as f64,
            })
            .collect();
        let depth = DepthMap::from_values(w, h, vals).unwrap();
        let p = d.join("d.pfm");
        io::write_pfm(&p, &depth).unwrap();
        let back = io::read_pfm(&p).unwrap();
        let q = d.join("e.pfm");
        io::write_pfm(&q, &back).unwrap();
        let bits_equal = back.values().iter().zip(depth.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !bits_equal || back.mask() != depth.mask() || std::fs::read(&q).unwrap() != std::fs::read(&p).unwrap() {
            failures.push(format!("pfm trial {trial}"));
        }

        // 16-bit image written by an independent encoder
        let channels = if rng.random_bool(0.5) { 1 } else { 3 };
        let samples: Vec<u16> = (0..n * channels).map(|_| rng.random()).collect();
        let mut raw = format!("{}\n{w} {h}\n65535\n", if channels == 1 { "P5" } else { "P6" }).into_bytes();
        for s in &samples {
            raw.extend_from_slice(&s.to_be_bytes());
        }
        let p = d.join("i.pnm");
        std::fs::write(&p, &raw).unwrap();
        let img = io::read_image(&p).unwrap();
        let q = d.join("j.pnm");
        io::write_image(&q, &img, BitDepth::Sixteen).unwrap();
        let expect: Vec<f64> = samples.iter().map(|&s| s as f64 / 65535.0).collect();
        let got: Vec<f64> = img.pixels().iter().flat_map(|px| px[..channels].to_vec()).collect();
        // a random 3-channel payload is only written back as grey if it is grey
        let grey_collapse = channels == 3 && img.pixels().iter().all(|px| px[0] == px[1] && px[1] == px[2]);
        let png = d.join("k.png");
        io::write_image(&png, &img, BitDepth::Sixteen).unwrap();
        let from_png: Image = io::read_image(&png).unwrap();
        if got != expect || (!grey_collapse && std::fs::read(&q).unwrap() != raw) || from_png != img {
            failures.push(format!("16-bit image trial {trial}"));
        }

        // configuration
        let mut cfg = RunConfig::default();
        cfg.pipeline.superpixels = rng.random_range(2..5000);
        cfg.pipeline.knn = rng.random_range(1..50);
        cfg.pipeline.solver.d_sigma = rng.random_range(1e-3..10.0);
        cfg.pipeline.refine.lambda1 = rng.random::<f64>() * 10f64.powi(rng.random_range(-12..4));
        cfg.pipeline.knn_tau = rng.random_bool(0.5).then(|| rng.random_range(1e-6..1e3));
        cfg.pipeline.skip_refine = rng.random_bool(0.5);
        cfg.seed = rng.random();
        cfg.kitti_like = rng.random_bool(0.5);
        let p = d.join("run.cfg");
        cfg.write(&p).unwrap();
        if RunConfig::read(&p).unwrap() != cfg {
            failures.push(format!("config trial {trial}"));
        }
    }
    verdict(
        10,
        "format round trips",
        failures.is_empty(),
        format!("100 random payloads each for flo, PFM, 16-bit PNM/PNG and config; failures: {failures:?}"),
    );
}

#[test]
fn criterion_11_metric_unit_tests() {
    let map = |v: Vec<f64>| DepthMap::from_values(v.len(), 1, v).unwrap();
    let half = mre(&map(vec![2.0, 4.0]), &map(vec![1.0, 4.0]), None).unwrap().mre;
    let gt = map((1..=100).map(|i| 0.5 + i as f64 * 0.173).collect());
    let scaled = gt.map_valid(|_, _, d| Some(1.1 * d));
    let tenth = mre(&scaled, &gt, None).unwrap().mre;
    let empty = mre(&map(vec![0.0, 1.0]), &map(vec![1.0, 0.0]), None);
    verdict(
        11,
        "metric unit tests",
        half == 0.5 && (tenth - 0.1).abs() < 1e-12 && empty == Err(Error::EmptyEvaluation),
        format!("mre((2,4),(1,4)) = {half}; mre(1.1 gt, gt) = {tenth}; empty overlap -> {:?}", empty.err()),
    );
}
