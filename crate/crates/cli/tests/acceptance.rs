//! Acceptance suite: one line per criterion, nonzero exit when any fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use list_core::bvh::{closest_hit_naive, Bvh};
use list_core::geometry::Ray;
use list_core::grids::{bilinear_sample, trilinear_sample, FeatureMap2D, ScalarGrid, VoxelGrid};
use list_core::mesh::primitives::{box_mesh, icosahedron, icosphere, unit_cube};
use list_core::metrics::{
    chamfer_loss, chamfer_metric, evaluate_meshes, mesh_iou, occupancy_bce, sdf_mse, EvalConfig, Reduction,
};
use list_core::nn::fixtures::{calibrated_inputs, psi_bundle, write_pipeline_dirs, LOCAL_CHANNELS};
use list_core::nn::{conv3d_forward, dense_forward, predict_sdf, Activation, Conv3d, Dense, PipelineConfig, COARSE_FILE};
use list_core::occlusion::{separate_surfaces, subdivide, CameraSpec};
use list_core::reference::{conv3d_forward_naive, dense_forward_naive};
use list_core::sdf::{generate_query_set_detailed, Accel, QuerySamplingConfig, SdfOracle};
use list_core::surface::{marching_cubes, IsoGridSpec};
use list_core::tensor::Tensor;
use list_core::{Aabb, PointCloud, TriMesh, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_point(r: &mut ChaCha8Rng, half: f64) -> Vec3 {
    Vec3::new(r.random_range(-half..half), r.random_range(-half..half), r.random_range(-half..half))
}

fn interpolation_exactness() -> Outcome {
    let mut r = rng(1);
    let c: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    let f = |p: Vec3| {
        c[0] + c[1] * p.x + c[2] * p.y + c[3] * p.z + c[4] * p.x * p.y + c[5] * p.x * p.z + c[6] * p.y * p.z
            + c[7] * p.x * p.y * p.z
    };
    let g = ScalarGrid::from_fn([17, 13, 11], Aabb::unit(), f);
    let (lo, hi) = (g.cell_center(0, 0, 0), g.cell_center(16, 12, 10));
    let mut worst3: f64 = 0.0;
    for _ in 0..1000 {
        let t = Vec3::new(r.random(), r.random(), r.random());
        let p = lo + (hi - lo).component_mul(&t);
        worst3 = worst3.max((trilinear_sample(&g, &p)[0] - f(p)).abs());
    }

    let c2: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
    let f2 = |u: f64, v: f64| c2[0] + c2[1] * u + c2[2] * v + c2[3] * u * v;
    let (h, w) = (19, 23);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(f2(x as f64 / (w - 1) as f64, y as f64 / (h - 1) as f64) as f32);
        }
    }
    let map = FeatureMap2D::new(1, h, w, data).map_err(|e| e.to_string())?;
    let mut worst2: f64 = 0.0;
    for _ in 0..1000 {
        let uv = [r.random::<f64>(), r.random::<f64>()];
        worst2 = worst2.max((bilinear_sample(&map, uv)[0] - f2(uv[0], uv[1])).abs());
    }
    check(
        worst3 <= 1e-6 && worst2 <= 1e-6,
        format!("max error trilinear {worst3:.2e}, bilinear {worst2:.2e} (tol 1e-6)"),
    )
}

fn marching_cubes_sphere() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let n = 128;
        let cell = 1.0 / n as f64;
        let g = ScalarGrid::from_fn([n; 3], Aabb::unit(), |p| p.norm() - 0.3);
        let ex = marching_cubes(&g, 0.0).map_err(|e| e.to_string())?;
        let worst = ex.mesh.vertices.iter().map(|v| (v.norm() - 0.3).abs()).fold(0.0, f64::max);
        let samples = list_core::mesh::sample_surface(&ex.mesh, 10_000, 5).map_err(|e| e.to_string())?;
        let mut r = rng(6);
        let analytic: Vec<Vec3> = (0..10_000)
            .map(|_| loop {
                let p = rand_point(&mut r, 1.0);
                let l = p.norm();
                if l > 1e-3 && l <= 1.0 {
                    break p / l * 0.3;
                }
            })
            .collect();
        let cd = chamfer_metric(&samples, &PointCloud::new(analytic), Reduction::Mean).map_err(|e| e.to_string())?;
        check(
            worst <= 1.5 * cell && cd <= 2.0 * cell,
            format!(
                "{} faces, max ||v|-r| = {:.3} cells (tol 1.5), chamfer = {:.3} cells (tol 2)",
                ex.mesh.faces.len(),
                worst / cell,
                cd / cell
            ),
        )
    })
}

fn bumpy_sphere(seed: u64) -> TriMesh {
    let mut m = icosphere(0.3, 2);
    let mut r = rng(seed);
    for v in &mut m.vertices {
        *v *= 1.0 + r.random_range(-0.3..0.3);
    }
    m
}

fn sdf_equivalence() -> Outcome {
    let meshes = [("unit cube", unit_cube()), ("icosahedron", icosahedron(0.4)), ("bumpy sphere", bumpy_sphere(3))];
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for (_, m) in &meshes {
        let o = SdfOracle::new(m).map_err(|e| e.to_string())?;
        for _ in 0..1000 {
            let p = rand_point(&mut r, 0.8);
            let a = o.signed_distance(&p, Accel::Bvh).map_err(|e| e.to_string())?;
            let b = o.signed_distance(&p, Accel::Naive).map_err(|e| e.to_string())?;
            worst = worst.max((a - b).abs());
        }
    }
    let cube = SdfOracle::new(&meshes[0].1).map_err(|e| e.to_string())?;
    let centre = cube.signed_distance(&Vec3::zeros(), Accel::Bvh).map_err(|e| e.to_string())?;
    let outside = cube.signed_distance(&Vec3::new(1.0, 0.0, 0.0), Accel::Bvh).map_err(|e| e.to_string())?;
    check(
        worst <= 1e-9 && centre == -0.5 && outside == 0.5,
        format!("max |bvh - naive| = {worst:.2e} over 3x1000 points, cube centre {centre}, (1,0,0) {outside}"),
    )
}

fn neural_forward() -> Outcome {
    let acts = [Activation::Relu, Activation::LeakyRelu, Activation::Sigmoid, Activation::Tanh, Activation::None];
    let vals = |r: &mut ChaCha8Rng, n: usize| -> Vec<f32> { (0..n).map(|_| r.random_range(-1.0..1.0)).collect() };
    let max_diff = |a: &Tensor, b: &Tensor| -> f32 {
        assert_eq!(a.dims(), b.dims());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    };
    let mut r = rng(3);
    let (mut dense_worst, mut conv_worst) = (0.0f32, 0.0f32);
    let cases = 120;
    for case in 0..cases {
        let act = acts[case % acts.len()];
        let (rows, i, o) = (r.random_range(1..64), r.random_range(1..96), r.random_range(1..48));
        let d = Dense::new(i, o, vals(&mut r, i * o), vals(&mut r, o), act).map_err(|e| e.to_string())?;
        let x = Tensor::new(vec![rows, i], vals(&mut r, rows * i)).map_err(|e| e.to_string())?;
        let y = dense_forward(&d, &x).map_err(|e| e.to_string())?;
        dense_worst = dense_worst.max(max_diff(&y, &dense_forward_naive(&d, &x)));

        let (ci, co, k) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..4));
        let (s, p) = (r.random_range(1..3), r.random_range(0..2));
        let ext: Vec<usize> = (0..3).map(|_| r.random_range(k.max(2)..12)).collect();
        let c = Conv3d::new(ci, co, k, s, p, vals(&mut r, co * ci * k * k * k), vals(&mut r, co), act)
            .map_err(|e| e.to_string())?;
        let x = Tensor::new(vec![ci, ext[0], ext[1], ext[2]], vals(&mut r, ci * ext.iter().product::<usize>()))
            .map_err(|e| e.to_string())?;
        let y = conv3d_forward(&c, &x).map_err(|e| e.to_string())?;
        conv_worst = conv_worst.max(max_diff(&y, &conv3d_forward_naive(&c, &x)));
    }

    let fc = 147;
    let psi = psi_bundle(9, fc + LOCAL_CHANNELS);
    let n = 5000;
    let f_c = Tensor::new(vec![n, fc], vals(&mut r, n * fc)).map_err(|e| e.to_string())?;
    let f_l = Tensor::new(vec![n, LOCAL_CHANNELS], vals(&mut r, n * LOCAL_CHANNELS)).map_err(|e| e.to_string())?;
    let whole = predict_sdf(&psi, &f_c, &f_l).map_err(|e| e.to_string())?;
    let mut part_worst = 0.0f32;
    for size in [1usize, 7, 512, 4999] {
        let mut got = Vec::with_capacity(n);
        for start in (0..n).step_by(size) {
            let idx: Vec<usize> = (start..(start + size).min(n)).collect();
            got.extend(predict_sdf(&psi, &f_c.gather_rows(&idx), &f_l.gather_rows(&idx)).map_err(|e| e.to_string())?);
        }
        part_worst = whole.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(part_worst, f32::max);
    }
    check(
        dense_worst <= 1e-5 && conv_worst <= 1e-5 && part_worst <= 1e-6,
        format!(
            "{cases} dense + {cases} conv3d cases: max diff {dense_worst:.2e} / {conv_worst:.2e} (tol 1e-5); batch partition {part_worst:.2e} (tol 1e-6)"
        ),
    )
}

fn loss_fixtures() -> Outcome {
    let m = 4;
    let v = VoxelGrid::from_data(m, Aabb::unit(), vec![1; m * m * m]).map_err(|e| e.to_string())?;
    let v_hat = ScalarGrid::filled([m; 3], 1, Aabb::unit(), 0.5);
    let bce = occupancy_bce(&v, &v_hat, 0.5).map_err(|e| e.to_string())?;
    let a = PointCloud::new(vec![Vec3::zeros()]);
    let b = PointCloud::new(vec![Vec3::new(2.0, 0.0, 0.0)]);
    let cd = chamfer_loss(&a, &b).map_err(|e| e.to_string())?;
    let mse = sdf_mse(&[1.0, 0.0], &[0.0, 0.0]).map_err(|e| e.to_string())?;
    check(
        (bce - 0.346574).abs() <= 1e-6 && cd == 8.0 && mse == 0.5,
        format!("bce {bce:.7} (want 0.346574), chamfer {cd} (want 8), mse {mse} (want 0.5)"),
    )
}

fn metric_identities() -> Outcome {
    let s = icosphere(0.3, 3);
    let cfg = EvalConfig {
        samples: 20_000,
        ..EvalConfig::default()
    };
    let r = evaluate_meshes(&s, &s, &cfg).map_err(|e| e.to_string())?;
    let outer = box_mesh(Vec3::repeat(-0.5), Vec3::repeat(0.5));
    let inner = box_mesh(Vec3::repeat(-0.25), Vec3::repeat(0.25));
    let iou = mesh_iou(&outer, &inner, 64).map_err(|e| e.to_string())?;
    check(
        r.cd == 0.0 && r.iou == Some(100.0) && r.fscore == 100.0 && (iou - 12.5).abs() <= 2.0,
        format!(
            "self: CD {} IoU {:?} F {}; concentric cubes IoU {iou:.3} (want 12.5 +- 2)",
            r.cd, r.iou, r.fscore
        ),
    )
}

fn query_schedule() -> Outcome {
    let mesh = icosphere(0.3, 4);
    let cfg = QuerySamplingConfig {
        n_total: 50_000,
        seed: 4,
        ..QuerySamplingConfig::default()
    };
    let g = generate_query_set_detailed(&mesh, &cfg).map_err(|e| e.to_string())?;
    let mut ok = g.set.len() == 50_000;
    let mut parts = Vec::new();
    for (b, band) in cfg.schedule.iter().enumerate() {
        let idx: Vec<usize> = (0..g.bands.len()).filter(|&i| g.bands[i] as usize == b).collect();
        let want = (band.fraction * 50_000.0).round() as usize;
        ok &= idx.len() == want;
        for axis in 0..3 {
            let d: Vec<f64> = idx.iter().map(|&i| g.set.points[i][axis] - g.anchors[i][axis]).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
            let rel = (sd / band.rho - 1.0).abs();
            ok &= rel <= 0.05;
            if axis == 0 {
                parts.push(format!("rho {}: n {} sd/rho-1 {:+.3}", band.rho, idx.len(), sd / band.rho - 1.0));
            }
        }
    }
    check(ok, parts.join("; "))
}

fn random_soup(n: usize, r: &mut ChaCha8Rng) -> TriMesh {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for i in 0..n {
        let c = rand_point(r, 1.0);
        for _ in 0..3 {
            vertices.push(c + rand_point(r, 0.3));
        }
        let b = 3 * i as u32;
        faces.push([b, b + 1, b + 2]);
    }
    TriMesh { vertices, faces, tags: None }
}

fn occlusion_protocol() -> Outcome {
    let r0 = 0.3;
    let sphere = icosphere(r0, 4);
    let cam = CameraSpec::look_at(Vec3::new(0.0, 0.0, 10.0 * r0), Vec3::zeros(), Vec3::y(), 1024.0, [1024, 1024])
        .map_err(|e| e.to_string())?;
    let split = separate_surfaces(&sphere, &cam, None).map_err(|e| e.to_string())?;
    let frac = split.occluded_fraction();
    let fine = subdivide(&sphere, split.max_edge).map_err(|e| e.to_string())?;
    let gap = (split.visible_area + split.occluded_area - fine.area()).abs();

    let mut r = rng(8);
    let mut mismatches = 0;
    let cases = 200;
    for _ in 0..cases {
        let n = r.random_range(1..150);
        let mesh = random_soup(n, &mut r);
        let bvh = Bvh::build(&mesh).map_err(|e| e.to_string())?;
        for _ in 0..16 {
            let d = rand_point(&mut r, 1.0);
            if d.norm() < 1e-3 {
                continue;
            }
            let ray = Ray::new(rand_point(&mut r, 2.0), d.normalize());
            if bvh.closest_hit(&ray, f64::INFINITY) != closest_hit_naive(&mesh, &ray, f64::INFINITY) {
                mismatches += 1;
            }
        }
    }
    check(
        (frac - 0.55).abs() <= 0.02 && mismatches == 0 && gap <= 1e-6,
        format!(
            "occluded fraction {frac:.4} (want 0.55 +- 0.02), {} sub-faces; BVH mismatches {mismatches}/{} rays; area gap {gap:.1e}",
            fine.faces.len(),
            cases * 16
        ),
    )
}

fn run_cli(args: &[&str], threads: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_list"))
        .args(args)
        .args(["--seed", "11", "--threads", threads])
        .env_remove("LIST_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn end_to_end_run(root: &Path, mesh: &Path, threads: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let s = |p: &Path| p.to_str().expect("utf-8 temp path").to_string();
    let prep = root.join("prep");
    run_cli(
        &["prep", &s(mesh), "--n", "20000", "--coarse-n", "1000", "--surface-n", "20000", "--occupancy-res", "64", "--out", &s(&prep)],
        threads,
    )?;
    // the fixture networks consume the freshly prepared coarse cloud
    let cfg = PipelineConfig {
        occupancy_res: 64,
        grid: IsoGridSpec::cubic(64),
        ..PipelineConfig::default()
    };
    let inputs = calibrated_inputs(5, &cfg).map_err(|e| e.to_string())?;
    let (idir, bdir) = (root.join("inputs"), root.join("bundles"));
    write_pipeline_dirs(&inputs, &idir, &bdir).map_err(|e| e.to_string())?;
    fs::copy(prep.join("coarse.lstg"), idir.join(COARSE_FILE)).map_err(|e| e.to_string())?;
    let infer = root.join("infer");
    run_cli(
        &["infer", &s(&idir), &s(&bdir), "--res", "64", "--occupancy-res", "64", "--dump-sdf", "--out", &s(&infer)],
        threads,
    )?;
    let eval = root.join("eval");
    run_cli(
        &["eval", &s(&infer.join("recon.obj")), &s(&prep.join("mesh.obj")), "--samples", "20000", "--out", &s(&eval)],
        threads,
    )?;
    let mut files = Vec::new();
    for dir in [&prep, &infer, &eval] {
        let mut names: Vec<_> = fs::read_dir(dir).map_err(|e| e.to_string())?.flatten().map(|e| e.path()).collect();
        names.sort();
        for p in names {
            let bytes = fs::read(&p).map_err(|e| e.to_string())?;
            files.push((p.strip_prefix(root).unwrap().display().to_string(), bytes));
        }
    }
    Ok(files)
}

fn end_to_end_determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let mesh = tmp.path().join("shape.obj");
    bumpy_sphere(21).write_obj(&mesh).map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for (i, threads) in ["1", "1", "4"].iter().enumerate() {
        let root = tmp.path().join(format!("run{i}"));
        runs.push(end_to_end_run(&root, &mesh, threads)?);
    }
    let n = runs[0].len();
    let same = runs.iter().all(|r| r == &runs[0]);
    let faces = runs[0]
        .iter()
        .find(|(p, _)| p.ends_with("recon.obj"))
        .map(|(_, b)| String::from_utf8_lossy(b).lines().filter(|l| l.starts_with("f ")).count())
        .unwrap_or(0);
    check(
        same && n == 7 && faces > 0,
        format!("{n} output files from prep/infer/eval, {faces} reconstructed faces; identical across 2 runs at 1 thread and 1 at 4: {same}"),
    )
}

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { name: "interpolation exactness", budget: Some(Duration::from_secs(1)), run: interpolation_exactness },
        Criterion { name: "marching-cubes sphere oracle", budget: Some(Duration::from_secs(30)), run: marching_cubes_sphere },
        Criterion { name: "SDF oracle equivalence", budget: Some(Duration::from_secs(10)), run: sdf_equivalence },
        Criterion { name: "neural-forward oracles", budget: Some(Duration::from_secs(60)), run: neural_forward },
        Criterion { name: "loss fixtures", budget: None, run: loss_fixtures },
        Criterion { name: "metric identities", budget: None, run: metric_identities },
        Criterion { name: "query-schedule fidelity", budget: Some(Duration::from_secs(20)), run: query_schedule },
        Criterion { name: "occlusion protocol oracle", budget: Some(Duration::from_secs(60)), run: occlusion_protocol },
        Criterion { name: "end-to-end determinism", budget: None, run: end_to_end_determinism },
    ];
    let mut failed = 0;
    for c in &criteria {
        let t = Instant::now();
        let outcome = (c.run)();
        let elapsed = t.elapsed();
        let over = c.budget.is_some_and(|b| elapsed > b);
        let (ok, detail) = match outcome {
            Ok(d) => (!over, d),
            Err(d) => (false, d),
        };
        let budget = c.budget.map_or_else(String::new, |b| format!(" / budget {:.0}s", b.as_secs_f64()));
        let timing = format!("{:.2}s{budget}", elapsed.as_secs_f64());
        println!("{} {}: {detail} [{timing}]", if ok { "PASS" } else { "FAIL" }, c.name);
        if !ok {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
