use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use log::{info, warn};

use list_core::grids::{disentangle_queries, voxelize_points, ScalarGrid, DEFAULT_OCCUPANCY_RES};
use list_core::lstg::Container;
use list_core::mesh::{farthest_point_sample, load_mesh_auto, normalize_unit_cube, sample_surface};
use list_core::metrics::{evaluate_meshes, EvalConfig, MetricReport, DEFAULT_FSCORE_D, DEFAULT_IOU_RES};
use list_core::nn::{feature_extent, run_pipeline, PipelineConfig, PipelineInputs};
use list_core::occlusion::{self, CameraSpec, OcclusionConfig};
use list_core::sdf::{generate_query_set, NoiseBand, QuerySamplingConfig};
use list_core::surface::{marching_cubes, IsoGridSpec};
use list_core::{Aabb, Error, PointCloud, Result, TriMesh};

use crate::{GlobalOpts, ReductionArg};

pub const PREP_MESH: &str = "mesh.obj";
pub const PREP_QUERIES: &str = "queries.lstg";
pub const PREP_COARSE: &str = list_core::nn::COARSE_FILE;
pub const PREP_OCCUPANCY: &str = "occupancy.lstg";

#[derive(Args, Debug)]
pub struct PrepArgs {
    /// Input mesh (.obj or .off).
    pub mesh: PathBuf,
    /// Number of signed-distance queries.
    #[arg(long, default_value_t = 50_000)]
    pub n: usize,
    /// Points kept by farthest point sampling for the coarse cloud.
    #[arg(long, default_value_t = 4000)]
    pub coarse_n: usize,
    /// Dense surface samples behind the coarse cloud and the occupancy grid.
    #[arg(long, default_value_t = 100_000)]
    pub surface_n: usize,
    /// Noise bands as `fraction:rho` pairs separated by commas.
    #[arg(long, default_value = "0.45:0.003,0.44:0.01,0.10:0.07")]
    pub schedule: String,
    /// Redraw queries whose |sdf| exceeds this.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Multiplier applied to stored signed distances.
    #[arg(long, default_value_t = 10.0)]
    pub sdf_scale: f64,
    #[arg(long, default_value_t = DEFAULT_OCCUPANCY_RES)]
    pub occupancy_res: usize,
    /// Do not fill the unscheduled share of queries with uniform samples.
    #[arg(long)]
    pub no_fill: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Directory holding the coarse cloud and image features.
    pub inputs: PathBuf,
    /// Directory holding the four weight bundles.
    pub bundles: PathBuf,
    /// Query lattice resolution per axis.
    #[arg(long, default_value_t = 128)]
    pub res: usize,
    /// Half side of the cubic query extent.
    #[arg(long, default_value_t = 0.5)]
    pub extent: f64,
    /// Neighbour offset in the feature frame; one occupancy voxel when omitted.
    #[arg(long)]
    pub d: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_OCCUPANCY_RES)]
    pub occupancy_res: usize,
    #[arg(long, default_value_t = 0.0)]
    pub iso: f64,
    #[arg(long, default_value_t = 32_768)]
    pub batch_size: usize,
    /// Also write the predicted grid as `sdf.lstg`.
    #[arg(long)]
    pub dump_sdf: bool,
    /// Output mesh file name inside the output directory.
    #[arg(long, default_value = "recon.obj")]
    pub name: String,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Signed-distance grid container.
    pub sdf: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub iso: f64,
    #[arg(long, default_value = "mesh.obj")]
    pub name: String,
}

#[derive(Args, Debug)]
pub struct MetricOpts {
    #[arg(long, default_value_t = DEFAULT_FSCORE_D)]
    pub fscore_d: f64,
    #[arg(long, default_value_t = DEFAULT_IOU_RES)]
    pub iou_res: usize,
    /// Surface samples per mesh.
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = ReductionArg::Mean)]
    pub reduction: ReductionArg,
    /// Report file name inside the output directory.
    #[arg(long, default_value = "report.json")]
    pub report: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub pred: PathBuf,
    pub gt: PathBuf,
    #[command(flatten)]
    pub metric: MetricOpts,
}

#[derive(Args, Debug)]
pub struct EvalOccludedArgs {
    pub pred: PathBuf,
    pub gt: PathBuf,
    /// Camera JSON with `K`, `RT` and optional `canvas`.
    pub camera: PathBuf,
    /// Canvas as `N` or `WxH`; overrides the camera file and rescales its intrinsics.
    #[arg(long)]
    pub canvas: Option<String>,
    /// Longest sub-face edge; four pixel footprints when omitted.
    #[arg(long)]
    pub max_edge: Option<f64>,
    #[command(flatten)]
    pub metric: MetricOpts,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// `[-0.5, 0.5]³` with points taken as given.
    Unit,
    /// The feature frame the pipeline voxelizes the coarse cloud in.
    Feature,
}

#[derive(Args, Debug)]
pub struct VoxelizeArgs {
    /// Point cloud container (.lstg) or mesh (.obj/.off) to sample.
    pub input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_OCCUPANCY_RES)]
    pub res: usize,
    #[arg(long, value_enum, default_value_t = Frame::Feature)]
    pub frame: Frame,
    /// Surface samples when the input is a mesh.
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value = "occupancy.lstg")]
    pub name: String,
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingEntry(path.display().to_string()))
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::MissingEntry(path.display().to_string()))
    }
}

fn output_path(g: &GlobalOpts, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&g.out)?;
    Ok(g.out.join(name))
}

fn parse_schedule(s: &str) -> Result<Vec<NoiseBand>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|part| {
            let (f, r) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("schedule entry `{part}` is not `fraction:rho`")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("schedule entry `{part}` has a bad number")))
            };
            Ok(NoiseBand {
                fraction: num(f)?,
                rho: num(r)?,
            })
        })
        .collect()
}

fn parse_canvas(s: &str) -> Result<[usize; 2]> {
    let bad = || Error::Config(format!("canvas `{s}` is not `N` or `WxH`"));
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
    let [w, h] = match s.split_once(['x', 'X']) {
        Some((w, h)) => [parse(w)?, parse(h)?],
        None => {
            let n = parse(s)?;
            [n, n]
        }
    };
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok([w, h])
}

pub fn prep(g: &GlobalOpts, a: &PrepArgs) -> Result<()> {
    require_file(&a.mesh)?;
    let cfg = QuerySamplingConfig {
        n_total: a.n,
        schedule: parse_schedule(&a.schedule)?,
        fill_remainder: !a.no_fill,
        max_band: a.delta,
        scale: a.sdf_scale,
        seed: g.seed,
    };
    cfg.validate()?;
    if a.coarse_n == 0 || a.coarse_n > a.surface_n {
        return Err(Error::BadCount {
            got: a.coarse_n,
            max: a.surface_n,
        });
    }
    let loaded = load_mesh_auto(&a.mesh)?;
    let (mesh, transform) = normalize_unit_cube(&loaded.mesh)?;
    info!(
        "normalized {} faces: scale {}, translation {:?}",
        mesh.faces.len(),
        transform.scale,
        transform.translation
    );
    let queries = generate_query_set(&mesh, &cfg)?;
    let dense = sample_surface(&mesh, a.surface_n, g.seed.wrapping_add(1))?;
    let coarse = farthest_point_sample(&dense, a.coarse_n)?;
    let moved = PointCloud::new(disentangle_queries(&dense.points));
    let occupancy = voxelize_points(&moved, a.occupancy_res, feature_extent())?;
    if occupancy.clamped > 0 {
        warn!("{} surface points were clamped into the occupancy grid", occupancy.clamped);
    }

    mesh.write_obj(output_path(g, PREP_MESH)?)?;
    let mut qc = queries.to_container()?;
    qc.set_meta("normalize_scale", transform.scale.to_string());
    let t = transform.translation;
    qc.set_meta("normalize_translation", format!("{} {} {}", t.x, t.y, t.z));
    qc.write(output_path(g, PREP_QUERIES)?)?;
    coarse.to_container()?.write(output_path(g, PREP_COARSE)?)?;
    occupancy.grid.to_container()?.write(output_path(g, PREP_OCCUPANCY)?)?;
    println!(
        "wrote {} queries, {} coarse points, {} occupied cells to {}",
        queries.len(),
        coarse.len(),
        occupancy.grid.occupied_count(),
        g.out.display()
    );
    Ok(())
}

pub fn infer(g: &GlobalOpts, a: &InferArgs) -> Result<()> {
    require_dir(&a.inputs)?;
    require_dir(&a.bundles)?;
    if !(a.extent > 0.0) {
        return Err(Error::Config(format!("extent must be positive, got {}", a.extent)));
    }
    let cfg = PipelineConfig {
        occupancy_res: a.occupancy_res,
        grid: IsoGridSpec {
            resolution: [a.res; 3],
            extent: Aabb::cube(a.extent),
            iso: a.iso,
        },
        neighbor_d: a.d,
        batch_size: a.batch_size,
    };
    cfg.grid.validate()?;
    let inputs = PipelineInputs::load(&a.inputs, &a.bundles)?;
    let sdf = run_pipeline(&inputs, &cfg)?;
    if a.dump_sdf {
        sdf.to_container()?.write(output_path(g, "sdf.lstg")?)?;
    }
    write_extraction(g, &sdf, a.iso, &a.name)
}

fn write_extraction(g: &GlobalOpts, sdf: &ScalarGrid, iso: f64, name: &str) -> Result<()> {
    let ex = marching_cubes(sdf, iso).map_err(|e| e.at_stage("extract"))?;
    if ex.empty {
        warn!("the grid has no crossing at iso {iso}; writing an empty mesh");
    }
    let path = output_path(g, name)?;
    ex.mesh.write_obj(&path)?;
    println!(
        "wrote {} vertices, {} faces to {}",
        ex.mesh.vertices.len(),
        ex.mesh.faces.len(),
        path.display()
    );
    Ok(())
}

pub fn extract(g: &GlobalOpts, a: &ExtractArgs) -> Result<()> {
    require_file(&a.sdf)?;
    let grid = ScalarGrid::from_container(&Container::read(&a.sdf)?)?;
    write_extraction(g, &grid, a.iso, &a.name)
}

fn eval_config(g: &GlobalOpts, m: &MetricOpts) -> EvalConfig {
    EvalConfig {
        fscore_d: m.fscore_d,
        iou_res: m.iou_res,
        samples: m.samples,
        reduction: m.reduction.into(),
        seed: g.seed,
    }
}

fn load_pair(pred: &Path, gt: &Path) -> Result<(TriMesh, TriMesh)> {
    require_file(pred)?;
    require_file(gt)?;
    Ok((load_mesh_auto(pred)?.mesh, load_mesh_auto(gt)?.mesh))
}

fn write_report(g: &GlobalOpts, report: &MetricReport, name: &str) -> Result<()> {
    let path = output_path(g, name)?;
    fs::write(&path, report.to_json() + "\n")?;
    print!("{}", report.to_table());
    info!("report written to {}", path.display());
    Ok(())
}

pub fn eval(g: &GlobalOpts, a: &EvalArgs) -> Result<()> {
    let (pred, gt) = load_pair(&a.pred, &a.gt)?;
    let report = evaluate_meshes(&pred, &gt, &eval_config(g, &a.metric))?;
    write_report(g, &report, &a.metric.report)
}

pub fn eval_occluded(g: &GlobalOpts, a: &EvalOccludedArgs) -> Result<()> {
    require_file(&a.camera)?;
    let mut cam = CameraSpec::from_json(&fs::read_to_string(&a.camera)?)?;
    if let Some(c) = &a.canvas {
        cam = cam.with_canvas(parse_canvas(c)?)?;
    }
    let (pred, gt) = load_pair(&a.pred, &a.gt)?;
    let ecfg = eval_config(g, &a.metric);
    let ocfg = OcclusionConfig {
        samples: ecfg.samples,
        fscore_d: ecfg.fscore_d,
        iou_res: ecfg.iou_res,
        reduction: ecfg.reduction,
        max_edge: a.max_edge,
        seed: g.seed,
    };
    let occluded = occlusion::eval_occluded(&pred, &gt, &cam, &ocfg)?;
    let mut report = evaluate_meshes(&pred, &gt, &ecfg)?;
    report.decisions.insert("canvas".into(), serde_json::json!(cam.canvas));
    report.decisions.insert(
        "max_edge".into(),
        match a.max_edge {
            Some(v) => serde_json::json!(v),
            None => serde_json::json!("4 pixel footprints at the depth of the bounding-box centre"),
        },
    );
    report.occluded = Some(occluded);
    write_report(g, &report, &a.metric.report)
}

pub fn voxelize(g: &GlobalOpts, a: &VoxelizeArgs) -> Result<()> {
    require_file(&a.input)?;
    let is_container = a
        .input
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("lstg"));
    let cloud = if is_container {
        PointCloud::from_container(&Container::read(&a.input)?)?
    } else {
        sample_surface(&load_mesh_auto(&a.input)?.mesh, a.samples, g.seed)?
    };
    let (cloud, extent) = match a.frame {
        Frame::Unit => (cloud, Aabb::unit()),
        Frame::Feature => (PointCloud::new(disentangle_queries(&cloud.points)), feature_extent()),
    };
    let vox = voxelize_points(&cloud, a.res, extent)?;
    if vox.clamped > 0 {
        warn!("{} points were clamped into the grid", vox.clamped);
    }
    let path = output_path(g, &a.name)?;
    vox.grid.to_container()?.write(&path)?;
    println!(
        "wrote {} occupied of {} cells ({} clamped) to {}",
        vox.grid.occupied_count(),
        a.res * a.res * a.res,
        vox.clamped,
        path.display()
    );
    Ok(())
}
