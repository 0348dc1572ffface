//! Training losses and reconstruction metrics.
//!
//! Reported chamfer distances are scaled by 10³ and IoU / F-score are percentages.

pub mod kdtree;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::grids::{ScalarGrid, VoxelGrid};
use crate::mesh::{sample_surface, PointCloud, TriMesh};
use crate::sdf::{Accel, SdfOracle};

pub use kdtree::KdTree;

/// Scale applied to chamfer values in reports.
pub const CD_REPORT_SCALE: f64 = 1e3;
pub const DEFAULT_FSCORE_D: f64 = 0.01;
pub const DEFAULT_IOU_RES: usize = 64;
pub const DEFAULT_BCE_GAMMA: f64 = 0.9;
pub const BCE_EPS: f64 = 1e-7;

/// Squared distance from every point of `from` to its nearest neighbour in `to`.
pub fn nn_distances_squared(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    let tree = KdTree::new(to);
    from.par_iter()
        .map(|p| tree.nearest(p).map_or(f64::INFINITY, |(_, d)| d))
        .collect()
}

fn check_clouds(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(())
}

/// Sum over both directions of squared nearest-neighbour distances.
pub fn chamfer_loss(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_clouds(a, b)?;
    let ab: f64 = nn_distances_squared(&a.points, &b.points).iter().sum();
    let ba: f64 = nn_distances_squared(&b.points, &a.points).iter().sum();
    Ok(ab + ba)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl Reduction {
    fn reduce(self, v: &[f64]) -> f64 {
        let s: f64 = v.iter().sum();
        match self {
            Reduction::Sum => s,
            Reduction::Mean => s / v.len() as f64,
        }
    }
}

/// Un-squared nearest-neighbour distances, reduced per side, then summed over sides.
pub fn chamfer_metric(a: &PointCloud, b: &PointCloud, reduction: Reduction) -> Result<f64> {
    chamfer_with(a, b, reduction, false)
}

/// Squared counterpart of [`chamfer_metric`].
pub fn chamfer_metric_squared(a: &PointCloud, b: &PointCloud, reduction: Reduction) -> Result<f64> {
    chamfer_with(a, b, reduction, true)
}

fn chamfer_with(a: &PointCloud, b: &PointCloud, reduction: Reduction, squared: bool) -> Result<f64> {
    check_clouds(a, b)?;
    let side = |x: &PointCloud, y: &PointCloud| {
        let mut d = nn_distances_squared(&x.points, &y.points);
        if !squared {
            d.iter_mut().for_each(|v| *v = v.sqrt());
        }
        reduction.reduce(&d)
    };
    Ok(side(a, b) + side(b, a))
}

/// Precision, recall and F-score, all in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

pub fn fscore(pred: &PointCloud, gt: &PointCloud, d: f64) -> Result<FScore> {
    check_clouds(pred, gt)?;
    if !(d > 0.0) {
        return Err(Error::Config(format!("F-score threshold must be positive, got {d}")));
    }
    let within = |x: &PointCloud, y: &PointCloud| {
        let hits = nn_distances_squared(&x.points, &y.points)
            .iter()
            .filter(|&&v| v.sqrt() < d)
            .count();
        hits as f64 / x.len() as f64
    };
    let p = within(pred, gt);
    let r = within(gt, pred);
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    Ok(FScore {
        precision: 100.0 * p,
        recall: 100.0 * r,
        f: 100.0 * f,
    })
}

/// Intersection over union of two occupancy grids on the same lattice, in percent.
/// Two empty grids score 100.
pub fn voxel_iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if !a.same_lattice(b) {
        return Err(Error::GridMismatch(format!(
            "resolution {} over {:?} vs {} over {:?}",
            a.resolution(),
            a.extent(),
            b.resolution(),
            b.extent()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x != 0 && y != 0) as usize;
        union += (x != 0 || y != 0) as usize;
    }
    Ok(if union == 0 {
        100.0
    } else {
        100.0 * inter as f64 / union as f64
    })
}

/// Cells of a `resolution³` lattice over `extent` whose centers lie inside `mesh`.
pub fn interior_voxels(mesh: &TriMesh, resolution: usize, extent: Aabb) -> Result<VoxelGrid> {
    mesh.ensure_watertight()?;
    let oracle = SdfOracle::new(mesh)?;
    let probe = VoxelGrid::empty(resolution, extent)?;
    let cell = probe.cell_size();
    let plane = resolution * resolution;
    let data = (0..resolution * plane)
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx / plane, (idx / resolution) % resolution, idx % resolution);
            let p = extent.min + Vec3::new((i as f64 + 0.5) * cell.x, (j as f64 + 0.5) * cell.y, (k as f64 + 0.5) * cell.z);
            oracle.is_inside(&p, Accel::Bvh).map(|inside| inside as u8)
        })
        .collect::<Result<Vec<u8>>>()?;
    VoxelGrid::from_data(resolution, extent, data)
}

/// Volumetric IoU of two closed meshes, discretized on a lattice over the union of
/// their bounding boxes.
pub fn mesh_iou(a: &TriMesh, b: &TriMesh, resolution: usize) -> Result<f64> {
    a.ensure_watertight()?;
    b.ensure_watertight()?;
    let extent = a.bounds().union(&b.bounds());
    voxel_iou(
        &interior_voxels(a, resolution, extent)?,
        &interior_voxels(b, resolution, extent)?,
    )
}

/// Weighted binary cross-entropy between a binary grid and predicted probabilities.
pub fn occupancy_bce(v: &VoxelGrid, v_hat: &ScalarGrid, gamma: f64) -> Result<f64> {
    let m = v.resolution();
    if v_hat.channels() != 1 || v_hat.dims() != [m; 3] {
        return Err(Error::GridMismatch(format!(
            "target {m}³ vs prediction {:?} x {}",
            v_hat.dims(),
            v_hat.channels()
        )));
    }
    let sum: f64 = v
        .data()
        .par_iter()
        .zip(v_hat.data().par_iter())
        .map(|(&t, &p)| {
            let p = (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
            if t != 0 {
                gamma * p.ln()
            } else {
                (1.0 - gamma) * (1.0 - p).ln()
            }
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(-sum / v.data().len() as f64)
}

pub fn sdf_mse(sigma: &[f64], delta: &[f64]) -> Result<f64> {
    if sigma.len() != delta.len() {
        return Err(Error::LengthMismatch {
            left: sigma.len(),
            right: delta.len(),
        });
    }
    if sigma.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = sigma.iter().zip(delta).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / sigma.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub bce: f64,
    pub sdf_mse: f64,
    pub total: f64,
}

/// Occupancy BCE plus SDF MSE.
pub fn combined_loss(v: &VoxelGrid, v_hat: &ScalarGrid, gamma: f64, sigma: &[f64], delta: &[f64]) -> Result<Losses> {
    let bce = occupancy_bce(v, v_hat, gamma)?;
    let mse = sdf_mse(sigma, delta)?;
    Ok(Losses {
        bce,
        sdf_mse: mse,
        total: bce + mse,
    })
}

/// Metrics restricted to occluded surfaces. `None` values mean an occluded part was empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccludedMetrics {
    pub cd_os: Option<f64>,
    pub iou_os: Option<f64>,
    pub f_os: Option<f64>,
    pub pred_occluded_fraction: f64,
    pub gt_occluded_fraction: f64,
    pub samples: usize,
    pub canvas: [usize; 2],
    pub max_edge_pred: f64,
    pub max_edge_gt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Un-squared chamfer distance, ×10³.
    pub cd: f64,
    /// Squared chamfer distance, ×10³.
    pub cd_squared: f64,
    pub iou: Option<f64>,
    pub fscore: f64,
    pub precision: f64,
    pub recall: f64,
    pub pred_points: usize,
    pub gt_points: usize,
    pub fscore_d: f64,
    pub iou_res: usize,
    pub reduction: Reduction,
    /// Every defaulted or ambiguous parameter behind the numbers above.
    pub decisions: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occluded: Option<OccludedMetrics>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    /// Aligned text table with one row per evaluated surface set.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>12} {:>12} {:>10} {:>10} {:>10} {:>10}",
            "", "CD(x1e3)", "CD2(x1e3)", "IoU(%)", "F(%)", "P(%)", "R(%)"
        );
        let _ = writeln!(
            s,
            "{:<10} {:>12} {:>12} {:>10} {:>10} {:>10} {:>10}",
            "all",
            fmt(Some(self.cd)),
            fmt(Some(self.cd_squared)),
            fmt(self.iou),
            fmt(Some(self.fscore)),
            fmt(Some(self.precision)),
            fmt(Some(self.recall))
        );
        if let Some(o) = &self.occluded {
            let _ = writeln!(
                s,
                "{:<10} {:>12} {:>12} {:>10} {:>10} {:>10} {:>10}",
                "occluded",
                fmt(o.cd_os),
                "-",
                fmt(o.iou_os),
                fmt(o.f_os),
                "-",
                "-"
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub fscore_d: f64,
    pub iou_res: usize,
    pub samples: usize,
    pub reduction: Reduction,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fscore_d: DEFAULT_FSCORE_D,
            iou_res: DEFAULT_IOU_RES,
            samples: 100_000,
            reduction: Reduction::Mean,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn decisions(&self) -> BTreeMap<String, serde_json::Value> {
        let mut d = BTreeMap::new();
        d.insert("fscore_d".into(), self.fscore_d.into());
        d.insert("iou_res".into(), self.iou_res.into());
        d.insert("samples".into(), self.samples.into());
        d.insert("reduction".into(), serde_json::to_value(self.reduction).expect("enum"));
        d.insert("seed".into(), self.seed.into());
        d.insert("sampling".into(), "area-uniform, same seed for both meshes".into());
        d.insert("iou_lattice".into(), "cell centers over the union bounding box".into());
        d.insert("chamfer_form".into(), "per-side reduction then sum of sides".into());
        d
    }
}

/// Surface-sampled chamfer and F-score plus volumetric IoU. An open mesh yields a
/// null IoU instead of an error.
pub fn evaluate_meshes(pred: &TriMesh, gt: &TriMesh, cfg: &EvalConfig) -> Result<MetricReport> {
    let a = sample_surface(pred, cfg.samples, cfg.seed)?;
    let b = sample_surface(gt, cfg.samples, cfg.seed)?;
    let cd = chamfer_metric(&a, &b, cfg.reduction)?;
    let cd2 = chamfer_metric_squared(&a, &b, cfg.reduction)?;
    let f = fscore(&a, &b, cfg.fscore_d)?;
    let iou = match mesh_iou(pred, gt, cfg.iou_res) {
        Ok(v) => Some(v),
        Err(e @ Error::OpenMesh { .. }) => {
            warn!("IoU skipped: {e}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        cd: cd * CD_REPORT_SCALE,
        cd_squared: cd2 * CD_REPORT_SCALE,
        iou,
        fscore: f.f,
        precision: f.precision,
        recall: f.recall,
        pred_points: a.len(),
        gt_points: b.len(),
        fscore_d: cfg.fscore_d,
        iou_res: cfg.iou_res,
        reduction: cfg.reduction,
        decisions: cfg.decisions(),
        occluded: None,
    })
}
