//! Camera-aligned visibility and metrics on the occluded part of a surface.
//!
//! One primary ray is cast through every pixel center; the closest face hit by a
//! ray is visible. Faces are first refined so their edges stay below a few pixel
//! footprints, which lets the visible/occluded boundary follow the silhouette.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bvh::Bvh;
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Ray, Vec3};
use crate::grids::voxelize_points;
use crate::mesh::{sample_surface, PointCloud, TriMesh};
use crate::metrics::{chamfer_metric, fscore, voxel_iou, OccludedMetrics, Reduction, CD_REPORT_SCALE};

pub const DEFAULT_CANVAS: usize = 4096;
pub const MAX_SUBDIVISION_DEPTH: usize = 8;
/// Default sub-face edge bound, in pixel footprints at the object's depth.
pub const DEFAULT_EDGE_PIXELS: f64 = 4.0;

type Mat3 = nalgebra::Matrix3<f64>;

#[derive(Debug, Serialize, Deserialize)]
struct CameraJson {
    #[serde(rename = "K")]
    k: Vec<f64>,
    #[serde(rename = "RT")]
    rt: Vec<f64>,
    #[serde(default = "default_canvas")]
    canvas: [usize; 2],
}

fn default_canvas() -> [usize; 2] {
    [DEFAULT_CANVAS; 2]
}

/// Pinhole camera: intrinsics `K`, world-to-camera rigid transform `[R | t]`
/// (OpenCV axes: x right, y down, z forward), and canvas size in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSpec {
    pub k: Mat3,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub canvas: [usize; 2],
}

impl CameraSpec {
    pub fn new(k: Mat3, rotation: Mat3, translation: Vec3, canvas: [usize; 2]) -> Result<Self> {
        let cam = Self {
            k,
            rotation,
            translation,
            canvas,
        };
        cam.validate()?;
        Ok(cam)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidCamera(m));
        if !(self.k[(0, 0)] > 0.0 && self.k[(1, 1)] > 0.0) {
            return bad("focal lengths must be positive".into());
        }
        if self.k.iter().any(|v| !v.is_finite()) || self.k.try_inverse().is_none() {
            return bad("intrinsics are not invertible".into());
        }
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        if !(err <= 1e-6) || !(self.rotation.determinant() > 0.0) {
            return bad(format!("rotation is not orthonormal (error {err:e})"));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return bad("translation is not finite".into());
        }
        if self.canvas.contains(&0) {
            return bad("canvas must be non-empty".into());
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, principal point at the canvas center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, canvas: [usize; 2]) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let k = Mat3::new(
            focal,
            0.0,
            canvas[0] as f64 / 2.0,
            0.0,
            focal,
            canvas[1] as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(k, rotation, -(rotation * eye), canvas)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: CameraJson = serde_json::from_str(text).map_err(|e| Error::InvalidCamera(format!("JSON: {e}")))?;
        if raw.k.len() != 9 {
            return Err(Error::InvalidCamera(format!("`K` needs 9 values, got {}", raw.k.len())));
        }
        if raw.rt.len() != 16 {
            return Err(Error::InvalidCamera(format!("`RT` needs 16 values, got {}", raw.rt.len())));
        }
        let last = &raw.rt[12..16];
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > 1e-6 {
            return Err(Error::InvalidCamera("`RT` last row must be 0 0 0 1".into()));
        }
        let k = Mat3::from_row_slice(&raw.k);
        let r = &raw.rt;
        let rotation = Mat3::new(r[0], r[1], r[2], r[4], r[5], r[6], r[8], r[9], r[10]);
        let translation = Vec3::new(r[3], r[7], r[11]);
        Self::new(k, rotation, translation, raw.canvas)
    }

    pub fn to_json(&self) -> String {
        let r = &self.rotation;
        let t = &self.translation;
        let raw = CameraJson {
            k: (0..9).map(|i| self.k[(i / 3, i % 3)]).collect(),
            rt: vec![
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                t.x,
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                t.y,
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
                t.z,
                0.0,
                0.0,
                0.0,
                1.0,
            ],
            canvas: self.canvas,
        };
        serde_json::to_string(&raw).expect("plain data")
    }

    pub fn with_canvas(&self, canvas: [usize; 2]) -> Result<Self> {
        let sx = canvas[0] as f64 / self.canvas[0] as f64;
        let sy = canvas[1] as f64 / self.canvas[1] as f64;
        let mut k = self.k;
        k[(0, 0)] *= sx;
        k[(0, 1)] *= sx;
        k[(0, 2)] *= sx;
        k[(1, 1)] *= sy;
        k[(1, 2)] *= sy;
        Self::new(k, self.rotation, self.translation, canvas)
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Depth of a world point along the viewing axis.
    pub fn depth(&self, p: &Vec3) -> f64 {
        (self.rotation * p + self.translation).z
    }

    /// Pixel coordinates of a world point in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<[f64; 2]> {
        let c = self.k * (self.rotation * p + self.translation);
        (c.z > 0.0).then(|| [c.x / c.z, c.y / c.z])
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn pixel_ray(&self, px: usize, py: usize) -> Ray {
        let kinv = self.k.try_inverse().expect("validated invertible");
        let d_cam = kinv * Vec3::new(px as f64 + 0.5, py as f64 + 0.5, 1.0);
        Ray::new(self.center(), (self.rotation.transpose() * d_cam).normalize())
    }

    /// World-space size of one pixel at depth `z`.
    pub fn pixel_footprint(&self, z: f64) -> f64 {
        z / self.k[(0, 0)].min(self.k[(1, 1)])
    }
}

/// Closest-hit face per pixel over the window of the canvas that can see the mesh.
#[derive(Debug, Clone)]
pub struct ItemBuffer {
    /// `[x0, x1, y0, y1]`, half-open.
    pub window: [usize; 4],
    /// Row-major face ids, `u32::MAX` where the ray misses.
    pub faces: Vec<u32>,
}

impl ItemBuffer {
    /// Face seen through pixel `(px, py)`.
    pub fn get(&self, px: usize, py: usize) -> Option<u32> {
        let [x0, x1, y0, y1] = self.window;
        if px < x0 || px >= x1 || py < y0 || py >= y1 {
            return None;
        }
        let f = self.faces[(py - y0) * (x1 - x0) + (px - x0)];
        (f != u32::MAX).then_some(f)
    }
}

/// Casts one ray through every pixel center and records the closest face.
pub fn render_item_buffer(mesh: &TriMesh, cam: &CameraSpec) -> Result<ItemBuffer> {
    let bounds = mesh.bounds();
    if bounds.contains(&cam.center()) {
        return Err(Error::CameraInsideMesh);
    }
    let bvh = Bvh::build(mesh)?;
    Ok(render_with(&bvh, &bounds, cam))
}

fn render_with(bvh: &Bvh, bounds: &Aabb, cam: &CameraSpec) -> ItemBuffer {
    let window = pixel_window(bounds, cam);
    let [x0, x1, y0, y1] = window;
    let kinv = cam.k.try_inverse().expect("validated invertible");
    let rt = cam.rotation.transpose();
    let origin = cam.center();
    let mut faces = vec![u32::MAX; (x1 - x0) * (y1 - y0)];
    if x1 > x0 {
        faces.par_chunks_mut(x1 - x0).enumerate().for_each(|(row, out)| {
            let py = y0 + row;
            for (slot, px) in out.iter_mut().zip(x0..x1) {
                let d = rt * (kinv * Vec3::new(px as f64 + 0.5, py as f64 + 0.5, 1.0));
                if let Some(hit) = bvh.closest_hit(&Ray::new(origin, d.normalize()), f64::INFINITY) {
                    *slot = hit.face as u32;
                }
            }
        });
    }
    ItemBuffer { window, faces }
}

/// Marks every face that is the closest hit of at least one pixel ray.
pub fn cast_visibility(mesh: &TriMesh, cam: &CameraSpec) -> Result<Vec<bool>> {
    let buf = render_item_buffer(mesh, cam)?;
    let mut flags = vec![false; mesh.faces.len()];
    for &f in &buf.faces {
        if f != u32::MAX {
            flags[f as usize] = true;
        }
    }
    Ok(flags)
}

/// Pixel rectangle `[x0, x1, y0, y1]` that can see `bounds`; the whole canvas when
/// part of the box lies behind the camera.
fn pixel_window(bounds: &Aabb, cam: &CameraSpec) -> [usize; 4] {
    let [w, h] = cam.canvas;
    let full = [0, w, 0, h];
    if bounds.is_empty() {
        return [0, 0, 0, 0];
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in 0..8 {
        let p = Vec3::new(
            if c & 1 == 0 { bounds.min.x } else { bounds.max.x },
            if c & 2 == 0 { bounds.min.y } else { bounds.max.y },
            if c & 4 == 0 { bounds.min.z } else { bounds.max.z },
        );
        match cam.project(&p) {
            Some(uv) => {
                for a in 0..2 {
                    lo[a] = lo[a].min(uv[a]);
                    hi[a] = hi[a].max(uv[a]);
                }
            }
            None => return full,
        }
    }
    let clip = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
    // one pixel of margin on each side
    [
        clip(lo[0].floor() - 1.0, w),
        clip(hi[0].ceil() + 1.0, w),
        clip(lo[1].floor() - 1.0, h),
        clip(hi[1].ceil() + 1.0, h),
    ]
}

/// Midpoint 1-to-4 refinement of every face until all edges are at most
/// `max_edge`. Sub-faces carry their parent face index as tag. The result is a
/// triangle soup; vertices are not shared between parent faces.
pub fn subdivide(mesh: &TriMesh, max_edge: f64) -> Result<TriMesh> {
    if !(max_edge > 0.0) {
        return Err(Error::Config(format!("max edge must be positive, got {max_edge}")));
    }
    let mut depths = Vec::with_capacity(mesh.faces.len());
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(f);
        let longest = (b - a).norm().max((c - b).norm()).max((a - c).norm());
        let mut depth = 0usize;
        let mut edge = longest;
        while edge > max_edge {
            edge *= 0.5;
            depth += 1;
            if depth > MAX_SUBDIVISION_DEPTH {
                return Err(Error::SubdivisionOverflow {
                    depth,
                    limit: MAX_SUBDIVISION_DEPTH,
                });
            }
        }
        depths.push(depth);
    }
    let parts: Vec<Vec<[Vec3; 3]>> = (0..mesh.faces.len())
        .into_par_iter()
        .map(|f| {
            let mut tris = vec![mesh.triangle(f)];
            for _ in 0..depths[f] {
                tris = tris
                    .into_iter()
                    .flat_map(|[a, b, c]| {
                        let (ab, bc, ca) = ((a + b) * 0.5, (b + c) * 0.5, (c + a) * 0.5);
                        [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
                    })
                    .collect();
            }
            tris
        })
        .collect();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut tags = Vec::new();
    for (parent, tris) in parts.into_iter().enumerate() {
        for t in tris {
            let base = vertices.len() as u32;
            vertices.extend_from_slice(&t);
            faces.push([base, base + 1, base + 2]);
            tags.push(parent as i32);
        }
    }
    Ok(TriMesh {
        vertices,
        faces,
        tags: Some(tags),
    })
}

/// Sub-face edge bound of `pixels` footprints at the depth of the mesh's box center.
pub fn default_max_edge(mesh: &TriMesh, cam: &CameraSpec, pixels: f64) -> f64 {
    let z = cam.depth(&mesh.bounds().center()).abs();
    pixels * cam.pixel_footprint(z)
}

#[derive(Debug, Clone)]
pub struct SurfaceSplit {
    pub visible: TriMesh,
    pub occluded: TriMesh,
    pub visible_area: f64,
    pub occluded_area: f64,
    pub max_edge: f64,
}

impl SurfaceSplit {
    pub fn occluded_fraction(&self) -> f64 {
        let total = self.visible_area + self.occluded_area;
        if total > 0.0 {
            self.occluded_area / total
        } else {
            0.0
        }
    }
}

/// Refines the mesh, then splits sub-faces into visible and occluded sets. A
/// sub-face is visible when some pixel ray hits it first, or when it projects into
/// the canvas and the ray through its centroid is unobstructed. `max_edge = None` uses
/// [`DEFAULT_EDGE_PIXELS`] footprints.
pub fn separate_surfaces(mesh: &TriMesh, cam: &CameraSpec, max_edge: Option<f64>) -> Result<SurfaceSplit> {
    let max_edge = max_edge.unwrap_or_else(|| default_max_edge(mesh, cam, DEFAULT_EDGE_PIXELS));
    let fine = subdivide(mesh, max_edge)?;
    let bounds = fine.bounds();
    if bounds.contains(&cam.center()) {
        return Err(Error::CameraInsideMesh);
    }
    let bvh = Bvh::build(&fine)?;
    let buf = render_with(&bvh, &bounds, cam);
    let mut visible = vec![false; fine.faces.len()];
    for &f in &buf.faces {
        if f != u32::MAX {
            visible[f as usize] = true;
        }
    }
    // sub-faces smaller than a pixel can fall between pixel centers, so an
    // in-frame sub-face whose centroid is unobstructed also counts as seen
    let origin = cam.center();
    let [cw, ch] = cam.canvas;
    visible.par_iter_mut().enumerate().for_each(|(f, v)| {
        if *v {
            return;
        }
        let [a, b, c] = fine.triangle(f);
        let centroid = (a + b + c) / 3.0;
        match cam.project(&centroid) {
            Some([u, w]) if u >= 0.0 && w >= 0.0 && u < cw as f64 && w < ch as f64 => {}
            _ => return,
        }
        let to = centroid - origin;
        let dist = to.norm();
        let ray = Ray::new(origin, to / dist);
        *v = match bvh.closest_hit(&ray, dist * (1.0 + 1e-9)) {
            None => true,
            Some(hit) => hit.face == f || hit.t >= dist * (1.0 - 1e-9),
        };
    });
    let hidden: Vec<bool> = visible.iter().map(|v| !v).collect();
    let areas = fine.face_areas();
    let (mut va, mut oa) = (0.0, 0.0);
    for (a, &v) in areas.iter().zip(&visible) {
        if v {
            va += a;
        } else {
            oa += a;
        }
    }
    Ok(SurfaceSplit {
        visible: fine.select_faces(&visible),
        occluded: fine.select_faces(&hidden),
        visible_area: va,
        occluded_area: oa,
        max_edge,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionConfig {
    pub samples: usize,
    pub fscore_d: f64,
    pub iou_res: usize,
    pub reduction: Reduction,
    pub max_edge: Option<f64>,
    pub seed: u64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            fscore_d: 0.01,
            iou_res: 64,
            reduction: Reduction::Mean,
            max_edge: None,
            seed: 0,
        }
    }
}

/// Chamfer, F-score, and voxel IoU between the occluded parts of two meshes seen
/// by the same camera. Metrics are `None` when either occluded part is empty.
pub fn eval_occluded(pred: &TriMesh, gt: &TriMesh, cam: &CameraSpec, cfg: &OcclusionConfig) -> Result<OccludedMetrics> {
    let sp = separate_surfaces(pred, cam, cfg.max_edge)?;
    let sg = separate_surfaces(gt, cam, cfg.max_edge)?;
    let mut out = OccludedMetrics {
        cd_os: None,
        iou_os: None,
        f_os: None,
        pred_occluded_fraction: sp.occluded_fraction(),
        gt_occluded_fraction: sg.occluded_fraction(),
        samples: cfg.samples,
        canvas: cam.canvas,
        max_edge_pred: sp.max_edge,
        max_edge_gt: sg.max_edge,
    };
    if !(sp.occluded_area > 0.0 && sg.occluded_area > 0.0) {
        log::warn!("occluded surface is empty; occluded metrics are null");
        return Ok(out);
    }
    let a = sample_surface(&sp.occluded, cfg.samples, cfg.seed)?;
    let b = sample_surface(&sg.occluded, cfg.samples, cfg.seed)?;
    out.cd_os = Some(chamfer_metric(&a, &b, cfg.reduction)? * CD_REPORT_SCALE);
    out.f_os = Some(fscore(&a, &b, cfg.fscore_d)?.f);
    let extent = padded(a.bounds().union(&b.bounds()));
    let va = voxelize_points(&a, cfg.iou_res, extent)?.grid;
    let vb = voxelize_points(&b, cfg.iou_res, extent)?.grid;
    out.iou_os = Some(voxel_iou(&va, &vb)?);
    Ok(out)
}

/// Gives flat axes a small thickness so cells stay well defined.
fn padded(b: Aabb) -> Aabb {
    let pad = 1e-9 * b.size().norm().max(1e-9);
    let mut out = b;
    for a in 0..3 {
        if out.max[a] - out.min[a] <= pad {
            out.min[a] -= pad;
            out.max[a] += pad;
        }
    }
    out
}

/// Surface samples of the occluded part, for inspection and plotting.
pub fn occluded_samples(mesh: &TriMesh, cam: &CameraSpec, max_edge: Option<f64>, n: usize, seed: u64) -> Result<Option<PointCloud>> {
    let s = separate_surfaces(mesh, cam, max_edge)?;
    if s.occluded.faces.is_empty() {
        return Ok(None);
    }
    sample_surface(&s.occluded, n, seed).map(Some)
}
