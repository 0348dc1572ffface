//! Zero-level-set triangulation of sampled scalar fields.
//!
//! Uses the classic 256-case marching cubes table without an asymptotic decider.
//! Ambiguous cube faces therefore follow the table's fixed choice. Vertices are
//! placed by linear interpolation on lattice edges and shared between cubes through
//! a canonical edge key, so the output is an indexed, crack-free mesh.

mod tables;

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::grids::ScalarGrid;
use crate::mesh::TriMesh;

pub use tables::{EDGE_TABLE, TRI_TABLE};

/// Corner offsets of a cube, in table order.
pub const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs joined by each cube edge, in table order.
pub const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Lattice on which an implicit field is evaluated and contoured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsoGridSpec {
    pub resolution: [usize; 3],
    pub extent: Aabb,
    pub iso: f64,
}

impl Default for IsoGridSpec {
    fn default() -> Self {
        Self {
            resolution: [128; 3],
            extent: Aabb::unit(),
            iso: 0.0,
        }
    }
}

impl IsoGridSpec {
    pub fn cubic(resolution: usize) -> Self {
        Self {
            resolution: [resolution; 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution.iter().any(|&r| r < 2) {
            return Err(Error::Config(format!(
                "iso grid resolution must be >= 2 per axis, got {:?}",
                self.resolution
            )));
        }
        let s = self.extent.size();
        if !(s.x > 0.0 && s.y > 0.0 && s.z > 0.0) {
            return Err(Error::DegenerateExtent);
        }
        if !self.iso.is_finite() {
            return Err(Error::Config("iso value must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Wraps per-point values laid out as [`build_query_grid`] orders them.
    pub fn grid_from_values(&self, values: Vec<f32>) -> Result<ScalarGrid> {
        ScalarGrid::new(self.resolution, 1, self.extent, values)
    }
}

/// Cell-center lattice points, `x` slowest and `z` fastest.
pub fn build_query_grid(spec: &IsoGridSpec) -> Result<Vec<Vec3>> {
    spec.validate()?;
    let [nx, ny, nz] = spec.resolution;
    let cell = spec.extent.size().component_div(&Vec3::new(nx as f64, ny as f64, nz as f64));
    let min = spec.extent.min;
    let mut out = Vec::with_capacity(spec.len());
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                out.push(Vec3::new(
                    min.x + (i as f64 + 0.5) * cell.x,
                    min.y + (j as f64 + 0.5) * cell.y,
                    min.z + (k as f64 + 0.5) * cell.z,
                ));
            }
        }
    }
    Ok(out)
}

/// Result of [`marching_cubes`]. `empty` is set when the field never crosses the
/// iso level; the mesh is then empty too.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub mesh: TriMesh,
    pub empty: bool,
}

/// Extracts the `iso` level set of a one-channel grid. Corners with value below
/// `iso` count as inside; triangles wind counter-clockwise seen from outside.
pub fn marching_cubes(field: &ScalarGrid, iso: f64) -> Result<Extraction> {
    if field.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "marching cubes needs one channel, got {}",
            field.channels()
        )));
    }
    if !iso.is_finite() {
        return Err(Error::Config("iso value must be finite".into()));
    }
    let [nx, ny, nz] = field.dims();
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(Error::ShapeMismatch(format!(
            "marching cubes needs at least 2 samples per axis, got {:?}",
            field.dims()
        )));
    }
    let data = field.data();
    let value = |i: usize, j: usize, k: usize| data[(i * ny + j) * nz + k] as f64;

    // each x-slab emits triangles as triples of edge keys
    let slabs: Vec<Vec<[u64; 3]>> = (0..nx - 1)
        .into_par_iter()
        .map(|i| {
            let mut tris = Vec::new();
            for j in 0..ny - 1 {
                for k in 0..nz - 1 {
                    let mut case = 0usize;
                    for (c, o) in CORNERS.iter().enumerate() {
                        if value(i + o[0], j + o[1], k + o[2]) < iso {
                            case |= 1 << c;
                        }
                    }
                    if EDGE_TABLE[case] == 0 {
                        continue;
                    }
                    let row = &TRI_TABLE[case];
                    for t in row.chunks_exact(3) {
                        if t[0] < 0 {
                            break;
                        }
                        let key = |e: i8| edge_key([i, j, k], e as usize, ny, nz);
                        // table winding is clockwise from outside; swap to make it outward
                        tris.push([key(t[0]), key(t[2]), key(t[1])]);
                    }
                }
            }
            tris
        })
        .collect();

    let cell = field.cell_size();
    let origin = field.cell_center(0, 0, 0);
    let position = |key: u64| -> Vec3 {
        let axis = (key % 3) as usize;
        let lin = (key / 3) as usize;
        let a = [lin / (ny * nz), (lin / nz) % ny, lin % nz];
        let mut b = a;
        b[axis] += 1;
        let v0 = value(a[0], a[1], a[2]);
        let v1 = value(b[0], b[1], b[2]);
        let t = (iso - v0) / (v1 - v0);
        let mut p = origin + Vec3::new(a[0] as f64 * cell.x, a[1] as f64 * cell.y, a[2] as f64 * cell.z);
        p[axis] += t * cell[axis];
        p
    };

    let mut ids: HashMap<u64, u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for tris in slabs {
        for t in tris {
            let mut f = [0u32; 3];
            for (slot, &key) in f.iter_mut().zip(&t) {
                *slot = *ids.entry(key).or_insert_with(|| {
                    vertices.push(position(key));
                    (vertices.len() - 1) as u32
                });
            }
            let [a, b, c] = f.map(|v| vertices[v as usize]);
            if a == b || b == c || a == c {
                continue;
            }
            faces.push(f);
        }
    }
    let mesh = compact(vertices, faces);
    let empty = mesh.faces.is_empty();
    Ok(Extraction { mesh, empty })
}

/// Canonical key of cube edge `e` at cube `cube`: the lattice index of the lower
/// endpoint times three plus the edge axis.
fn edge_key(cube: [usize; 3], e: usize, ny: usize, nz: usize) -> u64 {
    let [c0, c1] = EDGES[e];
    let (p, q) = (CORNERS[c0], CORNERS[c1]);
    let axis = (0..3).find(|&a| p[a] != q[a]).expect("edges join distinct corners");
    let lo = [
        cube[0] + p[0].min(q[0]),
        cube[1] + p[1].min(q[1]),
        cube[2] + p[2].min(q[2]),
    ];
    let lin = (lo[0] * ny + lo[1]) * nz + lo[2];
    lin as u64 * 3 + axis as u64
}

fn compact(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> TriMesh {
    let mut remap = vec![u32::MAX; vertices.len()];
    let mut kept = Vec::new();
    let faces = faces
        .into_iter()
        .map(|f| {
            f.map(|v| {
                let slot = &mut remap[v as usize];
                if *slot == u32::MAX {
                    *slot = kept.len() as u32;
                    kept.push(vertices[v as usize]);
                }
                *slot
            })
        })
        .collect();
    TriMesh {
        vertices: kept,
        faces,
        tags: None,
    }
}
