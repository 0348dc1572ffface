//! Dense voxel and feature grids, occupancy discretization, and the sampling
//! kernels used to pull per-query features out of them.
//!
//! Grid samples live at cell centers: sample `(i, j, k)` of a grid with extent
//! `[min, max]` and `n` cells per axis sits at `min + (i + 0.5) * (max - min) / n`.
//! Trilinear interpolation blends the eight surrounding centers and clamps to the
//! outermost centers outside the lattice.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::lstg::Container;
use crate::mesh::PointCloud;
use crate::tensor::Tensor;

/// Default occupancy resolution for the coarse-cloud grid.
pub const DEFAULT_OCCUPANCY_RES: usize = 128;

/// Binary occupancy on an `M³` lattice, `z` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    resolution: usize,
    extent: Aabb,
    data: Vec<u8>,
}

impl VoxelGrid {
    pub fn empty(resolution: usize, extent: Aabb) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Config(format!("grid resolution must be >= 2, got {resolution}")));
        }
        Ok(Self {
            resolution,
            extent,
            data: vec![0; resolution.pow(3)],
        })
    }

    pub fn from_data(resolution: usize, extent: Aabb, data: Vec<u8>) -> Result<Self> {
        let mut g = Self::empty(resolution, extent)?;
        if data.len() != g.data.len() {
            return Err(Error::LengthMismatch {
                left: g.data.len(),
                right: data.len(),
            });
        }
        g.data = data.into_iter().map(|v| (v != 0) as u8).collect();
        Ok(g)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn extent(&self) -> &Aabb {
        &self.extent
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution + j) * self.resolution + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.index(i, j, k)] != 0
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, occupied: bool) {
        let idx = self.index(i, j, k);
        self.data[idx] = occupied as u8;
    }

    pub fn occupied_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn cell_size(&self) -> Vec3 {
        self.extent.size() / self.resolution as f64
    }

    pub fn same_lattice(&self, other: &VoxelGrid) -> bool {
        self.resolution == other.resolution && self.extent == other.extent
    }

    /// Occupancy as a one-channel `{0, 1}` field.
    pub fn to_scalar(&self) -> ScalarGrid {
        let r = self.resolution;
        ScalarGrid {
            dims: [r, r, r],
            channels: 1,
            extent: self.extent,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        write_extent(&mut c, &self.extent);
        let r = self.resolution;
        c.insert_u8("occupancy", &[r, r, r], self.data.clone())?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (dims, data) = c.u8("occupancy")?;
        if dims.len() != 3 || dims[0] != dims[1] || dims[1] != dims[2] {
            return Err(Error::ShapeMismatch(format!("occupancy dims {dims:?} are not cubic")));
        }
        Self::from_data(dims[0], read_extent(c)?, data.to_vec())
    }
}

fn write_extent(c: &mut Container, e: &Aabb) {
    c.set_meta("extent_min", format!("{} {} {}", e.min.x, e.min.y, e.min.z));
    c.set_meta("extent_max", format!("{} {} {}", e.max.x, e.max.y, e.max.z));
}

fn read_extent(c: &Container) -> Result<Aabb> {
    let parse = |key: &str| -> Result<Vec3> {
        let s = c
            .meta(key)
            .ok_or_else(|| Error::Container(format!("missing metadata `{key}`")))?;
        let v: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Container(format!("bad `{key}`: {s}"))))
            .collect::<Result<_>>()?;
        if v.len() != 3 {
            return Err(Error::Container(format!("bad `{key}`: {s}")));
        }
        Ok(Vec3::new(v[0], v[1], v[2]))
    };
    Ok(Aabb::new(parse("extent_min")?, parse("extent_max")?))
}

/// Outcome of [`voxelize_points`].
#[derive(Debug, Clone, PartialEq)]
pub struct Voxelized {
    pub grid: VoxelGrid,
    /// Points that fell outside the extent and were clamped to a border cell.
    pub clamped: usize,
}

/// Marks every cell that contains at least one point. Points outside the extent are
/// clamped onto the border cells.
pub fn voxelize_points(cloud: &PointCloud, resolution: usize, extent: Aabb) -> Result<Voxelized> {
    let mut grid = VoxelGrid::empty(resolution, extent)?;
    let cell = grid.cell_size();
    let max = (resolution - 1) as i64;
    let mut clamped = 0;
    for p in &cloud.points {
        let mut ijk = [0usize; 3];
        let mut was_clamped = false;
        for a in 0..3 {
            let f = ((p[a] - extent.min[a]) / cell[a]).floor();
            let i = if f.is_nan() { 0 } else { f.clamp(-1.0, max as f64 + 1.0) as i64 };
            if i < 0 || i > max {
                was_clamped = true;
            }
            ijk[a] = i.clamp(0, max) as usize;
        }
        // the upper boundary itself belongs to the last cell
        if was_clamped && extent.contains(p) {
            was_clamped = false;
        }
        clamped += was_clamped as usize;
        grid.set(ijk[0], ijk[1], ijk[2], true);
    }
    Ok(Voxelized { grid, clamped })
}

/// Dense multi-channel field, channel-major: `data[((c * X + i) * Y + j) * Z + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    dims: [usize; 3],
    channels: usize,
    extent: Aabb,
    data: Vec<f32>,
}

impl ScalarGrid {
    pub fn new(dims: [usize; 3], channels: usize, extent: Aabb, data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "grid dims {dims:?} x {channels} channels must be non-empty"
            )));
        }
        let n = dims.iter().product::<usize>() * channels;
        if data.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("grid contains non-finite values".into()));
        }
        Ok(Self {
            dims,
            channels,
            extent,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], channels: usize, extent: Aabb, value: f32) -> Self {
        let n = dims.iter().product::<usize>() * channels;
        Self {
            dims,
            channels,
            extent,
            data: vec![value; n],
        }
    }

    /// One-channel grid holding `f` evaluated at every cell center.
    pub fn from_fn(dims: [usize; 3], extent: Aabb, f: impl Fn(Vec3) -> f64 + Sync) -> Self {
        let mut g = Self::filled(dims, 1, extent, 0.0);
        let plane = dims[1] * dims[2];
        let centers: Vec<f32> = (0..dims[0] * plane)
            .into_par_iter()
            .map(|idx| {
                let (i, j, k) = (idx / plane, (idx / dims[2]) % dims[1], idx % dims[2]);
                f(g.cell_center(i, j, k)) as f32
            })
            .collect();
        g.data = centers;
        g
    }

    /// Wraps a `[C, X, Y, Z]` tensor.
    pub fn from_tensor(t: Tensor, extent: Aabb) -> Result<Self> {
        match *t.dims() {
            [c, x, y, z] => Self::new([x, y, z], c, extent, t.into_data()),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a [C, X, Y, Z] tensor, got {:?}",
                t.dims()
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.dims[0], self.dims[1], self.dims[2]],
            self.data.clone(),
        )
        .expect("grid invariants guarantee a consistent shape")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn extent(&self) -> &Aabb {
        &self.extent
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn with_extent(mut self, extent: Aabb) -> Self {
        self.extent = extent;
        self
    }

    pub fn cell_size(&self) -> Vec3 {
        let s = self.extent.size();
        Vec3::new(
            s.x / self.dims[0] as f64,
            s.y / self.dims[1] as f64,
            s.z / self.dims[2] as f64,
        )
    }

    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let c = self.cell_size();
        self.extent.min
            + Vec3::new(
                (i as f64 + 0.5) * c.x,
                (j as f64 + 0.5) * c.y,
                (k as f64 + 0.5) * c.z,
            )
    }

    pub fn index(&self, c: usize, i: usize, j: usize, k: usize) -> usize {
        ((c * self.dims[0] + i) * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn get(&self, c: usize, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(c, i, j, k)]
    }

    /// Trilinear blend of the eight nearest cell centers, per channel.
    pub fn sample(&self, p: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_with(p, |c, v| out[c] = v);
        out
    }

    /// Same as [`sample`](Self::sample) but writes `f32` values into `out`.
    pub fn sample_into(&self, p: &Vec3, out: &mut [f32]) {
        self.sample_with(p, |c, v| out[c] = v as f32);
    }

    fn sample_with(&self, p: &Vec3, mut emit: impl FnMut(usize, f64)) {
        let cell = self.cell_size();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let u = ((p[a] - self.extent.min[a]) / cell[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let u = if u.is_nan() { 0.0 } else { u };
            let i0 = (u.floor() as usize).min(n.saturating_sub(2));
            lo[a] = i0;
            hi[a] = (i0 + 1).min(n - 1);
            t[a] = u - i0 as f64;
        }
        let plane = self.dims[1] * self.dims[2];
        let vol = self.dims[0] * plane;
        let w = |bit: usize, a: usize| if bit == 1 { t[a] } else { 1.0 - t[a] };
        let mut offsets = [0usize; 8];
        let mut weights = [0.0f64; 8];
        for corner in 0..8 {
            let (bx, by, bz) = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1);
            let i = if bx == 1 { hi[0] } else { lo[0] };
            let j = if by == 1 { hi[1] } else { lo[1] };
            let k = if bz == 1 { hi[2] } else { lo[2] };
            offsets[corner] = i * plane + j * self.dims[2] + k;
            weights[corner] = w(bx, 0) * w(by, 1) * w(bz, 2);
        }
        for c in 0..self.channels {
            let base = &self.data[c * vol..(c + 1) * vol];
            let v: f64 = (0..8).map(|q| weights[q] * base[offsets[q]] as f64).sum();
            emit(c, v);
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        write_extent(&mut c, &self.extent);
        c.insert_f32(
            "values",
            &[self.channels, self.dims[0], self.dims[1], self.dims[2]],
            self.data.clone(),
        )?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let t = Tensor::from_container(c, "values")?;
        let t = match t.rank() {
            3 => {
                let d = t.dims().to_vec();
                t.reshape(vec![1, d[0], d[1], d[2]])?
            }
            _ => t,
        };
        Self::from_tensor(t, read_extent(c)?)
    }
}

pub fn trilinear_sample(grid: &ScalarGrid, p: &Vec3) -> Vec<f64> {
    grid.sample(p)
}

/// The query plus its six axis neighbours at distance `d`, ordered
/// center, +x, -x, +y, -y, +z, -z.
pub fn expand_query_neighbors(p: &Vec3, d: f64) -> [Vec3; 7] {
    [
        *p,
        p + Vec3::x() * d,
        p - Vec3::x() * d,
        p + Vec3::y() * d,
        p - Vec3::y() * d,
        p + Vec3::z() * d,
        p - Vec3::z() * d,
    ]
}

/// Per-query features from a grid pyramid: every level is sampled at the seven
/// neighbourhood points. Row layout is level-major, then neighbour, then channel,
/// giving `7 * sum(channels)` values per query.
pub fn multiscale_features(pyramid: &[ScalarGrid], queries: &[Vec3], d: f64) -> Result<Tensor> {
    let first = pyramid
        .first()
        .ok_or_else(|| Error::Config("feature pyramid is empty".into()))?;
    if let Some(g) = pyramid.iter().find(|g| g.extent != first.extent) {
        return Err(Error::GridMismatch(format!(
            "pyramid levels disagree on extent: {:?} vs {:?}",
            first.extent, g.extent
        )));
    }
    let width = 7 * pyramid.iter().map(|g| g.channels).sum::<usize>();
    let mut data = vec![0.0f32; queries.len() * width];
    if width > 0 {
        data.par_chunks_mut(width)
            .zip(queries.par_iter())
            .for_each(|(row, q)| {
                let pts = expand_query_neighbors(q, d);
                let mut off = 0;
                for g in pyramid {
                    for p in &pts {
                        g.sample_into(p, &mut row[off..off + g.channels]);
                        off += g.channels;
                    }
                }
            });
    }
    Tensor::new(vec![queries.len(), width], data)
}

/// Image-plane feature map, channel-major: `data[(c * H + y) * W + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap2D {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap2D {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch("feature map must be non-empty".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::LengthMismatch {
                left: channels * height * width,
                right: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("feature map contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Wraps a `[C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a [C, H, W] tensor, got {:?}",
                t.dims()
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Bilinear sample at `uv ∈ [0, 1]²`, where `(0, 0)` is the first pixel and
    /// `(1, 1)` the last. `u` runs along the width. Out-of-range coordinates clamp.
    pub fn sample(&self, uv: [f64; 2]) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_with(uv, |c, v| out[c] = v);
        out
    }

    pub fn sample_into(&self, uv: [f64; 2], out: &mut [f32]) {
        self.sample_with(uv, |c, v| out[c] = v as f32);
    }

    fn sample_with(&self, uv: [f64; 2], mut emit: impl FnMut(usize, f64)) {
        let axis = |t: f64, n: usize| -> (usize, usize, f64) {
            let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
            let x = t * (n - 1) as f64;
            let i0 = (x.floor() as usize).min(n.saturating_sub(2));
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, x - i0 as f64)
        };
        let (x0, x1, tx) = axis(uv[0], self.width);
        let (y0, y1, ty) = axis(uv[1], self.height);
        for c in 0..self.channels {
            let v = (1.0 - ty) * ((1.0 - tx) * self.get(c, y0, x0) as f64 + tx * self.get(c, y0, x1) as f64)
                + ty * ((1.0 - tx) * self.get(c, y1, x0) as f64 + tx * self.get(c, y1, x1) as f64);
            emit(c, v);
        }
    }
}

pub fn bilinear_sample(map: &FeatureMap2D, uv: [f64; 2]) -> Vec<f64> {
    map.sample(uv)
}

/// Rescales queries into the frame the coarse feature volumes are sampled in:
/// `(a, b, c) -> (2c, 2b, 2a)`.
pub fn disentangle_queries(queries: &[Vec3]) -> Vec<Vec3> {
    queries
        .iter()
        .map(|q| Vec3::new(2.0 * q.z, 2.0 * q.y, 2.0 * q.x))
        .collect()
}

/// Inverse of [`disentangle_queries`].
pub fn entangle_queries(queries: &[Vec3]) -> Vec<Vec3> {
    queries
        .iter()
        .map(|q| Vec3::new(0.5 * q.z, 0.5 * q.y, 0.5 * q.x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn voxelize_examples() {
        let v = voxelize_points(&PointCloud::new(vec![Vec3::zeros()]), 4, Aabb::unit()).unwrap();
        assert!(v.grid.get(2, 2, 2));
        assert_eq!(v.grid.occupied_count(), 1);
        assert_eq!(v.clamped, 0);

        let v = voxelize_points(&PointCloud::new(vec![Vec3::repeat(0.5)]), 4, Aabb::unit()).unwrap();
        assert!(v.grid.get(3, 3, 3));
        assert_eq!(v.clamped, 0);

        let v = voxelize_points(&PointCloud::new(vec![Vec3::new(2.0, -9.0, 0.0)]), 4, Aabb::unit()).unwrap();
        assert!(v.grid.get(3, 0, 2));
        assert_eq!(v.clamped, 1);

        let v = voxelize_points(&PointCloud::default(), 4, Aabb::unit()).unwrap();
        assert_eq!(v.grid.occupied_count(), 0);

        assert!(voxelize_points(&PointCloud::default(), 1, Aabb::unit()).is_err());
    }

    #[test]
    fn voxel_container_round_trip() {
        let v = voxelize_points(&PointCloud::new(vec![Vec3::new(0.1, -0.2, 0.3)]), 8, Aabb::unit())
            .unwrap()
            .grid;
        let back = VoxelGrid::from_container(&Container::from_bytes(&v.to_container().unwrap().to_bytes()).unwrap())
            .unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn trilinear_constant_and_corner_mean() {
        let g = ScalarGrid::filled([3, 4, 5], 2, Aabb::unit(), 1.25);
        assert_eq!(g.sample(&Vec3::new(0.1, -0.3, 0.44)), vec![1.25, 1.25]);

        let g = ScalarGrid::new([2, 2, 2], 1, Aabb::unit(), (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(g.sample(&Vec3::zeros()), vec![3.5]);
        // at a cell center the stored value comes back
        assert_eq!(g.sample(&g.cell_center(1, 0, 1)), vec![5.0]);
    }

    #[test]
    fn trilinear_reproduces_linear_field() {
        let f = |p: Vec3| 2.0 * p.x - p.y + 3.0 * p.z;
        let g = ScalarGrid::from_fn([9, 7, 11], Aabb::unit(), f);
        let lo = g.cell_center(0, 0, 0);
        let hi = g.cell_center(8, 6, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let t = Vec3::new(rng.random(), rng.random(), rng.random());
            let p = lo + (hi - lo).component_mul(&t);
            assert!((g.sample(&p)[0] - f(p)).abs() < 1e-6);
        }
    }

    #[test]
    fn sampling_clamps_outside() {
        let g = ScalarGrid::from_fn([4, 4, 4], Aabb::unit(), |p| p.x);
        let inside = g.sample(&Vec3::new(0.375, 0.0, 0.0))[0];
        let outside = g.sample(&Vec3::new(3.0, 0.0, 0.0))[0];
        assert_eq!(inside, outside);
    }

    #[test]
    fn neighbour_expansion() {
        let n = expand_query_neighbors(&Vec3::zeros(), 0.1);
        assert_eq!(n[0], Vec3::zeros());
        assert_eq!(n[1], Vec3::new(0.1, 0.0, 0.0));
        assert_eq!(n[2], Vec3::new(-0.1, 0.0, 0.0));
        assert_eq!(n[3], Vec3::new(0.0, 0.1, 0.0));
        assert_eq!(n[6], Vec3::new(0.0, 0.0, -0.1));
        let p = Vec3::new(0.3, -0.2, 0.1);
        assert!(expand_query_neighbors(&p, 0.0).iter().all(|q| *q == p));
    }

    #[test]
    fn multiscale_layout() {
        let c = ScalarGrid::filled([4, 4, 4], 1, Aabb::unit(), 0.7);
        let t = multiscale_features(&[c], &[Vec3::zeros(), Vec3::repeat(0.49)], 0.1).unwrap();
        assert_eq!(t.dims(), &[2, 7]);
        assert!(t.data().iter().all(|&v| v == 0.7));

        let a = ScalarGrid::filled([4, 4, 4], 4, Aabb::unit(), 0.0);
        let b = ScalarGrid::filled([2, 2, 2], 8, Aabb::unit(), 0.0);
        let t = multiscale_features(&[a.clone(), b], &[Vec3::zeros()], 0.1).unwrap();
        assert_eq!(t.dims(), &[1, 84]);

        let other = ScalarGrid::filled([2, 2, 2], 1, Aabb::cube(1.0), 0.0);
        assert!(matches!(
            multiscale_features(&[a, other], &[Vec3::zeros()], 0.1),
            Err(Error::GridMismatch(_))
        ));
        assert!(multiscale_features(&[], &[Vec3::zeros()], 0.1).is_err());
    }

    #[test]
    fn multiscale_neighbours_follow_gradient() {
        // f = 2x - y + 3z; neighbours differ from the center by ±d * gradient
        let g = ScalarGrid::from_fn([16, 16, 16], Aabb::unit(), |p| 2.0 * p.x - p.y + 3.0 * p.z);
        let d = 0.05;
        let t = multiscale_features(&[g], &[Vec3::new(0.05, -0.1, 0.12)], d).unwrap();
        let r = t.row(0);
        let grad = [2.0, -1.0, 3.0];
        for axis in 0..3 {
            let plus = (r[1 + 2 * axis] - r[0]) as f64;
            let minus = (r[2 + 2 * axis] - r[0]) as f64;
            assert!((plus - d * grad[axis]).abs() < 1e-6);
            assert!((minus + d * grad[axis]).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_examples() {
        let m = FeatureMap2D::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.sample([0.5, 0.5]), vec![1.5]);
        assert_eq!(m.sample([0.0, 0.0]), vec![0.0]);
        assert_eq!(m.sample([1.0, 0.0]), vec![1.0]);
        assert_eq!(m.sample([0.0, 1.0]), vec![2.0]);
        assert_eq!(m.sample([-3.0, 7.0]), vec![2.0]);
        let c = FeatureMap2D::new(2, 3, 5, vec![4.0; 30]).unwrap();
        assert_eq!(c.sample([0.3, 0.9]), vec![4.0, 4.0]);
        assert!(FeatureMap2D::new(1, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn disentangle_examples() {
        let q = disentangle_queries(&[Vec3::new(0.1, 0.2, 0.3), Vec3::zeros()]);
        assert!((q[0] - Vec3::new(0.6, 0.4, 0.2)).norm() < 1e-15);
        assert_eq!(q[1], Vec3::zeros());
        let back = entangle_queries(&q);
        assert_eq!(back[0], Vec3::new(0.1, 0.2, 0.3));
    }

    #[test]
    fn scalar_container_round_trip() {
        let g = ScalarGrid::from_fn([3, 4, 5], Aabb::cube(1.0), |p| p.norm());
        let back = ScalarGrid::from_container(&g.to_container().unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
