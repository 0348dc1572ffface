//! Triangle meshes, point clouds, file I/O, and surface sampling.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{triangle_area, Aabb, Vec3};
use crate::lstg::Container;

pub mod primitives;

/// Indexed triangle surface.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Optional per-face label, same length as `faces` when present.
    pub tags: Option<Vec<i32>>,
}

impl TriMesh {
    /// Builds a mesh, dropping faces with repeated indices or (near-)zero area.
    /// Returns the mesh and the number of dropped faces.
    pub fn cleaned(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<(Self, usize)> {
        let n = vertices.len();
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i as usize >= n)) {
            return Err(Error::Config(format!(
                "face {f:?} references a vertex beyond {n}"
            )));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Config("non-finite vertex coordinate".into()));
        }
        let diag2 = Aabb::from_points(&vertices).size().norm_squared();
        let min_area = 1e-14 * diag2;
        let before = faces.len();
        let faces: Vec<[u32; 3]> = faces
            .into_iter()
            .filter(|f| {
                if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                    return false;
                }
                let [a, b, c] = f.map(|i| vertices[i as usize]);
                triangle_area(&a, &b, &c) > min_area
            })
            .collect();
        let dropped = before - faces.len();
        Ok((
            Self {
                vertices,
                faces,
                tags: None,
            },
            dropped,
        ))
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        self.faces[face].map(|i| self.vertices[i as usize])
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.triangle(face);
        triangle_area(&a, &b, &c)
    }

    pub fn face_areas(&self) -> Vec<f64> {
        (0..self.faces.len()).map(|f| self.face_area(f)).collect()
    }

    pub fn area(&self) -> f64 {
        self.face_areas().iter().sum()
    }

    /// Unit normal following the right-hand rule on the vertex order.
    pub fn face_normal(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }

    /// Number of undirected edges not shared by exactly two faces.
    pub fn open_edge_count(&self) -> usize {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        counts.values().filter(|&&c| c != 2).count()
    }

    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.open_edge_count() == 0
    }

    pub fn ensure_watertight(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyMesh);
        }
        match self.open_edge_count() {
            0 => Ok(()),
            n => Err(Error::OpenMesh { boundary_edges: n }),
        }
    }

    /// Applies `p -> scale * p + translation` to every vertex.
    pub fn transformed(&self, t: &AffineScale) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|p| t.apply(p)).collect(),
            faces: self.faces.clone(),
            tags: self.tags.clone(),
        }
    }

    /// Reverses the winding of every face.
    pub fn flipped(&self) -> TriMesh {
        TriMesh {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect(),
            tags: self.tags.clone(),
        }
    }

    /// Sub-mesh holding the faces where `keep` is true. Vertices are compacted.
    pub fn select_faces(&self, keep: &[bool]) -> TriMesh {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        let mut tags = self.tags.as_ref().map(|_| Vec::new());
        for (fi, f) in self.faces.iter().enumerate() {
            if !keep[fi] {
                continue;
            }
            let nf = f.map(|i| {
                let slot = &mut remap[i as usize];
                if *slot == u32::MAX {
                    *slot = vertices.len() as u32;
                    vertices.push(self.vertices[i as usize]);
                }
                *slot
            });
            faces.push(nf);
            if let (Some(out), Some(src)) = (tags.as_mut(), self.tags.as_ref()) {
                out.push(src[fi]);
            }
        }
        TriMesh {
            vertices,
            faces,
            tags,
        }
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 32 + self.faces.len() * 16);
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_obj_string())?;
        Ok(())
    }
}

/// Result of loading a mesh file.
#[derive(Debug, Clone)]
pub struct LoadedMesh {
    pub mesh: TriMesh,
    pub dropped_faces: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Off,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("off") => Ok(MeshFormat::Off),
            _ => Err(Error::Config(format!(
                "cannot infer mesh format from `{}`",
                path.display()
            ))),
        }
    }
}

pub fn load_mesh(path: impl AsRef<Path>, format: MeshFormat) -> Result<LoadedMesh> {
    let text = fs::read_to_string(path)?;
    match format {
        MeshFormat::Obj => parse_obj(&text),
        MeshFormat::Off => parse_off(&text),
    }
}

/// Loads a mesh, choosing the parser from the file extension.
pub fn load_mesh_auto(path: impl AsRef<Path>) -> Result<LoadedMesh> {
    let path = path.as_ref();
    load_mesh(path, MeshFormat::from_path(path)?)
}

fn parse_err(format: &'static str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        format,
        line,
        msg: msg.into(),
    }
}

fn finish(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<LoadedMesh> {
    let (mesh, dropped_faces) = TriMesh::cleaned(vertices, faces)?;
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if dropped_faces > 0 {
        log::warn!("dropped {dropped_faces} degenerate faces");
    }
    Ok(LoadedMesh {
        mesh,
        dropped_faces,
    })
}

/// Parses the `v` and `f` records of a Wavefront OBJ file; everything else is ignored.
/// Polygons are fan-triangulated.
pub fn parse_obj(text: &str) -> Result<LoadedMesh> {
    let mut vertices = Vec::new();
    let mut polys: Vec<(usize, Vec<i64>)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = line.split('#').next().unwrap_or("");
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for slot in &mut c {
                    let tok = it
                        .next()
                        .ok_or_else(|| parse_err("OBJ", ln, "vertex needs 3 coordinates"))?;
                    *slot = tok
                        .parse()
                        .map_err(|_| parse_err("OBJ", ln, format!("bad coordinate `{tok}`")))?;
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx = it
                    .map(|tok| {
                        let head = tok.split('/').next().unwrap_or("");
                        head.parse::<i64>()
                            .map_err(|_| parse_err("OBJ", ln, format!("bad index `{tok}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() < 3 {
                    return Err(parse_err("OBJ", ln, "face needs at least 3 indices"));
                }
                // Negative indices are relative to the vertices read so far.
                let base = vertices.len() as i64;
                let idx = idx
                    .into_iter()
                    .map(|i| if i < 0 { base + i + 1 } else { i })
                    .collect();
                polys.push((ln, idx));
            }
            _ => {}
        }
    }
    let n = vertices.len() as i64;
    let mut faces = Vec::new();
    for (ln, poly) in polys {
        if let Some(bad) = poly.iter().find(|&&i| i < 1 || i > n) {
            return Err(parse_err("OBJ", ln, format!("index {bad} out of range 1..={n}")));
        }
        for k in 1..poly.len() - 1 {
            faces.push([
                (poly[0] - 1) as u32,
                (poly[k] - 1) as u32,
                (poly[k + 1] - 1) as u32,
            ]);
        }
    }
    finish(vertices, faces)
}

/// Parses an ASCII OFF file (0-based indices, polygons fan-triangulated).
pub fn parse_off(text: &str) -> Result<LoadedMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (ln, first) = lines.next().ok_or_else(|| parse_err("OFF", 1, "empty file"))?;
    // The counts may share the header line ("OFF 8 12 0").
    let counts_line = if first == "OFF" {
        lines
            .next()
            .ok_or_else(|| parse_err("OFF", ln, "missing counts line"))?
    } else if let Some(rest) = first.strip_prefix("OFF") {
        (ln, rest.trim())
    } else {
        return Err(parse_err("OFF", ln, "missing OFF header"));
    };
    let counts: Vec<usize> = counts_line
        .1
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err("OFF", counts_line.0, "bad count")))
        .collect::<Result<_>>()?;
    if counts.len() < 2 {
        return Err(parse_err("OFF", counts_line.0, "expected vertex and face counts"));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err("OFF", counts_line.0, "fewer vertices than declared"))?;
        let c: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(|t| t.parse().map_err(|_| parse_err("OFF", ln, format!("bad coordinate `{t}`"))))
            .collect::<Result<_>>()?;
        if c.len() != 3 {
            return Err(parse_err("OFF", ln, "vertex needs 3 coordinates"));
        }
        vertices.push(Vec3::new(c[0], c[1], c[2]));
    }

    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err("OFF", counts_line.0, "fewer faces than declared"))?;
        let toks: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err("OFF", ln, format!("bad index `{t}`"))))
            .collect::<Result<_>>()?;
        let (&k, rest) = toks
            .split_first()
            .ok_or_else(|| parse_err("OFF", ln, "empty face line"))?;
        if k < 3 || rest.len() < k {
            return Err(parse_err("OFF", ln, "face needs at least 3 indices"));
        }
        let poly = &rest[..k];
        if let Some(bad) = poly.iter().find(|&&i| i >= nv) {
            return Err(parse_err("OFF", ln, format!("index {bad} out of range 0..{nv}")));
        }
        for j in 1..k - 1 {
            faces.push([poly[0] as u32, poly[j] as u32, poly[j + 1] as u32]);
        }
    }
    finish(vertices, faces)
}

/// `p -> scale * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineScale {
    pub scale: f64,
    pub translation: Vec3,
}

impl AffineScale {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        Self {
            scale: 1.0 / self.scale,
            translation: -self.translation / self.scale,
        }
    }
}

/// Centers the bounding box at the origin and scales isotropically so the longest
/// side is 1.
pub fn normalize_unit_cube(mesh: &TriMesh) -> Result<(TriMesh, AffineScale)> {
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let b = mesh.bounds();
    let longest = b.size().max();
    if !(longest > 0.0) || !longest.is_finite() {
        return Err(Error::DegenerateExtent);
    }
    let scale = 1.0 / longest;
    let t = AffineScale {
        scale,
        translation: -b.center() * scale,
    };
    Ok((mesh.transformed(&t), t))
}

/// A set of points with optional per-point normals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            normals: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_points(&self.points)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.insert_f32("points", &[self.len(), 3], flatten_f32(&self.points))?;
        if let Some(n) = &self.normals {
            c.insert_f32("normals", &[n.len(), 3], flatten_f32(n))?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let points = read_points(c, "points")?;
        let normals = match c.get("normals") {
            Some(_) => Some(read_points(c, "normals")?),
            None => None,
        };
        Ok(Self { points, normals })
    }
}

pub(crate) fn flatten_f32(points: &[Vec3]) -> Vec<f32> {
    points
        .iter()
        .flat_map(|p| [p.x as f32, p.y as f32, p.z as f32])
        .collect()
}

/// Reads an `n x 3` f32 entry as points.
pub fn read_points(c: &Container, name: &str) -> Result<Vec<Vec3>> {
    let (dims, data) = c.f32(name)?;
    if dims.len() != 2 || dims[1] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "entry `{name}` has dims {dims:?}, expected [n, 3]"
        )));
    }
    Ok(data
        .chunks_exact(3)
        .map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64))
        .collect())
}

/// Draws `n` points area-uniformly from the surface: face by area, then uniform
/// barycentric coordinates. Normals are the face normals.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_surface_with(mesh, n, &mut rng)
}

pub fn sample_surface_with<R: Rng + ?Sized>(mesh: &TriMesh, n: usize, rng: &mut R) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::BadCount { got: 0, max: usize::MAX });
    }
    let sampler = SurfaceSampler::new(mesh)?;
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, f) = sampler.sample(rng);
        points.push(p);
        normals.push(mesh.face_normal(f));
    }
    Ok(PointCloud {
        points,
        normals: Some(normals),
    })
}

/// Area-weighted face picker that can be reused across many draws.
pub struct SurfaceSampler<'a> {
    mesh: &'a TriMesh,
    pick: WeightedIndex<f64>,
}

impl<'a> SurfaceSampler<'a> {
    pub fn new(mesh: &'a TriMesh) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let pick = WeightedIndex::new(mesh.face_areas()).map_err(|_| Error::EmptyMesh)?;
        Ok(Self { mesh, pick })
    }

    /// One surface point and the face it lies on.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec3, usize) {
        let f = self.pick.sample(rng);
        let [a, b, c] = self.mesh.triangle(f);
        let (mut r1, mut r2): (f64, f64) = (rng.random(), rng.random());
        if r1 + r2 > 1.0 {
            r1 = 1.0 - r1;
            r2 = 1.0 - r2;
        }
        (a + (b - a) * r1 + (c - a) * r2, f)
    }
}

/// Greedy farthest point sampling starting at index 0. Returns the selected indices
/// in selection order. Ties go to the lowest index.
pub fn farthest_point_indices(points: &[Vec3], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::BadCount {
            got: k,
            max: points.len(),
        });
    }
    let mut selected = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; points.len()];
    let mut current = 0usize;
    selected.push(current);
    while selected.len() < k {
        let c = points[current];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best.0 {
                best = (nearest[i], i);
            }
        }
        current = best.1;
        selected.push(current);
    }
    Ok(selected)
}

pub fn farthest_point_sample(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    let idx = farthest_point_indices(&cloud.points, k)?;
    Ok(PointCloud {
        points: idx.iter().map(|&i| cloud.points[i]).collect(),
        normals: cloud
            .normals
            .as_ref()
            .map(|n| idx.iter().map(|&i| n[i]).collect()),
    })
}
