//! Ground-truth signed distances and the noisy query-point schedule used to build
//! training pairs.
//!
//! Sign convention: negative inside, positive outside. Magnitude is the exact
//! distance to the nearest triangle; the sign comes from the parity of ray
//! crossings, which is exact for closed meshes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::bvh::Bvh;
use crate::error::{Error, Result};
use crate::geometry::{intersect_triangle, point_triangle_distance_squared, Ray, TriangleHit, Vec3};
use crate::lstg::Container;
use crate::mesh::{flatten_f32, read_points, SurfaceSampler, TriMesh};

/// Which nearest-triangle search to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accel {
    /// Scan every triangle.
    Naive,
    /// Traverse the BVH.
    Bvh,
}

/// Ray directions tried in order by the parity test. The first is the primary
/// direction; the rest are the perturbed retries.
const PARITY_DIRECTIONS: [[f64; 3]; 9] = [
    [0.5377, 0.6312, 0.5588],
    [0.5731, 0.5902, 0.5684],
    [-0.4983, 0.6215, 0.6047],
    [0.6433, -0.5291, 0.5534],
    [0.5179, 0.6024, -0.6072],
    [-0.6098, -0.5483, 0.5724],
    [0.5862, -0.6177, -0.5243],
    [-0.5536, 0.5819, -0.5958],
    [-0.6021, -0.5604, -0.5687],
];

/// A hit is ambiguous when it lands within this barycentric distance of an edge.
const EDGE_EPS: f64 = 1e-9;
/// ... or when the ray is this close to parallel with the triangle plane.
const GRAZE_EPS: f64 = 1e-9;

fn ambiguous(hit: &TriangleHit, tri: &[Vec3; 3], dir: &Vec3) -> bool {
    if hit.min_barycentric() < EDGE_EPS {
        return true;
    }
    let n = (tri[1] - tri[0]).cross(&(tri[2] - tri[0]));
    (n.dot(dir) / n.norm()).abs() < GRAZE_EPS
}

/// Distance queries against one mesh. The BVH is built once and can be shared
/// across threads.
pub struct SdfOracle<'a> {
    mesh: &'a TriMesh,
    bvh: Bvh,
}

impl<'a> SdfOracle<'a> {
    pub fn new(mesh: &'a TriMesh) -> Result<Self> {
        let bvh = Bvh::build(mesh)?;
        Ok(Self { mesh, bvh })
    }

    pub fn mesh(&self) -> &TriMesh {
        self.mesh
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    pub fn unsigned_distance(&self, p: &Vec3, accel: Accel) -> f64 {
        match accel {
            Accel::Bvh => self.bvh.nearest_point(p).distance_squared.sqrt(),
            Accel::Naive => (0..self.mesh.faces.len())
                .map(|f| {
                    let [a, b, c] = self.mesh.triangle(f);
                    point_triangle_distance_squared(p, &a, &b, &c)
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt(),
        }
    }

    /// Parity of ray crossings, retrying along perturbed directions when a ray
    /// grazes an edge, vertex, or face plane.
    pub fn is_inside(&self, p: &Vec3, accel: Accel) -> Result<bool> {
        'dirs: for d in PARITY_DIRECTIONS {
            let dir = Vec3::new(d[0], d[1], d[2]).normalize();
            let ray = Ray::new(*p, dir);
            let mut crossings = 0usize;
            let mut bad = false;
            match accel {
                Accel::Bvh => self.bvh.for_each_hit(&ray, |face, hit| {
                    crossings += 1;
                    bad |= ambiguous(&hit, &self.mesh.triangle(face), &dir);
                }),
                Accel::Naive => {
                    for face in 0..self.mesh.faces.len() {
                        let tri = self.mesh.triangle(face);
                        if let Some(hit) = intersect_triangle(&ray, &tri[0], &tri[1], &tri[2]) {
                            crossings += 1;
                            bad |= ambiguous(&hit, &tri, &dir);
                        }
                    }
                }
            }
            if bad {
                log::debug!("ambiguous parity ray at {p:?}, retrying");
                continue 'dirs;
            }
            return Ok(crossings % 2 == 1);
        }
        Err(Error::NondeterministicSign {
            x: p.x,
            y: p.y,
            z: p.z,
        })
    }

    pub fn signed_distance(&self, p: &Vec3, accel: Accel) -> Result<f64> {
        let d = self.unsigned_distance(p, accel);
        if d == 0.0 {
            return Ok(0.0);
        }
        Ok(if self.is_inside(p, accel)? { -d } else { d })
    }

    /// Signed distances for many points, in input order.
    pub fn signed_distances(&self, points: &[Vec3], accel: Accel) -> Result<Vec<f64>> {
        points
            .par_iter()
            .map(|p| self.signed_distance(p, accel))
            .collect()
    }
}

/// One-shot convenience wrapper; prefer [`SdfOracle`] for many queries.
pub fn signed_distance(mesh: &TriMesh, p: &Vec3, accel: Accel) -> Result<f64> {
    SdfOracle::new(mesh)?.signed_distance(p, accel)
}

/// A noise band: `fraction` of the queries displaced by isotropic Gaussian noise
/// with per-axis standard deviation `rho`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseBand {
    pub fraction: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySamplingConfig {
    pub n_total: usize,
    pub schedule: Vec<NoiseBand>,
    /// Fill whatever the schedule leaves over with uniform samples in `[-0.5, 0.5]³`.
    /// When false the set is truncated to the scheduled count.
    pub fill_remainder: bool,
    /// Redraw queries whose raw |sdf| exceeds this.
    pub max_band: Option<f64>,
    /// Multiplier applied to stored signed distances.
    pub scale: f64,
    pub seed: u64,
}

impl Default for QuerySamplingConfig {
    fn default() -> Self {
        Self {
            n_total: 50_000,
            schedule: vec![
                NoiseBand {
                    fraction: 0.45,
                    rho: 0.003,
                },
                NoiseBand {
                    fraction: 0.44,
                    rho: 0.01,
                },
                NoiseBand {
                    fraction: 0.10,
                    rho: 0.07,
                },
            ],
            fill_remainder: true,
            max_band: None,
            scale: 10.0,
            seed: 0,
        }
    }
}

impl QuerySamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_total == 0 {
            return Err(Error::Config("n_total must be at least 1".into()));
        }
        let mut sum = 0.0;
        for b in &self.schedule {
            if !(b.fraction >= 0.0) {
                return Err(Error::Config(format!("negative band fraction {}", b.fraction)));
            }
            if !(b.rho > 0.0) || !b.rho.is_finite() {
                return Err(Error::Config(format!("band rho must be positive, got {}", b.rho)));
            }
            sum += b.fraction;
        }
        if sum > 1.0 + 1e-9 {
            return Err(Error::Config(format!("band fractions sum to {sum} > 1")));
        }
        if let Some(d) = self.max_band {
            if !(d > 0.0) {
                return Err(Error::Config(format!("max_band must be positive, got {d}")));
            }
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("sdf scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// Number of queries per scheduled band followed by the uniform remainder.
    pub fn band_counts(&self) -> (Vec<usize>, usize) {
        let mut counts: Vec<usize> = self
            .schedule
            .iter()
            .map(|b| (b.fraction * self.n_total as f64).round() as usize)
            .collect();
        // rounding can overshoot by a query or two
        let mut total: usize = counts.iter().sum();
        for c in counts.iter_mut().rev() {
            if total <= self.n_total {
                break;
            }
            let cut = (total - self.n_total).min(*c);
            *c -= cut;
            total -= cut;
        }
        let rest = if self.fill_remainder {
            self.n_total - total
        } else {
            0
        };
        (counts, rest)
    }
}

/// Query points with their ground-truth signed distances.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub points: Vec<Vec3>,
    /// Signed distances multiplied by `scale_applied`.
    pub sdf: Vec<f64>,
    pub scale_applied: f64,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Signed distances in mesh units.
    pub fn raw_sdf(&self) -> Vec<f64> {
        self.sdf.iter().map(|s| s / self.scale_applied).collect()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("sdf_scale", format!("{}", self.scale_applied));
        c.insert_f32("points", &[self.len(), 3], flatten_f32(&self.points))?;
        c.insert_f32(
            "sdf",
            &[self.len()],
            self.sdf.iter().map(|&s| s as f32).collect(),
        )?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let points = read_points(c, "points")?;
        let (dims, sdf) = c.f32("sdf")?;
        if dims.len() != 1 || dims[0] != points.len() {
            return Err(Error::LengthMismatch {
                left: points.len(),
                right: sdf.len(),
            });
        }
        let scale_applied = match c.meta("sdf_scale") {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Container(format!("bad sdf_scale `{s}`")))?,
            None => 1.0,
        };
        Ok(Self {
            points,
            sdf: sdf.iter().map(|&s| s as f64).collect(),
            scale_applied,
        })
    }
}

/// Band tag for uniform remainder samples.
pub const UNIFORM_BAND: u8 = u8::MAX;

/// A query set plus where each query came from.
#[derive(Debug, Clone)]
pub struct GeneratedQueries {
    pub set: QuerySet,
    /// Index into the schedule, or [`UNIFORM_BAND`].
    pub bands: Vec<u8>,
    /// Surface point each query was displaced from (the query itself for uniform samples).
    pub anchors: Vec<Vec3>,
}

const MAX_REDRAW_ROUNDS: usize = 64;

fn draw<R: Rng>(
    band: u8,
    sampler: &SurfaceSampler,
    noise: &[Normal<f64>],
    rng: &mut R,
) -> (Vec3, Vec3) {
    if band == UNIFORM_BAND {
        let p = Vec3::new(rng.random(), rng.random(), rng.random()) - Vec3::repeat(0.5);
        return (p, p);
    }
    let (anchor, _) = sampler.sample(rng);
    let nd = &noise[band as usize];
    let n = Vec3::new(nd.sample(rng), nd.sample(rng), nd.sample(rng));
    (anchor + n, anchor)
}

/// Samples surface points, displaces them per the noise schedule, and labels each
/// with its signed distance. Band sizes are computed, not drawn, so their
/// proportions are exact up to rounding.
pub fn generate_query_set_detailed(mesh: &TriMesh, cfg: &QuerySamplingConfig) -> Result<GeneratedQueries> {
    cfg.validate()?;
    if cfg.schedule.len() >= UNIFORM_BAND as usize {
        return Err(Error::Config("too many noise bands".into()));
    }
    let oracle = SdfOracle::new(mesh)?;
    let sampler = SurfaceSampler::new(mesh)?;
    let noise: Vec<Normal<f64>> = cfg
        .schedule
        .iter()
        .map(|b| Normal::new(0.0, b.rho).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (counts, rest) = cfg.band_counts();
    let mut bands = Vec::with_capacity(cfg.n_total);
    for (b, &c) in counts.iter().enumerate() {
        bands.extend(std::iter::repeat_n(b as u8, c));
    }
    bands.extend(std::iter::repeat_n(UNIFORM_BAND, rest));

    let mut points = Vec::with_capacity(bands.len());
    let mut anchors = Vec::with_capacity(bands.len());
    for &b in &bands {
        let (p, a) = draw(b, &sampler, &noise, &mut rng);
        points.push(p);
        anchors.push(a);
    }
    let mut raw = oracle.signed_distances(&points, Accel::Bvh)?;

    if let Some(delta) = cfg.max_band {
        let mut rounds = 0;
        loop {
            let rejected: Vec<usize> = (0..raw.len()).filter(|&i| raw[i].abs() > delta).collect();
            if rejected.is_empty() {
                break;
            }
            rounds += 1;
            if rounds > MAX_REDRAW_ROUNDS {
                return Err(Error::BandUnreachable {
                    delta,
                    rounds: MAX_REDRAW_ROUNDS,
                });
            }
            let redrawn: Vec<(Vec3, Vec3)> = rejected
                .iter()
                .map(|&i| draw(bands[i], &sampler, &noise, &mut rng))
                .collect();
            let fresh: Vec<Vec3> = redrawn.iter().map(|(p, _)| *p).collect();
            let labels = oracle.signed_distances(&fresh, Accel::Bvh)?;
            for ((&i, (p, a)), s) in rejected.iter().zip(redrawn).zip(labels) {
                points[i] = p;
                anchors[i] = a;
                raw[i] = s;
            }
        }
    }

    Ok(GeneratedQueries {
        set: QuerySet {
            points,
            sdf: raw.iter().map(|s| s * cfg.scale).collect(),
            scale_applied: cfg.scale,
        },
        bands,
        anchors,
    })
}

pub fn generate_query_set(mesh: &TriMesh, cfg: &QuerySamplingConfig) -> Result<QuerySet> {
    Ok(generate_query_set_detailed(mesh, cfg)?.set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{primitives, sample_surface};

    #[test]
    fn unit_cube_reference_values() {
        let cube = primitives::unit_cube();
        let o = SdfOracle::new(&cube).unwrap();
        for accel in [Accel::Naive, Accel::Bvh] {
            assert_eq!(o.signed_distance(&Vec3::zeros(), accel).unwrap(), -0.5);
            assert_eq!(o.signed_distance(&Vec3::new(1.0, 0.0, 0.0), accel).unwrap(), 0.5);
        }
        // corner region: distance to the corner vertex
        let d = o.signed_distance(&Vec3::repeat(1.5), Accel::Bvh).unwrap();
        assert!((d - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn on_surface_is_zero() {
        let cube = primitives::unit_cube();
        let o = SdfOracle::new(&cube).unwrap();
        let d = o.signed_distance(&Vec3::new(0.5, 0.1, 0.2), Accel::Bvh).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn edge_aligned_ray_start_still_resolves() {
        // points whose primary ray would pass through a cube edge or vertex still
        // get a sign via the retries
        let cube = primitives::unit_cube();
        let o = SdfOracle::new(&cube).unwrap();
        let dir = Vec3::from(PARITY_DIRECTIONS[0]).normalize();
        // start inside, aim the primary ray at the (0.5,0.5,0.5) corner
        let p = Vec3::repeat(0.5) - dir * 0.3;
        assert!(o.signed_distance(&p, Accel::Bvh).unwrap() < 0.0);
        let q = Vec3::repeat(0.5) - dir * 3.0;
        assert!(o.is_inside(&q, Accel::Naive).is_ok());
    }

    #[test]
    fn open_mesh_parity_can_fail_with_error() {
        // a single triangle: every parity ray from a point on the plane's normal
        // line through a vertex is ambiguous in at least one direction, but
        // generic points still resolve deterministically
        let tri = TriMesh {
            vertices: vec![Vec3::zeros(), Vec3::x(), Vec3::y()],
            faces: vec![[0, 1, 2]],
            tags: None,
        };
        let o = SdfOracle::new(&tri).unwrap();
        let a = o.signed_distance(&Vec3::new(0.2, 0.2, -0.1), Accel::Bvh).unwrap();
        let b = o.signed_distance(&Vec3::new(0.2, 0.2, -0.1), Accel::Bvh).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distance_is_a_minimum_over_samples() {
        let m = primitives::icosphere(0.35, 2);
        let o = SdfOracle::new(&m).unwrap();
        let surf = sample_surface(&m, 300, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let p = Vec3::new(rng.random(), rng.random(), rng.random()) - Vec3::repeat(0.5);
            let d = o.signed_distance(&p, Accel::Bvh).unwrap().abs();
            for q in &surf.points {
                assert!(d <= (p - q).norm() + 1e-12);
            }
        }
    }

    #[test]
    fn lipschitz_on_closed_mesh() {
        let m = primitives::icosahedron(0.4);
        let o = SdfOracle::new(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let p = Vec3::new(rng.random(), rng.random(), rng.random()) - Vec3::repeat(0.5);
            let q = p + (Vec3::new(rng.random(), rng.random(), rng.random()) - Vec3::repeat(0.5)) * 0.1;
            let (a, b) = (
                o.signed_distance(&p, Accel::Bvh).unwrap(),
                o.signed_distance(&q, Accel::Bvh).unwrap(),
            );
            assert!((a - b).abs() <= (p - q).norm() + 1e-9);
        }
    }

    #[test]
    fn sign_flips_across_a_face() {
        let m = primitives::icosahedron(0.4);
        let o = SdfOracle::new(&m).unwrap();
        let [a, b, c] = m.triangle(3);
        let centroid = (a + b + c) / 3.0;
        let n = m.face_normal(3);
        assert!(o.signed_distance(&(centroid - n * 1e-4), Accel::Bvh).unwrap() < 0.0);
        assert!(o.signed_distance(&(centroid + n * 1e-4), Accel::Bvh).unwrap() > 0.0);
    }

    #[test]
    fn band_counts_are_exact() {
        let cfg = QuerySamplingConfig::default();
        assert_eq!(cfg.band_counts(), (vec![22_500, 22_000, 5_000], 500));
        let strict = QuerySamplingConfig {
            fill_remainder: false,
            ..cfg.clone()
        };
        assert_eq!(strict.band_counts().1, 0);
        let tiny = QuerySamplingConfig {
            n_total: 7,
            ..cfg
        };
        let (c, r) = tiny.band_counts();
        assert_eq!(c.iter().sum::<usize>() + r, 7);
    }

    #[test]
    fn config_validation() {
        let bad = |f: fn(&mut QuerySamplingConfig)| {
            let mut c = QuerySamplingConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.n_total = 0));
        assert!(bad(|c| c.schedule[0].fraction = 0.9));
        assert!(bad(|c| c.schedule[1].rho = 0.0));
        assert!(bad(|c| c.schedule[1].fraction = -0.1));
        assert!(bad(|c| c.max_band = Some(0.0)));
        assert!(QuerySamplingConfig::default().validate().is_ok());
    }

    #[test]
    fn tiny_noise_stays_on_surface() {
        let m = primitives::icosphere(0.3, 3);
        let cfg = QuerySamplingConfig {
            n_total: 2000,
            schedule: vec![NoiseBand {
                fraction: 1.0,
                rho: 1e-12,
            }],
            ..Default::default()
        };
        let q = generate_query_set(&m, &cfg).unwrap();
        assert_eq!(q.len(), 2000);
        assert!(q.raw_sdf().iter().all(|s| s.abs() < 1e-6));
    }

    #[test]
    fn max_band_filters() {
        let m = primitives::icosphere(0.3, 2);
        let cfg = QuerySamplingConfig {
            n_total: 1000,
            max_band: Some(0.05),
            fill_remainder: false,
            ..Default::default()
        };
        let q = generate_query_set(&m, &cfg).unwrap();
        assert!(q.raw_sdf().iter().all(|s| s.abs() <= 0.05));
        assert_eq!(q.len(), 990);

        let unreachable = QuerySamplingConfig {
            n_total: 100,
            schedule: vec![],
            max_band: Some(1e-6),
            ..Default::default()
        };
        assert!(matches!(
            generate_query_set(&m, &unreachable),
            Err(Error::BandUnreachable { .. })
        ));
    }

    #[test]
    fn scaling_and_container_round_trip() {
        let m = primitives::icosphere(0.3, 2);
        let cfg = QuerySamplingConfig {
            n_total: 200,
            seed: 4,
            ..Default::default()
        };
        let g = generate_query_set_detailed(&m, &cfg).unwrap();
        let o = SdfOracle::new(&m).unwrap();
        for (p, s) in g.set.points.iter().zip(&g.set.sdf) {
            let raw = o.signed_distance(p, Accel::Naive).unwrap();
            assert!((s - 10.0 * raw).abs() < 1e-12);
        }
        let c = g.set.to_container().unwrap();
        assert_eq!(c.meta("sdf_scale"), Some("10"));
        let back = QuerySet::from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.len(), 200);
        assert_eq!(back.scale_applied, 10.0);
        assert!((back.sdf[5] - g.set.sdf[5]).abs() < 1e-5);
        assert_eq!(
            generate_query_set(&m, &cfg).unwrap(),
            g.set,
            "same seed must reproduce the set"
        );
    }
}
