//! Bounding volume hierarchy over mesh triangles.
//!
//! Built once by median split on the longest centroid axis, then shared read-only
//! between the signed-distance oracle (closest point, ray parity) and the
//! visibility caster (closest hit).

use crate::error::{Error, Result};
use crate::geometry::{
    closest_point_on_triangle, intersect_triangle, Aabb, Ray, TriangleHit, Vec3,
};
use crate::mesh::TriMesh;

pub const MAX_LEAF_SIZE: usize = 4;

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf { start: u32, count: u32 },
    Inner { left: u32, right: u32 },
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    kind: NodeKind,
}

/// Closest ray hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub face: usize,
    pub t: f64,
    pub u: f64,
    pub v: f64,
}

/// Nearest surface point to a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestPoint {
    pub face: usize,
    pub distance_squared: f64,
    pub point: Vec3,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    triangles: Vec<[Vec3; 3]>,
}

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let triangles: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
        let centroids: Vec<Vec3> = triangles.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<u32> = (0..triangles.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * triangles.len() / MAX_LEAF_SIZE + 1);
        build_node(&mut nodes, &mut order, 0, &triangles, &centroids);
        Ok(Self {
            nodes,
            order,
            triangles,
        })
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Leaf { .. }))
            .count()
    }

    pub fn bounds(&self) -> Aabb {
        self.nodes[0].bounds
    }

    /// Checks the structural invariants: each triangle in exactly one leaf, leaves
    /// hold at most [`MAX_LEAF_SIZE`] triangles, parent boxes contain their children.
    pub fn validate(&self) -> bool {
        let mut seen = vec![0u32; self.triangles.len()];
        for node in &self.nodes {
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    if count as usize > MAX_LEAF_SIZE {
                        return false;
                    }
                    for &id in &self.order[start as usize..(start + count) as usize] {
                        seen[id as usize] += 1;
                        let tri = &self.triangles[id as usize];
                        if !tri.iter().all(|p| node.bounds.contains(p)) {
                            return false;
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    for child in [left, right] {
                        if !node.bounds.contains_box(&self.nodes[child as usize].bounds) {
                            return false;
                        }
                    }
                }
            }
        }
        seen.iter().all(|&c| c == 1)
    }

    fn leaf_triangles(&self, start: u32, count: u32) -> impl Iterator<Item = usize> + '_ {
        self.order[start as usize..(start + count) as usize]
            .iter()
            .map(|&i| i as usize)
    }

    /// Closest hit with `t` in `(0, t_max]`. Equal-`t` hits resolve to the lower face id.
    pub fn closest_hit(&self, ray: &Ray, t_max: f64) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        let mut limit = t_max;
        let mut stack = Vec::with_capacity(64);
        stack.push(0u32);
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if node.bounds.ray_entry(ray, limit).is_none() {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for face in self.leaf_triangles(start, count) {
                        let [a, b, c] = &self.triangles[face];
                        if let Some(h) = intersect_triangle(ray, a, b, c) {
                            if h.t <= limit && better_hit(&h, face, best.as_ref()) {
                                best = Some(RayHit {
                                    face,
                                    t: h.t,
                                    u: h.u,
                                    v: h.v,
                                });
                                limit = h.t;
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let l = self.nodes[left as usize].bounds.ray_entry(ray, limit);
                    let r = self.nodes[right as usize].bounds.ray_entry(ray, limit);
                    // push the farther child first so the nearer one is visited next
                    match (l, r) {
                        (Some(tl), Some(tr)) if tl <= tr => {
                            stack.push(right);
                            stack.push(left);
                        }
                        (Some(_), Some(_)) => {
                            stack.push(left);
                            stack.push(right);
                        }
                        (Some(_), None) => stack.push(left),
                        (None, Some(_)) => stack.push(right),
                        (None, None) => {}
                    }
                }
            }
        }
        best
    }

    /// Calls `f(face, hit)` for every triangle the ray crosses with `t > 0`.
    pub fn for_each_hit(&self, ray: &Ray, mut f: impl FnMut(usize, TriangleHit)) {
        let mut stack = Vec::with_capacity(64);
        stack.push(0u32);
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if node.bounds.ray_entry(ray, f64::INFINITY).is_none() {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for face in self.leaf_triangles(start, count) {
                        let [a, b, c] = &self.triangles[face];
                        if let Some(h) = intersect_triangle(ray, a, b, c) {
                            f(face, h);
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
    }

    /// Nearest point on the surface. The distance equals the minimum over all
    /// triangles exactly, since pruning only skips boxes strictly farther than the
    /// current best.
    pub fn nearest_point(&self, p: &Vec3) -> NearestPoint {
        let mut best = NearestPoint {
            face: usize::MAX,
            distance_squared: f64::INFINITY,
            point: Vec3::zeros(),
        };
        let mut stack: Vec<(u32, f64)> = Vec::with_capacity(64);
        stack.push((0, self.nodes[0].bounds.distance_squared(p)));
        while let Some((ni, lower)) = stack.pop() {
            if lower > best.distance_squared {
                continue;
            }
            match self.nodes[ni as usize].kind {
                NodeKind::Leaf { start, count } => {
                    for face in self.leaf_triangles(start, count) {
                        let [a, b, c] = &self.triangles[face];
                        let q = closest_point_on_triangle(p, a, b, c);
                        let d2 = (p - q).norm_squared();
                        if d2 < best.distance_squared
                            || (d2 == best.distance_squared && face < best.face)
                        {
                            best = NearestPoint {
                                face,
                                distance_squared: d2,
                                point: q,
                            };
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let dl = self.nodes[left as usize].bounds.distance_squared(p);
                    let dr = self.nodes[right as usize].bounds.distance_squared(p);
                    if dl <= dr {
                        stack.push((right, dr));
                        stack.push((left, dl));
                    } else {
                        stack.push((left, dl));
                        stack.push((right, dr));
                    }
                }
            }
        }
        best
    }
}

fn better_hit(h: &TriangleHit, face: usize, best: Option<&RayHit>) -> bool {
    match best {
        None => true,
        Some(b) => h.t < b.t || (h.t == b.t && face < b.face),
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [u32],
    offset: usize,
    triangles: &[[Vec3; 3]],
    centroids: &[Vec3],
) -> u32 {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for &i in order.iter() {
        for p in &triangles[i as usize] {
            bounds.grow(p);
        }
        cbounds.grow(&centroids[i as usize]);
    }
    let index = nodes.len() as u32;
    if order.len() <= MAX_LEAF_SIZE {
        nodes.push(Node {
            bounds,
            kind: NodeKind::Leaf {
                start: offset as u32,
                count: order.len() as u32,
            },
        });
        return index;
    }
    nodes.push(Node {
        bounds,
        kind: NodeKind::Leaf { start: 0, count: 0 },
    });

    let axis = cbounds.longest_axis();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a as usize][axis]
            .total_cmp(&centroids[b as usize][axis])
            .then(a.cmp(&b))
    });
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_node(nodes, lo, offset, triangles, centroids);
    let right = build_node(nodes, hi, offset + mid, triangles, centroids);
    nodes[index as usize].kind = NodeKind::Inner { left, right };
    index
}

/// Closest hit by scanning every triangle; the reference for [`Bvh::closest_hit`].
pub fn closest_hit_naive(mesh: &TriMesh, ray: &Ray, t_max: f64) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    for face in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(face);
        if let Some(h) = intersect_triangle(ray, &a, &b, &c) {
            if h.t <= t_max && better_hit(&h, face, best.as_ref()) {
                best = Some(RayHit {
                    face,
                    t: h.t,
                    u: h.u,
                    v: h.v,
                });
            }
        }
    }
    best
}
