//! Closed reference shapes with outward-facing winding.

use std::collections::HashMap;

use super::TriMesh;
use crate::geometry::Vec3;

/// Regular icosahedron with circumradius `radius`, centered at the origin.
pub fn icosahedron(radius: f64) -> TriMesh {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ];
    let vertices = raw
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize() * radius)
        .collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    TriMesh {
        vertices,
        faces,
        tags: None,
    }
}

/// Icosahedron refined `levels` times by 1-to-4 splits with vertices pushed back
/// onto the sphere. `20 * 4^levels` faces.
pub fn icosphere(radius: f64, levels: usize) -> TriMesh {
    let mut mesh = icosahedron(radius);
    for _ in 0..levels {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut vertices = mesh.vertices.clone();
        let mut mid = |a: u32, b: u32, vertices: &mut Vec<Vec3>| -> u32 {
            *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let p = (vertices[a as usize] + vertices[b as usize]).normalize() * radius;
                vertices.push(p);
                (vertices.len() - 1) as u32
            })
        };
        let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
        for &[a, b, c] in &mesh.faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            faces.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        mesh = TriMesh {
            vertices,
            faces,
            tags: None,
        };
    }
    mesh
}

/// Axis-aligned box between `min` and `max`, two triangles per side.
pub fn box_mesh(min: Vec3, max: Vec3) -> TriMesh {
    let corner = |i: usize| {
        Vec3::new(
            if i & 1 == 0 { min.x } else { max.x },
            if i & 2 == 0 { min.y } else { max.y },
            if i & 4 == 0 { min.z } else { max.z },
        )
    };
    let vertices = (0..8).map(corner).collect();
    let faces = vec![
        // -x
        [0, 4, 6],
        [0, 6, 2],
        // +x
        [1, 3, 7],
        [1, 7, 5],
        // -y
        [0, 1, 5],
        [0, 5, 4],
        // +y
        [2, 6, 7],
        [2, 7, 3],
        // -z
        [0, 2, 3],
        [0, 3, 1],
        // +z
        [4, 5, 7],
        [4, 7, 6],
    ];
    TriMesh {
        vertices,
        faces,
        tags: None,
    }
}

pub fn unit_cube() -> TriMesh {
    box_mesh(Vec3::repeat(-0.5), Vec3::repeat(0.5))
}
