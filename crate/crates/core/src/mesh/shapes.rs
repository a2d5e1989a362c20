//! Procedural meshes used by tests, the acceptance suite and the CLI demo
//! commands.

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TriangleMesh;

pub fn single_triangle() -> TriangleMesh {
    TriangleMesh::new(
        vec![Vector3::zeros(), Vector3::x(), Vector3::y()],
        vec![[0, 1, 2]],
    )
    .expect("valid triangle")
}

pub fn equilateral_triangle() -> TriangleMesh {
    TriangleMesh::new(
        vec![
            Vector3::zeros(),
            Vector3::x(),
            Vector3::new(0.5, 3f64.sqrt() / 2.0, 0.0),
        ],
        vec![[0, 1, 2]],
    )
    .expect("valid triangle")
}

/// Regular tetrahedron with unit edges.
pub fn regular_tetrahedron() -> TriangleMesh {
    let s = 1.0 / 8f64.sqrt();
    let v = vec![
        Vector3::new(1.0, 1.0, 1.0) * s,
        Vector3::new(1.0, -1.0, -1.0) * s,
        Vector3::new(-1.0, 1.0, -1.0) * s,
        Vector3::new(-1.0, -1.0, 1.0) * s,
    ];
    TriangleMesh::new(v, vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]).expect("valid tetrahedron")
}

/// Planar `width x height` rectangle in z = 0 split into `cells_x * cells_y`
/// squares, each cut along the same diagonal. Vertex `(i, j)` has index
/// `j * (cells_x + 1) + i`.
pub fn grid(cells_x: usize, cells_y: usize, width: f64, height: f64) -> TriangleMesh {
    let mut v = Vec::with_capacity((cells_x + 1) * (cells_y + 1));
    for j in 0..=cells_y {
        for i in 0..=cells_x {
            v.push(Vector3::new(
                width * i as f64 / cells_x as f64,
                height * j as f64 / cells_y as f64,
                0.0,
            ));
        }
    }
    let idx = |i: usize, j: usize| j * (cells_x + 1) + i;
    let mut f = Vec::with_capacity(2 * cells_x * cells_y);
    for j in 0..cells_y {
        for i in 0..cells_x {
            f.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            f.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    TriangleMesh::new(v, f).expect("valid grid")
}

/// Unit-radius icosphere; level 3 has 642 vertices.
pub fn icosphere(level: usize) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vector3<f64>> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vector3::new(p[0], p[1], p[2]).normalize())
    .collect();
    let mut f: Vec<[usize; 3]> = vec![
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
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, v: &mut Vec<Vector3<f64>>| {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a] + v[b]) * 0.5).normalize());
                v.len() - 1
            })
        };
        let mut next = Vec::with_capacity(f.len() * 4);
        for [a, b, c] in f {
            let ab = mid(a, b, &mut v);
            let bc = mid(b, c, &mut v);
            let ca = mid(c, a, &mut v);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = next;
    }
    TriangleMesh::new(v, f).expect("valid icosphere")
}

/// Closed genus-0 mesh from a subdivided cube projected onto the unit sphere
/// (with an angle-equalizing warp). `6 g^2 + 2` vertices.
pub fn cube_sphere(g: usize) -> TriangleMesh {
    assert!(g >= 1);
    let mut index: HashMap<[usize; 3], usize> = HashMap::new();
    let mut verts = Vec::new();
    let warp = |i: usize| (std::f64::consts::FRAC_PI_4 * (2.0 * i as f64 / g as f64 - 1.0)).tan();
    let mut vid = |p: [usize; 3], verts: &mut Vec<Vector3<f64>>| {
        *index.entry(p).or_insert_with(|| {
            verts.push(Vector3::new(warp(p[0]), warp(p[1]), warp(p[2])).normalize());
            verts.len() - 1
        })
    };
    let mut faces = Vec::new();
    for axis in 0..3 {
        for &side in &[0, g] {
            let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
            let lattice = |u: usize, w: usize| {
                let mut p = [0; 3];
                p[axis] = side;
                p[ua] = u;
                p[va] = w;
                p
            };
            for u in 0..g {
                for w in 0..g {
                    let q = [
                        vid(lattice(u, w), &mut verts),
                        vid(lattice(u + 1, w), &mut verts),
                        vid(lattice(u + 1, w + 1), &mut verts),
                        vid(lattice(u, w + 1), &mut verts),
                    ];
                    // Alternate diagonals to avoid a global shear direction.
                    let tris = if (u + w) % 2 == 0 {
                        [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
                    } else {
                        [[q[0], q[1], q[3]], [q[1], q[2], q[3]]]
                    };
                    for mut t in tris {
                        let n = (verts[t[1]] - verts[t[0]]).cross(&(verts[t[2]] - verts[t[0]]));
                        let outward = if side == 0 { -1.0 } else { 1.0 };
                        if n[axis] * outward < 0.0 {
                            t.swap(1, 2);
                        }
                        faces.push(t);
                    }
                }
            }
        }
    }
    TriangleMesh::new(verts, faces).expect("valid cube sphere")
}

/// Limb of a star-shaped body: direction, length gain, angular width.
#[derive(Debug, Clone, Copy)]
struct Limb {
    direction: Vector3<f64>,
    gain: f64,
    width: f64,
}

/// Asymmetric star-shaped "body" with a head, two arms and two legs of
/// different lengths, built by radially displacing a cube sphere of
/// resolution `g` (`6 g^2 + 2` vertices). `seed` jitters the limbs so each
/// draw is a distinct shape. No intrinsic reflection symmetry.
pub fn humanoid(g: usize, seed: u64) -> TriangleMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |s: f64| 1.0 + s * (rng.gen::<f64>() - 0.5);
    let limbs = [
        Limb {
            direction: Vector3::new(0.05, 1.0, 0.1),
            gain: 0.7 * jitter(0.2),
            width: 0.10 * jitter(0.2),
        },
        Limb {
            direction: Vector3::new(1.0, 0.25, 0.0),
            gain: 1.3 * jitter(0.2),
            width: 0.07 * jitter(0.2),
        },
        Limb {
            direction: Vector3::new(-1.0, 0.15, 0.2),
            gain: 0.9 * jitter(0.2),
            width: 0.09 * jitter(0.2),
        },
        Limb {
            direction: Vector3::new(0.4, -1.0, 0.0),
            gain: 1.6 * jitter(0.2),
            width: 0.08 * jitter(0.2),
        },
        Limb {
            direction: Vector3::new(-0.35, -1.0, -0.15),
            gain: 1.2 * jitter(0.2),
            width: 0.11 * jitter(0.2),
        },
    ];
    let stretch = Vector3::new(0.8 * jitter(0.1), 1.2 * jitter(0.1), 0.55 * jitter(0.1));
    let base = cube_sphere(g);
    let vertices = base
        .vertices()
        .iter()
        .map(|u| {
            let mut r = 1.0;
            for limb in &limbs {
                let d = limb.direction.normalize();
                r += limb.gain * (-(1.0 - u.dot(&d)) / limb.width).exp();
            }
            (u * r).component_mul(&stretch)
        })
        .collect();
    TriangleMesh::new(vertices, base.faces().to_vec()).expect("valid humanoid")
}

/// Random rigid motion for invariance tests.
pub fn random_rigid(seed: u64) -> (nalgebra::Rotation3<f64>, Vector3<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
    let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.gen::<f64>() * 6.0);
    let t = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 3.0;
    (rot, t)
}
