//! Fast-marching geodesic distances on triangle meshes.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;

/// Dense symmetric all-pairs geodesic distances, stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicMatrix {
    distances: DMatrix<f32>,
    source_mesh_hash: String,
    disconnected: bool,
}

impl GeodesicMatrix {
    pub fn from_parts(distances: DMatrix<f32>, source_mesh_hash: String) -> Result<Self> {
        if distances.nrows() != distances.ncols() {
            return Err(Error::dims("geodesic matrix", distances.nrows(), distances.ncols()));
        }
        let disconnected = distances.iter().any(|d| d.is_infinite());
        Ok(Self {
            distances,
            source_mesh_hash,
            disconnected,
        })
    }

    pub fn size(&self) -> usize {
        self.distances.nrows()
    }

    pub fn distances(&self) -> &DMatrix<f32> {
        &self.distances
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.distances[(i, j)] as f64
    }

    pub fn source_mesh_hash(&self) -> &str {
        &self.source_mesh_hash
    }

    /// True when some pair of vertices is unreachable.
    pub fn is_disconnected(&self) -> bool {
        self.disconnected
    }

    pub fn max_finite(&self) -> f64 {
        self.distances
            .iter()
            .filter(|d| d.is_finite())
            .fold(0.0f32, |a, &b| a.max(b)) as f64
    }

    /// Double-precision copy; fails on unreachable pairs.
    pub fn to_f64(&self) -> Result<DMatrix<f64>> {
        if self.disconnected {
            return Err(Error::InfiniteDistance);
        }
        Ok(self.distances.map(|d| d as f64))
    }

    /// Rows and columns restricted to `indices` (in that order).
    pub fn select(&self, indices: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(indices.len(), indices.len(), |i, j| self.get(indices[i], indices[j]))
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Trial(f64, usize);

impl Eq for Trial {}

impl PartialOrd for Trial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Trial {
    // Min-heap on distance, then on vertex index.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

/// Connectivity shared by every source of one mesh.
struct Marcher<'m> {
    mesh: &'m TriangleMesh,
    vertex_faces: Vec<Vec<usize>>,
    adjacency: Vec<Vec<usize>>,
    non_manifold_vertex: Vec<bool>,
}

impl<'m> Marcher<'m> {
    fn new(mesh: &'m TriangleMesh) -> Self {
        let mut non_manifold_vertex = vec![false; mesh.vertex_count()];
        if mesh.is_non_manifold() {
            let mut count: HashMap<(usize, usize), u32> = HashMap::new();
            for f in mesh.faces() {
                for e in 0..3 {
                    let (a, b) = (f[e], f[(e + 1) % 3]);
                    *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                }
            }
            for ((a, b), c) in count {
                if c > 2 {
                    non_manifold_vertex[a] = true;
                    non_manifold_vertex[b] = true;
                }
            }
        }
        Self {
            mesh,
            vertex_faces: mesh.vertex_faces(),
            adjacency: mesh.adjacency(),
            non_manifold_vertex,
        }
    }

    fn run(&self, source: usize) -> Result<Vec<f64>> {
        let n = self.mesh.vertex_count();
        if source >= n {
            return Err(Error::InvalidArgument(format!("source {source} outside mesh of {n} vertices")));
        }
        let v = self.mesh.vertices();
        let mut dist = vec![f64::INFINITY; n];
        let mut alive = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Trial(0.0, source));

        while let Some(Trial(d, p)) = heap.pop() {
            if alive[p] || d > dist[p] {
                continue;
            }
            if self.non_manifold_vertex[p] {
                return Err(Error::NonManifold { vertex: p });
            }
            alive[p] = true;

            for &q in &self.adjacency[p] {
                if !alive[q] {
                    let cand = dist[p] + (v[q] - v[p]).norm();
                    if cand < dist[q] {
                        dist[q] = cand;
                        heap.push(Trial(cand, q));
                    }
                }
            }
            for &fi in &self.vertex_faces[p] {
                let f = self.mesh.faces()[fi];
                let others: Vec<usize> = f.iter().copied().filter(|&x| x != p).collect();
                for (k, &c) in others.iter().enumerate() {
                    let b = others[1 - k];
                    if alive[c] || !alive[b] {
                        continue;
                    }
                    let cand = triangle_update(v[p], dist[p], v[b], dist[b], v[c]);
                    if cand < dist[c] {
                        dist[c] = cand;
                        heap.push(Trial(cand, c));
                    }
                }
            }
        }
        Ok(dist)
    }
}

/// Arrival time at `c` from the front known at `a` and `b`.
///
/// Acute corner at `c`: planar unfolding of a virtual point source whose
/// distances to `a` and `b` are `ta` and `tb`, accepted only when the ray
/// from that source to `c` crosses edge `ab`. Obtuse corner, or a
/// non-causal solution: the better of the two edge updates.
fn triangle_update(
    a: nalgebra::Vector3<f64>,
    ta: f64,
    b: nalgebra::Vector3<f64>,
    tb: f64,
    c: nalgebra::Vector3<f64>,
) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let bc = c - b;
    let edge = (ta + ac.norm()).min(tb + bc.norm());

    // Obtuse at c.
    if (a - c).dot(&(b - c)) < 0.0 {
        return edge;
    }
    let len_ab = ab.norm();
    let ex = ab / len_ab;
    let xc = ac.dot(&ex);
    let yc = (ac - ex * xc).norm();
    let xs = (ta * ta - tb * tb + len_ab * len_ab) / (2.0 * len_ab);
    let ys2 = ta * ta - xs * xs;
    if ys2 < 0.0 {
        return edge;
    }
    let ys = -ys2.sqrt();
    let t = -ys / (yc - ys);
    let x_cross = xs + (xc - xs) * t;
    if x_cross < 0.0 || x_cross > len_ab {
        return edge;
    }
    let planar = ((xc - xs).powi(2) + (yc - ys).powi(2)).sqrt();
    planar.min(edge)
}

/// Distances from `source` to every vertex; unreachable vertices are `+inf`.
pub fn fmm_from_source(mesh: &TriangleMesh, source: usize) -> Result<Vec<f64>> {
    Marcher::new(mesh).run(source)
}

/// Every row from its own fast march, then symmetrized as `(D + D^T) / 2`.
pub fn geodesic_matrix(mesh: &TriangleMesh) -> Result<GeodesicMatrix> {
    let n = mesh.vertex_count();
    let marcher = Marcher::new(mesh);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| marcher.run(s))
        .collect::<Result<_>>()?;

    let max = rows
        .iter()
        .flatten()
        .copied()
        .filter(|d| d.is_finite())
        .fold(0.0, f64::max);
    let mut asym: f64 = 0.0;
    let mut d = DMatrix::<f32>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (rows[i][j], rows[j][i]);
            if x.is_finite() && y.is_finite() {
                asym = asym.max((x - y).abs());
            }
            d[(i, j)] = if i == j { 0.0 } else { (0.5 * (x + y)) as f32 };
        }
    }
    if asym > 0.02 * max {
        log::warn!("fast-marching asymmetry {asym:.3e} exceeds 2% of the largest distance {max:.3e}");
    }
    GeodesicMatrix::from_parts(d, mesh.content_hash())
}

/// All-pairs shortest paths over mesh edges (an upper bound on geodesics).
pub fn edge_graph_distances(mesh: &TriangleMesh, source: usize) -> Vec<f64> {
    let v = mesh.vertices();
    let adj = mesh.adjacency();
    let mut dist = vec![f64::INFINITY; mesh.vertex_count()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Trial(0.0, source));
    while let Some(Trial(d, p)) = heap.pop() {
        if d > dist[p] {
            continue;
        }
        for &q in &adj[p] {
            let cand = d + (v[q] - v[p]).norm();
            if cand < dist[q] {
                dist[q] = cand;
                heap.push(Trial(cand, q));
            }
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;
    use nalgebra::Vector3;

    #[test]
    fn flat_grid_matches_euclidean() {
        let m = shapes::grid(20, 20, 1.0, 1.0);
        let d = fmm_from_source(&m, 0).unwrap();
        for (i, p) in m.vertices().iter().enumerate().skip(1) {
            let exact = p.norm();
            assert!((d[i] - exact).abs() <= 0.02 * exact, "vertex {i}: {} vs {exact}", d[i]);
        }
    }

    #[test]
    fn sphere_antipode_is_pi() {
        let m = shapes::icosphere(3);
        let d = fmm_from_source(&m, 0).unwrap();
        let anti = m
            .vertices()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 + m.vertices()[0]).norm().total_cmp(&(b.1 + m.vertices()[0]).norm()))
            .unwrap()
            .0;
        let pi = std::f64::consts::PI;
        assert!((d[anti] - pi).abs() <= 0.03 * pi, "{}", d[anti]);
    }

    #[test]
    fn disconnected_is_infinite() {
        let far = shapes::single_triangle()
            .transformed(&nalgebra::Rotation3::identity(), 1.0, Vector3::new(9.0, 0.0, 0.0))
            .unwrap();
        let m = shapes::single_triangle().disjoint_union(&far).unwrap();
        let d = fmm_from_source(&m, 0).unwrap();
        assert!(d[..3].iter().all(|x| x.is_finite()));
        assert!(d[3..].iter().all(|x| x.is_infinite()));
        let g = geodesic_matrix(&m).unwrap();
        assert!(g.is_disconnected());
        assert!(matches!(g.to_f64(), Err(Error::InfiniteDistance)));
    }

    #[test]
    fn unit_triangle_matrix() {
        let g = geodesic_matrix(&shapes::equilateral_triangle()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.0 } else { 1.0 };
                assert!((g.get(i, j) - expected).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn symmetric_and_bounded_by_dijkstra() {
        let m = shapes::grid(8, 6, 1.0, 0.75);
        let g = geodesic_matrix(&m).unwrap();
        assert_eq!(g.distances(), &g.distances().transpose());
        for s in 0..m.vertex_count() {
            let dj = edge_graph_distances(&m, s);
            for t in 0..m.vertex_count() {
                assert!(g.get(s, t) <= dj[t] * (1.0 + 1e-6) + 1e-9);
                assert!(g.get(s, t) >= dj[t] / 1.5 - 1e-9);
            }
        }
    }

    #[test]
    fn non_manifold_fan_is_reported() {
        let v = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let m = TriangleMesh::new(v, vec![[0, 1, 2], [0, 1, 3], [0, 1, 4]]).unwrap();
        assert!(m.is_non_manifold());
        assert!(matches!(fmm_from_source(&m, 2), Err(Error::NonManifold { vertex: 0 | 1 })));
    }
}
