//! Indexed triangle meshes with lumped (barycentric) vertex areas and
//! angle-weighted vertex normals.

mod io;
pub mod shapes;

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use io::{load_mesh, read_mesh, save_mesh, write_mesh, MeshFormat};

/// Triangle surface. Immutable once built; every constructor recomputes the
/// per-vertex quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    vertex_areas: Vec<f64>,
    vertex_normals: Vec<Vector3<f64>>,
    non_manifold: bool,
}

impl TriangleMesh {
    /// Builds a mesh, rejecting out-of-range indices, repeated indices inside
    /// a face, zero-area faces and vertices no face references.
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if faces.is_empty() {
            return Err(Error::EmptySubmesh);
        }
        let mut referenced = vec![false; n];
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    return Err(Error::IndexOutOfRange {
                        offset: fi as u64,
                        index: v as i64,
                        count: n,
                    });
                }
                referenced[v] = true;
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::DegenerateFace {
                    face: fi,
                    reason: "repeated vertex index",
                });
            }
            let [a, b, c] = f.map(|i| vertices[i]);
            let twice_area = (b - a).cross(&(c - a)).norm();
            let longest = (b - a)
                .norm_squared()
                .max((c - b).norm_squared())
                .max((a - c).norm_squared());
            if !twice_area.is_finite() || twice_area <= 1e-12 * longest {
                return Err(Error::DegenerateFace {
                    face: fi,
                    reason: "zero area",
                });
            }
        }
        if let Some(v) = referenced.iter().position(|r| !r) {
            return Err(Error::UnreferencedVertex { vertex: v });
        }

        let mut vertex_areas = vec![0.0; n];
        let mut normal_acc = vec![Vector3::zeros(); n];
        for f in &faces {
            let p = f.map(|i| vertices[i]);
            let cross = (p[1] - p[0]).cross(&(p[2] - p[0]));
            let area = 0.5 * cross.norm();
            let unit = cross / cross.norm();
            for corner in 0..3 {
                vertex_areas[f[corner]] += area / 3.0;
                let e1 = p[(corner + 1) % 3] - p[corner];
                let e2 = p[(corner + 2) % 3] - p[corner];
                let angle = e1.angle(&e2);
                normal_acc[f[corner]] += unit * angle;
            }
        }
        let vertex_normals = normal_acc
            .into_iter()
            .map(|nrm| {
                let len = nrm.norm();
                if len > 0.0 && len.is_finite() {
                    nrm / len
                } else {
                    // Opposite fans cancel exactly; any unit vector is as good.
                    Vector3::z()
                }
            })
            .collect();

        let mut edge_count: HashMap<(usize, usize), u32> = HashMap::with_capacity(faces.len() * 2);
        for f in &faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        let non_manifold = edge_count.values().any(|&c| c > 2);
        if non_manifold {
            log::warn!("mesh has edges shared by more than two faces");
        }

        Ok(Self {
            vertices,
            faces,
            vertex_areas,
            vertex_normals,
            non_manifold,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Diagonal of the lumped mass matrix.
    pub fn vertex_areas(&self) -> &[f64] {
        &self.vertex_areas
    }

    pub fn vertex_normals(&self) -> &[Vector3<f64>] {
        &self.vertex_normals
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// True when some edge is shared by more than two faces.
    pub fn is_non_manifold(&self) -> bool {
        self.non_manifold
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.faces[face].map(|i| self.vertices[i]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Unique undirected edges `(min, max)`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| (0..3).map(move |e| (f[e].min(f[(e + 1) % 3]), f[e].max(f[(e + 1) % 3]))))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Vertex-to-vertex adjacency lists (sorted).
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertex_count()];
        for (a, b) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Incident faces per vertex.
    pub fn vertex_faces(&self) -> Vec<Vec<usize>> {
        let mut vf = vec![Vec::new(); self.vertex_count()];
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                vf[v].push(fi);
            }
        }
        vf
    }

    /// Applies `p -> rotation * p * scale + translation` to every vertex.
    pub fn transformed(
        &self,
        rotation: &nalgebra::Rotation3<f64>,
        scale: f64,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let vertices = self
            .vertices
            .iter()
            .map(|p| rotation * p * scale + translation)
            .collect();
        Self::new(vertices, self.faces.clone())
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        let vertices = self.vertices.iter().map(|p| p * s).collect();
        Self::new(vertices, self.faces.clone())
    }

    /// SHA-256 over the little-endian vertex coordinates and face indices.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vertices.len() as u64).to_le_bytes());
        h.update((self.faces.len() as u64).to_le_bytes());
        for p in &self.vertices {
            for c in p.iter() {
                h.update(c.to_le_bytes());
            }
        }
        for f in &self.faces {
            for &i in f {
                h.update((i as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Relabels vertices: new vertex `i` is old vertex `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.vertex_count();
        if order.len() != n {
            return Err(Error::dims("permutation", n, order.len()));
        }
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::InvalidArgument("order is not a permutation".into()));
            }
            inverse[old] = new;
        }
        let vertices = order.iter().map(|&o| self.vertices[o]).collect();
        let faces = self.faces.iter().map(|f| f.map(|v| inverse[v])).collect();
        Self::new(vertices, faces)
    }

    /// Disjoint union; the second mesh's vertices follow the first's.
    pub fn disjoint_union(&self, other: &TriangleMesh) -> Result<Self> {
        let offset = self.vertex_count();
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut faces = self.faces.clone();
        faces.extend(other.faces.iter().map(|f| f.map(|v| v + offset)));
        Self::new(vertices, faces)
    }
}

/// Sorted, distinct vertex indices into a parent mesh of known size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VertexSubset {
    parent_size: usize,
    indices: Vec<usize>,
}

impl VertexSubset {
    pub fn new(parent_size: usize, indices: Vec<usize>) -> Result<Self> {
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSubset(format!(
                "indices not strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if let Some(&last) = indices.last() {
            if last >= parent_size {
                return Err(Error::InvalidSubset(format!(
                    "index {last} out of range for parent of size {parent_size}"
                )));
            }
        }
        Ok(Self {
            parent_size,
            indices,
        })
    }

    /// Sorts and deduplicates before validating.
    pub fn from_unsorted(parent_size: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        Self::new(parent_size, indices)
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        Self {
            parent_size: mask.len(),
            indices: mask
                .iter()
                .enumerate()
                .filter_map(|(i, &k)| k.then_some(i))
                .collect(),
        }
    }

    pub fn all(parent_size: usize) -> Self {
        Self {
            parent_size,
            indices: (0..parent_size).collect(),
        }
    }

    pub fn parent_size(&self) -> usize {
        self.parent_size
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, v: usize) -> bool {
        self.indices.binary_search(&v).is_ok()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.parent_size];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }

    pub fn complement(&self) -> Self {
        let mask = self.mask();
        Self {
            parent_size: self.parent_size,
            indices: (0..self.parent_size).filter(|&i| !mask[i]).collect(),
        }
    }

    /// Maps a subset of this subset (indices local to it) back to the parent.
    pub fn compose(&self, inner: &VertexSubset) -> Result<Self> {
        if inner.parent_size != self.len() {
            return Err(Error::dims("subset composition", self.len(), inner.parent_size));
        }
        Ok(Self {
            parent_size: self.parent_size,
            indices: inner.indices.iter().map(|&i| self.indices[i]).collect(),
        })
    }
}

/// Uniform scaling (about the origin) to unit total surface area.
pub fn normalize_area(mesh: &TriangleMesh) -> Result<TriangleMesh> {
    let area = mesh.total_area();
    if !(area > 0.0) || !area.is_finite() {
        return Err(Error::ZeroArea);
    }
    if (area - 1.0).abs() <= 1e-12 {
        return Ok(mesh.clone());
    }
    mesh.scaled(1.0 / area.sqrt())
}

/// Induced submesh over the faces whose three vertices are kept. Vertices
/// left without a face are dropped; the returned subset lists the surviving
/// parent indices in submesh order.
pub fn extract_submesh(
    mesh: &TriangleMesh,
    keep: &VertexSubset,
) -> Result<(TriangleMesh, VertexSubset)> {
    let n = mesh.vertex_count();
    if keep.parent_size() != n {
        return Err(Error::dims("vertex subset parent", n, keep.parent_size()));
    }
    if keep.is_empty() {
        return Err(Error::InvalidSubset("empty keep set".into()));
    }
    let kept = keep.mask();
    let faces: Vec<[usize; 3]> = mesh
        .faces()
        .iter()
        .filter(|f| f.iter().all(|&v| kept[v]))
        .copied()
        .collect();
    if faces.is_empty() {
        return Err(Error::EmptySubmesh);
    }
    let mut used = vec![false; n];
    for f in &faces {
        for &v in f {
            used[v] = true;
        }
    }
    let surviving = VertexSubset::from_mask(&used);
    let mut local = vec![usize::MAX; n];
    for (new, &old) in surviving.indices().iter().enumerate() {
        local[old] = new;
    }
    let vertices = surviving
        .indices()
        .iter()
        .map(|&v| mesh.vertices()[v])
        .collect();
    let faces = faces.into_iter().map(|f| f.map(|v| local[v])).collect();
    Ok((TriangleMesh::new(vertices, faces)?, surviving))
}

/// Edge-connected components, largest first (ties: smallest vertex first).
pub fn connected_components(mesh: &TriangleMesh) -> Vec<VertexSubset> {
    let n = mesh.vertex_count();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for f in mesh.faces() {
        for e in 0..3 {
            let a = find(&mut parent, f[e]);
            let b = find(&mut parent, f[(e + 1) % 3]);
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for v in 0..n {
        let r = find(&mut parent, v);
        groups.entry(r).or_default().push(v);
    }
    let mut comps: Vec<Vec<usize>> = groups.into_values().collect();
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
        .into_iter()
        .map(|indices| VertexSubset {
            parent_size: n,
            indices,
        })
        .collect()
}

/// Fraction of the mesh's lumped area carried by `subset`. The same
/// definition backs partial-shape metadata and the missing-area fraction.
pub fn area_fraction(mesh: &TriangleMesh, subset: &VertexSubset) -> f64 {
    let total: f64 = mesh.vertex_areas().iter().sum();
    let part: f64 = subset.indices().iter().map(|&v| mesh.vertex_areas()[v]).sum();
    part / total
}

/// Keeps only the largest connected component.
pub fn largest_component(mesh: &TriangleMesh) -> Result<(TriangleMesh, VertexSubset)> {
    let comps = connected_components(mesh);
    if comps.len() == 1 {
        return Ok((mesh.clone(), VertexSubset::all(mesh.vertex_count())));
    }
    extract_submesh(mesh, &comps[0])
}
