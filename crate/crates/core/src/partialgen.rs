//! Synthetic partial shapes with exact ground truth.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesics::fmm_from_source;
use crate::matching::{MapMethod, PointMap};
use crate::mesh::{
    area_fraction, extract_submesh, largest_component, load_mesh, save_mesh, MeshFormat, TriangleMesh,
    VertexSubset,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PartialityRecipe {
    /// Removes every vertex closer than `radius` (geodesically) to one of
    /// `count` seed vertices drawn uniformly.
    Holes { count: usize, radius: f64, seed: u64 },
    /// Keeps vertices with `<normal, p> >= offset`.
    PlaneCut { normal: [f64; 3], offset: f64 },
}

impl PartialityRecipe {
    /// Four holes of radius 0.16 (moderate partiality).
    pub fn holes_moderate(seed: u64) -> Self {
        Self::Holes {
            count: 4,
            radius: 0.16,
            seed,
        }
    }

    /// Thirteen holes of radius 0.1 (heavy partiality).
    pub fn holes_heavy(seed: u64) -> Self {
        Self::Holes {
            count: 13,
            radius: 0.1,
            seed,
        }
    }
}

/// A part cut from a full mesh. `map[i]` is the full-mesh vertex of part
/// vertex `i`; the map is injective.
#[derive(Debug, Clone)]
pub struct PartialShape {
    pub mesh: TriangleMesh,
    pub kept: VertexSubset,
    pub recipe: PartialityRecipe,
    /// Kept share of the full mesh's lumped area.
    pub area_fraction: f64,
}

impl PartialShape {
    pub fn map(&self) -> &[usize] {
        self.kept.indices()
    }

    pub fn ground_truth(&self) -> PointMap {
        PointMap::new(self.kept.indices().to_vec(), self.kept.parent_size(), MapMethod::GroundTruth)
    }
}

pub fn generate(mesh: &TriangleMesh, recipe: &PartialityRecipe) -> Result<PartialShape> {
    match *recipe {
        PartialityRecipe::Holes { count, radius, seed } => carve_holes(mesh, count, radius, seed),
        PartialityRecipe::PlaneCut { normal, offset } => plane_cut(mesh, normal, offset),
    }
}

fn finish(mesh: &TriangleMesh, keep: VertexSubset, recipe: PartialityRecipe) -> Result<PartialShape> {
    if keep.is_empty() {
        return Err(Error::EmptyRemainder);
    }
    let (sub, kept) = match extract_submesh(mesh, &keep) {
        Err(Error::EmptySubmesh) => return Err(Error::EmptyRemainder),
        other => other?,
    };
    let (part, inner) = largest_component(&sub)?;
    let kept = kept.compose(&inner)?;
    Ok(PartialShape {
        area_fraction: area_fraction(mesh, &kept),
        mesh: part,
        kept,
        recipe,
    })
}

pub fn carve_holes(mesh: &TriangleMesh, count: usize, radius: f64, seed: u64) -> Result<PartialShape> {
    if count == 0 {
        return Err(Error::InvalidArgument("hole count must be positive".into()));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!("hole radius must be positive, got {radius}")));
    }
    let n = mesh.vertex_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = sample(&mut rng, n, count.min(n)).into_vec();
    let mut removed = vec![false; n];
    for s in seeds {
        for (v, d) in fmm_from_source(mesh, s)?.into_iter().enumerate() {
            if d < radius {
                removed[v] = true;
            }
        }
    }
    let keep = VertexSubset::from_mask(&removed.iter().map(|r| !r).collect::<Vec<_>>());
    finish(mesh, keep, PartialityRecipe::Holes { count, radius, seed })
}

pub fn plane_cut(mesh: &TriangleMesh, normal: [f64; 3], offset: f64) -> Result<PartialShape> {
    let n = nalgebra::Vector3::from(normal);
    let len = n.norm();
    if !(len > 0.0) || !len.is_finite() {
        return Err(Error::InvalidArgument("cut normal must be nonzero".into()));
    }
    let n = n / len;
    let keep: Vec<bool> = mesh.vertices().iter().map(|p| n.dot(p) >= offset).collect();
    finish(
        mesh,
        VertexSubset::from_mask(&keep),
        PartialityRecipe::PlaneCut {
            normal: n.into(),
            offset,
        },
    )
}

/// Plane cut whose missing area is as close as bisection gets to `missing`.
pub fn plane_cut_removing(mesh: &TriangleMesh, normal: [f64; 3], missing: f64) -> Result<PartialShape> {
    if !(0.0..1.0).contains(&missing) {
        return Err(Error::InvalidArgument(format!("missing area fraction {missing} outside [0, 1)")));
    }
    let n = nalgebra::Vector3::from(normal).normalize();
    let proj: Vec<f64> = mesh.vertices().iter().map(|p| n.dot(p)).collect();
    let mut lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if missing == 0.0 {
        return plane_cut(mesh, normal, lo);
    }
    let mut best: Option<PartialShape> = None;
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        match plane_cut(mesh, normal, mid) {
            Ok(part) => {
                let m = 1.0 - part.area_fraction;
                if m < missing {
                    lo = mid;
                } else {
                    hi = mid;
                }
                let better = best
                    .as_ref()
                    .map_or(true, |b| (m - missing).abs() < (1.0 - b.area_fraction - missing).abs());
                if better {
                    best = Some(part);
                }
            }
            Err(Error::EmptyRemainder) => hi = mid,
            Err(e) => return Err(e),
        }
    }
    best.ok_or(Error::EmptyRemainder)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetadata {
    pub recipe: PartialityRecipe,
    pub area_fraction: f64,
    pub full_vertices: usize,
    pub part_vertices: usize,
    pub full_sha256: String,
    pub part_sha256: String,
}

/// Writes `full.off`, `part.off`, `gt.txt` (one full-mesh index per part
/// vertex) and `meta.json` into `dir`.
pub fn export_pair(full: &TriangleMesh, part: &PartialShape, dir: &Path) -> Result<PairMetadata> {
    std::fs::create_dir_all(dir)?;
    save_mesh(full, &dir.join("full.off"), Some(MeshFormat::Off))?;
    save_mesh(&part.mesh, &dir.join("part.off"), Some(MeshFormat::Off))?;
    part.ground_truth().save_text(&dir.join("gt.txt"))?;
    let meta = PairMetadata {
        recipe: part.recipe,
        area_fraction: part.area_fraction,
        full_vertices: full.vertex_count(),
        part_vertices: part.mesh.vertex_count(),
        full_sha256: full.content_hash(),
        part_sha256: part.mesh.content_hash(),
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Reads a directory written by [`export_pair`]: full mesh, part mesh and
/// ground truth.
pub fn load_pair(dir: &Path) -> Result<(TriangleMesh, TriangleMesh, PointMap)> {
    let full = load_mesh(&dir.join("full.off"), None)?;
    let part = load_mesh(&dir.join("part.off"), None)?;
    let gt = PointMap::load_text(&dir.join("gt.txt"), full.vertex_count(), MapMethod::GroundTruth)?;
    if gt.len() != part.vertex_count() {
        return Err(Error::dims("ground-truth length", part.vertex_count(), gt.len()));
    }
    Ok((full, part, gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{normalize_area, shapes};

    #[test]
    fn hole_part_is_exact_restriction() {
        let full = normalize_area(&shapes::humanoid(8, 3)).unwrap();
        let p = carve_holes(&full, 4, 0.16, 7).unwrap();
        assert!(p.mesh.vertex_count() < full.vertex_count());
        assert!(p.area_fraction < 1.0 && p.area_fraction > 0.2);
        for (i, &j) in p.map().iter().enumerate() {
            assert_eq!(p.mesh.vertices()[i], full.vertices()[j]);
        }
        let mut seen = p.map().to_vec();
        seen.dedup();
        assert_eq!(seen.len(), p.map().len());
    }

    #[test]
    fn holes_are_deterministic() {
        let full = normalize_area(&shapes::humanoid(6, 1)).unwrap();
        let a = carve_holes(&full, 3, 0.12, 5).unwrap();
        let b = carve_holes(&full, 3, 0.12, 5).unwrap();
        assert_eq!(a.kept, b.kept);
    }

    #[test]
    fn oversized_holes_leave_nothing() {
        let full = normalize_area(&shapes::icosphere(2)).unwrap();
        assert!(matches!(carve_holes(&full, 2, 100.0, 0), Err(Error::EmptyRemainder)));
    }

    #[test]
    fn plane_cut_keeps_halfspace() {
        let full = shapes::icosphere(3);
        let p = plane_cut(&full, [0.0, 0.0, 2.0], 0.0).unwrap();
        assert!(p.mesh.vertices().iter().all(|v| v.z >= 0.0));
        assert!((p.area_fraction - 0.5).abs() < 0.08);
        assert!(matches!(plane_cut(&full, [0.0, 0.0, 1.0], 2.0), Err(Error::EmptyRemainder)));
    }

    #[test]
    fn bisection_hits_target_fraction() {
        let full = shapes::humanoid(10, 0);
        for target in [0.1, 0.3] {
            let p = plane_cut_removing(&full, [1.0, 0.2, 0.0], target).unwrap();
            assert!((1.0 - p.area_fraction - target).abs() < 0.02, "{}", p.area_fraction);
        }
    }

    #[test]
    fn export_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let full = shapes::humanoid(5, 2);
        let p = plane_cut(&full, [0.0, 1.0, 0.0], -0.2).unwrap();
        let meta = export_pair(&full, &p, dir.path()).unwrap();
        let (f2, p2, gt) = load_pair(dir.path()).unwrap();
        assert_eq!(f2.content_hash(), meta.full_sha256);
        assert_eq!(p2.vertex_count(), meta.part_vertices);
        assert_eq!(gt.targets, p.map());
    }
}
