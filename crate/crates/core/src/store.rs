//! Binary container with named matrix and text sections, used to cache
//! spectral bases, geodesic matrices and features.
//!
//! Layout (little endian): 8-byte magic, `u32` version, `u32` section count,
//! then per section a `u16` name length, the UTF-8 name, a `u8` type tag
//! (1 = f64 matrix, 2 = f32 matrix, 3 = UTF-8 text), `u64` rows, `u64` cols and
//! the row-major payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::descriptors::{FeatureMatrix, Provenance};
use crate::error::{Error, Result};
use crate::geodesics::GeodesicMatrix;
use crate::spectral::SpectralBasis;

const MAGIC: &[u8; 8] = b"SHPCORR\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    F64(DMatrix<f64>),
    F32(DMatrix<f32>),
    Text(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    sections: BTreeMap<String, Section>,
}

fn container_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Container {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, section: Section) {
        self.sections.insert(name.into(), section);
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for (name, s) in &self.sections {
            out.write_all(&(name.len() as u16).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            match s {
                Section::F64(m) => {
                    header(out, 1, m.nrows(), m.ncols())?;
                    for r in 0..m.nrows() {
                        for c in 0..m.ncols() {
                            out.write_all(&m[(r, c)].to_le_bytes())?;
                        }
                    }
                }
                Section::F32(m) => {
                    header(out, 2, m.nrows(), m.ncols())?;
                    for r in 0..m.nrows() {
                        for c in 0..m.ncols() {
                            out.write_all(&m[(r, c)].to_le_bytes())?;
                        }
                    }
                }
                Section::Text(t) => {
                    header(out, 3, t.len(), 1)?;
                    out.write_all(t.as_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("partial");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| container_err(path, "truncated header"))?;
        if &magic != MAGIC {
            return Err(container_err(path, "not a container file"));
        }
        let version = read_u32(&mut r, path)?;
        if version != VERSION {
            return Err(container_err(path, format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r, path)?;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len).map_err(|_| container_err(path, "truncated section name"))?;
            let name = take(&mut r, u16::from_le_bytes(len) as usize, path)?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| container_err(path, "section name is not UTF-8"))?;
            let tag = take(&mut r, 1, path)?[0];
            let rows = read_u64(&mut r, path)? as usize;
            let cols = read_u64(&mut r, path)? as usize;
            let cells = rows.checked_mul(cols).ok_or_else(|| container_err(path, "section too large"))?;
            let section = match tag {
                1 => {
                    let raw = take(&mut r, cells.checked_mul(8).ok_or_else(|| container_err(path, "section too large"))?, path)?;
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    Section::F64(DMatrix::from_row_slice(rows, cols, &v))
                }
                2 => {
                    let raw = take(&mut r, cells.checked_mul(4).ok_or_else(|| container_err(path, "section too large"))?, path)?;
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    Section::F32(DMatrix::from_row_slice(rows, cols, &v))
                }
                3 => {
                    let raw = take(&mut r, rows, path)?;
                    Section::Text(String::from_utf8(raw.to_vec()).map_err(|_| container_err(path, "text section is not UTF-8"))?)
                }
                t => return Err(container_err(path, format!("unknown section type {t}"))),
            };
            sections.insert(name, section);
        }
        if !r.is_empty() {
            return Err(container_err(path, "trailing bytes"));
        }
        Ok(Self { sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&bytes, path)
    }

    fn f64(&self, name: &str, path: &Path) -> Result<&DMatrix<f64>> {
        match self.sections.get(name) {
            Some(Section::F64(m)) => Ok(m),
            _ => Err(container_err(path, format!("missing f64 section {name:?}"))),
        }
    }

    fn text(&self, name: &str, path: &Path) -> Result<&str> {
        match self.sections.get(name) {
            Some(Section::Text(t)) => Ok(t),
            _ => Err(container_err(path, format!("missing text section {name:?}"))),
        }
    }
}

fn header(out: &mut impl Write, tag: u8, rows: usize, cols: usize) -> Result<()> {
    out.write_all(&[tag])?;
    out.write_all(&(rows as u64).to_le_bytes())?;
    out.write_all(&(cols as u64).to_le_bytes())?;
    Ok(())
}

fn take<'a>(r: &mut &'a [u8], n: usize, path: &Path) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(container_err(path, "truncated section"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8], path: &Path) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4, path)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut &[u8], path: &Path) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8, path)?.try_into().expect("8 bytes")))
}

/// Metadata stored with every cached artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub kind: String,
    pub mesh_sha256: String,
    pub rows: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
}

fn meta_section(meta: &ArtifactMeta) -> Result<Section> {
    Ok(Section::Text(serde_json::to_string(meta)?))
}

fn read_meta(c: &Container, path: &Path, kind: &str) -> Result<ArtifactMeta> {
    let meta: ArtifactMeta = serde_json::from_str(c.text("meta", path)?)?;
    if meta.kind != kind {
        return Err(container_err(path, format!("holds a {} artifact, expected {kind}", meta.kind)));
    }
    Ok(meta)
}

pub fn save_basis(basis: &SpectralBasis, mesh_sha256: &str, path: &Path) -> Result<()> {
    let mut c = Container::new();
    let mut params = BTreeMap::new();
    params.insert("k".into(), basis.k().to_string());
    c.insert(
        "meta",
        meta_section(&ArtifactMeta {
            kind: "basis".into(),
            mesh_sha256: mesh_sha256.into(),
            rows: basis.vertex_count(),
            params,
        })?,
    );
    c.insert("eigenvalues", Section::F64(DMatrix::from_column_slice(basis.k(), 1, basis.eigenvalues().as_slice())));
    c.insert("eigenvectors", Section::F64(basis.eigenvectors().clone()));
    c.insert("mass", Section::F64(DMatrix::from_column_slice(basis.vertex_count(), 1, basis.mass().as_slice())));
    c.save(path)
}

pub fn load_basis(path: &Path) -> Result<(SpectralBasis, ArtifactMeta)> {
    let c = Container::load(path)?;
    let meta = read_meta(&c, path, "basis")?;
    let ev = c.f64("eigenvalues", path)?;
    let basis = SpectralBasis::from_parts(
        DVector::from_column_slice(ev.as_slice()),
        c.f64("eigenvectors", path)?.clone(),
        DVector::from_column_slice(c.f64("mass", path)?.as_slice()),
    )?;
    Ok((basis, meta))
}

pub fn save_geodesics(g: &GeodesicMatrix, path: &Path) -> Result<()> {
    let mut c = Container::new();
    c.insert(
        "meta",
        meta_section(&ArtifactMeta {
            kind: "geodesics".into(),
            mesh_sha256: g.source_mesh_hash().into(),
            rows: g.size(),
            params: BTreeMap::new(),
        })?,
    );
    c.insert("distances", Section::F32(g.distances().clone()));
    c.save(path)
}

pub fn load_geodesics(path: &Path) -> Result<GeodesicMatrix> {
    let c = Container::load(path)?;
    let meta = read_meta(&c, path, "geodesics")?;
    match c.get("distances") {
        Some(Section::F32(d)) if d.nrows() == meta.rows => GeodesicMatrix::from_parts(d.clone(), meta.mesh_sha256),
        _ => Err(container_err(path, "missing or malformed distance section")),
    }
}

pub fn save_features(f: &FeatureMatrix, mesh_sha256: &str, params: BTreeMap<String, String>, path: &Path) -> Result<()> {
    let mut c = Container::new();
    let mut params = params;
    params.insert("provenance".into(), f.provenance().as_str().into());
    c.insert(
        "meta",
        meta_section(&ArtifactMeta {
            kind: "features".into(),
            mesh_sha256: mesh_sha256.into(),
            rows: f.rows(),
            params,
        })?,
    );
    c.insert("values", Section::F64(f.values().clone()));
    c.save(path)
}

pub fn load_features(path: &Path) -> Result<(FeatureMatrix, ArtifactMeta)> {
    let c = Container::load(path)?;
    let meta = read_meta(&c, path, "features")?;
    let prov = meta
        .params
        .get("provenance")
        .and_then(|p| Provenance::parse(p))
        .unwrap_or(Provenance::Loaded);
    Ok((FeatureMatrix::new(c.f64("values", path)?.clone(), prov)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesics::geodesic_matrix;
    use crate::mesh::shapes;
    use crate::spectral::eigenbasis;

    #[test]
    fn basis_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = shapes::icosphere(1);
        let b = eigenbasis(&m, 6).unwrap();
        let p = dir.path().join("b.bin");
        save_basis(&b, &m.content_hash(), &p).unwrap();
        let (b2, meta) = load_basis(&p).unwrap();
        assert_eq!(b, b2);
        assert_eq!(meta.mesh_sha256, m.content_hash());
        assert!(load_geodesics(&p).is_err());
    }

    #[test]
    fn geodesics_and_features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = shapes::grid(3, 2, 1.0, 1.0);
        let g = geodesic_matrix(&m).unwrap();
        let p = dir.path().join("g.bin");
        save_geodesics(&g, &p).unwrap();
        assert_eq!(load_geodesics(&p).unwrap(), g);
        let f = crate::descriptors::xyz_normal_features(&m);
        let q = dir.path().join("f.bin");
        save_features(&f, "abc", BTreeMap::new(), &q).unwrap();
        let (f2, meta) = load_features(&q).unwrap();
        assert_eq!(f2, f);
        assert_eq!(meta.params["provenance"], "xyz-normals");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let mut c = Container::new();
        c.insert("a", Section::F64(DMatrix::from_element(2, 2, 1.5)));
        c.insert("t", Section::Text("hello".into()));
        c.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(Container::read_from(&bytes, &p).unwrap(), c);
        assert!(Container::read_from(&bytes[..bytes.len() - 3], &p).is_err());
        assert!(Container::read_from(b"garbage!garbage!", &p).is_err());
    }
}
