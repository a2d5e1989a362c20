//! C interface to `shapecorr`.
//!
//! Every fallible function returns a [`ShapecorrStatus`]; on failure the
//! message is kept per thread and read with [`shapecorr_last_error`].
//! Handles are opaque and released with their matching `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::Vector3;
use shapecorr::eval::evaluate;
use shapecorr::geodesics::{geodesic_matrix, GeodesicMatrix};
use shapecorr::matching::{nearest_neighbor_map, spectrally_smoothed_map, MapMethod, PointMap};
use shapecorr::mesh::{load_mesh, TriangleMesh};
use shapecorr::optimize::initial_features;
use shapecorr::spectral::{eigenbasis, SpectralBasis};
use shapecorr::Error;

/// Result codes. Values 2 to 8 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapecorrStatus {
    Ok = 0,
    NullPointer = 1,
    Parse = 2,
    Geometry = 3,
    InvalidArgument = 4,
    Numerical = 5,
    NonFinite = 6,
    Cache = 7,
    Io = 8,
    Panic = 9,
}

impl ShapecorrStatus {
    fn from_code(code: i32) -> Self {
        match code {
            2 => Self::Parse,
            3 => Self::Geometry,
            4 => Self::InvalidArgument,
            5 => Self::Numerical,
            6 => Self::NonFinite,
            7 => Self::Cache,
            _ => Self::Io,
        }
    }
}

pub struct ShapecorrMesh(TriangleMesh);
pub struct ShapecorrBasis(SpectralBasis);
pub struct ShapecorrGeodesics(GeodesicMatrix);
pub struct ShapecorrPointMap(PointMap);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: ShapecorrStatus, msg: impl Into<String>) -> ShapecorrStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), ShapecorrStatus>) -> ShapecorrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ShapecorrStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(ShapecorrStatus::Panic, "internal panic"),
    }
}

fn lib(e: Error) -> ShapecorrStatus {
    fail(ShapecorrStatus::from_code(e.code()), e.to_string())
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, ShapecorrStatus> {
    p.as_ref().ok_or_else(|| fail(ShapecorrStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, ShapecorrStatus> {
    p.as_mut().ok_or_else(|| fail(ShapecorrStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], ShapecorrStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(ShapecorrStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, capacity: usize, what: &str) -> Result<(), ShapecorrStatus> {
    if capacity < src.len() {
        return Err(fail(
            ShapecorrStatus::InvalidArgument,
            format!("{what} needs room for {} values, got {capacity}", src.len()),
        ));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(fail(ShapecorrStatus::NullPointer, format!("{what} is null")));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failure on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn shapecorr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn shapecorr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an OFF or OBJ file (chosen by extension).
#[no_mangle]
pub unsafe extern "C" fn shapecorr_mesh_load(path: *const c_char, out: *mut *mut ShapecorrMesh) -> ShapecorrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = deref(path, "path")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(ShapecorrStatus::InvalidArgument, "path is not UTF-8"))?;
        let mesh = load_mesh(Path::new(path), None).map_err(lib)?;
        *out = boxed(ShapecorrMesh(mesh));
        Ok(())
    })
}

/// Builds a mesh from `3 * vertex_count` coordinates and `3 * face_count`
/// zero-based vertex indices.
#[no_mangle]
pub unsafe extern "C" fn shapecorr_mesh_from_arrays(
    vertices: *const f64,
    vertex_count: usize,
    faces: *const u32,
    face_count: usize,
    out: *mut *mut ShapecorrMesh,
) -> ShapecorrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let v = slice(vertices, 3 * vertex_count, "vertices")?;
        let f = slice(faces, 3 * face_count, "faces")?;
        let verts = v.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        let tris = f
            .chunks_exact(3)
            .map(|c| [c[0] as usize, c[1] as usize, c[2] as usize])
            .collect();
        let mesh = TriangleMesh::new(verts, tris).map_err(lib)?;
        *out = boxed(ShapecorrMesh(mesh));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn shapecorr_mesh_vertex_count(mesh: *const ShapecorrMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.vertex_count())
}

#[no_mangle]
pub unsafe extern "C" fn shapecorr_mesh_area(mesh: *const ShapecorrMesh) -> f64 {
    mesh.as_ref().map_or(0.0, |m| m.0.total_area())
}

#[no_mangle]
pub unsafe extern "C" fn shapecorr_mesh_free(mesh: *mut ShapecorrMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// First `k` Laplace-Beltrami eigenpairs.
#[no_mangle]
pub unsafe extern "C" fn shapecorr_basis_compute(
    mesh: *const ShapecorrMesh,
    k: usize,
    out: *mut *mut ShapecorrBasis,
) -> ShapecorrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let mesh = deref(mesh, "mesh")?;
        *out = boxed(ShapecorrBasis(eigenbasis(&mesh.0, k).map_err(lib)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn shapecorr_basis_k(basis: *const ShapecorrBasis) -> usize {
    basis.as_ref().map_or(0, |b| b.0.k())
}

/// Copies the `k` eigenvalues in ascending order.
#[no_mangle]
pub unsafe extern "C" fn shapecorr_basis_eigenvalues(
    basis: *const ShapecorrBasis,
    out: *mut f64,
    capacity: usize,
) -> ShapecorrStatus {
    guard(|| {
        let b = deref(basis, "basis")?;
        copy_out(b.0.eigenvalues().as_slice(), out, capacity, "out")
    })
}

/// Copies the eigenvectors column by column (`vertex_count * k` values).
#[no_mangle]
pub unsafe extern "C" fn shapecorr_basis_eigenvectors(
    basis: *const ShapecorrBasis,
    out: *mut f64,
    capacity: usize,
) -> ShapecorrStatus {
    guard(|| {
        let b = deref(basis, "basis")?;
        copy_out(b.0.eigenvectors().as_slice(), out, capacity, "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn shapecorr_basis_free(basis: *mut ShapecorrBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

/// All-pairs geodesic distances.
#[no_mangle]
pub unsafe extern "C" fn shapecorr_geodesics_compute(
    mesh: *const ShapecorrMesh,
    out: *mut *mut ShapecorrGeodesics,
) -> ShapecorrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let mesh = deref(mesh, "mesh")?;
        *out = boxed(ShapecorrGeodesics(geodesic_matrix(&mesh.0).map_err(lib)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn shapecorr_geodesics_get(
    geodesics: *const ShapecorrGeodesics,
    i: usize,
    j: usize,
    out: *mut f64,
) -> ShapecorrStatus {
    guard(|| {
        let g = deref(geodesics, "geodesics")?;
        let out = out_ptr(out, "out")?;
        let n = g.0.size();
        if i >= n || j >= n {
            return Err(fail(ShapecorrStatus::InvalidArgument, format!("index outside 0..{n}")));
        }
        *out = g.0.get(i, j);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn shapecorr_geodesics_free(geodesics: *mut ShapecorrGeodesics) {
    if !geodesics.is_null() {
        drop(Box::from_raw(geodesics));
    }
}

/// Point map from part to full shape by nearest wave kernel signatures,
/// followed by spectral smoothing. Both bases must have the same size.
#[no_mangle]
pub unsafe extern "C" fn shapecorr_match_wks(
    basis_full: *const ShapecorrBasis,
    basis_part: *const ShapecorrBasis,
    bins: usize,
    out: *mut *mut ShapecorrPointMap,
) -> ShapecorrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let bx = deref(basis_full, "basis_full")?;
        let by = deref(basis_part, "basis_part")?;
        let (fx, fy) = initial_features(&bx.0, &by.0, bins, bins).map_err(lib)?;
        let nn = nearest_neighbor_map(fy.values(), fx.values()).map_err(lib)?;
        *out = boxed(ShapecorrPointMap(spectrally_smoothed_map(&nn, &bx.0, &by.0).map_err(lib)?));
        Ok(())
    })
}

/// Wraps caller-supplied targets (one full-shape vertex per part vertex).
#[no_mangle]
pub unsafe extern "C" fn shapecorr_pointmap_from_targets(
    targets: *const usize,
    len: usize,
    target_count: usize,
    out: *mut *mut ShapecorrPointMap,
) -> ShapecorrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let t = slice(targets, len, "targets")?;
        if let Some(bad) = t.iter().find(|&&v| v >= target_count) {
            return Err(fail(
                ShapecorrStatus::InvalidArgument,
                format!("target {bad} outside 0..{target_count}"),
            ));
        }
        *out = boxed(ShapecorrPointMap(PointMap::new(t.to_vec(), target_count, MapMethod::GroundTruth)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn shapecorr_pointmap_len(map: *const ShapecorrPointMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.len())
}

#[no_mangle]
pub unsafe extern "C" fn shapecorr_pointmap_targets(
    map: *const ShapecorrPointMap,
    out: *mut usize,
    capacity: usize,
) -> ShapecorrStatus {
    guard(|| {
        let m = deref(map, "map")?;
        copy_out(&m.0.targets, out, capacity, "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn shapecorr_pointmap_free(map: *mut ShapecorrPointMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Mean geodesic error of `pred` against `truth`, normalized by the square
/// root of `full_area`.
#[no_mangle]
pub unsafe extern "C" fn shapecorr_eval_mean_error(
    pred: *const ShapecorrPointMap,
    truth: *const ShapecorrPointMap,
    geodesics_full: *const ShapecorrGeodesics,
    full_area: f64,
    out: *mut f64,
) -> ShapecorrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let p = deref(pred, "pred")?;
        let t = deref(truth, "truth")?;
        let g = deref(geodesics_full, "geodesics_full")?;
        *out = evaluate(&p.0, &t.0.targets, &g.0, full_area).map_err(lib)?.mean_error;
        Ok(())
    })
}
