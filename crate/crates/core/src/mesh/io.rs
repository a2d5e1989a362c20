//! OFF, OBJ (`v`/`f` records only) and PLY (ascii and binary) readers and
//! writers. Parse errors carry the byte offset of the offending record.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use super::TriangleMesh;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Obj,
    /// ASCII PLY when writing; either encoding is accepted when reading.
    Ply,
    PlyBinary,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "off" => Some(Self::Off),
            "obj" => Some(Self::Obj),
            "ply" => Some(Self::Ply),
            _ => None,
        }
    }
}

pub fn load_mesh(path: &Path, format: Option<MeshFormat>) -> Result<TriangleMesh> {
    let format = format
        .or_else(|| MeshFormat::from_path(path))
        .ok_or_else(|| Error::InvalidArgument(format!("unknown mesh format for {}", path.display())))?;
    let bytes = fs::read(path)?;
    read_mesh(&bytes, format)
}

pub fn read_mesh(bytes: &[u8], format: MeshFormat) -> Result<TriangleMesh> {
    let (v, f) = match format {
        MeshFormat::Off => parse_off(bytes)?,
        MeshFormat::Obj => parse_obj(bytes)?,
        MeshFormat::Ply | MeshFormat::PlyBinary => parse_ply(bytes)?,
    };
    TriangleMesh::new(v, f)
}

pub fn save_mesh(mesh: &TriangleMesh, path: &Path, format: Option<MeshFormat>) -> Result<()> {
    let format = format
        .or_else(|| MeshFormat::from_path(path))
        .ok_or_else(|| Error::InvalidArgument(format!("unknown mesh format for {}", path.display())))?;
    let mut buf = Vec::new();
    write_mesh(mesh, &mut buf, format)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_mesh(mesh: &TriangleMesh, out: &mut impl Write, format: MeshFormat) -> Result<()> {
    let (v, f) = (mesh.vertices(), mesh.faces());
    match format {
        MeshFormat::Off => {
            writeln!(out, "OFF")?;
            writeln!(out, "{} {} 0", v.len(), f.len())?;
            for p in v {
                writeln!(out, "{:?} {:?} {:?}", p.x, p.y, p.z)?;
            }
            for t in f {
                writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
            }
        }
        MeshFormat::Obj => {
            for p in v {
                writeln!(out, "v {:?} {:?} {:?}", p.x, p.y, p.z)?;
            }
            for t in f {
                writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
            }
        }
        MeshFormat::Ply | MeshFormat::PlyBinary => {
            let binary = format == MeshFormat::PlyBinary;
            writeln!(out, "ply")?;
            if binary {
                writeln!(out, "format binary_little_endian 1.0")?;
            } else {
                writeln!(out, "format ascii 1.0")?;
            }
            writeln!(out, "element vertex {}", v.len())?;
            writeln!(out, "property double x\nproperty double y\nproperty double z")?;
            writeln!(out, "element face {}", f.len())?;
            writeln!(out, "property list uchar int vertex_indices")?;
            writeln!(out, "end_header")?;
            if binary {
                for p in v {
                    for c in p.iter() {
                        out.write_all(&c.to_le_bytes())?;
                    }
                }
                for t in f {
                    out.write_all(&[3u8])?;
                    for &i in t {
                        out.write_all(&(i as i32).to_le_bytes())?;
                    }
                }
            } else {
                for p in v {
                    writeln!(out, "{:?} {:?} {:?}", p.x, p.y, p.z)?;
                }
                for t in f {
                    writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
                }
            }
        }
    }
    Ok(())
}

/// Non-empty, comment-stripped lines with their starting byte offsets.
fn records(bytes: &[u8]) -> impl Iterator<Item = (u64, &str)> {
    let mut offset = 0u64;
    bytes.split(|&b| b == b'\n').filter_map(move |raw| {
        let start = offset;
        offset += raw.len() as u64 + 1;
        let line = std::str::from_utf8(raw).ok()?;
        let line = line.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((start, line))
    })
}

fn parse_f64(tok: Option<&str>, offset: u64) -> Result<f64> {
    let tok = tok.ok_or_else(|| Error::parse(offset, "missing coordinate"))?;
    tok.parse()
        .map_err(|_| Error::parse(offset, format!("invalid number `{tok}`")))
}

fn parse_usize(tok: Option<&str>, offset: u64, what: &str) -> Result<usize> {
    let tok = tok.ok_or_else(|| Error::parse(offset, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::parse(offset, format!("invalid {what} `{tok}`")))
}

fn check_index(index: i64, count: usize, offset: u64) -> Result<usize> {
    if index < 0 || index as usize >= count {
        return Err(Error::IndexOutOfRange {
            offset,
            index,
            count,
        });
    }
    Ok(index as usize)
}

type Soup = (Vec<Vector3<f64>>, Vec<[usize; 3]>);

fn parse_off(bytes: &[u8]) -> Result<Soup> {
    let mut recs = records(bytes);
    let (off0, head) = recs.next().ok_or_else(|| Error::parse(0, "empty file"))?;
    let mut head_tokens = head.split_whitespace();
    if head_tokens.next() != Some("OFF") {
        return Err(Error::parse(off0, "missing OFF header"));
    }
    let rest: Vec<&str> = head_tokens.collect();
    let (count_off, counts): (u64, Vec<&str>) = if rest.is_empty() {
        let (o, l) = recs.next().ok_or_else(|| Error::parse(off0, "missing counts"))?;
        (o, l.split_whitespace().collect())
    } else {
        (off0, rest)
    };
    let nv = parse_usize(counts.first().copied(), count_off, "vertex count")?;
    let nf = parse_usize(counts.get(1).copied(), count_off, "face count")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (o, l) = recs.next().ok_or_else(|| Error::parse(bytes.len() as u64, "truncated vertex list"))?;
        let mut t = l.split_whitespace();
        vertices.push(Vector3::new(parse_f64(t.next(), o)?, parse_f64(t.next(), o)?, parse_f64(t.next(), o)?));
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (o, l) = recs.next().ok_or_else(|| Error::parse(bytes.len() as u64, "truncated face list"))?;
        let mut t = l.split_whitespace();
        let arity = parse_usize(t.next(), o, "face arity")?;
        if arity != 3 {
            return Err(Error::NonTriangleFace { offset: o, arity });
        }
        let mut face = [0; 3];
        for slot in &mut face {
            let tok = t.next().ok_or_else(|| Error::parse(o, "missing face index"))?;
            let idx: i64 = tok
                .parse()
                .map_err(|_| Error::parse(o, format!("invalid face index `{tok}`")))?;
            *slot = check_index(idx, nv, o)?;
        }
        faces.push(face);
    }
    Ok((vertices, faces))
}

fn parse_obj(bytes: &[u8]) -> Result<Soup> {
    let mut vertices = Vec::new();
    let mut raw_faces: Vec<(u64, Vec<i64>)> = Vec::new();
    for (o, l) in records(bytes) {
        let mut t = l.split_whitespace();
        match t.next() {
            Some("v") => vertices.push(Vector3::new(parse_f64(t.next(), o)?, parse_f64(t.next(), o)?, parse_f64(t.next(), o)?)),
            Some("f") => {
                let mut idx = Vec::new();
                for tok in t {
                    let head = tok.split('/').next().unwrap_or("");
                    let i: i64 = head
                        .parse()
                        .map_err(|_| Error::parse(o, format!("invalid face index `{tok}`")))?;
                    // OBJ is 1-based; negative indices count back from the
                    // most recent vertex.
                    let resolved = match i {
                        0 => return Err(Error::IndexOutOfRange { offset: o, index: 0, count: vertices.len() }),
                        i if i < 0 => vertices.len() as i64 + i,
                        i => i - 1,
                    };
                    idx.push(resolved);
                }
                if idx.len() != 3 {
                    return Err(Error::NonTriangleFace { offset: o, arity: idx.len() });
                }
                raw_faces.push((o, idx));
            }
            _ => {}
        }
    }
    let n = vertices.len();
    let faces = raw_faces
        .into_iter()
        .map(|(o, idx)| {
            Ok([check_index(idx[0], n, o)?, check_index(idx[1], n, o)?, check_index(idx[2], n, o)?])
        })
        .collect::<Result<_>>()?;
    Ok((vertices, faces))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8], big_endian: bool) -> f64 {
        macro_rules! rd {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(&b[..$n]);
                if big_endian {
                    <$t>::from_be_bytes(a) as f64
                } else {
                    <$t>::from_le_bytes(a) as f64
                }
            }};
        }
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => rd!(i16, 2),
            Self::U16 => rd!(u16, 2),
            Self::I32 => rd!(i32, 4),
            Self::U32 => rd!(u32, 4),
            Self::F32 => rd!(f32, 4),
            Self::F64 => rd!(f64, 8),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(Scalar, String),
    List(Scalar, Scalar, String),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(PartialEq)]
enum Encoding {
    Ascii,
    BinaryLe,
    BinaryBe,
}

fn parse_ply(bytes: &[u8]) -> Result<Soup> {
    let header_end = bytes
        .windows(10)
        .position(|w| w == b"end_header")
        .ok_or_else(|| Error::parse(0, "missing end_header"))?;
    let body_start = bytes[header_end..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| header_end + p + 1)
        .ok_or_else(|| Error::parse(header_end as u64, "truncated header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| Error::parse(0, "non-utf8 header"))?;

    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut offset = 0u64;
    for (i, line) in header.split('\n').enumerate() {
        let o = offset;
        offset += line.len() as u64 + 1;
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.first().copied() {
            Some("ply") if i == 0 => {}
            _ if i == 0 => return Err(Error::parse(0, "missing ply magic")),
            Some("format") => {
                encoding = Some(match t.get(1).copied() {
                    Some("ascii") => Encoding::Ascii,
                    Some("binary_little_endian") => Encoding::BinaryLe,
                    Some("binary_big_endian") => Encoding::BinaryBe,
                    _ => return Err(Error::parse(o, "unknown ply format")),
                })
            }
            Some("element") => elements.push(Element {
                name: t.get(1).ok_or_else(|| Error::parse(o, "element without name"))?.to_string(),
                count: parse_usize(t.get(2).copied(), o, "element count")?,
                props: Vec::new(),
            }),
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| Error::parse(o, "property before element"))?;
                let bad = || Error::parse(o, "bad property declaration");
                if t.get(1) == Some(&"list") {
                    let c = Scalar::parse(t.get(2).ok_or_else(bad)?).ok_or_else(bad)?;
                    let it = Scalar::parse(t.get(3).ok_or_else(bad)?).ok_or_else(bad)?;
                    el.props.push(Property::List(c, it, t.get(4).ok_or_else(bad)?.to_string()));
                } else {
                    let s = Scalar::parse(t.get(1).ok_or_else(bad)?).ok_or_else(bad)?;
                    el.props.push(Property::Scalar(s, t.get(2).ok_or_else(bad)?.to_string()));
                }
            }
            _ => {}
        }
    }
    let encoding = encoding.ok_or_else(|| Error::parse(0, "missing format line"))?;

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let body = &bytes[body_start..];
    let mut cursor = 0usize;
    let mut ascii_lines = (encoding == Encoding::Ascii).then(|| records(body).collect::<Vec<_>>().into_iter());

    for el in &elements {
        for _ in 0..el.count {
            let rec_offset = (body_start + cursor) as u64;
            // Each record decoded to a flat list of (property index, values).
            let mut values: Vec<Vec<f64>> = Vec::with_capacity(el.props.len());
            let mut rec_off = rec_offset;
            if let Some(lines) = ascii_lines.as_mut() {
                let (o, l) = lines
                    .next()
                    .ok_or_else(|| Error::parse(bytes.len() as u64, format!("truncated {} list", el.name)))?;
                rec_off = body_start as u64 + o;
                let mut toks = l.split_whitespace();
                for p in &el.props {
                    match p {
                        Property::Scalar(..) => values.push(vec![parse_f64(toks.next(), rec_off)?]),
                        Property::List(..) => {
                            let n = parse_usize(toks.next(), rec_off, "list length")?;
                            let mut v = Vec::with_capacity(n);
                            for _ in 0..n {
                                v.push(parse_f64(toks.next(), rec_off)?);
                            }
                            values.push(v);
                        }
                    }
                }
            } else {
                let be = encoding == Encoding::BinaryBe;
                let mut take = |s: Scalar| -> Result<f64> {
                    let end = cursor + s.size();
                    if end > body.len() {
                        return Err(Error::parse(rec_offset, format!("truncated {} data", el.name)));
                    }
                    let v = s.read(&body[cursor..end], be);
                    cursor = end;
                    Ok(v)
                };
                for p in &el.props {
                    match p {
                        Property::Scalar(s, _) => values.push(vec![take(*s)?]),
                        Property::List(c, it, _) => {
                            let n = take(*c)? as usize;
                            let mut v = Vec::with_capacity(n);
                            for _ in 0..n {
                                v.push(take(*it)?);
                            }
                            values.push(v);
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => {
                    let mut xyz = [None; 3];
                    for (p, v) in el.props.iter().zip(&values) {
                        if let Property::Scalar(_, name) = p {
                            match name.as_str() {
                                "x" => xyz[0] = Some(v[0]),
                                "y" => xyz[1] = Some(v[0]),
                                "z" => xyz[2] = Some(v[0]),
                                _ => {}
                            }
                        }
                    }
                    match xyz {
                        [Some(x), Some(y), Some(z)] => vertices.push(Vector3::new(x, y, z)),
                        _ => return Err(Error::parse(rec_off, "vertex without x/y/z")),
                    }
                }
                "face" => {
                    let list = el
                        .props
                        .iter()
                        .zip(&values)
                        .find_map(|(p, v)| match p {
                            Property::List(_, _, n) if n == "vertex_indices" || n == "vertex_index" => Some(v),
                            _ => None,
                        })
                        .ok_or_else(|| Error::parse(rec_off, "face without vertex_indices"))?;
                    if list.len() != 3 {
                        return Err(Error::NonTriangleFace { offset: rec_off, arity: list.len() });
                    }
                    faces.push([list[0] as i64, list[1] as i64, list[2] as i64].map(|i| (i, rec_off)));
                }
                _ => {}
            }
        }
    }
    let n = vertices.len();
    let faces = faces
        .into_iter()
        .map(|f| Ok([check_index(f[0].0, n, f[0].1)?, check_index(f[1].0, n, f[1].1)?, check_index(f[2].0, n, f[2].1)?]))
        .collect::<Result<_>>()?;
    Ok((vertices, faces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;

    const QUAD_OFF: &str = "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";

    #[test]
    fn off_quad_is_rejected_with_offset() {
        match read_mesh(QUAD_OFF.as_bytes(), MeshFormat::Off) {
            Err(Error::NonTriangleFace { offset, arity }) => {
                assert_eq!(arity, 4);
                assert_eq!(&QUAD_OFF[offset as usize..offset as usize + 1], "4");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn off_out_of_range_index() {
        let src = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n";
        assert!(matches!(
            read_mesh(src.as_bytes(), MeshFormat::Off),
            Err(Error::IndexOutOfRange { index: 7, count: 3, .. })
        ));
    }

    #[test]
    fn off_garbage_is_parse_error() {
        let src = "OFF\n3 1 0\n0 0 zero\n1 0 0\n0 1 0\n3 0 1 2\n";
        assert!(matches!(read_mesh(src.as_bytes(), MeshFormat::Off), Err(Error::Parse { offset: 10, .. })));
    }

    #[test]
    fn obj_with_slashes_and_negative_indices() {
        let src = "# c\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1/1/1 2//1 -1\n";
        let m = read_mesh(src.as_bytes(), MeshFormat::Obj).unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2]]);
        let quad = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        assert!(matches!(read_mesh(quad.as_bytes(), MeshFormat::Obj), Err(Error::NonTriangleFace { arity: 4, .. })));
    }

    #[test]
    fn all_formats_round_trip_bitwise() {
        let m = shapes::humanoid(4, 3);
        for fmt in [MeshFormat::Off, MeshFormat::Obj, MeshFormat::Ply, MeshFormat::PlyBinary] {
            let mut buf = Vec::new();
            write_mesh(&m, &mut buf, fmt).unwrap();
            let back = read_mesh(&buf, fmt).unwrap();
            assert_eq!(back.vertices(), m.vertices(), "{fmt:?}");
            assert_eq!(back.faces(), m.faces(), "{fmt:?}");
        }
    }

    #[test]
    fn ply_with_extra_properties_and_float_coords() {
        let mut buf = Vec::new();
        buf.extend_from_slice(
            b"ply\nformat binary_big_endian 1.0\ncomment x\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar uint vertex_index\nproperty int flags\nend_header\n",
        );
        for p in [[0f32, 0., 0.], [1., 0., 0.], [0., 1., 0.]] {
            for c in p {
                buf.extend_from_slice(&c.to_be_bytes());
            }
            buf.push(200);
        }
        buf.push(3);
        for i in [0u32, 1, 2] {
            buf.extend_from_slice(&i.to_be_bytes());
        }
        buf.extend_from_slice(&7i32.to_be_bytes());
        let m = read_mesh(&buf, MeshFormat::Ply).unwrap();
        assert_eq!(m.vertex_count(), 3);
        assert_eq!(m.faces(), &[[0, 1, 2]]);
    }
}
