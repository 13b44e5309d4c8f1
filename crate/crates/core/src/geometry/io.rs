//! OBJ and PLY (ASCII, binary little/big endian) reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{GeometryError, Point3, TriangleMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    PlyAscii,
    PlyBinary,
}

impl MeshFormat {
    /// `.obj` → OBJ, `.ply` → binary PLY.
    pub fn from_path(path: &Path) -> Result<Self, GeometryError> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("obj") => Ok(Self::Obj),
            Some("ply") => Ok(Self::PlyBinary),
            other => Err(GeometryError::UnsupportedFormat(
                other.unwrap_or("<none>").to_string(),
            )),
        }
    }
}

fn load_err(path: &str, message: impl Into<String>) -> GeometryError {
    GeometryError::Load {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Loads an OBJ or PLY triangle mesh and removes zero-area faces.
/// Duplicate vertices are kept so indices match the file.
pub fn load_mesh(path: &Path) -> Result<TriangleMesh, GeometryError> {
    let bytes = fs::read(path).map_err(|e| load_err(&path.display().to_string(), e.to_string()))?;
    let name = path.display().to_string();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let format = match ext.as_str() {
        "obj" => MeshFormat::Obj,
        "ply" => MeshFormat::PlyBinary,
        other => return Err(GeometryError::UnsupportedFormat(other.to_string())),
    };
    load_mesh_from_bytes(&bytes, format, &name)
}

pub fn load_mesh_from_bytes(
    bytes: &[u8],
    format: MeshFormat,
    name: &str,
) -> Result<TriangleMesh, GeometryError> {
    let (vertices, faces) = match format {
        MeshFormat::Obj => parse_obj(bytes, name)?,
        MeshFormat::PlyAscii | MeshFormat::PlyBinary => parse_ply(bytes, name)?,
    };
    let mut mesh = TriangleMesh::new(vertices, faces).map_err(|e| load_err(name, e.to_string()))?;
    mesh.remove_degenerate_faces();
    Ok(mesh)
}

fn parse_obj(bytes: &[u8], name: &str) -> Result<(Vec<Point3>, Vec<[usize; 3]>), GeometryError> {
    let text = std::str::from_utf8(bytes).map_err(|e| load_err(name, format!("not UTF-8: {e}")))?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for c in &mut p {
                    let t = tok
                        .next()
                        .ok_or_else(|| load_err(name, format!("line {line_no}: vertex needs 3 coordinates")))?;
                    *c = t
                        .parse()
                        .map_err(|_| load_err(name, format!("line {line_no}: bad coordinate {t:?}")))?;
                }
                vertices.push(p);
            }
            Some("f") => {
                let face_index = faces.len();
                let mut idx = Vec::with_capacity(3);
                for t in tok {
                    let first = t.split('/').next().unwrap_or("");
                    let raw: i64 = first
                        .parse()
                        .map_err(|_| load_err(name, format!("line {line_no}: bad face index {t:?}")))?;
                    let resolved = if raw > 0 {
                        raw - 1
                    } else if raw < 0 {
                        vertices.len() as i64 + raw
                    } else {
                        -1
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(load_err(
                            name,
                            format!("line {line_no}: face {face_index} index {raw} out of range"),
                        ));
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() != 3 {
                    return Err(load_err(
                        name,
                        format!(
                            "line {line_no}: face {face_index} has {} vertices; only triangles are supported",
                            idx.len()
                        ),
                    ));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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

    fn decode(self, b: &[u8], little: bool) -> f64 {
        macro_rules! rd {
            ($t:ty, $n:expr) => {{
                let arr: [u8; $n] = b[..$n].try_into().unwrap();
                (if little { <$t>::from_le_bytes(arr) } else { <$t>::from_be_bytes(arr) }) as f64
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

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Encoding {
    Ascii,
    Binary { little: bool },
}

fn parse_ply(bytes: &[u8], name: &str) -> Result<(Vec<Point3>, Vec<[usize; 3]>), GeometryError> {
    let marker = b"end_header";
    let pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| load_err(name, "PLY header has no end_header"))?;
    let mut body = pos + marker.len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) == Some(&b'\n') {
        body += 1;
    }
    let header = std::str::from_utf8(&bytes[..pos]).map_err(|_| load_err(name, "PLY header is not ASCII"))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(load_err(name, "missing 'ply' magic"));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line_no = ln + 2;
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", fmt, _] => {
                encoding = Some(match *fmt {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::Binary { little: true },
                    "binary_big_endian" => Encoding::Binary { little: false },
                    other => return Err(load_err(name, format!("line {line_no}: unknown format {other}"))),
                })
            }
            ["element", ename, count] => elements.push(Element {
                name: ename.to_string(),
                count: count
                    .parse()
                    .map_err(|_| load_err(name, format!("line {line_no}: bad element count")))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, pname] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| load_err(name, format!("line {line_no}: property before element")))?;
                let bad = || load_err(name, format!("line {line_no}: unknown list type"));
                el.props.push(Property::List {
                    name: pname.to_string(),
                    count: Scalar::parse(ct).ok_or_else(bad)?,
                    item: Scalar::parse(it).ok_or_else(bad)?,
                });
            }
            ["property", ty, pname] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| load_err(name, format!("line {line_no}: property before element")))?;
                el.props.push(Property::Scalar {
                    name: pname.to_string(),
                    ty: Scalar::parse(ty)
                        .ok_or_else(|| load_err(name, format!("line {line_no}: unknown type {ty}")))?,
                });
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(load_err(name, format!("line {line_no}: unexpected header line {line:?}"))),
        }
    }
    let encoding = encoding.ok_or_else(|| load_err(name, "PLY header has no format line"))?;

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut reader = PlyReader::new(&bytes[body..], encoding, body, name);
    for el in &elements {
        let xyz: Vec<Option<usize>> = ["x", "y", "z"]
            .iter()
            .map(|c| {
                el.props
                    .iter()
                    .position(|p| matches!(p, Property::Scalar { name, .. } if name == c))
            })
            .collect();
        for row in 0..el.count {
            let mut scalars = Vec::with_capacity(el.props.len());
            let mut list: Option<Vec<f64>> = None;
            for p in &el.props {
                match p {
                    Property::Scalar { ty, .. } => scalars.push(reader.scalar(*ty)?),
                    Property::List { name: pname, count, item } => {
                        let n = reader.scalar(*count)?;
                        if n < 0.0 {
                            return Err(reader.error("negative list length"));
                        }
                        let items = (0..n as usize)
                            .map(|_| reader.scalar(*item))
                            .collect::<Result<Vec<_>, _>>()?;
                        scalars.push(f64::NAN);
                        if pname == "vertex_indices" || pname == "vertex_index" {
                            list = Some(items);
                        }
                    }
                }
            }
            if el.name == "vertex" {
                let mut p = [0.0; 3];
                for (k, c) in xyz.iter().enumerate() {
                    let i = c.ok_or_else(|| load_err(name, "vertex element lacks x/y/z"))?;
                    p[k] = scalars[i];
                }
                vertices.push(p);
            } else if el.name == "face" {
                let idx = list.ok_or_else(|| load_err(name, "face element lacks vertex_indices"))?;
                if idx.len() != 3 {
                    return Err(reader.error(&format!(
                        "face {row} has {} vertices; only triangles are supported",
                        idx.len()
                    )));
                }
                let mut f = [0usize; 3];
                for (k, &i) in idx.iter().enumerate() {
                    if i < 0.0 || i as usize >= elements_vertex_count(&elements) {
                        return Err(reader.error(&format!("face {row} index {i} out of range")));
                    }
                    f[k] = i as usize;
                }
                faces.push(f);
            }
        }
    }
    Ok((vertices, faces))
}

fn elements_vertex_count(elements: &[Element]) -> usize {
    elements
        .iter()
        .find(|e| e.name == "vertex")
        .map(|e| e.count)
        .unwrap_or(0)
}

struct PlyReader<'a> {
    data: &'a [u8],
    pos: usize,
    base: usize,
    encoding: Encoding,
    name: &'a str,
    tokens: Vec<&'a str>,
    token_pos: usize,
    line: usize,
    line_start: usize,
}

impl<'a> PlyReader<'a> {
    fn new(data: &'a [u8], encoding: Encoding, base: usize, name: &'a str) -> Self {
        Self {
            data,
            pos: 0,
            base,
            encoding,
            name,
            tokens: Vec::new(),
            token_pos: 0,
            line: 0,
            line_start: 0,
        }
    }

    fn error(&self, msg: &str) -> GeometryError {
        match self.encoding {
            Encoding::Ascii => load_err(self.name, format!("body line {}: {msg}", self.line)),
            Encoding::Binary { .. } => load_err(self.name, format!("byte offset {}: {msg}", self.base + self.line_start)),
        }
    }

    fn scalar(&mut self, ty: Scalar) -> Result<f64, GeometryError> {
        match self.encoding {
            Encoding::Binary { little } => {
                self.line_start = self.pos;
                let n = ty.size();
                if self.pos + n > self.data.len() {
                    return Err(self.error("unexpected end of binary data"));
                }
                let v = ty.decode(&self.data[self.pos..], little);
                self.pos += n;
                Ok(v)
            }
            Encoding::Ascii => {
                while self.token_pos >= self.tokens.len() {
                    if self.pos >= self.data.len() {
                        return Err(self.error("unexpected end of ASCII data"));
                    }
                    let end = self.data[self.pos..]
                        .iter()
                        .position(|&b| b == b'\n')
                        .map(|p| self.pos + p)
                        .unwrap_or(self.data.len());
                    let line = std::str::from_utf8(&self.data[self.pos..end])
                        .map_err(|_| self.error("non-UTF-8 data"))?;
                    self.tokens = line.split_whitespace().collect();
                    self.token_pos = 0;
                    self.pos = end + 1;
                    self.line += 1;
                }
                let t = self.tokens[self.token_pos];
                self.token_pos += 1;
                t.parse::<f64>().map_err(|_| self.error(&format!("bad number {t:?}")))
            }
        }
    }
}

/// Writes `mesh` as OBJ. Coordinates use Rust's shortest round-trip float
/// formatting, so a reload reproduces them exactly.
pub fn write_obj(mesh: &TriangleMesh, path: &Path, comments: &[String]) -> Result<(), GeometryError> {
    let mut out = String::new();
    for c in comments {
        out.push_str(&format!("# {c}\n"));
    }
    for v in mesh.vertices() {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for f in mesh.faces() {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes `mesh` as PLY with `double` coordinates. `vertex_scalars` adds
/// extra per-vertex `double` properties (for example an error channel).
pub fn write_ply(
    mesh: &TriangleMesh,
    path: &Path,
    binary: bool,
    vertex_scalars: &[(&str, &[f64])],
    comments: &[String],
) -> Result<(), GeometryError> {
    for (n, vals) in vertex_scalars {
        if vals.len() != mesh.num_vertices() {
            return Err(GeometryError::InvalidArgument(format!(
                "vertex property {n} has {} values for {} vertices",
                vals.len(),
                mesh.num_vertices()
            )));
        }
    }
    let mut header = String::from("ply\n");
    header.push_str(if binary {
        "format binary_little_endian 1.0\n"
    } else {
        "format ascii 1.0\n"
    });
    for c in comments {
        header.push_str(&format!("comment {c}\n"));
    }
    header.push_str(&format!("element vertex {}\n", mesh.num_vertices()));
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    for (n, _) in vertex_scalars {
        header.push_str(&format!("property double {n}\n"));
    }
    header.push_str(&format!("element face {}\n", mesh.num_faces()));
    header.push_str("property list uchar uint vertex_indices\nend_header\n");

    let mut out = header.into_bytes();
    if binary {
        for (i, v) in mesh.vertices().iter().enumerate() {
            for c in v {
                out.extend_from_slice(&c.to_le_bytes());
            }
            for (_, vals) in vertex_scalars {
                out.extend_from_slice(&vals[i].to_le_bytes());
            }
        }
        for f in mesh.faces() {
            out.push(3);
            for &i in f {
                out.extend_from_slice(&(i as u32).to_le_bytes());
            }
        }
    } else {
        for (i, v) in mesh.vertices().iter().enumerate() {
            write!(out, "{} {} {}", v[0], v[1], v[2])?;
            for (_, vals) in vertex_scalars {
                write!(out, " {}", vals[i])?;
            }
            out.push(b'\n');
        }
        for f in mesh.faces() {
            writeln!(out, "3 {} {} {}", f[0], f[1], f[2])?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}
