//! PLY, OBJ and XYZ point cloud readers and writers.
//!
//! PLY: `ascii 1.0` and `binary_little_endian 1.0`, vertex properties
//! `x y z` and optional `nx ny nz`. OBJ: `v` and `vn` records only. XYZ: 3 or
//! 6 whitespace separated reals per line, `#` comments.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CloudFormat {
    Ply,
    Obj,
    Xyz,
    #[default]
    Auto,
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ply" => Ok(Self::Ply),
            "obj" => Ok(Self::Obj),
            "xyz" | "txt" => Ok(Self::Xyz),
            "auto" => Ok(Self::Auto),
            other => Err(Error::InvalidParams(format!("unknown cloud format `{other}`"))),
        }
    }
}

fn name_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn format_from_extension(path: &Path) -> Option<CloudFormat> {
    let ext = path.extension()?.to_str()?;
    ext.parse().ok().filter(|f| *f != CloudFormat::Auto)
}

pub fn load_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = match format {
        CloudFormat::Auto => sniff(path, &bytes),
        f => f,
    };
    let name = name_of(path);
    match format {
        CloudFormat::Ply => parse_ply(&bytes, &name),
        CloudFormat::Obj => parse_obj(&text(&bytes)?, &name),
        CloudFormat::Xyz | CloudFormat::Auto => parse_xyz(&text(&bytes)?, &name),
    }
}

fn sniff(path: &Path, bytes: &[u8]) -> CloudFormat {
    if bytes.starts_with(b"ply") {
        return CloudFormat::Ply;
    }
    if let Some(f) = format_from_extension(path) {
        return f;
    }
    let head = String::from_utf8_lossy(&bytes[..bytes.len().min(4096)]);
    let obj_like = head.lines().any(|l| {
        let t = l.trim_start();
        t.starts_with("v ") || t.starts_with("vn ")
    });
    if obj_like {
        CloudFormat::Obj
    } else {
        CloudFormat::Xyz
    }
}

fn text(bytes: &[u8]) -> Result<String> {
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("file is not valid UTF-8".into()))
}

fn parse_real(tok: &str, what: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::Format(format!("{what}: `{tok}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Format(format!("{what}: non-finite value `{tok}`")));
    }
    Ok(v)
}

/// Normalizes file normals; drops them all (with a warning) if any is
/// degenerate.
fn assemble(points: Vec<Point3>, normals: Option<Vec<Point3>>, name: &str) -> Result<PointCloud> {
    if points.is_empty() {
        return Err(Error::EmptyCloud(name.to_string()));
    }
    let mut cloud = PointCloud::new(points, name)?;
    if let Some(normals) = normals {
        let unit: Option<Vec<Point3>> = normals
            .iter()
            .map(|n| {
                let len = n.norm();
                (len > 1e-12 && len.is_finite()).then(|| n / len)
            })
            .collect();
        match unit {
            Some(unit) => cloud.set_normals(unit)?,
            None => warn!("{name}: zero-length normals in file, normals dropped"),
        }
    }
    Ok(cloud)
}

// ---------------------------------------------------------------- XYZ

fn parse_xyz(src: &str, name: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut columns = None;
    for (lineno, line) in src.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let what = format!("{name}:{}", lineno + 1);
        let vals = line
            .split_whitespace()
            .map(|t| parse_real(t, &what))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 3 && vals.len() != 6 {
            return Err(Error::Format(format!(
                "{what}: expected 3 or 6 columns, found {}",
                vals.len()
            )));
        }
        if *columns.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::Format(format!("{what}: inconsistent column count")));
        }
        points.push(Point3::new(vals[0], vals[1], vals[2]));
        if vals.len() == 6 {
            normals.push(Point3::new(vals[3], vals[4], vals[5]));
        }
    }
    let normals = (columns == Some(6)).then_some(normals);
    assemble(points, normals, name)
}

// ---------------------------------------------------------------- OBJ

fn parse_obj(src: &str, name: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for (lineno, line) in src.lines().enumerate() {
        let mut toks = line.split_whitespace();
        let target = match toks.next() {
            Some("v") => &mut points,
            Some("vn") => &mut normals,
            _ => continue,
        };
        let what = format!("{name}:{}", lineno + 1);
        let vals = toks
            .take(3)
            .map(|t| parse_real(t, &what))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 3 {
            return Err(Error::Format(format!("{what}: vertex record needs 3 coordinates")));
        }
        target.push(Point3::new(vals[0], vals[1], vals[2]));
    }
    let normals = if normals.is_empty() {
        None
    } else if normals.len() == points.len() {
        Some(normals)
    } else {
        warn!(
            "{name}: {} `vn` records for {} vertices, normals ignored",
            normals.len(),
            points.len()
        );
        None
    };
    assemble(points, normals, name)
}

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyEncoding {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum PlyProperty {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
}

struct PlyHeader {
    encoding: PlyEncoding,
    elements: Vec<PlyElement>,
    body_offset: usize,
}

fn parse_ply_header(bytes: &[u8]) -> Result<PlyHeader> {
    let mut offset = 0;
    let mut next_line = || -> Result<String> {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("truncated PLY header".into()))?;
        offset += end + 1;
        Ok(String::from_utf8_lossy(&rest[..end]).trim().to_string())
    };
    if next_line()? != "ply" {
        return Err(Error::Format("missing `ply` magic".into()));
    }
    let mut encoding = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let line = next_line()?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _version] => {
                encoding = Some(match *fmt {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLe,
                    "binary_big_endian" => {
                        return Err(Error::Format("binary_big_endian PLY is not supported".into()))
                    }
                    other => return Err(Error::Format(format!("unknown PLY format `{other}`"))),
                })
            }
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::Format(format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Format("property before element".into()))?;
                let bad = || Error::Format(format!("bad list property `{line}`"));
                el.props.push(PlyProperty::List {
                    count: Scalar::parse(count).ok_or_else(bad)?,
                    item: Scalar::parse(item).ok_or_else(bad)?,
                });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Format("property before element".into()))?;
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| Error::Format(format!("unknown property type `{ty}`")))?;
                el.props.push(PlyProperty::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            _ => return Err(Error::Format(format!("unrecognized PLY header line `{line}`"))),
        }
    }
    Ok(PlyHeader {
        encoding: encoding.ok_or_else(|| Error::Format("PLY header without format line".into()))?,
        elements,
        body_offset: offset,
    })
}

/// Positions of x,y,z and (optionally) nx,ny,nz among the vertex properties.
struct VertexLayout {
    xyz: [usize; 3],
    normal: Option<[usize; 3]>,
}

fn vertex_layout(el: &PlyElement) -> Result<VertexLayout> {
    let find = |want: &str| {
        el.props.iter().position(|p| matches!(p, PlyProperty::Scalar { name, .. } if name == want))
    };
    let xyz = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(Error::Format("vertex element lacks x/y/z".into())),
    };
    let normal = match (find("nx"), find("ny"), find("nz")) {
        (Some(x), Some(y), Some(z)) => Some([x, y, z]),
        _ => None,
    };
    Ok(VertexLayout { xyz, normal })
}

fn parse_ply(bytes: &[u8], name: &str) -> Result<PointCloud> {
    let header = parse_ply_header(bytes)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Format("PLY without vertex element".into()))?;
    let vertex = &header.elements[vertex_pos];
    if vertex.count == 0 {
        return Err(Error::EmptyCloud(name.to_string()));
    }
    let layout = vertex_layout(vertex)?;
    let body = &bytes[header.body_offset..];
    let rows = match header.encoding {
        PlyEncoding::Ascii => ply_ascii_rows(body, &header.elements, vertex_pos)?,
        PlyEncoding::BinaryLe => ply_binary_rows(body, &header.elements, vertex_pos)?,
    };
    let mut points = Vec::with_capacity(rows.len());
    let mut normals = layout.normal.map(|_| Vec::with_capacity(rows.len()));
    for (i, row) in rows.iter().enumerate() {
        let [x, y, z] = layout.xyz;
        let p = Point3::new(row[x], row[y], row[z]);
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::Format(format!("{name}: non-finite coordinate at vertex {i}")));
        }
        points.push(p);
        if let (Some([a, b, c]), Some(ns)) = (layout.normal, normals.as_mut()) {
            ns.push(Point3::new(row[a], row[b], row[c]));
        }
    }
    assemble(points, normals, name)
}

fn ply_ascii_rows(body: &[u8], elements: &[PlyElement], vertex_pos: usize) -> Result<Vec<Vec<f64>>> {
    let src = std::str::from_utf8(body).map_err(|_| Error::Format("PLY body is not text".into()))?;
    let mut lines = src.lines().filter(|l| !l.trim().is_empty());
    for el in &elements[..vertex_pos] {
        for _ in 0..el.count {
            lines
                .next()
                .ok_or_else(|| Error::Format(format!("truncated `{}` element", el.name)))?;
        }
    }
    let vertex = &elements[vertex_pos];
    let mut rows = Vec::with_capacity(vertex.count);
    for i in 0..vertex.count {
        let line = lines
            .next()
            .ok_or_else(|| Error::Format(format!("expected {} vertices, got {i}", vertex.count)))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < vertex.props.len() {
            return Err(Error::Format(format!("vertex {i}: too few values")));
        }
        let row = toks[..vertex.props.len()]
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Format(format!("vertex {i}: `{t}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn ply_binary_rows(body: &[u8], elements: &[PlyElement], vertex_pos: usize) -> Result<Vec<Vec<f64>>> {
    let truncated = || Error::Format("truncated binary PLY body".into());
    let mut cursor = 0usize;
    for el in &elements[..vertex_pos] {
        for _ in 0..el.count {
            for prop in &el.props {
                match *prop {
                    PlyProperty::Scalar { ty, .. } => cursor += ty.size(),
                    PlyProperty::List { count, item } => {
                        let raw = body.get(cursor..cursor + count.size()).ok_or_else(truncated)?;
                        let n = count.read_le(raw);
                        if n < 0.0 {
                            return Err(Error::Format("negative list length".into()));
                        }
                        cursor += count.size() + n as usize * item.size();
                    }
                }
            }
        }
    }
    let vertex = &elements[vertex_pos];
    let mut rows = Vec::with_capacity(vertex.count);
    for _ in 0..vertex.count {
        let mut row = Vec::with_capacity(vertex.props.len());
        for prop in &vertex.props {
            match *prop {
                PlyProperty::Scalar { ty, .. } => {
                    let raw = body.get(cursor..cursor + ty.size()).ok_or_else(truncated)?;
                    row.push(ty.read_le(raw));
                    cursor += ty.size();
                }
                PlyProperty::List { .. } => {
                    return Err(Error::Format("list property on vertex element".into()))
                }
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

// ---------------------------------------------------------------- writers

pub fn save_cloud(cloud: &PointCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    let format = match format {
        CloudFormat::Auto => format_from_extension(path).unwrap_or(CloudFormat::Ply),
        f => f,
    };
    let body = match format {
        CloudFormat::Ply | CloudFormat::Auto => ply_ascii(cloud, None),
        CloudFormat::Obj => obj_text(cloud),
        CloudFormat::Xyz => xyz_text(cloud),
    };
    write_file(path, body.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes an ASCII PLY with one RGB colour per point.
pub fn save_colored_ply(cloud: &PointCloud, colors: &[[u8; 3]], path: impl AsRef<Path>) -> Result<()> {
    if colors.len() != cloud.len() {
        return Err(Error::SizeMismatch {
            left: cloud.len(),
            right: colors.len(),
        });
    }
    write_file(path.as_ref(), ply_ascii(cloud, Some(colors)).as_bytes())
}

fn ply_ascii(cloud: &PointCloud, colors: Option<&[[u8; 3]]>) -> String {
    let mut s = String::with_capacity(cloud.len() * 64 + 256);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "comment {}", cloud.name());
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals().is_some() {
        s.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    if colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(s, "{} {} {}", p.x, p.y, p.z);
        if let Some(n) = cloud.normals().map(|ns| ns[i]) {
            let _ = write!(s, " {} {} {}", n.x, n.y, n.z);
        }
        if let Some([r, g, b]) = colors.map(|c| c[i]) {
            let _ = write!(s, " {r} {g} {b}");
        }
        s.push('\n');
    }
    s
}

fn obj_text(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 64);
    for p in cloud.points() {
        let _ = writeln!(s, "v {} {} {}", p.x, p.y, p.z);
    }
    for n in cloud.normals().unwrap_or(&[]) {
        let _ = writeln!(s, "vn {} {} {}", n.x, n.y, n.z);
    }
    s
}

fn xyz_text(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 64);
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(s, "{} {} {}", p.x, p.y, p.z);
        if let Some(n) = cloud.normals().map(|ns| ns[i]) {
            let _ = write!(s, " {} {} {}", n.x, n.y, n.z);
        }
        s.push('\n');
    }
    s
}
