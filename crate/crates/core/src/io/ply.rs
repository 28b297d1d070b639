use std::fs;
use std::path::Path;

use crate::error::{Error, PlyErrorKind, Result};
use crate::geometry::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
    BinaryBigEndian,
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
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }

    fn decode(self, b: &[u8], big: bool) -> f64 {
        macro_rules! get {
            ($t:ty, $n:expr) => {{
                let arr: [u8; $n] = b[..$n].try_into().unwrap();
                (if big { <$t>::from_be_bytes(arr) } else { <$t>::from_le_bytes(arr) }) as f64
            }};
        }
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => get!(i16, 2),
            Scalar::U16 => get!(u16, 2),
            Scalar::I32 => get!(i32, 4),
            Scalar::U32 => get!(u32, 4),
            Scalar::F32 => get!(f32, 4),
            Scalar::F64 => get!(f64, 8),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_start: usize,
}

fn header_err(detail: impl Into<String>) -> Error {
    Error::ply(PlyErrorKind::MalformedHeader, detail)
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let Some(off) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(header_err("missing end_header"));
        };
        let line = std::str::from_utf8(&bytes[pos..pos + off])
            .map_err(|_| header_err("header is not text"))?
            .trim_end_matches('\r')
            .trim()
            .to_string();
        pos += off + 1;
        if line == "end_header" {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(String::as_str) != Some("ply") {
        return Err(header_err("missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in &lines[1..] {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    "binary_big_endian" => PlyFormat::BinaryBigEndian,
                    other => return Err(header_err(format!("unknown format `{other}`"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| header_err(format!("bad element count `{count}`")))?,
                properties: Vec::new(),
            }),
            ["property", "list", count, item, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| header_err("property before any element"))?;
                let count = Scalar::parse(count).ok_or_else(|| header_err(format!("unknown type `{count}`")))?;
                let item = Scalar::parse(item).ok_or_else(|| header_err(format!("unknown type `{item}`")))?;
                if !count.is_integer() {
                    return Err(header_err("list count must be an integer type"));
                }
                el.properties.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| header_err("property before any element"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| header_err(format!("unknown type `{ty}`")))?;
                el.properties.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            _ => return Err(header_err(format!("unrecognized line `{line}`"))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| header_err("missing format line"))?,
        elements,
        body_start: pos,
    })
}

/// Body reader over either ASCII tokens or packed binary values.
enum Body<'a> {
    Ascii(std::str::SplitAsciiWhitespace<'a>),
    Binary { bytes: &'a [u8], pos: usize, big: bool },
}

impl Body<'_> {
    fn next(&mut self, ty: Scalar) -> Result<f64> {
        match self {
            Body::Ascii(tokens) => {
                let tok = tokens
                    .next()
                    .ok_or_else(|| Error::ply(PlyErrorKind::Truncated, "body ended early"))?;
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::ply(PlyErrorKind::BadValue, format!("`{tok}` is not a number")))?;
                if ty.is_integer() && v.fract() != 0.0 {
                    return Err(Error::ply(PlyErrorKind::BadValue, format!("`{tok}` is not an integer")));
                }
                Ok(v)
            }
            Body::Binary { bytes, pos, big } => {
                let n = ty.size();
                if *pos + n > bytes.len() {
                    return Err(Error::ply(PlyErrorKind::Truncated, "body ended early"));
                }
                let v = ty.decode(&bytes[*pos..*pos + n], *big);
                *pos += n;
                Ok(v)
            }
        }
    }
}

/// Parses PLY bytes. The `vertex` element must carry `x`, `y`, `z` and
/// `red`, `green`, `blue`; any other properties or elements are skipped.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let vertex_idx = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::ply(PlyErrorKind::MissingProperty, "no vertex element"))?;
    let vertex = &header.elements[vertex_idx];
    let wanted = ["x", "y", "z", "red", "green", "blue"];
    let mut slots = [usize::MAX; 6];
    for (pi, p) in vertex.properties.iter().enumerate() {
        if let Property::Scalar { name, .. } = p {
            if let Some(w) = wanted.iter().position(|w| w == name) {
                slots[w] = pi;
            }
        }
    }
    if let Some(w) = slots.iter().position(|&s| s == usize::MAX) {
        return Err(Error::ply(
            PlyErrorKind::MissingProperty,
            format!("vertex has no `{}` property", wanted[w]),
        ));
    }

    let body_bytes = &bytes[header.body_start..];
    let mut body = match header.format {
        PlyFormat::Ascii => Body::Ascii(
            std::str::from_utf8(body_bytes)
                .map_err(|_| Error::ply(PlyErrorKind::BadValue, "ASCII body is not text"))?
                .split_ascii_whitespace(),
        ),
        PlyFormat::BinaryLittleEndian | PlyFormat::BinaryBigEndian => Body::Binary {
            bytes: body_bytes,
            pos: 0,
            big: header.format == PlyFormat::BinaryBigEndian,
        },
    };

    let mut cloud = PointCloud::default();
    for (ei, el) in header.elements.iter().enumerate() {
        if ei == vertex_idx {
            cloud.coords.reserve(el.count);
            cloud.attrs.reserve(el.count);
        }
        for _ in 0..el.count {
            let mut row = [0.0; 6];
            for (pi, p) in el.properties.iter().enumerate() {
                match p {
                    Property::Scalar { ty, .. } => {
                        let v = body.next(*ty)?;
                        if ei == vertex_idx {
                            if let Some(w) = slots.iter().position(|&s| s == pi) {
                                row[w] = v;
                            }
                        }
                    }
                    Property::List { count, item } => {
                        let c = body.next(*count)?;
                        if c < 0.0 {
                            return Err(Error::ply(PlyErrorKind::BadValue, "negative list length"));
                        }
                        for _ in 0..c as usize {
                            body.next(*item)?;
                        }
                    }
                }
            }
            if ei == vertex_idx {
                let rgb = [row[3], row[4], row[5]];
                if let Some(v) = rgb.iter().find(|v| !(0.0..=255.0).contains(*v) || v.fract() != 0.0) {
                    return Err(Error::ply(PlyErrorKind::BadValue, format!("color value {v} outside 0..=255")));
                }
                if row[..3].iter().any(|v| !v.is_finite()) {
                    return Err(Error::ply(PlyErrorKind::BadValue, "non-finite coordinate"));
                }
                cloud.coords.push([row[0], row[1], row[2]]);
                cloud.attrs.push(rgb);
            }
        }
        if ei == vertex_idx {
            // Trailing elements are irrelevant once the vertices are read.
            break;
        }
    }
    Ok(cloud)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes).map_err(|e| match e {
        Error::Ply { kind, detail } => Error::Ply {
            kind,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

/// Serializes coordinates and 8-bit colors. Coordinates are stored as
/// `float` when every value is exactly representable in single precision,
/// otherwise as `double`. Colors are rounded and clamped to `0..=255`.
pub fn render_ply(cloud: &PointCloud, binary: bool) -> Result<Vec<u8>> {
    cloud.validate()?;
    let single = cloud.coords.iter().flatten().all(|&v| (v as f32) as f64 == v);
    let ty = if single { "float" } else { "double" };
    let mut out = Vec::with_capacity(64 + cloud.len() * if binary { 15 } else { 32 });
    out.extend_from_slice(
        format!(
            "ply\nformat {} 1.0\nelement vertex {}\nproperty {ty} x\nproperty {ty} y\nproperty {ty} z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
            if binary { "binary_little_endian" } else { "ascii" },
            cloud.len()
        )
        .as_bytes(),
    );
    for (p, a) in cloud.coords.iter().zip(&cloud.attrs) {
        let rgb = a.map(|v| v.round().clamp(0.0, 255.0) as u8);
        if binary {
            for &c in p {
                if single {
                    out.extend_from_slice(&(c as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
            out.extend_from_slice(&rgb);
        } else {
            let line = if single {
                format!(
                    "{} {} {} {} {} {}\n",
                    p[0] as f32, p[1] as f32, p[2] as f32, rgb[0], rgb[1], rgb[2]
                )
            } else {
                format!("{} {} {} {} {} {}\n", p[0], p[1], p[2], rgb[0], rgb[1], rgb[2])
            };
            out.extend_from_slice(line.as_bytes());
        }
    }
    Ok(out)
}

pub fn write_ply(cloud: &PointCloud, path: impl AsRef<Path>, binary: bool) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_ply(cloud, binary)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kind(r: Result<PointCloud>) -> PlyErrorKind {
        match r {
            Err(Error::Ply { kind, .. }) => kind,
            other => panic!("expected ply error, got {other:?}"),
        }
    }

    const ONE: &str = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n\
property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n1.5 -2 3 10 20 30\n";

    #[test]
    fn one_point_ascii() {
        let c = parse_ply(ONE.as_bytes()).unwrap();
        assert_eq!(c.coords, vec![[1.5, -2.0, 3.0]]);
        assert_eq!(c.attrs, vec![[10.0, 20.0, 30.0]]);
        assert!(c.qsteps.is_none());
    }

    #[test]
    fn extra_properties_and_faces_skipped() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty int x\nproperty int y\n\
property int z\nproperty float nx\nproperty float ny\nproperty float nz\nproperty uchar red\nproperty uchar green\n\
property uchar blue\nproperty uchar alpha\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n\
1 2 3 0 0 1 5 6 7 255\n4 5 6 0 1 0 8 9 10 255\n3 0 1 1\n";
        let c = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(c.coords, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(c.attrs, vec![[5.0, 6.0, 7.0], [8.0, 9.0, 10.0]]);
    }

    #[test]
    fn error_kinds() {
        assert_eq!(kind(parse_ply(b"plx\nend_header\n")), PlyErrorKind::MalformedHeader);
        assert_eq!(kind(parse_ply(b"ply\nformat ascii 1.0\n")), PlyErrorKind::MalformedHeader);
        assert_eq!(kind(parse_ply(ONE.replace("property uchar blue\n", "").as_bytes())), PlyErrorKind::MissingProperty);
        assert_eq!(kind(parse_ply(ONE.replace("1.5 -2 3 10 20 30\n", "1.5 -2 3 10").as_bytes())), PlyErrorKind::Truncated);
        assert_eq!(kind(parse_ply(ONE.replace("10 20 30", "10 20 300").as_bytes())), PlyErrorKind::BadValue);
        assert_eq!(kind(parse_ply(ONE.replace("10 20 30", "10 x 30").as_bytes())), PlyErrorKind::BadValue);
    }

    #[test]
    fn binary_truncated() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]; 4], vec![[1.0, 2.0, 3.0]; 4], None).unwrap();
        let bytes = render_ply(&cloud, true).unwrap();
        assert_eq!(parse_ply(&bytes).unwrap(), cloud);
        assert_eq!(kind(parse_ply(&bytes[..bytes.len() - 2])), PlyErrorKind::Truncated);
    }

    #[test]
    fn big_endian_reads() {
        let mut bytes = b"ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty double x\nproperty double y\n\
property double z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
            .to_vec();
        for v in [0.1f64, 2.0, -7.25] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(&[1, 2, 3]);
        let c = parse_ply(&bytes).unwrap();
        assert_eq!(c.coords, vec![[0.1, 2.0, -7.25]]);
    }

    #[test]
    fn double_precision_kept() {
        let cloud = PointCloud::new(vec![[0.1, 1.0 / 3.0, 1e-300]], vec![[0.0, 128.0, 255.0]], None).unwrap();
        for binary in [false, true] {
            let bytes = render_ply(&cloud, binary).unwrap();
            assert!(bytes.windows(17).any(|w| w == b"property double x"));
            assert_eq!(parse_ply(&bytes).unwrap(), cloud);
        }
    }
}
