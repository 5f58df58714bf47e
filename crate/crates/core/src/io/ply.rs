//! PLY reader/writer for point clouds (ASCII and binary little-endian).
//!
//! Only the `vertex` element is interpreted: `x`, `y`, `z` (any numeric type),
//! optional `red`/`green`/`blue` and an optional integer `label`. Every other
//! property and element is skipped.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, ScalarType::F32 | ScalarType::F64)
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => bytes[0] as i8 as f64,
            ScalarType::U8 => bytes[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: ScalarType },
    List { count_ty: ScalarType, item_ty: ScalarType },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug)]
struct Header {
    format: Format,
    elements: Vec<Element>,
    /// Byte offset of the body.
    body_offset: usize,
    /// Number of header lines (the body starts on the next line).
    line_count: usize,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut offset = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();

    loop {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(line_no + 1, "unexpected end of file in header"))?;
        line_no += 1;
        let raw = std::str::from_utf8(&rest[..end])
            .map_err(|_| parse_err(line_no, "header is not valid UTF-8"))?;
        offset += end + 1;
        let line = raw.trim_end_matches('\r').trim();
        let mut tokens = line.split_whitespace();
        let keyword = tokens.next().unwrap_or("");

        if line_no == 1 {
            if line != "ply" {
                return Err(parse_err(1, "missing `ply` magic"));
            }
            continue;
        }

        match keyword {
            "" | "comment" | "obj_info" => {}
            "format" => {
                let f = match tokens.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLittleEndian,
                    Some(other) => {
                        return Err(parse_err(line_no, format!("unsupported format `{other}`")))
                    }
                    None => return Err(parse_err(line_no, "missing format name")),
                };
                if tokens.next() != Some("1.0") {
                    return Err(parse_err(line_no, "unsupported format version"));
                }
                format = Some(f);
            }
            "element" => {
                let name = tokens
                    .next()
                    .ok_or_else(|| parse_err(line_no, "element without name"))?;
                let count = tokens
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| parse_err(line_no, "element count is not a count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            "property" => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(line_no, "property before any element"))?;
                let ty_name = tokens
                    .next()
                    .ok_or_else(|| parse_err(line_no, "property without type"))?;
                let property = if ty_name == "list" {
                    let count_ty = tokens.next().and_then(ScalarType::parse);
                    let item_ty = tokens.next().and_then(ScalarType::parse);
                    match (count_ty, item_ty, tokens.next()) {
                        (Some(count_ty), Some(item_ty), Some(_)) if count_ty.is_integer() => {
                            Property::List { count_ty, item_ty }
                        }
                        _ => return Err(parse_err(line_no, "malformed list property")),
                    }
                } else {
                    let ty = ScalarType::parse(ty_name).ok_or_else(|| {
                        parse_err(line_no, format!("unknown property type `{ty_name}`"))
                    })?;
                    let name = tokens
                        .next()
                        .ok_or_else(|| parse_err(line_no, "property without name"))?;
                    Property::Scalar {
                        name: name.to_string(),
                        ty,
                    }
                };
                element.properties.push(property);
            }
            "end_header" => break,
            other => return Err(parse_err(line_no, format!("unexpected keyword `{other}`"))),
        }
    }

    let format = format.ok_or_else(|| parse_err(line_no, "header has no format line"))?;
    Ok(Header {
        format,
        elements,
        body_offset: offset,
        line_count: line_no,
    })
}

/// Where each vertex property lands in the cloud.
#[derive(Debug, Clone, Copy)]
enum Slot {
    Coord(usize),
    Color(usize),
    Label,
    Ignore,
}

struct VertexLayout {
    slots: Vec<Slot>,
    has_colors: bool,
    has_labels: bool,
}

fn vertex_layout(element: &Element, header_line: usize) -> Result<VertexLayout> {
    let mut seen_coord = [false; 3];
    let mut seen_color = [false; 3];
    let mut has_labels = false;
    let mut slots = Vec::with_capacity(element.properties.len());
    for property in &element.properties {
        let slot = match property {
            Property::Scalar { name, ty } => match name.as_str() {
                "x" | "y" | "z" => {
                    let axis = (name.as_bytes()[0] - b'x') as usize;
                    seen_coord[axis] = true;
                    Slot::Coord(axis)
                }
                "red" | "green" | "blue" if ty.is_integer() => {
                    let channel = match name.as_str() {
                        "red" => 0,
                        "green" => 1,
                        _ => 2,
                    };
                    seen_color[channel] = true;
                    Slot::Color(channel)
                }
                "label" if ty.is_integer() => {
                    has_labels = true;
                    Slot::Label
                }
                _ => Slot::Ignore,
            },
            Property::List { .. } => Slot::Ignore,
        };
        slots.push(slot);
    }
    if seen_coord.iter().any(|s| !s) {
        return Err(parse_err(header_line, "vertex element lacks x/y/z properties"));
    }
    Ok(VertexLayout {
        slots,
        has_colors: seen_color.iter().all(|&s| s),
        has_labels,
    })
}

struct CloudBuilder {
    cloud: PointCloud,
    has_colors: bool,
    has_labels: bool,
}

impl CloudBuilder {
    fn new(layout: &VertexLayout, count: usize) -> Self {
        let mut cloud = PointCloud::new();
        cloud.points.reserve(count);
        if layout.has_colors {
            cloud.colors = Some(Vec::with_capacity(count));
        }
        if layout.has_labels {
            cloud.labels = Some(Vec::with_capacity(count));
        }
        Self {
            cloud,
            has_colors: layout.has_colors,
            has_labels: layout.has_labels,
        }
    }

    fn push(&mut self, index: usize, coord: [f64; 3], color: [f64; 3], label: f64) -> Result<()> {
        if !coord.iter().all(|c| c.is_finite()) {
            return Err(Error::Data {
                index,
                message: "non-finite coordinate".into(),
            });
        }
        self.cloud
            .points
            .push(Vector3::new(coord[0], coord[1], coord[2]));
        if self.has_colors {
            let mut rgb = [0u8; 3];
            for (dst, &src) in rgb.iter_mut().zip(&color) {
                if !(0.0..=255.0).contains(&src) {
                    return Err(Error::Data {
                        index,
                        message: format!("color channel {src} outside 0..=255"),
                    });
                }
                *dst = src as u8;
            }
            self.cloud.colors.as_mut().unwrap().push(rgb);
        }
        if self.has_labels {
            if !(0.0..=u32::MAX as f64).contains(&label) {
                return Err(Error::Data {
                    index,
                    message: format!("label {label} is negative or too large"),
                });
            }
            self.cloud.labels.as_mut().unwrap().push(label as u32);
        }
        Ok(())
    }
}

/// Reads a PLY file.
pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes)
}

/// Parses PLY bytes already in memory.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(header.line_count, "no vertex element"))?;
    let layout = vertex_layout(&header.elements[vertex_pos], header.line_count)?;
    let body = &bytes[header.body_offset..];
    match header.format {
        Format::Ascii => read_ascii_body(body, &header, vertex_pos, &layout),
        Format::BinaryLittleEndian => read_binary_body(body, &header, vertex_pos, &layout),
    }
}

fn read_ascii_body(
    body: &[u8],
    header: &Header,
    vertex_pos: usize,
    layout: &VertexLayout,
) -> Result<PointCloud> {
    let text = std::str::from_utf8(body)
        .map_err(|_| parse_err(header.line_count + 1, "ASCII body is not valid UTF-8"))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (header.line_count + 1 + i, l))
        .filter(|(_, l)| !l.trim().is_empty());

    // Elements before the vertex block: one line per instance.
    for element in &header.elements[..vertex_pos] {
        for _ in 0..element.count {
            lines
                .next()
                .ok_or_else(|| parse_err(header.line_count, "unexpected end of body"))?;
        }
    }

    let element = &header.elements[vertex_pos];
    let mut builder = CloudBuilder::new(layout, element.count);
    for index in 0..element.count {
        let (line_no, line) = lines.next().ok_or_else(|| {
            parse_err(
                header.line_count + index + 1,
                format!("expected {} vertices, found {index}", element.count),
            )
        })?;
        let mut tokens = line.split_whitespace();
        let mut next_value = |what: &str| -> Result<f64> {
            let token = tokens
                .next()
                .ok_or_else(|| parse_err(line_no, format!("missing {what}")))?;
            token
                .parse::<f64>()
                .map_err(|_| parse_err(line_no, format!("invalid number `{token}`")))
        };
        let (mut coord, mut color, mut label) = ([0.0; 3], [0.0; 3], 0.0);
        for (property, slot) in element.properties.iter().zip(&layout.slots) {
            match property {
                Property::Scalar { name, .. } => {
                    let value = next_value(name)?;
                    match *slot {
                        Slot::Coord(a) => coord[a] = value,
                        Slot::Color(c) => color[c] = value,
                        Slot::Label => label = value,
                        Slot::Ignore => {}
                    }
                }
                Property::List { .. } => {
                    let n = next_value("list count")?;
                    for _ in 0..n as usize {
                        next_value("list item")?;
                    }
                }
            }
        }
        if tokens.next().is_some() {
            return Err(parse_err(line_no, "too many values on vertex line"));
        }
        builder.push(index, coord, color, label)?;
    }
    Ok(builder.cloud)
}

fn read_binary_body(
    body: &[u8],
    header: &Header,
    vertex_pos: usize,
    layout: &VertexLayout,
) -> Result<PointCloud> {
    let truncated = || parse_err(header.line_count, "binary body is truncated");
    let mut cursor = 0usize;

    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        let slice = body.get(*cursor..*cursor + n).ok_or_else(truncated)?;
        *cursor += n;
        Ok(slice)
    };

    for element in &header.elements[..vertex_pos] {
        for _ in 0..element.count {
            for property in &element.properties {
                match property {
                    Property::Scalar { ty, .. } => {
                        take(&mut cursor, ty.size())?;
                    }
                    Property::List { count_ty, item_ty } => {
                        let n = count_ty.read_le(take(&mut cursor, count_ty.size())?);
                        take(&mut cursor, n as usize * item_ty.size())?;
                    }
                }
            }
        }
    }

    let element = &header.elements[vertex_pos];
    let mut builder = CloudBuilder::new(layout, element.count);
    for index in 0..element.count {
        let (mut coord, mut color, mut label) = ([0.0; 3], [0.0; 3], 0.0);
        for (property, slot) in element.properties.iter().zip(&layout.slots) {
            match property {
                Property::Scalar { ty, .. } => {
                    let value = ty.read_le(take(&mut cursor, ty.size())?);
                    match *slot {
                        Slot::Coord(a) => coord[a] = value,
                        Slot::Color(c) => color[c] = value,
                        Slot::Label => label = value,
                        Slot::Ignore => {}
                    }
                }
                Property::List { count_ty, item_ty } => {
                    let n = count_ty.read_le(take(&mut cursor, count_ty.size())?);
                    take(&mut cursor, n as usize * item_ty.size())?;
                }
            }
        }
        builder.push(index, coord, color, label)?;
    }
    Ok(builder.cloud)
}

/// Writes `cloud` as PLY. Positions are stored as `double`, so binary output
/// round-trips bit-exactly; ASCII output uses shortest round-trip formatting.
pub fn write_ply(cloud: &PointCloud, path: impl AsRef<Path>, binary: bool) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ply(cloud, binary)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serializes `cloud` to PLY bytes.
pub fn encode_ply(cloud: &PointCloud, binary: bool) -> Result<Vec<u8>> {
    cloud.validate()?;
    if let Some(labels) = &cloud.labels {
        if let Some(index) = labels.iter().position(|&l| l > i32::MAX as u32) {
            return Err(Error::Data {
                index,
                message: "label does not fit a PLY int".into(),
            });
        }
    }
    let mut out = BufWriter::new(Vec::with_capacity(64 + cloud.len() * 32));
    let io = |e: std::io::Error| Error::io("<ply buffer>", e);

    writeln!(out, "ply").map_err(io)?;
    writeln!(
        out,
        "format {} 1.0",
        if binary { "binary_little_endian" } else { "ascii" }
    )
    .map_err(io)?;
    writeln!(out, "element vertex {}", cloud.len()).map_err(io)?;
    for axis in ["x", "y", "z"] {
        writeln!(out, "property double {axis}").map_err(io)?;
    }
    if cloud.colors.is_some() {
        for channel in ["red", "green", "blue"] {
            writeln!(out, "property uchar {channel}").map_err(io)?;
        }
    }
    if cloud.labels.is_some() {
        writeln!(out, "property int label").map_err(io)?;
    }
    writeln!(out, "end_header").map_err(io)?;

    for (i, p) in cloud.points.iter().enumerate() {
        let color = cloud.colors.as_ref().map(|c| c[i]);
        let label = cloud.labels.as_ref().map(|l| l[i] as i32);
        if binary {
            for v in [p.x, p.y, p.z] {
                out.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            if let Some(rgb) = color {
                out.write_all(&rgb).map_err(io)?;
            }
            if let Some(l) = label {
                out.write_all(&l.to_le_bytes()).map_err(io)?;
            }
        } else {
            write!(out, "{} {} {}", p.x, p.y, p.z).map_err(io)?;
            if let Some([r, g, b]) = color {
                write!(out, " {r} {g} {b}").map_err(io)?;
            }
            if let Some(l) = label {
                write!(out, " {l}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
    }
    out.into_inner().map_err(|e| io(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_ascii_file() {
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\n\
                    property float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0.5\n";
        let cloud = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(cloud.len(), 3);
        assert!(cloud.colors.is_none());
        assert!(cloud.labels.is_none());
        assert_eq!(cloud.points[2], Vector3::new(0.0, 1.0, 0.5));
    }

    #[test]
    fn colors_preserved_and_unknown_properties_ignored() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\n\
                    property float x\nproperty float y\nproperty float z\n\
                    property float intensity\nproperty uchar red\nproperty uchar green\n\
                    property uchar blue\nend_header\n\
                    1 2 3 0.5 255 0 7\n4 5 6 0.1 1 2 3\n";
        let cloud = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(cloud.colors, Some(vec![[255, 0, 7], [1, 2, 3]]));
    }

    #[test]
    fn malformed_header_reports_line() {
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty floot x\nend_header\n";
        match parse_ply(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_coordinate_reports_vertex() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n\
                    property float y\nproperty float z\nend_header\n0 0 0\n1 nan 0\n";
        match parse_ply(text.as_bytes()) {
            Err(Error::Data { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn skips_leading_elements_and_lists() {
        // A face element before the vertices, in binary.
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement face 1\n\
            property list uchar int vertex_indices\nelement vertex 1\n\
            property float x\nproperty float y\nproperty float z\nend_header\n"
            .to_vec();
        bytes.push(3);
        for i in 0..3i32 {
            bytes.extend_from_slice(&i.to_le_bytes());
        }
        for v in [1.5f32, -2.0, 0.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let cloud = parse_ply(&bytes).unwrap();
        assert_eq!(cloud.points, vec![Vector3::new(1.5, -2.0, 0.25)]);
    }

    #[test]
    fn truncated_binary_is_an_error() {
        let mut cloud = PointCloud::from_points(vec![Vector3::new(1.0, 2.0, 3.0); 4]);
        cloud.labels = Some(vec![1, 2, 3, 4]);
        let mut bytes = encode_ply(&cloud, true).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(parse_ply(&bytes), Err(Error::Parse { .. })));
    }

    #[test]
    fn empty_cloud_writes_valid_file() {
        let bytes = encode_ply(&PointCloud::new(), false).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("element vertex 0"));
        assert!(parse_ply(&bytes).unwrap().is_empty());
    }

    #[test]
    fn labels_written_as_int_property() {
        let mut cloud = PointCloud::from_points(vec![Vector3::zeros(), Vector3::x()]);
        cloud.labels = Some(vec![0, 7]);
        let bytes = encode_ply(&cloud, false).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("property int label"));
        assert_eq!(parse_ply(&bytes).unwrap().labels, Some(vec![0, 7]));
    }
}
