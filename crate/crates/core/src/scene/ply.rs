//! PLY reader/writer for the vertex subset used by this library.
//!
//! Supported files carry a single `vertex` element with `float x, y, z`,
//! optionally `uchar red, green, blue`, and optionally `float nx, ny, nz`,
//! in ASCII or little-endian binary encoding. Colors are rescaled from the
//! byte range to `[0, 1]` on load. Normals are kept verbatim when they are
//! already unit length within the cloud tolerance (so binary round trips are
//! lossless) and renormalized otherwise; zero-length normals are rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{PointCloud, PointRecord, SignalMask, NORMAL_UNIT_TOLERANCE};

/// On-disk encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PropName {
    X,
    Y,
    Z,
    Red,
    Green,
    Blue,
    Nx,
    Ny,
    Nz,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PropType {
    Float,
    Uchar,
}

impl PropType {
    fn size(self) -> usize {
        match self {
            PropType::Float => 4,
            PropType::Uchar => 1,
        }
    }
}

struct Header {
    format: PlyFormat,
    vertex_count: usize,
    properties: Vec<(PropName, PropType)>,
    /// Byte offset of the first data byte.
    data_offset: usize,
    /// 1-based line number of the first data line (ASCII payloads).
    data_line: usize,
    end_header_line: usize,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn classify_property(line: usize, ty: &str, name: &str) -> Result<(PropName, PropType)> {
    let prop_type = match ty {
        "float" | "float32" => PropType::Float,
        "uchar" | "uint8" => PropType::Uchar,
        other => return Err(parse_err(line, format!("unsupported property type '{other}'"))),
    };
    let prop_name = match name {
        "x" => PropName::X,
        "y" => PropName::Y,
        "z" => PropName::Z,
        "red" => PropName::Red,
        "green" => PropName::Green,
        "blue" => PropName::Blue,
        "nx" => PropName::Nx,
        "ny" => PropName::Ny,
        "nz" => PropName::Nz,
        other => return Err(parse_err(line, format!("unsupported property '{other}'"))),
    };
    let expected = match prop_name {
        PropName::Red | PropName::Green | PropName::Blue => PropType::Uchar,
        _ => PropType::Float,
    };
    if prop_type != expected {
        return Err(parse_err(
            line,
            format!("property '{name}' must have type {expected:?}"),
        ));
    }
    Ok((prop_name, prop_type))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut offset = 0usize;
    let mut line_no = 0usize;
    let mut format = None;
    let mut vertex_count = None;
    let mut in_vertex_element = false;
    let mut properties = Vec::new();

    loop {
        if offset >= bytes.len() {
            return Err(parse_err(line_no + 1, "unexpected end of header"));
        }
        let rest = &bytes[offset..];
        let line_end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(line_no + 1, "unexpected end of header"))?;
        let raw = &rest[..line_end];
        offset += line_end + 1;
        line_no += 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| parse_err(line_no, "header line is not valid UTF-8"))?
            .trim_end_matches('\r')
            .trim();

        if line_no == 1 {
            if line != "ply" {
                return Err(parse_err(1, "missing 'ply' magic line"));
            }
            continue;
        }
        if line == "end_header" {
            let format = format.ok_or_else(|| parse_err(line_no, "missing format declaration"))?;
            let vertex_count =
                vertex_count.ok_or_else(|| parse_err(line_no, "missing vertex element"))?;
            validate_properties(line_no, &properties)?;
            return Ok(Header {
                format,
                vertex_count,
                properties,
                data_offset: offset,
                data_line: line_no + 1,
                end_header_line: line_no,
            });
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                let kind = tokens.next().unwrap_or("");
                format = Some(match kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(parse_err(line_no, format!("unsupported format '{other}'")))
                    }
                });
            }
            Some("element") => {
                let name = tokens.next().unwrap_or("");
                if name != "vertex" {
                    return Err(parse_err(line_no, format!("unsupported element '{name}'")));
                }
                let count = tokens
                    .next()
                    .and_then(|t| t.parse::<usize>().ok())
                    .ok_or_else(|| parse_err(line_no, "invalid vertex count"))?;
                vertex_count = Some(count);
                in_vertex_element = true;
            }
            Some("property") => {
                if !in_vertex_element {
                    return Err(parse_err(line_no, "property outside vertex element"));
                }
                let ty = tokens.next().unwrap_or("");
                let name = tokens.next().unwrap_or("");
                let prop = classify_property(line_no, ty, name)?;
                if properties.iter().any(|(n, _)| *n == prop.0) {
                    return Err(parse_err(line_no, format!("duplicate property '{name}'")));
                }
                properties.push(prop);
            }
            Some(other) => {
                return Err(parse_err(line_no, format!("unknown header keyword '{other}'")))
            }
        }
    }
}

fn validate_properties(line: usize, props: &[(PropName, PropType)]) -> Result<()> {
    let has = |n: PropName| props.iter().any(|(p, _)| *p == n);
    if !(has(PropName::X) && has(PropName::Y) && has(PropName::Z)) {
        return Err(parse_err(line, "vertex element must declare x, y, z"));
    }
    let colors = [PropName::Red, PropName::Green, PropName::Blue];
    let n_colors = colors.iter().filter(|&&c| has(c)).count();
    if n_colors != 0 && n_colors != 3 {
        return Err(parse_err(line, "red, green, blue must appear together"));
    }
    let normals = [PropName::Nx, PropName::Ny, PropName::Nz];
    let n_normals = normals.iter().filter(|&&c| has(c)).count();
    if n_normals != 0 && n_normals != 3 {
        return Err(parse_err(line, "nx, ny, nz must appear together"));
    }
    Ok(())
}

fn header_mask(props: &[(PropName, PropType)]) -> SignalMask {
    let has = |n: PropName| props.iter().any(|(p, _)| *p == n);
    SignalMask::new(has(PropName::Red), has(PropName::Nx))
}

fn assemble_record(
    index: usize,
    props: &[(PropName, PropType)],
    values: &[f64],
    mask: SignalMask,
) -> Result<PointRecord> {
    let mut position = [0.0f64; 3];
    let mut color = [0.0f64; 3];
    let mut normal = [0.0f64; 3];
    for ((name, _), &v) in props.iter().zip(values.iter()) {
        match name {
            PropName::X => position[0] = v,
            PropName::Y => position[1] = v,
            PropName::Z => position[2] = v,
            PropName::Red => color[0] = v / 255.0,
            PropName::Green => color[1] = v / 255.0,
            PropName::Blue => color[2] = v / 255.0,
            PropName::Nx => normal[0] = v,
            PropName::Ny => normal[1] = v,
            PropName::Nz => normal[2] = v,
        }
    }
    if !position.iter().all(|v| v.is_finite()) {
        return Err(Error::Data(format!("vertex {index}: non-finite coordinate")));
    }
    let normal = if mask.normal {
        if !normal.iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!("vertex {index}: non-finite normal")));
        }
        let len = (normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2]).sqrt();
        if len == 0.0 {
            return Err(Error::Data(format!("vertex {index}: zero-length normal")));
        }
        if (len - 1.0).abs() > NORMAL_UNIT_TOLERANCE {
            Some([normal[0] / len, normal[1] / len, normal[2] / len])
        } else {
            Some(normal)
        }
    } else {
        None
    };
    Ok(PointRecord {
        position,
        color: if mask.color { Some(color) } else { None },
        normal,
    })
}

/// Parses a PLY byte buffer; the encoding is taken from the header.
pub fn load_from_bytes(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let mask = header_mask(&header.properties);
    let mut points = Vec::with_capacity(header.vertex_count);
    match header.format {
        PlyFormat::Ascii => {
            let data = &bytes[header.data_offset..];
            let text = std::str::from_utf8(data).map_err(|_| {
                parse_err(header.data_line, "ASCII payload is not valid UTF-8")
            })?;
            let mut lines = text.lines();
            for i in 0..header.vertex_count {
                let line_no = header.data_line + i;
                let line = lines
                    .next()
                    .ok_or_else(|| parse_err(line_no, "missing vertex line"))?;
                let tokens: Vec<&str> = line.split_whitespace().collect();
                if tokens.len() != header.properties.len() {
                    return Err(parse_err(
                        line_no,
                        format!(
                            "expected {} values, found {}",
                            header.properties.len(),
                            tokens.len()
                        ),
                    ));
                }
                let mut values = Vec::with_capacity(tokens.len());
                for (token, (name, ty)) in tokens.iter().zip(header.properties.iter()) {
                    let v = match ty {
                        PropType::Float => token
                            .parse::<f32>()
                            .map_err(|_| {
                                parse_err(line_no, format!("invalid float '{token}'"))
                            })?
                            .into(),
                        PropType::Uchar => token
                            .parse::<u8>()
                            .map_err(|_| {
                                parse_err(line_no, format!("invalid byte '{token}' for {name:?}"))
                            })?
                            .into(),
                    };
                    values.push(v);
                }
                points.push(assemble_record(i, &header.properties, &values, mask)?);
            }
            if lines.any(|l| !l.trim().is_empty()) {
                return Err(parse_err(
                    header.data_line + header.vertex_count,
                    "trailing data after declared vertices",
                ));
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let data = &bytes[header.data_offset..];
            let row_size: usize = header.properties.iter().map(|(_, t)| t.size()).sum();
            if data.len() != header.vertex_count * row_size {
                return Err(parse_err(
                    header.end_header_line,
                    format!(
                        "payload is {} bytes but {} vertices of {} bytes were declared",
                        data.len(),
                        header.vertex_count,
                        row_size
                    ),
                ));
            }
            let mut cursor = 0usize;
            for i in 0..header.vertex_count {
                let mut values = Vec::with_capacity(header.properties.len());
                for (_, ty) in &header.properties {
                    let v = match ty {
                        PropType::Float => {
                            let raw: [u8; 4] = data[cursor..cursor + 4].try_into().unwrap();
                            cursor += 4;
                            f32::from_le_bytes(raw).into()
                        }
                        PropType::Uchar => {
                            let b = data[cursor];
                            cursor += 1;
                            f64::from(b)
                        }
                    };
                    values.push(v);
                }
                points.push(assemble_record(i, &header.properties, &values, mask)?);
            }
        }
    }
    PointCloud::new(points, mask)
}

/// Loads a point cloud from a PLY file, ASCII or binary little-endian.
pub fn load_pointcloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    load_from_bytes(&bytes)
}

/// Serializes a cloud to PLY bytes in the requested encoding.
///
/// Positions and normals are stored as 32-bit floats, colors as bytes; the
/// ASCII encoding prints floats with their shortest round-trippable form, so
/// a cloud that came from a PLY file round-trips exactly in both encodings.
pub fn to_bytes(pc: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let mask = pc.signal_mask();
    let mut header = String::from("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    header.push_str(&format!("element vertex {}\n", pc.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if mask.color {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if mask.normal {
        header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    header.push_str("end_header\n");

    let mut out = header.into_bytes();
    let color_byte = |c: f64| -> u8 { (c * 255.0).round().clamp(0.0, 255.0) as u8 };
    match format {
        PlyFormat::Ascii => {
            for p in pc.points() {
                let mut line = format!(
                    "{} {} {}",
                    p.position[0] as f32, p.position[1] as f32, p.position[2] as f32
                );
                if let Some(c) = p.color {
                    line.push_str(&format!(
                        " {} {} {}",
                        color_byte(c[0]),
                        color_byte(c[1]),
                        color_byte(c[2])
                    ));
                }
                if let Some(n) = p.normal {
                    line.push_str(&format!(
                        " {} {} {}",
                        n[0] as f32, n[1] as f32, n[2] as f32
                    ));
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for p in pc.points() {
                for v in p.position {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
                if let Some(c) = p.color {
                    out.push(color_byte(c[0]));
                    out.push(color_byte(c[1]));
                    out.push(color_byte(c[2]));
                }
                if let Some(n) = p.normal {
                    for v in n {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
            }
        }
    }
    out
}

/// Writes a cloud to disk in the requested encoding.
pub fn save_pointcloud(pc: &PointCloud, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
    fs::write(path, to_bytes(pc, format))?;
    Ok(())
}
