//! ASCII PLY reading and writing for point clouds.
//!
//! Only the `vertex` element is interpreted (`x`, `y`, `z` and optionally `red`, `green`,
//! `blue`); other elements are counted and skipped.

use std::fmt::Write as _;

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug)]
struct Property {
    name: String,
    integer: bool,
}

fn scalar_is_integer(ty: &str, line: usize) -> Result<bool> {
    match ty {
        "char" | "uchar" | "short" | "ushort" | "int" | "uint" | "int8" | "uint8" | "int16"
        | "uint16" | "int32" | "uint32" => Ok(true),
        "float" | "double" | "float32" | "float64" => Ok(false),
        other => Err(Error::parse(line, format!("unknown property type `{other}`"))),
    }
}

/// Parses an ASCII PLY document. Positions are returned as stored, without normalization.
pub fn load_ply(bytes: &[u8]) -> Result<PointCloud> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let line = 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count();
        Error::parse(line, "invalid UTF-8")
    })?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(Error::parse(n, "missing `ply` magic")),
        None => return Err(Error::parse(1, "empty input")),
    }

    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    let mut header_end = None;
    for (n, line) in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                let kind = tok.next();
                let version = tok.next();
                if kind != Some("ascii") {
                    return Err(Error::parse(n, "only `format ascii` is supported"));
                }
                if version != Some("1.0") {
                    return Err(Error::parse(n, "unsupported PLY version"));
                }
                saw_format = true;
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| Error::parse(n, "element without a name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| Error::parse(n, "element count is not a non-negative integer"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(n, "property before any element"))?;
                let ty = tok.next().ok_or_else(|| Error::parse(n, "property without a type"))?;
                if ty == "list" {
                    if element.name == "vertex" {
                        return Err(Error::parse(n, "list properties on vertices are not supported"));
                    }
                    // list properties on other elements are skipped wholesale
                    element.properties.push(Property {
                        name: "list".into(),
                        integer: true,
                    });
                    continue;
                }
                let integer = scalar_is_integer(ty, n)?;
                let name = tok.next().ok_or_else(|| Error::parse(n, "property without a name"))?;
                element.properties.push(Property {
                    name: name.to_string(),
                    integer,
                });
            }
            Some("end_header") => {
                header_end = Some(n);
                break;
            }
            Some(other) => return Err(Error::parse(n, format!("unexpected header keyword `{other}`"))),
            None => return Err(Error::parse(n, "blank line in header")),
        }
    }
    let header_end = header_end.ok_or_else(|| Error::parse(text.lines().count().max(1), "missing end_header"))?;
    if !saw_format {
        return Err(Error::parse(header_end, "missing format line"));
    }
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::parse(header_end, "no vertex element"))?;
    let vertex = &elements[vertex_pos];
    let find = |name: &str| vertex.properties.iter().position(|p| p.name == name);
    let (xi, yi, zi) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::parse(header_end, "vertex element lacks x, y or z")),
    };
    let color_idx = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        (None, None, None) => None,
        _ => return Err(Error::parse(header_end, "incomplete red/green/blue properties")),
    };
    if vertex.count == 0 {
        return Err(Error::parse(header_end, "vertex element declares zero vertices"));
    }

    let mut positions = Vec::with_capacity(vertex.count);
    let mut colors: Vec<Point3> = Vec::new();
    let mut values = Vec::with_capacity(vertex.properties.len());
    let mut body = lines.filter(|(_, l)| !l.is_empty());
    let mut last_line = header_end;
    for (ei, element) in elements.iter().enumerate() {
        for _ in 0..element.count {
            let (n, line) = body.next().ok_or_else(|| {
                Error::parse(
                    last_line + 1,
                    format!("element `{}` declares {} entries but input ended early", element.name, element.count),
                )
            })?;
            last_line = n;
            if ei != vertex_pos {
                continue;
            }
            values.clear();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::parse(n, format!("`{tok}` is not a number")))?;
                values.push(v);
            }
            if values.len() != vertex.properties.len() {
                return Err(Error::parse(
                    n,
                    format!("expected {} values, found {}", vertex.properties.len(), values.len()),
                ));
            }
            let p = [values[xi], values[yi], values[zi]];
            if p.iter().any(|c| !c.is_finite() || c.abs() > f32::MAX as f64) {
                return Err(Error::parse(n, "non-finite coordinate"));
            }
            positions.push(p.map(|c| c as f32));
            if let Some(idx) = color_idx {
                let mut rgb = [0.0f32; 3];
                for (k, &pi) in idx.iter().enumerate() {
                    let raw = values[pi];
                    let c = if vertex.properties[pi].integer { raw / 255.0 } else { raw };
                    if !(0.0..=1.0).contains(&c) {
                        return Err(Error::parse(n, format!("color component {raw} out of range")));
                    }
                    rgb[k] = c as f32;
                }
                colors.push(rgb);
            }
        }
    }
    if let Some((n, _)) = body.next() {
        return Err(Error::parse(n, "data beyond the declared element counts"));
    }

    let cloud = PointCloud::new("", positions).map_err(|e| Error::parse(header_end, e))?;
    if color_idx.is_some() {
        cloud.with_colors(colors).map_err(|e| Error::parse(header_end, e))
    } else {
        Ok(cloud)
    }
}

/// Formats a value with six significant digits, trimming trailing zeros.
fn fmt_sig6(v: f32) -> String {
    let v = v as f64;
    if v == 0.0 {
        return "0".into();
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-5..=15).contains(&mag) {
        return format!("{v:.5e}");
    }
    let decimals = (5 - mag).max(0) as usize;
    let mut s = format!("{v:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Serializes a cloud as ASCII PLY. Colors, when present, are written as 0-255 bytes.
/// Reads a PLY file; the cloud id becomes the file stem.
pub fn load_ply_file(path: &std::path::Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(load_ply(&bytes)?.with_id(stem))
}

pub fn save_ply(cloud: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.colors().is_some() {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.push_str("end_header\n");
    for (i, p) in cloud.positions().iter().enumerate() {
        let _ = write!(out, "{} {} {}", fmt_sig6(p[0]), fmt_sig6(p[1]), fmt_sig6(p[2]));
        if let Some(colors) = cloud.colors() {
            let c = colors[i].map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
            let _ = write!(out, " {} {} {}", c[0], c[1], c[2]);
        }
        out.push('\n');
    }
    out
}
