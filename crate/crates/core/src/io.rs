//! Point-cloud files: ASCII PLY and a raw little-endian binary container.
//!
//! Binary layout: `b"PCAM"`, version `u32`, point count `u32`, then
//! `n × 3` little-endian `f64` coordinates.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::shapes::PointCloud;

pub const BINARY_MAGIC: &[u8; 4] = b"PCAM";
pub const BINARY_VERSION: u32 = 1;

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Parse { offset, message: message.into() })
}

/// ASCII PLY text with `double` x/y/z vertex properties. Coordinates use the
/// shortest representation that round-trips exactly.
pub fn ply_string(cloud: &PointCloud) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\ncomment pcam point cloud\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    );
    for p in cloud.points() {
        s.push_str(&format!("{:?} {:?} {:?}\n", p[0], p[1], p[2]));
    }
    s
}

pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let mut offset = 0usize;
    let mut lines = Vec::new();
    // header lines, tracking byte offsets for diagnostics
    let mut header_end = None;
    while offset < bytes.len() {
        let end = bytes[offset..].iter().position(|&b| b == b'\n').map(|p| offset + p).unwrap_or(bytes.len());
        let line = std::str::from_utf8(&bytes[offset..end])
            .map_err(|_| Error::Parse { offset, message: "header is not UTF-8".into() })?
            .trim_end_matches('\r');
        lines.push((offset, line));
        offset = end + 1;
        if line == "end_header" {
            header_end = Some(offset.min(bytes.len()));
            break;
        }
    }
    let Some(body_start) = header_end else {
        return parse_err(bytes.len(), "missing end_header");
    };
    match lines.first() {
        Some((_, "ply")) => {}
        _ => return parse_err(0, "missing `ply` magic line"),
    }

    struct Element {
        name: String,
        count: usize,
        props: Vec<String>,
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    for &(at, line) in &lines[1..lines.len() - 1] {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => format_seen = true,
            ["format", other, ..] => return parse_err(at, format!("unsupported PLY format `{other}`")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| Error::Parse { offset: at, message: format!("bad element count `{count}`") })?;
                elements.push(Element { name: name.to_string(), count, props: Vec::new() });
            }
            ["property", "list", ..] => match elements.last_mut() {
                Some(e) if e.name != "vertex" => e.props.push("<list>".into()),
                _ => return parse_err(at, "list properties on vertices are not supported"),
            },
            ["property", _ty, name] => match elements.last_mut() {
                Some(e) => e.props.push(name.to_string()),
                None => return parse_err(at, "property before any element"),
            },
            _ => return parse_err(at, format!("unrecognized header line `{line}`")),
        }
    }
    if !format_seen {
        return parse_err(0, "missing format line");
    }
    let Some(vertex_pos) = elements.iter().position(|e| e.name == "vertex") else {
        return parse_err(body_start, "no vertex element");
    };
    let vertex = &elements[vertex_pos];
    let col = |axis: &str| {
        vertex.props.iter().position(|p| p == axis).ok_or_else(|| Error::Parse {
            offset: body_start,
            message: format!("vertex element lacks `{axis}`"),
        })
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
    let skip_lines: usize = elements[..vertex_pos].iter().map(|e| e.count).sum();

    let mut offset = body_start;
    let next_line = |offset: &mut usize| -> Option<(usize, &[u8])> {
        if *offset >= bytes.len() {
            return None;
        }
        let start = *offset;
        let end = bytes[start..].iter().position(|&b| b == b'\n').map(|p| start + p).unwrap_or(bytes.len());
        *offset = end + 1;
        Some((start, &bytes[start..end]))
    };
    for _ in 0..skip_lines {
        if next_line(&mut offset).is_none() {
            return parse_err(bytes.len(), "truncated payload before vertex data");
        }
    }
    let mut points = Vec::with_capacity(vertex.count);
    for i in 0..vertex.count {
        let Some((at, raw)) = next_line(&mut offset) else {
            return parse_err(bytes.len(), format!("truncated payload: expected {} vertices, found {i}", vertex.count));
        };
        let text = std::str::from_utf8(raw).map_err(|_| Error::Parse { offset: at, message: "vertex line is not UTF-8".into() })?;
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() < vertex.props.len() {
            return parse_err(at, format!("vertex {i} has {} fields, expected {}", fields.len(), vertex.props.len()));
        }
        let get = |c: usize| -> Result<f64> {
            fields[c].parse::<f64>().map_err(|_| Error::Parse { offset: at, message: format!("bad number `{}`", fields[c]) })
        };
        points.push([get(cx)?, get(cy)?, get(cz)?]);
    }
    Ok(PointCloud::new(points))
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, ply_string(cloud))?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    parse_ply(&fs::read(path)?)
}

pub fn binary_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + cloud.len() * 24);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for v in cloud.points().iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_binary(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 12 {
        return parse_err(bytes.len(), "truncated header");
    }
    if &bytes[..4] != BINARY_MAGIC {
        return parse_err(0, "bad magic, expected PCAM");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != BINARY_VERSION {
        return parse_err(4, format!("unsupported version {version}"));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let need = 12 + n * 24;
    if bytes.len() < need {
        return parse_err(bytes.len(), format!("truncated payload: {n} points need {need} bytes"));
    }
    if bytes.len() > need {
        return parse_err(need, "trailing bytes after payload");
    }
    let vals: Vec<f64> = bytes[12..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    PointCloud::from_flat(&vals)
}

pub fn write_binary(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, binary_bytes(cloud))?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<PointCloud> {
    parse_binary(&fs::read(path)?)
}

fn is_ply(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"))
}

/// Writes PLY for `.ply` paths and the binary container otherwise.
pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    if is_ply(path) {
        write_ply(path, cloud)
    } else {
        write_binary(path, cloud)
    }
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    if is_ply(path) {
        read_ply(path)
    } else {
        read_binary(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::random_cloud_gaussian;

    #[test]
    fn empty_path_is_io_error() {
        let c = PointCloud::origin(3);
        assert!(matches!(save_cloud(Path::new(""), &c), Err(Error::Io(_))));
        assert!(matches!(load_cloud(Path::new("")), Err(Error::Io(_))));
    }

    #[test]
    fn binary_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = random_cloud_gaussian(0.3, 100, 4).unwrap();
        save_cloud(&path, &c).unwrap();
        let back = load_cloud(&path).unwrap();
        let bits = |c: &PointCloud| c.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&c), bits(&back));
    }

    #[test]
    fn ply_round_trip_within_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let c = random_cloud_gaussian(1.7, 50, 8).unwrap();
        save_cloud(&path, &c).unwrap();
        let back = load_cloud(&path).unwrap();
        for (a, b) in c.flat().iter().zip(back.flat()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hand_written_fixture_parses() {
        let text = "ply\r\nformat ascii 1.0\r\ncomment fixture\r\nelement vertex 3\r\nproperty float x\r\nproperty float y\r\nproperty float z\r\nproperty uchar red\r\nelement face 0\r\nproperty list uchar int vertex_indices\r\nend_header\r\n0 0 0 255\r\n1.5 -2 0.25 0\r\n-1e-3 4 7 10\r\n";
        let c = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(c.points(), &[[0.0, 0.0, 0.0], [1.5, -2.0, 0.25], [-1e-3, 4.0, 7.0]]);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        let truncated = "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nend_header\n1 2 3\n";
        match parse_ply(truncated.as_bytes()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, truncated.len()),
            other => panic!("unexpected {other:?}"),
        }
        let bad_header = "ply\nformat ascii 1.0\nelement vertex x\nend_header\n";
        match parse_ply(bad_header.as_bytes()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, "ply\nformat ascii 1.0\n".len()),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_ply(b"nope\n"), Err(Error::Parse { .. })));

        let mut bytes = binary_bytes(&PointCloud::origin(2));
        bytes.truncate(30);
        assert!(matches!(parse_binary(&bytes), Err(Error::Parse { offset: 30, .. })));
        assert!(matches!(parse_binary(b"XXXX\x01\0\0\0\0\0\0\0"), Err(Error::Parse { offset: 0, .. })));
    }
}
