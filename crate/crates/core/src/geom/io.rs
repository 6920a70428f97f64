//! ASCII point-cloud readers and writers (XYZ and PLY).
//!
//! XYZ: one point per line, `x y z [label]`, whitespace separated, `#` comments.
//! PLY: `format ascii 1.0` with float `x`, `y`, `z` and optional `uchar label`
//! and `int owner` vertex properties.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{GeomError, PointCloud, SemanticLabel};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

fn parse_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse { line, msg: msg.into() }
}

fn parse_coord(tok: &str, line: usize) -> Result<f64, IoError> {
    let v: f64 = tok.parse().map_err(|_| parse_err(line, format!("bad number {tok:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(line, "non-finite coordinate"));
    }
    Ok(v)
}

fn parse_label(tok: &str, line: usize) -> Result<SemanticLabel, IoError> {
    let code: u8 = tok.parse().map_err(|_| parse_err(line, format!("bad label {tok:?}")))?;
    SemanticLabel::from_code(code).ok_or_else(|| parse_err(line, format!("unknown label code {code}")))
}

pub fn parse_xyz(text: &str) -> Result<PointCloud, IoError> {
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    let mut labelled: Option<bool> = None;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 && toks.len() != 4 {
            return Err(parse_err(ln + 1, "expected 3 or 4 fields"));
        }
        let has_label = toks.len() == 4;
        if *labelled.get_or_insert(has_label) != has_label {
            return Err(parse_err(ln + 1, "label column present on some lines only"));
        }
        pts.push([parse_coord(toks[0], ln + 1)?, parse_coord(toks[1], ln + 1)?, parse_coord(toks[2], ln + 1)?]);
        if has_label {
            labels.push(parse_label(toks[3], ln + 1)?);
        }
    }
    let cloud = PointCloud::new(pts)?;
    Ok(if labelled == Some(true) { cloud.with_labels(labels)? } else { cloud })
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut s = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        match cloud.labels() {
            Some(l) => writeln!(s, "{} {} {} {}", p[0], p[1], p[2], l[i].code()),
            None => writeln!(s, "{} {} {}", p[0], p[1], p[2]),
        }
        .unwrap();
    }
    s
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    writeln!(s, "element vertex {}", cloud.len()).unwrap();
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.labels().is_some() {
        s.push_str("property uchar label\n");
    }
    if cloud.owners().is_some() {
        s.push_str("property int owner\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points().iter().enumerate() {
        write!(s, "{} {} {}", p[0], p[1], p[2]).unwrap();
        if let Some(l) = cloud.labels() {
            write!(s, " {}", l[i].code()).unwrap();
        }
        if let Some(o) = cloud.owners() {
            write!(s, " {}", o[i]).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn parse_ply(text: &str) -> Result<PointCloud, IoError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(1, "missing ply magic")),
    }
    let mut n_vertex: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut header_done = false;
    for (ln, l) in lines.by_ref() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, _] => return Err(parse_err(ln + 1, format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                n_vertex = Some(n.parse().map_err(|_| parse_err(ln + 1, "bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => return Err(parse_err(ln + 1, "list properties unsupported")),
            ["property", _ty, name] if in_vertex => props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(ln + 1, format!("unexpected header line {l:?}"))),
        }
    }
    if !header_done {
        return Err(parse_err(0, "missing end_header"));
    }
    let n = n_vertex.ok_or_else(|| parse_err(0, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (cx, cy, cz) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(parse_err(0, "vertex element lacks x/y/z")),
    };
    let cl = col("label");
    let co = col("owner");
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::new();
    let mut owners = Vec::new();
    for (ln, l) in lines {
        if pts.len() == n {
            break;
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < props.len() {
            return Err(parse_err(ln + 1, "too few vertex fields"));
        }
        pts.push([parse_coord(toks[cx], ln + 1)?, parse_coord(toks[cy], ln + 1)?, parse_coord(toks[cz], ln + 1)?]);
        if let Some(c) = cl {
            labels.push(parse_label(toks[c], ln + 1)?);
        }
        if let Some(c) = co {
            owners.push(toks[c].parse::<i32>().map_err(|_| parse_err(ln + 1, "bad owner"))?);
        }
    }
    if pts.len() != n {
        return Err(parse_err(0, format!("expected {n} vertices, found {}", pts.len())));
    }
    let mut cloud = PointCloud::new(pts)?;
    if cl.is_some() {
        cloud = cloud.with_labels(labels)?;
    }
    if co.is_some() {
        cloud = cloud.with_owners(owners)?;
    }
    Ok(cloud)
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io { path: path.display().to_string(), source }
}

/// Reads a cloud, choosing the format by extension (`.ply`, otherwise XYZ).
pub fn read_cloud(path: &Path) -> Result<PointCloud, IoError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        parse_ply(&text)
    } else {
        parse_xyz(&text)
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let body = if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        format_ply(cloud)
    } else {
        format_xyz(cloud)
    };
    fs::write(path, body).map_err(|e| io_err(path, e))
}
