//! Readers and writers for OBJ, ASCII PLY and XYZ geometry files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cyclemap::geometry::{PointCloud3, TriangleMesh};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum InputError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported input format `{0}` (expected .obj, .ply or .xyz)")]
    Format(String),
    #[error("input contains no points")]
    Empty,
}

fn parse_err(line: usize, message: impl Into<String>) -> InputError {
    InputError::Parse {
        line,
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Obj,
    Ply,
    Xyz,
}

impl InputFormat {
    pub fn from_path(path: &Path) -> Result<Self, InputError> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        ext.parse()
    }
}

impl FromStr for InputFormat {
    type Err = InputError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "obj" => Ok(Self::Obj),
            "ply" => Ok(Self::Ply),
            "xyz" => Ok(Self::Xyz),
            other => Err(InputError::Format(other.to_string())),
        }
    }
}

/// Geometry read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Mesh(TriangleMesh),
    Cloud(PointCloud3),
}

impl Shape {
    pub fn vertices(&self) -> &[[f64; 3]] {
        match self {
            Shape::Mesh(m) => &m.vertices,
            Shape::Cloud(c) => &c.points,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Loaded {
    pub shape: Shape,
    /// Per-vertex normals, when the file carries them. Never used for
    /// training.
    pub normals: Option<Vec<[f64; 3]>>,
}

/// Reads a mesh or cloud, choosing the parser by file extension.
pub fn parse_inputs(path: &Path) -> Result<Loaded, InputError> {
    let format = InputFormat::from_path(path)?;
    let text = fs::read_to_string(path).map_err(|source| InputError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let loaded = match format {
        InputFormat::Obj => parse_obj(&text),
        InputFormat::Ply => parse_ply(&text),
        InputFormat::Xyz => parse_xyz(&text),
    }?;
    if loaded.shape.vertices().is_empty() {
        return Err(InputError::Empty);
    }
    Ok(loaded)
}

fn number(tok: &str, line: usize) -> Result<f64, InputError> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(parse_err(line, format!("non-finite value `{tok}`"))),
        Err(_) => Err(parse_err(line, format!("expected a number, found `{tok}`"))),
    }
}

fn triple(toks: &[&str], line: usize) -> Result<[f64; 3], InputError> {
    Ok([number(toks[0], line)?, number(toks[1], line)?, number(toks[2], line)?])
}

fn finish(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>, normals: Vec<[f64; 3]>) -> Loaded {
    let normals = (!normals.is_empty() && normals.len() == vertices.len()).then_some(normals);
    let shape = if triangles.is_empty() {
        Shape::Cloud(PointCloud3::new(vertices))
    } else {
        Shape::Mesh(TriangleMesh {
            vertices,
            triangles,
            uvs: None,
        })
    };
    Loaded { shape, normals }
}

/// Wavefront OBJ. Polygons are fan-triangulated; a file without faces is a
/// point cloud. Texture coordinates and grouping statements are ignored.
pub fn parse_obj(text: &str) -> Result<Loaded, InputError> {
    let (mut vertices, mut normals, mut triangles) = (Vec::new(), Vec::new(), Vec::new());
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let toks: Vec<&str> = content.split_whitespace().collect();
        let Some((&key, args)) = toks.split_first() else {
            continue;
        };
        match key {
            "v" => {
                if !(3..=4).contains(&args.len()) {
                    return Err(parse_err(line, format!("`v` takes 3 or 4 numbers, found {}", args.len())));
                }
                vertices.push(triple(args, line)?);
            }
            "vn" => {
                if args.len() != 3 {
                    return Err(parse_err(line, "`vn` takes 3 numbers"));
                }
                normals.push(triple(args, line)?);
            }
            "f" => {
                if args.len() < 3 {
                    return Err(parse_err(line, "a face needs at least 3 vertices"));
                }
                let idx = args
                    .iter()
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        let v: i64 = first
                            .parse()
                            .map_err(|_| parse_err(line, format!("bad face index `{t}`")))?;
                        let resolved = match v {
                            v if v > 0 => v - 1,
                            v if v < 0 => vertices.len() as i64 + v,
                            _ => -1,
                        };
                        if resolved < 0 || resolved >= vertices.len() as i64 {
                            return Err(parse_err(line, format!("face index {v} out of range")));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<Vec<usize>, InputError>>()?;
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(finish(vertices, triangles, normals))
}

struct PlyElement {
    name: String,
    count: usize,
    /// `(name, is_list)` in file order.
    props: Vec<(String, bool)>,
}

/// ASCII PLY with a `vertex` element (x, y, z and optional nx, ny, nz) and
/// an optional `face` element. Other elements are skipped.
pub fn parse_ply(text: &str) -> Result<Loaded, InputError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(1, "missing `ply` magic line")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut ascii = false;
    loop {
        let Some((line, l)) = lines.next() else {
            return Err(parse_err(text.lines().count(), "missing `end_header`"));
        };
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => ascii = true,
            ["format", other, ..] => {
                return Err(parse_err(line, format!("only ascii PLY is supported, found `{other}`")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, name] | ["property", _, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(line, "property before any element"))?;
                el.props.push((name.to_string(), toks[1] == "list"));
            }
            _ => return Err(parse_err(line, format!("unrecognized header line `{l}`"))),
        }
    }
    if !ascii {
        return Err(parse_err(1, "missing `format ascii 1.0`"));
    }

    let (mut vertices, mut normals, mut triangles) = (Vec::new(), Vec::new(), Vec::new());
    let mut face_rows: Vec<(usize, Vec<i64>)> = Vec::new();
    for el in &elements {
        let pos = |n: &str| el.props.iter().position(|(p, _)| p == n);
        let xyz = [pos("x"), pos("y"), pos("z")];
        let nxyz = [pos("nx"), pos("ny"), pos("nz")];
        if el.name == "vertex" && xyz.iter().any(Option::is_none) {
            return Err(parse_err(1, "vertex element lacks x, y or z"));
        }
        let has_normals = nxyz.iter().all(Option::is_some);
        for _ in 0..el.count {
            let (line, l) = loop {
                match lines.next() {
                    Some((_, "")) => continue,
                    Some(v) => break v,
                    None => return Err(parse_err(text.lines().count(), format!("too few `{}` rows", el.name))),
                }
            };
            let toks: Vec<&str> = l.split_whitespace().collect();
            let mut cursor = 0;
            let mut scalars = Vec::with_capacity(el.props.len());
            let mut list: Vec<i64> = Vec::new();
            for (name, is_list) in &el.props {
                let tok = toks
                    .get(cursor)
                    .ok_or_else(|| parse_err(line, format!("row ends before property `{name}`")))?;
                cursor += 1;
                if *is_list {
                    let n: usize = tok
                        .parse()
                        .map_err(|_| parse_err(line, format!("bad list length `{tok}`")))?;
                    let items = toks
                        .get(cursor..cursor + n)
                        .ok_or_else(|| parse_err(line, format!("list `{name}` is truncated")))?;
                    cursor += n;
                    scalars.push(f64::NAN);
                    if name == "vertex_indices" || name == "vertex_index" {
                        list = items
                            .iter()
                            .map(|t| t.parse().map_err(|_| parse_err(line, format!("bad index `{t}`"))))
                            .collect::<Result<_, _>>()?;
                    }
                } else if el.name == "vertex" {
                    scalars.push(number(tok, line)?);
                } else {
                    scalars.push(f64::NAN);
                }
            }
            if cursor != toks.len() {
                return Err(parse_err(line, format!("{} values, expected {cursor}", toks.len())));
            }
            match el.name.as_str() {
                "vertex" => {
                    vertices.push(xyz.map(|p| scalars[p.expect("checked")]));
                    if has_normals {
                        normals.push(nxyz.map(|p| scalars[p.expect("checked")]));
                    }
                }
                "face" => face_rows.push((line, list)),
                _ => {}
            }
        }
    }
    for (line, idx) in face_rows {
        if idx.len() < 3 {
            return Err(parse_err(line, "a face needs at least 3 vertices"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i < 0 || i as usize >= vertices.len()) {
            return Err(parse_err(line, format!("face index {bad} out of range")));
        }
        for k in 1..idx.len() - 1 {
            triangles.push([idx[0] as usize, idx[k] as usize, idx[k + 1] as usize]);
        }
    }
    Ok(finish(vertices, triangles, normals))
}

/// One point per line: `x y z` or `x y z nx ny nz`, separated by
/// whitespace or commas. `#` starts a comment.
pub fn parse_xyz(text: &str) -> Result<Loaded, InputError> {
    let (mut points, mut normals) = (Vec::new(), Vec::new());
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let toks: Vec<&str> = content
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .collect();
        match toks.len() {
            0 => continue,
            3 => points.push(triple(&toks, line)?),
            6 => {
                points.push(triple(&toks, line)?);
                normals.push(triple(&toks[3..], line)?);
            }
            n => return Err(parse_err(line, format!("expected 3 or 6 values, found {n}"))),
        }
    }
    if !normals.is_empty() && normals.len() != points.len() {
        return Err(parse_err(1, "normals given for some points but not all"));
    }
    Ok(finish(points, Vec::new(), normals))
}

fn push_v(s: &mut String, key: &str, v: &[f64; 3]) {
    writeln!(s, "{key} {} {} {}", v[0], v[1], v[2]).unwrap();
}

pub fn write_obj(shape: &Shape) -> String {
    let mut s = String::new();
    for v in shape.vertices() {
        push_v(&mut s, "v", v);
    }
    if let Shape::Mesh(m) = shape {
        for t in &m.triangles {
            writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
        }
    }
    s
}

pub fn write_ply(shape: &Shape, normals: Option<&[[f64; 3]]>) -> String {
    let verts = shape.vertices();
    let mut s = format!("ply\nformat ascii 1.0\nelement vertex {}\n", verts.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if normals.is_some() {
        s.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    let tris: &[[usize; 3]] = match shape {
        Shape::Mesh(m) => &m.triangles,
        Shape::Cloud(_) => &[],
    };
    if !tris.is_empty() {
        writeln!(s, "element face {}\nproperty list uchar int vertex_indices", tris.len()).unwrap();
    }
    s.push_str("end_header\n");
    for (i, v) in verts.iter().enumerate() {
        write!(s, "{} {} {}", v[0], v[1], v[2]).unwrap();
        if let Some(n) = normals {
            write!(s, " {} {} {}", n[i][0], n[i][1], n[i][2]).unwrap();
        }
        s.push('\n');
    }
    for t in tris {
        writeln!(s, "3 {} {} {}", t[0], t[1], t[2]).unwrap();
    }
    s
}

pub fn write_xyz(points: &[[f64; 3]]) -> String {
    let mut s = String::new();
    for p in points {
        writeln!(s, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    s
}
