use std::fmt::Write as _;
use std::io::{self, Write};

use crate::geometry::{uv_side_length, UvCloud, MIN_UV_EXTENT};

/// Width and height of the SVG canvas in user units.
pub const SVG_SIZE: f64 = 1024.0;

/// Shifts UVs to the origin and divides by the side length, so every
/// coordinate lands in `[0, 1]` and the aspect ratio is kept.
pub fn uv_to_unit_square(q: &UvCloud) -> Vec<[f64; 2]> {
    let Some((lo, _)) = q.bounds() else {
        return Vec::new();
    };
    let l = uv_side_length(q).max(MIN_UV_EXTENT);
    q.coords
        .iter()
        .map(|c| [(c[0] - lo[0]) / l, (c[1] - lo[1]) / l])
        .collect()
}

/// Writes an OBJ with one `v`/`vt` pair per point. Faces, when given, use
/// the same index for position and texture coordinate.
pub fn export_uv_obj<W: Write>(
    out: &mut W,
    vertices: &[[f64; 3]],
    q: &UvCloud,
    triangles: Option<&[[usize; 3]]>,
) -> io::Result<()> {
    if vertices.len() != q.len() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("{} vertices but {} UVs", vertices.len(), q.len()),
        ));
    }
    let mut s = String::new();
    for v in vertices {
        writeln!(s, "v {} {} {}", v[0], v[1], v[2]).unwrap();
    }
    for t in uv_to_unit_square(q) {
        writeln!(s, "vt {} {}", t[0], t[1]).unwrap();
    }
    for tri in triangles.unwrap_or(&[]) {
        let [a, b, c] = tri.map(|i| i + 1);
        writeln!(s, "f {a}/{a} {b}/{b} {c}/{c}").unwrap();
    }
    out.write_all(s.as_bytes())
}

/// Maps unit normals to RGB via `(n + 1) / 2`; missing normals are grey.
pub fn normal_colors(normals: &[Option<[f64; 3]>]) -> Vec<[u8; 3]> {
    normals
        .iter()
        .map(|n| match n {
            Some(n) => n.map(|c| (((c + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8),
            None => [128; 3],
        })
        .collect()
}

/// Scatter plot of the UVs. The bounding box is scaled uniformly so its
/// lower-left corner sits at the canvas's lower-left corner and its longer
/// side spans the canvas; `v` points up.
pub fn export_uv_svg<W: Write>(out: &mut W, q: &UvCloud, colors: &[[u8; 3]]) -> io::Result<()> {
    if colors.len() != q.len() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("{} UVs but {} colors", q.len(), colors.len()),
        ));
    }
    let radius = (SVG_SIZE / (q.len().max(1) as f64).sqrt() / 4.0).clamp(0.5, 8.0);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}" width="{SVG_SIZE}" height="{SVG_SIZE}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for (t, c) in uv_to_unit_square(q).iter().zip(colors) {
        writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="{radius:.2}" fill="rgb({},{},{})"/>"#,
            t[0] * SVG_SIZE,
            (1.0 - t[1]) * SVG_SIZE,
            c[0],
            c[1],
            c[2]
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    out.write_all(s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_obj(text: &str) -> (Vec<[f64; 3]>, Vec<[f64; 2]>, Vec<Vec<(usize, usize)>>) {
        let (mut v, mut vt, mut f) = (vec![], vec![], vec![]);
        for line in text.lines() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let x: Vec<f64> = it.map(|t| t.parse().unwrap()).collect();
                    v.push([x[0], x[1], x[2]]);
                }
                Some("vt") => {
                    let x: Vec<f64> = it.map(|t| t.parse().unwrap()).collect();
                    vt.push([x[0], x[1]]);
                }
                Some("f") => f.push(
                    it.map(|t| {
                        let (a, b) = t.split_once('/').unwrap();
                        (a.parse().unwrap(), b.parse().unwrap())
                    })
                    .collect(),
                ),
                _ => {}
            }
        }
        (v, vt, f)
    }

    #[test]
    fn obj_round_trip() {
        let verts = vec![[0.5, -1.25, 3.0], [1.0, 2.0, 3.0], [-4.0, 0.125, 1e-3]];
        let q = UvCloud::new(vec![[2.0, 1.0], [4.0, 1.0], [2.0, 2.0]]);
        let mut buf = Vec::new();
        export_uv_obj(&mut buf, &verts, &q, Some(&[[0, 1, 2]])).unwrap();
        let (v, vt, f) = parse_obj(std::str::from_utf8(&buf).unwrap());
        assert_eq!(v, verts);
        assert_eq!(vt, vec![[0.0, 0.0], [1.0, 0.0], [0.0, 0.5]]);
        assert_eq!(f, vec![vec![(1, 1), (2, 2), (3, 3)]]);
        assert!(vt.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
        assert!(export_uv_obj(&mut Vec::new(), &verts[..2], &q, None).is_err());
    }

    #[test]
    fn svg_corners_and_colors() {
        let q = UvCloud::new(vec![[-1.0, -1.0], [3.0, 1.0]]);
        let colors = normal_colors(&[Some([1.0, -1.0, 0.0]), None]);
        assert_eq!(colors, vec![[255, 0, 128], [128, 128, 128]]);
        let mut buf = Vec::new();
        export_uv_svg(&mut buf, &q, &colors).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
        assert!(text.contains(r#"cx="0.000" cy="1024.000""#));
        assert!(text.contains(r#"cx="1024.000" cy="512.000""#));
        assert!(text.contains("rgb(255,0,128)"));
    }

    #[test]
    fn empty_cloud_gives_valid_svg() {
        let mut buf = Vec::new();
        export_uv_svg(&mut buf, &UvCloud::new(vec![]), &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains("<circle"));
        assert_eq!(text.matches("<svg").count(), 1);
        assert!(text.trim_end().ends_with("</svg>"));
    }
}
