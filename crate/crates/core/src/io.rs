//! Readers and writers for XYZ, ASCII PLY and OFF files.
//!
//! Floats are written with 9 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

/// Formats `x` with 9 significant digits, dropping trailing zeros.
pub fn fmt9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        // Rounding can carry into a new digit (e.g. 9.99999999995 -> 10.00000000).
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        if s == "-0" {
            "0".to_string()
        } else {
            s
        }
    } else {
        let s = format!("{x:.8e}");
        let (mant, e) = s.split_once('e').unwrap();
        let mant = mant.trim_end_matches('0').trim_end_matches('.');
        format!("{mant}e{e}")
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_floats(path: &Path, line_no: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| parse_err(path, line_no, format!("not a number: {f:?}")))
        })
        .collect()
}

/// Reads one `x y z` triple per line. Blank lines and `#` comments are skipped.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = read_text(path)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(parse_err(path, i + 1, "expected three coordinates"));
        }
        let v = parse_floats(path, i + 1, &fields[..3])?;
        points.push([v[0], v[1], v[2]]);
    }
    if points.is_empty() {
        return Err(parse_err(path, 1, "no points"));
    }
    PointCloud::new(points)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for p in &cloud.points {
        let _ = writeln!(out, "{} {} {}", fmt9(p[0]), fmt9(p[1]), fmt9(p[2]));
    }
    out
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_text(path, &format_xyz(cloud))
}

/// Reads an ASCII PLY vertex element with `x y z` and optional `nx ny nz`.
/// Other vertex properties are ignored; other elements are skipped.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing 'ply' magic")),
    }
    // (element name, count, property names)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut label = None;
    let mut header_end = None;
    for (i, line) in lines.by_ref() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "ascii", _] => {}
            ["format", ..] => return Err(parse_err(path, i + 1, "only ascii PLY is supported")),
            ["comment", "label", v] => {
                label = Some(v.parse::<usize>().map_err(|_| parse_err(path, i + 1, "bad label"))?)
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| parse_err(path, i + 1, "bad element count"))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", ..] => {
                let Some(el) = elements.last_mut() else {
                    return Err(parse_err(path, i + 1, "property before element"));
                };
                el.2.push("<list>".to_string());
            }
            ["property", _ty, name] => {
                let Some(el) = elements.last_mut() else {
                    return Err(parse_err(path, i + 1, "property before element"));
                };
                el.2.push(name.to_string());
            }
            ["end_header"] => {
                header_end = Some(i);
                break;
            }
            _ => return Err(parse_err(path, i + 1, format!("unexpected header line {line:?}"))),
        }
    }
    if header_end.is_none() {
        return Err(parse_err(path, 1, "missing end_header"));
    }
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut has_normals = false;
    for (name, count, props) in &elements {
        let pos = |p: &str| props.iter().position(|x| x == p);
        let xyz = [pos("x"), pos("y"), pos("z")];
        let nxyz = [pos("nx"), pos("ny"), pos("nz")];
        let is_vertex = name == "vertex";
        if is_vertex && xyz.iter().any(Option::is_none) {
            return Err(parse_err(path, 1, "vertex element lacks x/y/z"));
        }
        if is_vertex {
            has_normals = nxyz.iter().all(Option::is_some);
        }
        for _ in 0..*count {
            let Some((i, line)) = lines.next() else {
                return Err(parse_err(path, text.lines().count(), "unexpected end of file"));
            };
            if !is_vertex {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < props.len() {
                return Err(parse_err(path, i + 1, "too few vertex fields"));
            }
            let v = parse_floats(path, i + 1, &fields[..props.len()])?;
            points.push([v[xyz[0].unwrap()], v[xyz[1].unwrap()], v[xyz[2].unwrap()]]);
            if nxyz.iter().all(Option::is_some) {
                normals.push([v[nxyz[0].unwrap()], v[nxyz[1].unwrap()], v[nxyz[2].unwrap()]]);
            }
        }
    }
    if points.is_empty() {
        return Err(parse_err(path, 1, "no vertices"));
    }
    let mut cloud = PointCloud::new(points)?;
    if has_normals {
        cloud = cloud.with_normals(normals)?;
    }
    cloud.label = label;
    Ok(cloud)
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    if let Some(label) = cloud.label {
        let _ = writeln!(out, "comment label {label}");
    }
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals.is_some() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    out.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(out, "{} {} {}", fmt9(p[0]), fmt9(p[1]), fmt9(p[2]));
        if let Some(n) = &cloud.normals {
            let u = n[i];
            let _ = write!(out, " {} {} {}", fmt9(u[0]), fmt9(u[1]), fmt9(u[2]));
        }
        out.push('\n');
    }
    out
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_text(path, &format_ply(cloud))
}

/// Reads a cloud by extension: `.ply`, `.off` (vertices only) or anything else as XYZ.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ply") => read_ply(path),
        Some("off") => PointCloud::new(read_off(path)?.vertices),
        _ => read_xyz(path),
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => write_ply(path, cloud),
        _ => write_xyz(path, cloud),
    }
}

/// Polygon mesh as read from an OFF file.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<Vec<usize>>,
}

struct OffTokens<'a> {
    path: &'a Path,
    last_line: usize,
    pending: Option<(usize, &'a str)>,
    inner: Box<dyn Iterator<Item = (usize, &'a str)> + 'a>,
}

impl<'a> OffTokens<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        if let Some(t) = self.pending.take() {
            return Ok(t);
        }
        self.inner.next().ok_or_else(|| {
            parse_err(self.path, self.last_line, format!("unexpected end of file reading {what}"))
        })
    }

    fn usize(&mut self, what: &str) -> Result<(usize, usize)> {
        let (l, t) = self.next(what)?;
        t.parse::<usize>()
            .map(|v| (l, v))
            .map_err(|_| parse_err(self.path, l, format!("bad {what}: {t:?}")))
    }

    fn float(&mut self, what: &str) -> Result<f64> {
        let (l, t) = self.next(what)?;
        match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(parse_err(self.path, l, format!("bad {what}: {t:?}"))),
        }
    }
}

pub fn parse_off(path: &Path, text: &str) -> Result<Mesh> {
    let inner = text.lines().enumerate().flat_map(|(i, line)| {
        let line = line.split('#').next().unwrap_or("");
        line.split_whitespace().map(move |t| (i + 1, t))
    });
    let mut tokens = OffTokens {
        path,
        last_line: text.lines().count().max(1),
        pending: None,
        inner: Box::new(inner),
    };
    let (line, magic) = tokens.next("header")?;
    if magic != "OFF" {
        // Some writers glue the counts onto the magic ("OFF8 6 0").
        match magic.strip_prefix("OFF") {
            Some(rest) if !rest.is_empty() => tokens.pending = Some((line, rest)),
            _ => return Err(parse_err(path, line, "missing OFF header")),
        }
    }
    let (_, nv) = tokens.usize("vertex count")?;
    let (fl, nf) = tokens.usize("face count")?;
    tokens.usize("edge count")?;
    if nv == 0 {
        return Err(parse_err(path, fl, "mesh has no vertices"));
    }
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        vertices.push([
            tokens.float("vertex coordinate")?,
            tokens.float("vertex coordinate")?,
            tokens.float("vertex coordinate")?,
        ]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (l, k) = tokens.usize("face size")?;
        if k < 3 {
            return Err(parse_err(path, l, "face with fewer than 3 vertices"));
        }
        let mut face = Vec::with_capacity(k);
        for _ in 0..k {
            let (l, vi) = tokens.usize("face index")?;
            if vi >= nv {
                return Err(parse_err(path, l, format!("face index {vi} out of range")));
            }
            face.push(vi);
        }
        faces.push(face);
    }
    Ok(Mesh { vertices, faces })
}

pub fn read_off(path: &Path) -> Result<Mesh> {
    parse_off(path, &read_text(path)?)
}

pub fn format_off(mesh: &Mesh) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "OFF\n{} {} 0", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        let _ = writeln!(out, "{} {} {}", fmt9(v[0]), fmt9(v[1]), fmt9(v[2]));
    }
    for f in &mesh.faces {
        let idx: Vec<String> = f.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(out, "{} {}", f.len(), idx.join(" "));
    }
    out
}

pub fn write_off(path: &Path, mesh: &Mesh) -> Result<()> {
    write_text(path, &format_off(mesh))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt9_digits() {
        assert_eq!(fmt9(0.0), "0");
        assert_eq!(fmt9(1.0), "1");
        assert_eq!(fmt9(-0.5), "-0.5");
        assert_eq!(fmt9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt9(123456789.4), "123456789");
        assert_eq!(fmt9(1.5e-7), "1.5e-7");
        assert_eq!(fmt9(2.0e12), "2e12");
        assert_eq!(fmt9(-1e-12), "-1e-12");
    }

    #[test]
    fn fmt9_round_trips_to_nine_digits() {
        for x in [0.123456789123, -7.77777777777, 1e-3 / 7.0, 98765.4321987] {
            let back: f64 = fmt9(x).parse().unwrap();
            assert!(((back - x) / x).abs() < 1e-8, "{x} -> {}", fmt9(x));
        }
    }

    #[test]
    fn off_header_variants_and_errors() {
        let p = Path::new("t.off");
        let m = parse_off(p, "OFF\n# c\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(m.faces, vec![vec![0, 1, 2]]);
        let m = parse_off(p, "OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(m.vertices.len(), 3);
        match parse_off(p, "OFF\n3 1 0\n0 0 0\n1 x 0\n0 1 0\n3 0 1 2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        match parse_off(p, "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
        assert!(parse_off(p, "PLY\n").is_err());
    }

    #[test]
    fn ply_with_normals_and_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let c = PointCloud::new(vec![[0.1, 0.2, 0.3], [1.0, -2.0, 3.5]])
            .unwrap()
            .with_normals(vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
            .unwrap()
            .with_label(3);
        write_ply(&path, &c).unwrap();
        assert_eq!(read_ply(&path).unwrap(), c);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = read_xyz(Path::new("/nonexistent/abc.xyz")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/abc.xyz"));
    }
}
