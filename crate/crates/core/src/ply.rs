//! Binary little-endian PLY export and import.
//!
//! Gaussian files follow the common splatting layout: position, zeroed
//! normals, DC color coefficients, opacity logit, log-scales and a `(w, x, y, z)`
//! quaternion, all as `float`. Point clouds carry `uchar` RGB.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::geometry::Point3;
use crate::image::Rgb;

/// Zeroth-order spherical-harmonic constant relating DC coefficients to color.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const GAUSSIAN_PROPS: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
];

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln()
}

fn write_header(w: &mut impl Write, n: usize, props: &[(&str, &str)]) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {n}")?;
    for (ty, name) in props {
        writeln!(w, "property {ty} {name}")?;
    }
    writeln!(w, "end_header")
}

pub fn write_gaussian_ply(path: &Path, set: &GaussianSet) -> Result<()> {
    set.validate()?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let props: Vec<(&str, &str)> = GAUSSIAN_PROPS.iter().map(|p| ("float", *p)).collect();
    write_header(&mut w, set.len(), &props).map_err(io)?;
    for i in 0..set.len() {
        let mut row = Vec::with_capacity(17);
        row.extend(set.mu[i]);
        row.extend([0.0; 3]);
        row.extend(set.color[i].map(|c| (c - 0.5) / SH_C0));
        row.push(logit(set.opacity[i]));
        row.extend(set.scale[i].map(f64::ln));
        row.extend(set.quat[i]);
        for v in row {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

struct Header {
    count: usize,
    props: Vec<(String, String)>,
}

fn read_header(path: &Path, r: &mut impl BufRead) -> Result<Header> {
    let bad = |m: &str| Error::format(path, m);
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<()> {
        line.clear();
        let n = r.read_line(line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(bad("unexpected end of header"));
        }
        Ok(())
    };
    next(&mut line)?;
    if line.trim() != "ply" {
        return Err(bad("missing ply magic"));
    }
    let (mut count, mut props, mut format_ok) = (None, Vec::new(), false);
    loop {
        next(&mut line)?;
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", ..] => return Err(bad("only binary_little_endian 1.0 is supported")),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["element", ..] => return Err(bad("only a vertex element is supported")),
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            ["comment", ..] | [] => {}
            _ => return Err(bad(&format!("unrecognized header line {:?}", line.trim()))),
        }
    }
    if !format_ok {
        return Err(bad("missing format line"));
    }
    Ok(Header {
        count: count.ok_or_else(|| bad("missing vertex element"))?,
        props,
    })
}

pub fn read_gaussian_ply(path: &Path) -> Result<GaussianSet> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = read_header(path, &mut r)?;
    let expected: Vec<(String, String)> = GAUSSIAN_PROPS.iter().map(|p| ("float".to_string(), p.to_string())).collect();
    if header.props != expected {
        return Err(Error::format(path, "vertex properties do not match the gaussian layout"));
    }
    let mut buf = vec![0u8; header.count * 17 * 4];
    r.read_exact(&mut buf).map_err(|_| Error::format(path, "truncated vertex data"))?;
    let mut set = GaussianSet::default();
    for row in buf.chunks_exact(17 * 4) {
        let v: Vec<f64> = row.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        let q = [v[13], v[14], v[15], v[16]];
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let quat = if qn < 1e-8 { [1.0, 0.0, 0.0, 0.0] } else { q.map(|x| x / qn) };
        set.push(
            [v[0], v[1], v[2]],
            [v[6], v[7], v[8]].map(|f| (f * SH_C0 + 0.5).clamp(0.0, 1.0)),
            1.0 / (1.0 + (-v[9]).exp()),
            [v[10], v[11], v[12]].map(f64::exp),
            quat,
        );
    }
    set.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(set)
}

pub fn write_point_cloud_ply(path: &Path, points: &[Point3], colors: Option<&[Rgb]>) -> Result<()> {
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::InvalidInput(format!("{} colors for {} points", c.len(), points.len())));
        }
    }
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut props = vec![("float", "x"), ("float", "y"), ("float", "z")];
    if colors.is_some() {
        props.extend([("uchar", "red"), ("uchar", "green"), ("uchar", "blue")]);
    }
    write_header(&mut w, points.len(), &props).map_err(io)?;
    for (i, p) in points.iter().enumerate() {
        for v in p {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
        }
        if let Some(c) = colors {
            w.write_all(&c[i].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads positions (and colors when present) written by [`write_point_cloud_ply`].
pub fn read_point_cloud_ply(path: &Path) -> Result<(Vec<Point3>, Option<Vec<Rgb>>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = read_header(path, &mut r)?;
    let names: Vec<(&str, &str)> = header.props.iter().map(|(t, n)| (t.as_str(), n.as_str())).collect();
    let xyz = [("float", "x"), ("float", "y"), ("float", "z")];
    let has_color = match names.as_slice() {
        n if n == xyz => false,
        [a, b, c, ("uchar", "red"), ("uchar", "green"), ("uchar", "blue")] if [*a, *b, *c] == xyz => true,
        _ => return Err(Error::format(path, "unsupported point cloud properties")),
    };
    let stride = 12 + if has_color { 3 } else { 0 };
    let mut buf = vec![0u8; header.count * stride];
    r.read_exact(&mut buf).map_err(|_| Error::format(path, "truncated vertex data"))?;
    let mut pts = Vec::with_capacity(header.count);
    let mut cols = Vec::new();
    for row in buf.chunks_exact(stride) {
        let f = |k: usize| f32::from_le_bytes([row[4 * k], row[4 * k + 1], row[4 * k + 2], row[4 * k + 3]]) as f64;
        pts.push([f(0), f(1), f(2)]);
        if has_color {
            cols.push([row[12], row[13], row[14]].map(|b| b as f64 / 255.0));
        }
    }
    Ok((pts, has_color.then_some(cols)))
}
