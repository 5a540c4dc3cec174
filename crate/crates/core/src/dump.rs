//! Plain-text mesh and field dumps.
//!
//! Mesh: a header `vertices <N> triangles <M>`, then `N` lines `x y boundary_flag`,
//! then `M` lines of three zero-based vertex indices.
//!
//! Field: a header `values <N>`, then one nodal value per line in mesh vertex order.

use std::io::Write;

use nalgebra::Point2;

use crate::error::{Error, Result};
use crate::mesh::Triangulation;

pub fn write_mesh<W: Write>(mesh: &Triangulation, mut out: W) -> Result<()> {
    writeln!(
        out,
        "vertices {} triangles {}",
        mesh.num_vertices(),
        mesh.num_triangles()
    )?;
    for (p, &b) in mesh.vertices().iter().zip(mesh.boundary_flags()) {
        writeln!(out, "{} {} {}", p.x, p.y, u8::from(b))?;
    }
    for tri in mesh.triangles() {
        writeln!(out, "{} {} {}", tri[0], tri[1], tri[2])?;
    }
    Ok(())
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_count(tok: Option<&str>, line: usize, what: &str) -> Result<usize> {
    tok.ok_or_else(|| Error::parse(line, format!("missing {what} count")))?
        .parse()
        .map_err(|_| Error::parse(line, format!("bad {what} count")))
}

fn expect_end<'a>(mut toks: impl Iterator<Item = &'a str>, line: usize) -> Result<()> {
    match toks.next() {
        None => Ok(()),
        Some(t) => Err(Error::parse(line, format!("unexpected trailing token `{t}`"))),
    }
}

/// Parses a mesh dump. The triangles are validated like any other mesh.
pub fn parse_mesh(text: &str) -> Result<Triangulation> {
    let mut lines = content_lines(text);
    let (hl, header) = lines.next().ok_or_else(|| Error::parse(1, "empty mesh dump"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("vertices") {
        return Err(Error::parse(hl, "header must start with `vertices`"));
    }
    let nv = parse_count(toks.next(), hl, "vertex")?;
    if toks.next() != Some("triangles") {
        return Err(Error::parse(hl, "header must contain `triangles`"));
    }
    let nt = parse_count(toks.next(), hl, "triangle")?;
    expect_end(toks, hl)?;

    // Counts come from untrusted input; let the vectors grow as lines arrive.
    let mut vertices = Vec::new();
    let mut boundary = Vec::new();
    for _ in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| Error::parse(hl, "fewer vertex lines than declared"))?;
        let mut toks = l.split_whitespace();
        let mut coord = |name: &str| -> Result<f64> {
            let v: f64 = toks
                .next()
                .ok_or_else(|| Error::parse(ln, format!("missing {name}")))?
                .parse()
                .map_err(|_| Error::parse(ln, format!("bad {name}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(ln, format!("non-finite {name}")))
            }
        };
        let x = coord("x")?;
        let y = coord("y")?;
        let flag = match toks.next() {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(Error::parse(ln, "boundary flag must be 0 or 1")),
        };
        expect_end(toks, ln)?;
        vertices.push(Point2::new(x, y));
        boundary.push(flag);
    }
    let mut triangles = Vec::new();
    for _ in 0..nt {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| Error::parse(hl, "fewer triangle lines than declared"))?;
        let mut toks = l.split_whitespace();
        let mut tri = [0usize; 3];
        for slot in &mut tri {
            *slot = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::parse(ln, "expected three vertex indices"))?;
            if *slot >= nv {
                return Err(Error::parse(ln, format!("vertex index {slot} out of range")));
            }
        }
        expect_end(toks, ln)?;
        triangles.push(tri);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(Error::parse(ln, "trailing content after declared triangles"));
    }
    Triangulation::from_parts(vertices, triangles, boundary)
}

pub fn write_field<W: Write>(values: &[f64], mut out: W) -> Result<()> {
    writeln!(out, "values {}", values.len())?;
    for v in values {
        writeln!(out, "{v}")?;
    }
    Ok(())
}

pub fn parse_field(text: &str) -> Result<Vec<f64>> {
    let mut lines = content_lines(text);
    let (hl, header) = lines.next().ok_or_else(|| Error::parse(1, "empty field dump"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("values") {
        return Err(Error::parse(hl, "header must start with `values`"));
    }
    let n = parse_count(toks.next(), hl, "value")?;
    expect_end(toks, hl)?;
    let mut values = Vec::new();
    for (ln, l) in lines {
        let v: f64 = l
            .parse()
            .map_err(|_| Error::parse(ln, format!("bad value `{l}`")))?;
        values.push(v);
        if values.len() > n {
            return Err(Error::parse(ln, "more values than declared"));
        }
    }
    if values.len() != n {
        return Err(Error::parse(hl, format!("declared {n} values, found {}", values.len())));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_uniform_mesh;

    #[test]
    fn mesh_dump_round_trip() {
        let mesh = build_uniform_mesh(3).unwrap();
        let mut buf = Vec::new();
        write_mesh(&mesh, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("vertices 16 triangles 18\n"));
        let back = parse_mesh(&text).unwrap();
        assert_eq!(back.vertices(), mesh.vertices());
        assert_eq!(back.triangles(), mesh.triangles());
        assert_eq!(back.boundary_flags(), mesh.boundary_flags());
    }

    #[test]
    fn mesh_dump_rejects_garbage() {
        for bad in [
            "",
            "vertices 1",
            "vertices 3 triangles 1\n0 0 0\n1 0 0\n0 1 0\n0 1 3\n",
            "vertices 3 triangles 1\n0 0 0\n1 0 0\n0 1 0\n0 2 1\n",
            "vertices 3 triangles 1\n0 0 2\n1 0 0\n0 1 0\n0 1 2\n",
            "vertices 3 triangles 1\n0 0 0\n1 0 0\n0 1 0\n0 1 2\nextra\n",
            "vertices 3 triangles 1\nnan 0 0\n1 0 0\n0 1 0\n0 1 2\n",
            "vertices 99999999999 triangles 0\n",
        ] {
            assert!(parse_mesh(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn field_dump_round_trip() {
        let values = vec![0.0, -1.5, 1e-300, 3.25];
        let mut buf = Vec::new();
        write_field(&values, &mut buf).unwrap();
        assert_eq!(parse_field(std::str::from_utf8(&buf).unwrap()).unwrap(), values);
        assert!(parse_field("values 2\n1.0\n").is_err());
        assert!(parse_field("values 1\n1.0\n2.0\n").is_err());
    }
}
