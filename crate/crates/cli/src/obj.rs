//! Wavefront OBJ export of single frames, and a reader for static meshes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dymesh_core::DynamicMesh;

use crate::error::{io_err, CliError, CliResult};

/// `v` lines for frame `t` followed by 1-based `f` lines. Coordinates use
/// the shortest representation that parses back to the same `f32`.
pub fn frame_to_string(mesh: &DynamicMesh, t: usize) -> String {
    let mut s = String::with_capacity(mesh.num_vertices() * 32 + mesh.num_faces() * 16);
    for p in mesh.frame(t) {
        let _ = writeln!(s, "v {} {} {}", p[0], p[1], p[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

/// Writes `frame_0000.obj`, `frame_0001.obj`, … into `dir`.
pub fn write_frames(mesh: &DynamicMesh, dir: &Path) -> CliResult<Vec<PathBuf>> {
    (0..mesh.num_frames())
        .map(|t| {
            let path = dir.join(format!("frame_{t:04}.obj"));
            std::fs::write(&path, frame_to_string(mesh, t)).map_err(|e| io_err(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Parses vertex and face lines of an OBJ file into a one-frame mesh.
/// Polygons are fan-triangulated; texture and normal references after `/`
/// are ignored; negative indices count back from the latest vertex.
pub fn parse(text: &str) -> CliResult<DynamicMesh> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let bad = |m: &str| CliError::input(format!("OBJ line {}: {m}", lineno + 1));
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let xyz: Vec<f32> = parts
                    .take(3)
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad("bad vertex"))?;
                if xyz.len() != 3 {
                    return Err(bad("vertex needs three coordinates"));
                }
                verts.push([xyz[0], xyz[1], xyz[2]]);
            }
            Some("f") => {
                let idx: Vec<u32> = parts
                    .map(|tok| {
                        let i: i64 = tok
                            .split('/')
                            .next()
                            .unwrap_or("")
                            .parse()
                            .map_err(|_| bad("bad face index"))?;
                        let resolved = if i < 0 { verts.len() as i64 + i } else { i - 1 };
                        if resolved < 0 || resolved >= verts.len() as i64 {
                            return Err(bad("face index out of range"));
                        }
                        Ok(resolved as u32)
                    })
                    .collect::<CliResult<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face needs at least three vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    DynamicMesh::from_frames(faces, vec![verts], None).map_err(|e| CliError::from_input("OBJ", e))
}

pub fn read(path: &Path) -> CliResult<DynamicMesh> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    parse(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_then_parse_is_exact() {
        let m = DynamicMesh::from_frames(
            vec![[0, 1, 2], [0, 2, 3]],
            vec![vec![
                [0.1, -0.2, 1e-7],
                [1.0, 0.0, 0.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0, 0.333_333_34],
            ]],
            None,
        )
        .unwrap();
        let text = frame_to_string(&m, 0);
        assert!(text.contains("f 1 2 3"));
        assert_eq!(parse(&text).unwrap(), m);
    }

    #[test]
    fn quads_slashes_and_negative_indices() {
        let m =
            parse("# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 -1\n").unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2], [0, 2, 3]]);
        assert!(parse("v 0 0 0\nf 1 2 3\n").is_err());
    }
}
