//! Wavefront-style ASCII mesh interchange (v / vt / f lines).

use std::fs;
use std::path::Path;

use crate::diff::Tensor;
use crate::geometry::{GeomError, MeshTopology};
use crate::Real;

/// Write positions and topology as `v`, `vt`, and `f i/i j/j k/k` lines.
/// Float formatting uses the shortest round-tripping representation.
pub fn write_obj(
    path: &Path,
    positions: &Tensor,
    topo: &MeshTopology,
) -> Result<(), GeomError> {
    let n = topo.vertex_count();
    assert_eq!(positions.shape, &[n, 3], "positions shape");
    let mut out = String::new();
    for i in 0..n {
        out.push_str(&format!(
            "v {} {} {}\n",
            positions.at2(i, 0),
            positions.at2(i, 1),
            positions.at2(i, 2)
        ));
    }
    for uv in &topo.vertex_uvs {
        out.push_str(&format!("vt {} {}\n", uv[0], uv[1]));
    }
    for t in &topo.triangles {
        out.push_str(&format!(
            "f {}/{} {}/{} {}/{}\n",
            t[0] + 1,
            t[0] + 1,
            t[1] + 1,
            t[1] + 1,
            t[2] + 1,
            t[2] + 1
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a mesh written by [`write_obj`] (or any OBJ whose faces are
/// triangles and whose vt indices mirror the v indices).
pub fn read_obj(path: &Path) -> Result<(Tensor, MeshTopology), GeomError> {
    let text = fs::read_to_string(path)?;
    let mut pos: Vec<Real> = Vec::new();
    let mut uvs: Vec<[Real; 2]> = Vec::new();
    let mut tris: Vec<[u32; 3]> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        let mut it = line.split_whitespace();
        let parse = |s: Option<&str>, ln: usize| -> Result<Real, GeomError> {
            s.ok_or_else(|| GeomError::Parse { line: ln + 1, msg: "missing field".into() })?
                .parse::<Real>()
                .map_err(|e| GeomError::Parse { line: ln + 1, msg: e.to_string() })
        };
        match it.next() {
            Some("v") => {
                for _ in 0..3 {
                    pos.push(parse(it.next(), ln)?);
                }
            }
            Some("vt") => {
                let u = parse(it.next(), ln)?;
                let v = parse(it.next(), ln)?;
                uvs.push([u, v]);
            }
            Some("f") => {
                let mut idx = [0u32; 3];
                for slot in &mut idx {
                    let tok = it.next().ok_or_else(|| GeomError::Parse {
                        line: ln + 1,
                        msg: "face needs 3 vertices".into(),
                    })?;
                    let first = tok.split('/').next().unwrap();
                    let one_based: u32 =
                        first.parse().map_err(|_| GeomError::Parse {
                            line: ln + 1,
                            msg: format!("bad face index {tok:?}"),
                        })?;
                    if one_based == 0 {
                        return Err(GeomError::Parse {
                            line: ln + 1,
                            msg: "face indices are 1-based".into(),
                        });
                    }
                    *slot = one_based - 1;
                }
                if it.next().is_some() {
                    return Err(GeomError::Parse {
                        line: ln + 1,
                        msg: "only triangles are supported".into(),
                    });
                }
                tris.push(idx);
            }
            _ => {} // comments, blank lines, unknown directives
        }
    }
    let n = pos.len() / 3;
    if uvs.len() != n {
        return Err(GeomError::Parse {
            line: 0,
            msg: format!("{} positions but {} texture coords", n, uvs.len()),
        });
    }
    let topo = MeshTopology { vertex_uvs: uvs, triangles: tris };
    topo.validate()?;
    Ok((Tensor::new(pos, &[n, 3]), topo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_grid_topology;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn obj_round_trip_is_exact() {
        let topo = make_grid_topology(4, 5, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pos = Tensor::from_fn(&[topo.vertex_count(), 3], |_| {
            rng.gen_range(-120.0..120.0)
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.obj");
        write_obj(&path, &pos, &topo).unwrap();
        let (pos2, topo2) = read_obj(&path).unwrap();
        assert_eq!(pos.data, pos2.data);
        assert_eq!(topo.triangles, topo2.triangles);
        assert_eq!(topo.vertex_uvs, topo2.vertex_uvs);
    }

    #[test]
    fn rejects_malformed_faces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.obj");
        std::fs::write(&path, "v 0 0 0\nvt 0 0\nf 1/1 1/1\n").unwrap();
        assert!(read_obj(&path).is_err());
        std::fs::write(&path, "v 0 0 0\nvt 0 0\nf 0/0 1/1 1/1\n").unwrap();
        assert!(read_obj(&path).is_err());
    }
}
