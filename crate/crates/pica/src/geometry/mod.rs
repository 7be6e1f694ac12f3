//! Mesh topology, position-map conversions, differential operators, and the
//! moving-average regularization target.
//!
//! Geometry lives in two equivalent forms: a triangle mesh over a fixed UV
//! atlas, and a position map — an H×W×3 image whose texels hold surface
//! coordinates in millimeters. `sample_position_map` reads vertex positions
//! out of a map (differentiably); `mesh_to_position_map` rasterizes a mesh
//! back into UV space, which is how coarse tracking meshes enter the
//! encoder.

mod laplacian;
mod obj;

pub use laplacian::cotangent_laplacian;
pub use obj::{read_obj, write_obj};

use std::collections::VecDeque;

use crate::diff::kernels;
use crate::diff::{DiffError, Tape, Tensor, ValId};
use crate::Real;

#[derive(Debug, thiserror::Error)]
pub enum GeomError {
    #[error("bad topology: {0}")]
    Topology(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Triangle mesh over a fixed UV atlas. Positions live elsewhere (as N×3
/// tensors or as position maps); the topology never changes during training.
#[derive(Debug, Clone)]
pub struct MeshTopology {
    /// Per-vertex UV in [0,1]^2; u maps to map width, v to height.
    pub vertex_uvs: Vec<[Real; 2]>,
    pub triangles: Vec<[u32; 3]>,
}

impl MeshTopology {
    pub fn vertex_count(&self) -> usize {
        self.vertex_uvs.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let n = self.vertex_uvs.len() as u32;
        for (i, t) in self.triangles.iter().enumerate() {
            if t[0] >= n || t[1] >= n || t[2] >= n {
                return Err(GeomError::Topology(format!("triangle {i} index out of range")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(GeomError::Topology(format!("triangle {i} repeats a vertex")));
            }
        }
        for (i, uv) in self.vertex_uvs.iter().enumerate() {
            if !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]) {
                return Err(GeomError::Topology(format!("vertex {i} UV outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Vertex UVs as an N×2 coordinate tensor for bilinear sampling.
    pub fn uv_tensor(&self) -> Tensor {
        let n = self.vertex_count();
        Tensor::from_fn(&[n, 2], |i| self.vertex_uvs[i / 2][i % 2])
    }

    /// Undirected edge list, each edge once with lo < hi.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut es: Vec<(u32, u32)> = Vec::with_capacity(self.triangles.len() * 3);
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                es.push((a.min(b), a.max(b)));
            }
        }
        es.sort_unstable();
        es.dedup();
        es
    }
}

/// Regular rows×cols vertex grid spanning the UV square (inset by
/// `uv_margin` on every side), each quad split into two triangles.
pub fn make_grid_topology(rows: usize, cols: usize, uv_margin: Real) -> MeshTopology {
    assert!(rows >= 2 && cols >= 2, "grid needs at least 2x2 vertices");
    let span = 1.0 - 2.0 * uv_margin;
    let mut vertex_uvs = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let u = uv_margin + span * j as Real / (cols - 1) as Real;
            let v = uv_margin + span * i as Real / (rows - 1) as Real;
            vertex_uvs.push([u, v]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    let at = |i: usize, j: usize| (i * cols + j) as u32;
    for i in 0..rows - 1 {
        for j in 0..cols - 1 {
            triangles.push([at(i, j), at(i, j + 1), at(i + 1, j)]);
            triangles.push([at(i + 1, j), at(i, j + 1), at(i + 1, j + 1)]);
        }
    }
    MeshTopology { vertex_uvs, triangles }
}

/// Differentiable position-map sampling: vertex positions N×3 read from a
/// H×W×3 map at the topology's vertex UVs.
pub fn sample_position_map(
    t: &mut Tape,
    map: ValId,
    topo: &MeshTopology,
) -> Result<ValId, DiffError> {
    let coords = t.constant(topo.uv_tensor());
    t.bilinear_sample(map, coords)
}

/// Non-tape variant of [`sample_position_map`] for dataset plumbing.
pub fn sample_position_map_plain(map: &Tensor, topo: &MeshTopology) -> Tensor {
    kernels::bilinear_fwd(map, &topo.uv_tensor())
}

/// Rasterization of a mesh into UV space: each texel covered by a UV
/// triangle holds the barycentrically interpolated vertex position; texels
/// outside every triangle are filled from the nearest covered texel so the
/// map carries no synthetic edges. Returns the map, the pre-dilation
/// coverage mask, and the number of skipped zero-area UV triangles.
pub fn mesh_to_position_map(
    positions: &Tensor,
    topo: &MeshTopology,
    out_resolution: usize,
) -> (Tensor, Vec<bool>, usize) {
    assert_eq!(positions.shape, &[topo.vertex_count(), 3], "positions shape");
    let res = out_resolution;
    let mut map = Tensor::zeros(&[res, res, 3]);
    let mut covered = vec![false; res * res];
    let mut skipped = 0usize;

    for tri in &topo.triangles {
        let [ia, ib, ic] = tri.map(|v| v as usize);
        let a = topo.vertex_uvs[ia].map(|x| x as f64);
        let b = topo.vertex_uvs[ib].map(|x| x as f64);
        let c = topo.vertex_uvs[ic].map(|x| x as f64);
        let area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if area2.abs() < 1e-16 {
            skipped += 1;
            continue;
        }
        let lo_x = a[0].min(b[0]).min(c[0]);
        let hi_x = a[0].max(b[0]).max(c[0]);
        let lo_y = a[1].min(b[1]).min(c[1]);
        let hi_y = a[1].max(b[1]).max(c[1]);
        let x0 = ((lo_x * res as f64 - 0.5).floor().max(0.0)) as usize;
        let y0 = ((lo_y * res as f64 - 0.5).floor().max(0.0)) as usize;
        let x1 = ((hi_x * res as f64 + 0.5).ceil() as usize).min(res - 1);
        let y1 = ((hi_y * res as f64 + 0.5).ceil() as usize).min(res - 1);
        for y in y0..=y1 {
            let pv = (y as f64 + 0.5) / res as f64;
            for x in x0..=x1 {
                if covered[y * res + x] {
                    continue;
                }
                let pu = (x as f64 + 0.5) / res as f64;
                // Barycentric weights, sign-normalized by the triangle area.
                let w_a = ((b[0] - pu) * (c[1] - pv) - (b[1] - pv) * (c[0] - pu)) / area2;
                let w_b = ((c[0] - pu) * (a[1] - pv) - (c[1] - pv) * (a[0] - pu)) / area2;
                let w_c = 1.0 - w_a - w_b;
                let inside = w_a >= -1e-12 && w_b >= -1e-12 && w_c >= -1e-12;
                if !inside {
                    continue;
                }
                covered[y * res + x] = true;
                for k in 0..3 {
                    let val = w_a * positions.data[ia * 3 + k] as f64
                        + w_b * positions.data[ib * 3 + k] as f64
                        + w_c * positions.data[ic * 3 + k] as f64;
                    map.data[(y * res + x) * 3 + k] = val as Real;
                }
            }
        }
    }

    // Nearest-covered-texel dilation: multi-source BFS over 4-neighbours,
    // seeded row-major so ties resolve deterministically.
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut filled = covered.clone();
    for (i, &c) in covered.iter().enumerate() {
        if c {
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / res, i % res);
        let mut push = |ny: usize, nx: usize, map: &mut Tensor| {
            let j = ny * res + nx;
            if !filled[j] {
                filled[j] = true;
                for k in 0..3 {
                    map.data[j * 3 + k] = map.data[i * 3 + k];
                }
                queue.push_back(j);
            }
        };
        if y > 0 {
            push(y - 1, x, &mut map);
        }
        if y + 1 < res {
            push(y + 1, x, &mut map);
        }
        if x > 0 {
            push(y, x - 1, &mut map);
        }
        if x + 1 < res {
            push(y, x + 1, &mut map);
        }
    }

    (map, covered, skipped)
}

/// Forward differences of a map along x and y (last column/row zero).
/// Differentiable wrt the map.
pub fn grad_xy(t: &mut Tape, map: ValId) -> Result<(ValId, ValId), DiffError> {
    Ok((t.fwd_diff_x(map)?, t.fwd_diff_y(map)?))
}

/// Exponentially smoothed mean-mesh target for the regularizers. Updated
/// outside the tape; never receives optimizer gradients.
#[derive(Debug, Clone)]
pub struct RegularizationTarget {
    pub v_mu: Tensor,
    pub lambda: Real,
}

impl RegularizationTarget {
    pub fn new(initial: Tensor, lambda: Real) -> Self {
        Self { v_mu: initial, lambda }
    }

    /// V_mu <- (1-lambda) V_mu + lambda * mean over the batch axis of
    /// `batch_positions` (B×N×3).
    pub fn ema_update(&mut self, batch_positions: &Tensor) {
        assert_eq!(batch_positions.rank(), 3, "expected B x N x 3");
        let b = batch_positions.shape[0];
        let per = batch_positions.numel() / b;
        assert_eq!(per, self.v_mu.numel(), "vertex count mismatch");
        for i in 0..per {
            let mut m = 0.0;
            for s in 0..b {
                m += batch_positions.data[s * per + i];
            }
            m /= b as Real;
            self.v_mu.data[i] = (1.0 - self.lambda) * self.v_mu.data[i] + self.lambda * m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn smooth_positions(topo: &MeshTopology) -> Tensor {
        Tensor::from_fn(&[topo.vertex_count(), 3], |i| {
            let [u, v] = topo.vertex_uvs[i / 3];
            match i % 3 {
                0 => 0.8 * u + 0.1 * v,
                1 => 0.9 * v - 0.2 * u,
                _ => 0.3 * u * u + 0.2 * v * v - 0.15 * u * v,
            }
        })
    }

    #[test]
    fn grid_topology_counts_and_euler() {
        let g = make_grid_topology(2, 2, 0.0);
        assert_eq!(g.vertex_count(), 4);
        assert_eq!(g.triangle_count(), 2);
        g.validate().unwrap();

        let g = make_grid_topology(255, 255, 0.0);
        assert_eq!(g.vertex_count(), 65025);

        let g = make_grid_topology(7, 5, 0.02);
        g.validate().unwrap();
        let v = g.vertex_count() as i64;
        let e = g.edges().len() as i64;
        let f = g.triangle_count() as i64;
        assert_eq!(v - e + f, 1, "open-disk Euler characteristic");
    }

    #[test]
    fn grid_is_watertight_in_uv() {
        let g = make_grid_topology(9, 9, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let pu: f64 = rng.gen_range(0.001..0.999);
            let pv: f64 = rng.gen_range(0.001..0.999);
            let mut hits = 0;
            for tri in &g.triangles {
                let a = g.vertex_uvs[tri[0] as usize].map(|x| x as f64);
                let b = g.vertex_uvs[tri[1] as usize].map(|x| x as f64);
                let c = g.vertex_uvs[tri[2] as usize].map(|x| x as f64);
                let area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
                let w_a = ((b[0] - pu) * (c[1] - pv) - (b[1] - pv) * (c[0] - pu)) / area2;
                let w_b = ((c[0] - pu) * (a[1] - pv) - (c[1] - pv) * (a[0] - pu)) / area2;
                let w_c = 1.0 - w_a - w_b;
                if w_a >= 0.0 && w_b >= 0.0 && w_c >= 0.0 {
                    hits += 1;
                }
            }
            assert_eq!(hits, 1, "point ({pu},{pv}) covered {hits} times");
        }
    }

    #[test]
    fn sampling_matches_bilinear_oracle_and_texel_centers() {
        // Vertex UV at a texel center reads the texel exactly.
        let map = Tensor::from_fn(&[4, 4, 3], |i| (i as Real) * 0.01 - 0.2);
        let topo = MeshTopology {
            vertex_uvs: vec![[(1.0 + 0.5) / 4.0, (2.0 + 0.5) / 4.0]],
            triangles: vec![],
        };
        let got = sample_position_map_plain(&map, &topo);
        for k in 0..3 {
            assert_eq!(got.data[k], map.at3(2, 1, k));
        }

        // Constant map: every vertex reads the constant.
        let cmap = Tensor::full(&[5, 5, 3], 0.37);
        let grid = make_grid_topology(6, 6, 0.0);
        let got = sample_position_map_plain(&cmap, &grid);
        assert!(got.data.iter().all(|&v| (v - 0.37).abs() < 1e-6));

        // Random map vs a direct per-vertex bilinear oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = Tensor::from_fn(&[6, 7, 3], |_| rng.gen_range(-1.0..1.0));
        let grid = make_grid_topology(5, 4, 0.03);
        let got = sample_position_map_plain(&map, &grid);
        let (h, w) = (6usize, 7usize);
        for (vi, uv) in grid.vertex_uvs.iter().enumerate() {
            let x = (uv[0] * w as Real - 0.5).clamp(0.0, (w - 1) as Real);
            let y = (uv[1] * h as Real - 0.5).clamp(0.0, (h - 1) as Real);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (x - x0 as Real, y - y0 as Real);
            for k in 0..3 {
                let v00 = map.at3(y0, x0, k);
                let v01 = map.at3(y0, x1, k);
                let v10 = map.at3(y1, x0, k);
                let v11 = map.at3(y1, x1, k);
                let want = v00 * (1.0 - fx) * (1.0 - fy)
                    + v01 * fx * (1.0 - fy)
                    + v10 * (1.0 - fx) * fy
                    + v11 * fx * fy;
                assert!((got.at2(vi, k) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn planar_mesh_rasterizes_to_its_own_uv_field() {
        let grid = make_grid_topology(9, 9, 0.0);
        let pos = Tensor::from_fn(&[grid.vertex_count(), 3], |i| {
            let [u, v] = grid.vertex_uvs[i / 3];
            [u, v, 0.0][i % 3]
        });
        let res = 32;
        let (map, covered, skipped) = mesh_to_position_map(&pos, &grid, res);
        assert_eq!(skipped, 0);
        assert!(covered.iter().all(|&c| c), "full-square grid covers all texel centers");
        let half_texel = 0.5 / res as Real;
        for y in 0..res {
            for x in 0..res {
                let u = (x as Real + 0.5) / res as Real;
                let v = (y as Real + 0.5) / res as Real;
                assert!((map.at3(y, x, 0) - u).abs() <= half_texel);
                assert!((map.at3(y, x, 1) - v).abs() <= half_texel);
                assert!(map.at3(y, x, 2).abs() <= half_texel);
            }
        }
    }

    #[test]
    fn constant_position_triangle_fills_whole_map() {
        let topo = MeshTopology {
            vertex_uvs: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            triangles: vec![[0, 1, 2]],
        };
        let pos = Tensor::full(&[3, 3], 5.5);
        let (map, covered, _) = mesh_to_position_map(&pos, &topo, 16);
        assert!(covered.iter().any(|&c| c));
        assert!(!covered.iter().all(|&c| c), "outside the triangle comes from dilation");
        assert!(map.data.iter().all(|&v| (v - 5.5).abs() < 1e-6));
    }

    #[test]
    fn position_map_round_trip_recovers_interior_vertices() {
        let (rows, cols) = (17, 17);
        let grid = make_grid_topology(rows, cols, 0.0);
        let pos = smooth_positions(&grid);
        let (map, _, _) = mesh_to_position_map(&pos, &grid, 64);
        let back = sample_position_map_plain(&map, &grid);
        let extent = pos.max_abs();
        for i in 1..rows - 1 {
            for j in 1..cols - 1 {
                let v = i * cols + j;
                for k in 0..3 {
                    let err = (back.at2(v, k) - pos.at2(v, k)).abs();
                    assert!(
                        err < 1e-3 * extent.max(1.0),
                        "vertex {v} coord {k}: err {err}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_area_uv_triangle_is_skipped_and_counted() {
        let topo = MeshTopology {
            vertex_uvs: vec![[0.1, 0.1], [0.9, 0.1], [0.5, 0.1], [0.5, 0.9]],
            triangles: vec![[0, 1, 2], [0, 1, 3]],
        };
        let pos = Tensor::full(&[4, 3], 1.0);
        let (_, _, skipped) = mesh_to_position_map(&pos, &topo, 8);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn grad_xy_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Tensor::from_fn(&[5, 6, 2], |_| rng.gen_range(-1.0..1.0));
        let mut t = Tape::new();
        let id = t.constant(m.clone());
        let (dx, dy) = grad_xy(&mut t, id).unwrap();
        let (dx, dy) = (t.value(dx).clone(), t.value(dy).clone());
        for y in 0..5 {
            for x in 0..6 {
                for k in 0..2 {
                    let ex = if x + 1 < 6 { m.at3(y, x + 1, k) - m.at3(y, x, k) } else { 0.0 };
                    let ey = if y + 1 < 5 { m.at3(y + 1, x, k) - m.at3(y, x, k) } else { 0.0 };
                    assert!((dx.at3(y, x, k) - ex).abs() < 1e-6);
                    assert!((dy.at3(y, x, k) - ey).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn ema_update_arithmetic_and_fixed_point() {
        let mut tgt = RegularizationTarget::new(Tensor::full(&[2, 3], 1.0), 1e-4);
        tgt.ema_update(&Tensor::full(&[4, 2, 3], 2.0));
        assert!(tgt.v_mu.data.iter().all(|&v| (v - 1.0001).abs() < 1e-6));

        let mut tgt = RegularizationTarget::new(Tensor::full(&[2, 3], 0.7), 0.3);
        tgt.ema_update(&Tensor::full(&[2, 2, 3], 0.7));
        assert!(tgt.v_mu.data.iter().all(|&v| (v - 0.7).abs() < 1e-7));
    }

    #[test]
    fn ema_update_two_steps_match_recurrence_and_stay_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v0 = Tensor::from_fn(&[3, 3], |_| rng.gen_range(-1.0..1.0));
        let b1 = Tensor::from_fn(&[2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let b2 = Tensor::from_fn(&[2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let lam = 0.2;
        let mut tgt = RegularizationTarget::new(v0.clone(), lam);
        tgt.ema_update(&b1);
        // Convexity after the first step.
        for i in 0..9 {
            let m = 0.5 * (b1.data[i] + b1.data[i + 9]);
            let (lo, hi) = (v0.data[i].min(m), v0.data[i].max(m));
            assert!(tgt.v_mu.data[i] >= lo - 1e-6 && tgt.v_mu.data[i] <= hi + 1e-6);
        }
        tgt.ema_update(&b2);
        for i in 0..9 {
            let m1 = 0.5 * (b1.data[i] + b1.data[i + 9]);
            let m2 = 0.5 * (b2.data[i] + b2.data[i + 9]);
            let want = (1.0 - lam) * ((1.0 - lam) * v0.data[i] + lam * m1) + lam * m2;
            assert!((tgt.v_mu.data[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn sample_position_map_is_differentiable_wrt_map() {
        let grid = make_grid_topology(3, 3, 0.1);
        let mut t = Tape::new();
        let map = t.leaf(Tensor::from_fn(&[4, 4, 3], |i| 0.05 * i as Real));
        let verts = sample_position_map(&mut t, map, &grid).unwrap();
        assert_eq!(t.shape(verts), &[9, 3]);
        let loss = t.sum(verts);
        let g = t.backward(loss).take(map).unwrap();
        // Interpolation weights per channel sum to the vertex count.
        let total: Real = g.data.iter().sum();
        assert!((total - 27.0).abs() < 1e-4);
    }
}
