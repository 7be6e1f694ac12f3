//! Deterministic software rasterizer and G-buffer.
//!
//! Screen coordinates snap to 1/256-pixel fixed point and coverage is
//! decided by exact integer edge functions with the top-left fill rule, so
//! results are bit-identical regardless of parallelism and adjacent
//! triangles never both claim a shared-edge pixel. Depth ties between
//! non-adjacent triangles resolve to the lower triangle id. Triangles with
//! any vertex on or behind the 1 mm near plane — or projecting absurdly far
//! off screen — are discarded whole rather than clipped.

mod camera;

pub use camera::{Camera, Mat3d, Vec3d, NEAR_MM};

use std::path::Path;
use std::sync::Arc;

use crate::diff::{DiffError, Tape, Tensor, ValId};
use crate::exec;
use crate::geometry::MeshTopology;
use crate::Real;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("bad camera: {0}")]
    BadCamera(String),
}

const SUBPIX: f64 = 256.0;
/// Beyond this many pixels off screen a projected vertex is treated as
/// unusable (prevents fixed-point overflow on grazing projections).
const MAX_SCREEN: f64 = 1.0e6;
const BAND_ROWS: usize = 16;

/// One G-buffer pixel. `bary` indexes the owning triangle's vertices in
/// topology order and sums to 1 on covered pixels; uncovered pixels keep
/// infinite depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelRecord {
    pub covered: bool,
    pub triangle_id: u32,
    pub bary: [Real; 3],
    pub uv: [Real; 2],
    pub xyz: [Real; 3],
    pub depth: Real,
}

impl Default for PixelRecord {
    fn default() -> Self {
        PixelRecord {
            covered: false,
            triangle_id: u32::MAX,
            bary: [0.0; 3],
            uv: [0.0; 2],
            xyz: [0.0; 3],
            depth: Real::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub px: Vec<PixelRecord>,
}

impl GBuffer {
    pub fn at(&self, x: usize, y: usize) -> &PixelRecord {
        &self.px[y * self.width + x]
    }

    pub fn covered_count(&self) -> usize {
        self.px.iter().filter(|p| p.covered).count()
    }

    pub fn coverage(&self) -> Vec<bool> {
        self.px.iter().map(|p| p.covered).collect()
    }

    /// Depth as an H×W×1 tensor; uncovered pixels get `fill` (use 0 for
    /// tape inputs, infinity for sentinel exports).
    pub fn depth_tensor(&self, fill: Real) -> Tensor {
        Tensor::from_fn(&[self.height, self.width, 1], |i| {
            if self.px[i].covered {
                self.px[i].depth
            } else {
                fill
            }
        })
    }
}

struct PreparedTri {
    id: u32,
    /// Snapped screen coordinates, winding-normalized to positive area.
    sx: [i64; 3],
    sy: [i64; 3],
    /// Camera-space depths in the same winding order.
    z: [f64; 3],
    /// Maps winding order back to topology vertex order.
    order: [usize; 3],
    area2: i64,
    /// Pixel bounding box (inclusive).
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

#[inline]
fn edge(ax: i64, ay: i64, bx: i64, by: i64, px: i64, py: i64) -> i64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

/// Top-left rule for a boundary pixel on directed edge (dx,dy), with y
/// down and interior on the positive side.
#[inline]
fn boundary_owned(dx: i64, dy: i64) -> bool {
    dy < 0 || (dy == 0 && dx > 0)
}

/// Rasterize a mesh into a G-buffer: nearest camera-space depth wins,
/// barycentrics/uv/xyz are perspective-correct, coverage follows exact
/// integer edge tests at pixel centers.
pub fn rasterize(vertices: &Tensor, topo: &MeshTopology, cam: &Camera) -> GBuffer {
    let n = topo.vertex_count();
    assert_eq!(vertices.shape, &[n, 3], "vertex positions shape");
    let (w, h) = (cam.width, cam.height);

    // Project every vertex once.
    let mut proj: Vec<Option<(f64, f64, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let p = [
            vertices.data[i * 3] as f64,
            vertices.data[i * 3 + 1] as f64,
            vertices.data[i * 3 + 2] as f64,
        ];
        let pr = cam.project(p).filter(|&(sx, sy, _)| {
            sx.abs() <= MAX_SCREEN && sy.abs() <= MAX_SCREEN
        });
        proj.push(pr);
    }

    let mut tris: Vec<PreparedTri> = Vec::new();
    for (tid, tri) in topo.triangles.iter().enumerate() {
        let (Some(p0), Some(p1), Some(p2)) = (
            proj[tri[0] as usize],
            proj[tri[1] as usize],
            proj[tri[2] as usize],
        ) else {
            continue;
        };
        let snap = |v: f64| (v * SUBPIX).round() as i64;
        let pts = [p0, p1, p2];
        let sx0 = [snap(p0.0), snap(p1.0), snap(p2.0)];
        let sy0 = [snap(p0.1), snap(p1.1), snap(p2.1)];
        let area2 = edge(sx0[0], sy0[0], sx0[1], sy0[1], sx0[2], sy0[2]);
        if area2 == 0 {
            continue;
        }
        let order: [usize; 3] = if area2 > 0 { [0, 1, 2] } else { [0, 2, 1] };
        let sx = order.map(|o| sx0[o]);
        let sy = order.map(|o| sy0[o]);
        let z = order.map(|o| pts[o].2);
        let area2 = area2.abs();

        let fx_lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let fx_hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let fy_lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let fy_hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if fx_hi < 0.0 || fy_hi < 0.0 || fx_lo > w as f64 || fy_lo > h as f64 {
            continue;
        }
        let x0 = (fx_lo - 1.0).max(0.0) as usize;
        let y0 = (fy_lo - 1.0).max(0.0) as usize;
        let x1 = ((fx_hi + 1.0) as usize).min(w - 1);
        let y1 = ((fy_hi + 1.0) as usize).min(h - 1);
        tris.push(PreparedTri { id: tid as u32, sx, sy, z, order, area2, x0, x1, y0, y1 });
    }

    // Bin triangles into row bands, then fill bands independently.
    let bands = h.div_ceil(BAND_ROWS);
    let mut binned: Vec<Vec<u32>> = vec![Vec::new(); bands];
    for (i, t) in tris.iter().enumerate() {
        for b in (t.y0 / BAND_ROWS)..=(t.y1 / BAND_ROWS) {
            binned[b].push(i as u32);
        }
    }

    let mut px = vec![PixelRecord::default(); w * h];
    exec::for_each_chunk_mut(&mut px, BAND_ROWS * w, |band, slice| {
        let row_base = band * BAND_ROWS;
        for &ti in &binned[band] {
            let t = &tris[ti as usize];
            let tri = &topo.triangles[t.id as usize];
            let ylo = t.y0.max(row_base);
            let yhi = t.y1.min(row_base + BAND_ROWS - 1).min(h - 1);
            for y in ylo..=yhi {
                let py = y as i64 * SUBPIX as i64 + (SUBPIX as i64) / 2;
                for x in t.x0..=t.x1 {
                    let pxc = x as i64 * SUBPIX as i64 + (SUBPIX as i64) / 2;
                    let e0 = edge(t.sx[1], t.sy[1], t.sx[2], t.sy[2], pxc, py);
                    let e1 = edge(t.sx[2], t.sy[2], t.sx[0], t.sy[0], pxc, py);
                    let e2 = edge(t.sx[0], t.sy[0], t.sx[1], t.sy[1], pxc, py);
                    let own = |e: i64, a: usize, b: usize| {
                        e > 0
                            || (e == 0
                                && boundary_owned(t.sx[b] - t.sx[a], t.sy[b] - t.sy[a]))
                    };
                    if !(own(e0, 1, 2) && own(e1, 2, 0) && own(e2, 0, 1)) {
                        continue;
                    }
                    let l0 = e0 as f64 / t.area2 as f64;
                    let l1 = e1 as f64 / t.area2 as f64;
                    let l2 = e2 as f64 / t.area2 as f64;
                    let w0 = l0 / t.z[0];
                    let w1 = l1 / t.z[1];
                    let w2 = l2 / t.z[2];
                    let depth = 1.0 / (w0 + w1 + w2);
                    let d = depth as Real;
                    let rec = &mut slice[(y - row_base) * w + x];
                    if d < rec.depth || (d == rec.depth && t.id < rec.triangle_id) {
                        let b = [w0 * depth, w1 * depth, w2 * depth];
                        let mut bary = [0.0 as Real; 3];
                        let mut uv = [0.0f64; 2];
                        let mut xyz = [0.0f64; 3];
                        for j in 0..3 {
                            let vid = tri[t.order[j]] as usize;
                            bary[t.order[j]] = b[j] as Real;
                            for k in 0..2 {
                                uv[k] += b[j] * topo.vertex_uvs[vid][k] as f64;
                            }
                            for k in 0..3 {
                                xyz[k] += b[j] * vertices.data[vid * 3 + k] as f64;
                            }
                        }
                        *rec = PixelRecord {
                            covered: true,
                            triangle_id: t.id,
                            bary,
                            uv: uv.map(|v| v as Real),
                            xyz: xyz.map(|v| v as Real),
                            depth: d,
                        };
                    }
                }
            }
        }
    });

    GBuffer { width: w, height: h, px }
}

/// Screen-space normals from a depth map. Unprojects each pixel and its +x
/// and +y neighbours, crosses the tangents, and orients every normal
/// toward the camera (n_z < 0). Pixels whose neighbourhood leaves the
/// covered set (or the viewport) are masked out and zero-filled.
pub fn normals_from_depth(
    depth: &Tensor,
    covered: &[bool],
    cam: &Camera,
) -> (Tensor, Vec<bool>) {
    let (h, w) = (cam.height, cam.width);
    assert_eq!(depth.shape, &[h, w, 1], "depth shape");
    assert_eq!(covered.len(), h * w);
    let mut out = Tensor::zeros(&[h, w, 3]);
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 >= w || y + 1 >= h {
                continue;
            }
            if !(covered[i] && covered[i + 1] && covered[i + w]) {
                continue;
            }
            let zc = depth.data[i] as f64;
            let zr = depth.data[i + 1] as f64;
            let zd = depth.data[i + w] as f64;
            let pc = cam.unproject_cam(x as f64 + 0.5, y as f64 + 0.5, zc);
            let pr = cam.unproject_cam(x as f64 + 1.5, y as f64 + 0.5, zr);
            let pd = cam.unproject_cam(x as f64 + 0.5, y as f64 + 1.5, zd);
            let tr = [pr[0] - pc[0], pr[1] - pc[1], pr[2] - pc[2]];
            let td = [pd[0] - pc[0], pd[1] - pc[1], pd[2] - pc[2]];
            let mut n = [
                tr[1] * td[2] - tr[2] * td[1],
                tr[2] * td[0] - tr[0] * td[2],
                tr[0] * td[1] - tr[1] * td[0],
            ];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len == 0.0 {
                continue;
            }
            let s = if n[2] > 0.0 { -1.0 } else { 1.0 };
            for k in 0..3 {
                n[k] *= s / len;
            }
            valid[i] = true;
            for k in 0..3 {
                out.data[i * 3 + k] = n[k] as Real;
            }
        }
    }
    (out, valid)
}

/// Tape composition of [`normals_from_depth`]: camera point = const ray
/// direction × depth, tangents by forward differences, cross, normalize,
/// per-pixel orientation applied as a constant sign read off the forward
/// values. Differentiable wrt the depth map; apply the returned mask in
/// the loss.
pub fn normals_from_depth_tape(
    t: &mut Tape,
    depth: ValId,
    cam: &Camera,
    covered: &[bool],
) -> Result<(ValId, Vec<bool>), DiffError> {
    let (h, w) = (cam.height, cam.width);
    let dirs = t.constant(cam.ray_dirs_tensor());
    let d3 = t.concat(&[depth, depth, depth], 2)?;
    let p = t.mul(d3, dirs)?;
    let tx = t.fwd_diff_x(p)?;
    let ty = t.fwd_diff_y(p)?;
    let txr = t.reshape(tx, &[h * w, 3])?;
    let tyr = t.reshape(ty, &[h * w, 3])?;
    let cr = t.cross3(txr, tyr)?;
    // Orientation and validity, both constants of the forward pass.
    let cross_vals = t.value(cr).clone();
    let mut valid = vec![false; h * w];
    let sign = Tensor::from_fn(&[h * w, 3], |i| {
        let pix = i / 3;
        let (y, x) = (pix / w, pix % w);
        let interior = x + 1 < w
            && y + 1 < h
            && covered[pix]
            && covered[pix + 1]
            && covered[pix + w];
        if interior && i % 3 == 0 {
            valid[pix] = cross_vals.data[pix * 3 + 2] != 0.0;
        }
        if cross_vals.data[pix * 3 + 2] > 0.0 {
            -1.0
        } else {
            1.0
        }
    });
    let sign = t.constant(sign);
    let oriented = t.mul(cr, sign)?;
    let n = t.normalize3(oriented, 1e-12)?;
    let n = t.reshape(n, &[h, w, 3])?;
    Ok((n, valid))
}

/// Per-pixel inputs for the covered set, extracted once per frame. The
/// interpolated uv/xyz/barycentrics enter the decoder as constants, so no
/// image-loss gradient can reach vertex positions through them; depth
/// re-enters the tape separately via the face indices and weights.
#[derive(Debug, Clone)]
pub struct CoveredPixels {
    /// Linear pixel index (y*width + x) per covered pixel.
    pub pixel_indices: Arc<Vec<u32>>,
    /// Owning triangle's vertex ids per covered pixel.
    pub faces: Arc<Vec<[u32; 3]>>,
    /// Barycentric weights matching `faces` order.
    pub bary: Arc<Vec<[Real; 3]>>,
    /// P×2 interpolated surface UVs.
    pub uv: Tensor,
    /// P×3 interpolated face-centric positions (mm).
    pub xyz: Tensor,
}

impl CoveredPixels {
    pub fn len(&self) -> usize {
        self.pixel_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_indices.is_empty()
    }
}

pub fn collect_covered(gb: &GBuffer, topo: &MeshTopology) -> CoveredPixels {
    let mut idx = Vec::new();
    let mut faces = Vec::new();
    let mut bary = Vec::new();
    let mut uv = Vec::new();
    let mut xyz = Vec::new();
    for (i, p) in gb.px.iter().enumerate() {
        if !p.covered {
            continue;
        }
        idx.push(i as u32);
        faces.push(topo.triangles[p.triangle_id as usize]);
        bary.push(p.bary);
        uv.extend_from_slice(&p.uv);
        xyz.extend_from_slice(&p.xyz);
    }
    let np = idx.len();
    CoveredPixels {
        pixel_indices: Arc::new(idx),
        faces: Arc::new(faces),
        bary: Arc::new(bary),
        uv: Tensor::new(uv, &[np, 2]),
        xyz: Tensor::new(xyz, &[np, 3]),
    }
}

/// Depth channel as an 8-bit grayscale PNG (near = bright); uncovered black.
pub fn dump_depth_png(gb: &GBuffer, path: &Path) -> Result<(), image::ImageError> {
    let (mut lo, mut hi) = (Real::INFINITY, Real::NEG_INFINITY);
    for p in &gb.px {
        if p.covered {
            lo = lo.min(p.depth);
            hi = hi.max(p.depth);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = image::GrayImage::from_fn(gb.width as u32, gb.height as u32, |x, y| {
        let p = gb.at(x as usize, y as usize);
        if p.covered {
            let v = 255.0 - 205.0 * ((p.depth - lo) / span);
            image::Luma([v.clamp(0.0, 255.0) as u8])
        } else {
            image::Luma([0u8])
        }
    });
    img.save(path)
}

/// Coverage as a binary black/white PNG.
pub fn dump_coverage_png(gb: &GBuffer, path: &Path) -> Result<(), image::ImageError> {
    let img = image::GrayImage::from_fn(gb.width as u32, gb.height as u32, |x, y| {
        image::Luma([if gb.at(x as usize, y as usize).covered { 255u8 } else { 0 }])
    });
    img.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_grid_topology;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn test_cam(w: usize, h: usize) -> Camera {
        Camera::new(
            [[200.0, 0.0, w as f64 / 2.0], [0.0, 200.0, h as f64 / 2.0], [0.0, 0.0, 1.0]],
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, 0.0],
            w,
            h,
        )
        .unwrap()
    }

    /// Triangle big enough to cover the whole viewport at depth z.
    fn full_cover_tri(cam: &Camera, z: f64) -> (Tensor, MeshTopology) {
        let lim = (cam.width.max(cam.height) as f64) * z / 200.0;
        let pos = Tensor::new(
            vec![
                (-3.0 * lim) as Real,
                (-3.0 * lim) as Real,
                z as Real,
                (3.0 * lim) as Real,
                0.0,
                z as Real,
                0.0,
                (3.0 * lim) as Real,
                z as Real,
            ],
            &[3, 3],
        );
        let topo = MeshTopology {
            vertex_uvs: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            triangles: vec![[0, 1, 2]],
        };
        (pos, topo)
    }

    #[test]
    fn full_viewport_triangle_constant_depth() {
        let cam = test_cam(4, 4);
        let (pos, topo) = full_cover_tri(&cam, 500.0);
        let gb = rasterize(&pos, &topo, &cam);
        assert_eq!(gb.covered_count(), 16);
        for p in &gb.px {
            assert!((p.depth - 500.0).abs() < 0.01);
            let s: Real = p.bary.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(p.bary.iter().all(|&b| b >= -1e-6));
        }
    }

    #[test]
    fn coverage_matches_integer_halfplane_oracle() {
        let cam = test_cam(32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut pos = Vec::new();
            for _ in 0..3 {
                pos.push(rng.gen_range(-60.0..60.0));
                pos.push(rng.gen_range(-60.0..60.0));
                pos.push(rng.gen_range(380.0..620.0));
            }
            let pos = Tensor::new(pos, &[3, 3]);
            let topo = MeshTopology {
                vertex_uvs: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
                triangles: vec![[0, 1, 2]],
            };
            let gb = rasterize(&pos, &topo, &cam);

            // Independent snapped projection.
            let mut s = [[0i64; 2]; 3];
            for v in 0..3 {
                let p = [
                    pos.data[v * 3] as f64,
                    pos.data[v * 3 + 1] as f64,
                    pos.data[v * 3 + 2] as f64,
                ];
                let (sx, sy, _) = cam.project(p).unwrap();
                s[v] = [(sx * 256.0).round() as i64, (sy * 256.0).round() as i64];
            }
            let ef = |a: [i64; 2], b: [i64; 2], px: i64, py: i64| {
                (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
            };
            let area2 = ef(s[0], s[1], s[2][0], s[2][1]);
            if area2 == 0 {
                assert_eq!(gb.covered_count(), 0);
                continue;
            }
            let sgn = if area2 > 0 { 1 } else { -1 };
            for y in 0..32usize {
                for x in 0..32usize {
                    let (px, py) = (x as i64 * 256 + 128, y as i64 * 256 + 128);
                    let e0 = sgn as i64 * ef(s[1], s[2], px, py);
                    let e1 = sgn as i64 * ef(s[2], s[0], px, py);
                    let e2 = sgn as i64 * ef(s[0], s[1], px, py);
                    let strict = e0 > 0 && e1 > 0 && e2 > 0;
                    let closed = e0 >= 0 && e1 >= 0 && e2 >= 0;
                    let got = gb.at(x, y).covered;
                    if strict {
                        assert!(got, "strict-interior pixel ({x},{y}) uncovered");
                    }
                    if !closed {
                        assert!(!got, "exterior pixel ({x},{y}) covered");
                    }
                }
            }
        }
    }

    #[test]
    fn nearer_triangle_wins_overlap() {
        let cam = test_cam(16, 16);
        let (mut pos, _) = full_cover_tri(&cam, 400.0);
        let (pos2, _) = full_cover_tri(&cam, 600.0);
        pos.data.extend_from_slice(&pos2.data);
        pos.shape = vec![6, 3];
        let topo = MeshTopology {
            vertex_uvs: vec![
                [0.0, 0.0],
                [1.0, 0.0],
                [0.0, 1.0],
                [0.0, 0.0],
                [1.0, 0.0],
                [0.0, 1.0],
            ],
            triangles: vec![[3, 4, 5], [0, 1, 2]], // far one listed first
        };
        let gb = rasterize(&pos, &topo, &cam);
        assert_eq!(gb.covered_count(), 256);
        for p in &gb.px {
            assert_eq!(p.triangle_id, 1, "nearer triangle must own the pixel");
            assert!((p.depth - 400.0).abs() < 0.01);
        }
    }

    #[test]
    fn shared_edge_pixels_claimed_exactly_once() {
        let cam = test_cam(96, 96);
        // Quad corners unprojected from exact pixel centers at z=500 so the
        // diagonal passes exactly through many pixel centers.
        let z = 500.0;
        let c: Vec<Vec3d> = [
            (16.5, 16.5),
            (80.5, 16.5),
            (16.5, 80.5),
            (80.5, 80.5),
        ]
        .iter()
        .map(|&(x, y)| cam.unproject(x, y, z))
        .collect();
        let pos = Tensor::from_fn(&[4, 3], |i| c[i / 3][i % 3] as Real);
        let uvs = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let t1 = MeshTopology {
            vertex_uvs: uvs.clone(),
            triangles: vec![[0, 1, 2]],
        };
        let t2 = MeshTopology {
            vertex_uvs: uvs.clone(),
            triangles: vec![[2, 1, 3]],
        };
        let both = MeshTopology {
            vertex_uvs: uvs,
            triangles: vec![[0, 1, 2], [2, 1, 3]],
        };
        let g1 = rasterize(&pos, &t1, &cam);
        let g2 = rasterize(&pos, &t2, &cam);
        let gb = rasterize(&pos, &both, &cam);
        let mut on_edge = 0;
        for i in 0..96 * 96 {
            let (a, b) = (g1.px[i].covered, g2.px[i].covered);
            assert!(!(a && b), "pixel {i} claimed by both triangles");
            assert_eq!(a || b, gb.px[i].covered, "partition must equal union");
            // Diagonal from (80.5,16.5) to (16.5,80.5): x+y = 97.
            let (y, x) = (i / 96, i % 96);
            if x + y == 97 && gb.px[i].covered {
                on_edge += 1;
            }
        }
        assert!(on_edge > 30, "fixture must actually exercise edge pixels");
    }

    #[test]
    fn deterministic_across_execution_modes() {
        let cam = test_cam(64, 64);
        let grid = make_grid_topology(17, 17, 0.0);
        let pos = Tensor::from_fn(&[grid.vertex_count(), 3], |i| {
            let [u, v] = grid.vertex_uvs[i / 3];
            match i % 3 {
                0 => (u as Real - 0.5) * 120.0,
                1 => (v as Real - 0.5) * 120.0,
                _ => 480.0 + 25.0 * ((6.0 * u).sin() * (5.0 * v).cos()) as Real,
            }
        });
        let was = crate::exec::set_sequential(true);
        let a = rasterize(&pos, &grid, &cam);
        crate::exec::set_sequential(false);
        let b = rasterize(&pos, &grid, &cam);
        crate::exec::set_sequential(was);
        assert_eq!(a, b);
    }

    #[test]
    fn perspective_correct_attribute_interpolation() {
        let cam = test_cam(64, 64);
        // Triangle strongly tilted in depth.
        let pos = Tensor::new(
            vec![
                -60.0, -50.0, 420.0, //
                70.0, -20.0, 560.0, //
                -20.0, 65.0, 470.0,
            ],
            &[3, 3],
        );
        let topo = MeshTopology {
            vertex_uvs: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            triangles: vec![[0, 1, 2]],
        };
        let gb = rasterize(&pos, &topo, &cam);
        assert!(gb.covered_count() > 400);
        let v = [
            [-60.0, -50.0, 420.0],
            [70.0, -20.0, 560.0],
            [-20.0, 65.0, 470.0],
        ];
        for y in 0..64 {
            for x in 0..64 {
                let p = gb.at(x, y);
                if !p.covered {
                    continue;
                }
                // Analytic ray-triangle intersection at the pixel center.
                let d = cam.unproject_cam(x as f64 + 0.5, y as f64 + 0.5, 1.0);
                let e1 = [v[1][0] - v[0][0], v[1][1] - v[0][1], v[1][2] - v[0][2]];
                let e2 = [v[2][0] - v[0][0], v[2][1] - v[0][1], v[2][2] - v[0][2]];
                let cr = |a: [f64; 3], b: [f64; 3]| {
                    [
                        a[1] * b[2] - a[2] * b[1],
                        a[2] * b[0] - a[0] * b[2],
                        a[0] * b[1] - a[1] * b[0],
                    ]
                };
                let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
                let pvec = cr(d, e2);
                let det = dot(e1, pvec);
                let tvec = [-v[0][0], -v[0][1], -v[0][2]];
                let u = dot(tvec, pvec) / det;
                let qvec = cr(tvec, e1);
                let w_ = dot(d, qvec) / det;
                let hit = [
                    v[0][0] + u * e1[0] + w_ * e2[0],
                    v[0][1] + u * e1[1] + w_ * e2[1],
                    v[0][2] + u * e1[2] + w_ * e2[2],
                ];
                let scale = hit[2].abs().max(1.0);
                for k in 0..3 {
                    let err = (p.xyz[k] as f64 - hit[k]).abs() / scale;
                    assert!(err < 1e-4, "pixel ({x},{y}) coord {k}: {err}");
                }
            }
        }
    }

    #[test]
    fn coverage_monotone_under_distance() {
        let cam = test_cam(64, 64);
        let grid = make_grid_topology(9, 9, 0.0);
        let mut last = usize::MAX;
        for dist in [420.0, 500.0, 620.0, 800.0] {
            let pos = Tensor::from_fn(&[grid.vertex_count(), 3], |i| {
                let [u, v] = grid.vertex_uvs[i / 3];
                match i % 3 {
                    0 => (u as Real - 0.5) * 100.0,
                    1 => (v as Real - 0.5) * 100.0,
                    _ => dist as Real,
                }
            });
            let gb = rasterize(&pos, &grid, &cam);
            let c = gb.covered_count();
            assert!(c <= last, "coverage grew from {last} to {c} at {dist}");
            assert!(c > 0);
            last = c;
        }
    }

    #[test]
    fn behind_camera_mesh_yields_empty_coverage() {
        let cam = test_cam(16, 16);
        let (pos, topo) = full_cover_tri(&cam, -300.0);
        let gb = rasterize(&pos, &topo, &cam);
        assert_eq!(gb.covered_count(), 0);
        assert!(gb.px.iter().all(|p| p.depth.is_infinite()));
    }

    #[test]
    fn fronto_parallel_plane_normals() {
        let cam = test_cam(32, 32);
        let (pos, topo) = full_cover_tri(&cam, 450.0);
        let gb = rasterize(&pos, &topo, &cam);
        let depth = gb.depth_tensor(0.0);
        let (n, valid) = normals_from_depth(&depth, &gb.coverage(), &cam);
        let mut checked = 0;
        for i in 0..32 * 32 {
            if !valid[i] {
                continue;
            }
            checked += 1;
            assert!(n.data[i * 3].abs() < 1e-3);
            assert!(n.data[i * 3 + 1].abs() < 1e-3);
            assert!((n.data[i * 3 + 2] + 1.0).abs() < 1e-3);
        }
        assert!(checked > 900);
    }

    #[test]
    fn tilted_plane_normals_slope() {
        let cam = test_cam(32, 32);
        // z = 480 + x in camera space: 45 degrees about y.
        let lim = 200.0;
        let pos = Tensor::new(
            vec![
                -lim, -lim, 480.0 - lim, //
                lim, -lim, 480.0 + lim, //
                -lim, lim, 480.0 - lim, //
                lim, lim, 480.0 + lim,
            ],
            &[4, 3],
        );
        let topo = MeshTopology {
            vertex_uvs: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            triangles: vec![[0, 1, 2], [2, 1, 3]],
        };
        let gb = rasterize(&pos, &topo, &cam);
        let depth = gb.depth_tensor(0.0);
        let (n, valid) = normals_from_depth(&depth, &gb.coverage(), &cam);
        let mut checked = 0;
        for i in 0..32 * 32 {
            if !valid[i] {
                continue;
            }
            checked += 1;
            let ratio = n.data[i * 3] / n.data[i * 3 + 2];
            assert!((ratio.abs() - 1.0).abs() < 0.02, "ratio {ratio}");
            assert!(n.data[i * 3 + 2] < 0.0);
        }
        assert!(checked > 800);
    }

    #[test]
    fn sphere_normals_match_analytic() {
        let cam = test_cam(64, 64);
        let grid = make_grid_topology(33, 33, 0.0);
        let (r, cz) = (60.0, 480.0);
        let pos = Tensor::from_fn(&[grid.vertex_count(), 3], |i| {
            let [u, v] = grid.vertex_uvs[i / 3];
            let (a, b) = (((u - 0.5) * 1.6) as f64, ((v - 0.5) * 1.6) as f64);
            let n = [b.cos() * a.sin(), b.sin(), -(b.cos() * a.cos())];
            (match i % 3 {
                0 => r * n[0],
                1 => r * n[1],
                _ => cz + r * n[2],
            }) as Real
        });
        let gb = rasterize(&pos, &grid, &cam);
        let depth = gb.depth_tensor(0.0);
        let (n, valid) = normals_from_depth(&depth, &gb.coverage(), &cam);
        let mut errs: Vec<f64> = Vec::new();
        for y in 0..64usize {
            for x in 0..64usize {
                let i = y * 64 + x;
                if !valid[i] {
                    continue;
                }
                let p = gb.at(x, y);
                let na = [
                    p.xyz[0] as f64,
                    p.xyz[1] as f64,
                    p.xyz[2] as f64 - cz,
                ];
                let len = (na[0] * na[0] + na[1] * na[1] + na[2] * na[2]).sqrt();
                let dot = (n.data[i * 3] as f64 * na[0]
                    + n.data[i * 3 + 1] as f64 * na[1]
                    + n.data[i * 3 + 2] as f64 * na[2])
                    / len;
                errs.push(dot.clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        assert!(errs.len() > 500);
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = errs[errs.len() / 2];
        assert!(median < 3.0, "median angular error {median} deg");
    }

    #[test]
    fn tape_normals_match_plain() {
        let cam = test_cam(32, 32);
        let grid = make_grid_topology(9, 9, 0.0);
        let pos = Tensor::from_fn(&[grid.vertex_count(), 3], |i| {
            let [u, v] = grid.vertex_uvs[i / 3];
            match i % 3 {
                0 => (u as Real - 0.5) * 110.0,
                1 => (v as Real - 0.5) * 110.0,
                _ => 470.0 + 18.0 * ((5.0 * u).sin() + (4.0 * v).cos()) as Real,
            }
        });
        let gb = rasterize(&pos, &grid, &cam);
        let depth = gb.depth_tensor(0.0);
        let covered = gb.coverage();
        let (plain, valid_p) = normals_from_depth(&depth, &covered, &cam);
        let mut t = Tape::new();
        let d = t.leaf(depth);
        let (nid, valid_t) = normals_from_depth_tape(&mut t, d, &cam, &covered).unwrap();
        let tape_n = t.value(nid);
        assert_eq!(valid_p, valid_t);
        let mut checked = 0;
        for i in 0..32 * 32 {
            if !valid_p[i] {
                continue;
            }
            checked += 1;
            for k in 0..3 {
                let diff = (tape_n.data[i * 3 + k] - plain.data[i * 3 + k]).abs();
                assert!(diff < 1e-3, "pixel {i} comp {k}: {diff}");
            }
        }
        assert!(checked > 300);

        // And the composition is differentiable wrt depth.
        let loss = t.sum(nid);
        let g = t.backward(loss).take(d).unwrap();
        assert!(g.is_finite());
        assert!(g.max_abs() > 0.0);
    }

    #[test]
    fn collect_covered_interpolates_vertex_uv() {
        let cam = test_cam(32, 32);
        // Put vertex 0 exactly at a pixel center, with both incident edges
        // descending so the top-left rule keeps that pixel covered.
        let a = cam.unproject(10.5, 7.5, 450.0);
        let b = cam.unproject(28.0, 4.0, 460.0);
        let c = cam.unproject(12.0, 27.0, 455.0);
        let pos = Tensor::from_fn(&[3, 3], |i| [a, b, c][i / 3][i % 3] as Real);
        let topo = MeshTopology {
            vertex_uvs: vec![[0.23, 0.71], [0.9, 0.1], [0.1, 0.9]],
            triangles: vec![[0, 1, 2]],
        };
        let gb = rasterize(&pos, &topo, &cam);
        let cp = collect_covered(&gb, &topo);
        assert_eq!(cp.len(), gb.covered_count());
        let pix = 7 * 32 + 10;
        let slot = cp
            .pixel_indices
            .iter()
            .position(|&i| i == pix as u32)
            .expect("vertex pixel must be covered");
        assert!((cp.uv.at2(slot, 0) - 0.23).abs() < 1e-5);
        assert!((cp.uv.at2(slot, 1) - 0.71).abs() < 1e-5);
        assert_eq!(cp.faces[slot], [0, 1, 2]);
        let bsum: Real = cp.bary[slot].iter().sum();
        assert!((bsum - 1.0).abs() < 1e-5);
        assert!(cp.bary[slot][0] > 0.999, "barycentric degenerates to the vertex");
    }

    #[test]
    fn debug_dumps_write_png() {
        let cam = test_cam(16, 16);
        let (pos, topo) = full_cover_tri(&cam, 500.0);
        let gb = rasterize(&pos, &topo, &cam);
        let dir = tempfile::tempdir().unwrap();
        let dp = dir.path().join("depth.png");
        let cp = dir.path().join("cov.png");
        dump_depth_png(&gb, &dp).unwrap();
        dump_coverage_png(&gb, &cp).unwrap();
        let img = image::open(&dp).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (16, 16));
        let img = image::open(&cp).unwrap().to_luma8();
        assert!(img.pixels().all(|p| p.0[0] == 255));
    }
}
