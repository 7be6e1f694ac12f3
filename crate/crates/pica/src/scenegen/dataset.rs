//! Rendered ground truth and the on-disk dataset layout.
//!
//! A dataset directory holds `scene.json` (config + calibrated cameras) and
//! one directory per frame with the rendered RGB views (PNG), depth and
//! normal images (PICD float maps), the tracked coarse position map, the
//! unwrapped average texture, and the expression parameters. Everything is
//! a pure function of the `SceneConfig`, so regeneration is bit-identical.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diff::{kernels, Tensor};
use crate::geometry::make_grid_topology;
use crate::raster::{rasterize, Camera};
use crate::scenegen::{
    camera_group, rig_cameras, shade, texture_rgb, SceneConfig, Surface,
};
use crate::Real;

/// Depth-consistency gate for texture backprojection, millimeters.
const AVGTEX_DEPTH_GATE_MM: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format: {0}")]
    Format(String),
}

/// One calibrated rig camera with its viewing-sector label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneCamera {
    pub name: String,
    pub group: String,
    pub yaw_deg: Real,
    pub pitch_deg: Real,
    pub camera: Camera,
}

/// Everything a consumer needs to interpret a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub config: SceneConfig,
    pub cameras: Vec<SceneCamera>,
    pub scene_center: [Real; 3],
    pub scene_half_extent: Real,
}

impl Scene {
    pub fn build(cfg: &SceneConfig) -> Scene {
        let cams = rig_cameras(cfg);
        let cameras = cams
            .into_iter()
            .zip(&cfg.camera_angles)
            .enumerate()
            .map(|(i, (camera, &(yaw, pitch)))| SceneCamera {
                name: format!("cam{i:02}"),
                group: camera_group(yaw, pitch).to_string(),
                yaw_deg: yaw,
                pitch_deg: pitch,
                camera,
            })
            .collect();
        Scene {
            config: cfg.clone(),
            cameras,
            scene_center: cfg.scene_center(),
            scene_half_extent: cfg.scene_half_extent(),
        }
    }

    pub fn camera_list(&self) -> Vec<Camera> {
        self.cameras.iter().map(|c| c.camera.clone()).collect()
    }
}

/// Rendered ground truth for one camera: linear RGB in [0,1], camera-space
/// depth in mm (0 marks background), and camera-space unit normals oriented
/// toward the camera (n_z < 0; zero rows mark background).
#[derive(Debug, Clone)]
pub struct ViewImages {
    /// [H, W, 3]
    pub rgb: Tensor,
    /// [H, W]
    pub depth: Tensor,
    /// [H, W, 3]
    pub normals: Tensor,
}

/// Rasterize the exact surface into every camera. Depth comes from the
/// dense triangle mesh; color and normals are evaluated analytically at
/// each pixel's interpolated surface uv.
pub fn render_views(
    surface: &Surface,
    cams: &[Camera],
    params: &[Real],
    render_grid: usize,
) -> Vec<ViewImages> {
    let topo = make_grid_topology(render_grid, render_grid, 0.0);
    let verts = surface.mesh_positions(&topo, params);
    let p0 = params.first().copied().unwrap_or(0.0);
    cams.iter()
        .map(|cam| {
            let gb = rasterize(&verts, &topo, cam);
            let (h, w) = (cam.height, cam.width);
            let center = cam.center_world();
            let center_r = [center[0] as Real, center[1] as Real, center[2] as Real];
            let mut rgb = Tensor::zeros(&[h, w, 3]);
            let mut depth = Tensor::zeros(&[h, w]);
            let mut normals = Tensor::zeros(&[h, w, 3]);
            for (i, rec) in gb.px.iter().enumerate() {
                if !rec.covered {
                    continue;
                }
                let uv = rec.uv;
                let p = surface.point(uv, params);
                let n_world = surface.normal(uv, params);
                let nw = [n_world[0] as f64, n_world[1] as f64, n_world[2] as f64];
                let n_cam = [
                    cam.r[0][0] * nw[0] + cam.r[0][1] * nw[1] + cam.r[0][2] * nw[2],
                    cam.r[1][0] * nw[0] + cam.r[1][1] * nw[1] + cam.r[1][2] * nw[2],
                    cam.r[2][0] * nw[0] + cam.r[2][1] * nw[1] + cam.r[2][2] * nw[2],
                ];
                let flip = if n_cam[2] > 0.0 { -1.0 } else { 1.0 };
                let shaded = shade(texture_rgb(uv, p0), n_world, p, center_r);
                for c in 0..3 {
                    rgb.data[i * 3 + c] = shaded[c];
                    normals.data[i * 3 + c] = (flip * n_cam[c]) as Real;
                }
                depth.data[i] = rec.depth;
            }
            ViewImages { rgb, depth, normals }
        })
        .collect()
}

/// The surface sampled exactly at texel centers, [res, res, 3] with texel
/// (row, col) at uv = ((col+½)/res, (row+½)/res).
pub fn exact_position_map(surface: &Surface, params: &[Real], res: usize) -> Tensor {
    Tensor::from_fn(&[res, res, 3], |i| {
        let c = i % 3;
        let t = i / 3;
        let (row, col) = (t / res, t % res);
        let uv = [
            (col as Real + 0.5) / res as Real,
            (row as Real + 0.5) / res as Real,
        ];
        surface.point(uv, params)[c]
    })
}

/// Separable Gaussian blur over the spatial axes of an [H, W, C] map with
/// replicate padding.
fn gaussian_blur_map(map: &Tensor, sigma: Real) -> Tensor {
    if sigma <= 0.0 {
        return map.clone();
    }
    let (h, w, c) = (map.shape[0], map.shape[1], map.shape[2]);
    let radius = (3.0 * sigma).ceil() as isize;
    let mut weights = Vec::with_capacity(2 * radius as usize + 1);
    for k in -radius..=radius {
        weights.push((-(k * k) as Real / (2.0 * sigma * sigma)).exp());
    }
    let norm: Real = weights.iter().sum();
    for v in &mut weights {
        *v /= norm;
    }
    let tap = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    // Rows (blur along x), then columns (blur along y).
    let mut mid = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (ki, wk) in weights.iter().enumerate() {
                    let xx = tap(x as isize + ki as isize - radius, w);
                    s += wk * map.at3(y, xx, ch);
                }
                mid.data[(y * w + x) * c + ch] = s;
            }
        }
    }
    let mut out = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (ki, wk) in weights.iter().enumerate() {
                    let yy = tap(y as isize + ki as isize - radius, h);
                    s += wk * mid.at3(yy, x, ch);
                }
                out.data[(y * w + x) * c + ch] = s;
            }
        }
    }
    out
}

/// Tracked coarse geometry: the exact surface blurred in uv space (σ =
/// 1/16th of the map side), with a stronger blur (σ = 1/8th) feathered in
/// over the detail disk where tracking is unreliable.
pub fn coarse_position_map(cfg: &SceneConfig, surface: &Surface, params: &[Real]) -> Tensor {
    let p = cfg.coarse_map_res;
    let exact = exact_position_map(surface, params, p);
    let base = gaussian_blur_map(&exact, p as Real / 16.0);
    let detail = gaussian_blur_map(&exact, p as Real / 8.0);
    let r = cfg.detail_radius;
    Tensor::from_fn(&[p, p, 3], |i| {
        let t = i / 3;
        let (row, col) = (t / p, t % p);
        let du = (col as Real + 0.5) / p as Real - cfg.detail_center[0];
        let dv = (row as Real + 0.5) / p as Real - cfg.detail_center[1];
        let d = (du * du + dv * dv).sqrt();
        let wd = ((r + 0.03 - d) / 0.06).clamp(0.0, 1.0);
        wd * detail.data[i] + (1.0 - wd) * base.data[i]
    })
}

/// Flood-fill unfilled texels from filled ones: breadth-first over the
/// 4-neighborhood, queue seeded with filled texels in row-major order,
/// first discovery wins. Deterministic by construction.
fn bfs_fill(data: &mut [Real], filled: &mut [bool], h: usize, w: usize) {
    let mut queue: VecDeque<usize> = (0..h * w).filter(|&i| filled[i]).collect();
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        let neighbors = [
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
        ];
        for j in neighbors.into_iter().flatten() {
            if !filled[j] {
                for c in 0..3 {
                    data[j * 3 + c] = data[i * 3 + c];
                }
                filled[j] = true;
                queue.push_back(j);
            }
        }
    }
}

/// Unwrap an average texture: each texel lifts to 3D through the tracked
/// coarse map, projects into every camera, and averages the RGB samples
/// that pass a nearest-pixel depth test. Holes (no camera agrees) are
/// filled from their nearest accepted texel; returns the map and the
/// pre-fill accepted mask.
fn build_avgtex(
    cfg: &SceneConfig,
    coarse: &Tensor,
    cams: &[Camera],
    views: &[ViewImages],
) -> (Tensor, Vec<bool>) {
    let t = cfg.avgtex_res();
    let coords = Tensor::from_fn(&[t * t, 2], |i| {
        let (tex, k) = (i / 2, i % 2);
        let (row, col) = (tex / t, tex % t);
        if k == 0 {
            (col as Real + 0.5) / t as Real
        } else {
            (row as Real + 0.5) / t as Real
        }
    });
    let p3d = kernels::bilinear_fwd(coarse, &coords);
    let mut tex = Tensor::zeros(&[t, t, 3]);
    let mut accepted = vec![false; t * t];
    for i in 0..t * t {
        let p = [
            p3d.at2(i, 0) as f64,
            p3d.at2(i, 1) as f64,
            p3d.at2(i, 2) as f64,
        ];
        let mut accum = [0.0 as Real; 3];
        let mut count = 0usize;
        for (cam, view) in cams.iter().zip(views) {
            let Some((sx, sy, z)) = cam.project(p) else { continue };
            let (wf, hf) = (cam.width as f64, cam.height as f64);
            if !(0.0..wf).contains(&sx) || !(0.0..hf).contains(&sy) {
                continue;
            }
            let (ix, iy) = (sx as usize, sy as usize);
            let d_img = view.depth.data[iy * cam.width + ix] as f64;
            if d_img <= 0.0 || (z - d_img).abs() >= AVGTEX_DEPTH_GATE_MM {
                continue;
            }
            if let Some(rgb) = sample_rgb_covered(view, cam, sx, sy) {
                for c in 0..3 {
                    accum[c] += rgb[c];
                }
                count += 1;
            }
        }
        if count > 0 {
            for c in 0..3 {
                tex.data[i * 3 + c] = accum[c] / count as Real;
            }
            accepted[i] = true;
        }
    }
    if accepted.iter().any(|&a| a) {
        let mut filled = accepted.clone();
        bfs_fill(&mut tex.data, &mut filled, t, t);
    } else {
        tex.data.fill(0.5);
    }
    (tex, accepted)
}

/// Bilinear RGB sample restricted to covered pixels (weights renormalized);
/// `None` when every tap is background or outside the image.
fn sample_rgb_covered(view: &ViewImages, cam: &Camera, sx: f64, sy: f64) -> Option<[Real; 3]> {
    let (w, h) = (cam.width, cam.height);
    let x0f = (sx - 0.5).floor();
    let y0f = (sy - 0.5).floor();
    let (fx, fy) = (sx - 0.5 - x0f, sy - 0.5 - y0f);
    let mut accum = [0.0 as Real; 3];
    let mut total = 0.0 as Real;
    for (dx, dy, wt) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let (x, y) = (x0f as i64 + dx, y0f as i64 + dy);
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            continue;
        }
        let i = y as usize * w + x as usize;
        if view.depth.data[i] <= 0.0 {
            continue;
        }
        for c in 0..3 {
            accum[c] += wt as Real * view.rgb.data[i * 3 + c];
        }
        total += wt as Real;
    }
    if total < 1e-6 {
        return None;
    }
    Some([accum[0] / total, accum[1] / total, accum[2] / total])
}

// ---------------------------------------------------------------------------
// File formats.

const PICD_MAGIC: &[u8; 4] = b"PICD";

/// Write a float map as PICD: magic, u32 LE width/height/channels, then
/// f32 LE values in row-major HWC order. Accepts [H, W] or [H, W, C].
pub fn write_picd(path: &Path, map: &Tensor) -> Result<(), SceneError> {
    let (h, w, c) = match map.shape.as_slice() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        s => return Err(SceneError::Format(format!("picd wants rank 2 or 3, got {s:?}"))),
    };
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(PICD_MAGIC)?;
    for dim in [w, h, c] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    for &v in &map.data {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Read a PICD map; single-channel files come back rank 2, others rank 3.
pub fn read_picd(path: &Path) -> Result<Tensor, SceneError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != PICD_MAGIC {
        return Err(SceneError::Format(format!("{}: not a PICD file", path.display())));
    }
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (dim(4), dim(8), dim(12));
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .filter(|&v| v <= (1 << 30))
        .ok_or_else(|| SceneError::Format(format!("{}: implausible dimensions", path.display())))?;
    if bytes.len() != 16 + 4 * n {
        return Err(SceneError::Format(format!(
            "{}: payload is {} bytes, header wants {}",
            path.display(),
            bytes.len() - 16,
            4 * n
        )));
    }
    let data: Vec<Real> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as Real)
        .collect();
    let shape: &[usize] = if c == 1 { &[h, w] } else { &[h, w, c] };
    Ok(Tensor::new(data, shape))
}

/// Write an [H, W, 3] map in [0,1] as an 8-bit PNG.
fn write_png_rgb(path: &Path, map: &Tensor) -> Result<(), SceneError> {
    let (h, w) = (map.shape[0], map.shape[1]);
    let bytes: Vec<u8> = map
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("byte buffer matches dimensions");
    let mut out = BufWriter::new(File::create(path)?);
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(())
}

/// Read an 8-bit RGB PNG back to an [H, W, 3] map in [0,1].
fn read_png_rgb(path: &Path) -> Result<Tensor, SceneError> {
    let img = image::ImageReader::open(path)?.decode()?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<Real> = img.into_raw().iter().map(|&b| b as Real / 255.0).collect();
    Ok(Tensor::new(data, &[h, w, 3]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameMeta {
    params: Vec<Real>,
    holdout: bool,
}

/// Generate and write a full dataset directory; returns the scene manifest.
pub fn write_dataset(cfg: &SceneConfig, out: &Path) -> Result<Scene, SceneError> {
    let scene = Scene::build(cfg);
    fs::create_dir_all(out.join("frames"))?;
    let file = File::create(out.join("scene.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &scene)?;

    let surface = Surface::new(cfg.seed, cfg.n_bumps);
    let cams = scene.camera_list();
    for f in 0..cfg.n_frames {
        let params = cfg.frame_params(f);
        let dir = out.join("frames").join(format!("{f:04}"));
        fs::create_dir_all(&dir)?;
        let views = render_views(&surface, &cams, &params, cfg.render_grid);
        let coarse = coarse_position_map(cfg, &surface, &params);
        let (avgtex, _) = build_avgtex(cfg, &coarse, &cams, &views);
        for (i, v) in views.iter().enumerate() {
            write_png_rgb(&dir.join(format!("cam{i:02}.png")), &v.rgb)?;
            write_picd(&dir.join(format!("cam{i:02}_depth.picd")), &v.depth)?;
            write_picd(&dir.join(format!("cam{i:02}_normals.picd")), &v.normals)?;
        }
        write_picd(&dir.join("coarse_posmap.picd"), &coarse)?;
        write_png_rgb(&dir.join("avgtex.png"), &avgtex)?;
        let meta = FrameMeta { params, holdout: SceneConfig::is_holdout(f) };
        let file = File::create(dir.join("frame.json"))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &meta)?;
    }
    Ok(scene)
}

/// One frame loaded back from disk.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub index: usize,
    pub params: Vec<Real>,
    pub holdout: bool,
    /// Tracked coarse position map, [P, P, 3].
    pub coarse: Tensor,
    /// Average texture in encoder layout, [3, T, T].
    pub avgtex: Tensor,
    /// Per-camera ground truth, in `Scene::cameras` order.
    pub views: Vec<ViewImages>,
}

impl FrameData {
    /// Coarse map in encoder layout, [3, P, P].
    pub fn coarse_chw(&self) -> Tensor {
        hwc_to_chw(&self.coarse)
    }
}

fn hwc_to_chw(t: &Tensor) -> Tensor {
    let (h, w, c) = (t.shape[0], t.shape[1], t.shape[2]);
    Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let (y, x) = ((i / w) % h, i % w);
        t.at3(y, x, ch)
    })
}

/// Reader for a directory written by [`write_dataset`].
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    pub scene: Scene,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset, SceneError> {
        let file = File::open(root.join("scene.json"))?;
        let scene: Scene = serde_json::from_reader(BufReader::new(file))?;
        Ok(Dataset { root: root.to_path_buf(), scene })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn n_frames(&self) -> usize {
        self.scene.config.n_frames
    }

    pub fn frame_dir(&self, frame: usize) -> PathBuf {
        self.root.join("frames").join(format!("{frame:04}"))
    }

    pub fn train_frames(&self) -> Vec<usize> {
        (0..self.n_frames()).filter(|&f| !SceneConfig::is_holdout(f)).collect()
    }

    pub fn holdout_frames(&self) -> Vec<usize> {
        (0..self.n_frames()).filter(|&f| SceneConfig::is_holdout(f)).collect()
    }

    pub fn load_frame(&self, frame: usize) -> Result<FrameData, SceneError> {
        let dir = self.frame_dir(frame);
        let meta: FrameMeta =
            serde_json::from_reader(BufReader::new(File::open(dir.join("frame.json"))?))?;
        let coarse = read_picd(&dir.join("coarse_posmap.picd"))?;
        let p = self.scene.config.coarse_map_res;
        if coarse.shape != [p, p, 3] {
            return Err(SceneError::Format(format!(
                "frame {frame}: coarse map shape {:?}, scene wants [{p}, {p}, 3]",
                coarse.shape
            )));
        }
        let avgtex = hwc_to_chw(&read_png_rgb(&dir.join("avgtex.png"))?);
        let mut views = Vec::with_capacity(self.scene.cameras.len());
        for (i, sc) in self.scene.cameras.iter().enumerate() {
            let rgb = read_png_rgb(&dir.join(format!("cam{i:02}.png")))?;
            let depth = read_picd(&dir.join(format!("cam{i:02}_depth.picd")))?;
            let normals = read_picd(&dir.join(format!("cam{i:02}_normals.picd")))?;
            let (h, w) = (sc.camera.height, sc.camera.width);
            if rgb.shape != [h, w, 3] || depth.shape != [h, w] || normals.shape != [h, w, 3] {
                return Err(SceneError::Format(format!(
                    "frame {frame} cam{i:02}: image shapes do not match the calibration"
                )));
            }
            views.push(ViewImages { rgb, depth, normals });
        }
        Ok(FrameData {
            index: frame,
            params: meta.params,
            holdout: meta.holdout,
            coarse,
            avgtex,
            views,
        })
    }
}
