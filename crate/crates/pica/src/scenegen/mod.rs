//! Procedural multiview RGB-D scene: an analytic face-like surface with
//! expression-dependent bumps, a fixed eight-camera rig, and the masks
//! that mark its unreliable "detail" region.
//!
//! Everything derives deterministically from one seed, and the surface is
//! exactly linear in the expression parameters, so generated datasets can
//! be regenerated bit for bit and geometric properties can be tested in
//! closed form.

mod dataset;

pub use dataset::{
    coarse_position_map, exact_position_map, read_picd, render_views, write_dataset, write_picd,
    Dataset, FrameData, Scene, SceneCamera, SceneError, ViewImages,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::Tensor;
use crate::geometry::MeshTopology;
use crate::raster::Camera;
use crate::Real;

/// Extent of the surface patch in mm: x,y = (uv − ½)·200.
pub const PATCH_MM: Real = 200.0;
/// Directional light: unit vector from the surface toward the light, which
/// sits on the camera side of the patch.
pub const LIGHT: [Real; 3] = [0.339_549_4, -0.291_042_3, -0.873_127];
/// Frames with `frame % 10 == 5` are held out from training.
pub const HOLDOUT_MODULUS: usize = 10;
pub const HOLDOUT_RESIDUE: usize = 5;

const WRINKLE_AMP: Real = 1.2;
const WRINKLE_FU: Real = 18.0;
const WRINKLE_FV: Real = 16.0;

/// Generator settings; defaults produce the desk-scale dataset.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub n_frames: usize,
    pub image_size: usize,
    /// Coarse position-map resolution (side).
    pub coarse_map_res: usize,
    /// Average-texture side = `avgtex_scale · coarse_map_res`.
    pub avgtex_scale: usize,
    /// Ground-truth meshing density (vertices per side).
    pub render_grid: usize,
    pub n_bumps: usize,
    /// Camera directions as (yaw°, pitch°) around the look target.
    pub camera_angles: Vec<(Real, Real)>,
    pub camera_distance_mm: Real,
    pub detail_center: [Real; 2],
    pub detail_radius: Real,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 7,
            n_frames: 64,
            image_size: 128,
            coarse_map_res: 64,
            avgtex_scale: 4,
            render_grid: 129,
            n_bumps: 8,
            camera_angles: vec![
                (0.0, 0.0),
                (8.0, -6.0),
                (4.0, 25.0),
                (-6.0, -25.0),
                (-32.0, 6.0),
                (-55.0, -10.0),
                (30.0, 8.0),
                (56.0, -6.0),
            ],
            camera_distance_mm: 550.0,
            detail_center: [0.5, 0.62],
            detail_radius: 0.16,
        }
    }
}

impl SceneConfig {
    pub fn avgtex_res(&self) -> usize {
        self.avgtex_scale * self.coarse_map_res
    }

    /// Everything the cameras ever see fits this box.
    pub fn scene_center(&self) -> [Real; 3] {
        [0.0, 0.0, -20.0]
    }

    pub fn scene_half_extent(&self) -> Real {
        110.0
    }

    pub fn is_holdout(frame: usize) -> bool {
        frame % HOLDOUT_MODULUS == HOLDOUT_RESIDUE
    }

    /// Expression parameters for a frame; frame 0 is the neutral pose.
    pub fn frame_params(&self, frame: usize) -> Vec<Real> {
        if frame == 0 {
            return vec![0.0; self.n_bumps];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ exp_seed_mix(frame as u64));
        (0..self.n_bumps).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    pub fn in_detail_disk(&self, uv: [Real; 2]) -> bool {
        let du = uv[0] - self.detail_center[0];
        let dv = uv[1] - self.detail_center[1];
        du * du + dv * dv < self.detail_radius * self.detail_radius
    }
}

fn exp_seed_mix(frame: u64) -> u64 {
    // splitmix-style diffusion so nearby frames decorrelate.
    let mut z = frame.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fixed set of Gaussian height bumps; the surface displaces linearly in
/// the per-frame amplitudes.
#[derive(Debug, Clone)]
pub struct ExpressionBasis {
    pub centers: Vec<[Real; 2]>,
    pub sigmas: Vec<Real>,
    pub gains_mm: Vec<Real>,
}

impl ExpressionBasis {
    pub fn new(seed: u64, k: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
        let mut centers = Vec::with_capacity(k);
        let mut sigmas = Vec::with_capacity(k);
        let mut gains = Vec::with_capacity(k);
        for _ in 0..k {
            centers.push([rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)]);
            sigmas.push(rng.gen_range(0.04..0.10));
            gains.push(rng.gen_range(4.0..12.0));
        }
        ExpressionBasis { centers, sigmas, gains_mm: gains }
    }

    fn bump(&self, j: usize, uv: [Real; 2]) -> Real {
        let du = uv[0] - self.centers[j][0];
        let dv = uv[1] - self.centers[j][1];
        let s2 = self.sigmas[j] * self.sigmas[j];
        self.gains_mm[j] * (-(du * du + dv * dv) / (2.0 * s2)).exp()
    }

    /// Height offset Σ params[j] · bump_j(uv); exactly linear in `params`.
    pub fn displacement(&self, uv: [Real; 2], params: &[Real]) -> Real {
        assert_eq!(params.len(), self.centers.len(), "parameter count");
        (0..params.len()).map(|j| params[j] * self.bump(j, uv)).sum()
    }

    fn displacement_grad(&self, uv: [Real; 2], params: &[Real]) -> (Real, Real) {
        let mut gu = 0.0;
        let mut gv = 0.0;
        for j in 0..params.len() {
            let s2 = self.sigmas[j] * self.sigmas[j];
            let b = params[j] * self.bump(j, uv);
            gu += b * -(uv[0] - self.centers[j][0]) / s2;
            gv += b * -(uv[1] - self.centers[j][1]) / s2;
        }
        (gu, gv)
    }
}

/// The analytic ground-truth surface: paraboloid base, static wrinkles,
/// and expression bumps, all as height over the uv plane.
#[derive(Debug, Clone)]
pub struct Surface {
    pub basis: ExpressionBasis,
}

impl Surface {
    pub fn new(seed: u64, n_bumps: usize) -> Self {
        Surface { basis: ExpressionBasis::new(seed, n_bumps) }
    }

    fn base_height(uv: [Real; 2]) -> Real {
        let cu = uv[0] - 0.5;
        let cv = uv[1] - 0.5;
        let r2 = cu * cu + cv * cv;
        let tau = 2.0 * std::f64::consts::PI as Real;
        -45.0 * (1.0 - 2.2 * r2)
            + WRINKLE_AMP * (tau * WRINKLE_FU * uv[0]).sin() * (tau * WRINKLE_FV * uv[1]).sin()
    }

    fn base_grad(uv: [Real; 2]) -> (Real, Real) {
        let tau = 2.0 * std::f64::consts::PI as Real;
        let su = (tau * WRINKLE_FU * uv[0]).sin();
        let cu = (tau * WRINKLE_FU * uv[0]).cos();
        let sv = (tau * WRINKLE_FV * uv[1]).sin();
        let cv = (tau * WRINKLE_FV * uv[1]).cos();
        (
            198.0 * (uv[0] - 0.5) + WRINKLE_AMP * tau * WRINKLE_FU * cu * sv,
            198.0 * (uv[1] - 0.5) + WRINKLE_AMP * tau * WRINKLE_FV * su * cv,
        )
    }

    pub fn height(&self, uv: [Real; 2], params: &[Real]) -> Real {
        Self::base_height(uv) + self.basis.displacement(uv, params)
    }

    pub fn point(&self, uv: [Real; 2], params: &[Real]) -> [Real; 3] {
        [
            (uv[0] - 0.5) * PATCH_MM,
            (uv[1] - 0.5) * PATCH_MM,
            self.height(uv, params),
        ]
    }

    /// Unit world normal, oriented toward the cameras (negative z).
    pub fn normal(&self, uv: [Real; 2], params: &[Real]) -> [Real; 3] {
        let (bu, bv) = Self::base_grad(uv);
        let (du, dv) = self.basis.displacement_grad(uv, params);
        // d point / du = (PATCH, 0, zu), / dv = (0, PATCH, zv);
        // cross(Sv, Su) / PATCH = (zu, zv, -PATCH).
        let zu = bu + du;
        let zv = bv + dv;
        let n = [zu, zv, -PATCH_MM];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        [n[0] / len, n[1] / len, n[2] / len]
    }

    /// Exact vertex grid `[g·g, 3]` for rasterization.
    pub fn mesh_positions(&self, topo: &MeshTopology, params: &[Real]) -> Tensor {
        let n = topo.vertex_count();
        let mut out = Tensor::zeros(&[n, 3]);
        for (v, uv) in topo.vertex_uvs.iter().enumerate() {
            let p = self.point([uv[0], uv[1]], params);
            out.data[v * 3..v * 3 + 3].copy_from_slice(&p);
        }
        out
    }
}

/// Albedo at a uv point; the blotch near (0.3, 0.35) fades with the first
/// expression parameter so appearance tracks expression.
pub fn texture_rgb(uv: [Real; 2], p0: Real) -> [Real; 3] {
    let cell = ((uv[0] * 8.0).floor() + (uv[1] * 8.0).floor()) as i64;
    let base = if cell.rem_euclid(2) == 0 { 0.72 } else { 0.42 };
    let tau = 2.0 * std::f64::consts::PI as Real;
    let stripe = 0.5 + 0.5 * (tau * 20.0 * (uv[0] + 0.3 * uv[1])).sin();
    let mut rgb = [
        base + 0.15 * uv[0],
        base * (0.75 + 0.25 * stripe),
        base + 0.15 * uv[1],
    ];
    let du = uv[0] - 0.3;
    let dv = uv[1] - 0.35;
    let m = (-(du * du + dv * dv) / (2.0 * 0.06 * 0.06)).exp();
    let alpha = (0.5 + 0.4 * p0).clamp(0.0, 1.0) * m;
    let blotch = [0.85, 0.20, 0.25];
    for c in 0..3 {
        rgb[c] = ((1.0 - alpha) * rgb[c] + alpha * blotch[c]).clamp(0.02, 0.98);
    }
    rgb
}

/// Blinn-Phong shade of a textured point seen from `cam_center`.
pub fn shade(tex: [Real; 3], n: [Real; 3], p: [Real; 3], cam_center: [Real; 3]) -> [Real; 3] {
    let l = LIGHT;
    let diff = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0);
    let mut v = [cam_center[0] - p[0], cam_center[1] - p[1], cam_center[2] - p[2]];
    let vl = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v = [v[0] / vl, v[1] / vl, v[2] / vl];
    let mut h = [l[0] + v[0], l[1] + v[1], l[2] + v[2]];
    let hl = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt().max(1e-9);
    h = [h[0] / hl, h[1] / hl, h[2] / hl];
    let spec = 0.2 * (n[0] * h[0] + n[1] * h[1] + n[2] * h[2]).max(0.0).powi(32);
    [
        (tex[0] * (0.3 + 0.7 * diff) + spec).clamp(0.0, 1.0),
        (tex[1] * (0.3 + 0.7 * diff) + spec).clamp(0.0, 1.0),
        (tex[2] * (0.3 + 0.7 * diff) + spec).clamp(0.0, 1.0),
    ]
}

/// One look-at camera on the rig sphere: `dist_mm` from the scene center
/// along the (yaw°, pitch°) direction, y-down image convention,
/// fx = 1.9 · image side.
pub fn look_at_camera(cfg: &SceneConfig, yaw: Real, pitch: Real, dist_mm: Real) -> Camera {
    let target = cfg.scene_center();
    let f = 1.9 * cfg.image_size as f64;
    let c = cfg.image_size as f64 / 2.0;
    let (ys, yc) = (yaw as f64).to_radians().sin_cos();
    let (ps, pc) = (pitch as f64).to_radians().sin_cos();
    let dir = [ys * pc, ps, -yc * pc];
    let center = [
        target[0] as f64 + dist_mm as f64 * dir[0],
        target[1] as f64 + dist_mm as f64 * dir[1],
        target[2] as f64 + dist_mm as f64 * dir[2],
    ];
    let fwd = norm3([-dir[0], -dir[1], -dir[2]]);
    let right = norm3(cross3(&[0.0, 1.0, 0.0], &fwd));
    let down = cross3(&fwd, &right);
    let r = [right, down, fwd];
    let t = [
        -(r[0][0] * center[0] + r[0][1] * center[1] + r[0][2] * center[2]),
        -(r[1][0] * center[0] + r[1][1] * center[1] + r[1][2] * center[2]),
        -(r[2][0] * center[0] + r[2][1] * center[1] + r[2][2] * center[2]),
    ];
    Camera::new(
        [[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]],
        r,
        t,
        cfg.image_size,
        cfg.image_size,
    )
    .expect("rig camera must be valid")
}

/// Build the camera rig: look-at cameras on a sphere around the scene
/// center, y-down image convention, fx = 1.9 · image side.
pub fn rig_cameras(cfg: &SceneConfig) -> Vec<Camera> {
    cfg.camera_angles
        .iter()
        .map(|&(yaw, pitch)| look_at_camera(cfg, yaw, pitch, cfg.camera_distance_mm))
        .collect()
}

/// Viewing-sector label for a camera angle.
pub fn camera_group(yaw: Real, pitch: Real) -> &'static str {
    if yaw.abs() < 15.0 && pitch.abs() < 15.0 {
        "front"
    } else if pitch >= 15.0 {
        "up"
    } else if pitch <= -15.0 {
        "down"
    } else if yaw < 0.0 {
        "left"
    } else {
        "right"
    }
}

fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(v: [f64; 3]) -> [f64; 3] {
    let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / l, v[1] / l, v[2] / l]
}

/// Tracked-mesh confidence per vertex of `topo`: 0 inside the detail disk
/// (the tracker is unreliable there), 1 elsewhere.
pub fn mesh_weights(cfg: &SceneConfig, topo: &MeshTopology) -> Tensor {
    Tensor::from_fn(&[topo.vertex_count()], |v| {
        let uv = topo.vertex_uvs[v];
        if cfg.in_detail_disk([uv[0], uv[1]]) {
            0.0
        } else {
            1.0
        }
    })
}

/// Laplacian-smoothness weight per vertex: stronger inside the detail disk
/// where no mesh supervision exists.
pub fn laplacian_weights(cfg: &SceneConfig, topo: &MeshTopology) -> Tensor {
    Tensor::from_fn(&[topo.vertex_count()], |v| {
        let uv = topo.vertex_uvs[v];
        if cfg.in_detail_disk([uv[0], uv[1]]) {
            1.25
        } else {
            0.25
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn displacement_is_linear_in_params() {
        let s = Surface::new(3, 8);
        let p1: Vec<Real> = (0..8).map(|i| (i as Real * 0.37).sin()).collect();
        let p2: Vec<Real> = (0..8).map(|i| (i as Real * 0.71).cos()).collect();
        let sum: Vec<Real> = (0..8).map(|i| p1[i] + p2[i]).collect();
        let twice: Vec<Real> = p1.iter().map(|v| 2.0 * v).collect();
        for i in 0..50 {
            let uv = [(i as Real * 0.613) % 1.0, (i as Real * 0.287) % 1.0];
            let d1 = s.basis.displacement(uv, &p1);
            let d2 = s.basis.displacement(uv, &p2);
            let ds = s.basis.displacement(uv, &sum);
            assert!((ds - (d1 + d2)).abs() < 1e-4, "additivity at {uv:?}");
            // Doubling is exact in floating point.
            assert_eq!(s.basis.displacement(uv, &twice), 2.0 * d1);
        }
    }

    #[test]
    fn neutral_frame_is_the_base_surface() {
        let cfg = SceneConfig::default();
        let s = Surface::new(cfg.seed, cfg.n_bumps);
        let zero = cfg.frame_params(0);
        assert!(zero.iter().all(|&v| v == 0.0));
        for uv in [[0.2, 0.3], [0.5, 0.5], [0.85, 0.1]] {
            assert_eq!(s.height(uv, &zero), Surface::base_height(uv));
        }
        // Center of the base paraboloid (minus wrinkle) sits near -45mm.
        let h = s.height([0.5, 0.5], &zero);
        assert!((h + 45.0).abs() < WRINKLE_AMP + 1e-4, "center height {h}");
    }

    #[test]
    fn frame_params_deterministic_and_bounded() {
        let cfg = SceneConfig::default();
        for f in [1, 2, 5, 63] {
            let a = cfg.frame_params(f);
            let b = cfg.frame_params(f);
            assert_eq!(a, b);
            assert_eq!(a.len(), 8);
            assert!(a.iter().all(|v| v.abs() <= 1.0));
        }
        assert_ne!(cfg.frame_params(1), cfg.frame_params(2));
    }

    #[test]
    fn analytic_normals_match_finite_differences() {
        let s = Surface::new(9, 8);
        let params: Vec<Real> = (0..8).map(|i| ((i * i) as Real * 0.17).sin()).collect();
        let eps = 1e-4;
        for i in 0..40 {
            let uv = [0.1 + 0.8 * ((i as Real * 0.379) % 1.0), 0.1 + 0.8 * ((i as Real * 0.731) % 1.0)];
            let n = s.normal(uv, &params);
            let hu = (s.height([uv[0] + eps, uv[1]], &params)
                - s.height([uv[0] - eps, uv[1]], &params))
                / (2.0 * eps);
            let hv = (s.height([uv[0], uv[1] + eps], &params)
                - s.height([uv[0], uv[1] - eps], &params))
                / (2.0 * eps);
            let want = {
                let v = [hu, hv, -PATCH_MM];
                let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                [v[0] / l, v[1] / l, v[2] / l]
            };
            for c in 0..3 {
                assert!((n[c] - want[c]).abs() < 1e-3, "uv {uv:?} component {c}");
            }
            assert!(n[2] < 0.0, "normals face the cameras");
        }
    }

    #[test]
    fn rig_has_five_groups_and_valid_cameras() {
        let cfg = SceneConfig::default();
        let cams = rig_cameras(&cfg);
        assert_eq!(cams.len(), 8);
        let groups: Vec<&str> =
            cfg.camera_angles.iter().map(|&(y, p)| camera_group(y, p)).collect();
        for g in ["front", "up", "down", "left", "right"] {
            assert!(groups.contains(&g), "missing group {g}");
        }
        assert_eq!(groups.iter().filter(|g| **g == "front").count(), 2);
        // Every camera sees the scene center in the central image region.
        for cam in &cams {
            let px = cam.project([0.0, 0.0, -20.0]).expect("target visible");
            assert!(px.0 > 40.0 && px.0 < 88.0, "cx {}", px.0);
            assert!(px.1 > 40.0 && px.1 < 88.0, "cy {}", px.1);
        }
        // Front camera distance to target is the configured radius.
        let c0 = cams[0].center_world();
        let d = (c0[0].powi(2) + c0[1].powi(2) + (c0[2] + 20.0).powi(2)).sqrt();
        assert!((d - 550.0).abs() < 1e-6, "front cam radius {d}");
    }

    #[test]
    fn detail_disk_masks_weights() {
        let cfg = SceneConfig::default();
        let topo = crate::geometry::make_grid_topology(17, 17, 0.0);
        let wm = mesh_weights(&cfg, &topo);
        let wl = laplacian_weights(&cfg, &topo);
        let mut inside = 0;
        for v in 0..topo.vertex_count() {
            let uv = topo.vertex_uvs[v];
            if cfg.in_detail_disk([uv[0], uv[1]]) {
                inside += 1;
                assert_eq!(wm.data[v], 0.0);
                assert_eq!(wl.data[v], 1.25);
            } else {
                assert_eq!(wm.data[v], 1.0);
                assert_eq!(wl.data[v], 0.25);
            }
        }
        assert!(inside > 3, "disk must cover some vertices, got {inside}");
        assert!(inside < topo.vertex_count() / 2);
    }

    #[test]
    fn texture_tracks_first_parameter() {
        let at = texture_rgb([0.3, 0.35], 1.0);
        let neutral = texture_rgb([0.3, 0.35], 0.0);
        let off = texture_rgb([0.3, 0.35], -2.0);
        // Stronger p0 pulls the blotch center toward the blotch color.
        assert!(at[0] > neutral[0] && neutral[0] > off[0]);
        // Far from the blotch the parameter has no effect.
        let a = texture_rgb([0.8, 0.8], 1.0);
        let b = texture_rgb([0.8, 0.8], -1.0);
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-6);
            assert!(a[c] >= 0.02 && a[c] <= 0.98);
        }
    }

    #[test]
    fn shading_is_view_dependent_but_bounded() {
        let n = [0.0, 0.0, -1.0];
        let p = [0.0, 0.0, -45.0];
        let tex = [0.5, 0.5, 0.5];
        let a = shade(tex, n, p, [0.0, 0.0, -570.0]);
        let b = shade(tex, n, p, [400.0, 0.0, -400.0]);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(b.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-4), "specular must move");
    }
}
