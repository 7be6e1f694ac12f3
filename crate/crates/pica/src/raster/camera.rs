//! Calibrated pinhole camera: K intrinsics in pixels, world-to-camera
//! extrinsics in millimeters. Internals are f64 so projection round-trips
//! far below raster precision.

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::raster::RasterError;
use crate::Real;

/// Triangles any vertex of which sits closer than this are discarded whole.
pub const NEAR_MM: f64 = 1.0;

pub type Vec3d = [f64; 3];
pub type Mat3d = [[f64; 3]; 3];

pub(crate) fn matvec(m: &Mat3d, v: Vec3d) -> Vec3d {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn transpose(m: &Mat3d) -> Mat3d {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Camera {
    /// Intrinsics [[fx,0,cx],[0,fy,cy],[0,0,1]].
    pub k: Mat3d,
    /// World-to-camera rotation (rows are camera axes in world coords).
    pub r: Mat3d,
    /// World-to-camera translation, millimeters.
    pub t: Vec3d,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        k: Mat3d,
        r: Mat3d,
        t: Vec3d,
        width: usize,
        height: usize,
    ) -> Result<Camera, RasterError> {
        if k[0][0] <= 0.0 || k[1][1] <= 0.0 {
            return Err(RasterError::BadCamera("focal lengths must be positive".into()));
        }
        // R R^T = I within 1e-6.
        let rt = transpose(&r);
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for (k_, rt_k) in rt.iter().enumerate() {
                    s += r[i][k_] * rt_k[j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                if (s - want).abs() > 1e-6 {
                    return Err(RasterError::BadCamera("rotation is not orthonormal".into()));
                }
            }
        }
        Ok(Camera { k, r, t, width, height })
    }

    pub fn fx(&self) -> f64 {
        self.k[0][0]
    }
    pub fn fy(&self) -> f64 {
        self.k[1][1]
    }
    pub fn cx(&self) -> f64 {
        self.k[0][2]
    }
    pub fn cy(&self) -> f64 {
        self.k[1][2]
    }

    /// World point to camera space: R p + t.
    pub fn to_camera(&self, p: Vec3d) -> Vec3d {
        let v = matvec(&self.r, p);
        [v[0] + self.t[0], v[1] + self.t[1], v[2] + self.t[2]]
    }

    /// Pinhole projection to (screen x, screen y, camera-space depth).
    /// `None` when the point sits on or behind the near plane.
    pub fn project(&self, p: Vec3d) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c[2] <= NEAR_MM {
            return None;
        }
        let sx = self.fx() * c[0] / c[2] + self.cx();
        let sy = self.fy() * c[1] / c[2] + self.cy();
        Some((sx, sy, c[2]))
    }

    /// Screen position plus camera-space depth back to a camera-space point.
    pub fn unproject_cam(&self, sx: f64, sy: f64, depth: f64) -> Vec3d {
        [
            (sx - self.cx()) / self.fx() * depth,
            (sy - self.cy()) / self.fy() * depth,
            depth,
        ]
    }

    /// Screen position plus camera-space depth back to a world point.
    pub fn unproject(&self, sx: f64, sy: f64, depth: f64) -> Vec3d {
        let c = self.unproject_cam(sx, sy, depth);
        let d = [c[0] - self.t[0], c[1] - self.t[1], c[2] - self.t[2]];
        matvec(&transpose(&self.r), d)
    }

    /// Unit view vector R^T t in world (face-centric) coordinates.
    pub fn view_direction(&self) -> Result<[Real; 3], RasterError> {
        let v = matvec(&transpose(&self.r), self.t);
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n == 0.0 {
            return Err(RasterError::BadCamera("zero translation has no view direction".into()));
        }
        Ok([(v[0] / n) as Real, (v[1] / n) as Real, (v[2] / n) as Real])
    }

    /// Camera center in world coordinates: -R^T t.
    pub fn center_world(&self) -> Vec3d {
        let v = matvec(&transpose(&self.r), self.t);
        [-v[0], -v[1], -v[2]]
    }

    /// Per-pixel z-normalized ray directions through pixel centers, as an
    /// H×W×3 tensor: camera point = direction * depth.
    pub fn ray_dirs_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[h, w, 3], |i| {
            let k = i % 3;
            let p = i / 3;
            let (y, x) = (p / w, p % w);
            match k {
                0 => (((x as f64 + 0.5) - self.cx()) / self.fx()) as Real,
                1 => (((y as f64 + 0.5) - self.cy()) / self.fy()) as Real,
                _ => 1.0,
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn simple_k() -> Mat3d {
        [[200.0, 0.0, 64.0], [0.0, 200.0, 64.0], [0.0, 0.0, 1.0]]
    }

    fn ident() -> Mat3d {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = Camera::new(simple_k(), ident(), [0.0, 0.0, 500.0], 128, 128).unwrap();
        let (sx, sy, z) = cam.project([0.0, 0.0, 0.0]).unwrap();
        assert!((sx - 64.0).abs() < 1e-12);
        assert!((sy - 64.0).abs() < 1e-12);
        assert!((z - 500.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_focal_doubles_offset_from_principal_point() {
        let cam1 = Camera::new(simple_k(), ident(), [0.0, 0.0, 500.0], 128, 128).unwrap();
        let mut k2 = simple_k();
        k2[0][0] *= 2.0;
        k2[1][1] *= 2.0;
        let cam2 = Camera::new(k2, ident(), [0.0, 0.0, 500.0], 128, 128).unwrap();
        let p = [30.0, -18.0, 40.0];
        let (x1, y1, _) = cam1.project(p).unwrap();
        let (x2, y2, _) = cam2.project(p).unwrap();
        assert!((x2 - 64.0 - 2.0 * (x1 - 64.0)).abs() < 1e-9);
        assert!((y2 - 64.0 - 2.0 * (y1 - 64.0)).abs() < 1e-9);
    }

    #[test]
    fn project_unproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // A non-trivial but orthonormal rotation: 30 deg yaw, 20 deg pitch.
        let (a, b) = (0.5235987755982988_f64, 0.3490658503988659_f64);
        let yaw = [[a.cos(), 0.0, a.sin()], [0.0, 1.0, 0.0], [-a.sin(), 0.0, a.cos()]];
        let pitch = [[1.0, 0.0, 0.0], [0.0, b.cos(), -b.sin()], [0.0, b.sin(), b.cos()]];
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k_, yrow) in yaw.iter().enumerate() {
                    r[i][j] += pitch[i][k_] * yrow[j];
                }
            }
        }
        let cam = Camera::new(simple_k(), r, [12.0, -9.0, 540.0], 128, 128).unwrap();
        for _ in 0..200 {
            let p = [
                rng.gen_range(-80.0..80.0),
                rng.gen_range(-80.0..80.0),
                rng.gen_range(-60.0..60.0),
            ];
            let Some((sx, sy, z)) = cam.project(p) else { continue };
            let q = cam.unproject(sx, sy, z);
            for k in 0..3 {
                assert!((q[k] - p[k]).abs() < 1e-4, "coord {k}: {} vs {}", q[k], p[k]);
            }
        }
    }

    #[test]
    fn behind_near_plane_is_rejected() {
        let cam = Camera::new(simple_k(), ident(), [0.0, 0.0, 500.0], 128, 128).unwrap();
        assert!(cam.project([0.0, 0.0, -499.5]).is_none());
        assert!(cam.project([0.0, 0.0, -501.0]).is_none());
    }

    #[test]
    fn view_direction_cases() {
        let cam = Camera::new(simple_k(), ident(), [0.0, 0.0, 5.0], 128, 128).unwrap();
        let v = cam.view_direction().unwrap();
        assert!((v[0]).abs() < 1e-6 && (v[1]).abs() < 1e-6 && (v[2] - 1.0).abs() < 1e-6);

        // 90 degree yaw: R maps world +x to camera +z.
        let r = [[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        let cam = Camera::new(simple_k(), r, [3.0, 0.0, 4.0], 128, 128).unwrap();
        let v = cam.view_direction().unwrap();
        // R^T t = (4, 0, -3)/5.
        assert!((v[0] - 0.8).abs() < 1e-6);
        assert!((v[1]).abs() < 1e-6);
        assert!((v[2] + 0.6).abs() < 1e-6);

        let cam = Camera::new(simple_k(), ident(), [0.0, 0.0, 0.0], 128, 128).unwrap();
        assert!(cam.view_direction().is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let t = [
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(1.0..5.0),
            ];
            let cam = Camera::new(simple_k(), ident(), t, 128, 128).unwrap();
            let v = cam.view_direction().unwrap();
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) as f64;
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_cameras_are_rejected() {
        let mut k = simple_k();
        k[0][0] = -1.0;
        assert!(Camera::new(k, ident(), [0.0; 3], 64, 64).is_err());
        let r = [[1.0, 0.0, 0.0], [0.9, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(simple_k(), r, [0.0; 3], 64, 64).is_err());
    }
}
