//! Training objective: weighted image, depth, normal, mesh, smoothness,
//! and KL terms.
//!
//! Gradient routing is set by graph construction, not by anything here:
//! the color path consumes rasterized uv/xyz as constants, so the image
//! term cannot reach the geometry decoder, while depth, normal, mesh, and
//! smoothness act on tape-resident geometry. Validity masks are computed
//! from forward values and enter the tape as constants; ground-truth
//! entries under a zero mask are sanitized to 0 so no `inf · 0` can poison
//! the graph.

use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Tape, Tensor, ValId};
use crate::geometry::{sample_position_map, MeshTopology};
use crate::model::SmoothnessContext;
use crate::raster::{normals_from_depth_tape, Camera, CoveredPixels, GBuffer};
use crate::Real;

/// Depth residuals at or beyond this magnitude (mm) are gated out of the
/// depth and normal terms.
pub const DEPTH_GATE_MM: Real = 10.0;

/// Outer per-term weights plus the two inner smoothness weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub image: Real,
    pub depth: Real,
    pub normal: Real,
    pub mesh: Real,
    pub smooth: Real,
    pub kl: Real,
    /// Inner weight on the position-map gradient part of the smoothness term.
    pub smooth_grad: Real,
    /// Inner weight on the weighted-Laplacian part of the smoothness term.
    pub smooth_lap: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            image: 2.0,
            depth: 10.0,
            normal: 1.0,
            mesh: 0.1,
            smooth: 1.0,
            kl: 0.001,
            smooth_grad: 1.0,
            smooth_lap: 0.1,
        }
    }
}

/// Per-frame term handles; `None` marks a term that could not be formed
/// (no coverage, no valid depth) and contributes nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub image: Option<ValId>,
    pub depth: Option<ValId>,
    pub normal: Option<ValId>,
    pub mesh: Option<ValId>,
    pub smooth: Option<ValId>,
    pub kl: Option<ValId>,
}

/// Mean squared color error over covered pixels, normalized by `P·3`.
pub fn image_loss(t: &mut Tape, pred: ValId, gt: &Tensor) -> Result<ValId, DiffError> {
    let s = t.shape(pred).to_vec();
    if s.len() != 2 || s[1] != 3 || gt.shape != s {
        return Err(DiffError::shape(
            "image_loss",
            format!("pred {:?} vs gt {:?}", s, gt.shape),
        ));
    }
    let g = t.constant(gt.clone());
    let d = t.sub(pred, g)?;
    let sq = t.square(d)?;
    Ok(t.mean(sq))
}

pub struct DepthLoss {
    pub loss: ValId,
    /// Per covered pixel: finite ground truth and residual inside the gate.
    pub mask: Vec<bool>,
    pub n_valid: usize,
}

/// Gated L1 depth error over covered pixels, mean over valid ones.
///
/// Ground truth `gt` holds one depth (mm) per covered pixel; entries that
/// are non-finite or not positive mark pixels without supervision
/// (background, holes). The gate compares forward values only, so the mask
/// is a constant of the graph.
pub fn depth_loss(
    t: &mut Tape,
    pred: ValId,
    gt: &Tensor,
    gate_mm: Real,
) -> Result<DepthLoss, DiffError> {
    let p = gt.numel();
    if t.shape(pred) != [p, 1] {
        return Err(DiffError::shape(
            "depth_loss",
            format!("pred {:?} vs {} gt pixels", t.shape(pred), p),
        ));
    }
    let pv = t.value(pred);
    let mut mask = vec![false; p];
    let mut sane = vec![0.0 as Real; p];
    let mut n_valid = 0;
    for i in 0..p {
        let d = gt.data[i];
        if d.is_finite() && d > 0.0 && (pv.data[i] - d).abs() < gate_mm {
            mask[i] = true;
            sane[i] = d;
            n_valid += 1;
        }
    }
    if n_valid == 0 {
        return Ok(DepthLoss { loss: t.constant_scalar(0.0), mask, n_valid });
    }
    let g = t.constant(Tensor::new(sane, &[p, 1]));
    let m = t.constant(Tensor::from_fn(&[p, 1], |i| if mask[i] { 1.0 } else { 0.0 }));
    let d = t.sub(pred, g)?;
    let a = t.abs(d);
    let sel = t.mul(a, m)?;
    let s = t.sum(sel);
    Ok(DepthLoss { loss: t.scale(s, 1.0 / n_valid as Real), mask, n_valid })
}

/// Squared screen-space normal error, mean over pixels that survive every
/// mask: depth-gated (`wd`), structurally valid for finite differencing,
/// and carrying ground truth (`gt_valid`).
///
/// Predicted normals come from the differentiable depth map, so this term
/// reaches the geometry decoder. `gt_normals` must be finite everywhere;
/// unsupervised pixels are excluded by `gt_valid`, not by sentinels.
pub fn normal_loss(
    t: &mut Tape,
    depth_px: ValId,
    gb: &GBuffer,
    cov: &CoveredPixels,
    cam: &Camera,
    wd: &[bool],
    gt_normals: &Tensor,
    gt_valid: &[bool],
) -> Result<(ValId, usize), DiffError> {
    let (h, w) = (gb.height, gb.width);
    let p = cov.len();
    if t.shape(depth_px) != [p, 1] || wd.len() != p {
        return Err(DiffError::shape(
            "normal_loss",
            format!("depth {:?} vs {} covered pixels", t.shape(depth_px), p),
        ));
    }
    if gt_normals.shape != [h, w, 3] || gt_valid.len() != h * w {
        return Err(DiffError::shape(
            "normal_loss",
            format!("gt {:?} for {h}x{w} image", gt_normals.shape),
        ));
    }
    if !gt_normals.is_finite() {
        return Err(DiffError::invalid("normal_loss", "non-finite ground-truth normals"));
    }
    let d = t.reshape(depth_px, &[p])?;
    let dmap = t.scatter_to_map(d, cov.pixel_indices.clone(), h, w, 0.0)?;
    let covered = gb.coverage();
    let (n_pred, n_ok) = normals_from_depth_tape(t, dmap, cam, &covered)?;
    let mut gated = vec![false; h * w];
    for (i, &pix) in cov.pixel_indices.iter().enumerate() {
        gated[pix as usize] = wd[i];
    }
    let mut count = 0;
    let m3 = Tensor::from_fn(&[h, w, 3], |i| {
        let px = i / 3;
        if n_ok[px] && gated[px] && gt_valid[px] {
            if i % 3 == 0 {
                count += 1;
            }
            1.0
        } else {
            0.0
        }
    });
    if count == 0 {
        return Ok((t.constant_scalar(0.0), 0));
    }
    let g = t.constant(gt_normals.clone());
    let diff = t.sub(n_pred, g)?;
    let sq = t.square(diff)?;
    let m = t.constant(m3);
    let sel = t.mul(sq, m)?;
    let s = t.sum(sel);
    Ok((t.scale(s, 1.0 / count as Real), count))
}

/// Masked squared distance between the decoded position map sampled at the
/// tracked mesh's uv sites and the tracked vertices themselves, divided by
/// the number of unmasked vertices.
pub fn mesh_loss(
    t: &mut Tape,
    posmap: ValId,
    tracked: &Tensor,
    topo: &MeshTopology,
    w_m: &Tensor,
) -> Result<(ValId, usize), DiffError> {
    let m = topo.vertex_count();
    if tracked.shape != [m, 3] || w_m.shape != [m] {
        return Err(DiffError::shape(
            "mesh_loss",
            format!("tracked {:?}, weights {:?}, {m} vertices", tracked.shape, w_m.shape),
        ));
    }
    let n_masked = w_m.data.iter().filter(|&&v| v > 0.0).count();
    if n_masked == 0 {
        return Ok((t.constant_scalar(0.0), 0));
    }
    let pred = sample_position_map(t, posmap, topo)?;
    let g = t.constant(tracked.clone());
    let d = t.sub(pred, g)?;
    let sq = t.square(d)?;
    let wc = t.constant(w_m.clone());
    let sel = t.mul_rows(sq, wc)?;
    let s = t.sum(sel);
    Ok((t.scale(s, 1.0 / n_masked as Real), n_masked))
}

/// Geometric smoothness: mean squared forward differences of the position
/// map in u and v, plus the mean squared weighted Laplacian of the dense
/// vertices relative to the slow-moving target `V_mu`.
pub fn smoothness_loss(
    t: &mut Tape,
    posmap: ValId,
    dense_verts: ValId,
    ctx: &SmoothnessContext,
    lambda_g: Real,
    lambda_l: Real,
) -> Result<ValId, DiffError> {
    let gx = t.fwd_diff_x(posmap)?;
    let gy = t.fwd_diff_y(posmap)?;
    let gx2 = t.square(gx)?;
    let gy2 = t.square(gy)?;
    let mx = t.mean(gx2);
    let my = t.mean(gy2);
    let grad = t.add(mx, my)?;

    let vshape = t.shape(dense_verts).to_vec();
    if ctx.v_mu.shape != vshape || ctx.w_l.shape != [vshape[0]] {
        return Err(DiffError::shape(
            "smoothness_loss",
            format!("verts {:?}, v_mu {:?}, w_l {:?}", vshape, ctx.v_mu.shape, ctx.w_l.shape),
        ));
    }
    let mu = t.constant(ctx.v_mu.clone());
    let r = t.sub(dense_verts, mu)?;
    let lr = t.spmv(ctx.lap.clone(), r)?;
    let wl = t.constant(ctx.w_l.clone());
    let wr = t.mul_rows(lr, wl)?;
    let sq = t.square(wr)?;
    let lap = t.mean(sq);

    let a = t.scale(grad, lambda_g);
    let b = t.scale(lap, lambda_l);
    t.add(a, b)
}

/// `-1/2 Σ (1 + logvar - mu² - exp(logvar))`, summed over the latent.
pub fn kl_loss(t: &mut Tape, mu: ValId, logvar: ValId) -> Result<ValId, DiffError> {
    if t.shape(mu) != t.shape(logvar) {
        return Err(DiffError::shape(
            "kl_loss",
            format!("mu {:?} vs logvar {:?}", t.shape(mu), t.shape(logvar)),
        ));
    }
    let mu2 = t.square(mu)?;
    let ev = t.exp(logvar);
    let s1 = t.add_scalar(logvar, 1.0);
    let s2 = t.sub(s1, mu2)?;
    let s3 = t.sub(s2, ev)?;
    let s = t.sum(s3);
    Ok(t.scale(s, -0.5))
}

/// Weighted sum of the present terms.
pub fn total_loss(t: &mut Tape, w: &LossWeights, terms: &LossTerms) -> Result<ValId, DiffError> {
    let parts = [
        (terms.image, w.image),
        (terms.depth, w.depth),
        (terms.normal, w.normal),
        (terms.mesh, w.mesh),
        (terms.smooth, w.smooth),
        (terms.kl, w.kl),
    ];
    let mut acc: Option<ValId> = None;
    for (term, weight) in parts {
        if let Some(id) = term {
            let scaled = t.scale(id, weight);
            acc = Some(match acc {
                Some(a) => t.add(a, scaled)?,
                None => scaled,
            });
        }
    }
    Ok(acc.unwrap_or_else(|| t.constant_scalar(0.0)))
}
