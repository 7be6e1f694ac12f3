//! Frame assembly: decode geometry, rasterize, decode color per covered
//! pixel, and compose images.
//!
//! The geometry path stays on the tape end to end; the rasterizer runs on
//! plain values and its outputs (coverage, barycentrics, interpolated uv
//! and xyz) re-enter the graph as constants. Pixel depth re-enters
//! differentiably by interpolating per-vertex camera depth with the fixed
//! barycentrics, so depth-type losses reach the geometry decoder while the
//! color loss cannot.

use super::{Bound, PicaModel, Variant};
use crate::diff::{DiffError, Tape, Tensor, ValId};
use crate::geometry::{sample_position_map, MeshTopology};
use crate::raster::{collect_covered, rasterize, Camera, CoveredPixels, GBuffer, RasterError};
use crate::Real;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Work accounting for one rendered frame. FLOP figures are analytic
/// (multiply-accumulate counted as 2) and cover network work only — the
/// integer rasterizer is not counted.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct RenderCounters {
    pub covered: usize,
    pub pixel_invocations: usize,
    pub per_object_flops: u64,
    pub per_pixel_flops: u64,
}

/// Per-frame constants for rendering one camera view.
pub struct FrameInputs<'a> {
    pub cam: &'a Camera,
    /// Tracked coarse position map `[P,P,3]`; required by `Variant::Coarse`,
    /// ignored otherwise.
    pub coarse_posmap: Option<&'a Tensor>,
}

/// Tape handles and raster products for one decoded frame.
pub struct FrameGraph {
    /// Dense position map `[P,P,3]`, mm.
    pub posmap: ValId,
    /// Dense mesh vertices `[N,3]` sampled from the position map.
    pub verts: ValId,
    /// Expression code map `[E,E,4]`.
    pub expr_map: ValId,
    pub gb: GBuffer,
    pub cov: CoveredPixels,
    /// Raw (unclamped) colors `[P_cov,3]`; `None` when nothing is covered.
    pub rgb: Option<ValId>,
    /// Differentiable camera-space depth `[P_cov,1]`, mm.
    pub depth_px: Option<ValId>,
    pub counters: RenderCounters,
}

fn conv_flops(cin: usize, cout: usize, k: usize, hout: usize, wout: usize) -> u64 {
    // MACs ×2, plus bias and activation per output element.
    (hout * wout * cout * (2 * cin * k * k + 2)) as u64
}

fn convt_flops(cin: usize, cout: usize, k: usize, hin: usize, win: usize) -> u64 {
    (hin * win * cin * cout * k * k * 2 + 4 * hin * win * cout * 2) as u64
}

fn linear_flops(rows: usize, fin: usize, fout: usize) -> u64 {
    (rows * (2 * fin * fout + fout)) as u64
}

/// Bilinear fetch of `c` channels: corner weights plus 4 mul + 3 add per
/// channel.
fn sample_flops(c: usize) -> u64 {
    (10 + 7 * c) as u64
}

impl PicaModel {
    /// Analytic FLOPs for one geometry-decoder forward.
    pub fn geometry_decoder_flops(&self) -> u64 {
        if self.cfg.variant == Variant::Coarse {
            return 0;
        }
        let widths = self.cfg.geo_widths();
        let mut total = 0;
        let mut cin = super::LATENT_CH;
        let mut h = super::LATENT_GRID;
        for &cout in &widths {
            total += convt_flops(cin, cout, 4, h, h);
            cin = cout;
            h *= 2;
        }
        // Scalar scale and channel offset on the final [P,P,3] map.
        total + (2 * h * h / 4 * 3) as u64
    }

    /// Analytic FLOPs for one expression-decoder forward.
    pub fn expression_decoder_flops(&self) -> u64 {
        let widths = self.cfg.expr_widths();
        let mut total = 0;
        let mut cin = super::LATENT_CH + 3;
        let mut h = super::LATENT_GRID;
        for &cout in &widths {
            total += convt_flops(cin, cout, 4, h, h);
            cin = cout;
            h *= 2;
        }
        total
    }

    /// Analytic FLOPs for one encoder forward.
    pub fn encoder_flops(&self) -> u64 {
        let p = self.cfg.posmap_res;
        let cb = self.cfg.channel_base;
        let mut total = conv_flops(3, 4 * cb, 4, 2 * p, 2 * p)
            + conv_flops(4 * cb, 2 * cb, 4, p, p)
            + conv_flops(3, 2 * cb, 1, p, p);
        let mut cin = 4 * cb;
        let mut h = p;
        for &cout in &self.cfg.enc_widths() {
            h /= 2;
            total += conv_flops(cin, cout, 4, h, h);
            cin = cout;
        }
        total + 2 * conv_flops(cin, super::LATENT_CH, 1, h, h)
    }

    /// Analytic FLOPs spent on one covered pixel: expression-code sample,
    /// xyz encoding, the variant's uv encoding, the sine decoder, and the
    /// barycentric depth gather.
    pub fn per_pixel_cost(&self) -> u64 {
        let fl = self.cfg.variant.feature_len();
        let pix = linear_flops(1, fl, 8)
            + 8
            + linear_flops(1, 8, 8)
            + 8
            + linear_flops(1, 8, 8)
            + 8
            + linear_flops(1, 8, 3);
        let xyz = 6 + linear_flops(1, 3, 4) + 4 + linear_flops(1, 4, 4) + 4;
        let tail = match self.cfg.variant {
            Variant::Full | Variant::Coarse => sample_flops(4) + 2 * sample_flops(2),
            Variant::NoUv | Variant::UvNope => 0,
            Variant::NerfPe => 3 * 40,
            Variant::Pe2d => sample_flops(4),
            Variant::Pe1d => 2 * sample_flops(2),
        };
        sample_flops(4) + xyz + tail + pix + 5
    }
}

/// Decode and rasterize one frame for one camera from latent `z`.
pub fn render_frame(
    t: &mut Tape,
    model: &PicaModel,
    b: &Bound,
    z: ValId,
    topo: &MeshTopology,
    inputs: &FrameInputs,
) -> Result<FrameGraph, RenderError> {
    let p = model.cfg.posmap_res;
    let posmap = if model.cfg.variant == Variant::Coarse {
        let coarse = inputs.coarse_posmap.ok_or_else(|| {
            DiffError::invalid("render_frame", "coarse variant needs a tracked position map")
        })?;
        if coarse.shape != [p, p, 3] {
            return Err(DiffError::shape(
                "render_frame",
                format!("coarse map {:?}, want [{p},{p},3]", coarse.shape),
            )
            .into());
        }
        t.constant(coarse.clone())
    } else {
        model.decode_geometry(t, b, z)?
    };
    let verts = sample_position_map(t, posmap, topo)?;
    let gb = rasterize(t.value(verts), topo, inputs.cam);
    let cov = collect_covered(&gb, topo);

    let view = inputs.cam.view_direction()?;
    let expr_map = model.decode_expression(t, b, z, view)?;

    let n_verts = topo.vertex_count() as u64;
    let mut counters = RenderCounters {
        covered: cov.len(),
        pixel_invocations: 0,
        per_object_flops: model.geometry_decoder_flops()
            + model.expression_decoder_flops()
            + n_verts * sample_flops(3)
            + n_verts * 6,
        per_pixel_flops: 0,
    };

    if cov.is_empty() {
        return Ok(FrameGraph {
            posmap,
            verts,
            expr_map,
            gb,
            cov,
            rgb: None,
            depth_px: None,
            counters,
        });
    }

    let uv_px = t.constant(cov.uv.clone());
    let z_px = t.bilinear_sample(expr_map, uv_px)?;
    let feats = model.assemble_features(t, b, z_px, &cov.xyz, &cov.uv)?;
    let rgb = model.pixel_color(t, b, feats)?;
    counters.pixel_invocations = cov.len();
    counters.per_pixel_flops = counters.pixel_invocations as u64 * model.per_pixel_cost();
    debug_assert_eq!(counters.pixel_invocations, counters.covered);

    let r2 = inputs.cam.r[2];
    let row = [r2[0] as Real, r2[1] as Real, r2[2] as Real];
    let vz = t.dot_rows_const(verts, row, inputs.cam.t[2] as Real)?;
    let n = t.shape(vz)[0];
    let vz = t.reshape(vz, &[n, 1])?;
    let depth_px = t.gather_weighted(vz, cov.faces.clone(), cov.bary.clone())?;

    Ok(FrameGraph {
        posmap,
        verts,
        expr_map,
        gb,
        cov,
        rgb: Some(rgb),
        depth_px: Some(depth_px),
        counters,
    })
}

/// Place clamped pixel colors into an `[H,W,3]` image over a constant
/// background.
pub fn compose_image(
    gb: &GBuffer,
    cov: &CoveredPixels,
    rgb: Option<&Tensor>,
    background: [Real; 3],
) -> Tensor {
    let mut img = Tensor::from_fn(&[gb.height, gb.width, 3], |i| background[i % 3]);
    if let Some(rgb) = rgb {
        assert_eq!(rgb.shape, &[cov.len(), 3], "color rows");
        for (i, &pix) in cov.pixel_indices.iter().enumerate() {
            for c in 0..3 {
                img.data[pix as usize * 3 + c] = rgb.data[i * 3 + c].clamp(0.0, 1.0);
            }
        }
    }
    img
}
