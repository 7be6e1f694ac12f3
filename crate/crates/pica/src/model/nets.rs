//! Forward graphs for the encoder, decoders, and encodings.
//!
//! Convolutional stages run on `[C,H,W]` tensors; maps handed to samplers
//! are `[H,W,C]`. Decoder outputs stay in `[H,W,C]` since everything
//! downstream samples them.

use super::{Bound, PicaModel, LATENT_CH, LATENT_GRID};
use crate::diff::{DiffError, Tape, Tensor, ValId};
use crate::Real;

/// Tile one unit view vector into a `[3,8,8]` conditioning block.
pub fn view_tile(dir: [Real; 3]) -> Result<Tensor, DiffError> {
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(DiffError::invalid(
            "view_tile",
            format!("view vector norm {norm} != 1"),
        ));
    }
    Ok(Tensor::from_fn(&[3, LATENT_GRID, LATENT_GRID], |i| {
        dir[i / (LATENT_GRID * LATENT_GRID)]
    }))
}

/// Fixed sinusoidal uv encoding: `[sin(2^k π u), cos(2^k π u)]` for
/// `k < n_freq`, then the same for v — `4·n_freq` values.
pub fn encode_uv_sinusoidal(u: Real, v: Real, n_freq: usize) -> Vec<Real> {
    let mut out = Vec::with_capacity(4 * n_freq);
    for &c in &[u, v] {
        for k in 0..n_freq {
            let a = (1u64 << k) as Real * std::f64::consts::PI as Real * c;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

impl PicaModel {
    fn conv_block(
        &self,
        t: &mut Tape,
        b: &Bound,
        name: &str,
        x: ValId,
        stride: usize,
        pad: usize,
    ) -> Result<ValId, DiffError> {
        let w = self.pid(b, &format!("{name}.w"));
        let bias = self.pid(b, &format!("{name}.b"));
        let y = t.conv2d(x, w, Some(bias), stride, pad)?;
        Ok(t.leaky_relu(y, 0.2))
    }

    /// Upsampling block: transposed conv k4 s2, channel bias, optional
    /// leaky activation. Returns `[H,W,C]` when `last`, else `[C,H,W]`.
    fn up_block(
        &self,
        t: &mut Tape,
        b: &Bound,
        name: &str,
        x: ValId,
        last: bool,
    ) -> Result<ValId, DiffError> {
        let w = self.pid(b, &format!("{name}.w"));
        let bias = self.pid(b, &format!("{name}.b"));
        let y = t.conv_t2d(x, w, 2, 1)?;
        let y = t.chw_to_hwc(y)?;
        let y = t.add_channel_bias(y, bias)?;
        if last {
            return Ok(y);
        }
        let y = t.leaky_relu(y, 0.2);
        t.hwc_to_chw(y)
    }

    /// Variational encoder: average texture `[3,4P,4P]` plus coarse
    /// position map `[3,P,P]` to `(mu, logvar)`, each `[4,8,8]`.
    pub fn encode(
        &self,
        t: &mut Tape,
        b: &Bound,
        avgtex: ValId,
        coarse: ValId,
    ) -> Result<(ValId, ValId), DiffError> {
        let p = self.cfg.posmap_res;
        if t.shape(avgtex) != [3, 4 * p, 4 * p] {
            return Err(DiffError::shape(
                "encode",
                format!("avg texture {:?}, want [3,{},{}]", t.shape(avgtex), 4 * p, 4 * p),
            ));
        }
        if t.shape(coarse) != [3, p, p] {
            return Err(DiffError::shape(
                "encode",
                format!("coarse map {:?}, want [3,{p},{p}]", t.shape(coarse)),
            ));
        }
        let tex = self.conv_block(t, b, "enc.tex0", avgtex, 2, 1)?;
        let tex = self.conv_block(t, b, "enc.tex1", tex, 2, 1)?;
        let geo = self.conv_block(t, b, "enc.geo", coarse, 1, 0)?;
        let mut h = t.concat(&[tex, geo], 0)?;
        for i in 0..self.cfg.n_blocks() {
            h = self.conv_block(t, b, &format!("enc.block{i}"), h, 2, 1)?;
        }
        let mu = t.conv2d(h, self.pid(b, "enc.mu.w"), Some(self.pid(b, "enc.mu.b")), 1, 0)?;
        let lv = t.conv2d(
            h,
            self.pid(b, "enc.logvar.w"),
            Some(self.pid(b, "enc.logvar.b")),
            1,
            0,
        )?;
        Ok((mu, lv))
    }

    /// `Z = mu + exp(logvar/2) ⊙ eps` with caller-supplied standard-normal
    /// draws, so sampling is exactly as deterministic as its seed.
    pub fn reparameterize(
        &self,
        t: &mut Tape,
        mu: ValId,
        logvar: ValId,
        eps: &Tensor,
    ) -> Result<ValId, DiffError> {
        let half = t.scale(logvar, 0.5);
        let std = t.exp(half);
        let e = t.constant(eps.clone());
        let noise = t.mul(std, e)?;
        t.add(mu, noise)
    }

    /// Latent to dense position map `[P,P,3]` in face-centric mm.
    pub fn decode_geometry(&self, t: &mut Tape, b: &Bound, z: ValId) -> Result<ValId, DiffError> {
        if t.shape(z) != [LATENT_CH, LATENT_GRID, LATENT_GRID] {
            return Err(DiffError::shape("decode_geometry", format!("z {:?}", t.shape(z))));
        }
        let n = self.cfg.n_blocks();
        let mut h = z;
        for i in 0..n {
            h = self.up_block(t, b, &format!("geo.block{i}"), h, i + 1 == n)?;
        }
        let h = t.mul_scalar_t(h, self.pid(b, "geo.scale"))?;
        t.add_channel_bias(h, self.pid(b, "geo.offset"))
    }

    /// Latent plus tiled unit view direction to the expression-code map
    /// `[E,E,4]`.
    pub fn decode_expression(
        &self,
        t: &mut Tape,
        b: &Bound,
        z: ValId,
        view: [Real; 3],
    ) -> Result<ValId, DiffError> {
        if t.shape(z) != [LATENT_CH, LATENT_GRID, LATENT_GRID] {
            return Err(DiffError::shape("decode_expression", format!("z {:?}", t.shape(z))));
        }
        let tile = t.constant(view_tile(view)?);
        let n = self.cfg.n_blocks();
        let mut h = t.concat(&[z, tile], 0)?;
        for i in 0..n {
            h = self.up_block(t, b, &format!("expr.block{i}"), h, i + 1 == n)?;
        }
        Ok(h)
    }

    /// Learned positional encoding at `[P,2]` uv points: 4 values from the
    /// 2D map plus 2 from each 1D table, all piecewise linear in (u,v).
    pub fn encode_uv(&self, t: &mut Tape, b: &Bound, uv: &Tensor) -> Result<ValId, DiffError> {
        let p = uv.shape[0];
        let coords = t.constant(uv.clone());
        let m_uv = t.bilinear_sample(self.pid(b, "embed.uv"), coords)?;
        let ucoords = t.constant(Tensor::from_fn(&[p, 2], |i| {
            if i % 2 == 0 {
                uv.data[(i / 2) * 2]
            } else {
                0.5
            }
        }));
        let m_u = t.bilinear_sample(self.pid(b, "embed.u"), ucoords)?;
        let vcoords = t.constant(Tensor::from_fn(&[p, 2], |i| {
            if i % 2 == 0 {
                uv.data[(i / 2) * 2 + 1]
            } else {
                0.5
            }
        }));
        let m_v = t.bilinear_sample(self.pid(b, "embed.v"), vcoords)?;
        t.concat(&[m_uv, m_u, m_v], 1)
    }

    /// Two-layer sine encoder over normalized face-centric coordinates.
    pub fn encode_xyz(&self, t: &mut Tape, b: &Bound, xyz_norm: ValId) -> Result<ValId, DiffError> {
        let w = self.cfg.omega;
        let h = t.linear(xyz_norm, self.pid(b, "xyz.l0.w"), Some(self.pid(b, "xyz.l0.b")))?;
        let h = t.sin_scaled(h, w);
        let h = t.linear(h, self.pid(b, "xyz.l1.w"), Some(self.pid(b, "xyz.l1.b")))?;
        Ok(t.sin_scaled(h, w))
    }

    /// Per-pixel color decoder: three sine layers and a final affine map,
    /// raw (unclamped) output.
    pub fn pixel_color(&self, t: &mut Tape, b: &Bound, feats: ValId) -> Result<ValId, DiffError> {
        let fl = self.cfg.variant.feature_len();
        let s = t.shape(feats).to_vec();
        if s.len() != 2 || s[1] != fl {
            return Err(DiffError::shape(
                "pixel_color",
                format!("features {s:?}, variant {} wants width {fl}", self.cfg.variant),
            ));
        }
        let w = self.cfg.omega;
        let h = t.linear(feats, self.pid(b, "pix.l0.w"), Some(self.pid(b, "pix.l0.b")))?;
        let h = t.sin_scaled(h, w);
        let h = t.linear(h, self.pid(b, "pix.l1.w"), Some(self.pid(b, "pix.l1.b")))?;
        let h = t.sin_scaled(h, w);
        let h = t.linear(h, self.pid(b, "pix.l2.w"), Some(self.pid(b, "pix.l2.b")))?;
        let h = t.sin_scaled(h, w);
        t.linear(h, self.pid(b, "pix.out.w"), Some(self.pid(b, "pix.out.b")))
    }

    /// Assemble the per-pixel feature block for the active variant from the
    /// sampled expression codes (tape) and the G-buffer's interpolated
    /// xyz/uv (constants — rasterized geometry is stop-gradient for the
    /// color path).
    pub fn assemble_features(
        &self,
        t: &mut Tape,
        b: &Bound,
        z_px: ValId,
        xyz: &Tensor,
        uv: &Tensor,
    ) -> Result<ValId, DiffError> {
        use super::Variant::*;
        let p = xyz.shape[0];
        let c = self.cfg.scene_center;
        let s = self.cfg.scene_half_extent;
        let xyz_norm = Tensor::from_fn(&[p, 3], |i| (xyz.data[i] - c[i % 3]) / s);
        let xn = t.constant(xyz_norm);
        let x_enc = self.encode_xyz(t, b, xn)?;
        let tail = match self.cfg.variant {
            Full | Coarse => Some(self.encode_uv(t, b, uv)?),
            NoUv => None,
            UvNope => Some(t.constant(uv.clone())),
            NerfPe => {
                let enc = Tensor::from_fn(&[p, 40], |i| {
                    let r = i / 40;
                    // Row-wise cache-free recompute is fine at these sizes.
                    encode_uv_sinusoidal(uv.data[r * 2], uv.data[r * 2 + 1], 10)[i % 40]
                });
                Some(t.constant(enc))
            }
            Pe2d => {
                let coords = t.constant(uv.clone());
                Some(t.bilinear_sample(self.pid(b, "embed.uv"), coords)?)
            }
            Pe1d => {
                let uc = t.constant(Tensor::from_fn(&[p, 2], |i| {
                    if i % 2 == 0 { uv.data[(i / 2) * 2] } else { 0.5 }
                }));
                let vc = t.constant(Tensor::from_fn(&[p, 2], |i| {
                    if i % 2 == 0 { uv.data[(i / 2) * 2 + 1] } else { 0.5 }
                }));
                let m_u = t.bilinear_sample(self.pid(b, "embed.u"), uc)?;
                let m_v = t.bilinear_sample(self.pid(b, "embed.v"), vc)?;
                Some(t.concat(&[m_u, m_v], 1)?)
            }
        };
        match tail {
            Some(tail) => t.concat(&[z_px, x_enc, tail], 1),
            None => t.concat(&[z_px, x_enc], 1),
        }
    }
}
