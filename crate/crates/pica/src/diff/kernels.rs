//! Dense numeric kernels backing the tape ops.
//!
//! Forward and backward passes are plain loops over row-major buffers. The
//! channel/row loops fan out through [`crate::exec`], always over disjoint
//! output slices, so parallel and sequential execution are bitwise equal.
//! Convolutions follow the usual sliding-window definition:
//! `out[o,y,x] = b[o] + sum_{c,ky,kx} in[c, y*s - p + ky, x*s - p + kx] * w[o,c,ky,kx]`
//! with zero padding outside the input.

use super::tensor::Tensor;
use crate::exec;
use crate::Real;

/// Output spatial size of a convolution, or `None` if the window never fits.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output spatial size of a transposed convolution.
pub fn convt_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let grown = (input - 1) * stride + k;
    if grown < 2 * pad || input == 0 {
        return None;
    }
    Some(grown - 2 * pad)
}

/// Convolution forward. `x` is `[C,H,W]`, `w` is `[O,C,K,K]`, `b` is `[O]`.
pub fn conv2d_fwd(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (c_in, h, wi) = (x.shape[0], x.shape[1], x.shape[2]);
    let (c_out, k) = (w.shape[0], w.shape[2]);
    let ho = conv_out_dim(h, k, stride, pad).unwrap();
    let wo = conv_out_dim(wi, k, stride, pad).unwrap();
    let mut out = Tensor::zeros(&[c_out, ho, wo]);
    let xs = &x.data;
    let ws = &w.data;
    exec::for_each_chunk_mut(&mut out.data, ho * wo, |o, plane| {
        if let Some(b) = b {
            plane.fill(b.data[o]);
        }
        for c in 0..c_in {
            let xbase = c * h * wi;
            let wbase = (o * c_in + c) * k * k;
            for ky in 0..k {
                let wrow = &ws[wbase + ky * k..wbase + (ky + 1) * k];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xs[xbase + iy as usize * wi..xbase + (iy as usize + 1) * wi];
                    let orow = &mut plane[oy * wo..(oy + 1) * wo];
                    for (kx, &wv) in wrow.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        // ix = ox*stride - pad + kx must lie in [0, wi)
                        let off = kx as isize - pad as isize;
                        let ox_lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
                        let ox_hi_excl = {
                            let lim = wi as isize - off; // need ox*stride < lim
                            if lim <= 0 {
                                0
                            } else {
                                (((lim - 1) as usize) / stride + 1).min(wo)
                            }
                        };
                        for ox in ox_lo..ox_hi_excl {
                            let ix = (ox * stride) as isize + off;
                            orow[ox] += xrow[ix as usize] * wv;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of a convolution w.r.t. its input. `g` is `[O,Ho,Wo]`.
pub fn conv2d_bwd_x(g: &Tensor, w: &Tensor, stride: usize, pad: usize, xshape: &[usize]) -> Tensor {
    let (c_in, h, wi) = (xshape[0], xshape[1], xshape[2]);
    let (c_out, k) = (w.shape[0], w.shape[2]);
    let (ho, wo) = (g.shape[1], g.shape[2]);
    let mut gx = Tensor::zeros(xshape);
    let gs = &g.data;
    let ws = &w.data;
    exec::for_each_chunk_mut(&mut gx.data, h * wi, |c, plane| {
        for o in 0..c_out {
            let gbase = o * ho * wo;
            let wbase = (o * c_in + c) * k * k;
            for oy in 0..ho {
                let grow = &gs[gbase + oy * wo..gbase + (oy + 1) * wo];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * wi..(iy as usize + 1) * wi];
                    for kx in 0..k {
                        let wv = ws[wbase + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let off = kx as isize - pad as isize;
                        for (ox, &gv) in grow.iter().enumerate() {
                            let ix = (ox * stride) as isize + off;
                            if ix >= 0 && ix < wi as isize {
                                prow[ix as usize] += gv * wv;
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Gradient of a convolution w.r.t. its weights.
pub fn conv2d_bwd_w(g: &Tensor, x: &Tensor, stride: usize, pad: usize, wshape: &[usize]) -> Tensor {
    let (c_in, h, wi) = (x.shape[0], x.shape[1], x.shape[2]);
    let k = wshape[2];
    let (ho, wo) = (g.shape[1], g.shape[2]);
    let mut gw = Tensor::zeros(wshape);
    let gs = &g.data;
    let xs = &x.data;
    exec::for_each_chunk_mut(&mut gw.data, c_in * k * k, |o, wchunk| {
        let gbase = o * ho * wo;
        for c in 0..c_in {
            let xbase = c * h * wi;
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    let off = kx as isize - pad as isize;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xs[xbase + iy as usize * wi..xbase + (iy as usize + 1) * wi];
                        let grow = &gs[gbase + oy * wo..gbase + (oy + 1) * wo];
                        for (ox, &gv) in grow.iter().enumerate() {
                            let ix = (ox * stride) as isize + off;
                            if ix >= 0 && ix < wi as isize {
                                acc += gv * xrow[ix as usize];
                            }
                        }
                    }
                    wchunk[(c * k + ky) * k + kx] = acc;
                }
            }
        }
    });
    gw
}

/// Gradient of a convolution w.r.t. its per-channel bias: `gb[o] = sum g[o,:,:]`.
pub fn conv2d_bwd_b(g: &Tensor) -> Tensor {
    let (c_out, ho, wo) = (g.shape[0], g.shape[1], g.shape[2]);
    let mut gb = Tensor::zeros(&[c_out]);
    for o in 0..c_out {
        gb.data[o] = g.data[o * ho * wo..(o + 1) * ho * wo].iter().sum();
    }
    gb
}

/// Transposed convolution forward. `x` is `[C,H,W]`, `w` is `[C,O,K,K]`
/// (input-major, so the same buffer serves as the adjoint of a convolution
/// with weight `[O,C,K,K]` after swapping the role of the first two axes).
/// `out[o, y*s - p + ky, x*s - p + kx] += in[c,y,x] * w[c,o,ky,kx]`.
pub fn convt2d_fwd(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c_in, h, wi) = (x.shape[0], x.shape[1], x.shape[2]);
    let (c_out, k) = (w.shape[1], w.shape[2]);
    let ho = convt_out_dim(h, k, stride, pad).unwrap();
    let wo = convt_out_dim(wi, k, stride, pad).unwrap();
    let mut out = Tensor::zeros(&[c_out, ho, wo]);
    let xs = &x.data;
    let ws = &w.data;
    exec::for_each_chunk_mut(&mut out.data, ho * wo, |o, plane| {
        for c in 0..c_in {
            let xbase = c * h * wi;
            let wbase = (c * c_out + o) * k * k;
            for iy in 0..h {
                let xrow = &xs[xbase + iy * wi..xbase + (iy + 1) * wi];
                for ky in 0..k {
                    let oy = (iy * stride + ky) as isize - pad as isize;
                    if oy < 0 || oy >= ho as isize {
                        continue;
                    }
                    let prow = &mut plane[oy as usize * wo..(oy as usize + 1) * wo];
                    for kx in 0..k {
                        let wv = ws[wbase + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let off = kx as isize - pad as isize;
                        for (ix, &xv) in xrow.iter().enumerate() {
                            let ox = (ix * stride) as isize + off;
                            if ox >= 0 && ox < wo as isize {
                                prow[ox as usize] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of a transposed convolution w.r.t. its input.
pub fn convt2d_bwd_x(g: &Tensor, w: &Tensor, stride: usize, pad: usize, xshape: &[usize]) -> Tensor {
    let (_c_in, h, wi) = (xshape[0], xshape[1], xshape[2]);
    let (c_out, k) = (w.shape[1], w.shape[2]);
    let (ho, wo) = (g.shape[1], g.shape[2]);
    let mut gx = Tensor::zeros(xshape);
    let gs = &g.data;
    let ws = &w.data;
    exec::for_each_chunk_mut(&mut gx.data, h * wi, |c, plane| {
        for o in 0..c_out {
            let gbase = o * ho * wo;
            let wbase = (c * c_out + o) * k * k;
            for iy in 0..h {
                let prow = &mut plane[iy * wi..(iy + 1) * wi];
                for ky in 0..k {
                    let oy = (iy * stride + ky) as isize - pad as isize;
                    if oy < 0 || oy >= ho as isize {
                        continue;
                    }
                    let grow = &gs[gbase + oy as usize * wo..gbase + (oy as usize + 1) * wo];
                    for kx in 0..k {
                        let wv = ws[wbase + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let off = kx as isize - pad as isize;
                        for (ix, pv) in prow.iter_mut().enumerate() {
                            let ox = (ix * stride) as isize + off;
                            if ox >= 0 && ox < wo as isize {
                                *pv += grow[ox as usize] * wv;
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Gradient of a transposed convolution w.r.t. its weights.
pub fn convt2d_bwd_w(g: &Tensor, x: &Tensor, stride: usize, pad: usize, wshape: &[usize]) -> Tensor {
    let (_c_in, h, wi) = (x.shape[0], x.shape[1], x.shape[2]);
    let (c_out, k) = (wshape[1], wshape[2]);
    let (ho, wo) = (g.shape[1], g.shape[2]);
    let mut gw = Tensor::zeros(wshape);
    let gs = &g.data;
    let xs = &x.data;
    exec::for_each_chunk_mut(&mut gw.data, c_out * k * k, |c, wchunk| {
        let xbase = c * h * wi;
        for o in 0..c_out {
            let gbase = o * ho * wo;
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    let off = kx as isize - pad as isize;
                    for iy in 0..h {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        let xrow = &xs[xbase + iy * wi..xbase + (iy + 1) * wi];
                        let grow = &gs[gbase + oy as usize * wo..gbase + (oy as usize + 1) * wo];
                        for (ix, &xv) in xrow.iter().enumerate() {
                            let ox = (ix * stride) as isize + off;
                            if ox >= 0 && ox < wo as isize {
                                acc += xv * grow[ox as usize];
                            }
                        }
                    }
                    wchunk[(o * k + ky) * k + kx] = acc;
                }
            }
        }
    });
    gw
}

/// Fully-connected forward: `x [N,I] · w[O,I]^T + b[O] -> [N,O]`.
pub fn linear_fwd(x: &Tensor, w: &Tensor, b: Option<&Tensor>, out_rows: usize) -> Tensor {
    let (i_dim, o_dim) = (w.shape[1], w.shape[0]);
    let mut out = Tensor::zeros(&[out_rows, o_dim]);
    let xs = &x.data;
    let ws = &w.data;
    exec::for_each_chunk_mut(&mut out.data, o_dim.max(1) * 64, |blk, rows| {
        let r0 = blk * 64;
        for (r, orow) in rows.chunks_mut(o_dim).enumerate() {
            let xrow = &xs[(r0 + r) * i_dim..(r0 + r + 1) * i_dim];
            for o in 0..o_dim {
                let wrow = &ws[o * i_dim..(o + 1) * i_dim];
                let mut acc = if let Some(b) = b { b.data[o] } else { 0.0 };
                for i in 0..i_dim {
                    acc += xrow[i] * wrow[i];
                }
                orow[o] = acc;
            }
        }
    });
    out
}

/// Gradients of `linear_fwd` w.r.t. input, weight, and bias.
pub fn linear_bwd(
    g: &Tensor,
    x: &Tensor,
    w: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, o_dim) = (g.shape[0], g.shape[1]);
    let i_dim = w.shape[1];
    let mut gx = Tensor::zeros(&[n, i_dim]);
    exec::for_each_chunk_mut(&mut gx.data, i_dim.max(1) * 64, |blk, rows| {
        let r0 = blk * 64;
        for (r, xrow) in rows.chunks_mut(i_dim).enumerate() {
            let grow = &g.data[(r0 + r) * o_dim..(r0 + r + 1) * o_dim];
            for (o, &gv) in grow.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let wrow = &w.data[o * i_dim..(o + 1) * i_dim];
                for i in 0..i_dim {
                    xrow[i] += gv * wrow[i];
                }
            }
        }
    });
    let mut gw = Tensor::zeros(&[o_dim, i_dim]);
    exec::for_each_chunk_mut(&mut gw.data, i_dim, |o, wrow| {
        for r in 0..n {
            let gv = g.data[r * o_dim + o];
            if gv == 0.0 {
                continue;
            }
            let xrow = &x.data[r * i_dim..(r + 1) * i_dim];
            for i in 0..i_dim {
                wrow[i] += gv * xrow[i];
            }
        }
    });
    let mut gb = Tensor::zeros(&[o_dim]);
    for r in 0..n {
        for o in 0..o_dim {
            gb.data[o] += g.data[r * o_dim + o];
        }
    }
    (gx, gw, gb)
}

/// Bilinear sample of a `[H,W,C]` map at `[N,2]` coordinates in `[0,1]^2`
/// (u along width, v along height). Texel centers sit at `(i+0.5)/extent`;
/// out-of-range coordinates clamp to the edge texel.
pub fn bilinear_fwd(map: &Tensor, coords: &Tensor) -> Tensor {
    let (h, w, c) = (map.shape[0], map.shape[1], map.shape[2]);
    let n = coords.shape[0];
    let mut out = Tensor::zeros(&[n, c]);
    exec::for_each_chunk_mut(&mut out.data, c, |r, orow| {
        let (x0, y0, x1, y1, fx, fy) = bilinear_setup(coords.at2(r, 0), coords.at2(r, 1), h, w);
        for ch in 0..c {
            let v00 = map.at3(y0, x0, ch);
            let v01 = map.at3(y0, x1, ch);
            let v10 = map.at3(y1, x0, ch);
            let v11 = map.at3(y1, x1, ch);
            orow[ch] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    });
    out
}

/// Gradients of `bilinear_fwd` w.r.t. the map and the coordinates.
pub fn bilinear_bwd(map: &Tensor, coords: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (h, w, c) = (map.shape[0], map.shape[1], map.shape[2]);
    let n = coords.shape[0];
    let mut gmap = Tensor::zeros(&[h, w, c]);
    let mut gco = Tensor::zeros(&[n, 2]);
    for r in 0..n {
        let (x0, y0, x1, y1, fx, fy) = bilinear_setup(coords.at2(r, 0), coords.at2(r, 1), h, w);
        let mut du = 0.0;
        let mut dv = 0.0;
        for ch in 0..c {
            let gv = g.at2(r, ch);
            gmap.data[(y0 * w + x0) * c + ch] += gv * (1.0 - fy) * (1.0 - fx);
            gmap.data[(y0 * w + x1) * c + ch] += gv * (1.0 - fy) * fx;
            gmap.data[(y1 * w + x0) * c + ch] += gv * fy * (1.0 - fx);
            gmap.data[(y1 * w + x1) * c + ch] += gv * fy * fx;
            let v00 = map.at3(y0, x0, ch);
            let v01 = map.at3(y0, x1, ch);
            let v10 = map.at3(y1, x0, ch);
            let v11 = map.at3(y1, x1, ch);
            du += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
            dv += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
        }
        gco.data[r * 2] = du * w as Real;
        gco.data[r * 2 + 1] = dv * h as Real;
    }
    (gmap, gco)
}

fn bilinear_setup(u: Real, v: Real, h: usize, w: usize) -> (usize, usize, usize, usize, Real, Real) {
    let x = u * w as Real - 0.5;
    let y = v * h as Real - 0.5;
    let xf = x.floor();
    let yf = y.floor();
    let fx = x - xf;
    let fy = y - yf;
    let clampi = |i: Real, hi: usize| -> usize { (i.max(0.0) as usize).min(hi - 1) };
    let x0 = clampi(xf, w);
    let x1 = clampi(xf + 1.0, w);
    let y0 = clampi(yf, h);
    let y1 = clampi(yf + 1.0, h);
    (x0, y0, x1, y1, fx, fy)
}
