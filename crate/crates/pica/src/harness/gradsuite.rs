//! Gradient-verification suite: per-op fixtures plus composite graphs.
//!
//! Finite differences in single precision have a noise floor of roughly
//! `eps_f32 * |loss| / step`, so a fixture draw is accepted only if every
//! nonzero analytic gradient element clears a floor proportional to the
//! loss magnitude (see [`conditioned`]); gradient elements that are exactly
//! zero are structural (the loss never reads them) and finite differences
//! agree exactly. Fixtures additionally keep loss magnitudes near 1:
//! probe-style linear losses, positive weights where taps accumulate, and
//! sampling coordinates away from cell boundaries. Heavily overlapping
//! convolution geometries (k4 s2 p1) and stacked omega=30 sine layers are
//! beyond the single-precision floor regardless of the draw, so those run
//! in double precision only; in single precision the same kernels are
//! verified by the adjoint identities in the kernel tests.
//!
//! The same suite backs the `gradcheck` CLI subcommand and the integration
//! tests. A fixture set is generated per seed; any seed must pass.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::diff::gradcheck::{default_eps, gradcheck};
use crate::diff::tape::CsrPair;
use crate::diff::{Tape, Tensor, ValId};
use crate::math::Csr;
use crate::Real;

/// Outcome of one named fixture.
#[derive(Debug, Clone)]
pub struct FixtureResult {
    pub name: String,
    pub max_err: Real,
    pub checked: usize,
}

/// Suite outcome across fixtures.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub seed: u64,
    pub results: Vec<FixtureResult>,
}

impl SuiteReport {
    pub fn max_err(&self) -> Real {
        self.results.iter().fold(0.0, |m, r| m.max(r.max_err))
    }

    pub fn worst(&self) -> Option<&FixtureResult> {
        self.results
            .iter()
            .max_by(|a, b| a.max_err.partial_cmp(&b.max_err).unwrap())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Positive-coefficient probe: loss = sum(probe .* y). Keeps the loss O(1)
/// and makes gradients positive sums of taps.
fn probe_loss(t: &mut Tape, y: ValId, probe: &Tensor) -> ValId {
    let c = t.constant(probe.clone());
    let m = t.mul(y, c).unwrap();
    t.sum(m)
}

struct Fixture {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Box<dyn Fn(&mut Tape, &[ValId]) -> ValId>,
}

/// Redraw a fixture until it is well conditioned for single-precision
/// finite differences: every nonzero analytic gradient element must clear
/// a floor proportional to the loss magnitude. Elements whose gradient is
/// exactly zero never enter the loss and difference to exactly zero, so
/// they are exempt. Deterministic: retries advance the caller's RNG.
fn conditioned<G>(rng: &mut ChaCha8Rng, gen: G) -> Fixture
where
    G: Fn(&mut ChaCha8Rng) -> Fixture,
{
    conditioned_with(rng, 0.1, gen)
}

/// [`conditioned`] with an explicit floor ratio, for graphs whose truncation
/// error is curvature-amplified (omega-scaled sines) and needs extra margin.
fn conditioned_with<G>(rng: &mut ChaCha8Rng, floor_ratio: Real, gen: G) -> Fixture
where
    G: Fn(&mut ChaCha8Rng) -> Fixture,
{
    let mut name = "";
    for _ in 0..50_000 {
        let f = gen(rng);
        name = f.name;
        let mut t = Tape::new();
        let ids: Vec<ValId> = f.inputs.iter().map(|v| t.leaf(v.clone())).collect();
        let loss = (f.build)(&mut t, &ids);
        let magnitude = t.value(loss).item().abs().max(1.0);
        let grads = t.backward(loss);
        let floor = floor_ratio * magnitude;
        let ok = ids.iter().filter_map(|&id| grads.wrt(id)).all(|g| {
            g.data.iter().all(|&v| v == 0.0 || v.abs() >= floor)
        });
        if ok {
            return f;
        }
    }
    panic!("no well-conditioned draw for gradcheck fixture {name}");
}

fn op_fixtures(seed: u64) -> Vec<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b9).wrapping_add(7));
    let mut fx: Vec<Fixture> = Vec::new();

    // Elementwise chain.
    fx.push(conditioned(&mut rng, |rng| {
        let x = uniform(rng, &[2, 3], -0.8, 0.8);
        let y = uniform(rng, &[2, 3], -0.8, 0.8);
        let probe = uniform(rng, &[2, 3], 0.5, 1.0);
        Fixture {
            name: "elementwise",
            inputs: vec![x, y],
            build: Box::new(move |t, ids| {
                let a = t.add(ids[0], ids[1]).unwrap();
                let b = t.mul(a, ids[1]).unwrap();
                let c = t.scale(b, 0.7);
                let d = t.add_scalar(c, 0.2);
                probe_loss(t, d, &probe)
            }),
        }
    }));

    // exp and scaled sine.
    fx.push(conditioned(&mut rng, |rng| {
        let x = uniform(rng, &[3, 3], -0.7, 0.7);
        let probe = uniform(rng, &[3, 3], 0.5, 1.0);
        Fixture {
            name: "exp_sin",
            inputs: vec![x],
            build: Box::new(move |t, ids| {
                let e = t.exp(ids[0]);
                let s = t.sin_scaled(ids[0], 3.0);
                let m = t.add(e, s).unwrap();
                probe_loss(t, m, &probe)
            }),
        }
    }));

    // abs / leaky_relu away from the kink.
    fx.push(conditioned(&mut rng, |rng| {
        let mags = uniform(rng, &[3, 3], 0.25, 0.9);
        let signs: Vec<Real> =
            (0..9).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let x = Tensor::from_fn(&[3, 3], |i| mags.data[i] * signs[i]);
        let probe = uniform(rng, &[3, 3], 0.5, 1.0);
        Fixture {
            name: "abs_leaky",
            inputs: vec![x],
            build: Box::new(move |t, ids| {
                let a = t.abs(ids[0]);
                let l = t.leaky_relu(ids[0], 0.2);
                let s = t.add(a, l).unwrap();
                probe_loss(t, s, &probe)
            }),
        }
    }));

    // Scalar broadcast and channel bias.
    fx.push(conditioned(&mut rng, |rng| {
        let x = uniform(rng, &[2, 3], 0.3, 0.9);
        let s = Tensor::scalar(rng.gen_range(0.5..0.9));
        let b = uniform(rng, &[3], -0.4, 0.4);
        let probe = uniform(rng, &[2, 3], 0.5, 1.0);
        Fixture {
            name: "broadcast",
            inputs: vec![x, s, b],
            build: Box::new(move |t, ids| {
                let m = t.mul_scalar_t(ids[0], ids[1]).unwrap();
                let a = t.add_channel_bias(m, ids[2]).unwrap();
                probe_loss(t, a, &probe)
            }),
        }
    }));

    // Fully-connected layer.
    fx.push(conditioned(&mut rng, |rng| {
        let x = uniform(rng, &[3, 4], 0.2, 0.6);
        let w = uniform(rng, &[2, 4], 0.2, 0.5);
        let b = uniform(rng, &[2], -0.3, 0.3);
        let probe = uniform(rng, &[3, 2], 0.4, 0.8);
        Fixture {
            name: "linear",
            inputs: vec![x, w, b],
            build: Box::new(move |t, ids| {
                let y = t.linear(ids[0], ids[1], Some(ids[2])).unwrap();
                probe_loss(t, y, &probe)
            }),
        }
    }));

    // Convolution, k3 s1 p1 (pad paths, every tap sees >= 4 outputs).
    fx.push(conditioned(&mut rng, |rng| {
        let x = uniform(rng, &[1, 3, 3], 0.15, 0.3);
        let w = uniform(rng, &[1, 1, 3, 3], 0.15, 0.3);
        let b = uniform(rng, &[1], -0.2, 0.2);
        let probe = uniform(rng, &[1, 3, 3], 0.3, 0.5);
        Fixture {
            name: "conv2d_k3s1p1",
            inputs: vec![x, w, b],
            build: Box::new(move |t, ids| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1).unwrap();
                probe_loss(t, y, &probe)
            }),
        }
    }));

    // Convolution, k2 s2 p0 (exact partition of the input).
    fx.push(conditioned(&mut rng, |rng| {
        let x = uniform(rng, &[1, 4, 4], 0.2, 0.45);
        let w = uniform(rng, &[2, 1, 2, 2], 0.25, 0.55);
        let probe = uniform(rng, &[2, 2, 2], 0.35, 0.6);
        Fixture {
            name: "conv2d_k2s2p0",
            inputs: vec![x, w],
            build: Box::new(move |t, ids| {
                let y = t.conv2d(ids[0], ids[1], None, 2, 0).unwrap();
                probe_loss(t, y, &probe)
            }),
        }
    }));

    // Transposed convolution, k2 s2 p0 (each output has exactly one tap).
    fx.push(conditioned(&mut rng, |rng| {
        let x = uniform(rng, &[1, 2, 2], 0.45, 0.8);
        let w = uniform(rng, &[1, 1, 2, 2], 0.35, 0.6);
        let probe = uniform(rng, &[1, 4, 4], 0.3, 0.5);
        Fixture {
            name: "convt2d_k2s2p0",
            inputs: vec![x, w],
            build: Box::new(move |t, ids| {
                let y = t.conv_t2d(ids[0], ids[1], 2, 0).unwrap();
                probe_loss(t, y, &probe)
            }),
        }
    }));

    // Decoder-shaped transposed convolution (k4 s2 p1). The dense tap overlap
    // pushes single-precision finite differences into their noise floor, so
    // this fixture runs in the f64 build only; the f32 build covers the same
    // kernel through the adjoint identities in the kernel unit tests. No
    // conditioning: the f64 noise floor is orders below tolerance, and the
    // mixed-sign weights would reject forever under the gradient floor.
    #[cfg(feature = "f64")]
    {
        let x = uniform(&mut rng, &[2, 3, 3], -0.6, 0.6);
        let w = uniform(&mut rng, &[2, 2, 4, 4], -0.4, 0.4);
        let probe = uniform(&mut rng, &[2, 6, 6], 0.4, 0.8);
        fx.push(Fixture {
            name: "convt2d_k4s2p1_f64",
            inputs: vec![x, w],
            build: Box::new(move |t, ids| {
                let y = t.conv_t2d(ids[0], ids[1], 2, 1).unwrap();
                probe_loss(t, y, &probe)
            }),
        });
        let x = uniform(&mut rng, &[2, 6, 6], -0.6, 0.6);
        let w = uniform(&mut rng, &[3, 2, 4, 4], -0.4, 0.4);
        let b = uniform(&mut rng, &[3], -0.3, 0.3);
        let probe = uniform(&mut rng, &[3, 3, 3], 0.4, 0.8);
        fx.push(Fixture {
            name: "conv2d_k4s2p1_f64",
            inputs: vec![x, w, b],
            build: Box::new(move |t, ids| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1).unwrap();
                probe_loss(t, y, &probe)
            }),
        });
    }

    // Bilinear sampling: coordinates at cell interiors (fractions near 0.5)
    // so all four corner weights stay >= 0.2.
    fn interior_coords(rng: &mut ChaCha8Rng) -> Tensor {
        let mut co = Vec::new();
        for _ in 0..3 {
            let x0 = rng.gen_range(0..4) as Real;
            let y0 = rng.gen_range(0..3) as Real;
            let fx_ = rng.gen_range(0.4..0.6);
            let fy_ = rng.gen_range(0.4..0.6);
            co.push((x0 + 0.5 + fx_) / 5.0);
            co.push((y0 + 0.5 + fy_) / 4.0);
        }
        Tensor::new(co, &[3, 2])
    }
    fx.push(conditioned(&mut rng, |rng| {
        let map = uniform(rng, &[4, 5, 2], -0.6, 0.6);
        let coords = interior_coords(rng);
        let probe = uniform(rng, &[3, 2], 0.5, 1.0);
        Fixture {
            name: "bilinear_map",
            inputs: vec![map],
            build: Box::new(move |t, ids| {
                let c = t.constant(coords.clone());
                let s = t.bilinear_sample(ids[0], c).unwrap();
                probe_loss(t, s, &probe)
            }),
        }
    }));
    // Coordinate gradients: checked against a map with strong distinct
    // slopes so du/dv gradients are bounded away from zero.
    fx.push(conditioned(&mut rng, |rng| {
        let coords = interior_coords(rng);
        let slope_map = Tensor::from_fn(&[4, 5, 1], |i| {
            let (y, x) = (i / 5, i % 5);
            0.9 * x as Real - 0.6 * y as Real
        });
        let probe = uniform(rng, &[3, 1], 0.5, 1.0);
        Fixture {
            name: "bilinear_coords",
            inputs: vec![coords],
            build: Box::new(move |t, ids| {
                let m = t.constant(slope_map.clone());
                let s = t.bilinear_sample(m, ids[0]).unwrap();
                probe_loss(t, s, &probe)
            }),
        }
    }));

    // Gather / scatter.
    fx.push(conditioned(&mut rng, |rng| {
        let attr = uniform(rng, &[5, 2], -0.8, 0.8);
        let idx = Arc::new(vec![[0u32, 1, 2], [2, 3, 4], [4, 0, 3]]);
        let w = Arc::new(vec![
            [0.3 as Real, 0.3, 0.4],
            [0.5, 0.25, 0.25],
            [0.4, 0.3, 0.3],
        ]);
        let probe = uniform(rng, &[3, 2], 0.5, 1.0);
        Fixture {
            name: "gather_weighted",
            inputs: vec![attr],
            build: Box::new(move |t, ids| {
                let g = t.gather_weighted(ids[0], idx.clone(), w.clone()).unwrap();
                probe_loss(t, g, &probe)
            }),
        }
    }));
    fx.push(conditioned(&mut rng, |rng| {
        let x = uniform(rng, &[4], -0.8, 0.8);
        let pix = Arc::new(vec![0u32, 3, 5, 7]);
        let probe = uniform(rng, &[2, 4, 1], 0.5, 1.0);
        Fixture {
            name: "scatter_to_map",
            inputs: vec![x],
            build: Box::new(move |t, ids| {
                let m = t.scatter_to_map(ids[0], pix.clone(), 2, 4, 0.1).unwrap();
                probe_loss(t, m, &probe)
            }),
        }
    }));

    // Forward differences: probe alternates sign along the difference axis so
    // interior gradients are sums, not differences, of probe entries.
    fn alternating_probe(axis_is_x: bool) -> Tensor {
        Tensor::from_fn(&[3, 4, 1], |i| {
            let k = if axis_is_x { i % 4 } else { i / 4 };
            let s = if k % 2 == 0 { 1.0 } else { -1.0 };
            s * (0.5 + 0.04 * (i as Real % 7.0))
        })
    }
    fx.push(conditioned(&mut rng, |rng| {
        let m = uniform(rng, &[3, 4, 1], -0.8, 0.8);
        let probe = alternating_probe(true);
        Fixture {
            name: "fwd_diff_x",
            inputs: vec![m],
            build: Box::new(move |t, ids| {
                let d = t.fwd_diff_x(ids[0]).unwrap();
                probe_loss(t, d, &probe)
            }),
        }
    }));
    fx.push(conditioned(&mut rng, |rng| {
        let m = uniform(rng, &[3, 4, 1], -0.8, 0.8);
        let probe = alternating_probe(false);
        Fixture {
            name: "fwd_diff_y",
            inputs: vec![m],
            build: Box::new(move |t, ids| {
                let d = t.fwd_diff_y(ids[0]).unwrap();
                probe_loss(t, d, &probe)
            }),
        }
    }));

    // Cross product; the draw filter keeps b x probe and probe x a away
    // from zero in every component.
    fx.push(conditioned(&mut rng, |rng| {
        let a = uniform(rng, &[3, 3], -0.9, 0.9);
        let bf = uniform(rng, &[3, 3], -0.9, 0.9);
        let probe = uniform(rng, &[3, 3], -1.0, 1.0);
        Fixture {
            name: "cross3",
            inputs: vec![a, bf],
            build: Box::new(move |t, ids| {
                let c = t.cross3(ids[0], ids[1]).unwrap();
                probe_loss(t, c, &probe)
            }),
        }
    }));

    // Normalization of rows bounded away from the origin.
    fx.push(conditioned(&mut rng, |rng| {
        let dirs = Tensor::from_fn(&[3, 3], |i| {
            let base = [
                [0.9, 0.3, -0.4],
                [-0.5, 0.8, 0.5],
                [0.4, -0.6, 0.8],
            ];
            base[i / 3][i % 3]
        });
        let jitter = uniform(rng, &[3, 3], -0.1, 0.1);
        let mut v = dirs.clone();
        v.add_assign(&jitter);
        let probe = uniform(rng, &[3, 3], 0.5, 1.0);
        Fixture {
            name: "normalize3",
            inputs: vec![v],
            build: Box::new(move |t, ids| {
                let n = t.normalize3(ids[0], 1e-8).unwrap();
                probe_loss(t, n, &probe)
            }),
        }
    }));

    // Row scaling and rowwise affine reduction.
    fx.push(conditioned(&mut rng, |rng| {
        let x = uniform(rng, &[3, 3], 0.3, 0.8);
        let s = uniform(rng, &[3], 0.4, 0.9);
        let probe = uniform(rng, &[3, 3], 0.5, 1.0);
        Fixture {
            name: "mul_rows",
            inputs: vec![x, s],
            build: Box::new(move |t, ids| {
                let m = t.mul_rows(ids[0], ids[1]).unwrap();
                probe_loss(t, m, &probe)
            }),
        }
    }));
    fx.push(conditioned(&mut rng, |rng| {
        let x = uniform(rng, &[3, 3], 0.3, 0.8);
        let probe = uniform(rng, &[3, 1], 0.5, 1.0);
        Fixture {
            name: "dot_rows_const",
            inputs: vec![x],
            build: Box::new(move |t, ids| {
                let d = t.dot_rows_const(ids[0], [0.6, -0.7, 0.8], 0.1).unwrap();
                let d = t.reshape(d, &[3, 1]).unwrap();
                probe_loss(t, d, &probe)
            }),
        }
    }));

    // Sparse matvec with a small graph-Laplacian-like matrix.
    fx.push(conditioned(&mut rng, |rng| {
        let m = Csr::from_rows(
            vec![
                vec![(0, 1.5), (1, -0.5)],
                vec![(0, -0.5), (1, 2.0), (2, -0.5)],
                vec![(1, -0.5), (2, 1.5)],
            ],
            3,
        );
        let pair = CsrPair::new(m);
        let x = uniform(rng, &[3, 2], -0.8, 0.8);
        let probe = uniform(rng, &[3, 2], 0.5, 1.0);
        Fixture {
            name: "spmv",
            inputs: vec![x],
            build: Box::new(move |t, ids| {
                let y = t.spmv(pair.clone(), ids[0]).unwrap();
                probe_loss(t, y, &probe)
            }),
        }
    }));

    // Concatenation and layout permutes.
    fx.push(conditioned(&mut rng, |rng| {
        let a = uniform(rng, &[2, 2], -0.8, 0.8);
        let b = uniform(rng, &[2, 3], -0.8, 0.8);
        let probe = uniform(rng, &[2, 5], 0.5, 1.0);
        Fixture {
            name: "concat",
            inputs: vec![a, b],
            build: Box::new(move |t, ids| {
                let c = t.concat(&[ids[0], ids[1]], 1).unwrap();
                probe_loss(t, c, &probe)
            }),
        }
    }));
    fx.push(conditioned(&mut rng, |rng| {
        let chw = uniform(rng, &[2, 3, 2], -0.8, 0.8);
        let probe = uniform(rng, &[3, 2, 2], 0.5, 1.0);
        Fixture {
            name: "permute",
            inputs: vec![chw],
            build: Box::new(move |t, ids| {
                let hwc = t.chw_to_hwc(ids[0]).unwrap();
                probe_loss(t, hwc, &probe)
            }),
        }
    }));

    // Reductions: mean and sum combined. (Stop-grad semantics cannot be
    // validated by finite differences — the numeric side always sees the full
    // dependency — so they live in the unit tests and the negative control.)
    fx.push(conditioned(&mut rng, |rng| {
        let x = uniform(rng, &[2, 3], -0.8, 0.8);
        Fixture {
            name: "reductions",
            inputs: vec![x],
            build: Box::new(move |t, ids| {
                let sq = t.square(ids[0]).unwrap();
                let m = t.mean(sq);
                let s = t.sum(ids[0]);
                let s = t.scale(s, 0.5);
                t.add(m, s).unwrap()
            }),
        }
    }));

    fx
}

/// Composite fixtures mirroring real model subgraphs. Appended to the op
/// fixtures by [`run_suite`].
fn composite_fixtures(seed: u64) -> Vec<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x517cc1b7).wrapping_add(3));
    let mut fx: Vec<Fixture> = Vec::new();

    // Sine-MLP head at omega = 30, as the pixel decoder uses. A single
    // hidden sine layer: under the conditioned-draw gradient floor the
    // central-difference truncation ratio stays bounded by omega^2 * |w|^2
    // and the check resolves cleanly in f32. Stacking a second sine layer
    // amplifies third derivatives by another omega^2 relative to the
    // gradient, which f32 differences cannot resolve; that depth is
    // exercised by sine_mlp_deep in the f64 suite.
    {
        let n = 3;
        let omega = 30.0 as Real;
        fx.push(conditioned_with(&mut rng, 0.25, move |rng| {
            let x = uniform(rng, &[n, 6], -0.9, 0.9);
            let w0 = uniform(rng, &[5, 6], -1.0 / 6.0, 1.0 / 6.0);
            let b0 = uniform(rng, &[5], -0.1, 0.1);
            let w1 = uniform(rng, &[3, 5], -0.5, 0.5);
            let b1 = uniform(rng, &[3], -0.2, 0.2);
            let probe = uniform(rng, &[n, 3], 0.4, 0.8);
            Fixture {
                name: "sine_mlp",
                inputs: vec![x, w0, b0, w1, b1],
                build: Box::new(move |t, ids| {
                    let h0 = t.linear(ids[0], ids[1], Some(ids[2])).unwrap();
                    let s0 = t.sin_scaled(h0, omega);
                    let y = t.linear(s0, ids[3], Some(ids[4])).unwrap();
                    probe_loss(t, y, &probe)
                }),
            }
        }));
    }

    // Two stacked omega=30 sine layers; resolvable only in double precision.
    #[cfg(feature = "f64")]
    {
        let n = 3;
        let omega = 30.0 as Real;
        let lim1 = (6.0 / 5.0 as Real).sqrt() / omega;
        fx.push(conditioned(&mut rng, move |rng| {
            let x = uniform(rng, &[n, 6], -0.9, 0.9);
            let w0 = uniform(rng, &[5, 6], -1.0 / 6.0, 1.0 / 6.0);
            let b0 = uniform(rng, &[5], -0.1, 0.1);
            let w1 = uniform(rng, &[4, 5], -lim1, lim1);
            let b1 = uniform(rng, &[4], -0.1, 0.1);
            let w2 = uniform(rng, &[3, 4], -0.5, 0.5);
            let b2 = uniform(rng, &[3], -0.2, 0.2);
            let probe = uniform(rng, &[n, 3], 0.4, 0.8);
            Fixture {
                name: "sine_mlp_deep",
                inputs: vec![x, w0, b0, w1, b1, w2, b2],
                build: Box::new(move |t, ids| {
                    let h0 = t.linear(ids[0], ids[1], Some(ids[2])).unwrap();
                    let s0 = t.sin_scaled(h0, omega);
                    let h1 = t.linear(s0, ids[3], Some(ids[4])).unwrap();
                    let s1 = t.sin_scaled(h1, omega);
                    let y = t.linear(s1, ids[5], Some(ids[6])).unwrap();
                    probe_loss(t, y, &probe)
                }),
            }
        }));
    }

    // Geometry-decoder chain: two up blocks (transposed conv, layout flip,
    // channel bias, leaky) then the scalar scale and channel offset, exactly
    // the decode_geometry pipeline. k2 s2 p0 keeps the tap overlap inside
    // the f32 finite-difference budget; the k4 s2 p1 twin below runs in the
    // f64 suite like its primitive.
    fx.push(conditioned(&mut rng, |rng| {
        let x = uniform(rng, &[2, 2, 2], -0.7, 0.7);
        let w0 = uniform(rng, &[2, 3, 2, 2], 0.25, 0.55);
        let b0 = uniform(rng, &[3], -0.2, 0.2);
        let w1 = uniform(rng, &[3, 2, 2, 2], 0.25, 0.55);
        let b1 = uniform(rng, &[2], -0.2, 0.2);
        let scale = uniform(rng, &[1], 0.8, 1.2);
        let offset = uniform(rng, &[2], -0.3, 0.3);
        let probe = uniform(rng, &[8, 8, 2], 0.4, 0.8);
        Fixture {
            name: "geometry_up_chain",
            inputs: vec![x, w0, b0, w1, b1, scale, offset],
            build: Box::new(move |t, ids| {
                let y = t.conv_t2d(ids[0], ids[1], 2, 0).unwrap();
                let y = t.chw_to_hwc(y).unwrap();
                let y = t.add_channel_bias(y, ids[2]).unwrap();
                let y = t.leaky_relu(y, 0.2);
                let y = t.hwc_to_chw(y).unwrap();
                let y = t.conv_t2d(y, ids[3], 2, 0).unwrap();
                let y = t.chw_to_hwc(y).unwrap();
                let y = t.add_channel_bias(y, ids[4]).unwrap();
                let y = t.mul_scalar_t(y, ids[5]).unwrap();
                let y = t.add_channel_bias(y, ids[6]).unwrap();
                probe_loss(t, y, &probe)
            }),
        }
    }));

    #[cfg(feature = "f64")]
    {
        let x = uniform(&mut rng, &[2, 2, 2], -0.7, 0.7);
        let w0 = uniform(&mut rng, &[2, 3, 4, 4], -0.4, 0.4);
        let b0 = uniform(&mut rng, &[3], -0.2, 0.2);
        let w1 = uniform(&mut rng, &[3, 2, 4, 4], -0.4, 0.4);
        let b1 = uniform(&mut rng, &[2], -0.2, 0.2);
        let scale = uniform(&mut rng, &[1], 0.8, 1.2);
        let offset = uniform(&mut rng, &[2], -0.3, 0.3);
        let probe = uniform(&mut rng, &[8, 8, 2], 0.4, 0.8);
        fx.push(Fixture {
            name: "geometry_up_chain_k4_f64",
            inputs: vec![x, w0, b0, w1, b1, scale, offset],
            build: Box::new(move |t, ids| {
                let y = t.conv_t2d(ids[0], ids[1], 2, 1).unwrap();
                let y = t.chw_to_hwc(y).unwrap();
                let y = t.add_channel_bias(y, ids[2]).unwrap();
                let y = t.leaky_relu(y, 0.2);
                let y = t.hwc_to_chw(y).unwrap();
                let y = t.conv_t2d(y, ids[3], 2, 1).unwrap();
                let y = t.chw_to_hwc(y).unwrap();
                let y = t.add_channel_bias(y, ids[4]).unwrap();
                let y = t.mul_scalar_t(y, ids[5]).unwrap();
                let y = t.add_channel_bias(y, ids[6]).unwrap();
                probe_loss(t, y, &probe)
            }),
        });
    }

    // Loss assembly: squared-error mean, masked L1, and the KL closed form
    // folded into one weighted total. Residuals and logvars are drawn away
    // from their kinks/zero-gradient points; the weights are picked so every
    // input's gradient clears the conditioning floor.
    fx.push(conditioned(&mut rng, |rng| {
        let sgn = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let gt_rgb = uniform(rng, &[2, 3], 0.0, 1.0);
        let pred_rgb = Tensor::from_fn(&[2, 3], |i| gt_rgb.data[i] + sgn(rng) * rng.gen_range(0.9..1.4));
        let gt_d = uniform(rng, &[3, 1], 4.0, 6.0);
        let pred_d = Tensor::from_fn(&[3, 1], |i| gt_d.data[i] + sgn(rng) * rng.gen_range(0.4..0.9));
        let mu = Tensor::from_fn(&[2, 2], |_| sgn(rng) * rng.gen_range(0.6..0.9));
        let lv = uniform(rng, &[2, 2], 0.6, 0.9);
        let gt_rgb2 = gt_rgb.clone();
        let gt_d2 = gt_d.clone();
        Fixture {
            name: "loss_assembly",
            inputs: vec![pred_rgb, pred_d, mu, lv],
            build: Box::new(move |t, ids| {
                let g = t.constant(gt_rgb2.clone());
                let r = t.sub(ids[0], g).unwrap();
                let sq = t.square(r).unwrap();
                let img = t.mean(sq);
                let g = t.constant(gt_d2.clone());
                let r = t.sub(ids[1], g).unwrap();
                let a = t.abs(r);
                let s = t.sum(a);
                let dep = t.scale(s, 1.0 / 3.0);
                let mu2 = t.square(ids[2]).unwrap();
                let ev = t.exp(ids[3]);
                let s1 = t.add_scalar(ids[3], 1.0);
                let s2 = t.sub(s1, mu2).unwrap();
                let s3 = t.sub(s2, ev).unwrap();
                let ks = t.sum(s3);
                let kl = t.scale(ks, -0.5);
                let a = t.scale(img, 0.5);
                let b = t.scale(dep, 0.5);
                let c = t.scale(kl, 0.5);
                let ab = t.add(a, b).unwrap();
                t.add(ab, c).unwrap()
            }),
        }
    }));

    // Sampled-map pipeline: learned map -> bilinear at fixed uv -> MLP row.
    fx.push(conditioned(&mut rng, |rng| {
        let map = uniform(rng, &[3, 3, 2], -0.7, 0.7);
        let co = Tensor::new(vec![0.48, 0.52, 0.18, 0.82], &[2, 2]);
        let w = uniform(rng, &[2, 2], 0.3, 0.6);
        let probe = uniform(rng, &[2, 2], 0.5, 1.0);
        Fixture {
            name: "map_sample_mlp",
            inputs: vec![map, w],
            build: Box::new(move |t, ids| {
                let c = t.constant(co.clone());
                let s = t.bilinear_sample(ids[0], c).unwrap();
                let y = t.linear(s, ids[1], None).unwrap();
                let a = t.sin_scaled(y, 2.0);
                probe_loss(t, a, &probe)
            }),
        }
    }));

    fx
}

/// Run every fixture for one seed.
pub fn run_suite(seed: u64) -> SuiteReport {
    let mut results = Vec::new();
    let mut fixtures = op_fixtures(seed);
    fixtures.extend(composite_fixtures(seed));
    for f in fixtures {
        let rep = gradcheck(|t, ids| (f.build)(t, ids), &f.inputs, default_eps());
        results.push(FixtureResult {
            name: f.name.to_string(),
            max_err: rep.max_err,
            checked: rep.checked,
        });
    }
    SuiteReport { seed, results }
}

/// Negative control: a graph with a deliberately wrong gradient (stop_grad
/// hiding half the dependency). Returns that graph's max error, which the
/// checker must flag as far above tolerance.
pub fn negative_control() -> Real {
    let inputs = vec![Tensor::new(vec![0.7, -0.4], &[2])];
    let rep = gradcheck(
        |t, ids| {
            let d = t.stop_grad(ids[0]);
            let m = t.mul(ids[0], d).unwrap();
            t.sum(m)
        },
        &inputs,
        default_eps(),
    );
    rep.max_err
}
