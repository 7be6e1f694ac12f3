//! The avatar network: variational encoder, geometry and expression
//! decoders, learned positional encodings, and the per-pixel color decoder.
//!
//! Every configuration keeps the same architecture *shape law*: the latent
//! is always 8×8×4, convolutional stages halve or double the spatial extent
//! with k=4 s=2 blocks, and the number of blocks is `log2(res/8)`. Channel
//! widths derive from `channel_base` (128 at full scale, small for the desk
//! config) so the full-scale layer chain is expressible for shape and
//! parameter-count assertions while training stays cheap.

mod nets;
mod render;

pub use nets::{encode_uv_sinusoidal, view_tile};
pub use render::{
    compose_image, render_frame, FrameGraph, FrameInputs, RenderCounters, RenderError,
};

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Tape, Tensor, ValId};
use crate::geometry::{make_grid_topology, MeshTopology};
use crate::Real;

/// Decoder-input ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// z + encoded xyz + full learned uv encoding (2D map + two 1D maps).
    Full,
    /// z + encoded xyz only.
    NoUv,
    /// z + encoded xyz + raw (u,v).
    UvNope,
    /// z + encoded xyz + 40-dim sinusoidal uv encoding.
    NerfPe,
    /// z + encoded xyz + 2D-map encoding only.
    Pe2d,
    /// z + encoded xyz + 1D-map encodings only.
    Pe1d,
    /// Full feature set, but geometry comes from the coarse tracking mesh
    /// instead of the geometry decoder.
    Coarse,
}

pub const ALL_VARIANTS: [Variant; 7] = [
    Variant::Full,
    Variant::NoUv,
    Variant::UvNope,
    Variant::NerfPe,
    Variant::Pe2d,
    Variant::Pe1d,
    Variant::Coarse,
];

impl Variant {
    pub fn parse(s: &str) -> Result<Variant, DiffError> {
        Ok(match s {
            "full" => Variant::Full,
            "no-uv" => Variant::NoUv,
            "uv-nope" => Variant::UvNope,
            "nerf-pe" => Variant::NerfPe,
            "2d-pe" => Variant::Pe2d,
            "1d-pe" => Variant::Pe1d,
            "coarse" => Variant::Coarse,
            _ => return Err(DiffError::invalid("variant", format!("unknown variant {s:?}"))),
        })
    }

    /// Length of the per-pixel feature vector this variant feeds the color
    /// decoder: 4 (z) + 4 (encoded xyz) + the uv-encoding tail.
    pub fn feature_len(self) -> usize {
        8 + match self {
            Variant::Full | Variant::Coarse => 8,
            Variant::NoUv => 0,
            Variant::UvNope => 2,
            Variant::NerfPe => 40,
            Variant::Pe2d => 4,
            Variant::Pe1d => 4,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoUv => "no-uv",
            Variant::UvNope => "uv-nope",
            Variant::NerfPe => "nerf-pe",
            Variant::Pe2d => "2d-pe",
            Variant::Pe1d => "1d-pe",
            Variant::Coarse => "coarse",
        })
    }
}

pub const LATENT_GRID: usize = 8;
pub const LATENT_CH: usize = 4;
/// Geometry-decoder block output channels at full scale; shorter configs
/// use the tail of the list.
const GEO_CHANNELS: [usize; 5] = [32, 16, 16, 8, 3];
/// Expression-decoder block output channels at full scale.
const EXPR_CHANNELS: [usize; 5] = [32, 16, 16, 8, 4];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Position-map resolution (256 at full scale). Must be 8·2^n.
    pub posmap_res: usize,
    /// Width scale for the encoder; tex head uses 4×/2× this, encoder
    /// blocks decay from it toward 8.
    pub channel_base: usize,
    /// Dense mesh grid (vertices per side).
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Coarse supervision grid (vertices per side).
    pub coarse_rows: usize,
    pub coarse_cols: usize,
    /// 2D learned encoding map resolution (1024 at full scale).
    pub map_uv_res: usize,
    /// Length of each 1D learned encoding table (10000 at full scale).
    pub map_1d_len: usize,
    pub variant: Variant,
    /// Sine activation frequency.
    pub omega: Real,
    /// Face-centric scene center (mm), the geometry decoder's output offset.
    pub scene_center: [Real; 3],
    /// Scene half extent (mm): geometry output scale and xyz normalizer.
    pub scene_half_extent: Real,
}

impl ModelConfig {
    /// Full-scale configuration; exists for shape and count assertions.
    pub fn paper() -> ModelConfig {
        ModelConfig {
            posmap_res: 256,
            channel_base: 128,
            grid_rows: 63,
            grid_cols: 63,
            coarse_rows: 17,
            coarse_cols: 17,
            map_uv_res: 1024,
            map_1d_len: 10000,
            variant: Variant::Full,
            omega: 30.0,
            scene_center: [0.0, 0.0, 0.0],
            scene_half_extent: 1.0,
        }
    }

    /// Desk-scale configuration used by the bundled synthetic scene.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            posmap_res: 64,
            channel_base: 4,
            grid_rows: 63,
            grid_cols: 63,
            coarse_rows: 17,
            coarse_cols: 17,
            map_uv_res: 128,
            map_1d_len: 512,
            variant: Variant::Full,
            omega: 30.0,
            scene_center: [0.0, 0.0, -20.0],
            scene_half_extent: 110.0,
        }
    }

    pub fn validate(&self) -> Result<(), DiffError> {
        let n = self.n_blocks();
        if self.posmap_res != LATENT_GRID << n || n == 0 || n > 5 {
            return Err(DiffError::invalid(
                "config",
                format!("posmap_res {} must be 8·2^n, n in 1..=5", self.posmap_res),
            ));
        }
        if self.channel_base == 0 || self.map_uv_res < 2 || self.map_1d_len < 2 {
            return Err(DiffError::invalid("config", "degenerate widths"));
        }
        if self.grid_rows < 2 || self.grid_cols < 2 || self.coarse_rows < 2 || self.coarse_cols < 2 {
            return Err(DiffError::invalid("config", "degenerate grids"));
        }
        if !(self.scene_half_extent > 0.0) || !(self.omega > 0.0) {
            return Err(DiffError::invalid("config", "scale and omega must be positive"));
        }
        Ok(())
    }

    /// Up/downsampling block count: log2(posmap_res / 8).
    pub fn n_blocks(&self) -> usize {
        (usize::BITS - 1 - (self.posmap_res / LATENT_GRID).leading_zeros()) as usize
    }

    /// Average-texture resolution: fixed at 4× the position map.
    pub fn tex_res(&self) -> usize {
        4 * self.posmap_res
    }

    /// Expression-map resolution (equals the position map's).
    pub fn expr_res(&self) -> usize {
        self.posmap_res
    }

    /// Encoder downsampling block output widths, decaying toward 8.
    fn enc_widths(&self) -> Vec<usize> {
        (0..self.n_blocks()).map(|i| (self.channel_base >> i).max(8)).collect()
    }

    fn geo_widths(&self) -> Vec<usize> {
        GEO_CHANNELS[5 - self.n_blocks()..].to_vec()
    }

    fn expr_widths(&self) -> Vec<usize> {
        EXPR_CHANNELS[5 - self.n_blocks()..].to_vec()
    }

    pub fn dense_topology(&self) -> MeshTopology {
        make_grid_topology(self.grid_rows, self.grid_cols, 0.0)
    }

    pub fn coarse_topology(&self) -> MeshTopology {
        make_grid_topology(self.coarse_rows, self.coarse_cols, 0.0)
    }
}

/// Named, ordered trainable tensors. Order is creation order and is the
/// canonical checkpoint/optimizer order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.index.insert(name.to_string(), self.entries.len()).is_none(),
            "duplicate parameter {name}"
        );
        self.entries.push((name.to_string(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn idx(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries[self.idx(name)].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.idx(name);
        &mut self.entries[i].1
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.entries.iter().map(|(_, t)| t.shape.clone()).collect()
    }

    /// Total trainable scalar count.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Sum of parameter counts over names with the given prefix.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Overwrite values from checkpoint entries; names and shapes must
    /// match the existing set exactly.
    pub fn assign(&mut self, loaded: Vec<(String, Tensor)>) -> Result<(), DiffError> {
        if loaded.len() != self.entries.len() {
            return Err(DiffError::invalid(
                "checkpoint",
                format!("{} tensors, model has {}", loaded.len(), self.entries.len()),
            ));
        }
        for (name, t) in loaded {
            let Some(&i) = self.index.get(&name) else {
                return Err(DiffError::invalid("checkpoint", format!("unknown tensor {name}")));
            };
            if t.shape != self.entries[i].1.shape {
                return Err(DiffError::shape(
                    "checkpoint",
                    format!("{name}: {:?} vs {:?}", t.shape, self.entries[i].1.shape),
                ));
            }
            self.entries[i].1 = t;
        }
        Ok(())
    }
}

/// Parameter leaves registered on a tape for one iteration, in `ParamSet`
/// order.
pub struct Bound {
    pub ids: Vec<ValId>,
}

/// Per-prefix breakdown of trainable parameter counts.
#[derive(Debug, Clone, Serialize)]
pub struct ParamLedger {
    pub total: usize,
    pub encoder: usize,
    pub geometry_decoder: usize,
    pub expression_decoder: usize,
    pub encoding_maps: usize,
    pub xyz_encoder: usize,
    pub pixel_decoder: usize,
}

pub struct PicaModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl PicaModel {
    /// Build and initialize all parameters from a seed. Initialization
    /// draws are consumed in fixed creation order, so a given (config,
    /// seed) pair always produces identical parameters.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<PicaModel, DiffError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1_ab1e);
        let mut p = ParamSet::default();

        // Kaiming-uniform for leaky-ReLU(0.2) convolutions.
        let conv_lim = |fan_in: usize| {
            let gain = (2.0 / (1.0 + 0.2 * 0.2) as Real).sqrt();
            gain * (3.0 / fan_in as Real).sqrt()
        };
        let conv = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, o: usize, c: usize, k: usize| {
            let lim = conv_lim(c * k * k);
            p.insert(&format!("{name}.w"), uniform(rng, &[o, c, k, k], lim));
            p.insert(&format!("{name}.b"), Tensor::zeros(&[o]));
        };
        // Transposed convolutions keep the same fan-in convention (C_in·k²).
        let convt = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c: usize, o: usize, k: usize| {
            let lim = conv_lim(c * k * k);
            p.insert(&format!("{name}.w"), uniform(rng, &[c, o, k, k], lim));
            p.insert(&format!("{name}.b"), Tensor::zeros(&[o]));
        };
        // Sine layers: first-layer limit 1/fan_in, deeper √(6/fan_in)/ω;
        // biases U(±1/√fan_in).
        let sine = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, o: usize, i: usize, first: bool| {
            let lim = if first {
                1.0 / i as Real
            } else {
                (6.0 / i as Real).sqrt() / cfg.omega
            };
            p.insert(&format!("{name}.w"), uniform(rng, &[o, i], lim));
            let blim = 1.0 / (i as Real).sqrt();
            p.insert(&format!("{name}.b"), uniform(rng, &[o], blim));
        };

        let cb = cfg.channel_base;
        conv(&mut p, &mut rng, "enc.tex0", 4 * cb, 3, 4);
        conv(&mut p, &mut rng, "enc.tex1", 2 * cb, 4 * cb, 4);
        conv(&mut p, &mut rng, "enc.geo", 2 * cb, 3, 1);
        let mut c_in = 4 * cb;
        for (i, w) in cfg.enc_widths().into_iter().enumerate() {
            conv(&mut p, &mut rng, &format!("enc.block{i}"), w, c_in, 4);
            c_in = w;
        }
        conv(&mut p, &mut rng, "enc.mu", LATENT_CH, c_in, 1);
        conv(&mut p, &mut rng, "enc.logvar", LATENT_CH, c_in, 1);

        let mut c_in = LATENT_CH;
        for (i, w) in cfg.geo_widths().into_iter().enumerate() {
            convt(&mut p, &mut rng, &format!("geo.block{i}"), c_in, w, 4);
            c_in = w;
        }
        p.insert("geo.scale", Tensor::scalar(cfg.scene_half_extent));
        p.insert(
            "geo.offset",
            Tensor::new(cfg.scene_center.to_vec(), &[3]),
        );

        let mut c_in = LATENT_CH + 3;
        for (i, w) in cfg.expr_widths().into_iter().enumerate() {
            convt(&mut p, &mut rng, &format!("expr.block{i}"), c_in, w, 4);
            c_in = w;
        }

        let r = cfg.map_uv_res;
        p.insert("embed.uv", uniform(&mut rng, &[r, r, 4], 1.0));
        p.insert("embed.u", uniform(&mut rng, &[1, cfg.map_1d_len, 2], 1.0));
        p.insert("embed.v", uniform(&mut rng, &[1, cfg.map_1d_len, 2], 1.0));

        sine(&mut p, &mut rng, "xyz.l0", 4, 3, true);
        sine(&mut p, &mut rng, "xyz.l1", 4, 4, false);

        let fl = cfg.variant.feature_len();
        sine(&mut p, &mut rng, "pix.l0", 8, fl, true);
        sine(&mut p, &mut rng, "pix.l1", 8, 8, false);
        sine(&mut p, &mut rng, "pix.l2", 8, 8, false);
        sine(&mut p, &mut rng, "pix.out", 3, 8, false);

        Ok(PicaModel { cfg, params: p })
    }

    /// Register every parameter as a gradient-requiring leaf on a fresh
    /// tape.
    pub fn bind(&self, t: &mut Tape) -> Bound {
        Bound {
            ids: self
                .params
                .entries()
                .iter()
                .map(|(_, v)| t.leaf(v.clone()))
                .collect(),
        }
    }

    /// Leaf id of a named parameter within a binding.
    pub fn pid(&self, b: &Bound, name: &str) -> ValId {
        b.ids[self.params.idx(name)]
    }

    pub fn ledger(&self) -> ParamLedger {
        ParamLedger {
            total: self.params.total_params(),
            encoder: self.params.count_prefix("enc."),
            geometry_decoder: self.params.count_prefix("geo."),
            expression_decoder: self.params.count_prefix("expr."),
            encoding_maps: self.params.count_prefix("embed."),
            xyz_encoder: self.params.count_prefix("xyz."),
            pixel_decoder: self.params.count_prefix("pix."),
        }
    }

    /// Indices of geometry-decoder parameters (the Appendix-style routing
    /// audit checks gradients on exactly these).
    pub fn geometry_param_indices(&self) -> Vec<usize> {
        self.params
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| n.starts_with("geo."))
            .map(|(i, _)| i)
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lim: Real) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-lim..lim) as Real).collect();
    Tensor::new(data, shape)
}

/// Laplacian wrapper plus per-vertex weights shared by training and tests.
pub struct SmoothnessContext {
    pub lap: Arc<crate::diff::CsrPair>,
    pub w_l: Tensor,
    pub v_mu: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_config_matches_reference_widths() {
        let cfg = ModelConfig::paper();
        assert_eq!(cfg.n_blocks(), 5);
        assert_eq!(cfg.tex_res(), 1024);
        assert_eq!(cfg.enc_widths(), vec![128, 64, 32, 16, 8]);
        assert_eq!(cfg.geo_widths(), vec![32, 16, 16, 8, 3]);
        assert_eq!(cfg.expr_widths(), vec![32, 16, 16, 8, 4]);
    }

    #[test]
    fn pixel_decoder_is_exactly_307_params() {
        let m = PicaModel::init(ModelConfig::paper(), 0).unwrap();
        let l = m.ledger();
        assert_eq!(l.pixel_decoder, 307);
        assert_eq!(l.xyz_encoder, 36);
        // 16·8+8 + 8·8+8 + 8·8+8 + 8·3+3
        assert_eq!(l.pixel_decoder, (16 * 8 + 8) + (8 * 8 + 8) + (8 * 8 + 8) + (8 * 3 + 3));
    }

    #[test]
    fn full_scale_parameter_ledger() {
        let m = PicaModel::init(ModelConfig::paper(), 3).unwrap();
        let l = m.ledger();
        // Closed-form tallies of the layer chain.
        let enc = (512 * 3 * 16 + 512)
            + (256 * 512 * 16 + 256)
            + (256 * 3 + 256)
            + (128 * 512 * 16 + 128)
            + (64 * 128 * 16 + 64)
            + (32 * 64 * 16 + 32)
            + (16 * 32 * 16 + 16)
            + (8 * 16 * 16 + 8)
            + 2 * (4 * 8 + 4);
        assert_eq!(l.encoder, enc);
        let geo = (4 * 32 * 16 + 32)
            + (32 * 16 * 16 + 16)
            + (16 * 16 * 16 + 16)
            + (16 * 8 * 16 + 8)
            + (8 * 3 * 16 + 3)
            + 4; // scale + offset
        assert_eq!(l.geometry_decoder, geo);
        let expr = (7 * 32 * 16 + 32)
            + (32 * 16 * 16 + 16)
            + (16 * 16 * 16 + 16)
            + (16 * 8 * 16 + 8)
            + (8 * 4 * 16 + 4);
        assert_eq!(l.expression_decoder, expr);
        assert_eq!(l.encoding_maps, 1024 * 1024 * 4 + 2 * 10000 * 2);
        assert_eq!(
            l.total,
            l.encoder + l.geometry_decoder + l.expression_decoder + l.encoding_maps + 36 + 307
        );
        // Encoding maps + conv decoders dominate the ledger.
        assert!(l.encoding_maps + l.geometry_decoder + l.expression_decoder + l.encoder > l.total * 9 / 10);
    }

    #[test]
    fn variant_feature_lengths() {
        assert_eq!(Variant::Full.feature_len(), 16);
        assert_eq!(Variant::NoUv.feature_len(), 8);
        assert_eq!(Variant::UvNope.feature_len(), 10);
        assert_eq!(Variant::NerfPe.feature_len(), 48);
        assert_eq!(Variant::Pe2d.feature_len(), 12);
        assert_eq!(Variant::Pe1d.feature_len(), 12);
        assert_eq!(Variant::Coarse.feature_len(), 16);
        for v in ALL_VARIANTS {
            assert_eq!(Variant::parse(&v.to_string()).unwrap(), v);
        }
        assert!(Variant::parse("siren").is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = PicaModel::init(ModelConfig::desk(), 11).unwrap();
        let b = PicaModel::init(ModelConfig::desk(), 11).unwrap();
        let c = PicaModel::init(ModelConfig::desk(), 12).unwrap();
        for i in 0..a.params.len() {
            let (na, ta) = &a.params.entries()[i];
            let (nb, tb) = &b.params.entries()[i];
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data, "{na} differs across same-seed inits");
        }
        let differs = a
            .params
            .entries()
            .iter()
            .zip(c.params.entries())
            .any(|((_, ta), (_, tc))| ta.data != tc.data);
        assert!(differs, "different seeds must differ");
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.posmap_res = 48;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.posmap_res = 512; // n=6
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.scene_half_extent = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_assign_validates() {
        let mut m = PicaModel::init(ModelConfig::desk(), 1).unwrap();
        let entries: Vec<(String, Tensor)> = m
            .params
            .entries()
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        m.params.assign(entries).unwrap();
        let mut bad: Vec<(String, Tensor)> = m
            .params
            .entries()
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        bad[0].1 = Tensor::zeros(&[1]);
        assert!(m.params.assign(bad).is_err());
    }
}
