//! Training loop: per-iteration frame/camera sampling, the full objective,
//! Adam, the neutral-mesh EMA, JSON loss logging, and non-finite aborts.
//!
//! Each iteration draws one expression frame and a small batch of its
//! cameras. The frame is encoded once, the latent is sampled once, and every
//! batched camera renders through the same decoded geometry, so the image,
//! depth, and normal terms average over views while the mesh, smoothness,
//! and KL terms attach to the frame itself.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::checkpoint;
use crate::diff::adam::{Adam, AdamConfig};
use crate::diff::{CsrPair, DiffError, Tape, Tensor, ValId};
use crate::exec;
use crate::geometry::{cotangent_laplacian, sample_position_map_plain, MeshTopology};
use crate::losses::{self, LossTerms, LossWeights, DEPTH_GATE_MM};
use crate::model::{render_frame, FrameInputs, ModelConfig, PicaModel, SmoothnessContext};
use crate::scenegen::{laplacian_weights, mesh_weights, Dataset, FrameData};
use crate::Real;

/// Everything a training run needs besides the dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    /// Cameras sampled per iteration (clamped to the rig size).
    pub batch_size: usize,
    pub learning_rate: Real,
    pub iterations: usize,
    pub seed: u64,
    /// Force sequential kernels so loss logs replay bit for bit.
    pub deterministic: bool,
    /// Extra checkpoint cadence; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// EMA rate for the neutral mesh used by the Laplacian term.
    pub ema_lambda: Real,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            weights: LossWeights::default(),
            batch_size: 4,
            learning_rate: 1e-3,
            iterations: 500,
            seed: 0,
            deterministic: false,
            checkpoint_every: 0,
            ema_lambda: 0.01,
        }
    }
}

/// Raw (unweighted) per-term values for one iteration, plus the weighted
/// total actually optimized. One of these per line in the loss log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub frame: usize,
    pub image: Real,
    pub depth: Real,
    pub normal: Real,
    pub mesh: Real,
    pub smooth: Real,
    pub kl: Real,
    pub total: Real,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub first_total: Real,
    pub final_total: Real,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Incremental trainer; [`train_with`] drives it and handles the filesystem.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: PicaModel,
    data: Dataset,
    train_frames: Vec<usize>,
    cache: Vec<Option<Arc<FrameData>>>,
    dense_topo: MeshTopology,
    coarse_topo: MeshTopology,
    lap: Arc<CsrPair>,
    w_l: Tensor,
    w_m: Tensor,
    v_mu: Tensor,
    adam: Adam,
    rng: ChaCha8Rng,
    iter: usize,
}

impl Trainer {
    /// The model adopts the dataset's scene frame (center/extent), so the
    /// only hard requirements are matching map resolutions.
    pub fn new(mut cfg: TrainConfig, data: Dataset) -> Result<Trainer, HarnessError> {
        let sc = &data.scene.config;
        if cfg.model.posmap_res != sc.coarse_map_res {
            return Err(HarnessError::Config(format!(
                "model position map {} vs dataset coarse map {}",
                cfg.model.posmap_res, sc.coarse_map_res
            )));
        }
        if cfg.model.tex_res() != sc.avgtex_res() {
            return Err(HarnessError::Config(format!(
                "model texture {} vs dataset average texture {}",
                cfg.model.tex_res(),
                sc.avgtex_res()
            )));
        }
        if cfg.batch_size == 0 || cfg.iterations == 0 {
            return Err(HarnessError::Config("batch size and iterations must be positive".into()));
        }
        cfg.model.scene_center = data.scene.scene_center;
        cfg.model.scene_half_extent = data.scene.scene_half_extent;
        let train_frames = data.train_frames();
        if train_frames.is_empty() {
            return Err(HarnessError::Config("dataset has no training frames".into()));
        }

        let model = PicaModel::init(cfg.model.clone(), cfg.seed)?;
        let dense_topo = cfg.model.dense_topology();
        let coarse_topo = cfg.model.coarse_topology();

        // Neutral mesh and its Laplacian come from the first training
        // frame's tracked map; the EMA refines V_mu as training proceeds.
        let f0 = data.load_frame(train_frames[0])?;
        let v_mu = sample_position_map_plain(&f0.coarse, &dense_topo);
        let (lap_csr, _) = cotangent_laplacian(&dense_topo, &v_mu);
        let lap = CsrPair::new(lap_csr);
        let w_l = laplacian_weights(sc, &dense_topo);
        let w_m = mesh_weights(sc, &coarse_topo);

        let adam = Adam::new(
            AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() },
            &model.params.shapes(),
        );
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0074_7261_696e);
        let cache = vec![None; data.n_frames()];
        Ok(Trainer {
            cfg,
            model,
            data,
            train_frames,
            cache,
            dense_topo,
            coarse_topo,
            lap,
            w_l,
            w_m,
            v_mu,
            adam,
            rng,
            iter: 0,
        })
    }

    pub fn iterations_done(&self) -> usize {
        self.iter
    }

    fn frame(&mut self, idx: usize) -> Result<Arc<FrameData>, HarnessError> {
        if self.cache[idx].is_none() {
            self.cache[idx] = Some(Arc::new(self.data.load_frame(idx)?));
        }
        Ok(self.cache[idx].clone().unwrap())
    }

    /// One optimization step. On a non-finite loss or gradient the model is
    /// left untouched and the poisoned record is returned inside the error.
    pub fn step(&mut self) -> Result<LossRecord, HarnessError> {
        let fi = self.train_frames[self.rng.gen_range(0..self.train_frames.len())];
        let n_cams = self.data.scene.cameras.len();
        let batch = self.cfg.batch_size.min(n_cams);
        let cams = rand::seq::index::sample(&mut self.rng, n_cams, batch).into_vec();
        let eps = Tensor::from_fn(&[4, 8, 8], |_| StandardNormal.sample(&mut self.rng));
        let frame = self.frame(fi)?;

        let mut t = Tape::new();
        let b = self.model.bind(&mut t);
        let avgtex = t.constant(frame.avgtex.clone());
        let coarse = t.constant(frame.coarse_chw());
        let (mu, lv) = self.model.encode(&mut t, &b, avgtex, coarse)?;
        let z = self.model.reparameterize(&mut t, mu, lv, &eps)?;

        let mut image_parts = Vec::new();
        let mut depth_parts = Vec::new();
        let mut normal_parts = Vec::new();
        let mut first_graph = None;
        for &ci in &cams {
            let cam = &self.data.scene.cameras[ci].camera;
            let view = &frame.views[ci];
            let inputs = FrameInputs { cam, coarse_posmap: Some(&frame.coarse) };
            let fg = render_frame(&mut t, &self.model, &b, z, &self.dense_topo, &inputs)?;
            if let Some(rgb) = fg.rgb {
                let gt = Tensor::from_fn(&[fg.cov.len(), 3], |i| {
                    view.rgb.data[fg.cov.pixel_indices[i / 3] as usize * 3 + i % 3]
                });
                image_parts.push(losses::image_loss(&mut t, rgb, &gt)?);
            }
            if let Some(dpx) = fg.depth_px {
                let gt_d = Tensor::from_fn(&[fg.cov.len()], |i| {
                    view.depth.data[fg.cov.pixel_indices[i] as usize]
                });
                let dl = losses::depth_loss(&mut t, dpx, &gt_d, DEPTH_GATE_MM)?;
                let gt_valid: Vec<bool> = view.depth.data.iter().map(|&d| d > 0.0).collect();
                let (ln, _) = losses::normal_loss(
                    &mut t,
                    dpx,
                    &fg.gb,
                    &fg.cov,
                    cam,
                    &dl.mask,
                    &view.normals,
                    &gt_valid,
                )?;
                depth_parts.push(dl.loss);
                normal_parts.push(ln);
            }
            if first_graph.is_none() {
                first_graph = Some(fg);
            }
        }
        let fg0 = first_graph.expect("batch is never empty");

        let tracked = sample_position_map_plain(&frame.coarse, &self.coarse_topo);
        let (mesh, _) =
            losses::mesh_loss(&mut t, fg0.posmap, &tracked, &self.coarse_topo, &self.w_m)?;
        let ctx = SmoothnessContext {
            lap: self.lap.clone(),
            w_l: self.w_l.clone(),
            v_mu: self.v_mu.clone(),
        };
        let w = self.cfg.weights;
        let smooth = losses::smoothness_loss(
            &mut t,
            fg0.posmap,
            fg0.verts,
            &ctx,
            w.smooth_grad,
            w.smooth_lap,
        )?;
        let kl = losses::kl_loss(&mut t, mu, lv)?;

        let terms = LossTerms {
            image: mean_of(&mut t, &image_parts)?,
            depth: mean_of(&mut t, &depth_parts)?,
            normal: mean_of(&mut t, &normal_parts)?,
            mesh: Some(mesh),
            smooth: Some(smooth),
            kl: Some(kl),
        };
        let total = losses::total_loss(&mut t, &w, &terms)?;

        let get = |t: &Tape, v: Option<ValId>| v.map_or(0.0, |v| t.value(v).item());
        let record = LossRecord {
            iter: self.iter + 1,
            frame: fi,
            image: get(&t, terms.image),
            depth: get(&t, terms.depth),
            normal: get(&t, terms.normal),
            mesh: get(&t, terms.mesh),
            smooth: get(&t, terms.smooth),
            kl: get(&t, terms.kl),
            total: t.value(total).item(),
        };
        if !record.total.is_finite() {
            return Err(HarnessError::NonFinite { iter: record.iter });
        }

        let grads = t.backward(total);
        let gvec: Vec<Option<&Tensor>> = b.ids.iter().map(|&id| grads.wrt(id)).collect();
        for g in gvec.iter().flatten() {
            if !g.is_finite() {
                return Err(HarnessError::NonFinite { iter: record.iter });
            }
        }
        self.adam.step_refs(&mut self.model.params.tensors_mut(), &gvec);

        let lam = self.cfg.ema_lambda;
        let verts = t.value(fg0.verts);
        for (o, &n) in self.v_mu.data.iter_mut().zip(verts.data.iter()) {
            *o = (1.0 - lam) * *o + lam * n;
        }
        self.iter += 1;
        Ok(record)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), HarnessError> {
        let entries: Vec<(String, &Tensor)> =
            self.model.params.entries().iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::save(path, &entries)?;
        Ok(())
    }
}

fn mean_of(t: &mut Tape, parts: &[ValId]) -> Result<Option<ValId>, DiffError> {
    let mut acc: Option<ValId> = None;
    for &p in parts {
        acc = Some(match acc {
            Some(a) => t.add(a, p)?,
            None => p,
        });
    }
    Ok(acc.map(|a| t.scale(a, 1.0 / parts.len() as Real)))
}

/// Run a full training job against a dataset directory, writing into `out`:
/// `train_config.json`, a `train_log.jsonl` with one header line and one
/// record per iteration, cadence checkpoints, and `final.ckpt`.
///
/// `on_iter` observes every record (for progress printing).
pub fn train_with(
    cfg: &TrainConfig,
    data_root: &Path,
    out: &Path,
    mut on_iter: impl FnMut(&LossRecord),
) -> Result<TrainSummary, HarnessError> {
    fs::create_dir_all(out)?;
    let _seq = exec::sequential_scope(cfg.deterministic);
    let data = Dataset::open(data_root)?;
    let mut tr = Trainer::new(cfg.clone(), data)?;
    // The trainer may have adopted scene geometry; persist what actually ran.
    let cfg = tr.cfg.clone();
    serde_json::to_writer_pretty(File::create(out.join("train_config.json"))?, &cfg)?;

    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let w = &cfg.weights;
    writeln!(
        log,
        "{}",
        serde_json::json!({
            "event": "start",
            "weights": [w.image, w.depth, w.normal, w.mesh, w.smooth, w.kl],
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "iterations": cfg.iterations,
            "seed": cfg.seed,
            "deterministic": cfg.deterministic,
            "variant": cfg.model.variant.to_string(),
        })
    )?;

    let mut first_total = 0.0;
    let mut final_total = 0.0;
    for i in 1..=cfg.iterations {
        let record = match tr.step() {
            Ok(r) => r,
            Err(HarnessError::NonFinite { iter }) => {
                // Parameters predate the poisoned step; keep them.
                tr.save_checkpoint(&out.join("last_good.ckpt"))?;
                writeln!(log, "{}", serde_json::json!({ "event": "abort", "iter": iter }))?;
                log.flush()?;
                return Err(HarnessError::NonFinite { iter });
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        if i == 1 {
            first_total = record.total;
        }
        final_total = record.total;
        if cfg.checkpoint_every > 0 && i % cfg.checkpoint_every == 0 && i < cfg.iterations {
            tr.save_checkpoint(&out.join(format!("iter_{i:06}.ckpt")))?;
        }
        on_iter(&record);
    }
    log.flush()?;
    let ckpt = out.join("final.ckpt");
    tr.save_checkpoint(&ckpt)?;
    Ok(TrainSummary {
        iterations: cfg.iterations,
        first_total,
        final_total,
        checkpoint: ckpt,
        log: log_path,
    })
}

pub fn train(cfg: &TrainConfig, data_root: &Path, out: &Path) -> Result<TrainSummary, HarnessError> {
    train_with(cfg, data_root, out, |_| {})
}

/// Load a checkpoint written by [`train_with`] back into a model built from
/// the `train_config.json` sitting next to it.
pub fn load_trained(run_dir: &Path) -> Result<(TrainConfig, PicaModel), HarnessError> {
    let cfg: TrainConfig =
        serde_json::from_reader(File::open(run_dir.join("train_config.json"))?)?;
    let mut model = PicaModel::init(cfg.model.clone(), cfg.seed)?;
    let loaded = checkpoint::load(&run_dir.join("final.ckpt"))?;
    model.params.assign(loaded)?;
    Ok((cfg, model))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::scenegen::{write_dataset, SceneConfig};

    pub(crate) fn tiny_scene() -> SceneConfig {
        SceneConfig {
            seed: 11,
            n_frames: 6,
            image_size: 32,
            coarse_map_res: 16,
            avgtex_scale: 4,
            render_grid: 33,
            n_bumps: 4,
            camera_angles: vec![(0.0, 0.0), (20.0, 8.0), (-10.0, 22.0)],
            ..SceneConfig::default()
        }
    }

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            posmap_res: 16,
            channel_base: 2,
            grid_rows: 15,
            grid_cols: 15,
            coarse_rows: 5,
            coarse_cols: 5,
            map_uv_res: 16,
            map_1d_len: 32,
            ..ModelConfig::desk()
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            model: tiny_model(),
            batch_size: 2,
            iterations: 40,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_tiny_scene() {
        let dir = tempfile::tempdir().unwrap();
        let data_root = dir.path().join("data");
        write_dataset(&tiny_scene(), &data_root).unwrap();

        let mut records = Vec::new();
        let sum = train_with(&tiny_train_cfg(), &data_root, &dir.path().join("run"), |r| {
            records.push(r.clone())
        })
        .unwrap();
        assert_eq!(records.len(), 40);
        assert!(sum.first_total.is_finite() && sum.final_total.is_finite());
        // Adam at 1e-3 reliably cuts the early loss well before 40 iters.
        let early: Real = records[..5].iter().map(|r| r.total).sum::<Real>() / 5.0;
        let late: Real = records[35..].iter().map(|r| r.total).sum::<Real>() / 5.0;
        assert!(late < 0.8 * early, "no progress: early {early} late {late}");
        for r in &records {
            assert!(r.image >= 0.0 && r.depth >= 0.0 && r.normal >= 0.0);
            assert!(r.mesh >= 0.0 && r.smooth >= 0.0);
        }
        assert!(dir.path().join("run/final.ckpt").is_file());

        let (cfg2, model2) = load_trained(&dir.path().join("run")).unwrap();
        assert_eq!(cfg2.iterations, 40);
        let fresh = PicaModel::init(cfg2.model.clone(), cfg2.seed).unwrap();
        assert_eq!(model2.params.total_params(), fresh.params.total_params());
        // Training moved the weights, so the checkpoint must differ from init.
        let moved = model2
            .params
            .entries()
            .iter()
            .zip(fresh.params.entries())
            .any(|((_, a), (_, b))| a.data != b.data);
        assert!(moved);
    }

    #[test]
    fn deterministic_runs_produce_identical_logs() {
        let dir = tempfile::tempdir().unwrap();
        let data_root = dir.path().join("data");
        write_dataset(&tiny_scene(), &data_root).unwrap();

        let cfg = TrainConfig { iterations: 6, deterministic: true, ..tiny_train_cfg() };
        train(&cfg, &data_root, &dir.path().join("a")).unwrap();
        train(&cfg, &data_root, &dir.path().join("b")).unwrap();
        let a = fs::read(dir.path().join("a/train_log.jsonl")).unwrap();
        let b = fs::read(dir.path().join("b/train_log.jsonl")).unwrap();
        assert!(!a.is_empty() && a == b);
    }

    #[test]
    fn log_header_echoes_weights() {
        let dir = tempfile::tempdir().unwrap();
        let data_root = dir.path().join("data");
        write_dataset(&tiny_scene(), &data_root).unwrap();
        let cfg = TrainConfig { iterations: 1, ..tiny_train_cfg() };
        train(&cfg, &data_root, &dir.path().join("run")).unwrap();

        let log = fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
        let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(header["event"], "start");
        let w: Vec<f64> =
            header["weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(w, vec![2.0, 10.0, 1.0, 0.1, 1.0, 0.001]);
        // Exactly one record line follows, and it parses back.
        let rec: LossRecord = serde_json::from_str(log.lines().nth(1).unwrap()).unwrap();
        assert_eq!(rec.iter, 1);
        assert_eq!(log.lines().count(), 2);
    }

    #[test]
    fn exploding_step_aborts_with_saved_state() {
        let dir = tempfile::tempdir().unwrap();
        let data_root = dir.path().join("data");
        write_dataset(&tiny_scene(), &data_root).unwrap();

        // An absurd learning rate overflows the f32 pipeline within a few
        // steps; the run must abort cleanly rather than stream NaN records.
        let cfg = TrainConfig {
            learning_rate: 1e30,
            iterations: 50,
            ..tiny_train_cfg()
        };
        let err = train(&cfg, &data_root, &dir.path().join("run")).unwrap_err();
        let HarnessError::NonFinite { iter } = err else {
            panic!("wrong error: {err}");
        };
        assert!(iter >= 1 && iter <= 50);
        assert!(dir.path().join("run/last_good.ckpt").is_file());
        let log = fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
        assert!(log.lines().last().unwrap().contains("\"abort\""));
        // Every record that did land is finite.
        for line in log.lines().skip(1) {
            if let Ok(r) = serde_json::from_str::<LossRecord>(line) {
                assert!(r.total.is_finite());
            }
        }
    }

    #[test]
    fn mismatched_resolution_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data_root = dir.path().join("data");
        write_dataset(&tiny_scene(), &data_root).unwrap();
        let cfg = TrainConfig { model: ModelConfig::desk(), ..tiny_train_cfg() };
        let err = Trainer::new(cfg, Dataset::open(&data_root).unwrap()).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)), "{err}");
    }
}
