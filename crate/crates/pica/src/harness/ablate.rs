//! Decoder-input ablation: train each variant across seeds, score held-out
//! masked MSE, and tabulate mean ± std per variant.

use std::path::Path;

use serde::Serialize;

use super::eval::{evaluate, Split};
use super::train::{train, TrainConfig};
use super::HarnessError;
use crate::model::{PicaModel, Variant};
use crate::scenegen::Dataset;

#[derive(Debug, Clone)]
pub struct AblateConfig {
    /// Everything but `model.variant` and `seed`, which the grid overrides.
    pub base: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl AblateConfig {
    pub fn new(base: TrainConfig) -> AblateConfig {
        AblateConfig {
            base,
            variants: vec![Variant::Full, Variant::NoUv, Variant::UvNope, Variant::Coarse],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantRow {
    pub variant: String,
    /// Held-out masked MSE per successful seed.
    pub mse: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 with fewer than two).
    pub std: f64,
    /// One message per seed whose run failed; such seeds are excluded.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&VariantRow> {
        let name = variant.to_string();
        self.rows.iter().find(|r| r.variant == name)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>12} {:>10}  per-seed\n", "variant", "mean mse", "std");
        for r in &self.rows {
            let per: Vec<String> = r.mse.iter().map(|m| format!("{m:.3}")).collect();
            s.push_str(&format!(
                "{:<10} {:>12.3} {:>10.3}  [{}]{}\n",
                r.variant,
                r.mean,
                r.std,
                per.join(", "),
                if r.failures.is_empty() { String::new() } else { format!("  ({} failed)", r.failures.len()) },
            ));
        }
        s
    }
}

/// Train `variants × seeds` runs under `out/<variant>-s<seed>` and score
/// each on the held-out split. A diverging run is recorded and skipped, not
/// fatal. `on_event` observes one line per run for progress reporting.
pub fn ablate(
    cfg: &AblateConfig,
    data_root: &Path,
    out: &Path,
    mut on_event: impl FnMut(&str),
) -> Result<AblationReport, HarnessError> {
    std::fs::create_dir_all(out)?;
    let data = Dataset::open(data_root)?;
    let mut rows = Vec::new();
    for &variant in &cfg.variants {
        let mut mse = Vec::new();
        let mut failures = Vec::new();
        for &seed in &cfg.seeds {
            let mut tc = cfg.base.clone();
            tc.model.variant = variant;
            tc.seed = seed;
            let run = out.join(format!("{variant}-s{seed}"));
            let score = train(&tc, data_root, &run).and_then(|sum| {
                let mut model = PicaModel::init(tc.model.clone(), seed)?;
                // The trainer may adopt scene geometry; mirror that here.
                model.cfg.scene_center = data.scene.scene_center;
                model.cfg.scene_half_extent = data.scene.scene_half_extent;
                let loaded = crate::checkpoint::load(&sum.checkpoint)?;
                model.params.assign(loaded)?;
                evaluate(&model, &data, Split::Holdout)
            });
            match score {
                Ok(rep) => {
                    on_event(&format!("{variant} seed {seed}: mse {:.3}", rep.overall_mse));
                    mse.push(rep.overall_mse);
                }
                Err(e) => {
                    on_event(&format!("{variant} seed {seed}: FAILED: {e}"));
                    failures.push(format!("seed {seed}: {e}"));
                }
            }
        }
        let mean = if mse.is_empty() { f64::NAN } else { mse.iter().sum::<f64>() / mse.len() as f64 };
        let std = if mse.len() >= 2 {
            (mse.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (mse.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        rows.push(VariantRow { variant: variant.to_string(), mse, mean, std, failures });
    }
    let report = AblationReport { iterations: cfg.base.iterations, seeds: cfg.seeds.clone(), rows };
    serde_json::to_writer_pretty(std::fs::File::create(out.join("ablation.json"))?, &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::tests::{tiny_model, tiny_scene};
    use crate::scenegen::write_dataset;

    #[test]
    fn grid_runs_and_tabulates() {
        let dir = tempfile::tempdir().unwrap();
        let data_root = dir.path().join("data");
        write_dataset(&tiny_scene(), &data_root).unwrap();

        let base = TrainConfig {
            model: tiny_model(),
            batch_size: 2,
            iterations: 4,
            ..TrainConfig::default()
        };
        let cfg = AblateConfig {
            base,
            variants: vec![Variant::Full, Variant::Coarse],
            seeds: vec![0, 1],
        };
        let mut events = 0;
        let rep = ablate(&cfg, &data_root, &dir.path().join("runs"), |_| events += 1).unwrap();
        assert_eq!(events, 4);
        assert_eq!(rep.rows.len(), 2);
        for row in &rep.rows {
            assert!(row.failures.is_empty(), "{:?}", row.failures);
            assert_eq!(row.mse.len(), 2);
            assert!(row.mean.is_finite() && row.mean > 0.0);
            assert!(row.std >= 0.0);
        }
        assert!(rep.row(Variant::Full).is_some());
        assert!(rep.row(Variant::NoUv).is_none());
        assert!(dir.path().join("runs/full-s0/final.ckpt").is_file());
        assert!(dir.path().join("runs/coarse-s1/final.ckpt").is_file());
        assert!(dir.path().join("runs/ablation.json").is_file());
        let table = rep.table();
        assert!(table.contains("full") && table.contains("coarse"));
    }

    #[test]
    fn diverging_seed_is_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let data_root = dir.path().join("data");
        write_dataset(&tiny_scene(), &data_root).unwrap();

        // Absurd learning rate: every seed diverges, but the grid completes
        // and reports the failures instead of dying.
        let base = TrainConfig {
            model: tiny_model(),
            batch_size: 2,
            iterations: 10,
            learning_rate: 1e30,
            ..TrainConfig::default()
        };
        let cfg = AblateConfig { base, variants: vec![Variant::Full], seeds: vec![0] };
        let rep = ablate(&cfg, &data_root, &dir.path().join("runs"), |_| {}).unwrap();
        assert_eq!(rep.rows[0].failures.len(), 1);
        assert!(rep.rows[0].mse.is_empty());
        assert!(rep.rows[0].mean.is_nan());
    }
}
