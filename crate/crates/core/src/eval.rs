//! Evaluation reports and the block/LDIM ablation runner.

use serde::{Deserialize, Serialize};

use crate::backbone::{build_model, count_macs, count_parameters, BlockKind, Model, ModelConfig};
use crate::data::Dataset;
use crate::error::{ensure, Result};
use crate::metrics::{psnr, ssim};
use crate::train::{train, LogRecord, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub images: Vec<ImageMetrics>,
}

/// PSNR/SSIM of the clamped full-resolution output of every pair.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<EvalReport> {
    ensure!(!dataset.is_empty(), Input, "cannot evaluate on an empty dataset");
    let images = dataset
        .pairs
        .iter()
        .map(|pair| {
            let restored = model.forward(&pair.degraded)?.full.clamp(0.0, 1.0);
            Ok(ImageMetrics {
                psnr: psnr(&restored, &pair.clean, 1.0)?,
                ssim: ssim(&restored, &pair.clean)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = images.len() as f64;
    Ok(EvalReport {
        mean_psnr: images.iter().map(|m| m.psnr).sum::<f64>() / n,
        mean_ssim: images.iter().map(|m| m.ssim).sum::<f64>() / n,
        images,
    })
}

/// One model variant of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Variant {
    pub name: &'static str,
    pub block: BlockKind,
    pub use_ldim: bool,
}

pub const ABLATION_ROWS: [Variant; 6] = [
    Variant { name: "baseline", block: BlockKind::Plain, use_ldim: false },
    Variant { name: "+D-RSM", block: BlockKind::Drsm, use_ldim: false },
    Variant { name: "+ERSM", block: BlockKind::Ersm, use_ldim: false },
    Variant { name: "+LDIM", block: BlockKind::Plain, use_ldim: true },
    Variant { name: "D-RSM+LDIM", block: BlockKind::Drsm, use_ldim: true },
    Variant { name: "ERSM+LDIM", block: BlockKind::Ersm, use_ldim: true },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub block: BlockKind,
    pub use_ldim: bool,
    pub params: usize,
    /// Multiply-accumulates for one training patch.
    pub macs: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub per_seed_psnr: Vec<f64>,
    /// Final-iteration training loss per seed.
    pub final_loss: Vec<f64>,
}

/// An expected ordering between two rows that did not hold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inversion {
    pub better: String,
    pub worse: String,
    pub psnr_better: f64,
    pub psnr_worse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Pairs `(a, b)` for which `a` is expected to score at least as high as `b`.
pub const EXPECTED_ORDER: [(&str, &str); 4] = [
    ("+ERSM", "+D-RSM"),
    ("ERSM+LDIM", "D-RSM+LDIM"),
    ("+LDIM", "baseline"),
    ("ERSM+LDIM", "+ERSM"),
];

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn inversions(&self) -> Vec<Inversion> {
        EXPECTED_ORDER
            .iter()
            .filter_map(|&(better, worse)| {
                let (b, w) = (self.row(better)?, self.row(worse)?);
                (b.psnr < w.psnr).then(|| Inversion {
                    better: better.to_string(),
                    worse: worse.to_string(),
                    psnr_better: b.psnr,
                    psnr_worse: w.psnr,
                })
            })
            .collect()
    }
}

/// Trains every variant once per seed (model init and batch order both
/// follow the seed) and reports mean training-set metrics.
pub fn run_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    seeds: &[u64],
    variants: &[Variant],
    mut on_run: impl FnMut(&Variant, u64, &[LogRecord]),
) -> Result<AblationTable> {
    ensure!(!seeds.is_empty(), Config, "ablation needs at least one seed");
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let cfg = ModelConfig {
            block: variant.block,
            use_ldim: variant.use_ldim,
            ..base.clone()
        };
        let mut per_seed_psnr = Vec::new();
        let mut per_seed_ssim = Vec::new();
        let mut final_loss = Vec::new();
        let mut params = 0;
        let mut macs = 0;
        for &seed in seeds {
            let model = build_model(&cfg, seed)?;
            params = count_parameters(&model);
            macs = count_macs(&model, train_cfg.patch, train_cfg.patch)?;
            let run_cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let (trainer, log) = train(model, dataset, &run_cfg)?;
            on_run(variant, seed, &log);
            let report = evaluate(&trainer.model, dataset)?;
            per_seed_psnr.push(report.mean_psnr);
            per_seed_ssim.push(report.mean_ssim);
            final_loss.push(log.last().map_or(f64::NAN, |r| r.total));
        }
        let n = seeds.len() as f64;
        rows.push(AblationRow {
            name: variant.name.to_string(),
            block: variant.block,
            use_ldim: variant.use_ldim,
            params,
            macs,
            psnr: per_seed_psnr.iter().sum::<f64>() / n,
            ssim: per_seed_ssim.iter().sum::<f64>() / n,
            per_seed_psnr,
            final_loss,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DegradationKind, Pair};

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            base_channels: 4,
            blocks_per_scale: 1,
            ..ModelConfig::default()
        };
        build_model(&cfg, seed).unwrap()
    }

    #[test]
    fn identity_model_on_clean_pairs_is_perfect() {
        let data = Dataset::synthesize(DegradationKind::Haze, 16, 16, 2, 0).unwrap();
        let clean = Dataset {
            pairs: data
                .pairs
                .iter()
                .map(|p| Pair {
                    degraded: p.clean.clone(),
                    clean: p.clean.clone(),
                })
                .collect(),
        };
        let report = evaluate(&tiny_model(0), &clean).unwrap();
        assert_eq!(report.mean_psnr, f64::INFINITY);
        assert_eq!(report.mean_ssim, 1.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(evaluate(&tiny_model(0), &Dataset::default()).is_err());
    }

    #[test]
    fn report_matches_per_image_recomputation() {
        let data = Dataset::synthesize(DegradationKind::Snow, 16, 16, 3, 1).unwrap();
        let report = evaluate(&tiny_model(1), &data).unwrap();
        for (pair, m) in data.pairs.iter().zip(&report.images) {
            // fresh model: output is the degraded input
            let mse: f64 = pair
                .degraded
                .data()
                .iter()
                .zip(pair.clean.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / pair.clean.numel() as f64;
            assert!((m.psnr - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        }
        let mean = report.images.iter().map(|m| m.psnr).sum::<f64>() / 3.0;
        assert_eq!(report.mean_psnr, mean);
    }

    #[test]
    fn ablation_smoke_emits_every_row() {
        let data = Dataset::synthesize(DegradationKind::Haze, 16, 16, 2, 2).unwrap();
        let base = ModelConfig {
            base_channels: 4,
            blocks_per_scale: 1,
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            iterations: 2,
            batch_size: 2,
            patch: 16,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let mut runs = 0;
        let table = run_ablation(&base, &cfg, &data, &[0], &ABLATION_ROWS, |_, _, _| runs += 1).unwrap();
        assert_eq!(runs, 6);
        assert_eq!(table.rows.len(), 6);
        assert!(table.rows.iter().all(|r| r.psnr.is_finite() && r.ssim.is_finite()));
        assert_eq!(table.row("+ERSM").unwrap().params, table.row("+D-RSM").unwrap().params);
        assert!(table.row("+LDIM").unwrap().params > table.row("baseline").unwrap().params);
    }
}
