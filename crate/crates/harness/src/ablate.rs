//! Motion-mapper strategy comparison: every fusion strategy plus a
//! prosody-blinded joint variant, each trained across the configured replicate
//! seeds, tabulated as mean ± std validation MSE.

use std::time::Instant;

use dyad_core::motion::{train_mapper, MapperConfig, Strategy};
use dyad_core::rng::split_seed_labeled;

use crate::error::{HarnessError, Result};
use crate::paths::atomic_write;
use crate::stages::RunContext;

/// Fixed row order of the comparison table.
pub const VARIANTS: [(&str, Strategy, bool); 5] = [
    ("add", Strategy::Add, false),
    ("concat", Strategy::Concat, false),
    ("dual", Strategy::Dual, false),
    ("joint", Strategy::Joint, false),
    ("joint w/o prosody", Strategy::Joint, true),
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn mean_of(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,val_mse\n");
        for row in &self.rows {
            for (seed, v) in &row.per_seed {
                s.push_str(&format!("{},{},{}\n", row.variant, seed, v));
            }
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let n = self.rows.first().map_or(0, |r| r.per_seed.len());
        let mut s = format!(
            "| variant | val MSE (mean \u{b1} std, n={n}) |\n|---|---|\n"
        );
        for row in &self.rows {
            s.push_str(&format!(
                "| {} | {:.6} \u{b1} {:.6} |\n",
                row.variant, row.mean, row.std
            ));
        }
        s
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

pub fn cmd_ablate(ctx: &RunContext) -> Result<AblationTable> {
    let t0 = Instant::now();
    let samples = ctx.load_corpus_checked()?;
    let corpus_cfg = ctx.cfg.corpus.to_core(ctx.cfg.seed);
    let codebook = corpus_cfg.codebook();
    let base = ctx.cfg.mapper.model_cfg()?;

    let mut rows = Vec::with_capacity(VARIANTS.len());
    for (label, strategy, zero_prosody) in VARIANTS {
        let cfg = MapperConfig { strategy, ..base.clone() };
        let mut per_seed = Vec::with_capacity(ctx.cfg.seeds.len());
        for &replicate in &ctx.cfg.seeds {
            // the replicate anchors the row; the label decorrelates variants
            let train_seed = split_seed_labeled(replicate, label);
            let (_, report) = train_mapper(
                cfg.clone(),
                &samples,
                &codebook,
                &ctx.cfg.mapper.train_opts(zero_prosody),
                train_seed,
            )?;
            let val = *report
                .val_mse
                .last()
                .ok_or_else(|| HarnessError::Numerical("empty validation curve".into()))?;
            per_seed.push((replicate, val));
        }
        let (mean, std) = mean_std(&per_seed.iter().map(|(_, v)| *v).collect::<Vec<_>>());
        rows.push(AblationRow {
            variant: label.to_string(),
            per_seed,
            mean,
            std,
        });
    }

    let table = AblationTable { rows };
    atomic_write(&ctx.paths.ablation_csv(), table.to_csv().as_bytes())?;
    atomic_write(&ctx.paths.ablation_md(), table.to_markdown().as_bytes())?;
    ctx.update_manifest(|m| {
        m.artifacts.insert("ablation_csv".into(), "reports/ablation.csv".into());
        m.artifacts.insert("ablation_md".into(), "reports/ablation.md".into());
        m.timings_ms.insert("ablate".into(), t0.elapsed().as_millis());
    })?;
    for row in &table.rows {
        println!("ablate: {:<18} {:.6} \u{b1} {:.6}", row.variant, row.mean, row.std);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_schema_is_fixed() {
        let rows: Vec<AblationRow> = VARIANTS
            .iter()
            .enumerate()
            .map(|(i, (label, _, _))| AblationRow {
                variant: label.to_string(),
                per_seed: vec![(1, i as f64), (2, i as f64 + 0.5)],
                mean: i as f64 + 0.25,
                std: 0.25,
            })
            .collect();
        let table = AblationTable { rows };
        let csv = table.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "variant,seed,val_mse");
        assert!(lines.next().unwrap().starts_with("add,1,"));
        let md = table.to_markdown();
        let labels: Vec<&str> = md
            .lines()
            .skip(2)
            .map(|l| l.split('|').nth(1).unwrap().trim())
            .collect();
        assert_eq!(labels, vec!["add", "concat", "dual", "joint", "joint w/o prosody"]);
        assert_eq!(table.mean_of("joint"), Some(3.25));
    }

    #[test]
    fn mean_and_std_use_the_sample_convention() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - std::f64::consts::SQRT_2).abs() < 1e-12);
        let (m, s) = mean_std(&[5.0]);
        assert_eq!((m, s), (5.0, 0.0));
    }
}
