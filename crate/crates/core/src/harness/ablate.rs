use std::fmt::Write as _;

use crate::data::{PuzzleInstance, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelConfig};

use super::config::TrainConfig;
use super::train::{evaluate, train};

pub const REPORT_COLUMNS: [&str; 6] = ["vision", "text", "align", "pool", "val_acc", "test_acc"];

const NA: &str = "NA";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub vision: String,
    pub text: String,
    pub align: String,
    pub pool: String,
    pub head: HeadKind,
    /// `Err` holds the failure message of a configuration that did not
    /// finish; the grid carries on regardless.
    pub result: std::result::Result<(f64, f64), String>,
}

impl AblationRow {
    fn describe(cfg: &ModelConfig) -> Self {
        let (vision, text, align, pool) = match cfg.head {
            HeadKind::Classification => (
                cfg.vision.name.clone(),
                cfg.text.name.clone(),
                cfg.fusion.align.to_string(),
                cfg.fusion.pool.to_string(),
            ),
            HeadKind::Matching => (
                format!("{}.v", cfg.vision.name),
                format!("{}.t", cfg.text.name),
                NA.to_string(),
                NA.to_string(),
            ),
        };
        Self {
            vision,
            text,
            align,
            pool,
            head: cfg.head,
            result: Err("not run".into()),
        }
    }

    pub fn val_acc(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|r| r.0)
    }

    pub fn test_acc(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|r| r.1)
    }

    fn cells(&self) -> [String; 6] {
        let (val, test) = match &self.result {
            Ok((v, t)) => (format!("{v:.4}"), format!("{t:.4}")),
            Err(msg) => (NA.to_string(), format!("failed: {}", msg.replace([',', '\n', '\r'], " "))),
        };
        [
            self.vision.clone(),
            self.text.clone(),
            self.align.clone(),
            self.pool.clone(),
            val,
            test,
        ]
    }
}

/// Rows ordered by test accuracy, best first; failed rows last.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.cells().join(","));
            out.push('\n');
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let cells: Vec<[String; 6]> = self.rows.iter().map(AblationRow::cells).collect();
        let mut widths = REPORT_COLUMNS.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            let parts: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(out, "{}", parts.join("  ").trim_end()).unwrap();
        };
        line(&mut out, &REPORT_COLUMNS);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
        for row in &cells {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}

/// Trains and evaluates every configuration on the same split and data.
/// All configurations must share one seed.
pub fn ablate(
    grid: &[ModelConfig],
    train_cfg: &TrainConfig,
    instances: &[PuzzleInstance],
    split: &SplitSpec,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let Some(first) = grid.first() else {
        return Err(Error::Input("ablation grid is empty".into()));
    };
    if let Some(cfg) = grid.iter().find(|c| c.seed != first.seed) {
        return Err(Error::Contract(format!(
            "ablation rows must share one seed, found {} and {}",
            first.seed, cfg.seed
        )));
    }
    let test_set = split.select(instances, Split::Test);
    let mut rows = Vec::with_capacity(grid.len());
    for cfg in grid {
        let mut row = AblationRow::describe(cfg);
        row.result = train(cfg, train_cfg, instances, split)
            .and_then(|out| Ok((out.best_val_accuracy(), evaluate(&out.model, test_set.iter().copied())?)))
            .map_err(|e| e.to_string());
        on_row(&row);
        rows.push(row);
    }
    rows.sort_by(|a, b| match (a.test_acc(), b.test_acc()) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{AlignDirection, PoolVariant};

    fn row(cfg: &ModelConfig, result: std::result::Result<(f64, f64), String>) -> AblationRow {
        AblationRow {
            result,
            ..AblationRow::describe(cfg)
        }
    }

    #[test]
    fn matching_rows_have_no_fusion_columns() {
        let r = AblationRow::describe(&ModelConfig::tiny_matching(0));
        assert_eq!((r.vision.as_str(), r.text.as_str(), r.align.as_str(), r.pool.as_str()), ("tiny.v", "tiny.t", "NA", "NA"));
        let r = AblationRow::describe(&ModelConfig::tiny(AlignDirection::ImageToText, PoolVariant::FirstToken, 0));
        assert_eq!((r.align.as_str(), r.pool.as_str()), ("I_to_T", "first-token"));
    }

    #[test]
    fn csv_layout_and_failed_rows() {
        let cfg = ModelConfig::tiny(AlignDirection::TextToImage, PoolVariant::AttnPool, 0);
        let report = AblationReport {
            rows: vec![row(&cfg, Ok((0.5, 0.25))), row(&cfg, Err("boom, bad\nthing".into()))],
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "vision,text,align,pool,val_acc,test_acc");
        assert_eq!(lines[1], "tiny,tiny,T_to_I,attn-pool,0.5000,0.2500");
        assert_eq!(lines[2], "tiny,tiny,T_to_I,attn-pool,NA,failed: boom  bad thing");
        assert!(lines.iter().all(|l| l.split(',').count() == 6));
        let table = report.to_table();
        assert!(table.starts_with("vision  text  align   pool       val_acc  test_acc"));
        assert_eq!(table.lines().count(), 4);
    }

    #[test]
    fn empty_or_mixed_seed_grid_is_rejected() {
        let split = crate::data::puzzle_split(&[0, 1, 2], 0).unwrap();
        assert!(ablate(&[], &TrainConfig::default(), &[], &split, |_| {}).is_err());
        let grid = [ModelConfig::tiny_matching(0), ModelConfig::tiny_matching(1)];
        assert!(matches!(
            ablate(&grid, &TrainConfig::default(), &[], &split, |_| {}),
            Err(Error::Contract(_))
        ));
    }
}
