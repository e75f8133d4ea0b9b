//! Aggregated benchmark tables in JSON, CSV and aligned text.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::tasks::{MetricKind, TaskKind};
use crate::vict::Setting;

pub const AVG_KEY: &str = "avg";
pub const CLEAN_KEY: &str = "clean";
/// Relative frozen/tuned gap above which a clean-data row is flagged.
pub const CLEAN_GAP_LIMIT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub setting: Setting,
    pub corruption: String,
    pub severity: u8,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanGap {
    pub setting: Setting,
    pub frozen: f64,
    pub vict: f64,
    /// `|vict − frozen| / |frozen|`
    pub relative_gap: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: TaskKind,
    pub metric: MetricKind,
    pub master_seed: u64,
    pub num_samples: usize,
    /// Samples that failed and were left out of their row.
    pub failures: usize,
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clean_gaps: Vec<CleanGap>,
}

/// Identifies one cell of the result table.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RowKey {
    pub method: String,
    pub setting: Setting,
    pub corruption: String,
    pub severity: u8,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricReport {
    /// Builds rows in the given key order, then one average row per
    /// `(method, setting, severity)` over the real corruptions.
    pub fn from_cells(
        task: TaskKind,
        master_seed: u64,
        num_samples: usize,
        cells: Vec<(RowKey, Vec<f64>)>,
        failures: usize,
    ) -> Self {
        let mut rows: Vec<ReportRow> = cells
            .into_iter()
            .map(|(k, values)| {
                let (mean, std) = mean_std(&values);
                ReportRow {
                    method: k.method,
                    setting: k.setting,
                    corruption: k.corruption,
                    severity: k.severity,
                    mean,
                    std,
                    n: values.len(),
                }
            })
            .collect();

        let mut groups: Vec<(String, Setting, u8)> = Vec::new();
        for r in rows.iter().filter(|r| r.corruption != CLEAN_KEY) {
            let g = (r.method.clone(), r.setting, r.severity);
            if !groups.contains(&g) {
                groups.push(g);
            }
        }
        let avg: Vec<ReportRow> = groups
            .into_iter()
            .map(|(method, setting, severity)| {
                let means: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.method == method && r.setting == setting && r.severity == severity && r.n > 0)
                    .map(|r| r.mean)
                    .collect();
                let (mean, std) = mean_std(&means);
                ReportRow {
                    method,
                    setting,
                    corruption: AVG_KEY.to_string(),
                    severity,
                    mean,
                    std,
                    n: means.len(),
                }
            })
            .collect();
        rows.extend(avg);

        Self {
            task,
            metric: task.metric(),
            master_seed,
            num_samples,
            failures,
            rows,
            clean_gaps: Vec::new(),
        }
    }

    pub fn row(&self, method: &str, setting: Setting, corruption: &str, severity: u8) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.setting == setting && r.corruption == corruption && r.severity == severity)
    }

    /// Fills `clean_gaps` from the clean frozen and vict rows.
    pub fn compute_clean_gaps(&mut self) {
        let mut gaps = Vec::new();
        for frozen in self.rows.iter().filter(|r| r.method == "frozen" && r.corruption == CLEAN_KEY) {
            if let Some(vict) = self.row("vict", frozen.setting, CLEAN_KEY, frozen.severity) {
                let relative_gap = (vict.mean - frozen.mean).abs() / frozen.mean.abs().max(f64::MIN_POSITIVE);
                gaps.push(CleanGap {
                    setting: frozen.setting,
                    frozen: frozen.mean,
                    vict: vict.mean,
                    relative_gap,
                    flagged: relative_gap > CLEAN_GAP_LIMIT,
                });
            }
        }
        self.clean_gaps = gaps;
    }

    /// True when every average row equals the mean of its per-corruption rows.
    pub fn averages_consistent(&self) -> bool {
        self.rows.iter().filter(|r| r.corruption == AVG_KEY).all(|avg| {
            let means: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| {
                    r.corruption != AVG_KEY
                        && r.corruption != CLEAN_KEY
                        && r.method == avg.method
                        && r.setting == avg.setting
                        && r.severity == avg.severity
                        && r.n > 0
                })
                .map(|r| r.mean)
                .collect();
            let (mean, _) = mean_std(&means);
            means.len() == avg.n && (mean == avg.mean || (mean - avg.mean).abs() <= 1e-12 * mean.abs().max(1.0))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "method,setting,corruption,severity,mean,std,n")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{:.6},{:.6},{}",
                r.method, r.setting, r.corruption, r.severity, r.mean, r.std, r.n
            )?;
        }
        Ok(())
    }

    /// One line per (method, setting, severity), one column per corruption.
    pub fn to_text_table(&self) -> String {
        let mut columns: Vec<&str> = Vec::new();
        let mut lines: Vec<(String, Setting, u8)> = Vec::new();
        for r in &self.rows {
            if !columns.contains(&r.corruption.as_str()) {
                columns.push(&r.corruption);
            }
            let l = (r.method.clone(), r.setting, r.severity);
            if !lines.contains(&l) {
                lines.push(l);
            }
        }
        let header: Vec<String> = ["method", "setting", "sev"]
            .iter()
            .map(|s| s.to_string())
            .chain(columns.iter().map(|c| c.to_string()))
            .collect();
        let mut table = vec![header];
        for (method, setting, severity) in &lines {
            let mut cells = vec![method.clone(), setting.to_string(), severity.to_string()];
            for c in &columns {
                cells.push(match self.row(method, *setting, c, *severity) {
                    Some(r) if r.n > 0 => format!("{:.2}", r.mean),
                    _ => "-".to_string(),
                });
            }
            table.push(cells);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|i| table.iter().map(|row| row[i].len()).max().unwrap_or(0))
            .collect();
        let mut out = format!(
            "task {} ({}), seed {}, {} samples per cell, {} failures\n",
            self.task.name(),
            self.metric.name(),
            self.master_seed,
            self.num_samples,
            self.failures
        );
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, w))| if i < 2 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        for g in &self.clean_gaps {
            let _ = writeln!(
                out,
                "clean {}: frozen {:.3} vict {:.3} gap {:.2}%{}",
                g.setting,
                g.frozen,
                g.vict,
                100.0 * g.relative_gap,
                if g.flagged { " FLAGGED" } else { "" }
            );
        }
        out
    }
}
