use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::{LayerStats, RouteStats};

pub const HISTORY_HEADER: &str =
    "step,train_total,train_ctc,train_l1,train_imp,train_balance,train_emb,valid_ctc,valid_ter";

/// Train-loss breakdown averaged over the batches of one eval period, plus
/// the validation metrics measured at its end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub train_total: f64,
    pub train_ctc: f64,
    pub train_l1: Option<f64>,
    pub train_imp: Option<f64>,
    pub train_balance: Option<f64>,
    pub train_emb: Option<f64>,
    pub valid_ctc: f64,
    pub valid_ter: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl HistoryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.train_total,
            self.train_ctc,
            cell(self.train_l1),
            cell(self.train_imp),
            cell(self.train_balance),
            cell(self.train_emb),
            self.valid_ctc,
            self.valid_ter
        )
    }
}

#[derive(Serialize)]
struct StatsLine<'a> {
    step: u64,
    #[serde(flatten)]
    layer: &'a LayerStats,
}

/// Appends history rows and route statistics to files, flushing after each
/// record so that an interrupted run stays readable.
pub struct HistoryWriter {
    csv: BufWriter<File>,
    jsonl: BufWriter<File>,
}

impl HistoryWriter {
    /// `preamble` lines are written before the header as `# ` comments.
    pub fn create(csv_path: &Path, stats_path: &Path, preamble: &[String]) -> Result<Self> {
        let mut csv = BufWriter::new(File::create(csv_path)?);
        for line in preamble {
            writeln!(csv, "# {line}")?;
        }
        writeln!(csv, "{HISTORY_HEADER}")?;
        csv.flush()?;
        Ok(HistoryWriter {
            csv,
            jsonl: BufWriter::new(File::create(stats_path)?),
        })
    }

    pub fn append(&mut self, row: &HistoryRow, stats: &RouteStats) -> Result<()> {
        writeln!(self.csv, "{}", row.to_csv())?;
        self.csv.flush()?;
        for layer in &stats.layers {
            serde_json::to_writer(&mut self.jsonl, &StatsLine { step: row.step, layer })?;
            self.jsonl.write_all(b"\n")?;
        }
        self.jsonl.flush()?;
        Ok(())
    }
}
