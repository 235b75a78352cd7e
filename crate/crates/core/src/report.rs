//! Report assembly and emission: a table to stdout plus CSV and JSON files.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::ops::Resource;
use crate::sim::Metrics;

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub config: String,
    pub variant: String,
    pub seed: u64,
    pub strategy: String,
    pub ips: f64,
    pub makespan_s: f64,
    pub util_compute: f64,
    pub util_intra: f64,
    pub util_inter: f64,
    pub comm_gbps: f64,
    pub intra_gbps: f64,
    pub hit_ratio: f64,
    pub pack_shards: usize,
    pub groups: usize,
    pub micro_batch: usize,
    pub dag_nodes: usize,
    pub config_hash: String,
}

impl ReportRow {
    pub fn from_metrics(
        config: &str,
        variant: &str,
        seed: u64,
        strategy: &str,
        m: &Metrics,
        config_hash: String,
    ) -> ReportRow {
        ReportRow {
            config: config.to_string(),
            variant: variant.to_string(),
            seed,
            strategy: strategy.to_string(),
            ips: m.ips,
            makespan_s: m.makespan,
            util_compute: m.utilization.get(&Resource::Compute).copied().unwrap_or(0.0),
            util_intra: m.utilization.get(&Resource::IntraBw).copied().unwrap_or(0.0),
            util_inter: m.utilization.get(&Resource::InterBw).copied().unwrap_or(0.0),
            comm_gbps: m.comm_gbps,
            intra_gbps: m.intra_gbps,
            hit_ratio: m.hit_ratio,
            pack_shards: 0,
            groups: 0,
            micro_batch: 0,
            dag_nodes: 0,
            config_hash,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub plan_summary: String,
    pub notes: Vec<String>,
    pub trace_paths: Vec<PathBuf>,
}

const COLUMNS: [&str; 15] = [
    "config",
    "variant",
    "seed",
    "strategy",
    "ips",
    "makespan_s",
    "util_compute",
    "util_intra",
    "util_inter",
    "comm_gbps",
    "hit_ratio",
    "pack_shards",
    "groups",
    "micro_batch",
    "hash",
];

impl Report {
    fn cells(row: &ReportRow) -> Vec<String> {
        vec![
            row.config.clone(),
            row.variant.clone(),
            row.seed.to_string(),
            row.strategy.clone(),
            format!("{:.1}", row.ips),
            format!("{:.6}", row.makespan_s),
            format!("{:.3}", row.util_compute),
            format!("{:.3}", row.util_intra),
            format!("{:.3}", row.util_inter),
            format!("{:.3}", row.comm_gbps),
            format!("{:.3}", row.hit_ratio),
            row.pack_shards.to_string(),
            row.groups.to_string(),
            row.micro_batch.to_string(),
            row.config_hash.clone(),
        ]
    }

    pub fn render_table(&self) -> String {
        let mut widths: Vec<usize> = COLUMNS.iter().map(|c| c.len()).collect();
        let rows: Vec<Vec<String>> = self.rows.iter().map(Self::cells).collect();
        for row in &rows {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.len());
            }
        }
        let mut out = String::new();
        let fmt_line = |cells: &[String], widths: &[usize]| -> String {
            cells
                .iter()
                .enumerate()
                .map(|(i, c)| format!("{:<w$}", c, w = widths[i]))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let header: Vec<String> = COLUMNS.iter().map(|c| c.to_string()).collect();
        out.push_str(&fmt_line(&header, &widths));
        out.push('\n');
        for row in &rows {
            out.push_str(&fmt_line(row, &widths));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{}", COLUMNS.join(","))?;
        for row in &self.rows {
            writeln!(f, "{}", Self::cells(row).join(","))?;
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)
            .map_err(|e| crate::error::Error::Config(format!("json write: {e}")))?;
        Ok(())
    }
}
