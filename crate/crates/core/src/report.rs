//! Result-file emission. Every file starts with the resolved configuration
//! as `#`-prefixed comment lines, then a CSV header and rows with reals at
//! 6 significant digits, so a run is reproducible from any of its outputs.

use std::path::Path;

use crate::channel::ChannelTrace;
use crate::config::RunConfig;
use crate::experiments::{DynamicTable, SweepResult};
use crate::textfmt::sig6;
use crate::train::EvalReport;

fn config_comment(cfg: &RunConfig) -> String {
    let mut out = String::new();
    for line in cfg.to_toml().lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out
}

fn alloc_tag(allocation: &[u8]) -> String {
    allocation
        .iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

pub fn sweep_csv(cfg: &RunConfig, sweep: &SweepResult) -> String {
    let mut out = config_comment(cfg);
    out.push_str("scheme,d,M,allocation,bits,accuracy,loss,seed\n");
    for row in &sweep.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.scheme,
            row.dim,
            row.segments,
            alloc_tag(&row.allocation),
            row.bits,
            sig6(row.accuracy),
            sig6(row.mean_loss),
            row.seed
        ));
    }
    out
}

pub fn dynamic_csv(cfg: &RunConfig, table: &DynamicTable) -> String {
    let mut out = config_comment(cfg);
    out.push_str("scheme,d,M,scenario,k,accuracy,seed\n");
    for cell in &table.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            cell.scheme,
            cfg.segment_dim,
            cfg.segments,
            cell.scenario,
            sig6(cell.skew),
            sig6(cell.accuracy),
            cfg.seed
        ));
    }
    out
}

/// Aligned text rendering of the per-scheme, per-scenario accuracy table.
pub fn dynamic_text(table: &DynamicTable) -> String {
    let name_width = table
        .scheme_names
        .iter()
        .map(|n| n.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let mut out = format!("{:name_width$}", "scheme");
    for s in &table.scenario_labels {
        out.push_str(&format!(" {s:>10}"));
    }
    out.push('\n');
    for name in &table.scheme_names {
        out.push_str(&format!("{name:name_width$}"));
        for scenario in &table.scenario_labels {
            let acc = table.accuracy(name, scenario).unwrap_or(f64::NAN);
            out.push_str(&format!(" {:>10}", sig6(acc)));
        }
        out.push('\n');
    }
    out
}

pub fn trace_csv(cfg: &RunConfig, traces: &[ChannelTrace]) -> String {
    let mut out = config_comment(cfg);
    out.push_str("t,C_t,B_t,level,latency,scheme,correct_count,delivered\n");
    for trace in traces {
        for r in &trace.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.t,
                sig6(r.capacity),
                r.budget_bits,
                r.level,
                sig6(r.latency),
                trace.scheme_names[r.scheme],
                r.correct,
                r.delivered as u8
            ));
        }
    }
    out
}

pub fn eval_csv(cfg: &RunConfig, allocation: &[u8], report: &EvalReport) -> String {
    let mut out = config_comment(cfg);
    out.push_str("scheme,d,M,allocation,bits,accuracy,loss,seed\n");
    out.push_str(&format!(
        "eval,{},{},{},{},{},{},{}\n",
        cfg.segment_dim,
        cfg.segments,
        alloc_tag(allocation),
        allocation.iter().map(|&a| a as u32).sum::<u32>(),
        sig6(report.accuracy),
        sig6(report.mean_loss),
        cfg.seed
    ));
    out
}

pub fn write(path: &Path, contents: &str) -> Result<(), String> {
    std::fs::write(path, contents).map_err(|e| format!("{path:?}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::SweepRow;

    #[test]
    fn sweep_csv_layout() {
        let cfg = RunConfig::default();
        let sweep = SweepResult {
            rows: vec![SweepRow {
                scheme: "artoveq".into(),
                dim: 2,
                segments: 4,
                allocation: vec![4, 3, 2, 1],
                bits: 10,
                accuracy: 0.853244,
                mean_loss: 0.412345,
                seed: 7,
            }],
        };
        let text = sweep_csv(&cfg, &sweep);
        assert!(text.starts_with("# "));
        let data_line = text.lines().find(|l| l.starts_with("artoveq")).unwrap();
        assert_eq!(data_line, "artoveq,2,4,4-3-2-1,10,0.853244,0.412345,7");
        let header = text.lines().find(|l| l.starts_with("scheme")).unwrap();
        assert_eq!(header, "scheme,d,M,allocation,bits,accuracy,loss,seed");
        // the embedded config parses back to the original
        let embedded: String = text
            .lines()
            .take_while(|l| l.starts_with("# "))
            .map(|l| format!("{}\n", &l[2..]))
            .collect();
        let back: RunConfig = toml::from_str(&embedded).unwrap();
        assert_eq!(back, cfg);
    }
}
