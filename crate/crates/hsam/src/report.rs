//! Metric and log tables as aligned text or CSV. Values are printed in full
//! round-trip precision, never re-rounded.

use hsam_core::metrics::{HdVariant, MetricReport};

use crate::log::EpochRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| x.to_string())
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(s, &w)| format!("{s:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn csv(rows: &[Vec<String>]) -> String {
    rows.iter().map(|r| r.join(",") + "\n").collect()
}

fn render(rows: &[Vec<String>], format: Format) -> String {
    match format {
        Format::Text => align(rows),
        Format::Csv => csv(rows),
    }
}

pub fn metric_table(r: &MetricReport, format: Format) -> String {
    let hd = match r.variant {
        HdVariant::Max => "hd_max",
        HdVariant::Avg => "hd_avg",
    };
    let mut rows = vec![vec!["class".to_string(), "dice".to_string(), hd.to_string()]];
    for (c, d) in r.per_class_dice.iter().enumerate() {
        let h = if c == 0 { "na".to_string() } else { opt(r.per_class_hd[c]) };
        rows.push(vec![c.to_string(), d.to_string(), h]);
    }
    rows.push(vec!["mean".to_string(), r.mean_dice.to_string(), opt(r.mean_hd)]);
    render(&rows, format)
}

pub fn log_table(records: &[EpochRecord], format: Format) -> String {
    let mut rows = vec![[
        "epoch", "lambda_w", "loss_stage1", "loss_stage2", "loss_total", "lr", "eval_dice", "eval_hd",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect::<Vec<_>>()];
    for e in records {
        rows.push(vec![
            e.epoch.to_string(),
            e.lambda_w.to_string(),
            e.loss_stage1.to_string(),
            opt(e.loss_stage2),
            e.loss_total.to_string(),
            e.lr.to_string(),
            opt(e.eval_dice),
            opt(e.eval_hd),
        ]);
    }
    render(&rows, format)
}
