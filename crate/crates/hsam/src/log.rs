//! Line-oriented training log: one `key=value` record per epoch.
//!
//! Floats are written in Rust's shortest round-trip form, so parsing a line
//! gives back the exact values; absent values are written as `na`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lambda_w: f64,
    pub loss_stage1: f64,
    pub loss_stage2: Option<f64>,
    pub loss_total: f64,
    pub lr: f64,
    pub steps: u64,
    pub eval_dice: Option<f64>,
    pub eval_hd: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| x.to_string())
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "epoch={} lambda_w={} loss_stage1={} loss_stage2={} loss_total={} lr={} steps={} eval_dice={} eval_hd={}",
            self.epoch,
            self.lambda_w,
            self.loss_stage1,
            opt(self.loss_stage2),
            self.loss_total,
            self.lr,
            self.steps,
            opt(self.eval_dice),
            opt(self.eval_hd)
        )
        .unwrap();
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("log line {line:?}: {msg}"));
        let get = |key: &str| -> Result<&str> {
            line.split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| bad(format!("missing {key}")))
        };
        let f = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("{v:?} is not a number")));
        let o = |v: &str| if v == "na" { Ok(None) } else { f(v).map(Some) };
        let u = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("{v:?} is not an integer")));
        Ok(EpochRecord {
            epoch: u(get("epoch")?)?,
            lambda_w: f(get("lambda_w")?)?,
            loss_stage1: f(get("loss_stage1")?)?,
            loss_stage2: o(get("loss_stage2")?)?,
            loss_total: f(get("loss_total")?)?,
            lr: f(get("lr")?)?,
            steps: u(get("steps")?)?,
            eval_dice: o(get("eval_dice")?)?,
            eval_hd: o(get("eval_hd")?)?,
        })
    }
}

/// Epoch records of a log; other lines are skipped.
pub fn parse_log(text: &str) -> Result<Vec<EpochRecord>> {
    text.lines().filter(|l| l.starts_with("epoch=")).map(EpochRecord::parse).collect()
}
