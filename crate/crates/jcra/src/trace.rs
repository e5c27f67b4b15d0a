//! Training trace as JSON lines.

use jcra_core::losses::LossBreakdown;
use jcra_core::trainer::TrainTrace;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceLine {
    pub step: usize,
    pub l_c: f64,
    pub l_hm: f64,
    pub l_reg: f64,
    pub l_oks: f64,
    pub total: f64,
}

impl TraceLine {
    pub fn new(step: usize, l: &LossBreakdown) -> Self {
        Self {
            step,
            l_c: l.l_c,
            l_hm: l.l_hm,
            l_reg: l.l_reg,
            l_oks: l.l_oks,
            total: l.total,
        }
    }
}

/// One line per logged step. Values use the shortest text that reads back
/// to the same bits.
pub fn render(trace: &TrainTrace, log_every: usize) -> String {
    let mut out = String::new();
    for (step, l) in trace.logged(log_every) {
        out.push_str(&serde_json::to_string(&TraceLine::new(step, &l)).expect("finite losses serialise"));
        out.push('\n');
    }
    out
}

pub fn parse(text: &str) -> serde_json::Result<Vec<TraceLine>> {
    text.lines().map(serde_json::from_str).collect()
}
