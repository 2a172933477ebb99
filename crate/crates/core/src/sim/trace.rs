use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::graph::PoseId;

/// One applied Update, recorded after the global counter advanced to `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: u64,
    pub time_s: f64,
    pub robot: usize,
    /// `f(x^k)`.
    pub cost: f64,
    /// `‖rgrad f(x^k)‖`.
    pub gradnorm: f64,
    /// `f(x^k) − f(x^{k−1})`, computed from the acting robot's edges.
    pub cost_change: f64,
    /// `‖rgrad_{i_k} f(x^{k−1})‖²` with up-to-date neighbor values.
    pub robot_gradnorm_sq: f64,
    /// `‖η^{k−1}‖²` of the applied direction.
    pub eta_norm_sq: f64,
    /// Staleness of the cached values per neighbor robot, in global updates.
    pub staleness: Vec<(usize, u64)>,
    pub max_staleness: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub robots: usize,
    pub initial_cost: f64,
    pub initial_gradnorm: f64,
    /// Every `stride`-th Update is recorded.
    pub stride: u64,
    pub records: Vec<TraceRecord>,
    /// Total number of Updates applied.
    pub iterations: u64,
    pub elapsed_s: f64,
    /// Maximum staleness over all Updates, not only recorded ones.
    pub max_staleness: u64,
    /// Minimum `‖rgrad f(x^k)‖²` over `x⁰` and all recorded iterates.
    pub min_gradnorm_sq: f64,
    pub final_cost: f64,
    pub final_gradnorm: f64,
    /// Updates applied per robot.
    pub updates_per_robot: Vec<u64>,
}

pub const TRACE_CSV_HEADER: &str = "k,time_s,robot,f,gradnorm,max_staleness";

impl SimulationTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 2));
        out.push_str(TRACE_CSV_HEADER);
        out.push('\n');
        let _ = writeln!(out, "0,0,,{},{},0", self.initial_cost, self.initial_gradnorm);
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.k, r.time_s, r.robot, r.cost, r.gradnorm, r.max_staleness
            );
        }
        out
    }
}

/// Maximum staleness `B` observed in a run.
pub fn measured_max_delay(trace: &SimulationTrace) -> u64 {
    trace
        .records
        .iter()
        .map(|r| r.max_staleness)
        .max()
        .unwrap_or(0)
        .max(trace.max_staleness)
}

/// A transmitted message, without the pose values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub sent_s: f64,
    pub delivered_s: f64,
    pub from: usize,
    pub to: usize,
    /// Commit count of the sender when the message was emitted.
    pub version: u64,
    pub poses: Vec<PoseId>,
}
