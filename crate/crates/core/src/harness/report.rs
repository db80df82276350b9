use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::codec::OpCounts;
use crate::protocol::PhaseTimes;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u32,
    /// Mean loss over the epoch, each batch scored before its update.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub steps: u64,
}

/// Wall time per phase, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseSeconds {
    pub encrypt: f64,
    pub homomorphic: f64,
    pub decrypt: f64,
    pub plaintext: f64,
    pub transport: f64,
}

impl PhaseSeconds {
    pub fn total(&self) -> f64 {
        self.encrypt + self.homomorphic + self.decrypt + self.plaintext + self.transport
    }
}

impl From<PhaseTimes> for PhaseSeconds {
    fn from(t: PhaseTimes) -> Self {
        Self {
            encrypt: t.encrypt.as_secs_f64(),
            homomorphic: t.homomorphic.as_secs_f64(),
            decrypt: t.decrypt.as_secs_f64(),
            plaintext: t.plaintext.as_secs_f64(),
            transport: t.transport.as_secs_f64(),
        }
    }
}

/// Outcome of one training run. Everything except [`RunReport::timing`]
/// and the transcript digest is a function of the seed and configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: String,
    pub dataset: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub epochs: Vec<EpochReport>,
    pub final_metrics: FinalMetrics,
    pub ops: Option<OpCounts>,
    pub timing: Timing,
    pub transcript: Option<TranscriptInfo>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phases: PhaseSeconds,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TranscriptInfo {
    pub sha256: String,
    pub bytes: u64,
    pub frames: u64,
}

/// One line of the report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Run { kind: String, dataset: String, seed: u64, config: serde_json::Value },
    Epoch(EpochReport),
    Final(FinalMetrics),
    Ops(OpCounts),
    Timing(Timing),
    Transcript(TranscriptInfo),
}

impl RunReport {
    fn metric_lines(&self) -> Vec<Line> {
        let mut lines = vec![Line::Run { kind: self.kind.clone(), dataset: self.dataset.clone(), seed: self.seed, config: self.config.clone() }];
        lines.extend(self.epochs.iter().copied().map(Line::Epoch));
        lines.push(Line::Final(self.final_metrics));
        if let Some(ops) = self.ops {
            lines.push(Line::Ops(ops));
        }
        lines
    }

    fn render(lines: &[Line]) -> String {
        lines.iter().map(|l| serde_json::to_string(l).expect("report line serializes") + "\n").collect()
    }

    /// The deterministic part as JSON lines.
    pub fn metrics_jsonl(&self) -> String {
        Self::render(&self.metric_lines())
    }

    /// Everything, including timings and the transcript digest.
    pub fn to_jsonl(&self) -> String {
        let mut lines = self.metric_lines();
        lines.push(Line::Timing(self.timing));
        if let Some(t) = &self.transcript {
            lines.push(Line::Transcript(t.clone()));
        }
        Self::render(&lines)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(self.to_jsonl().as_bytes())
    }

    pub fn from_jsonl<R: BufRead>(r: R) -> Result<Self, HarnessError> {
        let mut out = RunReport::default();
        let mut seen_run = false;
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| HarnessError::Parse { line: i + 1, reason: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| HarnessError::Parse { line: i + 1, reason: e.to_string() })?;
            match parsed {
                Line::Run { kind, dataset, seed, config } => {
                    (out.kind, out.dataset, out.seed, out.config) = (kind, dataset, seed, config);
                    seen_run = true;
                }
                Line::Epoch(e) => out.epochs.push(e),
                Line::Final(f) => out.final_metrics = f,
                Line::Ops(o) => out.ops = Some(o),
                Line::Timing(t) => out.timing = t,
                Line::Transcript(t) => out.transcript = Some(t),
            }
        }
        if !seen_run {
            return Err(HarnessError::Parse { line: 1, reason: "report has no run record".into() });
        }
        Ok(out)
    }
}

/// Timing for one input width in a dimension sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub input_dim: usize,
    /// Fastest of the trials, seconds for one split-model inference.
    pub protocol_seconds: f64,
    /// Fastest of the trials for the encrypted-input MLR baseline.
    pub mlr_seconds: f64,
    pub protocol_median_seconds: f64,
    pub mlr_median_seconds: f64,
    pub protocol_phases: PhaseSeconds,
    pub protocol_ops: OpCounts,
    pub mlr_ops: OpCounts,
    /// Ops for one training step of the split model (both parties).
    pub train_step_ops: OpCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub hidden_dim: usize,
    pub classes: usize,
    pub key_bits: u64,
    pub trials: usize,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// `(max - min) / min` of the protocol timings.
    pub fn protocol_spread(&self) -> f64 {
        spread(self.points.iter().map(|p| p.protocol_seconds))
    }

    /// Baseline time at the largest width over the smallest.
    pub fn mlr_growth(&self) -> f64 {
        match (self.points.iter().min_by_key(|p| p.input_dim), self.points.iter().max_by_key(|p| p.input_dim)) {
            (Some(lo), Some(hi)) if lo.mlr_seconds > 0.0 => hi.mlr_seconds / lo.mlr_seconds,
            _ => 0.0,
        }
    }

    pub fn to_jsonl(&self) -> String {
        let header = serde_json::json!({
            "record": "sweep",
            "hidden_dim": self.hidden_dim,
            "classes": self.classes,
            "key_bits": self.key_bits,
            "trials": self.trials,
        });
        let mut out = header.to_string() + "\n";
        for p in &self.points {
            let mut v = serde_json::to_value(p).expect("sweep point serializes");
            v["record"] = "point".into();
            out += &(v.to_string() + "\n");
        }
        out
    }

    /// Whitespace-separated columns for gnuplot.
    pub fn gnuplot_table(&self) -> String {
        let mut out = String::from("# input_dim protocol_seconds mlr_seconds protocol_median mlr_median protocol_homomorphic_seconds\n");
        for p in &self.points {
            out += &format!(
                "{} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
                p.input_dim, p.protocol_seconds, p.mlr_seconds, p.protocol_median_seconds, p.mlr_median_seconds, p.protocol_phases.homomorphic
            );
        }
        out
    }
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > 0.0 && lo.is_finite() {
        (hi - lo) / lo
    } else {
        0.0
    }
}
