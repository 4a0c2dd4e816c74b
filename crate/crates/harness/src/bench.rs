//! Loaned-versus-copy comparison: the full pipeline on both transports,
//! then a latency probe with camera-sized payloads.

use std::fmt::Write;
use std::path::PathBuf;
use std::time::Duration;

use crate::error::Result;
use crate::link::TransportKind;
use crate::pipeline::{run_pipeline, run_probe, PipelineConfig, RunResult, StageSet};
use crate::report::{attach_cpu, format_table, summarize, StageSummary};
use crate::scene::SceneSpec;
use crate::stage::{BenchRecord, StageKind};

/// 640 x 480 pixels of 4 bytes.
pub const PROBE_BYTES: usize = 1_228_800;

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub frames: usize,
    pub fps_cap: f64,
    pub seed: u64,
    pub stages: StageSet,
    pub processes: bool,
    pub parallel: bool,
    pub config_path: Option<PathBuf>,
    pub exe: Option<PathBuf>,
    pub probe_messages: u64,
    pub probe_bytes: usize,
    pub probe_rate: f64,
    pub timeout: Duration,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            frames: 300,
            fps_cap: 30.0,
            seed: 1,
            stages: StageSet::ALL,
            processes: true,
            parallel: false,
            config_path: None,
            exe: None,
            probe_messages: 1000,
            probe_bytes: PROBE_BYTES,
            probe_rate: 250.0,
            timeout: Duration::from_secs(30),
        }
    }
}

impl BenchOptions {
    fn pipeline(&self, transport: TransportKind) -> PipelineConfig {
        PipelineConfig {
            transport,
            stages: self.stages,
            processes: self.processes,
            config_path: self.config_path.clone(),
            parallel: self.parallel,
            exe: self.exe.clone(),
            timeout: self.timeout,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub runs: Vec<RunResult>,
    pub probes: Vec<RunResult>,
    pub summaries: Vec<StageSummary>,
    pub probe_summaries: Vec<StageSummary>,
}

fn find(s: &[StageSummary], stage: StageKind, transport: TransportKind) -> Option<&StageSummary> {
    s.iter().find(|x| x.stage == stage && x.transport == transport)
}

impl BenchReport {
    pub fn records(&self) -> Vec<BenchRecord> {
        self.runs.iter().chain(&self.probes).flat_map(RunResult::records).collect()
    }

    /// Mean probe latency of the loaned transport over that of the copy transport.
    pub fn latency_ratio(&self) -> Option<f64> {
        let l = find(&self.probe_summaries, StageKind::Probe, TransportKind::Loaned)?;
        let c = find(&self.probe_summaries, StageKind::Probe, TransportKind::Copy)?;
        Some(l.latency_ms.mean / c.latency_ms.mean)
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Pipeline ({} frames per transport)\n", self.runs.first().map_or(0, |r| r.frames_sent));
        out.push_str(&format_table(&self.summaries));
        let _ = writeln!(out, "\nCopy relative to loaned (higher favours loaned)\n");
        let _ = writeln!(out, "{:<12}  {:>10}  {:>8}  {:>8}", "Component", "Turnaround", "CPU", "Latency");
        let mut stages: Vec<StageKind> = self.summaries.iter().map(|s| s.stage).collect();
        stages.dedup();
        for stage in stages {
            let (Some(l), Some(c)) =
                (find(&self.summaries, stage, TransportKind::Loaned), find(&self.summaries, stage, TransportKind::Copy))
            else {
                continue;
            };
            let cpu = match (l.cpu_percent, c.cpu_percent) {
                (Some(a), Some(b)) if a > 0.0 => format!("{:.2}x", b / a),
                _ => "-".into(),
            };
            let _ = writeln!(
                out,
                "{:<12}  {:>10}  {:>8}  {:>8}",
                stage.to_string(),
                format!("{:.2}x", c.turnaround_ms.mean / l.turnaround_ms.mean),
                cpu,
                format!("{:.2}x", c.latency_ms.mean / l.latency_ms.mean),
            );
        }
        let _ = writeln!(
            out,
            "Reference on the embedded target: point-cloud turnaround about 7.5x and CPU load about 2x \
             lower with zero-copy transport."
        );
        if !self.probe_summaries.is_empty() {
            let _ = writeln!(out, "\nLatency probe\n");
            out.push_str(&format_table(&self.probe_summaries));
            if let Some(r) = self.latency_ratio() {
                let _ = writeln!(out, "\nloaned / copy mean latency: {r:.3}");
            }
        }
        out
    }
}

pub fn run_bench(opts: &BenchOptions) -> Result<BenchReport> {
    let spec = SceneSpec { frames: opts.frames, fps_cap: opts.fps_cap, seed: opts.seed, ..Default::default() };
    let mut runs = Vec::new();
    let mut probes = Vec::new();
    for t in TransportKind::ALL {
        log::info!("pipeline on {t}");
        runs.push(run_pipeline(&opts.pipeline(t), &spec)?);
    }
    if opts.probe_messages > 0 {
        for t in TransportKind::ALL {
            log::info!("latency probe on {t}");
            probes.push(run_probe(&opts.pipeline(t), opts.probe_messages, opts.probe_bytes, opts.probe_rate)?);
        }
    }
    let stage_reports: Vec<_> = runs.iter().flat_map(|r| r.stages.iter().cloned()).collect();
    let mut summaries = summarize(&runs.iter().flat_map(RunResult::records).collect::<Vec<_>>());
    attach_cpu(&mut summaries, &stage_reports);
    let probe_reports: Vec<_> = probes.iter().flat_map(|r| r.stages.iter().cloned()).collect();
    let mut probe_summaries = summarize(&probes.iter().flat_map(RunResult::records).collect::<Vec<_>>());
    attach_cpu(&mut probe_summaries, &probe_reports);
    Ok(BenchReport { runs, probes, summaries, probe_summaries })
}
