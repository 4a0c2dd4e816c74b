//! A pipeline stage: take a message, compute, publish the result, record timings.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use adunit_core::config::Config;
use adunit_core::lane::TrajectoryMessage;
use adunit_core::{
    generate_pointcloud, generate_pointcloud_par, CameraInfoCache, Cloud, ColorImage, DepthImage, Frame,
    LanePipeline, ObstacleDetector, ObstacleGrid, Projection,
};
use adunit_transport::clock::{process_cpu_ns, thread_cpu_ns};
use adunit_transport::monotonic_ns;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::link::{InLink, OutLink, Rendezvous, TransportKind};
use crate::messages::{
    camera_message_size, cloud_message_size, grid_message_size, read_camera, write_trajectory, Envelope, Kind,
    ENVELOPE_BYTES, TRAJECTORY_MESSAGE_BYTES,
};

pub const CAMERA_TOPIC: &str = "camera";
pub const CLOUD_TOPIC: &str = "cloud";
pub const GRID_TOPIC: &str = "grid";
pub const TRAJECTORY_TOPIC: &str = "trajectory";
pub const PROBE_TOPIC: &str = "frames";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Pointcloud,
    Obstacle,
    Lane,
    /// Receives raw frames and only reads them; used for latency runs.
    Probe,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Pointcloud => "pointcloud",
            StageKind::Obstacle => "obstacle",
            StageKind::Lane => "lane",
            StageKind::Probe => "probe",
        }
    }

    pub fn input(self) -> &'static str {
        match self {
            StageKind::Pointcloud | StageKind::Lane => CAMERA_TOPIC,
            StageKind::Obstacle => CLOUD_TOPIC,
            StageKind::Probe => PROBE_TOPIC,
        }
    }

    pub fn output(self) -> Option<&'static str> {
        match self {
            StageKind::Pointcloud => Some(CLOUD_TOPIC),
            StageKind::Obstacle => Some(GRID_TOPIC),
            StageKind::Lane => Some(TRAJECTORY_TOPIC),
            StageKind::Probe => None,
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pointcloud" => Ok(StageKind::Pointcloud),
            "obstacle" => Ok(StageKind::Obstacle),
            "lane" => Ok(StageKind::Lane),
            "probe" => Ok(StageKind::Probe),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

/// Message size of every pipeline topic under `cfg`.
pub fn topic_message_size(topic: &str, cfg: &Config, probe_bytes: usize) -> usize {
    let (w, h) = (cfg.camera.width, cfg.camera.height);
    match topic {
        CAMERA_TOPIC => camera_message_size(w, h),
        CLOUD_TOPIC => cloud_message_size(w, h),
        GRID_TOPIC => grid_message_size(cfg.grid.rows, cfg.grid.cols),
        TRAJECTORY_TOPIC => TRAJECTORY_MESSAGE_BYTES,
        PROBE_TOPIC => probe_bytes,
        other => panic!("unknown topic {other}"),
    }
}

/// Timings of one message through one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub stage: StageKind,
    pub transport: TransportKind,
    pub seq: u64,
    pub t_publish_ns: u64,
    pub t_take_ns: u64,
    pub t_done_ns: u64,
}

impl BenchRecord {
    /// Processing time, `t_done - t_take`.
    pub fn turnaround_ms(&self) -> f64 {
        (self.t_done_ns - self.t_take_ns) as f64 / 1e6
    }

    /// Transport latency, `t_take - t_publish`.
    pub fn latency_ms(&self) -> f64 {
        (self.t_take_ns - self.t_publish_ns) as f64 / 1e6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CpuClock {
    Thread,
    Process,
}

impl CpuClock {
    fn now(self) -> u64 {
        match self {
            CpuClock::Thread => thread_cpu_ns(),
            CpuClock::Process => process_cpu_ns(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageArgs {
    pub kind: StageKind,
    pub rendezvous: Rendezvous,
    /// Config file; the pointcloud stage reads its calibration from here.
    pub config_path: PathBuf,
    /// Subscribers to wait for on the output topic before consuming input.
    pub downstream: usize,
    pub parallel: bool,
    pub probe_bytes: usize,
    pub cpu_clock: CpuClock,
}

/// Everything a stage reports back after end of stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageKind,
    pub transport: TransportKind,
    pub records: Vec<BenchRecord>,
    pub cpu_ns: u64,
    pub wall_ns: u64,
    /// Largest normal-equation residual over the fits this stage ran.
    pub max_fit_residual: Option<f64>,
}

enum Output {
    Cloud(Cloud),
    Grid(ObstacleGrid, bool),
    Trajectory(TrajectoryMessage),
    Nothing,
}

impl Output {
    fn encode(&self, out: &mut [u8]) -> usize {
        let body = &mut out[ENVELOPE_BYTES..];
        ENVELOPE_BYTES
            + match self {
                Output::Cloud(c) => c.encode_wire(body),
                Output::Grid(g, stop) => {
                    let n = g.encode_wire(body);
                    body[n] = u8::from(*stop);
                    n + 1
                }
                Output::Trajectory(t) => return write_trajectory(out, t),
                Output::Nothing => 0,
            }
    }
}

enum Processor {
    Pointcloud { projection: Projection, parallel: bool },
    Obstacle(ObstacleDetector),
    Lane { pipeline: LanePipeline, max_residual: f64 },
    Probe,
}

fn fail(stage: StageKind, e: impl fmt::Display) -> HarnessError {
    HarnessError::Stage { stage: stage.to_string(), reason: e.to_string() }
}

impl Processor {
    fn new(args: &StageArgs, cfg: &Config) -> Result<Self> {
        let kind = args.kind;
        Ok(match kind {
            StageKind::Pointcloud => {
                let projection = CameraInfoCache::new(&args.config_path).fetch().map_err(|e| fail(kind, e))?;
                Processor::Pointcloud { projection: projection.cast(), parallel: args.parallel }
            }
            StageKind::Obstacle => Processor::Obstacle(ObstacleDetector::from_config(cfg).map_err(|e| fail(kind, e))?),
            StageKind::Lane => {
                Processor::Lane { pipeline: LanePipeline::from_config(cfg).map_err(|e| fail(kind, e))?, max_residual: 0.0 }
            }
            StageKind::Probe => Processor::Probe,
        })
    }

    fn process(&mut self, kind: StageKind, msg: &[u8]) -> Result<Output> {
        match self {
            Processor::Pointcloud { projection, parallel } => {
                let view = read_camera(msg)?;
                let depth = DepthImage::from_millimeters(view.width, view.height, &view.depth_mm()).map_err(|e| fail(kind, e))?;
                let color = ColorImage::new(view.width, view.height, view.rgb.to_vec()).map_err(|e| fail(kind, e))?;
                let cloud = if *parallel {
                    generate_pointcloud_par(projection, &depth, &color)
                } else {
                    generate_pointcloud(projection, &depth, &color)
                };
                Ok(Output::Cloud(cloud.map_err(|e| fail(kind, e))?))
            }
            Processor::Obstacle(detector) => {
                let cloud = Cloud::decode_wire(&msg[ENVELOPE_BYTES..], Frame::Camera).map_err(|e| fail(kind, e))?;
                let (grid, stop) = detector.detect(&cloud).map_err(|e| fail(kind, e))?;
                Ok(Output::Grid(grid, stop))
            }
            Processor::Lane { pipeline, max_residual } => {
                let view = read_camera(msg)?;
                let color = ColorImage::new(view.width, view.height, view.rgb.to_vec()).map_err(|e| fail(kind, e))?;
                let msg = match pipeline.process(&color) {
                    Ok(outcome) => {
                        *max_residual = max_residual.max(outcome.lane_residual).max(outcome.trajectory_residual);
                        TrajectoryMessage::from_poly(&outcome.trajectory)
                    }
                    Err(e) => {
                        log::debug!("no lane in frame: {e}");
                        TrajectoryMessage::invalid()
                    }
                };
                Ok(Output::Trajectory(msg))
            }
            Processor::Probe => {
                // Touch every word so both transports pay for reading the payload.
                let sum = msg.chunks_exact(8).fold(0u64, |s, w| s.wrapping_add(u64::from_le_bytes(w.try_into().unwrap())));
                std::hint::black_box(sum);
                Ok(Output::Nothing)
            }
        }
    }

    fn max_residual(&self) -> Option<f64> {
        match self {
            Processor::Lane { max_residual, .. } => Some(*max_residual),
            _ => None,
        }
    }
}

/// Runs one stage until end of stream arrives on its input.
pub fn run_stage(args: &StageArgs) -> Result<StageReport> {
    let kind = args.kind;
    let rv = &args.rendezvous;
    let cfg = Config::load(&args.config_path)?;
    let mut processor = Processor::new(args, &cfg)?;
    let mut input = InLink::open(rv, kind.input(), topic_message_size(kind.input(), &cfg, args.probe_bytes))?;
    let mut output = match kind.output() {
        Some(topic) => Some(OutLink::open(rv, topic, topic_message_size(topic, &cfg, args.probe_bytes))?),
        None => None,
    };
    if let Some(out) = &output {
        out.wait_for_subscribers(args.downstream)?;
    }
    log::debug!("{kind} stage ready on {}", rv.transport);

    let (cpu0, wall0) = (args.cpu_clock.now(), monotonic_ns());
    let mut records = Vec::new();
    loop {
        if let Some(out) = &output {
            out.wait_ready()?;
        }
        let (env, t_take, result) = input.recv(|msg, t_take| -> Result<_> {
            let env = Envelope::read(msg)?;
            let result = match env.kind {
                Kind::Frame => Some(processor.process(kind, msg)?),
                Kind::EndOfStream => None,
            };
            Ok((env, t_take, result))
        })??;
        let Some(result) = result else {
            if let Some(out) = &mut output {
                out.send(|buf| {
                    Envelope::end_of_stream().write(buf);
                    ENVELOPE_BYTES
                })?;
            }
            break;
        };
        if let Some(out) = &mut output {
            out.send(|buf| {
                Envelope::frame(env.seq, env.t_origin_ns).write(buf);
                result.encode(buf)
            })?;
        }
        let t_done = monotonic_ns();
        records.push(BenchRecord {
            stage: kind,
            transport: rv.transport,
            seq: env.seq,
            t_publish_ns: env.t_publish_ns,
            t_take_ns: t_take,
            t_done_ns: t_done,
        });
    }
    Ok(StageReport {
        stage: kind,
        transport: rv.transport,
        records,
        cpu_ns: args.cpu_clock.now() - cpu0,
        wall_ns: monotonic_ns() - wall0,
        max_fit_residual: processor.max_residual(),
    })
}

/// Re-exec arguments for running `args` as `adunit stage ...`.
pub fn stage_command_args(args: &StageArgs, report: &std::path::Path) -> Vec<String> {
    let rv = &args.rendezvous;
    let mut v = vec![
        "stage".to_string(),
        "--kind".into(),
        args.kind.to_string(),
        "--transport".into(),
        rv.transport.to_string(),
        "--run-id".into(),
        rv.run_id.clone(),
        "--run-dir".into(),
        rv.run_dir.display().to_string(),
        "--config".into(),
        args.config_path.display().to_string(),
        "--downstream".into(),
        args.downstream.to_string(),
        "--probe-bytes".into(),
        args.probe_bytes.to_string(),
        "--timeout-ms".into(),
        rv.timeout.as_millis().to_string(),
        "--report".into(),
        report.display().to_string(),
    ];
    if args.parallel {
        v.push("--parallel".into());
    }
    v
}

/// Inverse of [`stage_command_args`], for the hidden `stage` subcommand.
#[allow(clippy::too_many_arguments)]
pub fn stage_args_from_cli(
    kind: StageKind,
    transport: TransportKind,
    run_id: String,
    run_dir: PathBuf,
    config_path: PathBuf,
    downstream: usize,
    probe_bytes: usize,
    timeout_ms: u64,
    parallel: bool,
) -> StageArgs {
    StageArgs {
        kind,
        rendezvous: Rendezvous { transport, run_id, run_dir, timeout: Duration::from_millis(timeout_ms) },
        config_path,
        downstream,
        parallel,
        probe_bytes,
        cpu_clock: CpuClock::Process,
    }
}
