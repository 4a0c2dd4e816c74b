//! Orchestration: topics, stage threads or processes, the paced camera
//! source and the sinks that collect perception outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use adunit_core::config::Config;
use adunit_transport::{monotonic_ns, Topic, TopicConfig};

use crate::error::{HarnessError, Result};
use crate::link::{InLink, OutLink, Rendezvous, TransportKind};
use crate::messages::{camera_regions, Envelope, Kind, ENVELOPE_BYTES};
use crate::scene::{Scene, SceneSpec};
use crate::stage::{
    run_stage, stage_command_args, topic_message_size, BenchRecord, CpuClock, StageArgs, StageKind, StageReport,
    CAMERA_TOPIC, CLOUD_TOPIC, GRID_TOPIC, PROBE_TOPIC, TRAJECTORY_TOPIC,
};

/// Which perception stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSet {
    pub pointcloud: bool,
    pub obstacle: bool,
    pub lane: bool,
}

impl StageSet {
    pub const ALL: StageSet = StageSet { pointcloud: true, obstacle: true, lane: true };

    pub fn kinds(&self) -> Vec<StageKind> {
        [(self.pointcloud, StageKind::Pointcloud), (self.obstacle, StageKind::Obstacle), (self.lane, StageKind::Lane)]
            .into_iter()
            .filter_map(|(on, k)| on.then_some(k))
            .collect()
    }

    /// Parses a comma-separated stage list such as `pointcloud,obstacle`.
    pub fn parse(list: &str) -> Result<Self, String> {
        let mut set = StageSet { pointcloud: false, obstacle: false, lane: false };
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name.parse::<StageKind>()? {
                StageKind::Pointcloud => set.pointcloud = true,
                StageKind::Obstacle => set.obstacle = true,
                StageKind::Lane => set.lane = true,
                StageKind::Probe => return Err("probe is not a pipeline stage".into()),
            }
        }
        Ok(set)
    }

    /// Enabled stages must hang off the camera: obstacle needs pointcloud.
    pub fn validate(&self) -> Result<()> {
        if self.kinds().is_empty() {
            return Err(HarnessError::InvalidPipeline("no stage enabled".into()));
        }
        if self.obstacle && !self.pointcloud {
            return Err(HarnessError::InvalidPipeline("obstacle stage needs the pointcloud stage".into()));
        }
        Ok(())
    }

    /// Topics read by the orchestrator's sinks; clouds are only collected
    /// when nothing downstream consumes them.
    fn leaves(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.pointcloud && !self.obstacle {
            v.push(CLOUD_TOPIC);
        }
        if self.obstacle {
            v.push(GRID_TOPIC);
        }
        if self.lane {
            v.push(TRAJECTORY_TOPIC);
        }
        v
    }

    fn consumers(&self, topic: &str) -> usize {
        match topic {
            CAMERA_TOPIC => usize::from(self.pointcloud) + usize::from(self.lane),
            CLOUD_TOPIC | GRID_TOPIC | TRAJECTORY_TOPIC => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub transport: TransportKind,
    pub stages: StageSet,
    /// One OS process per stage; threads otherwise.
    pub processes: bool,
    /// JSON config; built-in defaults when absent.
    pub config_path: Option<PathBuf>,
    pub parallel: bool,
    /// Binary that provides the `stage` subcommand; defaults to the current executable.
    pub exe: Option<PathBuf>,
    pub timeout: Duration,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            transport: TransportKind::Loaned,
            stages: StageSet::ALL,
            processes: true,
            config_path: None,
            parallel: false,
            exe: None,
            timeout: Duration::from_secs(30),
        }
    }
}

impl PipelineConfig {
    pub fn load_config(&self) -> Result<Config> {
        let cfg = match &self.config_path {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Outputs of one leaf topic, in delivery order.
pub type SinkOutputs = Vec<(u64, Vec<u8>)>;

#[derive(Debug, Clone)]
pub struct RunResult {
    pub transport: TransportKind,
    pub stages: Vec<StageReport>,
    /// Payloads (without envelope) per leaf topic. Clouds are stored as
    /// their 64-bit FNV-1a hash.
    pub outputs: BTreeMap<String, SinkOutputs>,
    pub frames_sent: u64,
    pub wall_ns: u64,
}

impl RunResult {
    pub fn records(&self) -> Vec<BenchRecord> {
        self.stages.iter().flat_map(|s| s.records.iter().copied()).collect()
    }

    pub fn stage(&self, kind: StageKind) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == kind)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

fn unique_run_id() -> String {
    static NEXT: AtomicU64 = AtomicU64::new(0);
    format!("{}-{}-{:x}", std::process::id(), NEXT.fetch_add(1, Ordering::Relaxed), monotonic_ns() & 0xff_ffff)
}

/// Shared state of one run. Owns the loaned topics so that they outlive
/// every stage and can be audited at the end.
struct Run {
    rv: Rendezvous,
    cfg: Config,
    config_path: PathBuf,
    topics: Vec<Topic>,
    probe_bytes: usize,
    _dir: tempfile::TempDir,
}

enum StageHandle {
    Thread(StageKind, JoinHandle<Result<StageReport>>),
    Process(StageKind, Child, PathBuf),
}

impl StageHandle {
    fn join(self) -> Result<StageReport> {
        match self {
            StageHandle::Thread(kind, h) => h.join().map_err(|_| HarnessError::Stage {
                stage: kind.to_string(),
                reason: "thread panicked".into(),
            })?,
            StageHandle::Process(kind, mut child, report) => {
                let status = child.wait()?;
                if !status.success() {
                    return Err(HarnessError::Stage { stage: kind.to_string(), reason: format!("exited with {status}") });
                }
                Ok(serde_json::from_str(&std::fs::read_to_string(report)?)?)
            }
        }
    }

    fn kill(&mut self) {
        if let StageHandle::Process(_, child, _) = self {
            let _ = child.kill();
        }
    }
}

impl Run {
    fn new(pc: &PipelineConfig, cfg: Config, probe_bytes: usize) -> Result<Self> {
        let dir = tempfile::Builder::new().prefix("adunit-run-").tempdir()?;
        let config_path = dir.path().join("config.json");
        std::fs::write(&config_path, cfg.to_json())?;
        let rv = Rendezvous {
            transport: pc.transport,
            run_id: unique_run_id(),
            run_dir: dir.path().to_path_buf(),
            timeout: pc.timeout,
        };
        Ok(Self { rv, cfg, config_path, topics: Vec::new(), probe_bytes, _dir: dir })
    }

    fn message_size(&self, topic: &str) -> usize {
        topic_message_size(topic, &self.cfg, self.probe_bytes)
    }

    /// Creates a loaned topic sized so that `subscribers` full queues plus
    /// their held chunks and the publisher's loans always fit.
    fn create_topic(&mut self, topic: &str, subscribers: usize) -> Result<()> {
        if self.rv.transport != TransportKind::Loaned {
            return Ok(());
        }
        let t = &self.cfg.transport;
        let pool = t.pool_capacity.max(adunit_transport::MAX_LOANS as usize + subscribers * (t.queue_depth + 1));
        let tc = TopicConfig::new(self.rv.topic_name(topic), self.message_size(topic))
            .with_queue_depth(t.queue_depth)
            .with_pool_capacity(pool);
        self.topics.push(Topic::create(&tc)?);
        Ok(())
    }

    fn stage_args(&self, kind: StageKind, downstream: usize, pc: &PipelineConfig) -> StageArgs {
        StageArgs {
            kind,
            rendezvous: self.rv.clone(),
            config_path: self.config_path.clone(),
            downstream,
            parallel: pc.parallel,
            probe_bytes: self.probe_bytes,
            cpu_clock: if pc.processes { CpuClock::Process } else { CpuClock::Thread },
        }
    }

    fn spawn(&self, args: StageArgs, pc: &PipelineConfig) -> Result<StageHandle> {
        let kind = args.kind;
        if !pc.processes {
            let h = std::thread::Builder::new().name(format!("stage-{kind}")).spawn(move || run_stage(&args))?;
            return Ok(StageHandle::Thread(kind, h));
        }
        let exe = match &pc.exe {
            Some(p) => p.clone(),
            None => std::env::current_exe()?,
        };
        let report = self.rv.run_dir.join(format!("{kind}.json"));
        let child = Command::new(&exe)
            .args(stage_command_args(&args, &report))
            .spawn()
            .map_err(|e| HarnessError::Spawn(format!("{}: {e}", exe.display())))?;
        Ok(StageHandle::Process(kind, child, report))
    }

    fn spawn_sink(&self, topic: &'static str) -> Result<JoinHandle<Result<SinkOutputs>>> {
        let mut link = InLink::open(&self.rv, topic, self.message_size(topic))?;
        let hash = topic == CLOUD_TOPIC;
        Ok(std::thread::Builder::new().name(format!("sink-{topic}")).spawn(move || {
            let mut out = Vec::new();
            loop {
                let item = link.recv(|msg, _| -> Result<_> {
                    let env = Envelope::read(msg)?;
                    let body = &msg[ENVELOPE_BYTES..];
                    let payload = if hash { fnv1a64(body).to_le_bytes().to_vec() } else { body.to_vec() };
                    Ok((env.kind == Kind::Frame).then_some((env.seq, payload)))
                })??;
                match item {
                    Some(x) => out.push(x),
                    None => return Ok(out),
                }
            }
        })?)
    }

    /// Publishes `frames` messages paced at `rate` per second against
    /// absolute deadlines, then end of stream.
    fn drive(
        mut out: OutLink,
        consumers: usize,
        frames: u64,
        rate: f64,
        mut fill: impl FnMut(u64, &mut [u8]) -> usize,
    ) -> Result<u64> {
        out.wait_for_subscribers(consumers)?;
        let period = Duration::from_secs_f64(1.0 / rate);
        let start = Instant::now();
        for seq in 1..=frames {
            let deadline = start + period.mul_f64((seq - 1) as f64);
            if let Some(wait) = deadline.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
            out.send(|buf| fill(seq, buf))?;
        }
        out.send(|buf| {
            Envelope::end_of_stream().write(buf);
            ENVELOPE_BYTES
        })?;
        Ok(start.elapsed().as_nanos() as u64)
    }

    /// Every chunk must be back in its pool once all parties have detached.
    fn audit(&self) -> Result<()> {
        for topic in &self.topics {
            let stats = topic.stats();
            if stats.free_chunks != stats.pool_capacity {
                return Err(HarnessError::Stage {
                    stage: "orchestrator".into(),
                    reason: format!("{}: {} of {} chunks free", topic.name(), stats.free_chunks, stats.pool_capacity),
                });
            }
            topic.audit().map_err(|reason| HarnessError::Stage { stage: "orchestrator".into(), reason })?;
        }
        Ok(())
    }
}

fn finish(
    run: &Run,
    driven: Result<u64>,
    mut handles: Vec<StageHandle>,
    sinks: Vec<(&'static str, JoinHandle<Result<SinkOutputs>>)>,
    frames: u64,
) -> Result<RunResult> {
    let wall_ns = match driven {
        Ok(ns) => ns,
        Err(e) => {
            handles.iter_mut().for_each(StageHandle::kill);
            return Err(e);
        }
    };
    let mut stages = Vec::new();
    let mut first_err = None;
    for h in handles {
        match h.join() {
            Ok(r) => stages.push(r),
            Err(e) => first_err = first_err.or(Some(e)),
        }
    }
    let mut outputs = BTreeMap::new();
    for (topic, h) in sinks {
        match h.join().map_err(|_| HarnessError::Stage { stage: "sink".into(), reason: "panicked".into() })? {
            Ok(o) => {
                outputs.insert(topic.to_string(), o);
            }
            Err(e) => first_err = first_err.or(Some(e)),
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    run.audit()?;
    stages.sort_by_key(|s| s.stage);
    Ok(RunResult { transport: run.rv.transport, stages, outputs, frames_sent: frames, wall_ns })
}

/// Runs the enabled stages over `spec.frames` synthetic frames and returns
/// every stage's records and the collected outputs.
pub fn run_pipeline(pc: &PipelineConfig, spec: &SceneSpec) -> Result<RunResult> {
    pc.stages.validate()?;
    let cfg = pc.load_config()?;
    let scene = Scene::new(spec.clone(), &cfg)?;
    let mut run = Run::new(pc, cfg, 0)?;
    let set = pc.stages;
    for topic in [CAMERA_TOPIC, CLOUD_TOPIC, GRID_TOPIC, TRAJECTORY_TOPIC] {
        let used = match topic {
            CAMERA_TOPIC => true,
            CLOUD_TOPIC => set.pointcloud,
            GRID_TOPIC => set.obstacle,
            _ => set.lane,
        };
        if used {
            run.create_topic(topic, set.consumers(topic))?;
        }
    }

    // The source address must exist before stages look for it.
    let source = OutLink::open(&run.rv, CAMERA_TOPIC, run.message_size(CAMERA_TOPIC))?;
    let mut handles = Vec::new();
    for kind in set.kinds() {
        let downstream = kind.output().map_or(0, |t| set.consumers(t));
        match run.spawn(run.stage_args(kind, downstream, pc), pc) {
            Ok(h) => handles.push(h),
            Err(e) => {
                handles.iter_mut().for_each(StageHandle::kill);
                return Err(e);
            }
        }
    }
    let sinks: Result<Vec<_>> = set.leaves().into_iter().map(|t| Ok((t, run.spawn_sink(t)?))).collect();
    let sinks = match sinks {
        Ok(s) => s,
        Err(e) => {
            handles.iter_mut().for_each(StageHandle::kill);
            return Err(e);
        }
    };

    let (w, h) = (spec.width, spec.height);
    let frames = spec.frames as u64;
    let driven = Run::drive(source, set.consumers(CAMERA_TOPIC), frames, spec.fps_cap, |seq, buf| {
        Envelope::frame(seq, monotonic_ns()).write(buf);
        let (depth, rgb) = camera_regions(buf, w, h);
        scene.write_depth_le(seq, depth);
        rgb.copy_from_slice(scene.color().data());
        crate::messages::camera_message_size(w, h)
    });
    finish(&run, driven, handles, sinks, frames)
}

/// Sends `messages` payloads of `bytes` bytes at `rate` per second to a
/// stage that only reads them, for transport latency measurements.
pub fn run_probe(pc: &PipelineConfig, messages: u64, bytes: usize, rate: f64) -> Result<RunResult> {
    if bytes < ENVELOPE_BYTES {
        return Err(HarnessError::InvalidPipeline(format!("probe payload {bytes} B is smaller than the envelope")));
    }
    let cfg = pc.load_config()?;
    let mut run = Run::new(pc, cfg, bytes)?;
    run.create_topic(PROBE_TOPIC, 1)?;
    let source = OutLink::open(&run.rv, PROBE_TOPIC, bytes)?;
    let handles = vec![run.spawn(run.stage_args(StageKind::Probe, 0, pc), pc)?];
    let driven = Run::drive(source, 1, messages, rate, |seq, buf| {
        buf[ENVELOPE_BYTES..bytes].fill(seq as u8);
        Envelope::frame(seq, monotonic_ns()).write(buf);
        bytes
    });
    finish(&run, driven, handles, Vec::new(), messages)
}

/// Writes records as CSV with the columns
/// `stage,transport,seq,t_publish_ns,t_take_ns,t_done_ns,turnaround_ms,latency_ms`.
pub fn write_csv(path: &Path, records: &[BenchRecord]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "stage,transport,seq,t_publish_ns,t_take_ns,t_done_ns,turnaround_ms,latency_ms")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{:.6},{:.6}",
            r.stage,
            r.transport,
            r.seq,
            r.t_publish_ns,
            r.t_take_ns,
            r.t_done_ns,
            r.turnaround_ms(),
            r.latency_ms()
        )?;
    }
    f.flush()
}
