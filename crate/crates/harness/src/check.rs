//! Quick invariant checks behind `adunit check`.

use std::time::{Duration, Instant};

use adunit_core::config::Config;
use adunit_core::lane::LaneColor;
use adunit_core::{generate_pointcloud, Cloud, LanePipeline, ObstacleDetector, Projection};
use adunit_transport::{Topic, TopicConfig, TransportError, MAX_LOANS, MAX_SUBSCRIBERS};

use crate::error::Result;
use crate::link::TransportKind;
use crate::pipeline::{run_pipeline, PipelineConfig, StageSet};
use crate::scene::{lane_scenes, Scene, SceneSpec};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

/// Result of fitting the lane in one rendered scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneTrial {
    pub expected: LaneColor,
    pub selected: Option<LaneColor>,
    /// RMS distance between fitted and generating centerline over all rows.
    pub rms_px: f64,
}

pub fn lane_trial(spec: &SceneSpec, cfg: &Config) -> Result<LaneTrial> {
    let scene = Scene::new(spec.clone(), cfg)?;
    let truth = spec.lanes[0];
    let pipeline = LanePipeline::from_config(cfg).map_err(|e| crate::HarnessError::Stage {
        stage: "lane".into(),
        reason: e.to_string(),
    })?;
    Ok(match pipeline.process(scene.color()) {
        Ok(o) => {
            let sq: f64 = (0..spec.height).map(|r| (o.lane.eval(r as f64) - truth.center(r as f64)).powi(2)).sum();
            LaneTrial { expected: truth.color, selected: Some(o.color), rms_px: (sq / spec.height as f64).sqrt() }
        }
        Err(_) => LaneTrial { expected: truth.color, selected: None, rms_px: f64::INFINITY },
    })
}

fn transport_limits() -> Result<String, String> {
    let name = format!("check-limits.{}", std::process::id());
    let topic = Topic::create(&TopicConfig::new(name, 64)).map_err(|e| e.to_string())?;
    let mut publisher = topic.publisher().map_err(|e| e.to_string())?;
    let loans: Vec<_> = (0..MAX_LOANS).map(|_| publisher.borrow()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    if !matches!(publisher.borrow(), Err(TransportError::LoansExhausted(_))) {
        return Err("borrow beyond the loan limit succeeded".into());
    }
    for h in loans {
        publisher.discard(h).map_err(|e| e.to_string())?;
    }
    let subs: Vec<_> = (0..MAX_SUBSCRIBERS).map(|_| topic.subscribe()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    if !matches!(topic.subscribe(), Err(TransportError::TooManySubscribers(_))) {
        return Err("subscription beyond the limit succeeded".into());
    }
    Ok(format!("{MAX_LOANS} loans and {} subscribers accepted, one more of each refused", subs.len()))
}

fn zero_copy_identity() -> Result<String, String> {
    const BYTES: usize = 1_228_800;
    let name = format!("check-identity.{}", std::process::id());
    let topic = Topic::create(&TopicConfig::new(name, BYTES)).map_err(|e| e.to_string())?;
    let mut publisher = topic.publisher().map_err(|e| e.to_string())?;
    let mut sub = topic.subscribe().map_err(|e| e.to_string())?;
    for i in 0..100u32 {
        let h = publisher.borrow().map_err(|e| e.to_string())?;
        let buf = publisher.payload_mut(&h).map_err(|e| e.to_string())?;
        buf.fill(i as u8);
        let ptr = buf.as_ptr();
        let offset = publisher.segment_offset(ptr).ok_or("payload outside segment")?;
        publisher.publish_loaned(h, BYTES).map_err(|e| e.to_string())?;
        let got = sub.take_loaned(true, Duration::from_secs(1)).ok_or("message not delivered")?;
        let bytes = sub.payload(&got).map_err(|e| e.to_string())?;
        if sub.segment_offset(bytes.as_ptr()) != Some(offset) || bytes.iter().any(|&b| b != i as u8) {
            return Err(format!("frame {i} was not delivered in place"));
        }
        sub.return_loaned(got).map_err(|e| e.to_string())?;
    }
    let stats = topic.stats();
    if stats.free_chunks != stats.pool_capacity {
        return Err(format!("{} of {} chunks free", stats.free_chunks, stats.pool_capacity));
    }
    Ok("100 frames read in place, pool full afterwards".into())
}

fn size_laws() -> Result<String, String> {
    let cfg = Config::default();
    let scene = Scene::new(SceneSpec { frames: 1, ..Default::default() }, &cfg).map_err(|e| e.to_string())?;
    let (depth, color) = scene.frame(1);
    let p = Projection::from_camera(&cfg.camera).map_err(|e| e.to_string())?;
    let cloud: Cloud = generate_pointcloud(&p, &depth, &color).map_err(|e| e.to_string())?;
    let (grid, _) = ObstacleDetector::from_config(&cfg).and_then(|d| d.detect(&cloud)).map_err(|e| e.to_string())?;
    match (cloud.serialized_len(), grid.payload().len()) {
        (4_915_200, 234) => Ok("cloud 4915200 B, grid 234 B".into()),
        (c, g) => Err(format!("cloud {c} B, grid {g} B")),
    }
}

fn lane_round_trip() -> Result<String, String> {
    let cfg = Config::default();
    let mut worst: f64 = 0.0;
    for (i, (_, spec)) in lane_scenes(12, 7).iter().enumerate() {
        let t = lane_trial(spec, &cfg).map_err(|e| e.to_string())?;
        if t.selected != Some(t.expected) || t.rms_px > 5.0 {
            return Err(format!("scene {i}: {t:?}"));
        }
        worst = worst.max(t.rms_px);
    }
    Ok(format!("12 scenes, worst RMS {worst:.2} px"))
}

fn transport_independence() -> Result<String, String> {
    let spec = SceneSpec { frames: 12, fps_cap: 60.0, ..Default::default() };
    let run = |transport| {
        let pc = PipelineConfig { transport, processes: false, stages: StageSet::ALL, ..Default::default() };
        run_pipeline(&pc, &spec).map_err(|e| e.to_string())
    };
    let (a, b) = (run(TransportKind::Loaned)?, run(TransportKind::Copy)?);
    if a.outputs != b.outputs {
        return Err("outputs differ between transports".into());
    }
    let n: usize = a.outputs.values().map(Vec::len).sum();
    Ok(format!("{n} outputs identical on both transports"))
}

type Check = fn() -> Result<String, String>;

pub fn run_checks() -> Vec<CheckOutcome> {
    let checks: [(&'static str, Check); 5] = [
        ("transport limits", transport_limits),
        ("zero-copy identity", zero_copy_identity),
        ("size laws", size_laws),
        ("lane round trip", lane_round_trip),
        ("transport independence", transport_independence),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome { name, passed, detail, elapsed: start.elapsed() }
        })
        .collect()
}
