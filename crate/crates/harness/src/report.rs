//! Per-stage statistics and the text table.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::link::TransportKind;
use crate::stage::{BenchRecord, StageKind, StageReport};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let (mut n, mut sum, mut min, mut max) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            n += 1;
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        (n > 0).then(|| Stats { min, mean: sum / n as f64, max })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: StageKind,
    pub transport: TransportKind,
    pub frames: usize,
    /// Delivered frame rate, see [`delivered_fps`].
    pub fps: f64,
    pub turnaround_ms: Stats,
    pub latency_ms: Stats,
    /// Stage CPU time over its wall time, in percent of one core.
    pub cpu_percent: Option<f64>,
}

/// Delivered frames per second: the inverse of the least-squares slope of
/// take time against delivery index, so a slow first frame does not skew
/// the rate. Zero for fewer than two frames.
pub fn delivered_fps(records: &[BenchRecord]) -> f64 {
    if records.len() < 2 {
        return 0.0;
    }
    let mut takes: Vec<u64> = records.iter().map(|r| r.t_take_ns).collect();
    takes.sort_unstable();
    let n = takes.len() as f64;
    let x_mean = (n - 1.0) / 2.0;
    let t0 = takes[0];
    let y_mean = takes.iter().map(|&t| (t - t0) as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &t) in takes.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * ((t - t0) as f64 - y_mean);
        sxx += dx * dx;
    }
    if sxy <= 0.0 {
        return 0.0;
    }
    1e9 * sxx / sxy
}

/// One summary per (stage, transport) pair present in `records`.
pub fn summarize(records: &[BenchRecord]) -> Vec<StageSummary> {
    let mut groups: BTreeMap<(StageKind, TransportKind), Vec<BenchRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.stage, r.transport)).or_default().push(*r);
    }
    groups
        .into_iter()
        .map(|((stage, transport), rs)| StageSummary {
            stage,
            transport,
            frames: rs.len(),
            fps: delivered_fps(&rs),
            turnaround_ms: Stats::of(rs.iter().map(BenchRecord::turnaround_ms)).expect("non-empty group"),
            latency_ms: Stats::of(rs.iter().map(BenchRecord::latency_ms)).expect("non-empty group"),
            cpu_percent: None,
        })
        .collect()
}

/// Fills in CPU load from the stage reports.
pub fn attach_cpu(summaries: &mut [StageSummary], reports: &[StageReport]) {
    for s in summaries {
        if let Some(r) = reports.iter().find(|r| r.stage == s.stage && r.transport == s.transport) {
            if r.wall_ns > 0 {
                s.cpu_percent = Some(100.0 * r.cpu_ns as f64 / r.wall_ns as f64);
            }
        }
    }
}

fn range(s: &Stats) -> String {
    format!("{:.3} [{:.3}-{:.3}]", s.mean, s.min, s.max)
}

/// Aligned table with one row per component and transport.
pub fn format_table(summaries: &[StageSummary]) -> String {
    let header = ["Component", "Transport", "Frames", "CPU %", "FPS", "Turnaround ms", "Latency ms"];
    let rows: Vec<[String; 7]> = summaries
        .iter()
        .map(|s| {
            [
                s.stage.to_string(),
                s.transport.to_string(),
                s.frames.to_string(),
                s.cpu_percent.map_or("-".into(), |c| format!("{c:.1}")),
                format!("{:.1}", s.fps),
                range(&s.turnaround_ms),
                range(&s.latency_ms),
            ]
        })
        .collect();
    let widths: Vec<usize> =
        (0..header.len()).map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap()).collect();
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let text: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", text.join("  ").trim_end());
    };
    line(header.to_vec());
    line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for r in &rows {
        line(r.iter().map(String::as_str).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(stage: StageKind, seq: u64, publish: u64, take: u64, done: u64) -> BenchRecord {
        BenchRecord {
            stage,
            transport: TransportKind::Loaned,
            seq,
            t_publish_ns: publish,
            t_take_ns: take,
            t_done_ns: done,
        }
    }

    #[test]
    fn thirty_frames_per_second() {
        let period = 1_000_000_000 / 30;
        let rs: Vec<_> = (0..31).map(|i| rec(StageKind::Lane, i + 1, i * period, i * period, i * period + 1)).collect();
        // 31 takes span exactly one second: 30 intervals.
        let fps = delivered_fps(&rs);
        assert!((fps - 30.0).abs() < 1e-3, "{fps}");
        assert_eq!(delivered_fps(&rs[..1]), 0.0);
        // A late first frame barely moves the estimate over a 10 s run.
        let mut late: Vec<_> =
            (0..300).map(|i| rec(StageKind::Lane, i + 1, i * period, i * period, i * period + 1)).collect();
        late[0].t_take_ns += 15_000_000;
        assert!((delivered_fps(&late) - 30.0).abs() < 0.05);
    }

    #[test]
    fn hand_arithmetic() {
        let rs = [
            rec(StageKind::Obstacle, 1, 0, 1_000_000, 3_000_000),
            rec(StageKind::Obstacle, 2, 10_000_000, 13_000_000, 17_000_000),
            rec(StageKind::Lane, 1, 0, 500_000, 1_500_000),
        ];
        let s = summarize(&rs);
        assert_eq!(s.len(), 2);
        let obstacle = &s[0];
        assert_eq!((obstacle.stage, obstacle.frames), (StageKind::Obstacle, 2));
        assert_eq!(obstacle.turnaround_ms, Stats { min: 2.0, mean: 3.0, max: 4.0 });
        assert_eq!(obstacle.latency_ms, Stats { min: 1.0, mean: 2.0, max: 3.0 });
        assert!((obstacle.fps - 1.0 / 0.012).abs() < 1e-6);
        assert_eq!(s[1].turnaround_ms.mean, 1.0);
    }

    #[test]
    fn cpu_and_table() {
        let mut s = summarize(&[rec(StageKind::Pointcloud, 1, 0, 1, 2)]);
        let report = StageReport {
            stage: StageKind::Pointcloud,
            transport: TransportKind::Loaned,
            records: vec![],
            cpu_ns: 250,
            wall_ns: 1000,
            max_fit_residual: None,
        };
        attach_cpu(&mut s, &[report]);
        assert_eq!(s[0].cpu_percent, Some(25.0));
        let table = format_table(&s);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("Component"));
        assert!(lines[2].starts_with("pointcloud") && lines[2].contains("loaned") && lines[2].contains("25.0"));
    }
}
