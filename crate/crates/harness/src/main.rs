use std::path::{Path, PathBuf};
use std::time::Duration;

use adunit_core::config::Config;
use adunit_harness::bench::{run_bench, BenchOptions};
use adunit_harness::check::run_checks;
use adunit_harness::report::{attach_cpu, format_table, summarize};
use adunit_harness::stage::{run_stage, stage_args_from_cli, StageKind};
use adunit_harness::{generate_scene, run_pipeline, write_csv, PipelineConfig, SceneSpec, StageSet, TransportKind};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adunit", version, about = "Perception pipeline over zero-copy or copying transport")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file (built-in defaults otherwise)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of camera frames
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
    frames: u64,
    /// Source frame rate cap per second
    #[arg(long, default_value_t = 30.0)]
    fps_cap: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Exec {
    /// Run every stage in its own OS process (default)
    #[arg(long, conflicts_with = "threads")]
    processes: bool,
    /// Run stages as threads of this process
    #[arg(long)]
    threads: bool,
    /// Comma-separated stages to enable
    #[arg(long, default_value = "pointcloud,obstacle,lane")]
    stages: String,
    /// Use data-parallel kernels inside stages
    #[arg(long)]
    parallel: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render synthetic frames to PGM/PPM files
    GenScene {
        #[command(flatten)]
        common: Common,
    },
    /// Run the pipeline once and write per-frame records as CSV
    Run {
        #[arg(long, default_value = "loaned")]
        transport: TransportKind,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        exec: Exec,
    },
    /// Compare loaned and copy transports
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        exec: Exec,
        /// Messages sent by the latency probe (0 skips it)
        #[arg(long, default_value_t = 1000)]
        probe_messages: u64,
    },
    /// Run the quick invariant checks
    Check,
    #[command(hide = true)]
    Stage {
        #[arg(long)]
        kind: StageKind,
        #[arg(long)]
        transport: TransportKind,
        #[arg(long)]
        run_id: String,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        downstream: usize,
        #[arg(long, default_value_t = 0)]
        probe_bytes: usize,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        parallel: bool,
    },
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<Config> {
    let cfg = match path {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Config::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn scene_spec(c: &Common) -> SceneSpec {
    SceneSpec { frames: c.frames as usize, fps_cap: c.fps_cap, seed: c.seed, ..Default::default() }
}

fn pipeline_config(transport: TransportKind, c: &Common, e: &Exec) -> anyhow::Result<PipelineConfig> {
    let stages = StageSet::parse(&e.stages).map_err(anyhow::Error::msg)?;
    stages.validate()?;
    Ok(PipelineConfig {
        transport,
        stages,
        processes: !e.threads,
        config_path: c.config.clone(),
        parallel: e.parallel,
        exe: None,
        timeout: Duration::from_secs(30),
    })
}

fn out_dir(c: &Common) -> anyhow::Result<Option<&Path>> {
    if let Some(dir) = &c.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(c.out.as_deref())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Cmd::GenScene { common } => {
            let cfg = load_config(&common.config)?;
            let dir = out_dir(&common)?.context("--out is required")?;
            let frames = generate_scene(scene_spec(&common), &cfg)?;
            for (i, (depth, color)) in frames.iter().enumerate() {
                depth.write_pgm(dir.join(format!("frame_{:04}_depth.pgm", i + 1)))?;
                color.write_ppm(dir.join(format!("frame_{:04}_color.ppm", i + 1)))?;
            }
            println!("wrote {} frames to {}", frames.len(), dir.display());
        }
        Cmd::Run { transport, common, exec } => {
            let pc = pipeline_config(transport, &common, &exec)?;
            let result = run_pipeline(&pc, &scene_spec(&common))?;
            let records = result.records();
            let mut summaries = summarize(&records);
            attach_cpu(&mut summaries, &result.stages);
            let table = format_table(&summaries);
            print!("{table}");
            if let Some(dir) = out_dir(&common)? {
                write_csv(&dir.join("records.csv"), &records)?;
                std::fs::write(dir.join("report.txt"), &table)?;
            }
        }
        Cmd::Bench { common, exec, probe_messages } => {
            let pc = pipeline_config(TransportKind::Loaned, &common, &exec)?;
            let opts = BenchOptions {
                frames: common.frames as usize,
                fps_cap: common.fps_cap,
                seed: common.seed,
                stages: pc.stages,
                processes: pc.processes,
                parallel: pc.parallel,
                config_path: pc.config_path,
                probe_messages,
                ..Default::default()
            };
            let report = run_bench(&opts)?;
            let text = report.text();
            print!("{text}");
            if let Some(dir) = out_dir(&common)? {
                write_csv(&dir.join("records.csv"), &report.records())?;
                std::fs::write(dir.join("bench.txt"), &text)?;
            }
        }
        Cmd::Check => {
            let outcomes = run_checks();
            for o in &outcomes {
                let mark = if o.passed { "PASS" } else { "FAIL" };
                println!("{mark}  {:<24} {:>7.2}s  {}", o.name, o.elapsed.as_secs_f64(), o.detail);
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            if failed > 0 {
                bail!("{failed} check(s) failed");
            }
        }
        Cmd::Stage { kind, transport, run_id, run_dir, config, downstream, probe_bytes, timeout_ms, report, parallel } => {
            let args =
                stage_args_from_cli(kind, transport, run_id, run_dir, config, downstream, probe_bytes, timeout_ms, parallel);
            let result = run_stage(&args).with_context(|| format!("{kind} stage"))?;
            let tmp = report.with_extension("tmp");
            std::fs::write(&tmp, serde_json::to_string(&result)?)?;
            std::fs::rename(tmp, &report)?;
        }
    }
    Ok(())
}
