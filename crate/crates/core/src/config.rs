//! The single JSON configuration file: calibration, obstacle geometry, lane
//! parameters and transport sizing. Every section has defaults matching
//! `config/adunit.json` at the repository root.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub camera: CameraConfig,
    pub camera_to_base: TransformConfig,
    pub obstacle_box: BoxConfig,
    pub grid: GridConfig,
    pub obstacle_check: ObstacleCheckConfig,
    pub lane: LaneConfig,
    pub transport: TransportConfig,
}

/// Pinhole calibration of the synthetic 640x480 depth camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub tx: f64,
    #[serde(default)]
    pub ty: f64,
}

fn default_width() -> usize {
    640
}

fn default_height() -> usize {
    480
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { width: 640, height: 480, fx: 554.3, fy: 554.3, cx: 320.0, cy: 240.0, tx: 0.0, ty: 0.0 }
    }
}

/// Camera-to-base rigid transform. Camera axes are x right, y down, z forward;
/// base axes are x forward, y left, z up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformConfig {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            rotation: [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]],
            translation: [0.0, 0.0, 0.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for BoxConfig {
    fn default() -> Self {
        Self { x_min: 0.0, x_max: 3.25, y_min: -2.25, y_max: 2.25, z_min: 0.05, z_max: 0.5 }
    }
}

/// 13 forward rows by 18 lateral columns: a 234 byte grid of 0.25 m cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { rows: 13, cols: 18 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleCheckConfig {
    /// Half-open column range covered by the car's footprint.
    pub footprint_cols: [usize; 2],
    pub min_count: u8,
}

impl Default for ObstacleCheckConfig {
    fn default() -> Self {
        Self { footprint_cols: [7, 11], min_count: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhiteThresholdConfig {
    pub s_max: u8,
    pub v_min: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YellowThresholdConfig {
    pub h_min: u8,
    pub h_max: u8,
    pub s_min: u8,
    pub v_min: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    pub white: WhiteThresholdConfig,
    pub yellow: YellowThresholdConfig,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            white: WhiteThresholdConfig { s_max: 60, v_min: 200 },
            yellow: YellowThresholdConfig { h_min: 20, h_max: 35, s_min: 80, v_min: 80 },
        }
    }
}

/// How bird's-eye image coordinates map to the base frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxesConfig {
    /// Forward distance grows toward the top of the image (row 0).
    pub forward_from_bottom: bool,
    /// Lateral offset is positive to the left of the image center.
    pub lateral_positive_left: bool,
}

impl Default for AxesConfig {
    fn default() -> Self {
        Self { forward_from_bottom: true, lateral_positive_left: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneConfig {
    /// Camera pixel (col, row, 1) to bird's-eye pixel.
    pub homography: [[f64; 3]; 3],
    pub thresholds: ThresholdConfig,
    /// Lateral pixel coordinate of the image middle.
    pub shift: f64,
    /// Meters per bird's-eye pixel.
    pub scale: f64,
    pub axes: AxesConfig,
    /// Height used for trajectory sampling, `x_i = i * image_height / 30`.
    pub image_height: usize,
}

impl Default for LaneConfig {
    fn default() -> Self {
        // Maps the road trapezoid (250,280) (390,280) (640,480) (0,480) onto the
        // full 640x480 bird's-eye frame.
        Self {
            homography: [
                [-8.0 / 7.0, -10.0 / 7.0, 4800.0 / 7.0],
                [0.0, -96.0 / 35.0, 768.0],
                [0.0, -1.0 / 224.0, 1.0],
            ],
            thresholds: ThresholdConfig::default(),
            shift: 320.0,
            scale: 0.005,
            axes: AxesConfig::default(),
            image_height: 480,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportConfig {
    pub queue_depth: usize,
    pub pool_capacity: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self { queue_depth: 8, pool_capacity: 24 }
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let c = &self.camera;
        if !(c.fx > 0.0 && c.fy > 0.0) {
            return bad(format!("focal lengths must be positive, got fx={} fy={}", c.fx, c.fy));
        }
        if c.width == 0 || c.height == 0 {
            return bad("camera size must be non-zero".into());
        }
        let b = &self.obstacle_box;
        if !(b.x_min < b.x_max && b.y_min < b.y_max && b.z_min < b.z_max) {
            return bad("obstacle box needs min < max on every axis".into());
        }
        if self.grid.rows == 0 || self.grid.cols == 0 || self.grid.rows > u16::MAX as usize || self.grid.cols > u16::MAX as usize {
            return bad(format!("grid {}x{} out of range", self.grid.rows, self.grid.cols));
        }
        let [lo, hi] = self.obstacle_check.footprint_cols;
        if lo >= hi || hi > self.grid.cols {
            return bad(format!("footprint columns [{lo}, {hi}) outside grid of {} columns", self.grid.cols));
        }
        let y = &self.lane.thresholds.yellow;
        if y.h_min > y.h_max || y.h_max >= 180 {
            return bad("yellow hue range must satisfy h_min <= h_max < 180".into());
        }
        if !(self.lane.scale > 0.0) || self.lane.image_height == 0 {
            return bad("lane scale and image height must be positive".into());
        }
        if self.transport.queue_depth == 0 || self.transport.pool_capacity < 8 + self.transport.queue_depth {
            return bad("transport pool must hold 8 loans plus one full queue".into());
        }
        Ok(())
    }
}
