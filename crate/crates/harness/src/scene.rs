//! Synthetic camera frames: flat-shaded boxes in front of a far background
//! and constant-width lane curves painted in bird's-eye coordinates.

use adunit_core::config::Config;
use adunit_core::lane::{Homography, LaneColor};
use adunit_core::{ColorImage, DepthImage, RigidTransform};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ASPHALT: [u8; 3] = [90, 90, 90];
pub const WHITE_PAINT: [u8; 3] = [255, 255, 255];
pub const YELLOW_PAINT: [u8; 3] = [230, 200, 40];
pub const BOX_PAINT: [u8; 3] = [140, 40, 40];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
}

/// Axis-aligned box in the base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl BoxSpec {
    /// Cube of edge `edge` resting on the ground with its front face `distance` ahead.
    pub fn cube_ahead(distance: f64, lateral: f64, edge: f64) -> Self {
        Self { center: [distance + edge / 2.0, lateral, edge / 2.0], size: [edge; 3] }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let lo = std::array::from_fn(|i| self.center[i] - self.size[i] / 2.0);
        let hi = std::array::from_fn(|i| self.center[i] + self.size[i] / 2.0);
        (lo, hi)
    }
}

/// Lane marking whose centerline is `col = c0 + c1 row + c2 row^2` in bird's-eye pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneSpec {
    pub coeffs: [f64; 3],
    pub color: LaneColor,
    pub width_px: f64,
}

impl LaneSpec {
    #[inline]
    pub fn center(&self, row: f64) -> f64 {
        self.coeffs[0] + row * (self.coeffs[1] + row * self.coeffs[2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BoxSpec>,
    /// Painted in order, later lanes over earlier ones.
    pub lanes: Vec<LaneSpec>,
    pub frames: usize,
    pub fps_cap: f64,
    pub seed: u64,
    pub background_m: f64,
    /// Uniform per-pixel depth jitter, in millimeters either side.
    pub depth_noise_mm: u16,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            boxes: vec![BoxSpec::cube_ahead(2.0, 0.0, 0.5)],
            lanes: vec![LaneSpec { coeffs: [300.0, 0.1, -1e-4], color: LaneColor::White, width_px: 14.0 }],
            frames: 300,
            fps_cap: 30.0,
            seed: 1,
            background_m: 10.0,
            depth_noise_mm: 2,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self, cfg: &Config) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidSpec(m));
        if !(self.fps_cap.is_finite() && self.fps_cap > 0.0) {
            return bad(format!("frame rate cap {} must be positive", self.fps_cap));
        }
        if (self.width, self.height) != (cfg.camera.width, cfg.camera.height) {
            return bad(format!(
                "image {}x{} does not match calibration {}x{}",
                self.width, self.height, cfg.camera.width, cfg.camera.height
            ));
        }
        if !(self.background_m > 0.0 && self.background_m * 1000.0 < f64::from(u16::MAX)) {
            return bad(format!("background depth {} m out of range", self.background_m));
        }
        if self.boxes.iter().any(|b| b.size.iter().any(|&s| !(s > 0.0))) {
            return bad("box sizes must be positive".into());
        }
        if self.lanes.iter().any(|l| !(l.width_px > 0.0) || l.coeffs.iter().any(|c| !c.is_finite())) {
            return bad("lane width must be positive and coefficients finite".into());
        }
        Ok(())
    }
}

/// Pre-rendered scene; frames differ only by seeded depth noise.
#[derive(Debug, Clone)]
pub struct Scene {
    spec: SceneSpec,
    depth_mm: Vec<u16>,
    color: ColorImage,
}

fn paint(color: LaneColor) -> [u8; 3] {
    match color {
        LaneColor::White => WHITE_PAINT,
        LaneColor::Yellow => YELLOW_PAINT,
    }
}

/// Nearest forward hit of the ray `o + w d` with an axis-aligned box.
fn hit(o: [f64; 3], d: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<f64> {
    let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..3 {
        if d[i] == 0.0 {
            if o[i] < lo[i] || o[i] > hi[i] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[i] - o[i]) / d[i], (hi[i] - o[i]) / d[i]);
        near = near.max(a.min(b));
        far = far.min(a.max(b));
    }
    (near <= far && near > 0.0).then_some(near)
}

impl Scene {
    pub fn new(spec: SceneSpec, cfg: &Config) -> Result<Self, SceneError> {
        spec.validate(cfg)?;
        let cam = &cfg.camera;
        let xf = RigidTransform::<f64>::from_config(&cfg.camera_to_base)
            .map_err(|e| SceneError::InvalidSpec(e.to_string()))?;
        let h = Homography::<f64>::from_config(&cfg.lane).map_err(|e| SceneError::InvalidSpec(e.to_string()))?;
        let (w, ht) = (spec.width, spec.height);
        let origin = xf.apply([-cam.tx / cam.fx, -cam.ty / cam.fy, 0.0]);
        let r = xf.rotation();
        let boxes: Vec<_> = spec.boxes.iter().map(BoxSpec::bounds).collect();
        // Points on the lane side of the homography's vanishing line share its sign.
        let m = h.matrix();
        let w_sign = |x: f64, y: f64| (m[2][0] * x + m[2][1] * y + m[2][2]).signum();
        let ground_sign = w_sign(w as f64 / 2.0, ht as f64 - 1.0);

        let mut depth_mm = vec![0u16; w * ht];
        let mut color = ColorImage::filled(w, ht, ASPHALT);
        let background = (spec.background_m * 1000.0).round() as u16;
        for y in 0..ht {
            for x in 0..w {
                let ray = [(x as f64 - cam.cx) / cam.fx, (y as f64 - cam.cy) / cam.fy, 1.0];
                let d: [f64; 3] = std::array::from_fn(|i| (0..3).map(|k| r[i][k] * ray[k]).sum());
                let nearest = boxes.iter().filter_map(|(lo, hi)| hit(origin, d, *lo, *hi)).fold(None, |m: Option<f64>, v| {
                    Some(m.map_or(v, |m| m.min(v)))
                });
                let i = y * w + x;
                if let Some(depth) = nearest.filter(|&v| v < spec.background_m) {
                    depth_mm[i] = ((depth * 1000.0).round() as u16).max(1);
                    color.set_pixel(x, y, BOX_PAINT);
                    continue;
                }
                depth_mm[i] = background;
                if w_sign(x as f64, y as f64) != ground_sign {
                    continue;
                }
                let Some((u, v)) = h.apply(x as f64, y as f64) else { continue };
                if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < ht as f64) {
                    continue;
                }
                for lane in &spec.lanes {
                    if (u - lane.center(v)).abs() <= lane.width_px / 2.0 {
                        color.set_pixel(x, y, paint(lane.color));
                    }
                }
            }
        }
        Ok(Self { spec, depth_mm, color })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn color(&self) -> &ColorImage {
        &self.color
    }

    /// Noise-free depth in millimeters.
    pub fn base_depth_mm(&self) -> &[u16] {
        &self.depth_mm
    }

    fn noise_rng(&self, frame: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.spec.seed ^ frame.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Depth of frame `frame` as little-endian u16 millimeters, written into `out`.
    pub fn write_depth_le(&self, frame: u64, out: &mut [u8]) {
        assert_eq!(out.len(), 2 * self.depth_mm.len(), "depth buffer size");
        let n = u32::from(self.spec.depth_noise_mm);
        if n == 0 {
            for (dst, &v) in out.chunks_exact_mut(2).zip(&self.depth_mm) {
                dst.copy_from_slice(&v.to_le_bytes());
            }
            return;
        }
        let mut rng = self.noise_rng(frame);
        let span = 2 * n + 1;
        for (dst, &v) in out.chunks_exact_mut(2).zip(&self.depth_mm) {
            let jitter = (rng.next_u32() % span) as i32 - n as i32;
            let noisy = (i32::from(v) + jitter).clamp(1, i32::from(u16::MAX)) as u16;
            dst.copy_from_slice(&noisy.to_le_bytes());
        }
    }

    pub fn depth_mm(&self, frame: u64) -> Vec<u16> {
        let mut bytes = vec![0u8; 2 * self.depth_mm.len()];
        self.write_depth_le(frame, &mut bytes);
        bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect()
    }

    /// Frame `frame` (1-based) as images.
    pub fn frame(&self, frame: u64) -> (DepthImage, ColorImage) {
        let depth = DepthImage::from_millimeters(self.spec.width, self.spec.height, &self.depth_mm(frame))
            .expect("scene dimensions are consistent");
        (depth, self.color.clone())
    }
}

/// Lane shapes used for round-trip scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneShape {
    Straight,
    LeftCurve,
    RightCurve,
}

/// Single-frame, obstacle-free scenes cycling through straight, left- and
/// right-curving lanes in white and yellow. Every other scene adds a thin
/// parallel line of the other color.
pub fn lane_scenes(n: usize, seed: u64) -> Vec<(LaneShape, SceneSpec)> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bottom = 479.0;
    (0..n)
        .map(|i| {
            let shape = [LaneShape::Straight, LaneShape::LeftCurve, LaneShape::RightCurve][i % 3];
            let color = if (i / 3) % 2 == 0 { LaneColor::White } else { LaneColor::Yellow };
            let base: f64 = rng.gen_range(260.0..380.0);
            let coeffs = match shape {
                LaneShape::Straight => {
                    let m: f64 = rng.gen_range(-0.1..0.1);
                    [base + m * bottom, -m, 0.0]
                }
                LaneShape::LeftCurve | LaneShape::RightCurve => {
                    let k: f64 = rng.gen_range(2e-4..6e-4);
                    let k = if shape == LaneShape::LeftCurve { -k } else { k };
                    // col = base + k (bottom - row)^2
                    [base + k * bottom * bottom, -2.0 * k * bottom, k]
                }
            };
            let mut lanes = vec![LaneSpec { coeffs, color, width_px: rng.gen_range(10.0..16.0) }];
            if i % 2 == 1 {
                let other = if color == LaneColor::White { LaneColor::Yellow } else { LaneColor::White };
                let offset = if base < 320.0 { 170.0 } else { -170.0 };
                lanes.push(LaneSpec { coeffs: [coeffs[0] + offset, coeffs[1], coeffs[2]], color: other, width_px: 4.0 });
            }
            let spec = SceneSpec {
                boxes: vec![],
                lanes,
                frames: 1,
                seed: seed.wrapping_add(i as u64),
                depth_noise_mm: 0,
                ..Default::default()
            };
            (shape, spec)
        })
        .collect()
}

/// All frames of a scene, in order.
pub fn generate_scene(spec: SceneSpec, cfg: &Config) -> Result<Vec<(DepthImage, ColorImage)>, SceneError> {
    let scene = Scene::new(spec, cfg)?;
    Ok((1..=scene.spec.frames as u64).map(|i| scene.frame(i)).collect())
}
