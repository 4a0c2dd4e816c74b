//! Lane detection: color thresholding in HSV, bird's-eye warp, lane color
//! selection, a quadratic lane fit and the cubic trajectory refit.

use crate::config::{Config, LaneConfig};
use crate::image::ColorImage;
use crate::polyfit::{normal_residual, polyfit, FitError, PolyCoeffs};
use crate::scalar::Scalar;

/// Samples taken along the image height for the trajectory refit.
pub const TRAJECTORY_SAMPLES: usize = 30;
pub const LANE_DEGREE: usize = 2;
pub const TRAJECTORY_DEGREE: usize = 3;
/// Trajectory wire size: degree (u32), four f64 coefficients, validity flag, padding.
pub const TRAJECTORY_WIRE_BYTES: usize = 40;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LaneError {
    #[error("homography is singular (|det| = {0:e})")]
    SingularHomography(f64),
    #[error("mask has no white or yellow pixels")]
    NoLanePixels,
    #[error("lane needs 3 pixels on 3 distinct rows, found {pixels} pixels on {rows} rows")]
    InsufficientPixels { pixels: usize, rows: usize },
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("malformed trajectory message")]
    Malformed,
}

/// 8-bit HSV: H in [0, 180), S and V in [0, 256). Interleaved like [`ColorImage`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsvImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl HsvImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Standard hexcone conversion at 8-bit scale, rounding half up.
/// Hue ties between equal maxima resolve red, then green, then blue.
#[inline]
pub fn hsv_pixel([r, g, b]: [u8; 3]) -> [u8; 3] {
    let (r, g, b) = (i32::from(r), i32::from(g), i32::from(b));
    let v = r.max(g).max(b);
    let d = v - r.min(g).min(b);
    if d == 0 {
        return [0, 0, v as u8];
    }
    let s = (2 * 255 * d + v) / (2 * v);
    // Hue in half-degrees, scaled by d: round(n / d) with n in [-30d, 150d].
    let n = if v == r {
        30 * (g - b)
    } else if v == g {
        60 * d + 30 * (b - r)
    } else {
        120 * d + 30 * (r - g)
    };
    let h = ((2 * n + 361 * d) / (2 * d)) % 180;
    [h as u8, s as u8, v as u8]
}

pub fn rgb_to_hsv(image: &ColorImage) -> HsvImage {
    let data = image.data().chunks_exact(3).flat_map(|p| hsv_pixel([p[0], p[1], p[2]])).collect();
    HsvImage { width: image.width(), height: image.height(), data }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LaneColor {
    White,
    Yellow,
}

/// Per-pixel label stored as one grayscale value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Label {
    None = 0,
    Yellow = 128,
    White = 255,
}

impl Label {
    #[inline]
    pub fn from_gray(v: u8) -> Self {
        match v {
            255 => Label::White,
            128 => Label::Yellow,
            _ => Label::None,
        }
    }

    #[inline]
    pub fn matches(self, color: LaneColor) -> bool {
        matches!((self, color), (Label::White, LaneColor::White) | (Label::Yellow, LaneColor::Yellow))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColorThresholds {
    pub white_s_max: u8,
    pub white_v_min: u8,
    pub yellow_h_min: u8,
    pub yellow_h_max: u8,
    pub yellow_s_min: u8,
    pub yellow_v_min: u8,
}

impl ColorThresholds {
    pub fn new(
        white: (u8, u8),
        yellow: (u8, u8, u8, u8),
    ) -> Result<Self, LaneError> {
        let (h_min, h_max, s_min, v_min) = yellow;
        if h_min > h_max || h_max >= 180 {
            return Err(LaneError::InvalidThresholds(format!("yellow hue [{h_min}, {h_max}]")));
        }
        Ok(Self {
            white_s_max: white.0,
            white_v_min: white.1,
            yellow_h_min: h_min,
            yellow_h_max: h_max,
            yellow_s_min: s_min,
            yellow_v_min: v_min,
        })
    }

    pub fn from_config(c: &LaneConfig) -> Result<Self, LaneError> {
        let t = &c.thresholds;
        Self::new((t.white.s_max, t.white.v_min), (t.yellow.h_min, t.yellow.h_max, t.yellow.s_min, t.yellow.v_min))
    }

    /// White wins where both predicates hold.
    #[inline]
    pub fn classify(&self, [h, s, v]: [u8; 3]) -> Label {
        if s <= self.white_s_max && v >= self.white_v_min {
            Label::White
        } else if (self.yellow_h_min..=self.yellow_h_max).contains(&h) && s >= self.yellow_s_min && v >= self.yellow_v_min {
            Label::Yellow
        } else {
            Label::None
        }
    }
}

impl Default for ColorThresholds {
    fn default() -> Self {
        Self::from_config(&LaneConfig::default()).expect("default thresholds are valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaneMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LaneMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![Label::None as u8; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// The grayscale encoding: 0 none, 128 yellow, 255 white.
    pub fn gray(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Label {
        Label::from_gray(self.data[y * self.width + x])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: Label) {
        self.data[y * self.width + x] = label as u8;
    }

    pub fn count(&self, label: Label) -> usize {
        self.data.iter().filter(|&&v| v == label as u8).count()
    }
}

pub fn threshold_colors(image: &HsvImage, t: &ColorThresholds) -> LaneMask {
    let data = image.data.chunks_exact(3).map(|p| t.classify([p[0], p[1], p[2]]) as u8).collect();
    LaneMask { width: image.width, height: image.height, data }
}

/// Projective pixel map `(col, row, 1) -> H (col, row, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography<T> {
    m: [[T; 3]; 3],
    inv: [[T; 3]; 3],
}

fn det3<T: Scalar>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl<T: Scalar> Homography<T> {
    pub fn new(m: [[T; 3]; 3]) -> Result<Self, LaneError> {
        let det = det3(&m);
        if !(det.abs().to_f64_lossless() > 1e-12) || m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LaneError::SingularHomography(det.abs().to_f64_lossless()));
        }
        let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        // Adjugate over determinant.
        let inv = [
            [c(1, 2, 1, 2) / det, -c(0, 2, 1, 2) / det, c(0, 1, 1, 2) / det],
            [-c(1, 2, 0, 2) / det, c(0, 2, 0, 2) / det, -c(0, 1, 0, 2) / det],
            [c(1, 2, 0, 1) / det, -c(0, 2, 0, 1) / det, c(0, 1, 0, 1) / det],
        ];
        Ok(Self { m, inv })
    }

    pub fn identity() -> Self {
        let (z, o) = (T::zero(), T::one());
        Self::new([[o, z, z], [z, o, z], [z, z, o]]).expect("identity is invertible")
    }

    pub fn from_config(c: &LaneConfig) -> Result<Self, LaneError> {
        Self::new(c.homography.map(|r| r.map(T::of)))
    }

    /// Direct linear solve for the map taking four `src` points onto `dst`.
    pub fn from_correspondences(src: [(T, T); 4], dst: [(T, T); 4]) -> Result<Self, LaneError> {
        let mut a = Vec::with_capacity(8);
        let mut b = Vec::with_capacity(8);
        let (z, o) = (T::zero(), T::one());
        for ((x, y), (u, v)) in src.into_iter().zip(dst) {
            a.push(vec![x, y, o, z, z, z, -u * x, -u * y]);
            b.push(u);
            a.push(vec![z, z, z, x, y, o, -v * x, -v * y]);
            b.push(v);
        }
        let h = crate::polyfit::solve_linear(a, b).ok_or(LaneError::SingularHomography(0.0))?;
        Self::new([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], o]])
    }

    pub fn matrix(&self) -> &[[T; 3]; 3] {
        &self.m
    }

    pub fn inverse_matrix(&self) -> &[[T; 3]; 3] {
        &self.inv
    }

    #[inline]
    fn map(m: &[[T; 3]; 3], x: T, y: T) -> Option<(T, T)> {
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w == T::zero() {
            return None;
        }
        Some(((m[0][0] * x + m[0][1] * y + m[0][2]) / w, (m[1][0] * x + m[1][1] * y + m[1][2]) / w))
    }

    #[inline]
    pub fn apply(&self, x: T, y: T) -> Option<(T, T)> {
        Self::map(&self.m, x, y)
    }

    #[inline]
    pub fn apply_inverse(&self, x: T, y: T) -> Option<(T, T)> {
        Self::map(&self.inv, x, y)
    }
}

/// Inverse-maps each destination pixel into the source and takes the
/// nearest label. Sources outside the mask become [`Label::None`].
pub fn warp_birds_eye<T: Scalar>(mask: &LaneMask, h: &Homography<T>) -> LaneMask {
    let (w, hgt) = (mask.width, mask.height);
    let mut out = LaneMask::new(w, hgt);
    let half = T::of(0.5);
    for r in 0..hgt {
        for c in 0..w {
            let Some((sx, sy)) = h.apply_inverse(T::of(c as f64), T::of(r as f64)) else { continue };
            let (sx, sy) = ((sx + half).floor(), (sy + half).floor());
            if sx >= T::zero() && sy >= T::zero() && sx < T::of(w as f64) && sy < T::of(hgt as f64) {
                let (sx, sy) = (sx.to_usize().unwrap(), sy.to_usize().unwrap());
                out.data[r * w + c] = mask.data[sy * w + sx];
            }
        }
    }
    out
}

/// Follows whichever color has more pixels; white on a tie.
pub fn select_lane_color(mask: &LaneMask) -> Result<LaneColor, LaneError> {
    let (white, yellow) = mask.data.iter().fold((0usize, 0usize), |(w, y), &v| match Label::from_gray(v) {
        Label::White => (w + 1, y),
        Label::Yellow => (w, y + 1),
        Label::None => (w, y),
    });
    match (white, yellow) {
        (0, 0) => Err(LaneError::NoLanePixels),
        (w, y) if w >= y => Ok(LaneColor::White),
        _ => Ok(LaneColor::Yellow),
    }
}

/// Lane pixels of one color as `(row, col)` samples.
pub fn lane_pixels<T: Scalar>(mask: &LaneMask, color: LaneColor) -> Vec<(T, T)> {
    let mut pts = Vec::new();
    for r in 0..mask.height {
        for c in 0..mask.width {
            if Label::from_gray(mask.data[r * mask.width + c]).matches(color) {
                pts.push((T::of(r as f64), T::of(c as f64)));
            }
        }
    }
    pts
}

/// Quadratic `col = f_l(row)` through the pixels of the selected color.
pub fn fit_lane<T: Scalar>(mask: &LaneMask, color: LaneColor) -> Result<PolyCoeffs<T>, LaneError> {
    let pts = lane_pixels::<T>(mask, color);
    let mut rows: Vec<T> = pts.iter().map(|p| p.0).collect();
    rows.dedup();
    if pts.len() < LANE_DEGREE + 1 || rows.len() < LANE_DEGREE + 1 {
        return Err(LaneError::InsufficientPixels { pixels: pts.len(), rows: rows.len() });
    }
    Ok(polyfit(&pts, LANE_DEGREE)?)
}

/// Thirty `(x_i, f_l(x_i))` pairs with `x_i = i * height / 30`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySamples<T> {
    points: [(T, T); TRAJECTORY_SAMPLES],
}

impl<T: Scalar> TrajectorySamples<T> {
    pub fn points(&self) -> &[(T, T); TRAJECTORY_SAMPLES] {
        &self.points
    }
}

pub fn sample_trajectory<T: Scalar>(lane: &PolyCoeffs<T>, image_height: usize) -> TrajectorySamples<T> {
    let step = T::of(image_height as f64) / T::of(TRAJECTORY_SAMPLES as f64);
    let points = std::array::from_fn(|i| {
        let x = T::of(i as f64) * step;
        (x, lane.eval(x))
    });
    TrajectorySamples { points }
}

/// Bird's-eye pixel to base frame mapping used before the trajectory refit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryMapping<T> {
    pub shift: T,
    pub scale: T,
    pub image_height: T,
    pub forward_from_bottom: bool,
    pub lateral_positive_left: bool,
}

impl<T: Scalar> TrajectoryMapping<T> {
    pub fn from_config(c: &LaneConfig) -> Self {
        Self {
            shift: T::of(c.shift),
            scale: T::of(c.scale),
            image_height: T::of(c.image_height as f64),
            forward_from_bottom: c.axes.forward_from_bottom,
            lateral_positive_left: c.axes.lateral_positive_left,
        }
    }

    /// `(row, col)` to `(forward, lateral)` meters.
    #[inline]
    pub fn to_base(&self, row: T, col: T) -> (T, T) {
        let forward = if self.forward_from_bottom { self.image_height - row } else { row };
        let offset = col - self.shift;
        let lateral = if self.lateral_positive_left { -offset } else { offset };
        (self.scale * forward, self.scale * lateral)
    }
}

/// Centers the samples, maps them into the base frame and fits the cubic
/// `lateral = f_t(forward)`.
pub fn fit_trajectory<T: Scalar>(
    samples: &TrajectorySamples<T>,
    mapping: &TrajectoryMapping<T>,
) -> Result<PolyCoeffs<T>, LaneError> {
    let pts: Vec<(T, T)> = samples.points.iter().map(|&(x, y)| mapping.to_base(x, y)).collect();
    let fit = polyfit(&pts, TRAJECTORY_DEGREE);
    debug_assert!(fit.is_ok(), "30 distinct sample rows cannot be singular");
    Ok(fit?)
}

/// Fixed-size trajectory message.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryMessage {
    pub degree: u32,
    pub coeffs: [f64; 4],
    pub valid: bool,
}

impl TrajectoryMessage {
    pub fn invalid() -> Self {
        Self { degree: TRAJECTORY_DEGREE as u32, coeffs: [0.0; 4], valid: false }
    }

    pub fn from_poly(p: &PolyCoeffs<f64>) -> Self {
        let mut coeffs = [0.0; 4];
        for (dst, &c) in coeffs.iter_mut().zip(p.coeffs()) {
            *dst = c;
        }
        Self { degree: p.degree() as u32, coeffs, valid: p.is_finite() }
    }

    pub fn encode(&self, out: &mut [u8]) -> usize {
        assert!(out.len() >= TRAJECTORY_WIRE_BYTES, "wire buffer too small");
        out[0..4].copy_from_slice(&self.degree.to_le_bytes());
        for (i, c) in self.coeffs.iter().enumerate() {
            out[4 + 8 * i..12 + 8 * i].copy_from_slice(&c.to_le_bytes());
        }
        out[36] = u8::from(self.valid);
        out[37..40].fill(0);
        TRAJECTORY_WIRE_BYTES
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LaneError> {
        if bytes.len() < TRAJECTORY_WIRE_BYTES || bytes[36] > 1 {
            return Err(LaneError::Malformed);
        }
        let degree = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let coeffs = std::array::from_fn(|i| f64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().unwrap()));
        Ok(Self { degree, coeffs, valid: bytes[36] == 1 })
    }
}

/// Everything the lane stage derives from one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneOutcome<T> {
    pub color: LaneColor,
    pub lane: PolyCoeffs<T>,
    pub samples: TrajectorySamples<T>,
    pub trajectory: PolyCoeffs<T>,
    /// Normal-equation residuals of the lane and trajectory fits.
    pub lane_residual: T,
    pub trajectory_residual: T,
}

/// The full lane pipeline with its fixed parameters.
#[derive(Debug, Clone)]
pub struct LaneDetector<T> {
    pub thresholds: ColorThresholds,
    pub homography: Homography<T>,
    pub mapping: TrajectoryMapping<T>,
    pub image_height: usize,
}

impl<T: Scalar> LaneDetector<T> {
    pub fn from_config(cfg: &Config) -> Result<Self, LaneError> {
        Ok(Self {
            thresholds: ColorThresholds::from_config(&cfg.lane)?,
            homography: Homography::from_config(&cfg.lane)?,
            mapping: TrajectoryMapping::from_config(&cfg.lane),
            image_height: cfg.lane.image_height,
        })
    }

    /// Bird's-eye label mask of a camera frame.
    pub fn birds_eye_mask(&self, image: &ColorImage) -> LaneMask {
        let mask = threshold_colors(&rgb_to_hsv(image), &self.thresholds);
        warp_birds_eye(&mask, &self.homography)
    }

    pub fn process(&self, image: &ColorImage) -> Result<LaneOutcome<T>, LaneError> {
        let warped = self.birds_eye_mask(image);
        let color = select_lane_color(&warped)?;
        let pts = lane_pixels::<T>(&warped, color);
        let lane = fit_lane(&warped, color)?;
        let lane_residual = normal_residual(&pts, &lane);
        let samples = sample_trajectory(&lane, self.image_height);
        let trajectory = fit_trajectory(&samples, &self.mapping)?;
        let base: Vec<(T, T)> = samples.points.iter().map(|&(x, y)| self.mapping.to_base(x, y)).collect();
        let trajectory_residual = normal_residual(&base, &trajectory);
        Ok(LaneOutcome { color, lane, samples, trajectory, lane_residual, trajectory_residual })
    }
}
