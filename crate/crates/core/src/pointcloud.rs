//! Depth image back-projection into colored point clouds.
//!
//! Every valid pixel `(x, y)` with depth `w` maps through the camera
//! projection matrix
//!
//! ```text
//!     | fx  0  cx  tx |
//! P = |  0 fy  cy  ty |
//!     |  0  0   1   0 |
//! ```
//!
//! to `X = (u - cx*w - tx) / fx`, `Y = (v - cy*w - ty) / fy`, `Z = w`
//! where `u = x*w` and `v = y*w`.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::config::{CameraConfig, Config, ConfigError};
use crate::image::{ColorImage, DepthImage};
use crate::scalar::Scalar;

/// Bytes per serialized point: three `f32` coordinates and packed RGBA.
pub const POINT_BYTES: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum PointCloudError {
    #[error("depth image is {depth:?} but color image is {color:?}")]
    DimensionMismatch { depth: (usize, usize), color: (usize, usize) },
    #[error("invalid projection matrix: {0}")]
    InvalidProjection(String),
    #[error("missing calibration: {0}")]
    MissingCalibration(String),
    #[error("malformed point cloud message: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub tx: T,
    pub ty: T,
}

impl<T: Scalar> ProjectionMatrix<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, tx: T, ty: T) -> Result<Self, PointCloudError> {
        let all = [fx, fy, cx, cy, tx, ty];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(PointCloudError::InvalidProjection("non-finite entry".into()));
        }
        if !(fx > T::zero() && fy > T::zero()) {
            return Err(PointCloudError::InvalidProjection(format!("fx={fx} fy={fy} must be positive")));
        }
        Ok(Self { fx, fy, cx, cy, tx, ty })
    }

    pub fn from_camera(c: &CameraConfig) -> Result<Self, PointCloudError> {
        Self::new(T::of(c.fx), T::of(c.fy), T::of(c.cx), T::of(c.cy), T::of(c.tx), T::of(c.ty))
    }

    /// The 3x4 matrix form.
    pub fn matrix(&self) -> [[T; 4]; 3] {
        let (z, o) = (T::zero(), T::one());
        [[self.fx, z, self.cx, self.tx], [z, self.fy, self.cy, self.ty], [z, z, o, z]]
    }

    pub fn cast<U: Scalar>(&self) -> ProjectionMatrix<U> {
        ProjectionMatrix {
            fx: self.fx.cast(),
            fy: self.fy.cast(),
            cx: self.cx.cast(),
            cy: self.cy.cast(),
            tx: self.tx.cast(),
            ty: self.ty.cast(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Rgb(pub [u8; 3]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    Camera,
    Base,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    pub color: Rgb,
}

impl<T: Scalar> Point3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z, color: Rgb::default() }
    }

    pub fn with_color(mut self, color: Rgb) -> Self {
        self.color = color;
        self
    }

    pub fn coords(&self) -> [T; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    pub points: Vec<Point3<T>>,
    pub frame: Frame,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<Point3<T>>, frame: Frame) -> Self {
        Self { points, frame }
    }

    pub fn empty(frame: Frame) -> Self {
        Self { points: Vec::new(), frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Size of the packed point payload: exactly 16 bytes per point.
    pub fn serialized_len(&self) -> usize {
        self.points.len() * POINT_BYTES
    }

    /// Packs every point as little-endian `f32` X, Y, Z followed by R, G, B, A.
    pub fn write_points(&self, out: &mut [u8]) {
        assert!(out.len() >= self.serialized_len(), "point buffer too small");
        for (p, dst) in self.points.iter().zip(out.chunks_exact_mut(POINT_BYTES)) {
            dst[0..4].copy_from_slice(&p.x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            dst[4..8].copy_from_slice(&p.y.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            dst[8..12].copy_from_slice(&p.z.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            dst[12..15].copy_from_slice(&p.color.0);
            dst[15] = u8::MAX;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.serialized_len()];
        self.write_points(&mut out);
        out
    }

    /// Length of the transport message: a `u32` point count followed by the packed points.
    pub fn wire_len(&self) -> usize {
        4 + self.serialized_len()
    }

    pub fn encode_wire(&self, out: &mut [u8]) -> usize {
        let n = self.wire_len();
        assert!(out.len() >= n, "wire buffer too small");
        let count = u32::try_from(self.points.len()).expect("point count fits u32");
        out[..4].copy_from_slice(&count.to_le_bytes());
        self.write_points(&mut out[4..n]);
        n
    }

    pub fn decode_wire(bytes: &[u8], frame: Frame) -> Result<Self, PointCloudError> {
        if bytes.len() < 4 {
            return Err(PointCloudError::Malformed("missing point count".into()));
        }
        let count = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let body = &bytes[4..];
        if body.len() < count * POINT_BYTES {
            return Err(PointCloudError::Malformed(format!(
                "{count} points need {} bytes, have {}",
                count * POINT_BYTES,
                body.len()
            )));
        }
        let f = |b: &[u8]| T::of(f64::from(f32::from_le_bytes(b.try_into().unwrap())));
        let points = body[..count * POINT_BYTES]
            .chunks_exact(POINT_BYTES)
            .map(|c| Point3 {
                x: f(&c[0..4]),
                y: f(&c[4..8]),
                z: f(&c[8..12]),
                color: Rgb([c[12], c[13], c[14]]),
            })
            .collect();
        Ok(Self { points, frame })
    }
}

/// Back-projects one pixel `(x, y)` with depth `w` into the camera frame.
#[inline]
pub fn backproject_pixel<T: Scalar>(p: &ProjectionMatrix<T>, x: T, y: T, w: T) -> Point3<T> {
    let u = x * w;
    let v = y * w;
    Point3::new((u - p.cx * w - p.tx) / p.fx, (v - p.cy * w - p.ty) / p.fy, w)
}

fn check_dims(depth: &DepthImage, color: &ColorImage) -> Result<(), PointCloudError> {
    if depth.width() != color.width() || depth.height() != color.height() {
        return Err(PointCloudError::DimensionMismatch {
            depth: (depth.width(), depth.height()),
            color: (color.width(), color.height()),
        });
    }
    Ok(())
}

#[inline]
fn push_row<T: Scalar>(p: &ProjectionMatrix<T>, depth: &DepthImage, color: &ColorImage, y: usize, out: &mut Vec<Point3<T>>) {
    let width = depth.width();
    let row = &depth.data()[y * width..(y + 1) * width];
    let rgb = &color.data()[y * width * 3..(y + 1) * width * 3];
    let yt = T::of(y as f64);
    for (x, &w) in row.iter().enumerate() {
        // Zero depth marks an invalid pixel and is skipped.
        if w > 0.0 {
            let c = Rgb([rgb[3 * x], rgb[3 * x + 1], rgb[3 * x + 2]]);
            out.push(backproject_pixel(p, T::of(x as f64), yt, T::of(f64::from(w))).with_color(c));
        }
    }
}

/// Merges a depth image with its registered color image into a camera-frame cloud.
pub fn generate_pointcloud<T: Scalar>(
    p: &ProjectionMatrix<T>,
    depth: &DepthImage,
    color: &ColorImage,
) -> Result<PointCloud<T>, PointCloudError> {
    check_dims(depth, color)?;
    let mut points = Vec::with_capacity(depth.data().len());
    for y in 0..depth.height() {
        push_row(p, depth, color, y, &mut points);
    }
    Ok(PointCloud::new(points, Frame::Camera))
}

/// Row-parallel variant of [`generate_pointcloud`]; yields the same points in the same order.
pub fn generate_pointcloud_par<T: Scalar>(
    p: &ProjectionMatrix<T>,
    depth: &DepthImage,
    color: &ColorImage,
) -> Result<PointCloud<T>, PointCloudError> {
    check_dims(depth, color)?;
    let rows: Vec<Vec<Point3<T>>> = (0..depth.height())
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(depth.width());
            push_row(p, depth, color, y, &mut row);
            row
        })
        .collect();
    Ok(PointCloud::new(rows.concat(), Frame::Camera))
}

/// Reads the projection matrix from the calibration file once and serves the
/// cached copy afterwards. The file is not consulted again until a new cache
/// is built, i.e. on pipeline restart.
#[derive(Debug)]
pub struct CameraInfoCache {
    source: PathBuf,
    cached: OnceLock<ProjectionMatrix<f64>>,
}

impl CameraInfoCache {
    pub fn new(source: impl AsRef<Path>) -> Self {
        Self { source: source.as_ref().to_path_buf(), cached: OnceLock::new() }
    }

    pub fn fetch(&self) -> Result<ProjectionMatrix<f64>, PointCloudError> {
        if let Some(p) = self.cached.get() {
            return Ok(*p);
        }
        let p = fetch_camera_info(&self.source)?;
        Ok(*self.cached.get_or_init(|| p))
    }
}

/// Loads calibration from the JSON config file without caching.
pub fn fetch_camera_info(path: impl AsRef<Path>) -> Result<ProjectionMatrix<f64>, PointCloudError> {
    let missing = |e: ConfigError| PointCloudError::MissingCalibration(e.to_string());
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| PointCloudError::MissingCalibration(format!("{}: {e}", path.as_ref().display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| missing(e.into()))?;
    let camera = value
        .get("camera")
        .ok_or_else(|| PointCloudError::MissingCalibration("no camera section".into()))?;
    let camera: CameraConfig = serde_json::from_value(camera.clone()).map_err(|e| missing(e.into()))?;
    ProjectionMatrix::from_camera(&camera).map_err(|e| PointCloudError::MissingCalibration(e.to_string()))
}

/// Projection matrix straight from an already parsed config.
pub fn projection_from_config<T: Scalar>(cfg: &Config) -> Result<ProjectionMatrix<T>, PointCloudError> {
    ProjectionMatrix::from_camera(&cfg.camera)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity() -> ProjectionMatrix<f64> {
        ProjectionMatrix::new(1.0, 1.0, 0.0, 0.0, 0.0, 0.0).unwrap()
    }

    fn default_camera() -> ProjectionMatrix<f64> {
        ProjectionMatrix::new(554.3, 554.3, 320.0, 240.0, 0.0, 0.0).unwrap()
    }

    #[test]
    fn identity_intrinsics() {
        let p = backproject_pixel(&identity(), 3.0, 4.0, 2.0);
        assert_eq!(p.coords(), [6.0, 8.0, 2.0]);
    }

    #[test]
    fn principal_point_lies_on_axis() {
        let cam = default_camera();
        for w in [0.1, 1.0, 7.25] {
            assert_eq!(backproject_pixel(&cam, 320.0, 240.0, w).coords(), [0.0, 0.0, w]);
        }
    }

    #[test]
    fn default_camera_pixel() {
        // (400 - 320) * 1.5 / 554.3 and (300 - 240) * 1.5 / 554.3
        let p = backproject_pixel(&default_camera(), 400.0, 300.0, 1.5);
        assert!((p.x - 120.0 / 554.3).abs() < 1e-12);
        assert!((p.y - 90.0 / 554.3).abs() < 1e-12);
        assert!((p.x - 0.216_489_265).abs() < 1e-8);
        assert!((p.y - 0.162_366_949).abs() < 1e-8);
        assert_eq!(p.z, 1.5);
    }

    #[test]
    fn stereo_terms_shift_the_point() {
        let p = ProjectionMatrix::new(2.0, 4.0, 0.0, 0.0, 1.0, -2.0).unwrap();
        let q = backproject_pixel(&p, 0.0, 0.0, 1.0);
        assert_eq!(q.coords(), [-0.5, 0.5, 1.0]);
    }

    #[test]
    fn invalid_focal_length_is_rejected() {
        assert!(ProjectionMatrix::new(0.0, 1.0, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(ProjectionMatrix::new(1.0, -1.0, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(ProjectionMatrix::new(1.0, 1.0, f64::NAN, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn zero_depth_yields_empty_cloud() {
        let depth = DepthImage::zeros(4, 3);
        let color = ColorImage::filled(4, 3, [1, 2, 3]);
        let cloud = generate_pointcloud(&default_camera(), &depth, &color).unwrap();
        assert!(cloud.is_empty());
        assert_eq!(cloud.frame, Frame::Camera);
    }

    #[test]
    fn dimension_mismatch() {
        let depth = DepthImage::zeros(4, 3);
        let color = ColorImage::filled(3, 4, [0; 3]);
        assert!(matches!(
            generate_pointcloud(&default_camera(), &depth, &color),
            Err(PointCloudError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn colors_follow_pixels() {
        let depth = DepthImage::new(2, 1, vec![1.0, 2.0]).unwrap();
        let mut color = ColorImage::filled(2, 1, [0; 3]);
        color.set_pixel(1, 0, [9, 8, 7]);
        let cloud = generate_pointcloud(&identity(), &depth, &color).unwrap();
        assert_eq!(cloud.points[1].color, Rgb([9, 8, 7]));
        assert_eq!(cloud.points[1].coords(), [2.0, 0.0, 2.0]);
    }

    #[test]
    fn full_frame_is_4_7_megabytes() {
        let depth = DepthImage::new(640, 480, vec![2.0; 640 * 480]).unwrap();
        let color = ColorImage::filled(640, 480, [90; 3]);
        let cloud = generate_pointcloud::<f32>(&default_camera().cast(), &depth, &color).unwrap();
        assert_eq!(cloud.len(), 307_200);
        assert_eq!(cloud.serialized_len(), 4_915_200);
        assert_eq!(cloud.to_bytes().len(), 4_915_200);
    }

    #[test]
    fn wire_round_trip() {
        let depth = DepthImage::new(3, 2, vec![1.0, 0.0, 2.5, 0.5, 4.0, 0.0]).unwrap();
        let mut color = ColorImage::filled(3, 2, [10, 20, 30]);
        color.set_pixel(2, 0, [200, 100, 0]);
        let cloud = generate_pointcloud::<f32>(&default_camera().cast(), &depth, &color).unwrap();
        let mut buf = vec![0u8; cloud.wire_len()];
        assert_eq!(cloud.encode_wire(&mut buf), 4 + 16 * 4);
        let back = PointCloud::<f32>::decode_wire(&buf, Frame::Camera).unwrap();
        assert_eq!(back, cloud);
        assert!(PointCloud::<f32>::decode_wire(&buf[..20], Frame::Camera).is_err());
    }

    #[test]
    fn camera_info_is_cached() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, Config::default().to_json()).unwrap();
        let cache = CameraInfoCache::new(&path);
        let first = cache.fetch().unwrap();
        assert_eq!(first, default_camera());
        std::fs::remove_file(&path).unwrap();
        assert_eq!(cache.fetch().unwrap(), first);
        assert!(matches!(fetch_camera_info(&path), Err(PointCloudError::MissingCalibration(_))));
    }

    #[test]
    fn bad_calibration_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"camera": {"fx": -1, "fy": 1, "cx": 0, "cy": 0}}"#).unwrap();
        assert!(matches!(fetch_camera_info(&path), Err(PointCloudError::MissingCalibration(_))));
        std::fs::write(&path, r#"{"grid": {"rows": 1, "cols": 1}}"#).unwrap();
        assert!(matches!(fetch_camera_info(&path), Err(PointCloudError::MissingCalibration(_))));
    }

    proptest! {
        #[test]
        fn depth_linearity(x in 0.0f64..640.0, y in 0.0f64..480.0, w in 0.01f64..20.0, k in 0.1f64..10.0) {
            let cam = default_camera();
            let a = backproject_pixel(&cam, x, y, k * w);
            let b = backproject_pixel(&cam, x, y, w);
            for (ai, bi) in a.coords().iter().zip(b.coords()) {
                prop_assert!((ai - k * bi).abs() <= 1e-9 * (1.0 + ai.abs()));
            }
        }

        #[test]
        fn depth_passes_through(x in 0.0f32..640.0, y in 0.0f32..480.0, w in 0.0f32..60.0) {
            let cam = default_camera().cast::<f32>();
            prop_assert_eq!(backproject_pixel(&cam, x, y, w).z, w);
        }

        #[test]
        fn parallel_matches_sequential(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (16, 12);
            let depth: Vec<f32> = (0..w * h).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.1..8.0) }).collect();
            let depth = DepthImage::new(w, h, depth).unwrap();
            let color = ColorImage::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap();
            let cam = default_camera().cast::<f32>();
            prop_assert_eq!(
                generate_pointcloud(&cam, &depth, &color).unwrap(),
                generate_pointcloud_par(&cam, &depth, &color).unwrap()
            );
        }
    }
}
