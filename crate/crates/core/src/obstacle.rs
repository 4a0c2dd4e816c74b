//! Point cloud to ground-plane obstacle grid.
//!
//! The cloud is moved into the car's base frame, cropped to the obstacle
//! box, projected onto the xy-plane and counted per grid cell. Cells and the
//! box are half-open on every axis, so a point on a shared boundary is
//! counted once.

use std::ops::Range;

use rayon::prelude::*;

use crate::config::{BoxConfig, Config, TransformConfig};
use crate::pointcloud::{Frame, Point3, PointCloud};
use crate::scalar::Scalar;

/// Grid wire header: rows (u16), cols (u16), cell size in meters (f32).
pub const GRID_HEADER_BYTES: usize = 8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ObstacleError {
    #[error("point cloud is in the {found:?} frame, expected {expected:?}")]
    FrameMismatch { expected: Frame, found: Frame },
    #[error("rotation is not orthonormal with determinant +1 (deviation {0:e})")]
    NotRigid(f64),
    #[error("obstacle box needs min < max on every axis")]
    EmptyBox,
    #[error("grid dimensions {rows}x{cols} are invalid")]
    BadGrid { rows: usize, cols: usize },
    #[error("malformed grid message: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T> {
    rotation: [[T; 3]; 3],
    translation: [T; 3],
}

impl<T: Scalar> RigidTransform<T> {
    /// Validates `RᵀR = I` and `det R = +1`, within 1e-9 for `f64`
    /// (a few ulps for lower precision scalars).
    pub fn new(rotation: [[T; 3]; 3], translation: [T; 3]) -> Result<Self, ObstacleError> {
        let tol = f64::max(1e-9, 8.0 * T::epsilon().to_f64_lossless());
        let r = rotation.map(|row| row.map(|v| v.to_f64_lossless()));
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                dev = dev.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        dev = dev.max((det - 1.0).abs());
        if !(dev <= tol) || translation.iter().any(|t| !t.is_finite()) {
            return Err(ObstacleError::NotRigid(dev));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        let (z, o) = (T::zero(), T::one());
        Self { rotation: [[o, z, z], [z, o, z], [z, z, o]], translation: [z; 3] }
    }

    pub fn from_config(c: &TransformConfig) -> Result<Self, ObstacleError> {
        Self::new(c.rotation.map(|row| row.map(T::of)), c.translation.map(T::of))
    }

    pub fn rotation(&self) -> &[[T; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> &[T; 3] {
        &self.translation
    }

    #[inline]
    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    pub fn cast<U: Scalar>(&self) -> RigidTransform<U> {
        RigidTransform {
            rotation: self.rotation.map(|row| row.map(|v| v.cast())),
            translation: self.translation.map(|v| v.cast()),
        }
    }
}

/// Axis-aligned volume in front of the car, in the base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleBox<T> {
    pub x_min: T,
    pub x_max: T,
    pub y_min: T,
    pub y_max: T,
    pub z_min: T,
    pub z_max: T,
}

impl<T: Scalar> ObstacleBox<T> {
    pub fn new(x: Range<T>, y: Range<T>, z: Range<T>) -> Result<Self, ObstacleError> {
        if !(x.start < x.end && y.start < y.end && z.start < z.end) {
            return Err(ObstacleError::EmptyBox);
        }
        Ok(Self { x_min: x.start, x_max: x.end, y_min: y.start, y_max: y.end, z_min: z.start, z_max: z.end })
    }

    pub fn from_config(c: &BoxConfig) -> Result<Self, ObstacleError> {
        Self::new(T::of(c.x_min)..T::of(c.x_max), T::of(c.y_min)..T::of(c.y_max), T::of(c.z_min)..T::of(c.z_max))
    }

    #[inline]
    pub fn contains(&self, p: &Point3<T>) -> bool {
        p.x >= self.x_min
            && p.x < self.x_max
            && p.y >= self.y_min
            && p.y < self.y_max
            && p.z >= self.z_min
            && p.z < self.z_max
    }

    /// Lower edge of forward cell `r`. Cell `r` spans `[row_edge(r), row_edge(r + 1))`
    /// except the last, which ends at `x_max`.
    #[inline]
    pub fn row_edge(&self, r: usize, rows: usize) -> T {
        self.x_min + T::of(r as f64) * ((self.x_max - self.x_min) / T::of(rows as f64))
    }

    #[inline]
    pub fn col_edge(&self, c: usize, cols: usize) -> T {
        self.y_min + T::of(c as f64) * ((self.y_max - self.y_min) / T::of(cols as f64))
    }
}

/// Ground-plane cell counts. Row index runs forward from `x_min`, column
/// index runs left from `y_min`. Counts saturate at 255.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleGrid {
    rows: usize,
    cols: usize,
    cell_size: f32,
    counts: Vec<u8>,
}

impl ObstacleGrid {
    pub fn zeros(rows: usize, cols: usize, cell_size: f32) -> Self {
        Self { rows, cols, cell_size, counts: vec![0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Forward extent of one cell in meters.
    pub fn cell_size(&self) -> f32 {
        self.cell_size
    }

    pub fn counts(&self) -> &[u8] {
        &self.counts
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.counts[r * self.cols + c]
    }

    /// The grid payload, one byte per cell.
    pub fn payload(&self) -> &[u8] {
        &self.counts
    }

    pub fn wire_len(&self) -> usize {
        GRID_HEADER_BYTES + self.counts.len()
    }

    pub fn encode_wire(&self, out: &mut [u8]) -> usize {
        let n = self.wire_len();
        assert!(out.len() >= n, "wire buffer too small");
        out[0..2].copy_from_slice(&(self.rows as u16).to_le_bytes());
        out[2..4].copy_from_slice(&(self.cols as u16).to_le_bytes());
        out[4..8].copy_from_slice(&self.cell_size.to_le_bytes());
        out[8..n].copy_from_slice(&self.counts);
        n
    }

    pub fn decode_wire(bytes: &[u8]) -> Result<Self, ObstacleError> {
        if bytes.len() < GRID_HEADER_BYTES {
            return Err(ObstacleError::Malformed("short header".into()));
        }
        let rows = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
        let cols = u16::from_le_bytes([bytes[2], bytes[3]]) as usize;
        let cell_size = f32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let body = &bytes[GRID_HEADER_BYTES..];
        if body.len() < rows * cols {
            return Err(ObstacleError::Malformed(format!("{rows}x{cols} grid, {} bytes", body.len())));
        }
        Ok(Self { rows, cols, cell_size, counts: body[..rows * cols].to_vec() })
    }
}

/// Maps every point `p' = R p + t` and retags the cloud as base frame.
pub fn transform_cloud<T: Scalar>(cloud: &PointCloud<T>, t: &RigidTransform<T>) -> Result<PointCloud<T>, ObstacleError> {
    if cloud.frame != Frame::Camera {
        return Err(ObstacleError::FrameMismatch { expected: Frame::Camera, found: cloud.frame });
    }
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let [x, y, z] = t.apply(p.coords());
            Point3 { x, y, z, color: p.color }
        })
        .collect();
    Ok(PointCloud::new(points, Frame::Base))
}

/// Keeps the points inside the half-open obstacle box.
pub fn filter_box<T: Scalar>(cloud: &PointCloud<T>, b: &ObstacleBox<T>) -> PointCloud<T> {
    let points = cloud.points.iter().filter(|p| b.contains(p)).copied().collect();
    PointCloud::new(points, cloud.frame)
}

/// Cell index along one axis, consistent with the edges reported by
/// [`ObstacleBox::row_edge`]/[`ObstacleBox::col_edge`]. `None` outside `[lo, hi)`.
#[inline]
fn cell_index<T: Scalar>(v: T, lo: T, hi: T, n: usize, edge: impl Fn(usize) -> T) -> Option<usize> {
    if !(v >= lo && v < hi) {
        return None;
    }
    let guess = ((v - lo) / ((hi - lo) / T::of(n as f64))).floor().to_usize().unwrap_or(0);
    let mut i = guess.min(n - 1);
    while i > 0 && v < edge(i) {
        i -= 1;
    }
    while i + 1 < n && v >= edge(i + 1) {
        i += 1;
    }
    Some(i)
}

/// Flat `row * cols + col` index of the cell holding `p`, if it lies in the box footprint.
#[inline]
pub fn cell_of<T: Scalar>(p: &Point3<T>, b: &ObstacleBox<T>, rows: usize, cols: usize) -> Option<usize> {
    let r = cell_index(p.x, b.x_min, b.x_max, rows, |i| b.row_edge(i, rows))?;
    let c = cell_index(p.y, b.y_min, b.y_max, cols, |i| b.col_edge(i, cols))?;
    Some(r * cols + c)
}

fn check_grid(rows: usize, cols: usize) -> Result<(), ObstacleError> {
    if rows == 0 || cols == 0 || rows > u16::MAX as usize || cols > u16::MAX as usize {
        return Err(ObstacleError::BadGrid { rows, cols });
    }
    Ok(())
}

/// Projects box-filtered points to the ground and counts them per cell.
/// Height is ignored; points outside the box's x/y extent are skipped.
pub fn rasterize_grid<T: Scalar>(
    cloud: &PointCloud<T>,
    b: &ObstacleBox<T>,
    rows: usize,
    cols: usize,
) -> Result<ObstacleGrid, ObstacleError> {
    check_grid(rows, cols)?;
    let mut grid = ObstacleGrid::zeros(rows, cols, ((b.x_max - b.x_min) / T::of(rows as f64)).to_f32().unwrap_or(0.0));
    for p in &cloud.points {
        if let Some(i) = cell_of(p, b, rows, cols) {
            grid.counts[i] = grid.counts[i].saturating_add(1);
        }
    }
    Ok(grid)
}

/// Parallel [`rasterize_grid`]: per-chunk exact counts merged before saturation.
pub fn rasterize_grid_par<T: Scalar>(
    cloud: &PointCloud<T>,
    b: &ObstacleBox<T>,
    rows: usize,
    cols: usize,
) -> Result<ObstacleGrid, ObstacleError> {
    check_grid(rows, cols)?;
    let totals = cloud
        .points
        .par_chunks(4096)
        .map(|chunk| {
            let mut acc = vec![0u32; rows * cols];
            for p in chunk {
                if let Some(i) = cell_of(p, b, rows, cols) {
                    acc[i] += 1;
                }
            }
            acc
        })
        .reduce(
            || vec![0u32; rows * cols],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let mut grid = ObstacleGrid::zeros(rows, cols, ((b.x_max - b.x_min) / T::of(rows as f64)).to_f32().unwrap_or(0.0));
    for (dst, n) in grid.counts.iter_mut().zip(totals) {
        *dst = n.min(u32::from(u8::MAX)) as u8;
    }
    Ok(grid)
}

/// True when any footprint cell holds at least `min_count` points; the
/// consumer commands zero speed in that case.
///
/// # Panics
/// If `footprint_cols` reaches past the grid's columns.
pub fn obstacle_in_path(grid: &ObstacleGrid, footprint_cols: Range<usize>, min_count: u8) -> bool {
    assert!(footprint_cols.end <= grid.cols, "footprint columns {footprint_cols:?} outside grid");
    (0..grid.rows).any(|r| footprint_cols.clone().any(|c| grid.get(r, c) >= min_count))
}

/// Obstacle stage parameters assembled from the config file.
#[derive(Debug, Clone)]
pub struct ObstacleParams<T> {
    pub camera_to_base: RigidTransform<T>,
    pub obstacle_box: ObstacleBox<T>,
    pub rows: usize,
    pub cols: usize,
    pub footprint_cols: Range<usize>,
    pub min_count: u8,
}

impl<T: Scalar> ObstacleParams<T> {
    pub fn from_config(cfg: &Config) -> Result<Self, ObstacleError> {
        let [lo, hi] = cfg.obstacle_check.footprint_cols;
        Ok(Self {
            camera_to_base: RigidTransform::from_config(&cfg.camera_to_base)?,
            obstacle_box: ObstacleBox::from_config(&cfg.obstacle_box)?,
            rows: cfg.grid.rows,
            cols: cfg.grid.cols,
            footprint_cols: lo..hi,
            min_count: cfg.obstacle_check.min_count,
        })
    }

    /// Transform, crop and rasterize; returns the grid and the stop decision.
    pub fn detect(&self, cloud: &PointCloud<T>) -> Result<(ObstacleGrid, bool), ObstacleError> {
        let base = transform_cloud(cloud, &self.camera_to_base)?;
        let inside = filter_box(&base, &self.obstacle_box);
        let grid = rasterize_grid(&inside, &self.obstacle_box, self.rows, self.cols)?;
        let stop = obstacle_in_path(&grid, self.footprint_cols.clone(), self.min_count);
        Ok((grid, stop))
    }
}
