//! Perception kernels for a small autonomous-driving pipeline: depth
//! back-projection, occupancy-grid obstacle detection and lane fitting.
//!
//! The numeric kernels are generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the precision used by the pipeline stages.

pub mod config;
pub mod image;
pub mod lane;
pub mod obstacle;
pub mod pointcloud;
pub mod polyfit;
pub mod scalar;

pub use config::{Config, ConfigError};
pub use image::{ColorImage, DepthImage, ImageError};
pub use lane::{
    fit_lane, fit_trajectory, rgb_to_hsv, sample_trajectory, select_lane_color, threshold_colors, warp_birds_eye,
    ColorThresholds, Homography, Label, LaneColor, LaneDetector, LaneError, LaneMask, LaneOutcome,
    TrajectoryMapping, TrajectoryMessage, TrajectorySamples,
};
pub use obstacle::{
    filter_box, obstacle_in_path, rasterize_grid, rasterize_grid_par, transform_cloud, ObstacleBox, ObstacleError,
    ObstacleGrid, ObstacleParams, RigidTransform,
};
pub use pointcloud::{
    backproject_pixel, generate_pointcloud, generate_pointcloud_par, CameraInfoCache, Frame, Point3, PointCloud,
    PointCloudError, ProjectionMatrix, Rgb,
};
pub use polyfit::{polyfit, FitError, PolyCoeffs};
pub use scalar::Scalar;

/// Point clouds travel as 32-bit floats on the wire.
pub type Cloud = PointCloud<f32>;
pub type CloudPoint = Point3<f32>;
pub type Projection = ProjectionMatrix<f32>;
pub type Transform = RigidTransform<f32>;
pub type Box3 = ObstacleBox<f32>;
pub type ObstacleDetector = ObstacleParams<f32>;

/// Polynomial fits run in double precision.
pub type Poly = PolyCoeffs<f64>;
pub type LanePipeline = LaneDetector<f64>;
pub type PixelHomography = Homography<f64>;
