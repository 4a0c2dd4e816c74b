//! Kernels checked against independent reference computations.

use adunit_core::lane::{hsv_pixel, lane_pixels, TrajectoryMapping};
use adunit_core::obstacle::cell_of;
use adunit_core::polyfit::normal_residual;
use adunit_core::*;
use num::{BigInt, BigRational, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn rational(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite")
}

/// Exact least squares via the normal equations in rational arithmetic.
fn exact_polyfit(points: &[(f64, f64)], degree: usize) -> Vec<f64> {
    let n = degree + 1;
    let pts: Vec<(BigRational, BigRational)> = points.iter().map(|&(x, y)| (rational(x), rational(y))).collect();
    let mut sums = vec![BigRational::zero(); 2 * n - 1];
    let mut rhs = vec![BigRational::zero(); n];
    for (x, y) in &pts {
        let mut pow = BigRational::from_integer(BigInt::from(1));
        for (j, s) in sums.iter_mut().enumerate() {
            *s += &pow;
            if j < n {
                rhs[j] += &pow * y;
            }
            pow *= x;
        }
    }
    let mut a: Vec<Vec<BigRational>> = (0..n)
        .map(|i| {
            let mut row: Vec<BigRational> = (0..n).map(|j| sums[i + j].clone()).collect();
            row.push(rhs[i].clone());
            row
        })
        .collect();
    for col in 0..n {
        let p = (col..n).find(|&r| !a[r][col].is_zero()).expect("nonsingular");
        a.swap(col, p);
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = &a[r][col] / &a[col][col];
                for k in col..=n {
                    let d = &f * &a[col][k];
                    a[r][k] -= d;
                }
            }
        }
    }
    (0..n).map(|i| (&a[i][n] / &a[i][i]).to_f64().unwrap()).collect()
}

/// Hexcone HSV in floating point, dividing last so that exact halves round up.
fn hsv_reference([r, g, b]: [u8; 3]) -> [u8; 3] {
    let (r, g, b) = (f64::from(r), f64::from(g), f64::from(b));
    let max = r.max(g).max(b);
    let d = max - r.min(g).min(b);
    if d == 0.0 {
        return [0, 0, max as u8];
    }
    let s = (255.0 * d / max + 0.5).floor();
    let half_deg = if max == r {
        30.0 * (g - b) / d
    } else if max == g {
        60.0 + 30.0 * (b - r) / d
    } else {
        120.0 + 30.0 * (r - g) / d
    };
    let h = (half_deg + 180.5).floor().rem_euclid(180.0);
    [h as u8, s as u8, max as u8]
}

#[test]
fn hsv_matches_reference_on_every_color() {
    for r in 0..=255u8 {
        for g in 0..=255u8 {
            for b in 0..=255u8 {
                assert_eq!(hsv_pixel([r, g, b]), hsv_reference([r, g, b]), "rgb {r} {g} {b}");
            }
        }
    }
}

#[test]
fn threshold_matches_scalar_predicates() {
    let t = ColorThresholds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<u8> = (0..64 * 48 * 3).map(|_| rng.gen()).collect();
    let image = ColorImage::new(64, 48, data).unwrap();
    let mask = threshold_colors(&rgb_to_hsv(&image), &t);
    for y in 0..48 {
        for x in 0..64 {
            let [h, s, v] = hsv_reference(image.pixel(x, y));
            let white = s <= 60 && v >= 200;
            let yellow = (20..=35).contains(&h) && s >= 80 && v >= 80;
            let expected = if white {
                Label::White
            } else if yellow {
                Label::Yellow
            } else {
                Label::None
            };
            assert_eq!(mask.get(x, y), expected);
        }
    }
}

#[test]
fn backprojection_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (fx, fy) = (rng.gen_range(100.0..900.0), rng.gen_range(100.0..900.0));
        let (cx, cy) = (rng.gen_range(0.0..8.0), rng.gen_range(0.0..8.0));
        let (tx, ty) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
        let p = ProjectionMatrix::<f64>::new(fx, fy, cx, cy, tx, ty).unwrap();
        let depth: Vec<f32> = (0..64).map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.1..12.0) }).collect();
        let color = ColorImage::new(8, 8, (0..192).map(|_| rng.gen()).collect()).unwrap();
        let cloud = generate_pointcloud(&p, &DepthImage::new(8, 8, depth.clone()).unwrap(), &color).unwrap();

        let mut expected = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                let w = f64::from(depth[y * 8 + x]);
                if w > 0.0 {
                    // Image plane coordinates, then undo the intrinsics.
                    let (u, v) = (x as f64 * w, y as f64 * w);
                    expected.push(([(u - cx * w - tx) / fx, (v - cy * w - ty) / fy, w], color.pixel(x, y)));
                }
            }
        }
        assert_eq!(cloud.len(), expected.len());
        for (pt, (e, rgb)) in cloud.points.iter().zip(&expected) {
            for (a, b) in pt.coords().iter().zip(e) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
            assert_eq!(pt.color.0, *rgb);
        }
    }
}

#[test]
fn full_frame_cloud_size() {
    let cfg = Config::default();
    let depth = DepthImage::new(640, 480, vec![2.0; 640 * 480]).unwrap();
    let color = ColorImage::filled(640, 480, [90, 90, 90]);
    let p = ProjectionMatrix::<f32>::from_camera(&cfg.camera).unwrap();
    let cloud = generate_pointcloud(&p, &depth, &color).unwrap();
    assert_eq!(cloud.to_bytes().len(), 4_915_200);
}

#[test]
fn rigid_transform_matches_exact_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (ax, ay, az) = (rng.gen_range(-1.0..1.0f64), rng.gen_range(-1.0..1.0f64), rng.gen_range(-1.0..1.0f64));
    let n = (ax * ax + ay * ay + az * az).sqrt();
    let (kx, ky, kz) = (ax / n, ay / n, az / n);
    let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (c, s) = (th.cos(), th.sin());
    let r = [
        [c + kx * kx * (1.0 - c), kx * ky * (1.0 - c) - kz * s, kx * kz * (1.0 - c) + ky * s],
        [ky * kx * (1.0 - c) + kz * s, c + ky * ky * (1.0 - c), ky * kz * (1.0 - c) - kx * s],
        [kz * kx * (1.0 - c) - ky * s, kz * ky * (1.0 - c) + kx * s, c + kz * kz * (1.0 - c)],
    ];
    let t = [0.3, -1.2, 0.25];
    let xf = RigidTransform::new(r, t).unwrap();
    let pts: Vec<Point3<f64>> = (0..100)
        .map(|_| Point3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(0.0..10.0)))
        .collect();
    let out = transform_cloud(&PointCloud::new(pts.clone(), Frame::Camera), &xf).unwrap();
    assert_eq!(out.frame, Frame::Base);
    for (p, q) in pts.iter().zip(&out.points) {
        let v = p.coords().map(rational);
        for i in 0..3 {
            let exact = (0..3).fold(rational(t[i]), |acc, k| acc + rational(r[i][k]) * &v[k]);
            assert!((q.coords()[i] - exact.to_f64().unwrap()).abs() <= 1e-6);
        }
    }
}

#[test]
fn grid_matches_brute_force_on_random_clouds() {
    let b = ObstacleBox::<f32>::from_config(&Config::default().obstacle_box).unwrap();
    let (rows, cols) = (13, 18);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for round in 0..1000 {
        let n = rng.gen_range(0..=10_000);
        let pts: Vec<Point3<f32>> = (0..n)
            .map(|_| Point3::new(rng.gen_range(-0.5..3.75), rng.gen_range(-2.75..2.75), rng.gen_range(-0.1..0.6)))
            .collect();
        let cloud = PointCloud::new(pts, Frame::Base);
        let inside = filter_box(&cloud, &b);
        let grid = rasterize_grid(&inside, &b, rows, cols).unwrap();

        let total: u32 = grid.counts().iter().map(|&c| u32::from(c)).sum();
        let saturated = grid.counts().iter().any(|&c| c == 255);
        if !saturated {
            assert_eq!(total as usize, inside.len(), "round {round}");
        }
        // Per-cell scan over the half-open cell bounds.
        let row_hi = |r: usize| if r + 1 == rows { b.x_max } else { b.row_edge(r + 1, rows) };
        let col_hi = |c: usize| if c + 1 == cols { b.y_max } else { b.col_edge(c + 1, cols) };
        if round % 50 == 0 {
            for r in 0..rows {
                for c in 0..cols {
                    let count = inside
                        .points
                        .iter()
                        .filter(|p| p.x >= b.row_edge(r, rows) && p.x < row_hi(r) && p.y >= b.col_edge(c, cols) && p.y < col_hi(c))
                        .count();
                    assert_eq!(grid.get(r, c), count.min(255) as u8, "round {round} cell ({r}, {c})");
                }
            }
        } else {
            let mut counts = vec![0usize; rows * cols];
            for p in &inside.points {
                let r = (0..rows).find(|&r| p.x >= b.row_edge(r, rows) && p.x < row_hi(r)).unwrap();
                let c = (0..cols).find(|&c| p.y >= b.col_edge(c, cols) && p.y < col_hi(c)).unwrap();
                assert_eq!(cell_of(p, &b, rows, cols), Some(r * cols + c));
                counts[r * cols + c] += 1;
            }
            let expected: Vec<u8> = counts.iter().map(|&c| c.min(255) as u8).collect();
            assert_eq!(grid.counts(), &expected[..], "round {round}");
        }
    }
}

#[test]
fn default_grid_is_234_bytes() {
    let detector = ObstacleDetector::from_config(&Config::default()).unwrap();
    let (grid, stop) = detector.detect(&Cloud::empty(Frame::Camera)).unwrap();
    assert_eq!(grid.payload().len(), 234);
    assert!(!stop);
}

#[test]
fn exact_polynomials_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..500 {
        let k = rng.gen_range(0..=3usize);
        let gen: Vec<f64> = (0..=k).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let truth = Poly::new(gen.clone());
        let m = rng.gen_range(k + 1..k + 40);
        let x0 = rng.gen_range(0.0..100.0);
        let pts: Vec<(f64, f64)> = (0..m).map(|i| x0 + 7.0 * i as f64).map(|x| (x, truth.eval(x))).collect();
        let fit = polyfit(&pts, k).unwrap();
        let s = pts.iter().fold(0.0f64, |a, p| a.max(p.0.abs()));
        assert!(polyfit::scaled_coefficient_error(&fit, &truth, s) <= 1e-9, "{fit:?} vs {truth:?}");
        assert!(normal_residual(&pts, &fit) <= 1e-6);
    }
}

#[test]
fn noisy_fit_matches_exact_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let noise = Normal::new(0.0, 2.0).unwrap();
    for _ in 0..20 {
        let gen = [rng.gen_range(100.0..500.0), rng.gen_range(-0.5..0.5), rng.gen_range(-1e-3..1e-3)];
        let pts: Vec<(f64, f64)> = (0..200)
            .map(|_| {
                let x = rng.gen_range(0.0..480.0);
                (x, gen[0] + gen[1] * x + gen[2] * x * x + noise.sample(&mut rng))
            })
            .collect();
        let fit = polyfit(&pts, 2).unwrap();
        let exact = exact_polyfit(&pts, 2);
        for (a, e) in fit.coeffs().iter().zip(&exact) {
            assert!((a - e).abs() <= 1e-6 * e.abs(), "{a} vs {e}");
        }
        assert!(normal_residual(&pts, &fit) <= 1e-6);
    }
}

#[test]
fn trajectory_fit_matches_exact_normal_equations() {
    let mapping = TrajectoryMapping::<f64>::from_config(&Config::default().lane);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let lane = Poly::new(vec![rng.gen_range(200.0..440.0), rng.gen_range(-0.4..0.4), rng.gen_range(-8e-4..8e-4)]);
        let samples = sample_trajectory(&lane, 480);
        let t = fit_trajectory(&samples, &mapping).unwrap();
        let base: Vec<(f64, f64)> = samples
            .points()
            .iter()
            .map(|&(x, y)| (0.005 * (480.0 - x), 0.005 * (320.0 - y)))
            .collect();
        let exact = exact_polyfit(&base, 3);
        let mag = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, e) in t.coeffs().iter().zip(&exact) {
            assert!((a - e).abs() <= 1e-9 * mag, "{a} vs {e}");
        }
        assert!(normal_residual(&base, &t) <= 1e-6);
    }
}

#[test]
fn lane_pixels_follow_row_major_order() {
    let mut mask = LaneMask::new(4, 3);
    mask.set(2, 0, Label::White);
    mask.set(1, 2, Label::White);
    mask.set(3, 1, Label::Yellow);
    assert_eq!(lane_pixels::<f64>(&mask, LaneColor::White), vec![(0.0, 2.0), (2.0, 1.0)]);
}
