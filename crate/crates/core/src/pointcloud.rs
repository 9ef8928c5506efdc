//! Depth panorama lifting and Fibonacci-lattice downsampling.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pano_geom::{dir_to_pixel, EquirectRaster, SphericalDir};
use crate::{Error, Result, Vec3};

/// Default Fibonacci sample count for dense depth input.
pub const DEFAULT_FIB_SAMPLES: usize = 50_000;

/// Gravity-aligned point cloud with the camera at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Flat pixel index (`row * width + col`) each point was lifted from.
    pub source_pixels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            source_pixels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[inline]
fn is_valid_depth(d: f64) -> bool {
    d > 0.0 && d.is_finite()
}

fn require_depth(depth: &EquirectRaster) -> Result<()> {
    if depth.channels != 1 {
        return Err(Error::Shape(format!(
            "depth raster must have 1 channel, got {}",
            depth.channels
        )));
    }
    Ok(())
}

fn lift(depth: &EquirectRaster, col: usize, row: usize) -> Option<Vec3> {
    let d = depth.at(col, row, 0);
    is_valid_depth(d).then(|| depth.pixel_center_dir(col, row).unit_vector() * d)
}

/// Lift every valid pixel along its center ray; zero-depth pixels are skipped.
pub fn depth_to_pointcloud(depth: &EquirectRaster) -> Result<PointCloud> {
    require_depth(depth)?;
    let mut points = Vec::new();
    let mut source = Vec::new();
    for row in 0..depth.height {
        for col in 0..depth.width {
            if let Some(p) = lift(depth, col, row) {
                points.push(p);
                source.push(row * depth.width + col);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(PointCloud {
        points,
        source_pixels: Some(source),
    })
}

/// Golden-angle lattice: `y_i = 1 - 2(i + 0.5)/n`, azimuth `2 pi i (1 - 1/golden)`.
pub fn fibonacci_directions(n: usize) -> Vec<Vec3> {
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let step = std::f64::consts::TAU * (1.0 - 1.0 / golden);
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let az = (step * i as f64).rem_euclid(std::f64::consts::TAU);
            Vec3::new(r * az.sin(), y, r * az.cos())
        })
        .collect()
}

/// Sample the depth panorama along `n_samples` lattice directions.
///
/// Each direction picks its nearest pixel and the point is lifted along that
/// pixel's center ray, so every output point is also produced by
/// [`depth_to_pointcloud`]. Directions landing on invalid pixels are dropped.
pub fn fibonacci_sample(depth: &EquirectRaster, n_samples: usize) -> Result<PointCloud> {
    require_depth(depth)?;
    if n_samples == 0 {
        return Err(Error::Domain("n_samples must be >= 1".into()));
    }
    let mut points = Vec::with_capacity(n_samples);
    let mut source = Vec::with_capacity(n_samples);
    for dir in fibonacci_directions(n_samples) {
        let (u, v) = dir_to_pixel(SphericalDir::from_vector(&dir), depth.width, depth.height);
        let col = (u.floor() as usize).min(depth.width - 1);
        let row = (v.floor() as usize).min(depth.height - 1);
        if let Some(p) = lift(depth, col, row) {
            points.push(p);
            source.push(row * depth.width + col);
        }
    }
    Ok(PointCloud {
        points,
        source_pixels: Some(source),
    })
}

/// Resize a cloud to exactly `target_n` points.
///
/// Larger clouds are subsampled without replacement. Smaller clouds keep every
/// point once and fill the remainder by sampling with replacement.
pub fn normalize_cloud(cloud: &PointCloud, target_n: usize, seed: u64) -> Result<PointCloud> {
    let n = cloud.len();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let picks: Vec<usize> = if n == target_n {
        (0..n).collect()
    } else if n > target_n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, n, target_n).into_vec();
        idx.sort_unstable();
        idx
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.extend((n..target_n).map(|_| rng.gen_range(0..n)));
        idx
    };
    Ok(PointCloud {
        points: picks.iter().map(|&i| cloud.points[i]).collect(),
        source_pixels: cloud
            .source_pixels
            .as_ref()
            .map(|s| picks.iter().map(|&i| s[i]).collect()),
    })
}
