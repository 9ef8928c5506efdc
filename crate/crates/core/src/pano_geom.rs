//! Equirectangular projection geometry.
//!
//! Conventions: y is the gravity (up) axis, azimuth `theta` is measured from +z
//! toward +x, elevation `phi` is positive above the horizon. Column coordinate
//! `u` maps linearly to `theta` with `theta = 0` at the image center; row
//! coordinate `v` maps linearly to `phi` with the zenith at the top row.
//! Pixel centers sit at half-integer coordinates.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::{Error, Result, Vec3};

/// A direction on the unit sphere in azimuth/elevation form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalDir {
    pub theta: f64,
    pub phi: f64,
}

impl SphericalDir {
    pub fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }

    /// `(cos(phi) sin(theta), sin(phi), cos(phi) cos(theta))`.
    pub fn unit_vector(&self) -> Vec3 {
        dir_to_unit_vector(*self)
    }

    /// Inverse of [`SphericalDir::unit_vector`] for any non-zero vector.
    pub fn from_vector(v: &Vec3) -> Self {
        let r = v.norm();
        let phi = (v.y / r).clamp(-1.0, 1.0).asin();
        let theta = v.x.atan2(v.z);
        Self { theta, phi }
    }
}

pub fn dir_to_unit_vector(d: SphericalDir) -> Vec3 {
    let (st, ct) = d.theta.sin_cos();
    let (sp, cp) = d.phi.sin_cos();
    if sp.abs() == 1.0 {
        return Vec3::new(0.0, sp, 0.0);
    }
    Vec3::new(cp * st, sp, cp * ct)
}

/// Continuous pixel coordinates (column + 0.5, row + 0.5) to a direction.
pub fn pixel_to_dir(u: f64, v: f64, width: usize, height: usize) -> Result<SphericalDir> {
    let (w, h) = (width as f64, height as f64);
    if !(0.0..w).contains(&u) || !(0.0..h).contains(&v) {
        return Err(Error::Domain(format!(
            "pixel ({u}, {v}) outside {width}x{height} raster"
        )));
    }
    Ok(SphericalDir {
        theta: TAU * (u / w) - PI,
        phi: FRAC_PI_2 - PI * (v / h),
    })
}

/// Direction to continuous pixel coordinates; `u` wraps into `[0, width)`.
pub fn dir_to_pixel(d: SphericalDir, width: usize, height: usize) -> (f64, f64) {
    let (w, h) = (width as f64, height as f64);
    let mut u = (d.theta + PI) / TAU * w;
    if !(0.0..w).contains(&u) {
        u = u.rem_euclid(w);
        // rem_euclid can round up to w itself
        if u >= w {
            u = 0.0;
        }
    }
    let v = ((FRAC_PI_2 - d.phi) / PI * h).clamp(0.0, h);
    (u, v)
}

/// Row-major panoramic raster covering the full sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct EquirectRaster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl EquirectRaster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width < 2 || width % 2 != 0 {
            return Err(Error::Shape(format!("width {width} must be even and >= 2")));
        }
        if height * 2 != width {
            return Err(Error::Shape(format!(
                "height {height} must equal width/2 for width {width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, channels: usize, value: f64) -> Result<Self> {
        let height = width / 2;
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Build a raster by evaluating `f(column, row)` per pixel.
    pub fn from_fn(
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let height = width / 2;
        let mut data = Vec::with_capacity(width * height * channels);
        for row in 0..height {
            for col in 0..width {
                let px = f(col, row);
                if px.len() != channels {
                    return Err(Error::Shape("pixel channel count mismatch".into()));
                }
                data.extend_from_slice(&px);
            }
        }
        Self::new(width, height, channels, data)
    }

    #[inline]
    pub fn at(&self, col: usize, row: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Direction through the center of pixel `(col, row)`.
    pub fn pixel_center_dir(&self, col: usize, row: usize) -> SphericalDir {
        let (w, h) = (self.width as f64, self.height as f64);
        SphericalDir {
            theta: TAU * ((col as f64 + 0.5) / w) - PI,
            phi: FRAC_PI_2 - PI * ((row as f64 + 0.5) / h),
        }
    }

    /// Bilinear sample at continuous coordinates, wrapping in `u` and clamping in `v`.
    pub fn sample_bilinear(&self, u: f64, v: f64, out: &mut [f64]) {
        let w = self.width as isize;
        let x = u - 0.5;
        let y = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor();
        let fx = x - x0;
        let y0 = y.floor();
        let fy = y - y0;
        let c0 = (x0 as isize).rem_euclid(w) as usize;
        let c1 = (x0 as isize + 1).rem_euclid(w) as usize;
        let r0 = y0 as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        for (ch, o) in out.iter_mut().enumerate().take(self.channels) {
            let a = self.at(c0, r0, ch);
            let b = self.at(c1, r0, ch);
            let c = self.at(c0, r1, ch);
            let d = self.at(c1, r1, ch);
            let top = a + (b - a) * fx;
            let bot = c + (d - c) * fx;
            *o = top + (bot - top) * fy;
        }
    }

    /// Roll columns so that new column `c` holds old column `c - k`.
    pub fn shift_columns(&self, k: isize) -> Self {
        let w = self.width as isize;
        let mut data = vec![0.0; self.data.len()];
        for row in 0..self.height {
            for col in 0..self.width {
                let src = (col as isize - k).rem_euclid(w) as usize;
                let dst = (row * self.width + col) * self.channels;
                let s = (row * self.width + src) * self.channels;
                data[dst..dst + self.channels].copy_from_slice(&self.data[s..s + self.channels]);
            }
        }
        Self {
            data,
            ..self.clone()
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            data: self.data.iter().map(|x| x * c).collect(),
            ..self.clone()
        }
    }
}

/// Pinhole view parameters for perspective extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerspectiveView {
    pub fov: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub width: usize,
    pub height: usize,
}

impl PerspectiveView {
    pub fn new(fov: f64, yaw: f64, pitch: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov > 0.0 && fov < PI) {
            return Err(Error::Domain(format!("fov {fov} outside (0, pi)")));
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&pitch) || !yaw.is_finite() {
            return Err(Error::Domain(format!("invalid view angles yaw={yaw} pitch={pitch}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Domain("empty view".into()));
        }
        Ok(Self {
            fov,
            yaw,
            pitch,
            width,
            height,
        })
    }

    pub fn ceiling(fov: f64, size: usize) -> Result<Self> {
        Self::new(fov, 0.0, FRAC_PI_2, size, size)
    }

    pub fn floor(fov: f64, size: usize) -> Result<Self> {
        Self::new(fov, 0.0, -FRAC_PI_2, size, size)
    }

    pub fn focal_length(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.fov / 2.0).tan()
    }

    /// World ray through the center of output pixel `(i, j)`.
    pub fn ray(&self, i: usize, j: usize) -> Vec3 {
        let f = self.focal_length();
        let xc = (i as f64 + 0.5 - self.width as f64 / 2.0) / f;
        let yc = -(j as f64 + 0.5 - self.height as f64 / 2.0) / f;
        // pitch about +x, then yaw about +y
        let (sp, cp) = self.pitch.sin_cos();
        let y1 = yc * cp + sp;
        let z1 = -yc * sp + cp;
        let (sy, cy) = self.yaw.sin_cos();
        Vec3::new(xc * cy + z1 * sy, y1, -xc * sy + z1 * cy)
    }
}

/// Per-pixel equirectangular sampling coordinates for a perspective view.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<[f64; 2]>,
}

/// A non-panoramic raster (output of E2P).
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl PerspectiveImage {
    pub fn at(&self, i: usize, j: usize, channel: usize) -> f64 {
        self.data[(j * self.width + i) * self.channels + channel]
    }
}

pub fn e2p_grid(view: &PerspectiveView, src_width: usize, src_height: usize) -> SamplingGrid {
    let mut coords = Vec::with_capacity(view.width * view.height);
    for j in 0..view.height {
        for i in 0..view.width {
            let dir = SphericalDir::from_vector(&view.ray(i, j));
            let (u, v) = dir_to_pixel(dir, src_width, src_height);
            coords.push([u, v]);
        }
    }
    SamplingGrid {
        width: view.width,
        height: view.height,
        coords,
    }
}

pub fn sample(src: &EquirectRaster, grid: &SamplingGrid) -> PerspectiveImage {
    let c = src.channels;
    let mut data = vec![0.0; grid.coords.len() * c];
    for (k, [u, v]) in grid.coords.iter().enumerate() {
        src.sample_bilinear(*u, *v, &mut data[k * c..(k + 1) * c]);
    }
    PerspectiveImage {
        width: grid.width,
        height: grid.height,
        channels: c,
        data,
    }
}

/// Extract a pinhole view from a panorama by bilinear resampling.
pub fn e2p_project(src: &EquirectRaster, view: &PerspectiveView) -> PerspectiveImage {
    sample(src, &e2p_grid(view, src.width, src.height))
}
