//! Analytic Gaussian-blob scenes and the dense-marching reference renderer.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::renderer::{generate_ray, Camera, Ray, Vec3};

/// Isotropic Gaussian density bump with a constant albedo.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: Vec3,
    pub scale: f64,
    pub amplitude: f64,
    pub albedo: [f64; 3],
}

/// Sum-of-Gaussians density field. The color at a point is the
/// density-weighted mix of the blob albedos.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticScene {
    pub name: String,
    pub blobs: Vec<Blob>,
    pub background: [f64; 3],
    pub near: f64,
    pub far: f64,
}

/// Blobs farther than this many scales from a ray are skipped.
const CUTOFF_SCALES: f64 = 6.0;

pub const SCENE_NAMES: [&str; 3] = ["blobs", "single", "empty"];

impl AnalyticScene {
    pub fn new(name: impl Into<String>, blobs: Vec<Blob>, background: [f64; 3], near: f64, far: f64) -> Result<Self> {
        let scene = Self {
            name: name.into(),
            blobs,
            background,
            near,
            far,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::invalid(format!("bad scene bounds {}..{}", self.near, self.far)));
        }
        for b in &self.blobs {
            let finite = b.center.iter().chain(&b.albedo).all(|v| v.is_finite());
            if !(b.scale > 0.0 && b.amplitude >= 0.0 && b.amplitude.is_finite() && finite) {
                return Err(Error::invalid(format!("bad blob {b:?}")));
            }
        }
        Ok(())
    }

    /// Built-in scene by name. `blobs` draws its layout from `rng`.
    pub fn preset(name: &str, rng: &mut impl Rng) -> Result<Self> {
        let (near, far) = (2.0, 6.0);
        let blobs = match name {
            "blobs" => {
                let count = rng.gen_range(8..=12);
                (0..count)
                    .map(|_| {
                        let center = loop {
                            let c: Vec3 = [
                                rng.gen_range(-1.0..1.0),
                                rng.gen_range(-1.0..1.0),
                                rng.gen_range(-1.0..1.0),
                            ];
                            if c.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                                break c.map(|v| v * 0.9);
                            }
                        };
                        Blob {
                            center,
                            scale: rng.gen_range(0.15..0.35),
                            amplitude: rng.gen_range(30.0..50.0),
                            albedo: [
                                rng.gen_range(0.05..0.95),
                                rng.gen_range(0.05..0.95),
                                rng.gen_range(0.05..0.95),
                            ],
                        }
                    })
                    .collect()
            }
            "single" => vec![Blob {
                center: [0.0; 3],
                scale: 0.5,
                amplitude: 200.0,
                albedo: [0.8, 0.3, 0.1],
            }],
            "empty" => Vec::new(),
            other => {
                return Err(Error::invalid(format!(
                    "unknown scene {other:?}, expected one of {SCENE_NAMES:?}"
                )))
            }
        };
        Self::new(name, blobs, [0.0; 3], near, far)
    }

    pub fn density(&self, x: Vec3) -> f64 {
        self.blobs.iter().map(|b| blob_density(b, x)).sum()
    }

    /// Density and color at `x`.
    pub fn sample(&self, x: Vec3) -> (f64, [f64; 3]) {
        sample_blobs(self.blobs.iter(), x)
    }

    /// Linear radiance of one ray by uniform midpoint marching over
    /// `[near, far]` with `steps` bins.
    pub fn trace(&self, ray: &Ray, steps: usize) -> [f64; 3] {
        let dt = (self.far - self.near) / steps as f64;
        let mut active = Vec::new();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for b in &self.blobs {
            let rel = [
                b.center[0] - ray.origin[0],
                b.center[1] - ray.origin[1],
                b.center[2] - ray.origin[2],
            ];
            let tc = rel[0] * ray.direction[0] + rel[1] * ray.direction[1] + rel[2] * ray.direction[2];
            let d2 = rel.iter().map(|v| v * v).sum::<f64>() - tc * tc;
            let reach = CUTOFF_SCALES * b.scale;
            if d2 <= reach * reach {
                active.push(b);
                lo = lo.min(tc - reach);
                hi = hi.max(tc + reach);
            }
        }
        let mut color = [0.0; 3];
        let mut trans = 1.0;
        if !active.is_empty() {
            let first = ((lo - self.near) / dt).floor().max(0.0) as usize;
            let last = (((hi - self.near) / dt).ceil().max(0.0) as usize).min(steps);
            for i in first..last {
                let t = self.near + (i as f64 + 0.5) * dt;
                let (sigma, c) = sample_blobs(active.iter().copied(), ray.at(t));
                let alpha = 1.0 - (-sigma * dt).exp();
                for ch in 0..3 {
                    color[ch] += trans * alpha * c[ch];
                }
                trans *= 1.0 - alpha;
            }
        }
        for ch in 0..3 {
            color[ch] += trans * self.background[ch];
        }
        color
    }
}

fn blob_density(b: &Blob, x: Vec3) -> f64 {
    let d2: f64 = (0..3).map(|k| (x[k] - b.center[k]).powi(2)).sum();
    b.amplitude * (-d2 / (2.0 * b.scale * b.scale)).exp()
}

fn sample_blobs<'a>(blobs: impl Iterator<Item = &'a Blob>, x: Vec3) -> (f64, [f64; 3]) {
    let mut sigma = 0.0;
    let mut mix = [0.0; 3];
    for b in blobs {
        let s = blob_density(b, x);
        sigma += s;
        for ch in 0..3 {
            mix[ch] += s * b.albedo[ch];
        }
    }
    if sigma > 0.0 {
        (sigma, mix.map(|v| v / sigma))
    } else {
        (0.0, [0.0; 3])
    }
}

/// Renders `rays_for(x, y)` for every pixel and averages each pixel's rays
/// in linear space. `rays_for` must return at least one ray.
pub(crate) fn render_pixels<F>(scene: &AnalyticScene, width: usize, height: usize, steps: usize, rays_for: F) -> Vec<[f64; 3]>
where
    F: Fn(usize, usize) -> Vec<Ray> + Sync,
{
    (0..width * height)
        .into_par_iter()
        .map(|i| {
            let rays = rays_for(i % width, i / width);
            let colors: Vec<[f64; 3]> = rays.iter().map(|r| scene.trace(r, steps)).collect();
            average(&colors)
        })
        .collect()
}

/// Mean computed as `x₀ + Σ(xᵢ − x₀)/M`, exact when all inputs agree.
pub(crate) fn average(colors: &[[f64; 3]]) -> [f64; 3] {
    let x0 = colors[0];
    let m = colors.len() as f64;
    let mut out = x0;
    for ch in 0..3 {
        let dev: f64 = colors[1..].iter().map(|c| c[ch] - x0[ch]).sum();
        out[ch] += dev / m;
    }
    out
}

pub(crate) fn to_image(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Image> {
    Image::from_pixels(width, height, pixels.into_iter().map(|p| p.map(|v| v as f32)).collect())
}

/// Sharp linear image of `scene` through the pinhole `camera`.
pub fn render_reference(scene: &AnalyticScene, camera: &Camera, steps: usize) -> Result<Image> {
    if steps < 64 {
        return Err(Error::invalid(format!("reference marching needs at least 64 steps, got {steps}")));
    }
    let pixels = render_pixels(scene, camera.width, camera.height, steps, |x, y| {
        vec![generate_ray(camera, Camera::pixel_center(x, y))]
    });
    to_image(camera.width, camera.height, pixels)
}
