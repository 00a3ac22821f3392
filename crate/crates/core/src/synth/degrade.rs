//! Camera-shake and depth-of-field blur synthesis.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::renderer::{add, generate_ray, mat_mul, mat_vec, normalize, sub, Camera, Mat3, Ray, Vec3};

use super::scene::{render_pixels, render_reference, to_image, AnalyticScene};

/// Pose change from the sharp pose to the end of the exposure, expressed in
/// the camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionBlurSpec {
    pub axis: Vec3,
    /// Radians.
    pub angle: f64,
    pub translation: Vec3,
    /// Number of poses averaged over the exposure.
    pub poses: usize,
}

/// Bounds for drawing per-view motion perturbations.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionRange {
    pub min_angle_deg: f64,
    pub max_angle_deg: f64,
    pub min_translation: f64,
    pub max_translation: f64,
    pub poses: usize,
}

impl Default for MotionRange {
    fn default() -> Self {
        Self {
            min_angle_deg: 1.5,
            max_angle_deg: 3.5,
            min_translation: 0.03,
            max_translation: 0.08,
            poses: 9,
        }
    }
}

impl MotionBlurSpec {
    pub fn none(poses: usize) -> Self {
        Self {
            axis: [0.0, 0.0, 1.0],
            angle: 0.0,
            translation: [0.0; 3],
            poses,
        }
    }

    /// Random axis and direction, magnitudes uniform within `range`.
    pub fn sample(range: &MotionRange, rng: &mut impl Rng) -> Self {
        let axis = random_unit(rng);
        let angle = rng.gen_range(range.min_angle_deg..=range.max_angle_deg).to_radians();
        let dir = random_unit(rng);
        let mag = rng.gen_range(range.min_translation..=range.max_translation);
        Self {
            axis,
            angle,
            translation: dir.map(|v| v * mag),
            poses: range.poses,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.poses < 1 {
            return Err(Error::invalid("motion blur needs at least one pose"));
        }
        if self.angle != 0.0 && !(crate::renderer::norm(self.axis) > 0.0) {
            return Err(Error::invalid("rotation axis must be nonzero"));
        }
        Ok(())
    }

    /// Pose at exposure fraction `s ∈ [0, 1]`: rotation by `s·angle` about
    /// the axis and translation `s·t`, both in the camera frame.
    pub fn pose_at(&self, camera: &Camera, s: f64) -> Camera {
        let rot = mat_mul(&camera.rotation, &axis_angle(self.axis, s * self.angle));
        let shift = mat_vec(&camera.rotation, self.translation.map(|v| v * s));
        camera.with_pose(rot, add(camera.center, shift))
    }

    pub fn exposure_poses(&self, camera: &Camera) -> Vec<Camera> {
        if self.poses == 1 {
            return vec![camera.clone()];
        }
        (0..self.poses)
            .map(|i| self.pose_at(camera, i as f64 / (self.poses - 1) as f64))
            .collect()
    }
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v: Vec3 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = crate::renderer::norm(v);
        if n > 1e-3 && n <= 1.0 {
            return v.map(|c| c / n);
        }
    }
}

/// Rotation matrix for `angle` radians about `axis`.
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    if angle == 0.0 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let [x, y, z] = normalize(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Average of the sharp renders along the exposure path, in linear RGB.
pub fn synth_motion_blur(scene: &AnalyticScene, camera: &Camera, spec: &MotionBlurSpec, steps: usize) -> Result<Image> {
    spec.validate()?;
    if spec.poses == 1 || (spec.angle == 0.0 && spec.translation == [0.0; 3]) {
        return render_reference(scene, camera, steps);
    }
    if steps < 64 {
        return Err(Error::invalid(format!("reference marching needs at least 64 steps, got {steps}")));
    }
    let poses = spec.exposure_poses(camera);
    let pixels = render_pixels(scene, camera.width, camera.height, steps, |x, y| {
        let p = Camera::pixel_center(x, y);
        poses.iter().map(|cam| generate_ray(cam, p)).collect()
    });
    to_image(camera.width, camera.height, pixels)
}

/// Thin-lens settings of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct DefocusBlurSpec {
    /// Lens radius in scene units.
    pub aperture: f64,
    /// Depth of the in-focus plane along the optical axis.
    pub focus_distance: f64,
    pub lens_samples: usize,
    /// Rotation of the lens sample pattern, radians.
    pub pattern_angle: f64,
}

/// Bounds for drawing per-view defocus settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DefocusRange {
    pub aperture: f64,
    pub min_focus: f64,
    pub max_focus: f64,
    pub lens_samples: usize,
}

impl Default for DefocusRange {
    fn default() -> Self {
        Self {
            aperture: 1.2,
            min_focus: 3.0,
            max_focus: 5.0,
            lens_samples: 16,
        }
    }
}

impl DefocusBlurSpec {
    pub fn sample(range: &DefocusRange, rng: &mut impl Rng) -> Self {
        Self {
            aperture: range.aperture,
            focus_distance: rng.gen_range(range.min_focus..=range.max_focus),
            lens_samples: range.lens_samples,
            pattern_angle: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    pub fn validate(&self, scene: &AnalyticScene) -> Result<()> {
        if !(self.aperture >= 0.0) {
            return Err(Error::invalid("aperture must be non-negative"));
        }
        if !(self.focus_distance > scene.near && self.focus_distance < scene.far) {
            return Err(Error::invalid(format!(
                "focus distance {} outside ({}, {})",
                self.focus_distance, scene.near, scene.far
            )));
        }
        if self.lens_samples < 1 {
            return Err(Error::invalid("need at least one lens sample"));
        }
        Ok(())
    }

    /// Sunflower pattern on the lens disk, camera-frame `(x, y)`.
    pub fn lens_points(&self) -> Vec<[f64; 2]> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let n = self.lens_samples as f64;
        (0..self.lens_samples)
            .map(|i| {
                let r = self.aperture * ((i as f64 + 0.5) / n).sqrt();
                let a = self.pattern_angle + i as f64 * golden;
                [r * a.cos(), r * a.sin()]
            })
            .collect()
    }

    /// Rays from each lens point through the focus-plane point of pixel `p`.
    pub fn rays(&self, camera: &Camera, p: [f64; 2], lens: &[[f64; 2]]) -> Vec<Ray> {
        let d = camera.camera_direction(p);
        let focus = d.map(|v| v * self.focus_distance);
        lens.iter()
            .map(|l| {
                let origin = [l[0], l[1], 0.0];
                let dir = normalize(sub(focus, origin));
                Ray {
                    origin: add(camera.center, mat_vec(&camera.rotation, origin)),
                    direction: mat_vec(&camera.rotation, dir),
                }
            })
            .collect()
    }
}

/// Average over the lens samples, in linear RGB.
pub fn synth_defocus_blur(scene: &AnalyticScene, camera: &Camera, spec: &DefocusBlurSpec, steps: usize) -> Result<Image> {
    spec.validate(scene)?;
    if spec.aperture == 0.0 {
        return render_reference(scene, camera, steps);
    }
    if steps < 64 {
        return Err(Error::invalid(format!("reference marching needs at least 64 steps, got {steps}")));
    }
    let lens = spec.lens_points();
    let pixels = render_pixels(scene, camera.width, camera.height, steps, |x, y| {
        spec.rays(camera, Camera::pixel_center(x, y), &lens)
    });
    to_image(camera.width, camera.height, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::Intrinsics;
    use crate::synth::scene::Blob;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn camera(res: usize) -> Camera {
        Camera::look_at([0.0, -4.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], Intrinsics::from_fov(res, res, 40.0)).unwrap()
    }

    fn blobs(seed: u64) -> AnalyticScene {
        AnalyticScene::preset("blobs", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_perturbation_is_bit_exact() {
        let scene = blobs(1);
        let cam = camera(16);
        let sharp = render_reference(&scene, &cam, 128).unwrap();
        let spec = MotionBlurSpec::none(9);
        assert_eq!(synth_motion_blur(&scene, &cam, &spec, 128).unwrap(), sharp);
        // the general path must agree as well
        let poses = spec.exposure_poses(&cam);
        assert!(poses.iter().all(|p| *p == cam));
    }

    #[test]
    fn zero_aperture_is_bit_exact() {
        let scene = blobs(2);
        let cam = camera(16);
        let sharp = render_reference(&scene, &cam, 128).unwrap();
        let spec = DefocusBlurSpec {
            aperture: 0.0,
            focus_distance: 4.0,
            lens_samples: 16,
            pattern_angle: 0.3,
        };
        assert_eq!(synth_defocus_blur(&scene, &cam, &spec, 128).unwrap(), sharp);
    }

    #[test]
    fn constant_scene_stays_constant() {
        let mut scene = AnalyticScene::preset("empty", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        scene.background = [0.3, 0.5, 0.7];
        let cam = camera(8);
        let spec = MotionBlurSpec::sample(&MotionRange::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let img = synth_motion_blur(&scene, &cam, &spec, 64).unwrap();
        assert!(img.pixels().iter().all(|p| *p == [0.3, 0.5, 0.7]));
        let d = DefocusBlurSpec::sample(&DefocusRange::default(), &mut ChaCha8Rng::seed_from_u64(2));
        let img = synth_defocus_blur(&scene, &cam, &d, 64).unwrap();
        assert!(img.pixels().iter().all(|p| *p == [0.3, 0.5, 0.7]));
    }

    #[test]
    fn two_poses_average_their_renders() {
        let scene = blobs(3);
        let cam = camera(12);
        let spec = MotionBlurSpec {
            axis: [0.0, 1.0, 0.0],
            angle: 0.05,
            translation: [0.02, 0.0, 0.0],
            poses: 2,
        };
        let a = render_reference(&scene, &cam, 128).unwrap();
        let b = render_reference(&scene, &spec.pose_at(&cam, 1.0), 128).unwrap();
        let blur = synth_motion_blur(&scene, &cam, &spec, 128).unwrap();
        for ((p, q), r) in a.pixels().iter().zip(b.pixels()).zip(blur.pixels()) {
            for ch in 0..3 {
                assert!((0.5 * (p[ch] + q[ch]) - r[ch]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pose_interpolation_endpoints() {
        let cam = camera(8);
        let spec = MotionBlurSpec::sample(&MotionRange::default(), &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(spec.pose_at(&cam, 0.0), cam);
        let end = spec.pose_at(&cam, 1.0);
        end.validate().unwrap();
        let mid = spec.pose_at(&cam, 0.5);
        // rotation angle between start and middle is half the total
        let rel = mat_mul(&transpose(&cam.rotation), &mid.rotation);
        let trace = rel[0][0] + rel[1][1] + rel[2][2];
        let angle = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        assert!((angle - spec.angle / 2.0).abs() < 1e-9);
    }

    fn transpose(m: &Mat3) -> Mat3 {
        let mut t = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                t[i][j] = m[j][i];
            }
        }
        t
    }

    #[test]
    fn lens_rays_meet_on_focus_plane() {
        let cam = camera(16);
        let spec = DefocusBlurSpec {
            aperture: 0.3,
            focus_distance: 3.5,
            lens_samples: 16,
            pattern_angle: 1.0,
        };
        let lens = spec.lens_points();
        assert!(lens.iter().all(|l| l[0].hypot(l[1]) <= 0.3 + 1e-12));
        let p = [3.5, 11.5];
        let target = add(cam.center, mat_vec(&cam.rotation, cam.camera_direction(p).map(|v| v * 3.5)));
        for r in spec.rays(&cam, p, &lens) {
            let t = crate::renderer::norm(sub(target, r.origin));
            let hit = r.at(t);
            for k in 0..3 {
                assert!((hit[k] - target[k]).abs() < 1e-9);
            }
        }
    }

    fn opaque_wall(depth: f64) -> AnalyticScene {
        // a dense slab of small blobs at one depth, half the view lit
        let mut blobs = Vec::new();
        for i in -12..=0 {
            for j in -12..=12 {
                blobs.push(Blob {
                    center: [i as f64 * 0.1, depth - 4.0, j as f64 * 0.1],
                    scale: 0.08,
                    amplitude: 400.0,
                    albedo: [1.0; 3],
                });
            }
        }
        AnalyticScene::new("wall", blobs, [0.0; 3], 2.0, 6.0).unwrap()
    }

    fn edge_spread(img: &Image) -> usize {
        let row = img.height() / 2;
        (0..img.width())
            .filter(|&x| {
                let v = img.get(x, row)[0];
                v > 0.05 && v < 0.95
            })
            .count()
    }

    #[test]
    fn in_focus_surface_stays_sharp_and_blur_grows_with_aperture() {
        let cam = camera(32);
        let scene = opaque_wall(3.0);
        let spec = |aperture, focus| DefocusBlurSpec {
            aperture,
            focus_distance: focus,
            lens_samples: 32,
            pattern_angle: 0.0,
        };
        let sharp = render_reference(&scene, &cam, 128).unwrap();
        let focused = synth_defocus_blur(&scene, &cam, &spec(0.3, 3.0), 128).unwrap();
        let small = synth_defocus_blur(&scene, &cam, &spec(0.1, 5.0), 128).unwrap();
        let large = synth_defocus_blur(&scene, &cam, &spec(0.4, 5.0), 128).unwrap();
        assert!(edge_spread(&focused) <= edge_spread(&sharp) + 1);
        assert!(edge_spread(&large) > edge_spread(&small));
    }
}
