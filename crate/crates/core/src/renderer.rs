//! Pinhole ray generation and differentiable volume rendering.
//!
//! Pixel centers sit at integer + 0.5. Camera space is x right, y down,
//! z forward; `rotation` maps camera space to world space.

use rand::Rng;

use crate::autodiff::{AutodiffError, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{FieldVars, RadianceFieldParams};
use crate::image::Image;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub(crate) fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub(crate) fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn normalize(v: Vec3) -> Vec3 {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Pinhole camera with a camera-to-world pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Mat3,
    pub center: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Centered principal point and a horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

impl Camera {
    pub fn new(rotation: Mat3, center: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let cam = Self {
            rotation,
            center,
            fx: intrinsics.fx,
            fy: intrinsics.fy,
            cx: intrinsics.cx,
            cy: intrinsics.cy,
            width: intrinsics.width,
            height: intrinsics.height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `center` looking at `target`, with `up` giving the world
    /// up direction.
    pub fn look_at(center: Vec3, target: Vec3, up: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let forward = normalize(sub(target, center));
        let right = normalize(cross(forward, up));
        let down = cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Self::new(rotation, center, intrinsics)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }

    pub fn with_pose(&self, rotation: Mat3, center: Vec3) -> Self {
        Self {
            rotation,
            center,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| self.rotation[k][i] * self.rotation[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-5 {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("principal point must lie inside the image"));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("camera center must be finite"));
        }
        Ok(())
    }

    /// Unnormalized camera-space direction through pixel coordinate `p`.
    pub fn camera_direction(&self, p: [f64; 2]) -> Vec3 {
        [(p[0] - self.cx) / self.fx, (p[1] - self.cy) / self.fy, 1.0]
    }

    pub fn pixel_center(x: usize, y: usize) -> [f64; 2] {
        [x as f64 + 0.5, y as f64 + 0.5]
    }

    /// `p` mapped to `[-1, 1]²` by the image dimensions.
    pub fn normalized_pixel(&self, p: [f64; 2]) -> [f64; 2] {
        [
            2.0 * p[0] / self.width as f64 - 1.0,
            2.0 * p[1] / self.height as f64 - 1.0,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// Ray from the camera center through continuous pixel coordinate `p`.
/// Coordinates outside the image are allowed.
pub fn generate_ray(camera: &Camera, p: [f64; 2]) -> Ray {
    Ray {
        origin: camera.center,
        direction: normalize(mat_vec(&camera.rotation, camera.camera_direction(p))),
    }
}

/// Sorted sample distances along a ray together with the bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub t: Vec<f64>,
    pub near: f64,
    pub far: f64,
}

impl SampleSet {
    /// `t[i+1] − t[i]`, with the last interval closed against `far`.
    pub fn deltas(&self) -> Vec<f64> {
        let n = self.t.len();
        (0..n)
            .map(|i| if i + 1 < n { self.t[i + 1] } else { self.far } - self.t[i])
            .collect()
    }
}

/// Splits `[near, far]` into `count` equal bins and takes the midpoint of
/// each (deterministic) or one uniform draw per bin (stratified).
pub fn sample_along_ray(
    near: f64,
    far: f64,
    count: usize,
    stratified: bool,
    rng: &mut impl Rng,
) -> Result<SampleSet> {
    if !(near > 0.0 && near < far) {
        return Err(Error::invalid(format!("need 0 < near < far, got {near}, {far}")));
    }
    if count == 0 {
        return Err(Error::invalid("need at least one sample per ray"));
    }
    let step = (far - near) / count as f64;
    let t = (0..count)
        .map(|i| {
            let lo = near + i as f64 * step;
            let u = if stratified { rng.gen::<f64>() } else { 0.5 };
            lo + u * step
        })
        .collect();
    Ok(SampleSet { t, near, far })
}

/// Volume rendering of one ray from per-sample linear colors and densities.
pub fn composite(colors: &[[f64; 3]], sigmas: &[f64], samples: &SampleSet) -> Result<[f64; 3]> {
    if colors.len() != sigmas.len() || sigmas.len() != samples.t.len() {
        return Err(Error::invalid("colors, densities and samples must have equal length"));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid(format!("negative or invalid density {s}")));
    }
    let d = sigmas.len();
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::from_slice([1, d], sigmas)?);
    let flat: Vec<f64> = colors.iter().flatten().copied().collect();
    let c = tape.constant(Tensor::new([1, d, 3], flat)?);
    let out = tape.composite(s, c, samples.deltas())?;
    let o = tape.data(out);
    Ok([o[0], o[1], o[2]])
}

/// Samples of a batch of rays, laid out as `[R, D]`.
#[derive(Clone, Debug)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
    pub per_ray: usize,
}

impl RaySamples {
    pub fn new(sets: &[SampleSet]) -> Self {
        let per_ray = sets.first().map_or(0, |s| s.t.len());
        let mut t = Vec::with_capacity(sets.len() * per_ray);
        let mut deltas = Vec::with_capacity(sets.len() * per_ray);
        for s in sets {
            debug_assert_eq!(s.t.len(), per_ray);
            t.extend_from_slice(&s.t);
            deltas.extend(s.deltas());
        }
        Self { t, deltas, per_ray }
    }

    /// Same sample set for `rays` rays.
    pub fn repeat(set: &SampleSet, rays: usize) -> Self {
        Self::new(&vec![set.clone(); rays])
    }

    pub fn rays(&self) -> usize {
        if self.per_ray == 0 {
            0
        } else {
            self.t.len() / self.per_ray
        }
    }
}

/// Renders rays with `origins: [R, 3]` and unit `dirs: [R, 3]` on the tape,
/// returning linear colors `[R, 3]`.
pub fn render_rays<T: Real>(
    tape: &mut Tape<T>,
    field: &FieldVars,
    origins: Var,
    dirs: Var,
    samples: &RaySamples,
) -> Result<Var, AutodiffError> {
    let r = tape.shape(dirs)[0];
    let d = samples.per_ray;
    let o = tape.reshape(origins, &[r, 1, 3])?;
    let dv = tape.reshape(dirs, &[r, 1, 3])?;
    let t = tape.constant(Tensor::new([r, d, 1], samples.t.iter().map(|&v| T::lit(v)).collect())?);
    let offs = tape.mul(t, dv)?;
    let pts = tape.add(o, offs)?;
    let pts = tape.reshape(pts, &[r * d, 3])?;
    let out = field.forward(tape, pts, dirs, d)?;
    tape.composite(out.sigma, out.rgb, samples.deltas.iter().map(|&v| T::lit(v)).collect())
}

pub(crate) fn rays_to_tensors<T: Real>(rays: &[Ray]) -> (Tensor<T>, Tensor<T>) {
    let o = rays.iter().flat_map(|r| r.origin).map(T::lit).collect();
    let d = rays.iter().flat_map(|r| r.direction).map(T::lit).collect();
    (
        Tensor::new([rays.len(), 3], o).expect("shape"),
        Tensor::new([rays.len(), 3], d).expect("shape"),
    )
}

/// Linear RGB of a single ray through the field.
pub fn render_ray(
    params: &RadianceFieldParams,
    ray: &Ray,
    near: f64,
    far: f64,
    count: usize,
    stratified: bool,
    rng: &mut impl Rng,
) -> Result<[f32; 3]> {
    let samples = sample_along_ray(near, far, count, stratified, rng)?;
    let mut tape = Tape::<f32>::new();
    let field = params.bind(&mut tape, false);
    let (o, d) = rays_to_tensors::<f32>(std::slice::from_ref(ray));
    let o = tape.constant(o);
    let d = tape.constant(d);
    let c = render_rays(&mut tape, &field, o, d, &RaySamples::new(&[samples]))?;
    let c = tape.data(c);
    Ok([c[0], c[1], c[2]])
}

/// Sharp linear-space image through the pinhole camera, using bin-midpoint
/// samples. The blur kernel plays no part here.
pub fn render_image(
    params: &RadianceFieldParams,
    camera: &Camera,
    near: f64,
    far: f64,
    count: usize,
) -> Result<Image> {
    const CHUNK: usize = 1024;
    let set = sample_along_ray(near, far, count, false, &mut rand::rngs::mock::StepRng::new(0, 0))?;
    let rays: Vec<Ray> = (0..camera.height)
        .flat_map(|y| (0..camera.width).map(move |x| (x, y)))
        .map(|(x, y)| generate_ray(camera, Camera::pixel_center(x, y)))
        .collect();
    let mut pixels = Vec::with_capacity(rays.len());
    for chunk in rays.chunks(CHUNK) {
        let mut tape = Tape::<f32>::new();
        let field = params.bind(&mut tape, false);
        let (o, d) = rays_to_tensors::<f32>(chunk);
        let o = tape.constant(o);
        let d = tape.constant(d);
        let c = render_rays(&mut tape, &field, o, d, &RaySamples::repeat(&set, chunk.len()))?;
        pixels.extend(tape.data(c).chunks(3).map(|c| [c[0], c[1], c[2]]));
    }
    Image::from_pixels(camera.width, camera.height, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    fn camera() -> Camera {
        Camera::new(IDENTITY, [0.0; 3], Intrinsics::from_fov(64, 48, 50.0)).unwrap()
    }

    #[test]
    fn principal_axis() {
        let cam = camera();
        let r = generate_ray(&cam, [cam.cx, cam.cy]);
        assert_eq!(r.direction, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn one_focal_length_offset_is_45_degrees() {
        let cam = camera();
        let r = generate_ray(&cam, [cam.cx + cam.fx, cam.cy]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r.direction[0] - h).abs() < 1e-12 && (r.direction[2] - h).abs() < 1e-12);
    }

    #[test]
    fn directions_are_unit() {
        let cam = Camera::look_at([3.0, 1.0, 2.0], [0.0; 3], [0.0, 0.0, 1.0], Intrinsics::from_fov(64, 64, 40.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = [rng.gen_range(-10.0..74.0), rng.gen_range(-10.0..74.0)];
            let r = generate_ray(&cam, p);
            assert!((norm(r.direction) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn look_at_points_forward() {
        let cam = Camera::look_at([0.0, -4.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], Intrinsics::from_fov(32, 32, 40.0)).unwrap();
        let r = generate_ray(&cam, [16.0, 16.0]);
        assert!((r.direction[1] - 1.0).abs() < 1e-12);
        // image y grows downward
        let below = generate_ray(&cam, [16.0, 30.0]);
        assert!(below.direction[2] < 0.0);
    }

    #[test]
    fn camera_validation() {
        let mut bad = IDENTITY;
        bad[0][0] = 2.0;
        assert!(Camera::new(bad, [0.0; 3], Intrinsics::from_fov(8, 8, 40.0)).is_err());
        let mut i = Intrinsics::from_fov(8, 8, 40.0);
        i.cx = 9.0;
        assert!(Camera::new(IDENTITY, [0.0; 3], i).is_err());
    }

    #[test]
    fn midpoint_samples() {
        let s = sample_along_ray(1e-9, 4.0, 4, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (a, b) in s.t.iter().zip([0.5, 1.5, 2.5, 3.5]) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(sample_along_ray(2.0, 2.0, 4, false, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn stratified_samples_stay_in_bins_and_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let s = sample_along_ray(2.0, 6.0, 16, true, &mut rng).unwrap();
            let step = 4.0 / 16.0;
            for (i, &t) in s.t.iter().enumerate() {
                assert!(t >= 2.0 + i as f64 * step && t <= 2.0 + (i + 1) as f64 * step);
            }
            assert!(s.t.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn composite_examples() {
        let s = SampleSet { t: vec![0.0, 1.0], near: 0.0, far: 2.0 };
        assert_eq!(composite(&[[1.0; 3], [0.2; 3]], &[0.0, 0.0], &s).unwrap(), [0.0; 3]);

        let one = SampleSet { t: vec![1.0], near: 0.5, far: 2.0 };
        let c = composite(&[[1.0, 0.0, 0.0]], &[1.0], &one).unwrap();
        assert!((c[0] - 0.63212).abs() < 1e-5 && c[1] == 0.0 && c[2] == 0.0);

        let opaque = SampleSet { t: vec![1.0, 2.0, 3.0], near: 0.5, far: 4.0 };
        let c = composite(&[[0.3, 0.6, 0.9], [1.0; 3], [1.0; 3]], &[50.0, 7.0, 9.0], &opaque).unwrap();
        for (a, b) in c.iter().zip([0.3, 0.6, 0.9]) {
            assert!((a - b).abs() < 1e-6);
        }

        assert!(composite(&[[0.0; 3]], &[-1.0], &one).is_err());
    }

    #[test]
    fn zero_field_render_has_closed_form() {
        let params = RadianceFieldParams::zeros(FieldConfig::default()).unwrap();
        let cam = camera();
        let ray = generate_ray(&cam, [10.0, 20.0]);
        let c = render_ray(&params, &ray, 2.0, 6.0, 48, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // σ = ln 2 everywhere, so Σ T·α = 1 − 2^−(far − t₁) with t₁ the
        // first bin midpoint
        let t1 = 2.0 + 4.0 / 96.0;
        let expect = 0.5 * (1.0 - 2f64.powf(-(6.0 - t1)));
        for ch in c {
            assert!((ch as f64 - expect).abs() < 1e-6, "{ch} vs {expect}");
        }
    }

    #[test]
    fn render_equals_composite_of_field_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = RadianceFieldParams::init(FieldConfig::default(), &mut rng).unwrap();
        let cam = camera();
        let ray = generate_ray(&cam, [30.0, 10.0]);
        let samples = sample_along_ray(2.0, 6.0, 8, false, &mut rng).unwrap();
        let mut colors = Vec::new();
        let mut sigmas = Vec::new();
        for &t in &samples.t {
            let x = ray.at(t).map(|v| v as f32);
            let (c, s) = crate::field::eval_field(&params, x, ray.direction.map(|v| v as f32)).unwrap();
            colors.push(c.map(|v| v as f64));
            sigmas.push(s as f64);
        }
        let expect = composite(&colors, &sigmas, &samples).unwrap();
        let got = render_ray(&params, &ray, 2.0, 6.0, 8, false, &mut rng).unwrap();
        for (a, b) in got.iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }
}
