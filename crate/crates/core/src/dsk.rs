//! Deformable sparse kernel: a view-conditioned MLP that turns each target
//! pixel into `N` weighted rays with shifted pixels and origins.
//!
//! Kernel point `i` of pixel `p` traces the pixel `p + Δq_i`. The canonical
//! locations `q′_i` only enter the MLP as a per-point code, so a zero output
//! head collapses every kernel ray onto the base ray.

use rand::Rng;

use crate::autodiff::{AutodiffError, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{bind_tensor, BoundLinear, Linear, Parameters};
use crate::renderer::{generate_ray, mat_vec, Camera, Ray};

/// Per-point head outputs: `Δo` (3), `Δq` (2), raw weight (1).
pub const HEAD_OUTPUTS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct DskConfig {
    pub kernel_points: usize,
    pub embed_dim: usize,
    pub width: usize,
    pub hidden_layers: usize,
    /// Gain applied to every raw head output.
    pub gain: f64,
    /// Radius of the canonical point disk, pixels.
    pub r_init: f64,
    /// Pixel offset for a unit gained output.
    pub r_deform: f64,
    /// Origin offset in scene units for a unit gained output.
    pub o_scale: f64,
}

impl Default for DskConfig {
    fn default() -> Self {
        Self {
            kernel_points: 5,
            embed_dim: 32,
            width: 64,
            hidden_layers: 4,
            gain: 0.1,
            r_init: 2.0,
            r_deform: 4.0,
            o_scale: 0.02,
        }
    }
}

impl DskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_points < 1 {
            return Err(Error::invalid("kernel needs at least one point"));
        }
        if self.hidden_layers < 1 || self.width < 1 || self.embed_dim < 1 {
            return Err(Error::invalid("kernel MLP needs non-empty layers and embeddings"));
        }
        for (name, v) in [
            ("gain", self.gain),
            ("r_init", self.r_init),
            ("r_deform", self.r_deform),
            ("o_scale", self.o_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        4 + self.embed_dim
    }
}

/// Canonical kernel locations relative to the target pixel, in pixels.
/// Point 0 is the anchor at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalKernel {
    pub points: Vec<[f64; 2]>,
}

impl CanonicalKernel {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Anchor at `(0, 0)` plus `n − 1` points uniform in the disk of radius
/// `r_init`.
pub fn init_canonical(n: usize, r_init: f64, rng: &mut impl Rng) -> Result<CanonicalKernel> {
    if n < 1 {
        return Err(Error::invalid("kernel needs at least one point"));
    }
    if !(r_init > 0.0) {
        return Err(Error::invalid(format!("r_init must be positive, got {r_init}")));
    }
    let mut points = vec![[0.0, 0.0]];
    for _ in 1..n {
        let r = r_init * rng.gen::<f64>().sqrt();
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        points.push([r * a.cos(), r * a.sin()]);
    }
    Ok(CanonicalKernel { points })
}

/// Offsets predicted for one kernel point, in final units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelPointOutput {
    /// Camera-frame origin translation, scene units.
    pub delta_origin: [f64; 3],
    /// Pixel shift.
    pub delta_pixel: [f64; 2],
    pub weight_raw: f64,
}

/// Kernel MLP weights, view embeddings and the canonical kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct DskParams {
    pub config: DskConfig,
    pub hidden: Vec<Linear>,
    /// Reads the first and last hidden activations side by side.
    pub head: Linear,
    /// One row per training view.
    pub embeddings: Tensor<f32>,
    pub canonical: CanonicalKernel,
}

impl DskParams {
    /// Random hidden layers and embeddings, zero output head.
    pub fn init(config: DskConfig, views: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if views == 0 {
            return Err(Error::invalid("need at least one training view"));
        }
        let canonical = init_canonical(config.kernel_points, config.r_init, rng)?;
        let mut hidden = Vec::with_capacity(config.hidden_layers);
        for i in 0..config.hidden_layers {
            let inputs = if i == 0 { config.input_dim() } else { config.width };
            hidden.push(Linear::init(inputs, config.width, rng));
        }
        let head = Linear::zeros(head_inputs(&config), HEAD_OUTPUTS);
        let emb = (0..views * config.embed_dim)
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        let embeddings = Tensor::new([views, config.embed_dim], emb)?;
        Ok(Self {
            config,
            hidden,
            head,
            embeddings,
            canonical,
        })
    }

    /// All-zero weights and embeddings around a given canonical kernel.
    pub fn zeros(config: DskConfig, views: usize, canonical: CanonicalKernel) -> Result<Self> {
        config.validate()?;
        if canonical.len() != config.kernel_points {
            return Err(Error::invalid(format!(
                "canonical kernel has {} points, config says {}",
                canonical.len(),
                config.kernel_points
            )));
        }
        let hidden = (0..config.hidden_layers)
            .map(|i| Linear::zeros(if i == 0 { config.input_dim() } else { config.width }, config.width))
            .collect();
        Ok(Self {
            hidden,
            head: Linear::zeros(head_inputs(&config), HEAD_OUTPUTS),
            embeddings: Tensor::zeros([views, config.embed_dim]),
            canonical,
            config,
        })
    }

    pub fn views(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> DskVars {
        DskVars {
            hidden: self.hidden.iter().map(|l| l.bind(tape, trainable)).collect(),
            head: self.head.bind(tape, trainable),
            embeddings: bind_tensor(tape, &self.embeddings, trainable),
            config: self.config.clone(),
            canonical: self.canonical.clone(),
        }
    }

    fn check_view(&self, view: usize) -> Result<()> {
        if view >= self.views() {
            return Err(Error::invalid(format!(
                "view {view} out of range, kernel has {} views",
                self.views()
            )));
        }
        Ok(())
    }
}

fn head_inputs(config: &DskConfig) -> usize {
    if config.hidden_layers > 1 {
        2 * config.width
    } else {
        config.width
    }
}

impl Parameters for DskParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            l.tensors(&format!("dsk.hidden{i}"), &mut out);
        }
        self.head.tensors("dsk.head", &mut out);
        out.push(("dsk.embeddings".into(), &self.embeddings));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter_mut().enumerate() {
            l.tensors_mut(&format!("dsk.hidden{i}"), &mut out);
        }
        self.head.tensors_mut("dsk.head", &mut out);
        out.push(("dsk.embeddings".into(), &mut self.embeddings));
        out
    }
}

/// Kernel parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct DskVars {
    pub(crate) hidden: Vec<BoundLinear>,
    pub(crate) head: BoundLinear,
    pub(crate) embeddings: Var,
    config: DskConfig,
    canonical: CanonicalKernel,
}

impl DskVars {
    /// Handles in the order of [`Parameters::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.extend([l.weight, l.bias]);
        }
        out.extend([self.head.weight, self.head.bias, self.embeddings]);
        out
    }

    #[cfg(test)]
    pub(crate) fn vars_mut(&mut self) -> Vec<&mut Var> {
        let mut out = Vec::new();
        for l in &mut self.hidden {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias, &mut self.embeddings]);
        out
    }

    /// Swaps the handle of parameter `index` (in [`DskVars::vars`] order).
    #[cfg(test)]
    pub(crate) fn replace_var(&mut self, index: usize, v: Var) {
        *self.vars_mut()[index] = v;
    }

    /// Gained head outputs `[M, 6]` for `coords: [M, 4]` holding
    /// `[p_norm, q′ / r_init]` and the embedding row of each query.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        coords: Var,
        views: &[usize],
    ) -> Result<Var, AutodiffError> {
        let emb = tape.gather_rows(self.embeddings, views)?;
        let x = tape.concat(&[coords, emb], 1)?;
        let mut h = x;
        let mut first = None;
        for layer in &self.hidden {
            let z = layer.forward(tape, h)?;
            h = tape.relu(z);
            first.get_or_insert(h);
        }
        let head_in = match first {
            Some(f) if self.hidden.len() > 1 => tape.concat(&[f, h], 1)?,
            _ => h,
        };
        let raw = self.head.forward(tape, head_in)?;
        Ok(tape.scale(raw, T::lit(self.config.gain)))
    }
}

/// MLP input row for pixel `p` of `camera` and canonical point `q′`.
fn kernel_coords(config: &DskConfig, p_norm: [f64; 2], q: [f64; 2]) -> [f64; 4] {
    [p_norm[0], p_norm[1], q[0] / config.r_init, q[1] / config.r_init]
}

/// Kernel output of canonical point `q′` at normalized pixel `p_norm`.
pub fn eval_kernel(
    params: &DskParams,
    view: usize,
    p_norm: [f64; 2],
    q_prime: [f64; 2],
) -> Result<KernelPointOutput> {
    params.check_view(view)?;
    let cfg = &params.config;
    let mut tape = Tape::<f64>::new();
    let vars = params.bind(&mut tape, false);
    let coords = tape.constant(Tensor::from_slice([1, 4], &kernel_coords(cfg, p_norm, q_prime))?);
    let out = vars.forward(&mut tape, coords, &[view])?;
    let r = tape.data(out);
    Ok(KernelPointOutput {
        delta_origin: [r[0] * cfg.o_scale, r[1] * cfg.o_scale, r[2] * cfg.o_scale],
        delta_pixel: [r[3] * cfg.r_deform, r[4] * cfg.r_deform],
        weight_raw: r[5],
    })
}

/// Outputs for every canonical point of pixel `p` (pixel units).
pub fn eval_pixel_kernel(
    params: &DskParams,
    camera: &Camera,
    view: usize,
    p: [f64; 2],
) -> Result<Vec<KernelPointOutput>> {
    let p_norm = camera.normalized_pixel(p);
    params
        .canonical
        .points
        .iter()
        .map(|&q| eval_kernel(params, view, p_norm, q))
        .collect()
}

/// Softmax of the raw weights.
pub fn normalize_weights(raw: &[f64]) -> Vec<f64> {
    let m = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Rays through `p + Δq_i` with origins `center + R·Δo_i`, and their
/// normalized weights.
pub fn build_rays(
    camera: &Camera,
    p: [f64; 2],
    outputs: &[KernelPointOutput],
    canonical: &CanonicalKernel,
) -> Result<(Vec<Ray>, Vec<f64>)> {
    if outputs.len() != canonical.len() || outputs.is_empty() {
        return Err(Error::invalid(format!(
            "expected {} kernel outputs, got {}",
            canonical.len(),
            outputs.len()
        )));
    }
    let rays = outputs
        .iter()
        .map(|o| {
            let q = [p[0] + o.delta_pixel[0], p[1] + o.delta_pixel[1]];
            let mut ray = generate_ray(camera, q);
            let off = mat_vec(&camera.rotation, o.delta_origin);
            for k in 0..3 {
                ray.origin[k] += off[k];
            }
            ray
        })
        .collect();
    let raw: Vec<f64> = outputs.iter().map(|o| o.weight_raw).collect();
    Ok((rays, normalize_weights(&raw)))
}

/// One target pixel of a training view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelQuery {
    pub view: usize,
    pub pixel: [f64; 2],
}

/// Kernel rays of `B` queries on the tape. Rows `b·N .. b·N + N` belong to
/// query `b`, row `b·N` being the anchor.
#[derive(Clone, Copy, Debug)]
pub struct KernelRayVars {
    pub origins: Var,
    pub dirs: Var,
    /// `[B, N]`, softmax-normalized.
    pub weights: Var,
    /// Anchor pixel shifts `[B, 2]`.
    pub anchor_pixel: Var,
    /// Anchor origin shifts `[B, 3]`, camera frame.
    pub anchor_origin: Var,
}

/// Builds the differentiable kernel rays for `queries`; `cameras` is
/// indexed by view.
pub fn kernel_rays<T: Real>(
    tape: &mut Tape<T>,
    vars: &DskVars,
    cameras: &[Camera],
    queries: &[KernelQuery],
) -> Result<KernelRayVars> {
    let cfg = &vars.config;
    let n = vars.canonical.len();
    let b = queries.len();
    let m = b * n;
    if b == 0 {
        return Err(Error::invalid("empty kernel batch"));
    }
    let mut coords = Vec::with_capacity(m * 4);
    let mut views = Vec::with_capacity(m);
    let mut base = Vec::with_capacity(m * 3);
    let mut inv_f = Vec::with_capacity(m * 2);
    let mut rot = Vec::with_capacity(m * 9);
    let mut centers = Vec::with_capacity(m * 3);
    for q in queries {
        let cam = cameras
            .get(q.view)
            .ok_or_else(|| Error::invalid(format!("no camera for view {}", q.view)))?;
        let p_norm = cam.normalized_pixel(q.pixel);
        let dir = cam.camera_direction(q.pixel);
        for &c in &vars.canonical.points {
            coords.extend(kernel_coords(cfg, p_norm, c));
            views.push(q.view);
            base.extend(dir);
            inv_f.extend([1.0 / cam.fx, 1.0 / cam.fy]);
            rot.extend(cam.rotation.iter().flatten());
            centers.extend(cam.center);
        }
    }
    let lit = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<T>>();
    let coords = tape.constant(Tensor::new([m, 4], lit(coords))?);
    let raw = vars.forward(tape, coords, &views)?;

    let d_o = tape.slice(raw, 1, 0, 3)?;
    let d_o = tape.scale(d_o, T::lit(cfg.o_scale));
    let d_q = tape.slice(raw, 1, 3, 5)?;
    let d_q = tape.scale(d_q, T::lit(cfg.r_deform));
    let w = tape.slice(raw, 1, 5, 6)?;
    let w = tape.reshape(w, &[b, n])?;
    let weights = tape.softmax_last(w)?;

    let rot = tape.constant(Tensor::new([m, 3, 3], lit(rot))?);
    let inv_f = tape.constant(Tensor::new([m, 2], lit(inv_f))?);
    let shift = tape.mul(d_q, inv_f)?;
    let zeros = tape.constant(Tensor::zeros([m, 1]));
    let shift = tape.concat(&[shift, zeros], 1)?;
    let base = tape.constant(Tensor::new([m, 3], lit(base))?);
    let cam_dir = tape.add(base, shift)?;
    let world = rotate(tape, rot, cam_dir, m)?;
    let len = tape.norm_last(world)?;
    let dirs = tape.div(world, len)?;

    let centers = tape.constant(Tensor::new([m, 3], lit(centers))?);
    let off = rotate(tape, rot, d_o, m)?;
    let origins = tape.add(centers, off)?;

    let anchors: Vec<usize> = (0..b).map(|i| i * n).collect();
    let anchor_pixel = tape.gather_rows(d_q, &anchors)?;
    let anchor_origin = tape.gather_rows(d_o, &anchors)?;
    Ok(KernelRayVars {
        origins,
        dirs,
        weights,
        anchor_pixel,
        anchor_origin,
    })
}

/// Row-wise `R_m · v_m` for `rot: [M, 3, 3]`, `v: [M, 3]`.
fn rotate<T: Real>(tape: &mut Tape<T>, rot: Var, v: Var, m: usize) -> Result<Var, AutodiffError> {
    let v = tape.reshape(v, &[m, 1, 3])?;
    let prod = tape.mul(rot, v)?;
    let s = tape.sum_axis(prod, 2)?;
    tape.reshape(s, &[m, 3])
}
