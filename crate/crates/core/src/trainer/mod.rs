//! Joint optimization of the radiance field, the kernel MLP and the view
//! embeddings.
//!
//! Every step draws its randomness from `(seed, iteration)`, so a run
//! resumed from a checkpoint follows the same trajectory as an
//! uninterrupted one.

mod adam;
mod checkpoint;
mod config;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_update, Adam, Moments};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{lr_at, TrainConfig};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::blur::{alignment_loss_on_tape, blend_on_tape, gamma_on_tape, reconstruction_loss_on_tape, LossWeights};
use crate::dsk::{kernel_rays, DskParams, DskVars, KernelQuery};
use crate::error::{Error, Result};
use crate::field::{FieldVars, RadianceFieldParams};
use crate::image::Image;
use crate::metrics::MetricsReport;
use crate::nn::Parameters;
use crate::renderer::{generate_ray, render_image, render_rays, rays_to_tensors, sample_along_ray, Camera, Intrinsics, RaySamples, SampleSet};
use crate::synth::Dataset;

/// Geometry a trained model depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInfo {
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    pub position_scale: f32,
    pub train_cameras: Vec<Camera>,
}

impl SceneInfo {
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        dataset.validate()?;
        Ok(Self {
            intrinsics: dataset.intrinsics,
            near: dataset.near(),
            far: dataset.far(),
            position_scale: position_scale(&dataset.train_cameras, dataset.near(), dataset.far()),
            train_cameras: dataset.train_cameras.clone(),
        })
    }

    pub fn depth_range(&self) -> f64 {
        self.far - self.near
    }
}

/// Inverse of the largest distance from the origin reached by any sample
/// of the training frusta, with a 10% margin.
pub fn position_scale(cameras: &[Camera], near: f64, far: f64) -> f32 {
    let mut reach: f64 = 0.0;
    for cam in cameras {
        let (w, h) = (cam.width as f64, cam.height as f64);
        for p in [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h], [w / 2.0, h / 2.0]] {
            let ray = generate_ray(cam, p);
            for t in [near, far] {
                let x = ray.at(t);
                reach = reach.max((x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt());
            }
        }
    }
    if reach > 0.0 {
        (1.0 / (1.1 * reach)) as f32
    } else {
        1.0
    }
}

/// Field plus, for the deblurring model, the kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub field: RadianceFieldParams,
    pub dsk: Option<DskParams>,
}

impl Model {
    pub fn init(config: &TrainConfig, scene: &SceneInfo) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let field = RadianceFieldParams::init(config.field_config(scene.position_scale), &mut rng)?;
        let dsk = if config.dsk_enabled {
            Some(DskParams::init(
                config.dsk_config(scene.depth_range()),
                scene.train_cameras.len(),
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Self { field, dsk })
    }
}

impl Parameters for Model {
    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = self.field.named_tensors();
        if let Some(d) = &self.dsk {
            out.extend(d.named_tensors());
        }
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let mut out = self.field.named_tensors_mut();
        if let Some(d) = &mut self.dsk {
            out.extend(d.named_tensors_mut());
        }
        out
    }
}

/// Target pixels of one step with their observations and sample depths.
#[derive(Clone, Debug)]
pub struct Batch {
    pub queries: Vec<KernelQuery>,
    /// Display-space colors.
    pub observed: Vec<[f32; 3]>,
    /// One set per query, shared by all of its kernel rays.
    pub samples: Vec<SampleSet>,
}

/// Loss graph of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    /// Display-space predictions `[B, 3]`.
    pub prediction: Var,
    pub rec: Var,
    pub align: Option<Var>,
    pub total: Var,
}

/// Builds the loss of `batch`. With `dsk` the prediction blends the kernel
/// rays; without it only the base ray of each pixel is rendered.
pub fn forward_loss<T: Real>(
    tape: &mut Tape<T>,
    field: &FieldVars,
    dsk: Option<&DskVars>,
    cameras: &[Camera],
    batch: &Batch,
    weights: LossWeights,
) -> Result<LossVars> {
    let b = batch.queries.len();
    if b == 0 || batch.samples.len() != b || batch.observed.len() != b {
        return Err(Error::invalid("batch needs one observation and sample set per query"));
    }
    let prediction;
    let mut align = None;
    match dsk {
        Some(dv) => {
            let kr = kernel_rays(tape, dv, cameras, &batch.queries)?;
            let n = tape.shape(kr.weights)[1];
            let sets: Vec<SampleSet> = batch
                .samples
                .iter()
                .flat_map(|s| std::iter::repeat(s.clone()).take(n))
                .collect();
            let colors = render_rays(tape, field, kr.origins, kr.dirs, &RaySamples::new(&sets))?;
            let colors = tape.reshape(colors, &[b, n, 3])?;
            prediction = blend_on_tape(tape, colors, kr.weights)?;
            align = Some(alignment_loss_on_tape(tape, kr.anchor_pixel, kr.anchor_origin, weights.lambda_o)?);
        }
        None => {
            let rays = batch
                .queries
                .iter()
                .map(|q| {
                    cameras
                        .get(q.view)
                        .map(|c| generate_ray(c, q.pixel))
                        .ok_or_else(|| Error::invalid(format!("no camera for view {}", q.view)))
                })
                .collect::<Result<Vec<_>>>()?;
            let (o, d) = rays_to_tensors::<T>(&rays);
            let o = tape.constant(o);
            let d = tape.constant(d);
            let colors = render_rays(tape, field, o, d, &RaySamples::new(&batch.samples))?;
            prediction = gamma_on_tape(tape, colors);
        }
    }
    let observed = batch.observed.iter().flatten().map(|&v| T::lit(v as f64)).collect();
    let observed = tape.constant(Tensor::new([b, 3], observed)?);
    let rec = reconstruction_loss_on_tape(tape, prediction, observed)?;
    let total = match align {
        Some(a) => {
            let a = tape.scale(a, T::lit(weights.lambda_a));
            tape.add(rec, a)?
        }
        None => rec,
    };
    Ok(LossVars {
        prediction,
        rec,
        align,
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub iteration: usize,
    pub loss: f64,
    pub rec: f64,
    pub align: f64,
    pub lr: f64,
}

impl StepLosses {
    pub const CSV_HEADER: &'static str = "iteration,loss,rec,align,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{:.8e},{:.8e},{:.8e},{:.8e}", self.iteration, self.loss, self.rec, self.align, self.lr)
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub scene: SceneInfo,
    pub model: Model,
    pub adam: Adam,
    /// Completed steps.
    pub iteration: usize,
    images: Vec<Image>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        let scene = SceneInfo::from_dataset(dataset)?;
        let model = Model::init(&config, &scene)?;
        let adam = Adam::new(model.named_tensors().iter().map(|(_, t)| t.len()));
        Ok(Self {
            config,
            scene,
            model,
            adam,
            iteration: 0,
            images: dataset.train_images.clone(),
        })
    }

    /// Continues from `ckpt` with the training images of `dataset`.
    pub fn resume(ckpt: Checkpoint, dataset: &Dataset) -> Result<Self> {
        dataset.validate()?;
        if dataset.train_cameras.len() != ckpt.scene.train_cameras.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} training views, dataset has {}",
                ckpt.scene.train_cameras.len(),
                dataset.train_cameras.len()
            )));
        }
        Ok(Self {
            config: ckpt.config,
            scene: ckpt.scene,
            model: ckpt.model,
            adam: ckpt.adam,
            iteration: ckpt.iteration,
            images: dataset.train_images.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            config: self.config.clone(),
            scene: self.scene.clone(),
            model: self.model.clone(),
            adam: self.adam.clone(),
        }
    }

    fn step_rng(&self, iteration: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iteration as u64 + 1);
        rng
    }

    /// Random pixels of random training views with stratified depths.
    pub fn sample_batch(&self, iteration: usize) -> Result<Batch> {
        let mut rng = self.step_rng(iteration);
        let intr = self.scene.intrinsics;
        let b = self.config.rays_per_batch;
        let mut batch = Batch {
            queries: Vec::with_capacity(b),
            observed: Vec::with_capacity(b),
            samples: Vec::with_capacity(b),
        };
        for _ in 0..b {
            let view = rng.gen_range(0..self.images.len());
            let x = rng.gen_range(0..intr.width);
            let y = rng.gen_range(0..intr.height);
            batch.queries.push(KernelQuery {
                view,
                pixel: Camera::pixel_center(x, y),
            });
            batch.observed.push(self.images[view].get(x, y));
            batch.samples.push(sample_along_ray(
                self.scene.near,
                self.scene.far,
                self.config.samples_per_ray,
                true,
                &mut rng,
            )?);
        }
        Ok(batch)
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<StepLosses> {
        let it = self.iteration;
        let batch = self.sample_batch(it)?;
        let mut tape = Tape::<f32>::new();
        let fv = self.model.field.bind(&mut tape, true);
        let dv = self.model.dsk.as_ref().map(|d| d.bind(&mut tape, true));
        let lv = forward_loss(
            &mut tape,
            &fv,
            dv.as_ref(),
            &self.scene.train_cameras,
            &batch,
            self.config.loss_weights(),
        )?;
        tape.backward(lv.total)?;
        let mut vars = fv.vars();
        if let Some(d) = &dv {
            vars.extend(d.vars());
        }
        let grads: Vec<Vec<f32>> = vars
            .iter()
            .map(|&v| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(v).len()],
            })
            .collect();
        let lr = lr_at(it, &self.config);
        self.adam.step(self.model.named_tensors_mut(), &grads, lr)?;
        self.iteration += 1;
        let scalar = |v: Var| tape.data(v)[0] as f64;
        Ok(StepLosses {
            iteration: it,
            loss: scalar(lv.total),
            rec: scalar(lv.rec),
            align: lv.align.map_or(0.0, scalar),
            lr,
        })
    }

    /// Steps until `until` iterations are done, calling `on_log` every
    /// `log_every` steps and after the last one.
    pub fn run_until(&mut self, until: usize, mut on_log: impl FnMut(&StepLosses) -> Result<()>) -> Result<()> {
        while self.iteration < until {
            let losses = self.step()?;
            let every = self.config.log_every.max(1);
            if losses.iteration % every == 0 || self.iteration == until {
                on_log(&losses)?;
            }
        }
        Ok(())
    }

    /// Trains to the configured iteration count, returning the loss log as
    /// CSV.
    pub fn run(&mut self) -> Result<String> {
        let mut log = format!("{}\n", StepLosses::CSV_HEADER);
        let until = self.config.iterations;
        self.run_until(until, |l| {
            writeln!(log, "{}", l.csv_row()).expect("string write");
            Ok(())
        })?;
        Ok(log)
    }

    /// Mean blurry reconstruction loss over every training pixel, using
    /// bin-midpoint depths.
    pub fn train_set_loss(&self) -> Result<f64> {
        train_set_loss(&self.model, &self.scene, &self.images, self.config.samples_per_ray)
    }
}

/// Mean squared display-space error of the model's prediction of every
/// pixel of `images`, the training views of `scene`.
pub fn train_set_loss(model: &Model, scene: &SceneInfo, images: &[Image], samples_per_ray: usize) -> Result<f64> {
    const CHUNK: usize = 512;
    let set = sample_along_ray(
        scene.near,
        scene.far,
        samples_per_ray,
        false,
        &mut rand::rngs::mock::StepRng::new(0, 0),
    )?;
    let mut all = Vec::new();
    for (view, img) in images.iter().enumerate() {
        for y in 0..img.height() {
            for x in 0..img.width() {
                all.push((KernelQuery { view, pixel: Camera::pixel_center(x, y) }, img.get(x, y)));
            }
        }
    }
    if all.is_empty() {
        return Err(Error::invalid("no training pixels"));
    }
    let mut sum = 0.0;
    for chunk in all.chunks(CHUNK) {
        let batch = Batch {
            queries: chunk.iter().map(|c| c.0).collect(),
            observed: chunk.iter().map(|c| c.1).collect(),
            samples: vec![set.clone(); chunk.len()],
        };
        let mut tape = Tape::<f32>::new();
        let fv = model.field.bind(&mut tape, false);
        let dv = model.dsk.as_ref().map(|d| d.bind(&mut tape, false));
        let lv = forward_loss(&mut tape, &fv, dv.as_ref(), &scene.train_cameras, &batch, LossWeights::default())?;
        sum += tape.data(lv.rec)[0] as f64 * chunk.len() as f64;
    }
    Ok(sum / all.len() as f64)
}

/// Sharp display-space render of `camera`, quantized to 8 bits. Only the
/// field takes part.
pub fn render_view(field: &RadianceFieldParams, scene: &SceneInfo, camera: &Camera, samples_per_ray: usize) -> Result<Image> {
    let linear = render_image(field, camera, scene.near, scene.far, samples_per_ray)?;
    Ok(linear.gamma_encoded().quantized())
}

/// PSNR/SSIM of sharp renders against the held-out test views.
pub fn evaluate_test_views(
    field: &RadianceFieldParams,
    scene: &SceneInfo,
    dataset: &Dataset,
    samples_per_ray: usize,
) -> Result<(MetricsReport, Vec<Image>)> {
    let renders = dataset
        .test_cameras
        .iter()
        .map(|cam| render_view(field, scene, cam, samples_per_ray))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport::compute(
        renders
            .iter()
            .zip(&dataset.test_images)
            .enumerate()
            .map(|(i, (r, gt))| (format!("{i:03}.png"), r, gt)),
    )?;
    Ok((report, renders))
}
