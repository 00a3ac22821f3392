//! The sharp radiance field: positional encoding followed by an MLP that maps
//! a position and a viewing direction to linear-space color and density.
//!
//! Layout with the default configuration (`width = 64`, `depth = 4`):
//!
//! ```text
//! γ(x·s) ─ L0 ─ relu ─ L1 ─ relu ─ [· , γ(x·s)] ─ L2 ─ relu ─ L3 ─ relu ─┬─ sigma ─ softplus ─ σ
//!                                                                      └─ feature ─┐
//!                                           γ(d) ─ color_dir ──────────────────────+─ relu ─ rgb ─ sigmoid ─ c′
//! ```
//!
//! The encoded position is concatenated back into the input of hidden layer
//! `skip_layer` (`depth / 2` by default). View direction features enter only
//! the color branch, so density is view independent.

use rand::Rng;

use crate::autodiff::{AutodiffError, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{bind_tensor, BoundLinear, Linear, Parameters};

/// `[sin πv, cos πv, …, sin 2^(L−1)πv, cos 2^(L−1)πv]` for every element `v`.
pub fn positional_encode(x: &[f32], freqs: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len() * 2 * freqs);
    for &v in x {
        let v = v as f64;
        let mut scale = std::f64::consts::PI;
        for _ in 0..freqs {
            let (s, c) = (v * scale).sin_cos();
            out.push(s as f32);
            out.push(c as f32);
            scale *= 2.0;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldConfig {
    /// Frequency count for positions.
    pub pos_freqs: usize,
    /// Frequency count for directions.
    pub dir_freqs: usize,
    pub width: usize,
    pub depth: usize,
    pub color_width: usize,
    /// Hidden layer whose input also receives the encoded position.
    pub skip_layer: Option<usize>,
    /// Positions are multiplied by this before encoding so that the sampled
    /// region falls inside `[-1, 1]³`, where the encoding is unambiguous.
    pub position_scale: f32,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            pos_freqs: 6,
            dir_freqs: 2,
            width: 64,
            depth: 4,
            color_width: 32,
            skip_layer: Some(2),
            position_scale: 1.0,
        }
    }
}

impl FieldConfig {
    pub fn pos_features(&self) -> usize {
        3 * 2 * self.pos_freqs
    }

    pub fn dir_features(&self) -> usize {
        3 * 2 * self.dir_freqs
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.color_width == 0 {
            return Err(Error::invalid("field width, depth and color width must be positive"));
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.depth {
                return Err(Error::invalid(format!(
                    "skip layer {s} must lie in 1..{}",
                    self.depth
                )));
            }
        }
        if !(self.position_scale > 0.0) || !self.position_scale.is_finite() {
            return Err(Error::invalid("position scale must be positive"));
        }
        Ok(())
    }
}

/// Weights of the radiance field MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceFieldParams {
    pub config: FieldConfig,
    pub trunk: Vec<Linear>,
    pub sigma: Linear,
    pub feature: Linear,
    /// Direction features into the color hidden layer (no bias).
    pub color_dir: Tensor<f32>,
    /// Feature path into the color hidden layer, carries the bias.
    pub color: Linear,
    pub rgb: Linear,
}

impl RadianceFieldParams {
    pub fn init(config: FieldConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut trunk = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            trunk.push(Linear::init(layer_inputs(&config, i), config.width, rng));
        }
        let sigma = Linear::init(config.width, 1, rng);
        let feature = Linear::init(config.width, config.width, rng);
        let color_in = config.width + config.dir_features();
        let color = Linear::init(color_in, config.color_width, rng);
        // split the color layer so direction features can be added per ray
        let (w_feat, w_dir) = split_rows(&color.weight, config.width);
        let color = Linear {
            weight: w_feat,
            bias: color.bias,
        };
        let rgb = Linear::init(config.color_width, 3, rng);
        Ok(Self {
            config,
            trunk,
            sigma,
            feature,
            color_dir: w_dir,
            color,
            rgb,
        })
    }

    /// Every weight and bias set to zero.
    pub fn zeros(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let trunk = (0..config.depth)
            .map(|i| Linear::zeros(layer_inputs(&config, i), config.width))
            .collect();
        Ok(Self {
            trunk,
            sigma: Linear::zeros(config.width, 1),
            feature: Linear::zeros(config.width, config.width),
            color_dir: Tensor::zeros([config.dir_features(), config.color_width]),
            color: Linear::zeros(config.width, config.color_width),
            rgb: Linear::zeros(config.color_width, 3),
            config,
        })
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> FieldVars {
        FieldVars {
            trunk: self.trunk.iter().map(|l| l.bind(tape, trainable)).collect(),
            sigma: self.sigma.bind(tape, trainable),
            feature: self.feature.bind(tape, trainable),
            color_dir: bind_tensor(tape, &self.color_dir, trainable),
            color: self.color.bind(tape, trainable),
            rgb: self.rgb.bind(tape, trainable),
            config: self.config.clone(),
        }
    }
}

fn layer_inputs(config: &FieldConfig, layer: usize) -> usize {
    match layer {
        0 => config.pos_features(),
        l if Some(l) == config.skip_layer => config.width + config.pos_features(),
        _ => config.width,
    }
}

fn split_rows(t: &Tensor<f32>, rows: usize) -> (Tensor<f32>, Tensor<f32>) {
    let cols = t.shape()[1];
    let total = t.shape()[0];
    let (a, b) = t.data().split_at(rows * cols);
    (
        Tensor::from_slice([rows, cols], a).expect("shape"),
        Tensor::from_slice([total - rows, cols], b).expect("shape"),
    )
}

impl Parameters for RadianceFieldParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            l.tensors(&format!("field.trunk{i}"), &mut out);
        }
        self.sigma.tensors("field.sigma", &mut out);
        self.feature.tensors("field.feature", &mut out);
        out.push(("field.color_dir".into(), &self.color_dir));
        self.color.tensors("field.color", &mut out);
        self.rgb.tensors("field.rgb", &mut out);
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter_mut().enumerate() {
            l.tensors_mut(&format!("field.trunk{i}"), &mut out);
        }
        self.sigma.tensors_mut("field.sigma", &mut out);
        self.feature.tensors_mut("field.feature", &mut out);
        out.push(("field.color_dir".into(), &mut self.color_dir));
        self.color.tensors_mut("field.color", &mut out);
        self.rgb.tensors_mut("field.rgb", &mut out);
        out
    }
}

/// Field parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct FieldVars {
    trunk: Vec<BoundLinear>,
    sigma: BoundLinear,
    feature: BoundLinear,
    color_dir: Var,
    color: BoundLinear,
    rgb: BoundLinear,
    config: FieldConfig,
}

/// Density `[R, D]` and color `[R, D, 3]` at the samples of `R` rays.
#[derive(Clone, Copy, Debug)]
pub struct FieldOutput {
    pub sigma: Var,
    pub rgb: Var,
}

impl FieldVars {
    /// Handles in the order of [`Parameters::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.trunk {
            out.extend([l.weight, l.bias]);
        }
        for l in [&self.sigma, &self.feature] {
            out.extend([l.weight, l.bias]);
        }
        out.push(self.color_dir);
        for l in [&self.color, &self.rgb] {
            out.extend([l.weight, l.bias]);
        }
        out
    }

    #[cfg(test)]
    pub(crate) fn vars_mut(&mut self) -> Vec<&mut Var> {
        let mut out = Vec::new();
        for l in &mut self.trunk {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        for l in [&mut self.sigma, &mut self.feature] {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out.push(&mut self.color_dir);
        for l in [&mut self.color, &mut self.rgb] {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out
    }

    /// Swaps the handle of parameter `index` (in [`FieldVars::vars`] order).
    #[cfg(test)]
    pub(crate) fn replace_var(&mut self, index: usize, v: Var) {
        *self.vars_mut()[index] = v;
    }

    /// Evaluates the field at `points: [R·D, 3]` (row `r·D + i` is sample `i`
    /// of ray `r`) with unit ray directions `dirs: [R, 3]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        points: Var,
        dirs: Var,
        samples_per_ray: usize,
    ) -> Result<FieldOutput, AutodiffError> {
        let cfg = &self.config;
        let rays = tape.shape(dirs)[0];
        let d = samples_per_ray;
        let scaled = tape.scale(points, T::lit(cfg.position_scale as f64));
        let enc = tape.encode(scaled, cfg.pos_freqs)?;

        let mut h = enc;
        for (i, layer) in self.trunk.iter().enumerate() {
            let input = if Some(i) == cfg.skip_layer {
                tape.concat(&[h, enc], 1)?
            } else {
                h
            };
            let z = layer.forward(tape, input)?;
            h = tape.relu(z);
        }

        let raw_sigma = self.sigma.forward(tape, h)?;
        let sigma = tape.softplus(raw_sigma);
        let sigma = tape.reshape(sigma, &[rays, d])?;

        let feat = self.feature.forward(tape, h)?;
        let from_feat = self.color.forward(tape, feat)?;
        let from_feat = tape.reshape(from_feat, &[rays, d, cfg.color_width])?;
        let dir_enc = tape.encode(dirs, cfg.dir_freqs)?;
        let from_dir = tape.matmul(dir_enc, self.color_dir)?;
        let from_dir = tape.reshape(from_dir, &[rays, 1, cfg.color_width])?;
        let hc = tape.add(from_feat, from_dir)?;
        let hc = tape.relu(hc);
        let hc = tape.reshape(hc, &[rays * d, cfg.color_width])?;
        let raw_rgb = self.rgb.forward(tape, hc)?;
        let rgb = tape.sigmoid(raw_rgb);
        let rgb = tape.reshape(rgb, &[rays, d, 3])?;
        Ok(FieldOutput { sigma, rgb })
    }
}

/// Linear RGB color and density at a single point.
pub fn eval_field(params: &RadianceFieldParams, x: [f32; 3], d: [f32; 3]) -> Result<([f32; 3], f32)> {
    if x.iter().chain(&d).any(|v| !v.is_finite()) {
        return Err(Error::invalid("field input must be finite"));
    }
    let mut tape = Tape::<f32>::new();
    let vars = params.bind(&mut tape, false);
    let p = tape.constant(Tensor::from_slice([1, 3], &x)?);
    let dir = tape.constant(Tensor::from_slice([1, 3], &d)?);
    let out = vars.forward(&mut tape, p, dir, 1)?;
    let c = tape.data(out.rgb);
    Ok(([c[0], c[1], c[2]], tape.data(out.sigma)[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> FieldConfig {
        FieldConfig {
            pos_freqs: 2,
            dir_freqs: 1,
            width: 8,
            depth: 3,
            color_width: 4,
            skip_layer: Some(1),
            position_scale: 0.5,
        }
    }

    #[test]
    fn encoding_examples() {
        assert_eq!(positional_encode(&[0.0], 1), vec![0.0, 1.0]);
        let e = positional_encode(&[0.5], 2);
        for (a, b) in e.iter().zip([1.0, 0.0, 0.0, -1.0]) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(positional_encode(&[0.3], 4).len(), 8);
    }

    #[test]
    fn integer_inputs_have_zero_sine() {
        for k in -5..=5 {
            let e = positional_encode(&[k as f32], 1);
            assert!(e[0].abs() <= 1e-6, "{k}: {}", e[0]);
        }
    }

    #[test]
    fn tape_encoding_matches_plain_encoding() {
        let x = [0.1f32, -0.7, 0.33];
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(Tensor::from_slice([1, 3], &x).unwrap());
        let e = tape.encode(v, 4).unwrap();
        let plain = positional_encode(&x, 4);
        for (a, b) in tape.data(e).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weights_give_ln2_and_half_gray() {
        let params = RadianceFieldParams::zeros(FieldConfig::default()).unwrap();
        let (c, sigma) = eval_field(&params, [0.3, -0.2, 1.0], [0.0, 0.0, 1.0]).unwrap();
        assert!((sigma - std::f32::consts::LN_2).abs() < 1e-6);
        assert_eq!(c, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn activation_ranges_hold_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = RadianceFieldParams::init(FieldConfig::default(), &mut rng).unwrap();
        let n = 10_000;
        let mut tape = Tape::<f32>::new();
        let vars = params.bind(&mut tape, false);
        let pts: Vec<f32> = (0..n * 3).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let dirs: Vec<f32> = (0..n)
            .flat_map(|_| {
                let v: [f32; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..1.0)];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                v.map(|c| c / n)
            })
            .collect();
        let p = tape.constant(Tensor::new([n, 3], pts).unwrap());
        let d = tape.constant(Tensor::new([n, 3], dirs).unwrap());
        let out = vars.forward(&mut tape, p, d, 1).unwrap();
        assert!(tape.data(out.sigma).iter().all(|&s| s >= 0.0 && s.is_finite()));
        assert!(tape.data(out.rgb).iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn eval_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = RadianceFieldParams::init(FieldConfig::default(), &mut rng).unwrap();
        let a = eval_field(&params, [0.1, 0.2, 0.3], [0.0, 1.0, 0.0]).unwrap();
        let b = eval_field(&params, [0.1, 0.2, 0.3], [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(a.0.map(f32::to_bits), b.0.map(f32::to_bits));
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }

    #[test]
    fn rejects_non_finite_input() {
        let params = RadianceFieldParams::zeros(FieldConfig::default()).unwrap();
        assert!(eval_field(&params, [f32::NAN, 0.0, 0.0], [0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn hidden_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = RadianceFieldParams::init(small_config(), &mut rng).unwrap();
        let point = params.trunk[1].weight.cast::<f64>();
        let err = grad_check(
            |tape, w| {
                let mut vars = params.bind(tape, false);
                vars.trunk[1].weight = w;
                let p = tape.constant(
                    Tensor::from_slice([2, 3], &[0.2, -0.4, 0.9, 0.5, 0.1, -0.3]).unwrap(),
                );
                let d = tape.constant(Tensor::from_slice([1, 3], &[0.0, 0.6, 0.8]).unwrap());
                let out = vars.forward(tape, p, d, 2)?;
                let s = tape.sum(out.sigma);
                let c = tape.sum(out.rgb);
                tape.add(s, c)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
