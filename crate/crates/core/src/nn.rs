//! Dense layers and parameter bookkeeping shared by the two MLPs.

use rand::Rng;

use crate::autodiff::{AutodiffError, Real, Tape, Tensor, Var};

/// Fully connected layer `y = x·W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

impl Linear {
    /// Uniform `±1/√in` initialization for weights and biases.
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs.max(1) as f32).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<_>>();
        let weight = Tensor::new([inputs, outputs], draw(inputs * outputs)).expect("shape");
        let bias = Tensor::new([1, outputs], draw(outputs)).expect("shape");
        Self { weight, bias }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros([inputs, outputs]),
            bias: Tensor::zeros([1, outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> BoundLinear {
        BoundLinear {
            weight: bind_tensor(tape, &self.weight, trainable),
            bias: bind_tensor(tape, &self.bias, trainable),
        }
    }

    pub(crate) fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<f32>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor<f32>)>,
    ) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

/// Tape handles of a [`Linear`] layer.
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, AutodiffError> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

/// Copies an `f32` parameter onto a tape of any precision.
pub fn bind_tensor<T: Real>(tape: &mut Tape<T>, t: &Tensor<f32>, trainable: bool) -> Var {
    let mut v: Tensor<T> = t.cast();
    v.set_requires_grad(trainable);
    tape.var(v)
}

/// Named, ordered access to every learnable tensor of a model.
pub trait Parameters {
    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)>;

    fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}
