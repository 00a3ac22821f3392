use std::fmt::Write as _;
use std::path::Path;

use crate::blur::LossWeights;
use crate::dsk::DskConfig;
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::synth::parse_key_values;

/// Training hyperparameters, read from `key = value` files.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub kernel_points: usize,
    pub samples_per_ray: usize,
    pub seed: u64,
    pub dsk_enabled: bool,
    pub lambda_o: f64,
    pub lambda_a: f64,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub width: usize,
    pub depth: usize,
    pub color_width: usize,
    pub embed_dim: usize,
    pub kernel_width: usize,
    pub kernel_layers: usize,
    pub gain: f64,
    pub r_init: f64,
    pub r_deform: f64,
    /// Origin offset scale as a fraction of the scene depth range.
    pub o_scale_frac: f64,
    pub log_every: usize,
    /// Zero keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            rays_per_batch: 256,
            lr_start: 5e-4,
            lr_end: 8e-5,
            kernel_points: 5,
            samples_per_ray: 48,
            seed: 0,
            dsk_enabled: true,
            lambda_o: 10.0,
            lambda_a: 0.1,
            pos_freqs: 6,
            dir_freqs: 2,
            width: 64,
            depth: 4,
            color_width: 32,
            embed_dim: 32,
            kernel_width: 64,
            kernel_layers: 4,
            gain: 0.1,
            r_init: 2.0,
            r_deform: 4.0,
            o_scale_frac: 0.02,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

macro_rules! config_keys {
    ($m:ident) => {
        $m!(
            iterations: usize,
            rays_per_batch: usize,
            lr_start: f64,
            lr_end: f64,
            kernel_points: usize,
            samples_per_ray: usize,
            seed: u64,
            dsk_enabled: bool,
            lambda_o: f64,
            lambda_a: f64,
            pos_freqs: usize,
            dir_freqs: usize,
            width: usize,
            depth: usize,
            color_width: usize,
            embed_dim: usize,
            kernel_width: usize,
            kernel_layers: usize,
            gain: f64,
            r_init: f64,
            r_deform: f64,
            o_scale_frac: f64,
            log_every: usize,
            checkpoint_every: usize
        )
    };
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::invalid(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.rays_per_batch < 1 || self.samples_per_ray < 1 || self.kernel_points < 1 {
            return Err(Error::invalid("rays_per_batch, samples_per_ray and kernel_points must be at least 1"));
        }
        if !(self.lambda_o >= 0.0 && self.lambda_a >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        self.field_config(1.0).validate()?;
        self.dsk_config(1.0).validate()
    }

    pub fn field_config(&self, position_scale: f32) -> FieldConfig {
        FieldConfig {
            pos_freqs: self.pos_freqs,
            dir_freqs: self.dir_freqs,
            width: self.width,
            depth: self.depth,
            color_width: self.color_width,
            skip_layer: (self.depth > 2).then_some(self.depth / 2),
            position_scale,
        }
    }

    pub fn dsk_config(&self, depth_range: f64) -> DskConfig {
        DskConfig {
            kernel_points: self.kernel_points,
            embed_dim: self.embed_dim,
            width: self.kernel_width,
            hidden_layers: self.kernel_layers,
            gain: self.gain,
            r_init: self.r_init,
            r_deform: self.r_deform,
            o_scale: self.o_scale_frac * depth_range,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_o: self.lambda_o,
            lambda_a: self.lambda_a,
        }
    }

    /// Parses `key = value` lines over the defaults. Unknown keys are errors.
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, key, value) in parse_key_values(path, text)? {
            let bad = || Error::parse(path, line, format!("bad value {value:?} for {key}"));
            macro_rules! assign {
                ($($name:ident: $ty:ty),*) => {
                    match key.as_str() {
                        $(stringify!($name) => cfg.$name = value.parse::<$ty>().map_err(|_| bad())?,)*
                        _ => return Err(Error::parse(path, line, format!("unknown key {key:?}"))),
                    }
                };
            }
            config_keys!(assign);
        }
        cfg.validate().map_err(|e| Error::parse(path, 0, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    /// Every key as `key = value`, readable by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! emit {
            ($($name:ident: $ty:ty),*) => {
                $(writeln!(s, "{} = {}", stringify!($name), self.$name).expect("string write");)*
            };
        }
        config_keys!(emit);
        s
    }
}

/// `lr_start · (lr_end / lr_start)^(iteration / total)`.
pub fn lr_at(iteration: usize, config: &TrainConfig) -> f64 {
    let total = config.iterations.max(1) as f64;
    let frac = (iteration as f64 / total).min(1.0);
    config.lr_start * (config.lr_end / config.lr_start).powf(frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert!((lr_at(0, &cfg) - 5e-4).abs() < 1e-15);
        assert!((lr_at(cfg.iterations, &cfg) - 8e-5).abs() < 1e-15);
        assert!((lr_at(cfg.iterations / 2, &cfg) - 2e-4).abs() < 1e-12);
    }

    #[test]
    fn text_round_trip() {
        let cfg = TrainConfig {
            iterations: 77,
            dsk_enabled: false,
            lr_start: 1.25e-3,
            ..TrainConfig::default()
        };
        let back = TrainConfig::parse(Path::new("c"), &cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = TrainConfig::parse(Path::new("c.cfg"), "# comment\niterations = 5\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = TrainConfig::parse(Path::new("c.cfg"), "iterations = many\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        assert!(TrainConfig::parse(Path::new("c"), "lr_start = 1e-5\nlr_end = 1e-4\n").is_err());
    }
}
