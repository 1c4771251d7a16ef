//! Plain conv-ReLU backbone emitting an N-level feature hierarchy.
//!
//! A stride-2 stem brings the image to 1/2 resolution; each level then opens
//! with a stride-2 3x3 convolution, so level `n` sits at `1 / 2^(n+1)` of the
//! input. Every convolution carries a bias and is followed by a ReLU.

use crate::error::{Error, Result};
use crate::init::{he_normal, Rng};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, ParamVars, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub levels: usize,
    pub channels_per_level: Vec<usize>,
    pub blocks_per_level: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 3,
            stem_channels: 16,
            levels: 4,
            channels_per_level: vec![16, 32, 64, 64],
            blocks_per_level: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("backbone needs at least 2 levels, got {}", self.levels)));
        }
        if self.channels_per_level.len() != self.levels {
            return Err(Error::Config(format!(
                "backbone lists {} channel counts for {} levels",
                self.channels_per_level.len(),
                self.levels
            )));
        }
        if self.input_channels == 0 || self.stem_channels == 0 || self.channels_per_level.contains(&0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::Config("backbone needs at least one block per level".into()));
        }
        Ok(())
    }

    /// Input extents must be multiples of this.
    pub fn required_divisor(&self) -> usize {
        1 << (self.levels + 1)
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let conv = |out: usize, inp: usize| out * inp * 9 + out;
        let mut total = conv(self.stem_channels, self.input_channels);
        let mut prev = self.stem_channels;
        for &c in &self.channels_per_level {
            total += conv(c, prev) + (self.blocks_per_level - 1) * conv(c, c);
            prev = c;
        }
        total
    }

    fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        // (name, out, in, stride)
        let mut layers = vec![("backbone.stem".to_string(), self.stem_channels, self.input_channels, 2)];
        let mut prev = self.stem_channels;
        for (n, &c) in self.channels_per_level.iter().enumerate() {
            for b in 0..self.blocks_per_level {
                let (inp, stride) = if b == 0 { (prev, 2) } else { (c, 1) };
                layers.push((format!("backbone.l{}.b{}", n + 1, b), c, inp, stride));
            }
            prev = c;
        }
        layers
    }
}

/// Initializes backbone parameters into `store` (He-normal weights, zero biases).
pub fn build_backbone<S: Scalar>(config: &BackboneConfig, rng: &mut Rng, store: &mut ParamStore<S>) -> Result<()> {
    config.validate()?;
    for (name, out, inp, _) in config.layers() {
        store.insert(format!("{name}.w"), he_normal([out, inp, 3, 3], rng));
        store.insert(format!("{name}.b"), Tensor::zeros([1, out, 1, 1]));
    }
    Ok(())
}

/// Runs the backbone; returns `c_1 .. c_N`, finest first.
pub fn backbone_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamVars,
    config: &BackboneConfig,
    image: Var,
) -> Result<Vec<Var>> {
    let [_, c, h, w] = tape.shape(image);
    if c != config.input_channels {
        return Err(Error::invalid(
            "backbone_forward",
            format!("expected {} input channels, got {c}", config.input_channels),
        ));
    }
    let div = config.required_divisor();
    if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "backbone_forward",
            format!("image {h}x{w} must have extents divisible by {div} for {} levels", config.levels),
        ));
    }
    let mut x = image;
    let mut outputs = Vec::with_capacity(config.levels);
    let layers = config.layers();
    let mut iter = layers.iter();
    let (stem, ..) = iter.next().expect("stem layer");
    x = conv_relu(tape, params, stem, x, 2)?;
    for _ in 0..config.levels {
        for _ in 0..config.blocks_per_level {
            let (name, _, _, stride) = iter.next().expect("level layer");
            x = conv_relu(tape, params, name, x, *stride)?;
        }
        outputs.push(x);
    }
    Ok(outputs)
}

fn conv_relu<S: Scalar>(tape: &mut Tape<S>, params: &ParamVars, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = params.get(&format!("{name}.w"))?;
    let b = params.get(&format!("{name}.b"))?;
    let y = tape.conv2d(x, w, stride, 1)?;
    let y = tape.add_bias(y, b)?;
    Ok(tape.relu(y))
}
