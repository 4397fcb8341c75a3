//! Small strided conv stack standing in for a pretrained backbone.
//!
//! Every layer is a 4x4 convolution with stride 2 and padding 1, which halves
//! the spatial extent exactly. Hidden layers use `tanh`; the last is linear.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SftError};
use crate::params::{fan_in_uniform, param_struct};
use crate::tensor::{ConvGeometry, Tensor};

pub const GEOMETRY: ConvGeometry = ConvGeometry {
    kernel: 4,
    stride: 2,
    padding: 1,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub in_channels: usize,
    /// Square input extent; must equal `output_size * 2^layers`.
    pub input_size: usize,
    pub hidden: Vec<usize>,
    pub out_channels: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            in_channels: 3,
            input_size: 64,
            hidden: vec![8, 16],
            out_channels: 64,
        }
    }
}

impl ExtractorConfig {
    pub fn layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn output_size(&self) -> usize {
        self.input_size >> self.layers()
    }

    /// `(in, out)` channels of each conv layer.
    pub fn channel_pairs(&self) -> Vec<(usize, usize)> {
        let mut chans = vec![self.in_channels];
        chans.extend(&self.hidden);
        chans.push(self.out_channels);
        chans.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.hidden.contains(&0) {
            return Err(SftError::Config("extractor channels must be positive".into()));
        }
        if self.output_size() == 0 || self.output_size() << self.layers() != self.input_size {
            return Err(SftError::Config(format!(
                "input_size {} is not divisible by 2^{}",
                self.input_size,
                self.layers()
            )));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.input_size, self.input_size]
    }
}

param_struct! {
    ConvParams {
        /// `[C_out, C_in, 4, 4]`
        weight,
        bias,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams<T = Tensor> {
    pub convs: Vec<ConvParams<T>>,
}

impl<T> ExtractorParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ExtractorParams<U> {
        ExtractorParams {
            convs: self.convs.iter().map(|c| c.map(f)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut crate::params::Visitor<'a, '_, T>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}conv{i}."), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut crate::params::VisitorMut<'_, T>) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}conv{i}."), f);
        }
    }
}

impl ExtractorParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ExtractorConfig, rng: &mut R) -> Self {
        let k = GEOMETRY.kernel;
        let convs = cfg
            .channel_pairs()
            .into_iter()
            .map(|(ci, co)| ConvParams {
                weight: fan_in_uniform(&[co, ci, k, k], ci * k * k, rng),
                bias: fan_in_uniform(&[co], ci * k * k, rng),
            })
            .collect();
        ExtractorParams { convs }
    }
}

pub fn extract_graph(g: &mut Graph, img: Var, p: &ExtractorParams<Var>, cfg: &ExtractorConfig) -> Result<Var> {
    if g.value(img).shape() != cfg.input_shape() {
        return Err(SftError::dim("toy_extractor", g.value(img).shape(), &cfg.input_shape()));
    }
    if p.convs.len() != cfg.layers() {
        return Err(SftError::Config(format!(
            "extractor has {} conv parameter sets, config needs {}",
            p.convs.len(),
            cfg.layers()
        )));
    }
    let mut x = img;
    for (i, conv) in p.convs.iter().enumerate() {
        x = g.conv2d(x, conv.weight, conv.bias, GEOMETRY)?;
        if i + 1 < p.convs.len() {
            x = g.tanh(x);
        }
    }
    Ok(x)
}

/// `[3, S, S]` image to a `[C, S/2^L, S/2^L]` feature map.
pub fn toy_extractor(img: &Tensor, params: &ExtractorParams, cfg: &ExtractorConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.leaf(img.clone());
    let p = params.map(&mut |t| g.leaf(t.clone()));
    let out = extract_graph(&mut g, x, &p, cfg)?;
    Ok(g.value(out).clone())
}
