//! Weight-shared bitemporal encoder of stacked axial attention layers.
//!
//! Each layer projects a `[C, H, W]` feature map to reduced-width queries and
//! keys and full-width values with 1x1 convolutions, then applies sparse focus
//! attention with a residual. The stack runs with shared weights over both
//! temporal branches and the results are concatenated along channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{sparse_focus_attention_with_layout, AxialLayout, AxialVariant};
use crate::autodiff::{Graph, Var};
use crate::error::{Result, SftError};
use crate::params::{fan_in_uniform, param_struct};
use crate::tensor::{pointwise_conv, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub channels: usize,
    pub reduced_channels: usize,
    pub width: usize,
    pub height: usize,
    /// Number of stacked sparse focus layers (R).
    pub depth: usize,
    pub variant: AxialVariant,
    #[serde(default)]
    pub scale_qk: bool,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            channels: 64,
            reduced_channels: 8,
            width: 8,
            height: 8,
            depth: 1,
            variant: AxialVariant::FullLength,
            scale_qk: false,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.width == 0 || self.height == 0 {
            return Err(SftError::Config("encoder extents must be positive".into()));
        }
        if self.reduced_channels == 0 || self.reduced_channels > self.channels {
            return Err(SftError::Config(format!(
                "reduced_channels = {} must lie in [1, channels = {}]",
                self.reduced_channels, self.channels
            )));
        }
        if self.depth == 0 {
            return Err(SftError::Config("encoder depth R must be >= 1".into()));
        }
        self.variant.validate(self.width, self.height)
    }

    pub fn layout(&self) -> Result<AxialLayout> {
        AxialLayout::new(self.width, self.height, self.variant)
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

param_struct! {
    /// Projection weights of one sparse focus layer.
    SftLayerParams {
        /// `[C', C]`
        wq,
        bq,
        /// `[C', C]`
        wk,
        bk,
        /// `[C, C]`
        wv,
        bv,
    }
}

impl SftLayerParams {
    pub fn init<R: Rng + ?Sized>(cfg: &SftConfig, rng: &mut R) -> Self {
        let (c, cr) = (cfg.channels, cfg.reduced_channels);
        SftLayerParams {
            wq: fan_in_uniform(&[cr, c], c, rng),
            bq: fan_in_uniform(&[cr], c, rng),
            wk: fan_in_uniform(&[cr, c], c, rng),
            bk: fan_in_uniform(&[cr], c, rng),
            wv: fan_in_uniform(&[c, c], c, rng),
            bv: fan_in_uniform(&[c], c, rng),
        }
    }

    pub fn zeros(cfg: &SftConfig) -> Self {
        let (c, cr) = (cfg.channels, cfg.reduced_channels);
        SftLayerParams {
            wq: Tensor::zeros(&[cr, c]),
            bq: Tensor::zeros(&[cr]),
            wk: Tensor::zeros(&[cr, c]),
            bk: Tensor::zeros(&[cr]),
            wv: Tensor::zeros(&[c, c]),
            bv: Tensor::zeros(&[c]),
        }
    }

    fn check(&self, cfg: &SftConfig) -> Result<()> {
        let (c, cr) = (cfg.channels, cfg.reduced_channels);
        let expect: [(&Tensor, Vec<usize>); 6] = [
            (&self.wq, vec![cr, c]),
            (&self.bq, vec![cr]),
            (&self.wk, vec![cr, c]),
            (&self.bk, vec![cr]),
            (&self.wv, vec![c, c]),
            (&self.bv, vec![c]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(SftError::dim("SftLayerParams", t.shape(), &shape));
            }
        }
        Ok(())
    }
}

/// Feature maps of the two acquisition times.
#[derive(Clone, Debug, PartialEq)]
pub struct BitemporalFeatures {
    pub f1: Tensor,
    pub f2: Tensor,
}

impl BitemporalFeatures {
    pub fn new(f1: Tensor, f2: Tensor) -> Result<Self> {
        if f1.shape() != f2.shape() {
            return Err(SftError::dim("BitemporalFeatures", f1.shape(), f2.shape()));
        }
        Ok(BitemporalFeatures { f1, f2 })
    }
}

fn check_features(f: &Tensor, cfg: &SftConfig) -> Result<()> {
    if f.shape() != cfg.feature_shape() {
        return Err(SftError::dim("sft_layer", f.shape(), &cfg.feature_shape()));
    }
    Ok(())
}

pub fn sft_layer(f: &Tensor, params: &SftLayerParams, cfg: &SftConfig) -> Result<Tensor> {
    sft_layer_with_layout(f, params, cfg, &cfg.layout()?)
}

fn sft_layer_with_layout(
    f: &Tensor,
    params: &SftLayerParams,
    cfg: &SftConfig,
    layout: &AxialLayout,
) -> Result<Tensor> {
    check_features(f, cfg)?;
    params.check(cfg)?;
    let q = pointwise_conv(f, &params.wq, &params.bq)?;
    let k = pointwise_conv(f, &params.wk, &params.bk)?;
    let v = pointwise_conv(f, &params.wv, &params.bv)?;
    sparse_focus_attention_with_layout(&q, &k, &v, f, layout, cfg.scale_qk).map(|(out, _)| out)
}

fn check_depth(layers: usize, cfg: &SftConfig) -> Result<()> {
    if layers != cfg.depth {
        return Err(SftError::Config(format!(
            "encoder has {layers} layer parameter sets but depth R = {}",
            cfg.depth
        )));
    }
    Ok(())
}

/// Runs the layer stack over one feature map.
pub fn encode_single(f: &Tensor, layers: &[SftLayerParams], cfg: &SftConfig) -> Result<Tensor> {
    check_depth(layers.len(), cfg)?;
    let layout = cfg.layout()?;
    let mut x = f.clone();
    for p in layers {
        x = sft_layer_with_layout(&x, p, cfg, &layout)?;
    }
    Ok(x)
}

/// Encodes both branches with shared weights and concatenates the results
/// along channels: `[2C, H, W]`, `f1` branch first.
pub fn encode(bt: &BitemporalFeatures, layers: &[SftLayerParams], cfg: &SftConfig) -> Result<Tensor> {
    let a = encode_single(&bt.f1, layers, cfg)?;
    let b = encode_single(&bt.f2, layers, cfg)?;
    Tensor::concat0(&[&a, &b])
}

pub fn sft_layer_graph(
    g: &mut Graph,
    f: Var,
    p: &SftLayerParams<Var>,
    layout: &AxialLayout,
    scale_qk: bool,
) -> Result<Var> {
    let q = g.pointwise_conv(f, p.wq, p.bq)?;
    let k = g.pointwise_conv(f, p.wk, p.bk)?;
    let v = g.pointwise_conv(f, p.wv, p.bv)?;
    g.sparse_focus(q, k, v, f, layout, scale_qk)
}

pub fn encode_graph(
    g: &mut Graph,
    f1: Var,
    f2: Var,
    layers: &[SftLayerParams<Var>],
    cfg: &SftConfig,
) -> Result<Var> {
    check_depth(layers.len(), cfg)?;
    check_features(g.value(f1), cfg)?;
    check_features(g.value(f2), cfg)?;
    let layout = cfg.layout()?;
    let mut branches = [f1, f2];
    for branch in &mut branches {
        for p in layers {
            *branch = sft_layer_graph(g, *branch, p, &layout, cfg.scale_qk)?;
        }
    }
    g.concat0(&branches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::dense_masked_attention;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> SftConfig {
        SftConfig {
            channels: 4,
            reduced_channels: 2,
            width: 4,
            height: 4,
            depth: 1,
            variant: AxialVariant::FullLength,
            scale_qk: false,
        }
    }

    #[test]
    fn zero_logits_average_the_value_over_the_neighborhood() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::uniform(&cfg.feature_shape(), 1.0, &mut rng);
        let mut p = SftLayerParams::zeros(&cfg);
        p.wv = Tensor::eye(4);
        let out = sft_layer(&f, &p, &cfg).unwrap();
        let layout = cfg.layout().unwrap();
        for px in 0..16 {
            let ms = layout.members(px);
            for c in 0..4 {
                let mean = ms.iter().map(|&m| f.data()[c * 16 + m]).sum::<f64>() / ms.len() as f64;
                assert!((out.data()[c * 16 + px] - (mean + f.data()[c * 16 + px])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_projection_plus_dense_oracle() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::uniform(&cfg.feature_shape(), 1.0, &mut rng);
        let p = SftLayerParams::init(&cfg, &mut rng);
        let out = sft_layer(&f, &p, &cfg).unwrap();

        // straight-line: per-pixel projections, then dense masked attention
        let proj = |w: &Tensor, b: &Tensor| {
            let (o, i) = w.dims2().unwrap();
            let mut t = Tensor::zeros(&[o, 4, 4]);
            for px in 0..16 {
                for r in 0..o {
                    let mut acc = b.data()[r];
                    for c in 0..i {
                        acc += w.data()[r * i + c] * f.data()[c * 16 + px];
                    }
                    t.data_mut()[r * 16 + px] = acc;
                }
            }
            t
        };
        let (q, k, v) = (proj(&p.wq, &p.bq), proj(&p.wk, &p.bk), proj(&p.wv, &p.bv));
        let mask = cfg.layout().unwrap().mask();
        let oracle = dense_masked_attention(&q, &k, &v, &f, &mask, false).unwrap();
        assert!(out.max_abs_diff(&oracle).unwrap() < 1e-9);
    }

    #[test]
    fn encode_shape_symmetry_and_composition() {
        let mut cfg = small_cfg();
        cfg.depth = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layers: Vec<_> = (0..2).map(|_| SftLayerParams::init(&cfg, &mut rng)).collect();
        let f1 = Tensor::uniform(&cfg.feature_shape(), 1.0, &mut rng);
        let f2 = Tensor::uniform(&cfg.feature_shape(), 1.0, &mut rng);

        let same = encode(&BitemporalFeatures::new(f1.clone(), f1.clone()).unwrap(), &layers, &cfg).unwrap();
        assert_eq!(same.shape(), &[8, 4, 4]);
        assert_eq!(same.narrow0(0, 4).unwrap(), same.narrow0(4, 4).unwrap());

        let out = encode(&BitemporalFeatures::new(f1.clone(), f2.clone()).unwrap(), &layers, &cfg).unwrap();
        let manual = sft_layer(&sft_layer(&f1, &layers[0], &cfg).unwrap(), &layers[1], &cfg).unwrap();
        assert!(out.narrow0(0, 4).unwrap().max_abs_diff(&manual).unwrap() < 1e-12);

        let swapped = encode(&BitemporalFeatures::new(f2, f1).unwrap(), &layers, &cfg).unwrap();
        assert_eq!(swapped.narrow0(0, 4).unwrap(), out.narrow0(4, 4).unwrap());
        assert_eq!(swapped.narrow0(4, 4).unwrap(), out.narrow0(0, 4).unwrap());
    }

    #[test]
    fn zero_projections_pass_input_through() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::uniform(&cfg.feature_shape(), 1.0, &mut rng);
        let out = sft_layer(&f, &SftLayerParams::zeros(&cfg), &cfg).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn graph_path_matches_plain_path() {
        let mut cfg = small_cfg();
        cfg.depth = 2;
        cfg.variant = AxialVariant::FixedLength { l: 2 };
        cfg.scale_qk = true;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layers: Vec<_> = (0..2).map(|_| SftLayerParams::init(&cfg, &mut rng)).collect();
        let f1 = Tensor::uniform(&cfg.feature_shape(), 1.0, &mut rng);
        let f2 = Tensor::uniform(&cfg.feature_shape(), 1.0, &mut rng);
        let plain = encode(&BitemporalFeatures::new(f1.clone(), f2.clone()).unwrap(), &layers, &cfg).unwrap();
        let mut g = Graph::new();
        let (v1, v2) = (g.leaf(f1), g.leaf(f2));
        let vars: Vec<_> = layers.iter().map(|p| p.map(&mut |t| g.leaf(t.clone()))).collect();
        let out = encode_graph(&mut g, v1, v2, &vars, &cfg).unwrap();
        assert_eq!(g.value(out), &plain);
    }

    #[test]
    fn config_and_shape_errors() {
        let cfg = small_cfg();
        let f = Tensor::zeros(&[4, 4, 3]);
        assert!(matches!(sft_layer(&f, &SftLayerParams::zeros(&cfg), &cfg), Err(SftError::Dimension { .. })));
        let bt = BitemporalFeatures::new(Tensor::zeros(&[4, 4, 4]), Tensor::zeros(&[4, 4, 4])).unwrap();
        assert!(matches!(encode(&bt, &[], &cfg), Err(SftError::Config(_))));
        let bad = SftConfig { reduced_channels: 5, ..cfg.clone() };
        assert!(bad.validate().is_err());
        let bad = SftConfig { depth: 0, ..cfg };
        assert!(bad.validate().is_err());
    }
}
