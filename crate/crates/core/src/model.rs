//! End-to-end captioner: shared extractor, sparse focus encoder, decoder.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::decoder::{self, CaptionSequence, DecodeOutput, DecoderConfig, DecoderParams, Vocabulary, PAD};
use crate::encoder::{encode_graph, SftConfig, SftLayerParams};
use crate::error::{Result, SftError};
use crate::extractor::{extract_graph, ExtractorConfig, ExtractorParams};
use crate::format;
use crate::params::{Visitor, VisitorMut};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub encoder: SftConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Default component configs wired together for a vocabulary of `vocab_size`.
    pub fn with_vocab(vocab_size: usize) -> Self {
        let mut cfg = ModelConfig {
            extractor: ExtractorConfig::default(),
            encoder: SftConfig::default(),
            decoder: DecoderConfig::default(),
        };
        cfg.decoder.vocab_size = vocab_size;
        cfg.link();
        cfg
    }

    /// Derives the dependent extents (encoder grid and channels, decoder
    /// image width and token count) from the extractor and encoder settings.
    pub fn link(&mut self) {
        let s = self.extractor.output_size();
        self.encoder.channels = self.extractor.out_channels;
        self.encoder.width = s;
        self.encoder.height = s;
        self.decoder.image_channels = 2 * self.encoder.channels;
        self.decoder.image_tokens = s * s;
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        let s = self.extractor.output_size();
        if self.encoder.channels != self.extractor.out_channels || self.encoder.width != s || self.encoder.height != s {
            return Err(SftError::Config(format!(
                "encoder expects [{}, {}, {}] features, extractor yields [{}, {s}, {s}]",
                self.encoder.channels, self.encoder.height, self.encoder.width, self.extractor.out_channels
            )));
        }
        if self.decoder.image_channels != 2 * self.encoder.channels
            || self.decoder.image_tokens != self.encoder.width * self.encoder.height
        {
            return Err(SftError::Config(format!(
                "decoder expects {} image tokens of width {}, encoder yields {} of width {}",
                self.decoder.image_tokens,
                self.decoder.image_channels,
                self.encoder.width * self.encoder.height,
                2 * self.encoder.channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub extractor: ExtractorParams<T>,
    pub encoder: Vec<SftLayerParams<T>>,
    pub decoder: DecoderParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            extractor: self.extractor.map(f),
            encoder: self.encoder.iter().map(|l| l.map(f)).collect(),
            decoder: self.decoder.map(f),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut Visitor<'a, '_, T>) {
        self.extractor.visit("extractor.", f);
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("encoder.layer{i}."), f);
        }
        self.decoder.visit("decoder.", f);
    }

    pub fn visit_mut(&mut self, f: &mut VisitorMut<'_, T>) {
        self.extractor.visit_mut("extractor.", f);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&format!("encoder.layer{i}."), f);
        }
        self.decoder.visit_mut("decoder.", f);
    }

    /// Leaves in visit order.
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(ModelParams {
            extractor: ExtractorParams::init(&cfg.extractor, rng),
            encoder: (0..cfg.encoder.depth).map(|_| SftLayerParams::init(&cfg.encoder, rng)).collect(),
            decoder: DecoderParams::init(&cfg.decoder, rng),
        })
    }

    /// Parameters seeded from `seed` alone.
    pub fn seeded(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// All-zero parameters with the extents `cfg` requires.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self::seeded(cfg, 0)?.map(&mut |t| Tensor::zeros(t.shape())))
    }

    pub fn element_count(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }

    /// Checks every leaf extent against `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = Self::zeros(cfg)?;
        let names = expect.names();
        let (have, want) = (self.leaves(), expect.leaves());
        if have.len() != want.len() {
            return Err(SftError::Config(format!(
                "parameter set has {} tensors, config needs {}",
                have.len(),
                want.len()
            )));
        }
        for ((h, w), name) in have.iter().zip(&want).zip(&names) {
            if h.shape() != w.shape() {
                return Err(SftError::Contract(format!(
                    "parameter {name} has shape {:?}, config needs {:?}",
                    h.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }

    /// Graph leaves for every parameter, in visit order.
    pub fn to_graph(&self, g: &mut Graph) -> ModelParams<Var> {
        self.map(&mut |t| g.leaf(t.clone()))
    }
}

/// Both images to decoder memory `[W*H, d_embed]`.
pub fn image_memory_graph(g: &mut Graph, img1: Var, img2: Var, p: &ModelParams<Var>, cfg: &ModelConfig) -> Result<Var> {
    let f1 = extract_graph(g, img1, &p.extractor, &cfg.extractor)?;
    let f2 = extract_graph(g, img2, &p.extractor, &cfg.extractor)?;
    let encoded = encode_graph(g, f1, f2, &p.encoder, &cfg.encoder)?;
    decoder::image_tokens_graph(g, encoded, &p.decoder, &cfg.decoder)
}

/// Teacher-forced mean cross-entropy of `caption` (`<start> .. <end>`).
pub fn caption_loss_graph(
    g: &mut Graph,
    img1: Var,
    img2: Var,
    caption: &CaptionSequence,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let ids = caption.ids();
    if ids.len() < 2 || ids.len() > cfg.decoder.max_len {
        return Err(SftError::Contract(format!(
            "training caption length {} outside [2, max_len = {}]",
            ids.len(),
            cfg.decoder.max_len
        )));
    }
    let memory = image_memory_graph(g, img1, img2, p, cfg)?;
    let logits = decoder::logits_graph(g, &ids[..ids.len() - 1], memory, &p.decoder, &cfg.decoder)?;
    g.cross_entropy(logits, &ids[1..], PAD)
}

/// Decoder memory for one image pair.
pub fn image_memory(img1: &Tensor, img2: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.leaf(img1.clone()), g.leaf(img2.clone()));
    let p = params.to_graph(&mut g);
    let out = image_memory_graph(&mut g, a, b, &p, cfg)?;
    Ok(g.value(out).clone())
}

/// Greedy caption for one image pair.
pub fn caption_pair(img1: &Tensor, img2: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<DecodeOutput> {
    let memory = image_memory(img1, img2, params, cfg)?;
    decoder::greedy_decode(&memory, &params.decoder, &cfg.decoder)
}

/// Model configuration, vocabulary and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";

impl Checkpoint {
    /// Writes `config.json`, `vocab.json` and one `<name>.sft1` per tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| SftError::io(dir, e))?;
        let cfg = serde_json::to_string_pretty(&self.config).map_err(|e| SftError::json("model config", e))?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, cfg + "\n").map_err(|e| SftError::io(&path, e))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let mut result = Ok(());
        self.params.visit(&mut |name, t| {
            if result.is_ok() {
                result = format::save(&dir.join(format!("{name}.sft1")), t);
            }
        });
        result
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| SftError::io(&path, e))?;
        let config: ModelConfig =
            serde_json::from_str(&text).map_err(|e| SftError::json(path.display().to_string(), e))?;
        config.validate()?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        if vocab.len() != config.decoder.vocab_size {
            return Err(SftError::Vocabulary(format!(
                "vocabulary has {} tokens, config says {}",
                vocab.len(),
                config.decoder.vocab_size
            )));
        }
        let mut params = ModelParams::zeros(&config)?;
        let mut result = Ok(());
        params.visit_mut(&mut |name, t| {
            if result.is_err() {
                return;
            }
            let path = dir.join(format!("{name}.sft1"));
            result = format::load(&path).and_then(|loaded| {
                if loaded.shape() != t.shape() {
                    return Err(SftError::Format {
                        path: path.clone(),
                        offset: 4,
                        msg: format!("shape {:?} does not match config shape {:?}", loaded.shape(), t.shape()),
                    });
                }
                *t = loaded;
                Ok(())
            });
        });
        result?;
        Ok(Checkpoint { config, vocab, params })
    }

    /// Element count of every tensor stored in a checkpoint directory.
    pub fn stored_elements(dir: &Path) -> Result<BTreeMap<String, usize>> {
        let mut out = BTreeMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| SftError::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| SftError::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == "sft1") {
                let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
                out.insert(stem, format::load(&path)?.numel());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    pub(crate) fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig {
            extractor: ExtractorConfig {
                in_channels: 3,
                input_size: 8,
                hidden: vec![2],
                out_channels: 4,
            },
            encoder: SftConfig {
                reduced_channels: 2,
                ..SftConfig::default()
            },
            decoder: DecoderConfig {
                vocab_size: 6,
                d_embed: 4,
                heads: 2,
                n_layers: 1,
                d_ffn: 4,
                max_len: 5,
                ..DecoderConfig::default()
            },
        };
        cfg.link();
        cfg
    }

    #[test]
    fn default_wiring_is_consistent() {
        let cfg = ModelConfig::with_vocab(30);
        cfg.validate().unwrap();
        assert_eq!(cfg.encoder.feature_shape(), [64, 8, 8]);
        assert_eq!(cfg.decoder.image_channels, 128);
        let mut bad = cfg.clone();
        bad.decoder.image_tokens = 16;
        assert!(matches!(bad.validate(), Err(SftError::Config(_))));
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let cfg = tiny_config();
        let p = ModelParams::seeded(&cfg, 3).unwrap();
        let names = p.names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names[0], "extractor.conv0.weight");
        assert!(names.contains(&"encoder.layer0.wq".to_string()));
        assert!(names.contains(&"decoder.layer0.cross_attn.wo".to_string()));
        p.check(&cfg).unwrap();
    }

    #[test]
    fn identical_images_give_identical_branches() {
        let cfg = tiny_config();
        let p = ModelParams::seeded(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let img = Tensor::uniform(&[3, 8, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let a = g.leaf(img.clone());
        let b = g.leaf(img);
        let pv = p.to_graph(&mut g);
        let f1 = extract_graph(&mut g, a, &pv.extractor, &cfg.extractor).unwrap();
        let f2 = extract_graph(&mut g, b, &pv.extractor, &cfg.extractor).unwrap();
        assert_eq!(g.value(f1), g.value(f2));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config();
        let vocab = Vocabulary::from_captions(["a b"]);
        let ckpt = Checkpoint {
            config: cfg.clone(),
            vocab,
            params: ModelParams::seeded(&cfg, 5).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ckpt);
        let stored: usize = Checkpoint::stored_elements(dir.path()).unwrap().values().sum();
        assert_eq!(stored, ckpt.params.element_count());
    }

    #[test]
    fn end_to_end_gradients() {
        let cfg = tiny_config();
        let params = ModelParams::seeded(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut inputs = vec![
            Tensor::uniform(&[3, 8, 8], 1.0, &mut rng),
            Tensor::uniform(&[3, 8, 8], 1.0, &mut rng),
        ];
        inputs.extend(params.leaves().into_iter().cloned());
        let caption = CaptionSequence(vec![1, 4, 5, 2]);
        let rep = check_gradients(
            |g, v| {
                let mut it = v[2..].iter().copied();
                let p = params.map(&mut |_| it.next().unwrap());
                caption_loss_graph(g, v[0], v[1], &caption, &p, &cfg)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}
