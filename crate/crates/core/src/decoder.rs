//! Transformer caption decoder.
//!
//! Token embeddings plus sinusoidal positions feed `n_layers` post-norm
//! layers, each `LN(x + causal self-attention)`, `LN(x + cross-attention to
//! image tokens)`, `LN(x + FFN)`. A linear head and softmax give the next-token
//! distribution. Decoding is greedy from `<start>` until `<end>` or `max_len`.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SftError};
use crate::params::{fan_in_uniform, param_struct, Visitor, VisitorMut};
use crate::tensor::{multi_head_attention, Tensor, LAYER_NORM_EPS};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Tokens re-joined with single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = SftError;
    fn try_from(f: VocabularyFile) -> Result<Self> {
        Vocabulary::from_tokens(f.tokens)
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        VocabularyFile { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// `tokens[0..4]` must be the reserved tokens; the rest must be unique.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(SftError::Vocabulary(format!(
                "first four tokens must be {RESERVED:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(SftError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Reserved tokens followed by every caption word in sorted order.
    pub fn from_captions<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = captions.into_iter().flat_map(tokenize).collect();
        words.sort();
        words.dedup();
        words.retain(|w| !RESERVED.contains(&w.as_str()));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Self::from_tokens(tokens).expect("reserved prefix and deduplicated words")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `<start> words... <end>`.
    pub fn encode(&self, caption: &str) -> CaptionSequence {
        let mut ids = vec![START];
        ids.extend(tokenize(caption).iter().map(|w| self.id(w)));
        ids.push(END);
        CaptionSequence(ids)
    }

    /// Words of `seq` with reserved tokens other than `<unk>` dropped.
    pub fn decode(&self, seq: &CaptionSequence) -> String {
        seq.0
            .iter()
            .filter(|&&id| !matches!(id, PAD | START | END))
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| SftError::json("vocabulary", e))?;
        std::fs::write(path, text).map_err(|e| SftError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SftError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| SftError::json(path.display().to_string(), e))
    }
}

/// Token ids of one caption.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSequence(pub Vec<usize>);

impl CaptionSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_embed: usize,
    pub heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    /// Channels of the encoder output (`2C`).
    pub image_channels: usize,
    /// Number of image tokens (`W * H`).
    pub image_tokens: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            vocab_size: 4,
            d_embed: 64,
            heads: 4,
            n_layers: 1,
            d_ffn: 128,
            max_len: 24,
            image_channels: 128,
            image_tokens: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < RESERVED.len() {
            return Err(SftError::Config(format!("vocab_size {} < 4", self.vocab_size)));
        }
        if self.heads == 0 || !self.d_embed.is_multiple_of(self.heads) {
            return Err(SftError::Config(format!(
                "d_embed {} not divisible by {} heads",
                self.d_embed, self.heads
            )));
        }
        if !self.d_embed.is_multiple_of(2) {
            return Err(SftError::Config(format!("d_embed {} must be even", self.d_embed)));
        }
        if self.n_layers == 0 || self.d_ffn == 0 || self.image_channels == 0 || self.image_tokens == 0 {
            return Err(SftError::Config("decoder extents must be positive".into()));
        }
        if self.max_len < 2 {
            return Err(SftError::Config("max_len must be >= 2".into()));
        }
        Ok(())
    }
}

param_struct! {
    /// `x W + b` with `W: [in, out]`.
    LinearParams { weight, bias }
}

param_struct! {
    NormParams { gamma, beta }
}

param_struct! {
    /// Per-head projections are the column blocks of `wq`, `wk`, `wv`
    /// (`d_embed x d_embed/h` each); `wo` is `d_embed x d_embed`.
    MhaParams { wq, wk, wv, wo }
}

param_struct! {
    FfnParams { w1, b1, w2, b2 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerParams<T = Tensor> {
    pub self_attn: MhaParams<T>,
    pub norm1: NormParams<T>,
    pub cross_attn: MhaParams<T>,
    pub norm2: NormParams<T>,
    pub ffn: FfnParams<T>,
    pub norm3: NormParams<T>,
}

impl<T> DecoderLayerParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> DecoderLayerParams<U> {
        DecoderLayerParams {
            self_attn: self.self_attn.map(f),
            norm1: self.norm1.map(f),
            cross_attn: self.cross_attn.map(f),
            norm2: self.norm2.map(f),
            ffn: self.ffn.map(f),
            norm3: self.norm3.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut Visitor<'a, '_, T>) {
        self.self_attn.visit(&format!("{prefix}self_attn."), f);
        self.norm1.visit(&format!("{prefix}norm1."), f);
        self.cross_attn.visit(&format!("{prefix}cross_attn."), f);
        self.norm2.visit(&format!("{prefix}norm2."), f);
        self.ffn.visit(&format!("{prefix}ffn."), f);
        self.norm3.visit(&format!("{prefix}norm3."), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        self.self_attn.visit_mut(&format!("{prefix}self_attn."), f);
        self.norm1.visit_mut(&format!("{prefix}norm1."), f);
        self.cross_attn.visit_mut(&format!("{prefix}cross_attn."), f);
        self.norm2.visit_mut(&format!("{prefix}norm2."), f);
        self.ffn.visit_mut(&format!("{prefix}ffn."), f);
        self.norm3.visit_mut(&format!("{prefix}norm3."), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T = Tensor> {
    /// `[V, d_embed]`
    pub token_embed: T,
    /// `[2C, d_embed]` adapter from encoder channels to the model width.
    pub image_proj: LinearParams<T>,
    /// Learned `[W*H, d_embed]` position embedding for image tokens.
    pub image_pos: T,
    pub layers: Vec<DecoderLayerParams<T>>,
    /// `[d_embed, V]`
    pub head: LinearParams<T>,
}

impl<T> DecoderParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> DecoderParams<U> {
        DecoderParams {
            token_embed: f(&self.token_embed),
            image_proj: self.image_proj.map(f),
            image_pos: f(&self.image_pos),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            head: self.head.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut Visitor<'a, '_, T>) {
        f(format!("{prefix}token_embed"), &self.token_embed);
        self.image_proj.visit(&format!("{prefix}image_proj."), f);
        f(format!("{prefix}image_pos"), &self.image_pos);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}layer{i}."), f);
        }
        self.head.visit(&format!("{prefix}head."), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        f(format!("{prefix}token_embed"), &mut self.token_embed);
        self.image_proj.visit_mut(&format!("{prefix}image_proj."), f);
        f(format!("{prefix}image_pos"), &mut self.image_pos);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}layer{i}."), f);
        }
        self.head.visit_mut(&format!("{prefix}head."), f);
    }
}

fn norm(d: usize) -> NormParams {
    NormParams {
        gamma: Tensor::full(&[d], 1.0),
        beta: Tensor::zeros(&[d]),
    }
}

fn mha_init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> MhaParams {
    MhaParams {
        wq: fan_in_uniform(&[d, d], d, rng),
        wk: fan_in_uniform(&[d, d], d, rng),
        wv: fan_in_uniform(&[d, d], d, rng),
        wo: fan_in_uniform(&[d, d], d, rng),
    }
}

impl DecoderParams {
    pub fn init<R: Rng + ?Sized>(cfg: &DecoderConfig, rng: &mut R) -> Self {
        let d = cfg.d_embed;
        let layers = (0..cfg.n_layers)
            .map(|_| DecoderLayerParams {
                self_attn: mha_init(d, rng),
                norm1: norm(d),
                cross_attn: mha_init(d, rng),
                norm2: norm(d),
                ffn: FfnParams {
                    w1: fan_in_uniform(&[d, cfg.d_ffn], d, rng),
                    b1: fan_in_uniform(&[cfg.d_ffn], d, rng),
                    w2: fan_in_uniform(&[cfg.d_ffn, d], cfg.d_ffn, rng),
                    b2: fan_in_uniform(&[d], cfg.d_ffn, rng),
                },
                norm3: norm(d),
            })
            .collect();
        DecoderParams {
            token_embed: Tensor::uniform(&[cfg.vocab_size, d], 1.0, rng),
            image_proj: LinearParams {
                weight: fan_in_uniform(&[cfg.image_channels, d], cfg.image_channels, rng),
                bias: fan_in_uniform(&[d], cfg.image_channels, rng),
            },
            image_pos: Tensor::uniform(&[cfg.image_tokens, d], 1.0, rng),
            layers,
            head: LinearParams {
                weight: fan_in_uniform(&[d, cfg.vocab_size], d, rng),
                bias: fan_in_uniform(&[cfg.vocab_size], d, rng),
            },
        }
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(..)`.
pub fn positional_encoding(max_len: usize, d_embed: usize) -> Result<Tensor> {
    if d_embed == 0 || !d_embed.is_multiple_of(2) {
        return Err(SftError::Config(format!("positional encoding needs an even width, got {d_embed}")));
    }
    if max_len == 0 {
        return Err(SftError::Config("positional encoding needs max_len >= 1".into()));
    }
    let mut pe = Tensor::zeros(&[max_len, d_embed]);
    for pos in 0..max_len {
        for i in 0..d_embed / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_embed as f64);
            pe.data_mut()[pos * d_embed + 2 * i] = angle.sin();
            pe.data_mut()[pos * d_embed + 2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

pub fn embed_graph(g: &mut Graph, ids: &[usize], p: &DecoderParams<Var>, cfg: &DecoderConfig) -> Result<Var> {
    if ids.is_empty() || ids.len() > cfg.max_len {
        return Err(SftError::Contract(format!(
            "sequence length {} outside [1, max_len = {}]",
            ids.len(),
            cfg.max_len
        )));
    }
    let tokens = g.gather(p.token_embed, ids)?;
    let pe = positional_encoding(ids.len(), cfg.d_embed)?;
    let pe = g.leaf(pe);
    g.add(tokens, pe)
}

pub fn mha_graph(g: &mut Graph, x: Var, kv: Var, p: &MhaParams<Var>, heads: usize, causal: bool) -> Result<Var> {
    let q = g.matmul(x, p.wq)?;
    let k = g.matmul(kv, p.wk)?;
    let v = g.matmul(kv, p.wv)?;
    let h = g.multi_head(q, k, v, heads, causal)?;
    g.matmul(h, p.wo)
}

fn residual_norm(g: &mut Graph, x: Var, sub: Var, n: &NormParams<Var>) -> Result<Var> {
    let sum = g.add(x, sub)?;
    g.layer_norm(sum, n.gamma, n.beta, LAYER_NORM_EPS)
}

pub fn decoder_layer_graph(
    g: &mut Graph,
    t: Var,
    image: Var,
    p: &DecoderLayerParams<Var>,
    heads: usize,
) -> Result<Var> {
    let a = mha_graph(g, t, t, &p.self_attn, heads, true)?;
    let x = residual_norm(g, t, a, &p.norm1)?;
    let c = mha_graph(g, x, image, &p.cross_attn, heads, false)?;
    let x = residual_norm(g, x, c, &p.norm2)?;
    let h = g.linear(x, p.ffn.w1, p.ffn.b1)?;
    let h = g.relu(h);
    let f = g.linear(h, p.ffn.w2, p.ffn.b2)?;
    residual_norm(g, x, f, &p.norm3)
}

/// `[2C, H, W]` encoder output to `[H*W, d_embed]` decoder memory.
pub fn image_tokens_graph(g: &mut Graph, encoded: Var, p: &DecoderParams<Var>, cfg: &DecoderConfig) -> Result<Var> {
    let (c, h, w) = g.value(encoded).dims3()?;
    if c != cfg.image_channels || h * w != cfg.image_tokens {
        return Err(SftError::dim(
            "image_tokens",
            g.value(encoded).shape(),
            &[cfg.image_channels, cfg.image_tokens],
        ));
    }
    let flat = g.reshape(encoded, &[c, h * w])?;
    let tokens = g.transpose(flat)?;
    let proj = g.linear(tokens, p.image_proj.weight, p.image_proj.bias)?;
    g.add(proj, p.image_pos)
}

/// Teacher-forced next-token logits `[n, V]` for input ids.
pub fn logits_graph(
    g: &mut Graph,
    ids: &[usize],
    image: Var,
    p: &DecoderParams<Var>,
    cfg: &DecoderConfig,
) -> Result<Var> {
    let mut x = embed_graph(g, ids, p, cfg)?;
    for layer in &p.layers {
        x = decoder_layer_graph(g, x, image, layer, cfg.heads)?;
    }
    g.linear(x, p.head.weight, p.head.bias)
}

fn leaves(g: &mut Graph, p: &DecoderParams) -> DecoderParams<Var> {
    p.map(&mut |t| g.leaf(t.clone()))
}

pub fn embed(tokens: &CaptionSequence, params: &DecoderParams, cfg: &DecoderConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = leaves(&mut g, params);
    let out = embed_graph(&mut g, tokens.ids(), &p, cfg)?;
    Ok(g.value(out).clone())
}

pub fn masked_mha(x: &Tensor, kv: &Tensor, causal: bool, params: &MhaParams, heads: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, kvv) = (g.leaf(x.clone()), g.leaf(kv.clone()));
    let p = params.map(&mut |t| g.leaf(t.clone()));
    let out = mha_graph(&mut g, xv, kvv, &p, heads, causal)?;
    Ok(g.value(out).clone())
}

pub fn decoder_layer(t: &Tensor, image_tokens: &Tensor, params: &DecoderLayerParams, heads: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (tv, iv) = (g.leaf(t.clone()), g.leaf(image_tokens.clone()));
    let p = params.map(&mut |x| g.leaf(x.clone()));
    let out = decoder_layer_graph(&mut g, tv, iv, &p, heads)?;
    Ok(g.value(out).clone())
}

/// Row-wise softmax of `t W + b`.
pub fn project_vocab(t: &Tensor, head: &LinearParams) -> Result<Tensor> {
    Ok(t.matmul(&head.weight)?.add_row(&head.bias)?.softmax_last())
}

pub fn image_tokens(encoded: &Tensor, params: &DecoderParams, cfg: &DecoderConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = g.leaf(encoded.clone());
    let p = leaves(&mut g, params);
    let out = image_tokens_graph(&mut g, e, &p, cfg)?;
    Ok(g.value(out).clone())
}

pub fn teacher_forced_logits(
    ids: &[usize],
    image_tokens: &Tensor,
    params: &DecoderParams,
    cfg: &DecoderConfig,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let img = g.leaf(image_tokens.clone());
    let p = leaves(&mut g, params);
    let out = logits_graph(&mut g, ids, img, &p, cfg)?;
    Ok(g.value(out).clone())
}

/// Step-by-step decoder with cached self-attention keys and values.
pub struct IncrementalDecoder<'a> {
    params: &'a DecoderParams,
    cfg: &'a DecoderConfig,
    positions: Tensor,
    cross: Vec<(Tensor, Tensor)>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

fn norm_row(x: &Tensor, n: &NormParams) -> Result<Tensor> {
    x.layer_norm(&n.gamma, &n.beta, LAYER_NORM_EPS)
}

impl<'a> IncrementalDecoder<'a> {
    pub fn new(image_tokens: &Tensor, params: &'a DecoderParams, cfg: &'a DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (m, d) = image_tokens.dims2()?;
        if d != cfg.d_embed || m != cfg.image_tokens {
            return Err(SftError::dim(
                "IncrementalDecoder",
                image_tokens.shape(),
                &[cfg.image_tokens, cfg.d_embed],
            ));
        }
        let cross = params
            .layers
            .iter()
            .map(|l| {
                Ok((
                    image_tokens.matmul(&l.cross_attn.wk)?,
                    image_tokens.matmul(&l.cross_attn.wv)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(IncrementalDecoder {
            params,
            cfg,
            positions: positional_encoding(cfg.max_len, cfg.d_embed)?,
            cross,
            keys: vec![Vec::new(); params.layers.len()],
            values: vec![Vec::new(); params.layers.len()],
            pos: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds `token` at the next position and returns its next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let d = self.cfg.d_embed;
        if self.pos >= self.cfg.max_len {
            return Err(SftError::Contract(format!("decoder cache full at max_len {}", self.cfg.max_len)));
        }
        if token >= self.cfg.vocab_size {
            return Err(SftError::Vocabulary(format!("token id {token} >= vocabulary size {}", self.cfg.vocab_size)));
        }
        let mut x = Tensor::new(
            vec![1, d],
            self.params
                .token_embed
                .row(token)
                .iter()
                .zip(self.positions.row(self.pos))
                .map(|(a, b)| a + b)
                .collect(),
        )?;
        self.pos += 1;
        let heads = self.cfg.heads;
        for (li, layer) in self.params.layers.iter().enumerate() {
            let sa = &layer.self_attn;
            self.keys[li].extend_from_slice(x.matmul(&sa.wk)?.data());
            self.values[li].extend_from_slice(x.matmul(&sa.wv)?.data());
            let k = Tensor::new(vec![self.pos, d], self.keys[li].clone())?;
            let v = Tensor::new(vec![self.pos, d], self.values[li].clone())?;
            let (a, _) = multi_head_attention(&x.matmul(&sa.wq)?, &k, &v, heads, false)?;
            x = norm_row(&x.add(&a.matmul(&sa.wo)?)?, &layer.norm1)?;

            let ca = &layer.cross_attn;
            let (ck, cv) = &self.cross[li];
            let (c, _) = multi_head_attention(&x.matmul(&ca.wq)?, ck, cv, heads, false)?;
            x = norm_row(&x.add(&c.matmul(&ca.wo)?)?, &layer.norm2)?;

            let ffn = &layer.ffn;
            let h = x.matmul(&ffn.w1)?.add_row(&ffn.b1)?.map(|v| v.max(0.0));
            let f = h.matmul(&ffn.w2)?.add_row(&ffn.b2)?;
            x = norm_row(&x.add(&f)?, &layer.norm3)?;
        }
        Ok(x.matmul(&self.params.head.weight)?
            .add_row(&self.params.head.bias)?
            .into_data())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub sequence: CaptionSequence,
    /// Stopped at `max_len` without emitting `<end>`.
    pub truncated: bool,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(image_tokens: &Tensor, params: &DecoderParams, cfg: &DecoderConfig) -> Result<DecodeOutput> {
    greedy_decode_with(image_tokens, params, cfg, |_, _| {})
}

/// Greedy decoding where `hook(step, logits)` may edit the logits that pick
/// the token at output position `step + 1`.
pub fn greedy_decode_with(
    image_tokens: &Tensor,
    params: &DecoderParams,
    cfg: &DecoderConfig,
    mut hook: impl FnMut(usize, &mut [f64]),
) -> Result<DecodeOutput> {
    let mut dec = IncrementalDecoder::new(image_tokens, params, cfg)?;
    let mut ids = vec![START];
    while ids.len() < cfg.max_len {
        let mut logits = dec.step(*ids.last().unwrap())?;
        hook(ids.len() - 1, &mut logits);
        let next = argmax(&logits);
        ids.push(next);
        if next == END {
            return Ok(DecodeOutput {
                sequence: CaptionSequence(ids),
                truncated: false,
            });
        }
    }
    Ok(DecodeOutput {
        sequence: CaptionSequence(ids),
        truncated: true,
    })
}


#[cfg(test)]
mod grad_tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn caption_loss_gradients() {
        let cfg = DecoderConfig {
            vocab_size: 7,
            d_embed: 4,
            heads: 2,
            n_layers: 1,
            d_ffn: 6,
            max_len: 6,
            image_channels: 3,
            image_tokens: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = DecoderParams::init(&cfg, &mut rng);
        let encoded = Tensor::uniform(&[3, 2, 2], 1.0, &mut rng);
        let mut inputs = vec![encoded];
        params.visit("", &mut |_, t| inputs.push(t.clone()));
        let rep = check_gradients(
            |g, v| {
                let mut it = v[1..].iter().copied();
                let p = params.map(&mut |_| it.next().unwrap());
                let img = image_tokens_graph(g, v[0], &p, &cfg)?;
                let logits = logits_graph(g, &[START, 4, 5, 6], img, &p, &cfg)?;
                g.cross_entropy(logits, &[4, 5, PAD, END], PAD)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}
