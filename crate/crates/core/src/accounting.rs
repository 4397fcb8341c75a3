//! Analytic parameter and multiply-accumulate counts.
//!
//! One MAC is one multiply plus one accumulate. Softmax, residual adds,
//! normalization and activations are not counted. Submodule names are the
//! checkpoint name prefixes of the tensors they own.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::attention::AxialLayout;
use crate::encoder::SftConfig;
use crate::error::{Result, SftError};
use crate::extractor::GEOMETRY;
use crate::model::ModelConfig;

/// How the encoder attends over the `W*H` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Axial neighborhoods of the configured variant.
    Sparse,
    /// Every pixel attends to every pixel.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

/// Per-layer, per-branch encoder attention costs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCost {
    /// `sum_p |N(p)| * C'` (sparse) or `(W*H)^2 * C'` (dense).
    pub logit_macs: u64,
    /// `sum_p |N(p)| * C` (sparse) or `(W*H)^2 * C` (dense).
    pub aggregate_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub label: String,
    pub attention: AttentionKind,
    /// Teacher-forced caption length used for decoder MACs.
    pub caption_len: usize,
    pub entries: Vec<CostEntry>,
    pub encoder_attention: AttentionCost,
    pub total_params: u64,
    pub total_macs: u64,
    pub config: ModelConfig,
}

impl CostReport {
    /// Parameters of all encoder layers.
    pub fn attention_stack_params(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with("encoder."))
            .map(|e| e.params)
            .sum()
    }

    pub fn entry(&self, name: &str) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Aligned-column text table.
    pub fn to_table(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>14}  {:>16}", "module", "params", "macs");
        for e in &self.entries {
            let _ = writeln!(out, "{:<width$}  {:>14}  {:>16}", e.name, e.params, e.macs);
        }
        let _ = writeln!(out, "{:<width$}  {:>14}  {:>16}", "total", self.total_params, self.total_macs);
        out
    }
}

/// Encoder attention cost of one layer on one branch.
pub fn attention_cost(cfg: &SftConfig, kind: AttentionKind) -> Result<AttentionCost> {
    let members = match kind {
        AttentionKind::Sparse => AxialLayout::new(cfg.width, cfg.height, cfg.variant)?.total_members() as u64,
        AttentionKind::Dense => ((cfg.width * cfg.height) as u64).pow(2),
    };
    Ok(AttentionCost {
        logit_macs: members * cfg.reduced_channels as u64,
        aggregate_macs: members * cfg.channels as u64,
    })
}

/// `sparse / dense` logit-stage MACs as an exact fraction.
pub fn logit_ratio(sparse: &SftConfig, dense: &SftConfig) -> Result<Ratio<u64>> {
    let s = attention_cost(sparse, AttentionKind::Sparse)?.logit_macs;
    let d = attention_cost(dense, AttentionKind::Dense)?.logit_macs;
    Ok(Ratio::new(s, d))
}

fn linear(n: u64, fan_in: u64, fan_out: u64) -> u64 {
    n * fan_in * fan_out
}

/// Parameter and MAC counts for one image pair and a teacher-forced caption
/// of `caption_len` tokens.
pub fn count(cfg: &ModelConfig, caption_len: usize, attention: AttentionKind) -> Result<CostReport> {
    cfg.validate()?;
    if caption_len == 0 {
        return Err(SftError::Config("caption_len must be >= 1".into()));
    }
    let mut entries = Vec::new();

    let k2 = (GEOMETRY.kernel * GEOMETRY.kernel) as u64;
    let mut params = 0;
    let mut macs = 0;
    let mut size = cfg.extractor.input_size;
    for (ci, co) in cfg.extractor.channel_pairs() {
        let (ci, co) = (ci as u64, co as u64);
        size = GEOMETRY.output_extent(size).expect("validated extractor extents");
        params += co * ci * k2 + co;
        macs += 2 * (size * size) as u64 * co * ci * k2;
    }
    entries.push(CostEntry {
        name: "extractor".into(),
        params,
        macs,
    });

    let enc = &cfg.encoder;
    let (c, cr, hw) = (enc.channels as u64, enc.reduced_channels as u64, (enc.width * enc.height) as u64);
    let att = attention_cost(enc, attention)?;
    for i in 0..enc.depth {
        let projection = linear(hw, c, 2 * cr + c);
        entries.push(CostEntry {
            name: format!("encoder.layer{i}"),
            params: 2 * (cr * c + cr) + c * c + c,
            macs: 2 * (projection + att.logit_macs + att.aggregate_macs),
        });
    }

    let dc = &cfg.decoder;
    let (d, v, f, m, n) = (
        dc.d_embed as u64,
        dc.vocab_size as u64,
        dc.d_ffn as u64,
        dc.image_tokens as u64,
        caption_len as u64,
    );
    let ic = dc.image_channels as u64;
    entries.push(CostEntry {
        name: "decoder.token_embed".into(),
        params: v * d,
        macs: 0,
    });
    entries.push(CostEntry {
        name: "decoder.image_proj".into(),
        params: ic * d + d,
        macs: linear(m, ic, d),
    });
    entries.push(CostEntry {
        name: "decoder.image_pos".into(),
        params: m * d,
        macs: 0,
    });
    for i in 0..dc.n_layers {
        let self_attn = linear(n, d, d) * 4 + 2 * (n * (n + 1) / 2) * d;
        let cross_attn = linear(n, d, d) * 2 + linear(m, d, d) * 2 + 2 * n * m * d;
        let ffn = linear(n, d, f) + linear(n, f, d);
        entries.push(CostEntry {
            name: format!("decoder.layer{i}"),
            params: 8 * d * d + (d * f + f + f * d + d) + 6 * d,
            macs: self_attn + cross_attn + ffn,
        });
    }
    entries.push(CostEntry {
        name: "decoder.head".into(),
        params: d * v + v,
        macs: linear(n, d, v),
    });

    let total_params = entries.iter().map(|e| e.params).sum();
    let total_macs = entries.iter().map(|e| e.macs).sum();
    Ok(CostReport {
        label: match attention {
            AttentionKind::Sparse => "sparse".into(),
            AttentionKind::Dense => "dense".into(),
        },
        attention,
        caption_len,
        entries,
        encoder_attention: att,
        total_params,
        total_macs,
        config: cfg.clone(),
    })
}

/// Report at the decoder's `max_len` with sparse attention.
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport> {
    count(cfg, cfg.decoder.max_len, AttentionKind::Sparse)
}

pub fn count_macs(cfg: &ModelConfig, caption_len: usize, attention: AttentionKind) -> Result<CostReport> {
    count(cfg, caption_len, attention)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub baseline: String,
    pub other: String,
    pub quantity: String,
    pub baseline_value: u64,
    pub other_value: u64,
    /// `other / baseline` as `"num/den"`.
    pub exact_ratio: String,
    pub ratio: f64,
    /// `100 * (1 - ratio)`.
    pub reduction_pct: f64,
}

const QUANTITIES: [(&str, fn(&CostReport) -> u64); 5] = [
    ("total_params", |r| r.total_params),
    ("total_macs", |r| r.total_macs),
    ("attention_stack_params", |r| r.attention_stack_params()),
    ("encoder_logit_macs", |r| r.encoder_attention.logit_macs),
    ("encoder_aggregate_macs", |r| r.encoder_attention.aggregate_macs),
];

/// Ratios of every later report against every earlier one.
pub fn compare(reports: &[CostReport]) -> Result<Vec<ComparisonRow>> {
    if reports.len() < 2 {
        return Err(SftError::Contract("compare needs at least two reports".into()));
    }
    let mut rows = Vec::new();
    for (i, a) in reports.iter().enumerate() {
        for b in &reports[i + 1..] {
            for (name, get) in QUANTITIES {
                let (x, y) = (get(a), get(b));
                let (exact, ratio) = if x == 0 {
                    ("undefined".to_string(), f64::NAN)
                } else {
                    let r = Ratio::new(y, x);
                    (format!("{}/{}", r.numer(), r.denom()), y as f64 / x as f64)
                };
                rows.push(ComparisonRow {
                    baseline: a.label.clone(),
                    other: b.label.clone(),
                    quantity: name.into(),
                    baseline_value: x,
                    other_value: y,
                    exact_ratio: exact,
                    ratio,
                    reduction_pct: 100.0 * (1.0 - ratio),
                });
            }
        }
    }
    Ok(rows)
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<12} {:<24} {:>16} {:>16} {:>14} {:>10} {:>10}",
        "baseline", "other", "quantity", "baseline_value", "other_value", "exact", "ratio", "reduction"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:<12} {:<24} {:>16} {:>16} {:>14} {:>10.6} {:>9.2}%",
            r.baseline, r.other, r.quantity, r.baseline_value, r.other_value, r.exact_ratio, r.ratio, r.reduction_pct
        );
    }
    out
}
