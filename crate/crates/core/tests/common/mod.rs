//! Brute-force reference scorers and the golden caption fixture shared by
//! the metric tests and the acceptance run.
#![allow(dead_code)]

use sft_core::decoder::tokenize;
use sft_core::metrics::EvalPair;

/// Ten generated/reference sets with mixed overlap.
pub const GOLDEN: [(&str, &[&str]); 10] = [
    (
        "a square was added in the top left",
        &["a square was added in the top left", "a new square appears in the top left"],
    ),
    (
        "a bar was removed from the top right",
        &["a bar was removed from the bottom right", "the bar in the bottom right is gone"],
    ),
    ("there is no change", &["there is no change", "the scene is unchanged", "nothing has changed"]),
    (
        "the scene is the same",
        &["the two images are the same", "there is no change"],
    ),
    (
        "a rectangle has been built in the bottom left",
        &["a rectangle was added in the bottom left", "the bottom left now has a rectangle"],
    ),
    (
        "the the the square",
        &["the square in the top left is gone", "a square was removed from the top left"],
    ),
    (
        "a new bar appears in the top left of the top left",
        &["a new bar appears in the top left"],
    ),
    (
        "the bottom right no longer has a square",
        &["the bottom right no longer has a square", "a square was removed from the bottom right"],
    ),
    ("nothing", &["there is no change"]),
    (
        "a square and a bar were added",
        &["a bar was added in the top right", "a new square appears in the bottom left"],
    ),
];

pub fn golden_pairs() -> Vec<EvalPair> {
    GOLDEN.iter().map(|(g, r)| EvalPair::from_text(g, r).unwrap()).collect()
}

pub fn toks(s: &str) -> Vec<String> {
    tokenize(s)
}

/// `(ngram, count)` list built by linear scans.
fn ngram_list(t: &[String], n: usize) -> Vec<(Vec<String>, usize)> {
    let mut out: Vec<(Vec<String>, usize)> = Vec::new();
    if t.len() < n {
        return out;
    }
    for i in 0..=t.len() - n {
        let g = t[i..i + n].to_vec();
        match out.iter_mut().find(|(x, _)| *x == g) {
            Some((_, c)) => *c += 1,
            None => out.push((g, 1)),
        }
    }
    out
}

fn count_in(list: &[(Vec<String>, usize)], g: &[String]) -> usize {
    list.iter().find(|(x, _)| x == g).map(|(_, c)| *c).unwrap_or(0)
}

fn bleu_stats(p: &EvalPair, n: usize) -> (Vec<usize>, Vec<usize>, usize, usize) {
    let mut m = Vec::new();
    let mut t = Vec::new();
    for k in 1..=n {
        let gen = ngram_list(&p.generated, k);
        let refs: Vec<_> = p.references.iter().map(|r| ngram_list(r, k)).collect();
        let mut clipped = 0;
        let mut total = 0;
        for (g, c) in &gen {
            let max_ref = refs.iter().map(|r| count_in(r, g)).max().unwrap_or(0);
            clipped += (*c).min(max_ref);
            total += c;
        }
        m.push(clipped);
        t.push(total);
    }
    let c = p.generated.len();
    let mut best = p.references[0].len();
    for r in &p.references {
        let (d, bd) = ((r.len() as i64 - c as i64).abs(), (best as i64 - c as i64).abs());
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    (m, t, c, best)
}

fn bleu_combine(m: &[usize], t: &[usize], c: usize, r: usize) -> f64 {
    if c == 0 || m.iter().zip(t).any(|(&a, &b)| a == 0 || b == 0) {
        return 0.0;
    }
    let mut prod = 1.0;
    for (&a, &b) in m.iter().zip(t) {
        prod *= (a as f64 / b as f64).powf(1.0 / m.len() as f64);
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * prod
}

pub fn bleu_oracle(p: &EvalPair, n: usize) -> f64 {
    let (m, t, c, r) = bleu_stats(p, n);
    bleu_combine(&m, &t, c, r)
}

pub fn corpus_bleu_oracle(pairs: &[EvalPair], n: usize) -> f64 {
    let (mut m, mut t, mut c, mut r) = (vec![0; n], vec![0; n], 0, 0);
    for p in pairs {
        let (pm, pt, pc, pr) = bleu_stats(p, n);
        for k in 0..n {
            m[k] += pm[k];
            t[k] += pt[k];
        }
        c += pc;
        r += pr;
    }
    bleu_combine(&m, &t, c, r)
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

/// Longest common subsequence by enumerating subsets of the shorter list.
pub fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<&String> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| &short[i]).collect();
        if sub.len() > best && is_subsequence(&sub, long) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_oracle(p: &EvalPair) -> f64 {
    let mut best = 0.0f64;
    for r in p.references.iter().filter(|r| !r.is_empty()) {
        best = best.max(lcs_oracle(&p.generated, r) as f64 / p.generated.len().max(r.len()) as f64);
    }
    best
}

fn chunks(al: &[(usize, usize)]) -> usize {
    let mut c = 0;
    for (i, &(g, r)) in al.iter().enumerate() {
        if i == 0 || !(g == al[i - 1].0 + 1 && r == al[i - 1].1 + 1) {
            c += 1;
        }
    }
    c
}

/// Every injective exact-match alignment; returns (max matches, min chunks
/// among alignments with max matches).
fn best_alignment(g: &[String], r: &[String]) -> (usize, usize) {
    fn rec(i: usize, g: &[String], r: &[String], used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == g.len() {
            let m = cur.len();
            let c = chunks(cur);
            if m > best.0 || (m == best.0 && c < best.1) {
                *best = (m, c);
            }
            return;
        }
        rec(i + 1, g, r, used, cur, best);
        for j in 0..r.len() {
            if !used[j] && r[j] == g[i] {
                used[j] = true;
                cur.push((i, j));
                rec(i + 1, g, r, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, usize::MAX);
    rec(0, g, r, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    best
}

pub fn meteor_oracle(p: &EvalPair) -> f64 {
    let mut best = 0.0f64;
    for r in p.references.iter().filter(|r| !r.is_empty()) {
        let (m, c) = best_alignment(&p.generated, r);
        if m == 0 {
            continue;
        }
        let prec = m as f64 / p.generated.len() as f64;
        let rec = m as f64 / r.len() as f64;
        let f = prec * rec / (0.9 * prec + 0.1 * rec);
        let pen = 0.5 * (c as f64 / m as f64).powi(3);
        best = best.max(f * (1.0 - pen));
    }
    best
}

/// CIDEr-D straight from the TF-IDF definition with list-based maps.
pub fn cider_oracle(corpus: &[EvalPair]) -> Vec<f64> {
    let n_docs = corpus.len() as f64;
    let df = |g: &[String]| -> f64 {
        corpus
            .iter()
            .filter(|p| p.references.iter().any(|r| r.windows(g.len()).any(|w| w == g)))
            .count() as f64
    };
    let vector = |t: &[String], n: usize| -> Vec<(Vec<String>, f64)> {
        ngram_list(t, n)
            .into_iter()
            .map(|(g, c)| {
                let w = c as f64 * (n_docs.ln() - df(&g).max(1.0).ln());
                (g, w)
            })
            .collect()
    };
    corpus
        .iter()
        .map(|p| {
            let mut total = 0.0;
            for r in &p.references {
                let delta = p.generated.len() as f64 - r.len() as f64;
                let gauss = (-delta * delta / 72.0).exp();
                let mut per_n = 0.0;
                for n in 1..=4 {
                    let h = vector(&p.generated, n);
                    let rv = vector(r, n);
                    let mut dot = 0.0;
                    for (g, hw) in &h {
                        let w = rv.iter().find(|(x, _)| x == g).map(|(_, w)| *w).unwrap_or(0.0);
                        dot += hw.min(w) * w;
                    }
                    let nh = h.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
                    let nr = rv.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
                    if nh != 0.0 && nr != 0.0 {
                        dot /= nh * nr;
                    }
                    per_n += dot * gauss;
                }
                total += per_n / 4.0;
            }
            10.0 * total / p.references.len() as f64
        })
        .collect()
}

/// Model configs covering depth, widths, extractor stacks and vocab sizes.
pub fn config_matrix() -> Vec<sft_core::model::ModelConfig> {
    use sft_core::attention::AxialVariant;
    use sft_core::model::ModelConfig;
    let mut out = Vec::new();
    for (vocab, hidden, input, out_ch) in [(12, vec![4], 16, 6), (20, vec![8, 16], 64, 64), (9, vec![], 8, 5)] {
        for depth in [1, 2, 3] {
            for (reduced, d, heads, layers) in [(1, 8, 2, 1), (2, 12, 3, 2)] {
                let mut cfg = ModelConfig::with_vocab(vocab);
                cfg.extractor.hidden = hidden.clone();
                cfg.extractor.input_size = input;
                cfg.extractor.out_channels = out_ch;
                cfg.encoder.depth = depth;
                cfg.encoder.reduced_channels = reduced;
                cfg.encoder.variant = if depth == 2 { AxialVariant::FixedLength { l: 2 } } else { AxialVariant::FullLength };
                cfg.decoder.d_embed = d;
                cfg.decoder.heads = heads;
                cfg.decoder.n_layers = layers;
                cfg.decoder.d_ffn = 2 * d + 1;
                cfg.link();
                out.push(cfg);
            }
        }
    }
    out.push(ModelConfig::with_vocab(40));
    out
}

/// Saves a checkpoint of `cfg` and compares the stored element counts with
/// the analytic parameter count, in total and per reported module.
pub fn checkpoint_matches_count(cfg: &sft_core::model::ModelConfig) -> Result<(), String> {
    use sft_core::decoder::Vocabulary;
    use sft_core::model::{Checkpoint, ModelParams};
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let words: Vec<String> = (0..cfg.decoder.vocab_size - 4).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_captions(words.iter().map(String::as_str));
    let ckpt = Checkpoint {
        config: cfg.clone(),
        vocab,
        params: ModelParams::seeded(cfg, 3).map_err(|e| e.to_string())?,
    };
    ckpt.save(dir.path()).map_err(|e| e.to_string())?;
    let stored = Checkpoint::stored_elements(dir.path()).map_err(|e| e.to_string())?;
    let report = sft_core::accounting::count_params(cfg).map_err(|e| e.to_string())?;
    let total: usize = stored.values().sum();
    if total as u64 != report.total_params {
        return Err(format!("stored {total} vs counted {}", report.total_params));
    }
    for e in &report.entries {
        let owned: usize = stored
            .iter()
            .filter(|(n, _)| *n == &e.name || n.starts_with(&format!("{}.", e.name)))
            .map(|(_, c)| c)
            .sum();
        if owned as u64 != e.params {
            return Err(format!("{}: stored {owned} vs counted {}", e.name, e.params));
        }
    }
    Ok(())
}
