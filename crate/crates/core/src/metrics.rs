//! Caption metrics: BLEU-N, ROUGE-L, METEOR, CIDEr-D and change/no-change
//! classification accuracy.
//!
//! All scorers work on the token lists produced by
//! [`tokenize`](crate::decoder::tokenize).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::is_no_change_caption;
use crate::decoder::tokenize;
use crate::error::{Result, SftError};

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_THETA: f64 = 3.0;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;
pub const CIDER_MAX_N: usize = 4;

/// A generated caption and its references, already tokenized.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub generated: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(generated: Vec<String>, references: Vec<Vec<String>>) -> Result<Self> {
        if references.iter().all(|r| r.is_empty()) {
            return Err(SftError::Contract("evaluation pair needs a nonempty reference".into()));
        }
        Ok(EvalPair { generated, references })
    }

    /// Tokenizes raw caption strings.
    pub fn from_text(generated: &str, references: &[&str]) -> Result<Self> {
        Self::new(tokenize(generated), references.iter().map(|r| tokenize(r)).collect())
    }

    fn nonempty_refs(&self) -> impl Iterator<Item = &Vec<String>> {
        self.references.iter().filter(|r| !r.is_empty())
    }
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

pub fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and the number of generated n-grams.
fn clipped_matches(pair: &EvalPair, n: usize) -> (usize, usize) {
    let gen = ngram_counts(&pair.generated, n);
    let refs: Vec<Counts> = pair.references.iter().map(|r| ngram_counts(r, n)).collect();
    let matched = gen
        .iter()
        .map(|(g, &c)| c.min(refs.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0)))
        .sum();
    (matched, pair.generated.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`; ties go to the shorter reference.
fn closest_ref_len(pair: &EvalPair) -> usize {
    let c = pair.generated.len() as i64;
    pair.references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&r| ((r as i64 - c).abs(), r))
        .unwrap_or(0)
}

fn bleu_from_stats(matched: &[usize], totals: &[usize], c: usize, r: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let n = matched.len() as f64;
    let mut log_sum = 0.0;
    for (&m, &t) in matched.iter().zip(totals) {
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln() / n;
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_sum.exp()
}

/// Sentence BLEU-N with uniform weights and brevity penalty.
pub fn bleu_n(pair: &EvalPair, n: usize) -> f64 {
    if pair.generated.is_empty() {
        log::warn!("BLEU of an empty generated caption is 0");
        return 0.0;
    }
    let (m, t): (Vec<usize>, Vec<usize>) = (1..=n).map(|k| clipped_matches(pair, k)).unzip();
    bleu_from_stats(&m, &t, pair.generated.len(), closest_ref_len(pair))
}

/// Corpus BLEU-N: clipped counts, generated lengths and closest reference
/// lengths are summed over pairs before combining.
pub fn corpus_bleu(pairs: &[EvalPair], n: usize) -> f64 {
    let mut matched = vec![0; n];
    let mut totals = vec![0; n];
    let (mut c, mut r) = (0, 0);
    for p in pairs {
        if p.generated.is_empty() {
            log::warn!("empty generated caption in BLEU corpus");
        }
        for k in 1..=n {
            let (m, t) = clipped_matches(p, k);
            matched[k - 1] += m;
            totals[k - 1] += t;
        }
        c += p.generated.len();
        r += closest_ref_len(p);
    }
    bleu_from_stats(&matched, &totals, c, r)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `LCS(g, r) / max(|g|, |r|)`, best over references.
pub fn rouge_l(pair: &EvalPair) -> f64 {
    if pair.generated.is_empty() {
        log::warn!("ROUGE-L of an empty generated caption is 0");
        return 0.0;
    }
    pair.nonempty_refs()
        .map(|r| lcs_len(&pair.generated, r) as f64 / pair.generated.len().max(r.len()) as f64)
        .fold(0.0, f64::max)
}

/// Standard F-measure ROUGE-L, `(1 + b^2) P R / (R + b^2 P)` with LCS-based
/// precision and recall, best over references.
pub fn rouge_l_f(pair: &EvalPair, beta: f64) -> f64 {
    if pair.generated.is_empty() {
        return 0.0;
    }
    pair.nonempty_refs()
        .map(|r| {
            let lcs = lcs_len(&pair.generated, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let (p, rec) = (lcs / pair.generated.len() as f64, lcs / r.len() as f64);
            (1.0 + beta * beta) * p * rec / (rec + beta * beta * p)
        })
        .fold(0.0, f64::max)
}

/// Number of chunks of an alignment given as `(gen, ref)` positions sorted by
/// generated position.
pub fn count_chunks(alignment: &[(usize, usize)]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// Search budget for the minimum-chunk alignment before falling back to a
/// greedy alignment.
const ALIGN_BUDGET: usize = 200_000;

struct Aligner<'a> {
    gen: &'a [String],
    candidates: Vec<Vec<usize>>,
    target: usize,
    used: Vec<bool>,
    current: Vec<(usize, usize)>,
    best: Option<(usize, Vec<(usize, usize)>)>,
    nodes: usize,
}

impl Aligner<'_> {
    fn search(&mut self, i: usize, unmatched_left: usize) {
        self.nodes += 1;
        if self.nodes > ALIGN_BUDGET {
            return;
        }
        let chunks = count_chunks(&self.current);
        if self.best.as_ref().is_some_and(|(b, _)| chunks >= *b && !self.current.is_empty()) {
            return;
        }
        if i == self.gen.len() {
            if self.current.len() == self.target {
                self.best = Some((chunks, self.current.clone()));
            }
            return;
        }
        for k in 0..self.candidates[i].len() {
            let j = self.candidates[i][k];
            if !self.used[j] {
                self.used[j] = true;
                self.current.push((i, j));
                self.search(i + 1, unmatched_left);
                self.current.pop();
                self.used[j] = false;
            }
        }
        // leaving token i unmatched is only allowed while a maximal
        // alignment stays reachable
        if unmatched_left > 0 {
            self.search(i + 1, unmatched_left - 1);
        }
    }
}

/// Maximum exact-unigram alignment with the fewest chunks.
pub fn align(gen: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut ref_counts: HashMap<&String, usize> = HashMap::new();
    for w in reference {
        *ref_counts.entry(w).or_insert(0) += 1;
    }
    let mut gen_counts: HashMap<&String, usize> = HashMap::new();
    for w in gen {
        *gen_counts.entry(w).or_insert(0) += 1;
    }
    let target: usize = gen_counts
        .iter()
        .map(|(w, &c)| c.min(ref_counts.get(w).copied().unwrap_or(0)))
        .sum();
    let candidates: Vec<Vec<usize>> = gen
        .iter()
        .map(|w| reference.iter().enumerate().filter(|(_, r)| *r == w).map(|(j, _)| j).collect())
        .collect();
    let mut a = Aligner {
        gen,
        candidates,
        target,
        used: vec![false; reference.len()],
        current: Vec::new(),
        best: None,
        nodes: 0,
    };
    a.search(0, gen.len() - target.min(gen.len()));
    match a.best {
        Some((_, alignment)) if a.nodes <= ALIGN_BUDGET => alignment,
        _ => {
            log::warn!("alignment search budget exhausted, using greedy alignment");
            greedy_align(gen, reference)
        }
    }
}

/// Left-to-right alignment preferring to extend the current chunk.
fn greedy_align(gen: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (i, w) in gen.iter().enumerate() {
        let next = out.last().map(|&(_, j)| j + 1);
        let pick = next
            .filter(|&j| j < reference.len() && !used[j] && &reference[j] == w)
            .or_else(|| (0..reference.len()).find(|&j| !used[j] && &reference[j] == w));
        if let Some(j) = pick {
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// METEOR against one reference.
pub fn meteor_single(gen: &[String], reference: &[String]) -> f64 {
    if gen.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let alignment = align(gen, reference);
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / gen.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (count_chunks(&alignment) as f64 / m as f64).powf(METEOR_THETA);
    f * (1.0 - penalty)
}

/// Best METEOR over references.
pub fn meteor(pair: &EvalPair) -> f64 {
    if pair.generated.is_empty() {
        log::warn!("METEOR of an empty generated caption is 0");
        return 0.0;
    }
    pair.nonempty_refs()
        .map(|r| meteor_single(&pair.generated, r))
        .fold(0.0, f64::max)
}

type TfIdf<'a> = Vec<BTreeMap<&'a [String], f64>>;

struct CiderVector<'a> {
    vec: TfIdf<'a>,
    norm: Vec<f64>,
    len: usize,
}

fn cider_vector<'a>(tokens: &'a [String], df: &HashMap<&'a [String], usize>, log_n: f64) -> CiderVector<'a> {
    let mut vec = Vec::with_capacity(CIDER_MAX_N);
    let mut norm = Vec::with_capacity(CIDER_MAX_N);
    for n in 1..=CIDER_MAX_N {
        let weights: BTreeMap<&[String], f64> = ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                (g, tf as f64 * (log_n - d.ln()))
            })
            .collect();
        norm.push(weights.values().map(|w| w * w).sum::<f64>().sqrt());
        vec.push(weights);
    }
    CiderVector {
        vec,
        norm,
        len: tokens.len(),
    }
}

fn cider_sim(hyp: &CiderVector, r: &CiderVector) -> f64 {
    let delta = hyp.len as f64 - r.len as f64;
    let gauss = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..CIDER_MAX_N {
        let mut val: f64 = hyp.vec[n]
            .iter()
            .map(|(g, &h)| {
                let rv = r.vec[n].get(g).copied().unwrap_or(0.0);
                h.min(rv) * rv
            })
            .sum();
        if hyp.norm[n] != 0.0 && r.norm[n] != 0.0 {
            val /= hyp.norm[n] * r.norm[n];
        }
        total += val * gauss;
    }
    total / CIDER_MAX_N as f64
}

/// Per-pair CIDEr-D scores; document frequencies count pairs whose
/// references contain an n-gram.
pub fn cider_d(corpus: &[EvalPair]) -> Vec<f64> {
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for p in corpus {
        let mut seen: BTreeSet<&[String]> = BTreeSet::new();
        for r in &p.references {
            for n in 1..=CIDER_MAX_N {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    corpus
        .iter()
        .map(|p| {
            let hyp = cider_vector(&p.generated, &df, log_n);
            let mut sims: Vec<f64> = p
                .references
                .iter()
                .map(|r| cider_sim(&hyp, &cider_vector(r, &df, log_n)))
                .collect();
            // summing in sorted order keeps the score independent of reference order
            sims.sort_by(f64::total_cmp);
            CIDER_SCALE * sims.iter().sum::<f64>() / p.references.len() as f64
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Truth {
    #[serde(rename = "change")]
    Change,
    #[serde(rename = "no-change")]
    NoChange,
}

impl Truth {
    pub fn of_caption(caption: &str) -> Truth {
        if is_no_change_caption(caption) {
            Truth::NoChange
        } else {
            Truth::Change
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeAccuracy {
    pub change: f64,
    pub no_change: f64,
    pub total: f64,
}

/// A caption is predicted "no-change" iff it is in the no-change pool.
/// A class with no examples scores 0.
pub fn change_accuracy(predictions: &[(String, Truth)]) -> ChangeAccuracy {
    let mut hits = [0usize; 2];
    let mut counts = [0usize; 2];
    for (caption, truth) in predictions {
        let k = match truth {
            Truth::Change => 0,
            Truth::NoChange => 1,
        };
        counts[k] += 1;
        if Truth::of_caption(caption) == *truth {
            hits[k] += 1;
        }
    }
    let ratio = |h: usize, c: usize| if c == 0 { 0.0 } else { h as f64 / c as f64 };
    ChangeAccuracy {
        change: ratio(hits[0], counts[0]),
        no_change: ratio(hits[1], counts[1]),
        total: ratio(hits[0] + hits[1], counts[0] + counts[1]),
    }
}

/// One line of an evaluation input file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub generated: String,
    pub references: Vec<String>,
    pub truth: Truth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub image_id: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider_d: f64,
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider_d: f64,
    pub change_accuracy: f64,
    pub no_change_accuracy: f64,
    pub total_accuracy: f64,
    /// Generated caption equals one of its references after normalization.
    pub exact_match: f64,
    pub pairs: usize,
    /// Pairs whose generated caption was empty (scored 0).
    pub empty_generated: usize,
}

/// Scores a corpus; BLEU is corpus-level, the rest are pair means.
pub fn evaluate(records: &[EvalRecord]) -> Result<(MetricReport, Vec<PairScores>)> {
    if records.is_empty() {
        return Err(SftError::Contract("evaluation needs at least one record".into()));
    }
    let pairs: Vec<EvalPair> = records
        .iter()
        .map(|r| {
            EvalPair::new(tokenize(&r.generated), r.references.iter().map(|c| tokenize(c)).collect())
                .map_err(|e| SftError::Contract(format!("{}: {e}", r.image_id)))
        })
        .collect::<Result<_>>()?;
    let cider = cider_d(&pairs);
    let per_pair: Vec<PairScores> = records
        .iter()
        .zip(&pairs)
        .zip(&cider)
        .map(|((rec, p), &c)| PairScores {
            image_id: rec.image_id.clone(),
            bleu4: bleu_n(p, 4),
            rouge_l: rouge_l(p),
            meteor: meteor(p),
            cider_d: c,
            exact: p.references.contains(&p.generated),
        })
        .collect();
    let acc = change_accuracy(
        &records
            .iter()
            .map(|r| (r.generated.clone(), r.truth))
            .collect::<Vec<_>>(),
    );
    let col = |f: fn(&PairScores) -> f64| mean(&per_pair.iter().map(f).collect::<Vec<_>>());
    let report = MetricReport {
        bleu1: corpus_bleu(&pairs, 1),
        bleu2: corpus_bleu(&pairs, 2),
        bleu3: corpus_bleu(&pairs, 3),
        bleu4: corpus_bleu(&pairs, 4),
        rouge_l: col(|p| p.rouge_l),
        meteor: col(|p| p.meteor),
        cider_d: mean(&cider),
        change_accuracy: acc.change,
        no_change_accuracy: acc.no_change,
        total_accuracy: acc.total,
        exact_match: col(|p| if p.exact { 1.0 } else { 0.0 }),
        pairs: pairs.len(),
        empty_generated: pairs.iter().filter(|p| p.generated.is_empty()).count(),
    };
    Ok((report, per_pair))
}
