//! Adam and the teacher-forced training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Sample;
use crate::decoder::{CaptionSequence, Vocabulary};
use crate::error::{Result, SftError};
use crate::model::{caption_loss_graph, ModelConfig, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(SftError::Contract(format!(
            "adam_step: {} parameters, {} gradients, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(SftError::Contract(format!(
                "adam_step: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (x, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = g + cfg.weight_decay * *x;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, skipping positions whose target is `pad_id`.
pub fn cross_entropy(logits: &Tensor, targets: &CaptionSequence, pad_id: usize) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let out = g.cross_entropy(l, targets.ids(), pad_id)?;
    Ok(g.value(out).data()[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Learning-rate multiplier applied when the epoch loss plateaus.
    pub lr_decay: f64,
    /// Epochs without improvement before the learning rate decays.
    pub plateau_patience: usize,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Stop early once the epoch mean loss drops below this value.
    #[serde(default)]
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            lr_decay: 0.5,
            plateau_patience: 20,
            batch: 4,
            steps: 2000,
            seed: 1,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0) {
            return Err(SftError::Config(format!("lr must be > 0, got {}", self.adam.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(SftError::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.batch == 0 {
            return Err(SftError::Config("batch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<StepRecord>,
}

/// Training pairs with their encoded target captions.
pub fn encode_targets(samples: &[Sample], vocab: &Vocabulary, max_len: usize) -> Result<Vec<CaptionSequence>> {
    samples
        .iter()
        .map(|s| {
            let seq = vocab.encode(&s.captions[0]);
            if seq.len() > max_len {
                return Err(SftError::Contract(format!(
                    "{}: target caption needs {} tokens, max_len is {max_len}",
                    s.image_id,
                    seq.len()
                )));
            }
            Ok(seq)
        })
        .collect()
}

/// Mean loss and gradients of a batch; per-sample gradients are summed in
/// batch order.
pub fn batch_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[(&Sample, &CaptionSequence)],
) -> Result<(f64, Vec<Tensor>)> {
    let mut total = 0.0;
    let mut sum: Vec<Tensor> = params.leaves().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (sample, target) in batch {
        let mut g = Graph::new();
        let a = g.leaf(sample.img1.clone());
        let b = g.leaf(sample.img2.clone());
        let p = params.to_graph(&mut g);
        let loss = caption_loss_graph(&mut g, a, b, target, &p, cfg)?;
        total += g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        for (acc, v) in sum.iter_mut().zip(p.leaves()) {
            *acc = acc.add(&grads.get(*v))?;
        }
    }
    let n = batch.len() as f64;
    Ok((total / n, sum.into_iter().map(|t| t.scale(1.0 / n)).collect()))
}

/// Teacher-forced training on `captions[0]` of every sample.
///
/// Each epoch visits the samples in a fresh seeded order. When the epoch
/// mean loss fails to improve for `plateau_patience` epochs the learning rate
/// is multiplied by `lr_decay`.
pub fn train(
    samples: &[Sample],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    params: ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    params.check(model_cfg)?;
    if samples.is_empty() {
        return Err(SftError::Contract("training needs at least one sample".into()));
    }
    let targets = encode_targets(samples, vocab, model_cfg.decoder.max_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut flat: Vec<Tensor> = params.leaves().into_iter().cloned().collect();
    let mut state = AdamState::new(&flat);
    let mut adam = cfg.adam;
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = Vec::new();
    let (mut epoch_loss, mut epoch_batches) = (0.0, 0usize);
    let (mut best, mut stale) = (f64::INFINITY, 0usize);
    let mut current = params;
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let take = cfg.batch.min(order.len());
        let batch: Vec<(&Sample, &CaptionSequence)> = (0..take)
            .map(|_| {
                let i = order.pop().unwrap();
                (&samples[i], &targets[i])
            })
            .collect();
        let (loss, grads) = batch_gradients(&current, model_cfg, &batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(SftError::Divergence { step, loss });
        }
        adam_step(&mut flat, &grads, &mut state, &adam)?;
        let mut it = flat.iter();
        current = current.map(&mut |_| it.next().unwrap().clone());
        trace.push(StepRecord { step, loss, lr: adam.lr });
        log::debug!("step {step} loss {loss:.6} lr {:.3e}", adam.lr);
        epoch_loss += loss;
        epoch_batches += 1;
        if order.is_empty() {
            let mean = epoch_loss / epoch_batches as f64;
            (epoch_loss, epoch_batches) = (0.0, 0);
            if cfg.target_loss.is_some_and(|t| mean < t) {
                break;
            }
            if mean < best {
                (best, stale) = (mean, 0);
            } else {
                stale += 1;
                if stale >= cfg.plateau_patience {
                    adam.lr *= cfg.lr_decay;
                    stale = 0;
                    log::info!("step {step}: loss plateau at {mean:.6}, lr now {:.3e}", adam.lr);
                }
            }
        }
    }
    Ok(TrainOutcome { params: current, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let before = p.clone();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_size() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, &AdamConfig::default()).unwrap();
        let expect = -1e-4 * (1.0 / (1.0 + 1e-8));
        assert!((p[0].data()[0] - expect).abs() < 1e-18);
        assert!((p[0].data()[0] + 9.999_999_99e-5).abs() < 1e-12);
    }

    #[test]
    fn matches_straight_line_recursion() {
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 1e-3f64, 1e-8f64);
        let gs = [0.3, -1.7];
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, g) in gs.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        let mut p = vec![Tensor::scalar(0.5)];
        let mut s = AdamState::new(&p);
        for g in gs {
            adam_step(&mut p, &[Tensor::scalar(g)], &mut s, &cfg).unwrap();
        }
        assert!((p[0].data()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s, &AdamConfig::default());
        assert!(matches!(err, Err(SftError::Contract(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let zero = Tensor::zeros(&[3, 5]);
        let t = CaptionSequence(vec![4, 2, 1]);
        assert!((cross_entropy(&zero, &t, 0).unwrap() - 5f64.ln()).abs() < 1e-15);

        let mut sharp = Tensor::zeros(&[3, 5]);
        for (r, &c) in t.ids().iter().enumerate() {
            sharp.data_mut()[r * 5 + c] = 60.0;
        }
        assert!(cross_entropy(&sharp, &t, 0).unwrap() < 1e-20);

        let logits = Tensor::matrix(&[&[0.1, -0.4, 2.0], &[1.5, 0.3, -0.2]]).unwrap();
        let t = CaptionSequence(vec![2, 0]);
        let nll = |row: &[f64], k: usize| {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            z.ln() - row[k]
        };
        // the second position is PAD (id 0) and drops out
        let expect = nll(&[0.1, -0.4, 2.0], 2);
        assert!((cross_entropy(&logits, &t, 0).unwrap() - expect).abs() < 1e-12);
        let t = CaptionSequence(vec![2, 1]);
        let expect = (nll(&[0.1, -0.4, 2.0], 2) + nll(&[1.5, 0.3, -0.2], 1)) / 2.0;
        assert!((cross_entropy(&logits, &t, 0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.lr_decay = 0.0;
        assert!(c.validate().is_err());
        c.lr_decay = 1.0;
        c.adam.lr = 0.0;
        assert!(c.validate().is_err());
    }
}
