mod common;

use sft_core::accounting::count_params;
use sft_core::data::generate_dataset;
use sft_core::decoder::Vocabulary;
use sft_core::model::{caption_pair, Checkpoint, ModelConfig, ModelParams};
use sft_core::train::{train, AdamConfig, TrainConfig};

fn small_config(vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::with_vocab(vocab);
    cfg.extractor.input_size = 64;
    cfg.extractor.hidden = vec![4, 8];
    cfg.extractor.out_channels = 8;
    cfg.encoder.reduced_channels = 2;
    cfg.decoder.d_embed = 16;
    cfg.decoder.heads = 2;
    cfg.decoder.d_ffn = 32;
    cfg.link();
    cfg
}

fn toy_set(n: usize) -> (Vec<sft_core::data::Sample>, Vocabulary) {
    let samples: Vec<_> = generate_dataset(n, 1).unwrap().into_iter().map(|s| s.sample).collect();
    let vocab = Vocabulary::from_captions(samples.iter().flat_map(|s| s.captions.iter().map(String::as_str)));
    (samples, vocab)
}

#[test]
fn checkpoint_elements_equal_counted_params() {
    for cfg in common::config_matrix() {
        cfg.validate().unwrap();
        common::checkpoint_matches_count(&cfg).unwrap();
    }
}

#[test]
fn doubling_depth_doubles_attention_stack() {
    for cfg in common::config_matrix() {
        let mut one = cfg.clone();
        one.encoder.depth = 1;
        let mut two = cfg.clone();
        two.encoder.depth = 2;
        let p1 = count_params(&one).unwrap().attention_stack_params();
        let p2 = count_params(&two).unwrap().attention_stack_params();
        assert_eq!(p2, 2 * p1);
    }
}

#[test]
fn training_is_deterministic() {
    let (samples, vocab) = toy_set(4);
    let cfg = small_config(vocab.len());
    let tc = TrainConfig { steps: 6, batch: 2, ..TrainConfig::default() };
    let run = || {
        let out = train(&samples, &vocab, &cfg, ModelParams::seeded(&cfg, 1).unwrap(), &tc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint { config: cfg.clone(), vocab: vocab.clone(), params: out.params };
        ckpt.save(dir.path()).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        (out.trace, files)
    };
    let (t1, f1) = run();
    let (t2, f2) = run();
    assert_eq!(t1, t2);
    assert_eq!(f1, f2);
}

#[test]
fn memorizes_a_single_pair() {
    let (samples, vocab) = toy_set(1);
    let cfg = small_config(vocab.len());
    let tc = TrainConfig {
        adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
        steps: 300,
        batch: 1,
        ..TrainConfig::default()
    };
    let out = train(&samples, &vocab, &cfg, ModelParams::seeded(&cfg, 2).unwrap(), &tc).unwrap();
    let last = out.trace.last().unwrap().loss;
    assert!(last < 0.05, "final loss {last}");
    let decoded = caption_pair(&samples[0].img1, &samples[0].img2, &out.params, &cfg).unwrap();
    assert_eq!(vocab.decode(&decoded.sequence), samples[0].captions[0]);
}

#[test]
fn early_loss_decreases_for_most_seeds() {
    let (samples, vocab) = toy_set(1);
    let cfg = small_config(vocab.len());
    let mut good = 0;
    for seed in 0..10 {
        let tc = TrainConfig { steps: 10, batch: 1, seed, ..TrainConfig::default() };
        let out = train(&samples, &vocab, &cfg, ModelParams::seeded(&cfg, seed).unwrap(), &tc).unwrap();
        if out.trace.windows(2).all(|w| w[1].loss < w[0].loss) {
            good += 1;
        }
    }
    assert!(good >= 8, "{good}/10 seeds decreased monotonically");
}
