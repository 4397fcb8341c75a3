mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sft_core::accounting::{self, AttentionKind};
use sft_core::attention::{dense_masked_attention, sparse_focus_attention, AttentionMask};
use sft_core::data::{self, Sample, MANIFEST_FILE};
use sft_core::decoder::Vocabulary;
use sft_core::metrics::{evaluate, EvalRecord, Truth};
use sft_core::model::{caption_pair, Checkpoint, ModelParams};
use sft_core::train::train;
use sft_core::{Result, SftError, Tensor};

use config::RunConfig;

const DEFAULT_SEED: u64 = 1;

#[derive(Parser, Debug)]
#[command(name = "sft", version, about = "Bitemporal change captioning with axial sparse attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic bitemporal caption dataset.
    GenData {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a captioner on a dataset and write a checkpoint directory.
    Train {
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Greedy-decode every pair of a dataset to `decoded.jsonl`.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score captions; writes `metrics.json` and `pairs.csv`.
    Eval {
        /// Output of `decode`, joined with `--data` on image id.
        #[arg(long, requires = "data", conflicts_with = "records")]
        decoded: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// JSONL lines of `{"image_id", "generated", "references"}`.
        #[arg(long, required_unless_present = "decoded")]
        records: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic parameter and MAC counts; writes `cost.json` and `comparison.json`.
    Count {
        #[arg(long, default_value_t = 12)]
        caption_len: usize,
        #[arg(long, default_value_t = 30)]
        vocab: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Operation counts plus local wall-clock of one attention pass.
    Bench {
        #[arg(long, default_value_t = 12)]
        caption_len: usize,
        #[arg(long, default_value_t = 30)]
        vocab: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON config file, merged onto the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.adam.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DecodedLine {
    image_id: String,
    caption: String,
    truncated: bool,
}

#[derive(Deserialize)]
struct RecordLine {
    image_id: String,
    generated: String,
    references: Vec<String>,
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var("SFT_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| SftError::Config(format!("SFT_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> SftError {
    SftError::io(path, e)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SftError::json(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn write_run(out: &Path, subcommand: &str, seed: Option<u64>, config: Value, inputs: Value) -> Result<()> {
    let record = json!({
        "subcommand": subcommand,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "inputs": inputs,
    });
    write_json(&out.join("run.json"), &record)
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn load_samples(data: &Path) -> Result<Vec<Sample>> {
    data::load_manifest(&manifest_path(data))
}

fn gen_data(n: usize, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = seed_or_env(seed)?;
    let samples: Vec<Sample> = data::generate_dataset(n, seed)?.into_iter().map(|s| s.sample).collect();
    create_dir(out)?;
    let manifest = data::write_dataset(out, &samples)?;
    write_run(out, "gen-data", Some(seed), json!({ "n": n, "image_size": data::IMAGE_SIZE }), json!({}))?;
    println!("wrote {} pairs to {}", samples.len(), manifest.display());
    Ok(())
}

fn train_cmd(data: &Path, steps: Option<usize>, seed: Option<u64>, out: &Path, cfg: &ConfigArgs) -> Result<()> {
    let samples = load_samples(data)?;
    let vocab = Vocabulary::from_captions(samples.iter().flat_map(|s| s.captions.iter().map(String::as_str)));
    let mut overrides = cfg.set.clone();
    if let Some(s) = steps {
        overrides.push(format!("train.steps={s}"));
    }
    let seed = seed_or_env(seed)?;
    overrides.push(format!("train.seed={seed}"));
    let run = RunConfig::resolve(vocab.len(), cfg.config.as_deref(), &overrides)?;
    let params = ModelParams::seeded(&run.model, seed)?;
    log::info!("training {} parameters on {} pairs", params.element_count(), samples.len());
    let outcome = train(&samples, &vocab, &run.model, params, &run.train)?;
    create_dir(out)?;
    Checkpoint {
        config: run.model.clone(),
        vocab,
        params: outcome.params,
    }
    .save(out)?;
    write_json(&out.join("trace.json"), &outcome.trace)?;
    write_run(
        out,
        "train",
        Some(seed),
        serde_json::to_value(&run).map_err(|e| SftError::json("run config", e))?,
        json!({ "data": data }),
    )?;
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.loss);
    println!("{} steps, final loss {last:.6}, checkpoint in {}", outcome.trace.len(), out.display());
    Ok(())
}

fn decode_cmd(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let samples = load_samples(data)?;
    create_dir(out)?;
    let path = out.join("decoded.jsonl");
    let mut text = Vec::new();
    for s in &samples {
        let d = caption_pair(&s.img1, &s.img2, &ckpt.params, &ckpt.config)?;
        let line = DecodedLine {
            image_id: s.image_id.clone(),
            caption: ckpt.vocab.decode(&d.sequence),
            truncated: d.truncated,
        };
        serde_json::to_writer(&mut text, &line).map_err(|e| SftError::json("decoded line", e))?;
        text.push(b'\n');
    }
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    write_run(
        out,
        "decode",
        None,
        serde_json::to_value(&ckpt.config).map_err(|e| SftError::json("model config", e))?,
        json!({ "checkpoint": checkpoint, "data": data }),
    )?;
    println!("decoded {} pairs to {}", samples.len(), path.display());
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line).map_err(|e| SftError::Format {
                path: path.to_path_buf(),
                offset,
                msg: format!("line {}: {e}", i + 1),
            })?);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

fn eval_records(decoded: Option<&Path>, data: Option<&Path>, records: Option<&Path>) -> Result<Vec<EvalRecord>> {
    if let Some(path) = records {
        return read_jsonl::<RecordLine>(path)?
            .into_iter()
            .map(|r| {
                let truth = Truth::of_caption(r.references.first().map_or("", String::as_str));
                Ok(EvalRecord {
                    image_id: r.image_id,
                    generated: r.generated,
                    references: r.references,
                    truth,
                })
            })
            .collect();
    }
    let (decoded, data) = (decoded.unwrap(), data.unwrap());
    let samples = load_samples(data)?;
    read_jsonl::<DecodedLine>(decoded)?
        .into_iter()
        .map(|d| {
            let s = samples
                .iter()
                .find(|s| s.image_id == d.image_id)
                .ok_or_else(|| SftError::Contract(format!("decoded id `{}` is not in the dataset", d.image_id)))?;
            Ok(EvalRecord {
                image_id: d.image_id,
                generated: d.caption,
                references: s.captions.clone(),
                truth: Truth::of_caption(&s.captions[0]),
            })
        })
        .collect()
}

fn eval_cmd(decoded: Option<&Path>, data: Option<&Path>, records: Option<&Path>, out: &Path) -> Result<()> {
    let recs = eval_records(decoded, data, records)?;
    let (report, pairs) = evaluate(&recs)?;
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    let csv_path = out.join("pairs.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
    for p in &pairs {
        w.serialize(p).map_err(|e| csv_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| io_err(&csv_path, e))?;
    write_run(
        out,
        "eval",
        None,
        json!({}),
        json!({ "decoded": decoded, "data": data, "records": records }),
    )?;
    println!(
        "BLEU-4 {:.4}  ROUGE-L {:.4}  METEOR {:.4}  CIDEr-D {:.4}  accuracy {:.4}",
        report.bleu4, report.rouge_l, report.meteor, report.cider_d, report.total_accuracy
    );
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> SftError {
    io_err(path, std::io::Error::other(e.to_string()))
}

fn count_cmd(caption_len: usize, vocab: usize, out: &Path, cfg: &ConfigArgs) -> Result<()> {
    let run = RunConfig::resolve(vocab, cfg.config.as_deref(), &cfg.set)?;
    let sparse = accounting::count(&run.model, caption_len, AttentionKind::Sparse)?;
    let dense = accounting::count(&run.model, caption_len, AttentionKind::Dense)?;
    let rows = accounting::compare(&[sparse.clone(), dense])?;
    create_dir(out)?;
    write_json(&out.join("cost.json"), &sparse)?;
    write_json(&out.join("comparison.json"), &rows)?;
    write_run(
        out,
        "count",
        None,
        serde_json::to_value(&run.model).map_err(|e| SftError::json("model config", e))?,
        json!({ "caption_len": caption_len }),
    )?;
    print!("{}", sparse.to_table());
    print!("{}", accounting::comparison_table(&rows));
    Ok(())
}

fn bench_cmd(caption_len: usize, vocab: usize, reps: usize, seed: Option<u64>, out: &Path, cfg: &ConfigArgs) -> Result<()> {
    let seed = seed_or_env(seed)?;
    let run = RunConfig::resolve(vocab, cfg.config.as_deref(), &cfg.set)?;
    let sparse = accounting::count(&run.model, caption_len, AttentionKind::Sparse)?;
    let dense = accounting::count(&run.model, caption_len, AttentionKind::Dense)?;
    let enc = &run.model.encoder;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (c, cr, h, w) = (enc.channels, enc.reduced_channels, enc.height, enc.width);
    let q = Tensor::uniform(&[cr, h, w], 1.0, &mut rng);
    let k = Tensor::uniform(&[cr, h, w], 1.0, &mut rng);
    let v = Tensor::uniform(&[c, h, w], 1.0, &mut rng);
    let f = Tensor::uniform(&[c, h, w], 1.0, &mut rng);
    let mask = AttentionMask::all(h * w);
    let reps = reps.max(1);
    let t = Instant::now();
    for _ in 0..reps {
        sparse_focus_attention(&q, &k, &v, &f, enc.variant, enc.scale_qk)?;
    }
    let sparse_ms = t.elapsed().as_secs_f64() * 1e3 / reps as f64;
    let t = Instant::now();
    for _ in 0..reps {
        dense_masked_attention(&q, &k, &v, &f, &mask, enc.scale_qk)?;
    }
    let dense_ms = t.elapsed().as_secs_f64() * 1e3 / reps as f64;
    let report = json!({
        "operation_counts": {
            "sparse": { "total_params": sparse.total_params, "total_macs": sparse.total_macs, "encoder_attention": sparse.encoder_attention },
            "dense": { "total_params": dense.total_params, "total_macs": dense.total_macs, "encoder_attention": dense.encoder_attention },
        },
        "wall_clock_local_non_comparable": {
            "note": "single attention layer, one branch, this machine only",
            "reps": reps,
            "sparse_ms": sparse_ms,
            "dense_ms": dense_ms,
        },
    });
    create_dir(out)?;
    write_json(&out.join("bench.json"), &report)?;
    write_run(
        out,
        "bench",
        Some(seed),
        serde_json::to_value(&run.model).map_err(|e| SftError::json("model config", e))?,
        json!({ "caption_len": caption_len, "reps": reps }),
    )?;
    println!("encoder attention: sparse {sparse_ms:.3} ms, dense {dense_ms:.3} ms per pass (local timing)");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { n, seed, out } => gen_data(n, seed, &out),
        Command::Train { data, steps, seed, out, cfg } => train_cmd(&data, steps, seed, &out, &cfg),
        Command::Decode { checkpoint, data, out } => decode_cmd(&checkpoint, &data, &out),
        Command::Eval { decoded, data, records, out } => {
            eval_cmd(decoded.as_deref(), data.as_deref(), records.as_deref(), &out)
        }
        Command::Count { caption_len, vocab, out, cfg } => count_cmd(caption_len, vocab, &out, &cfg),
        Command::Bench { caption_len, vocab, reps, seed, out, cfg } => {
            bench_cmd(caption_len, vocab, reps, seed, &out, &cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
