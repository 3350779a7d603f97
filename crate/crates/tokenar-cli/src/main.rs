//! Command-line front end: dataset generation, training, generation,
//! evaluation, ablation, and attention inspection.
//!
//! Every command is driven by one JSON config document plus a few overriding
//! flags, and is reproducible from (config, seed). Exit codes: 0 success,
//! 1 runtime failure, 2 usage or config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tokenar::config::RunConfig;
use tokenar::dataset::{self, DatasetHeader, DatasetStats};
use tokenar::error::TokenArError;
use tokenar::eval::{self, Variant};
use tokenar::inference::{self, DecodeMode, GenerateConfig};
use tokenar::model::{self, ModelParams};
use tokenar::ppm;
use tokenar::rng;
use tokenar::scalar::{FloatWidth, Real};
use tokenar::scene::{self, SceneSample};
use tokenar::sequence::build_training_sequence;
use tokenar::tokenizer::dequantize;
use tokenar::training::{self, TrainOutputs};

#[derive(Parser)]
#[command(name = "tokenar", version, about = "Multi-reference token-level image generation pipeline")]
struct Cli {
    /// Worker threads; 1 is the strict determinism mode. Falls back to the
    /// TOKENAR_THREADS environment variable, then to the core count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a default config document to stdout or a file.
    InitConfig {
        /// Destination path; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic scene dataset and apply the similarity filter.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Override datagen.count.
        #[arg(long)]
        count: Option<usize>,
        /// Override datagen.delta.
        #[arg(long)]
        delta: Option<f64>,
        /// Override datagen.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset directory; writes checkpoint.tkar and metrics.csv.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override training.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Override training.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Train a reduced variant instead of the full method.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Decode one sample's predicted span and write the target image.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Sample index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over a dataset; writes JSON and CSV reports.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the ablation variants under one budget.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        train_dataset: PathBuf,
        #[arg(long)]
        eval_dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of full,no-instruct,no-itd,baseline.
        #[arg(long, default_value = "full,no-instruct,no-itd,baseline")]
        variants: String,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
    /// Export attention traces and per-layer summaries for one sample.
    InspectAttn {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(1),
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

/// Errors surfaced while loading inputs are usage errors.
fn usage(e: TokenArError) -> CliError {
    CliError::Usage(e.to_string())
}

/// Errors surfaced mid-run keep their own classification.
fn runtime(e: TokenArError) -> CliError {
    if e.is_usage() {
        CliError::Usage(e.to_string())
    } else {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("TOKENAR_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global()
    {
        eprintln!("error: failed to build thread pool: {e}");
        return ExitCode::from(1);
    }

    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::InitConfig { out } => {
            let cfg = RunConfig::default();
            match out {
                Some(path) => cfg.to_file(&path).map_err(runtime)?,
                None => println!("{}", serde_json::to_string_pretty(&cfg).unwrap()),
            }
            Ok(())
        }
        Cmd::GenData {
            config,
            out,
            count,
            delta,
            seed,
        } => {
            let mut cfg = load_config(&config.config)?;
            if let Some(c) = count {
                cfg.datagen.count = c;
            }
            if let Some(d) = delta {
                cfg.datagen.delta = d;
            }
            if let Some(s) = seed {
                cfg.datagen.seed = s;
            }
            cfg.validate().map_err(usage)?;
            cmd_gen_data(&cfg, &out)
        }
        Cmd::Train {
            config,
            dataset,
            out,
            steps,
            seed,
            variant,
        } => {
            let mut cfg = load_config(&config.config)?;
            if let Some(s) = steps {
                cfg.training.steps = s;
            }
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            if let Some(v) = variant {
                Variant::parse(&v).map_err(usage)?.apply(&mut cfg);
            }
            cfg.validate().map_err(usage)?;
            match cfg.model.float {
                FloatWidth::F32 => cmd_train::<f32>(&cfg, &dataset, &out),
                FloatWidth::F64 => cmd_train::<f64>(&cfg, &dataset, &out),
            }
        }
        Cmd::Generate {
            config,
            checkpoint,
            dataset,
            index,
            out,
        } => {
            let cfg = load_config(&config.config)?;
            match cfg.model.float {
                FloatWidth::F32 => cmd_generate::<f32>(&cfg, &checkpoint, &dataset, index, &out),
                FloatWidth::F64 => cmd_generate::<f64>(&cfg, &checkpoint, &dataset, index, &out),
            }
        }
        Cmd::Eval {
            config,
            checkpoint,
            dataset,
            out,
        } => {
            let cfg = load_config(&config.config)?;
            match cfg.model.float {
                FloatWidth::F32 => cmd_eval::<f32>(&cfg, &checkpoint, &dataset, &out),
                FloatWidth::F64 => cmd_eval::<f64>(&cfg, &checkpoint, &dataset, &out),
            }
        }
        Cmd::Ablate {
            config,
            train_dataset,
            eval_dataset,
            out,
            variants,
            seeds,
        } => {
            let cfg = load_config(&config.config)?;
            let variants = variants
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| Variant::parse(s.trim()))
                .collect::<tokenar::Result<Vec<_>>>()
                .map_err(usage)?;
            let seeds = seeds
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| CliError::Usage(format!("bad seed: {s}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            match cfg.model.float {
                FloatWidth::F32 => {
                    cmd_ablate::<f32>(&cfg, &train_dataset, &eval_dataset, &out, &variants, &seeds)
                }
                FloatWidth::F64 => {
                    cmd_ablate::<f64>(&cfg, &train_dataset, &eval_dataset, &out, &variants, &seeds)
                }
            }
        }
        Cmd::InspectAttn {
            config,
            checkpoint,
            dataset,
            index,
            out,
        } => {
            let cfg = load_config(&config.config)?;
            match cfg.model.float {
                FloatWidth::F32 => cmd_inspect_attn::<f32>(&cfg, &checkpoint, &dataset, index, &out),
                FloatWidth::F64 => cmd_inspect_attn::<f64>(&cfg, &checkpoint, &dataset, index, &out),
            }
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    RunConfig::from_file(path).map_err(usage)
}

fn load_samples(cfg: &RunConfig, dir: &Path) -> Result<Vec<SceneSample>, CliError> {
    let (header, samples) = dataset::read_dataset(dir).map_err(usage)?;
    if header.k != cfg.tokenizer.k
        || header.patch != cfg.tokenizer.patch
        || header.grid_rows != cfg.grid_rows()
        || header.grid_cols != cfg.grid_cols()
        || header.palette_seed != cfg.tokenizer.palette_seed
    {
        return Err(CliError::Usage(format!(
            "dataset {} (k={}, patch={}, grid={}x{}, palette_seed={}) does not match config (k={}, patch={}, grid={}x{}, palette_seed={})",
            dir.display(),
            header.k,
            header.patch,
            header.grid_rows,
            header.grid_cols,
            header.palette_seed,
            cfg.tokenizer.k,
            cfg.tokenizer.patch,
            cfg.grid_rows(),
            cfg.grid_cols(),
            cfg.tokenizer.palette_seed,
        )));
    }
    Ok(samples.into_iter().map(|(s, _)| s).collect())
}

fn load_params<T: Real>(cfg: &RunConfig, checkpoint: &Path) -> Result<ModelParams<T>, CliError> {
    let model_cfg = cfg.model_config().map_err(usage)?;
    model::load_checkpoint(checkpoint, &model_cfg).map_err(usage)
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let builder = cfg.scene_builder().map_err(usage)?;
    let delta = cfg.datagen.delta;
    let mut r = rng::stream(cfg.datagen.seed, 0xDA7A);
    let mut kept: Vec<(SceneSample, [f64; 2])> = Vec::new();
    let mut relation_histogram = vec![0usize; scene::RELATION_NAMES.len()];
    let candidates = cfg.datagen.count;
    for _ in 0..candidates {
        let (a, b, relation) = scene::random_scene_inputs(&mut r, cfg.tokenizer.k);
        let bg_seed: u64 = rng::next_u64(&mut r);
        let sample = builder
            .compose_scene(&a, &b, relation, bg_seed)
            .map_err(runtime)?;
        let scores = scene::subject_similarities(&sample, &builder.codebook, cfg.tokenizer.patch)
            .map_err(runtime)?;
        if scores[0].min(scores[1]) >= delta {
            relation_histogram[relation as usize] += 1;
            kept.push((sample, scores));
        }
    }
    let header = DatasetHeader {
        version: 1,
        count: kept.len(),
        k: cfg.tokenizer.k,
        patch: cfg.tokenizer.patch,
        grid_rows: cfg.grid_rows(),
        grid_cols: cfg.grid_cols(),
        palette_seed: cfg.tokenizer.palette_seed,
        delta,
    };
    dataset::write_dataset(&kept, out, &header).map_err(runtime)?;
    let stats = DatasetStats {
        candidates,
        passed: kept.len(),
        pass_rate: kept.len() as f64 / candidates.max(1) as f64,
        delta,
        relation_histogram,
    };
    dataset::write_stats(out, &stats).map_err(runtime)?;
    println!(
        "generated {} candidates, kept {} (pass rate {:.3}) at delta {}",
        candidates, stats.passed, stats.pass_rate, delta
    );
    Ok(())
}

fn cmd_train<T: Real>(cfg: &RunConfig, dataset_dir: &Path, out: &Path) -> Result<(), CliError> {
    let samples = load_samples(cfg, dataset_dir)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!(
            "dataset {} holds no samples",
            dataset_dir.display()
        )));
    }
    let layout = cfg.sequence_layout().map_err(usage)?;
    let codebook = cfg.codebook().map_err(usage)?;
    let bundles = samples
        .iter()
        .map(|s| build_training_sequence(s, &layout, &codebook, cfg.tokenizer.patch))
        .collect::<tokenar::Result<Vec<_>>>()
        .map_err(usage)?;
    let model_cfg = cfg.model_config().map_err(usage)?;
    let params = model::init_params::<T>(&model_cfg, cfg.training.seed).map_err(usage)?;
    let outputs = TrainOutputs::new(out).map_err(runtime)?;
    let result = training::train_loop(params, &bundles, &cfg.train_config(), Some(&outputs))
        .map_err(runtime)?;
    let last = result.metrics.last();
    println!(
        "trained {} steps on {} samples; final ce {:.4}, distill {:.4}, total {:.4}, masked accuracy {:.4}",
        result.steps_run,
        samples.len(),
        last.map(|m| m.ce).unwrap_or(f64::NAN),
        last.map(|m| m.distill).unwrap_or(f64::NAN),
        last.map(|m| m.total).unwrap_or(f64::NAN),
        result.final_accuracy,
    );
    println!("checkpoint: {}", outputs.final_checkpoint().display());
    println!("metrics: {}", outputs.metrics_csv.display());
    Ok(())
}

fn cmd_generate<T: Real>(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset_dir: &Path,
    index: usize,
    out: &Path,
) -> Result<(), CliError> {
    let samples = load_samples(cfg, dataset_dir)?;
    let sample = samples.get(index).ok_or_else(|| {
        CliError::Usage(format!(
            "sample index {index} out of range; dataset has {}",
            samples.len()
        ))
    })?;
    let params = load_params::<T>(cfg, checkpoint)?;
    let layout = cfg.sequence_layout().map_err(usage)?;
    let codebook = cfg.codebook().map_err(usage)?;
    let gcfg = GenerateConfig {
        mode: match cfg.generate.mode.as_str() {
            "temperature" => DecodeMode::Temperature {
                tau: cfg.generate.temperature,
                seed: cfg.generate.sample_seed,
            },
            _ => DecodeMode::Greedy,
        },
        top_k: cfg.generate.top_k,
        capture: None,
    };
    let generation = inference::generate(
        &params,
        sample,
        &layout,
        &codebook,
        cfg.tokenizer.patch,
        &gcfg,
    )
    .map_err(runtime)?;

    std::fs::create_dir_all(out).map_err(|e| runtime(TokenArError::io(out, e)))?;
    let image = dequantize(&generation.target, &codebook, cfg.tokenizer.patch).map_err(runtime)?;
    let img_path = out.join(format!("sample_{index:05}_generated.ppm"));
    ppm::write_ppm(&img_path, &image).map_err(runtime)?;
    let span_path = out.join(format!("sample_{index:05}_span.json"));
    let span_json = serde_json::json!({
        "span": generation.span,
        "target_tokens": generation.target.tokens,
    });
    std::fs::write(&span_path, serde_json::to_vec_pretty(&span_json).unwrap())
        .map_err(|e| runtime(TokenArError::io(&span_path, e)))?;
    println!("wrote {} and {}", img_path.display(), span_path.display());
    Ok(())
}

fn cmd_eval<T: Real>(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset_dir: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let samples = load_samples(cfg, dataset_dir)?;
    let params = load_params::<T>(cfg, checkpoint)?;
    let layout = cfg.sequence_layout().map_err(usage)?;
    let codebook = cfg.codebook().map_err(usage)?;
    let report = eval::evaluate(&params, &samples, &layout, &codebook, cfg.tokenizer.patch)
        .map_err(runtime)?;

    std::fs::write(out, serde_json::to_vec_pretty(&report).unwrap())
        .map_err(|e| runtime(TokenArError::io(out, e)))?;
    let csv_path = out.with_extension("csv");
    let mut csv = String::from("metric,value\n");
    csv.push_str(&format!("sample_count,{}\n", report.sample_count));
    csv.push_str(&format!("psnr_full,{}\n", report.psnr_full));
    csv.push_str(&format!("psnr_background,{}\n", report.psnr_background));
    csv.push_str(&format!("token_accuracy,{}\n", report.token_accuracy));
    csv.push_str(&format!("identity_confusion,{}\n", report.identity_confusion));
    csv.push_str(&format!("eval_ce,{}\n", report.eval_ce));
    for (i, v) in report.focus_entropy.iter().enumerate() {
        csv.push_str(&format!("focus_entropy_layer{i},{v}\n"));
    }
    for (i, v) in report.attn_divergence.iter().enumerate() {
        csv.push_str(&format!("attn_divergence_layer{i},{v}\n"));
    }
    std::fs::write(&csv_path, csv).map_err(|e| runtime(TokenArError::io(&csv_path, e)))?;
    println!(
        "evaluated {} samples: psnr {:.2} dB, background psnr {:.2} dB, token accuracy {:.4}, identity confusion {:.4}, eval ce {:.4}",
        report.sample_count,
        report.psnr_full,
        report.psnr_background,
        report.token_accuracy,
        report.identity_confusion,
        report.eval_ce
    );
    println!("wrote {} and {}", out.display(), csv_path.display());
    Ok(())
}

fn cmd_ablate<T: Real>(
    cfg: &RunConfig,
    train_dir: &Path,
    eval_dir: &Path,
    out: &Path,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<(), CliError> {
    let train_samples = load_samples(cfg, train_dir)?;
    let eval_samples = load_samples(cfg, eval_dir)?;
    let rows = eval::run_ablation::<T>(cfg, &train_samples, &eval_samples, variants, seeds)
        .map_err(runtime)?;
    std::fs::create_dir_all(out).map_err(|e| runtime(TokenArError::io(out, e)))?;
    let json_path = out.join("ablation.json");
    std::fs::write(&json_path, serde_json::to_vec_pretty(&rows).unwrap())
        .map_err(|e| runtime(TokenArError::io(&json_path, e)))?;
    let csv_path = out.join("ablation.csv");
    std::fs::write(&csv_path, eval::ablation_csv(&rows))
        .map_err(|e| runtime(TokenArError::io(&csv_path, e)))?;
    for row in &rows {
        println!(
            "{}: token_accuracy {:.4}, identity_confusion {:.4}, eval_ce {:.4}, psnr {:.2}",
            row.variant,
            row.metrics["token_accuracy"].mean,
            row.metrics["identity_confusion"].mean,
            row.metrics["eval_ce"].mean,
            row.metrics["psnr_full"].mean,
        );
    }
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(())
}

fn cmd_inspect_attn<T: Real>(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset_dir: &Path,
    index: usize,
    out: &Path,
) -> Result<(), CliError> {
    let samples = load_samples(cfg, dataset_dir)?;
    let sample = samples.get(index).ok_or_else(|| {
        CliError::Usage(format!(
            "sample index {index} out of range; dataset has {}",
            samples.len()
        ))
    })?;
    let params = load_params::<T>(cfg, checkpoint)?;
    let layout = cfg.sequence_layout().map_err(usage)?;
    let codebook = cfg.codebook().map_err(usage)?;
    let bundle = build_training_sequence(sample, &layout, &codebook, cfg.tokenizer.patch)
        .map_err(usage)?;
    let spec = eval::eval_trace_spec(&layout);
    let outp = model::forward(&params, &bundle, Some(&spec)).map_err(runtime)?;
    let trace = outp.trace.expect("trace requested");

    std::fs::create_dir_all(out).map_err(|e| runtime(TokenArError::io(out, e)))?;
    let trace_path = out.join(format!("sample_{index:05}_trace.csv"));
    eval::export_trace_csv(&trace, &trace_path).map_err(runtime)?;

    let summary_path = out.join(format!("sample_{index:05}_layers.csv"));
    let mut csv = String::from("layer,focus_entropy,attn_divergence\n");
    for layer in 0..trace.n_layers {
        let focus = eval::attn_focus_entropy(&trace, layer, "image_ctx").map_err(runtime)?;
        let divergence = if layout.instruct_len > 0 {
            eval::attn_prompt_similarity(&trace, layer)
                .map_err(runtime)?
                .to_string()
        } else {
            String::new()
        };
        csv.push_str(&format!("{layer},{focus},{divergence}\n"));
    }
    std::fs::write(&summary_path, csv).map_err(|e| runtime(TokenArError::io(&summary_path, e)))?;
    println!("wrote {} and {}", trace_path.display(), summary_path.display());
    Ok(())
}
