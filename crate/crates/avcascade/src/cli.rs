//! Command-line surface. Every subcommand reads the files named in its
//! arguments, writes its artifacts under one output directory (`--out`,
//! defaulting to the `AVCASCADE_OUT` environment variable), and drops a
//! `run_manifest.json` recording argv, the effective seed, the config
//! hash, and the sha256 of each named input and written artifact. Corpus
//! directories are identified by their manifest hash; clip files are
//! deterministic given the manifest and seed.
//!
//! Config files are plain `namespace.key=value` lines (`#` comments).
//! Namespaces: `synth`, `model`, `pretrain`, `finetune`, `scratch`, `vad`.
//! `--set` pairs override the file; `--seed` overrides every seed.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use crate::corpus::{
    build_splits, filter_clips, load_manifest, save_manifest, segment_speech, ClipRecord,
    CorpusManifest, Split, VadParams,
};
use crate::dsp::{read_wav, write_wav, Waveform};
use crate::encoders::{ModelConfig, VisualMode};
use crate::error::{Error, Result};
use crate::eval::{curve_to_csv, evaluate, transfer_curve};
use crate::synth::{generate_corpus, read_vfea, write_vfea, SynthParams};
use crate::trainer::{
    load_checkpoint, run_cascade, save_checkpoint, train_stage, CascadeConfigs, Init, StageConfig,
};
use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "avcascade", version, about = "Cross-lingual audio-visual retrieval pipeline")]
struct Cli {
    /// More logging per repeat (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory, created if absent.
    #[arg(long, env = "AVCASCADE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides every seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic corpus; two runs sharing a seed form a
    /// bilingual pair.
    Synth {
        /// Train,val,test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        splits: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Segment and filter a directory of wav files into a clip corpus.
    BuildCorpus {
        /// Directory of per-video wav files.
        #[arg(long)]
        audio: PathBuf,
        /// Directory of per-video visual feature files (same stems).
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "a")]
        language: String,
        /// Train,val,test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        splits: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train a fresh model on a corpus train split.
    Pretrain {
        /// Corpus manifest path.
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Continue training a checkpoint on a corpus, then report test
    /// retrieval.
    Finetune {
        #[arg(long)]
        corpus: PathBuf,
        /// Starting checkpoint.
        #[arg(long)]
        init: PathBuf,
        /// Exclude visual parameters from optimization.
        #[arg(long)]
        freeze_visual: bool,
        /// Use only the 2D visual path.
        #[arg(long)]
        image_mode: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Evaluate a checkpoint on a corpus with no training.
    ZeroShotEval {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        out: OutArg,
    },
    /// Evaluate a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        out: OutArg,
    },
    /// Scratch, zero-shot, and fine-tuned models from a source corpus to a
    /// target corpus, all evaluated on the target test split.
    Cascade {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Cascade retrieval as a function of pretraining corpus percentage.
    Curve {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Ascending percents, e.g. 10,25,50,100.
        #[arg(long)]
        percents: String,
        /// Run seeds to average over.
        #[arg(long, default_value = "0")]
        seeds: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Re-render the SVG chart from an existing curve CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
}

/// Parse argv, run the subcommand, map errors to exit codes.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match dispatch(cli.command, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::Synth { splits, cfg, out } => cmd_synth(&splits, &cfg, &out.out, argv),
        Command::BuildCorpus {
            audio,
            features,
            language,
            splits,
            cfg,
            out,
        } => cmd_build_corpus(&audio, &features, &language, &splits, &cfg, &out.out, argv),
        Command::Pretrain { corpus, cfg, out } => cmd_pretrain(&corpus, &cfg, &out.out, argv),
        Command::Finetune {
            corpus,
            init,
            freeze_visual,
            image_mode,
            cfg,
            out,
        } => cmd_finetune(&corpus, &init, freeze_visual, image_mode, &cfg, &out.out, argv),
        Command::ZeroShotEval {
            init,
            corpus,
            split,
            out,
        } => cmd_eval(&init, &corpus, split, "zero_shot", &out.out, argv),
        Command::Eval {
            init,
            corpus,
            split,
            out,
        } => cmd_eval(&init, &corpus, split, "eval", &out.out, argv),
        Command::Cascade {
            source,
            target,
            cfg,
            out,
        } => cmd_cascade(&source, &target, &cfg, &out.out, argv),
        Command::Curve {
            source,
            target,
            percents,
            seeds,
            cfg,
            out,
        } => cmd_curve(&source, &target, &percents, &seeds, &cfg, &out.out, argv),
        Command::Plot { csv, out } => cmd_plot(&csv, &out.out, argv),
    }
}

// ---- config files ----

const NAMESPACES: [&str; 6] = ["synth", "model", "pretrain", "finetune", "scratch", "vad"];

/// Config file plus `--set` overrides, flattened to ordered pairs. Every
/// key must be namespaced and the namespace known; values are validated
/// by whichever subcommand consumes that namespace.
struct Config {
    pairs: Vec<(String, String)>,
    /// sha256 of the merged `key=value` lines.
    sha256: String,
    file: Option<PathBuf>,
}

fn parse_kv_line(line: &str) -> Result<Option<(String, String)>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    let (key, value) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
    let (key, value) = (key.trim(), value.trim());
    let ns = key.split('.').next().unwrap_or("");
    if !NAMESPACES.contains(&ns) || !key.contains('.') {
        return Err(Error::Config(format!(
            "key {key:?} must start with one of {NAMESPACES:?}"
        )));
    }
    Ok(Some((key.to_string(), value.to_string())))
}

fn load_config(cfg: &ConfigArgs) -> Result<Config> {
    let mut pairs = Vec::new();
    if let Some(path) = &cfg.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        for line in text.lines() {
            if let Some(pair) = parse_kv_line(line)? {
                pairs.push(pair);
            }
        }
    }
    for item in &cfg.set {
        match parse_kv_line(item)? {
            Some(pair) => pairs.push(pair),
            None => return Err(Error::Config(format!("empty --set value {item:?}"))),
        }
    }
    let merged: String = pairs.iter().fold(String::new(), |mut s, (k, v)| {
        let _ = writeln!(s, "{k}={v}");
        s
    });
    Ok(Config {
        pairs,
        sha256: sha256_hex(merged.as_bytes()),
        file: cfg.config.clone(),
    })
}

impl Config {
    /// Apply every `ns.key=value` pair to `obj` through `apply`.
    fn apply<T>(&self, ns: &str, obj: &mut T, apply: fn(&mut T, &str, &str) -> Result<()>) -> Result<()> {
        for (key, value) in &self.pairs {
            if let Some(rest) = key.strip_prefix(ns).and_then(|k| k.strip_prefix('.')) {
                apply(obj, rest, value)
                    .map_err(|e| Error::Config(format!("config key {key}: {e}")))?;
            }
        }
        Ok(())
    }
}

fn synth_apply_kv(p: &mut SynthParams, key: &str, value: &str) -> Result<()> {
    let bad = || Error::Config(format!("bad value {value:?}"));
    match key {
        "num_videos" => p.num_videos = value.parse().map_err(|_| bad())?,
        "clips_per_video" => p.clips_per_video = value.parse().map_err(|_| bad())?,
        "clip_duration_s" => p.clip_duration_s = value.parse().map_err(|_| bad())?,
        "num_concepts" => p.num_concepts = value.parse().map_err(|_| bad())?,
        "shared_concept_fraction" => {
            p.shared_concept_fraction = value.parse().map_err(|_| bad())?
        }
        "noise_sigma" => p.noise_sigma = value.parse().map_err(|_| bad())?,
        "language" => p.language = value.to_string(),
        "feature_dim_2d" => p.feature_dim_2d = value.parse().map_err(|_| bad())?,
        "feature_dim_3d" => p.feature_dim_3d = value.parse().map_err(|_| bad())?,
        "seed" => p.seed = value.parse().map_err(|_| bad())?,
        other => return Err(Error::Config(format!("unknown synth key {other:?}"))),
    }
    Ok(())
}

fn model_apply_kv(m: &mut ModelConfig, key: &str, value: &str) -> Result<()> {
    let bad = || Error::Config(format!("bad value {value:?}"));
    match key {
        "mel_bins" => m.mel_bins = value.parse().map_err(|_| bad())?,
        "conv_channels" => {
            m.conv_channels = value
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()?
        }
        "kernel" => m.kernel = value.parse().map_err(|_| bad())?,
        "stride" => m.stride = value.parse().map_err(|_| bad())?,
        "embedding_dim" => m.embedding_dim = value.parse().map_err(|_| bad())?,
        "feature_dim_2d" => m.feature_dim_2d = value.parse().map_err(|_| bad())?,
        "feature_dim_3d" => m.feature_dim_3d = value.parse().map_err(|_| bad())?,
        other => return Err(Error::Config(format!("unknown model key {other:?}"))),
    }
    Ok(())
}

fn vad_apply_kv(v: &mut VadParams, key: &str, value: &str) -> Result<()> {
    let bad = || Error::Config(format!("bad value {value:?}"));
    match key {
        "frame_ms" => v.frame_ms = value.parse().map_err(|_| bad())?,
        "energy_threshold_db" => v.energy_threshold_db = value.parse().map_err(|_| bad())?,
        "min_gap_s" => v.min_gap_s = value.parse().map_err(|_| bad())?,
        "min_clip_s" => v.min_clip_s = value.parse().map_err(|_| bad())?,
        "max_clip_s" => v.max_clip_s = value.parse().map_err(|_| bad())?,
        other => return Err(Error::Config(format!("unknown vad key {other:?}"))),
    }
    Ok(())
}

fn stage_from(config: &Config, ns: &str, defaults: StageConfig, seed: Option<u64>) -> Result<StageConfig> {
    let mut stage = defaults;
    config.apply(ns, &mut stage, StageConfig::apply_kv)?;
    if let Some(seed) = seed {
        stage.seed = seed;
    }
    stage.validate()?;
    Ok(stage)
}

fn model_from(config: &Config, seed: Option<u64>) -> Result<ModelConfig> {
    let _ = seed;
    let mut model = ModelConfig::default();
    config.apply("model", &mut model, model_apply_kv)?;
    model.validate()?;
    Ok(model)
}

fn parse_fractions(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad fractions {text:?}")))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Config(format!("expected three fractions, got {text:?}"))),
    }
}

// ---- run manifests ----

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::file(path, e))?))
}

/// Provenance record for one invocation: what ran, on which input bytes,
/// producing which output bytes. No timestamps, so identical runs write
/// identical manifests.
#[derive(Serialize)]
struct RunManifest {
    argv: Vec<String>,
    /// The run's primary seed, when the subcommand has one.
    seed: Option<u64>,
    /// sha256 of the merged config pairs, when a config applies.
    config_sha256: Option<String>,
    /// sha256 of each input file named on the command line.
    inputs: BTreeMap<String, String>,
    /// sha256 of each artifact, keyed by path relative to the output dir.
    outputs: BTreeMap<String, String>,
}

struct Run<'a> {
    out_dir: &'a Path,
    manifest: RunManifest,
}

impl<'a> Run<'a> {
    fn new(out_dir: &'a Path, argv: &[String], seed: Option<u64>, config: Option<&Config>) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
        let mut manifest = RunManifest {
            argv: argv.to_vec(),
            seed,
            config_sha256: config.map(|c| c.sha256.clone()),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        };
        if let Some(path) = config.and_then(|c| c.file.as_ref()) {
            manifest.inputs.insert(path.display().to_string(), sha256_file(path)?);
        }
        Ok(Run { out_dir, manifest })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Record an artifact already written under the output dir.
    fn output(&mut self, name: &str) -> Result<()> {
        self.manifest.outputs.insert(name.to_string(), sha256_file(&self.out_dir.join(name))?);
        Ok(())
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::file(&path, e))?;
        self.output(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    fn finish(mut self) -> Result<()> {
        let mut text =
            serde_json::to_string_pretty(&self.manifest).map_err(Error::from)?;
        text.push('\n');
        let path = self.out_dir.join("run_manifest.json");
        std::fs::write(&path, text).map_err(|e| Error::file(&path, e))?;
        let _ = &mut self;
        Ok(())
    }
}

// ---- subcommands ----

fn cmd_synth(splits: &str, cfg: &ConfigArgs, out: &Path, argv: &[String]) -> Result<()> {
    let config = load_config(cfg)?;
    let mut params = SynthParams::default();
    config.apply("synth", &mut params, synth_apply_kv)?;
    if let Some(seed) = cfg.seed {
        params.seed = seed;
    }
    let fractions = parse_fractions(splits)?;
    let mut run = Run::new(out, argv, Some(params.seed), Some(&config))?;
    let manifest = generate_corpus(&params, out)?;
    let manifest = build_splits(&manifest, fractions, params.seed)?;
    save_manifest(&manifest, &out.join("manifest.jsonl"))?;
    run.output("manifest.jsonl")?;
    run.finish()
}

/// Rows of a per-video feature matrix covering [start, end) of `total_s`,
/// at least one row.
fn row_range(rows: usize, start_s: f64, end_s: f64, total_s: f64) -> (usize, usize) {
    let lo = ((rows as f64 * start_s / total_s).floor() as usize).min(rows.saturating_sub(1));
    let hi = ((rows as f64 * end_s / total_s).ceil() as usize).clamp(lo + 1, rows.max(lo + 1));
    (lo, hi)
}

fn cmd_build_corpus(
    audio: &Path,
    features: &Path,
    language: &str,
    splits: &str,
    cfg: &ConfigArgs,
    out: &Path,
    argv: &[String],
) -> Result<()> {
    let config = load_config(cfg)?;
    let mut vad = VadParams::default();
    config.apply("vad", &mut vad, vad_apply_kv)?;
    let fractions = parse_fractions(splits)?;
    let seed = cfg.seed.unwrap_or(0);
    let mut run = Run::new(out, argv, Some(seed), Some(&config))?;

    let mut stems: Vec<String> = std::fs::read_dir(audio)
        .map_err(|e| Error::file(audio, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".wav").map(String::from)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Config(format!("no wav files in {}", audio.display())));
    }

    std::fs::create_dir_all(out.join("audio")).map_err(|e| Error::file(out, e))?;
    std::fs::create_dir_all(out.join("visual")).map_err(|e| Error::file(out, e))?;
    let mut manifest = CorpusManifest::new(language);
    manifest.root = out.to_path_buf();
    for stem in &stems {
        let wave = read_wav(&audio.join(format!("{stem}.wav")))?;
        let feat = read_vfea(&features.join(format!("{stem}.vfea")))?;
        let total_s = wave.samples.len() as f64 / wave.sample_rate as f64;
        let clips = filter_clips(&segment_speech(&wave, &vad), &vad);
        for (k, clip) in clips.iter().enumerate() {
            let clip_id = format!("{stem}_c{k:02}");
            let audio_rel = format!("audio/{clip_id}.wav");
            let visual_rel = format!("visual/{clip_id}.vfea");
            let (a, b) = (
                (clip.start_s * wave.sample_rate as f64) as usize,
                ((clip.end_s * wave.sample_rate as f64) as usize).min(wave.samples.len()),
            );
            write_wav(
                &out.join(&audio_rel),
                &Waveform::mono(wave.samples[a..b].to_vec(), wave.sample_rate),
            )?;
            let (t_lo, t_hi) = row_range(feat.t, clip.start_s, clip.end_s, total_s);
            let (s_lo, s_hi) = row_range(feat.s, clip.start_s, clip.end_s, total_s);
            let mut sliced = feat.clone();
            sliced.frames_2d = feat.frames_2d[t_lo * feat.d2..t_hi * feat.d2].to_vec();
            sliced.t = t_hi - t_lo;
            sliced.segments_3d = feat.segments_3d[s_lo * feat.d3..s_hi * feat.d3].to_vec();
            sliced.s = s_hi - s_lo;
            write_vfea(&sliced, &out.join(&visual_rel))?;
            manifest.records.push(ClipRecord {
                video_id: stem.clone(),
                clip_id,
                start_s: clip.start_s,
                end_s: clip.end_s,
                split: Split::Unassigned,
                language: language.to_string(),
                audio_path: audio_rel,
                visual_feature_path: visual_rel,
            });
        }
    }
    let manifest = build_splits(&manifest, fractions, seed)?;
    save_manifest(&manifest, &out.join("manifest.jsonl"))?;
    run.output("manifest.jsonl")?;
    run.finish()
}

fn cmd_pretrain(corpus: &Path, cfg: &ConfigArgs, out: &Path, argv: &[String]) -> Result<()> {
    let config = load_config(cfg)?;
    let model = model_from(&config, cfg.seed)?;
    let stage = stage_from(&config, "pretrain", StageConfig::pretrain_defaults(), cfg.seed)?;
    let mut run = Run::new(out, argv, Some(stage.seed), Some(&config))?;
    run.input(corpus)?;
    let manifest = load_manifest(corpus)?;
    let ckpt = train_stage(&stage, &manifest, Init::Fresh(model))?;
    save_checkpoint(&ckpt, &out.join("pretrained.avck"))?;
    run.output("pretrained.avck")?;
    run.finish()
}

fn cmd_finetune(
    corpus: &Path,
    init: &Path,
    freeze_visual: bool,
    image_mode: bool,
    cfg: &ConfigArgs,
    out: &Path,
    argv: &[String],
) -> Result<()> {
    let config = load_config(cfg)?;
    let mut stage = stage_from(&config, "finetune", StageConfig::finetune_defaults(), cfg.seed)?;
    if freeze_visual {
        stage.freeze_visual = true;
    }
    if image_mode {
        stage.mode = VisualMode::Image;
    }
    let mut run = Run::new(out, argv, Some(stage.seed), Some(&config))?;
    run.input(corpus)?;
    run.input(init)?;
    let manifest = load_manifest(corpus)?;
    let start = load_checkpoint(init)?;
    let ckpt = train_stage(&stage, &manifest, Init::Warm(start))?;
    save_checkpoint(&ckpt, &out.join("finetuned.avck"))?;
    run.output("finetuned.avck")?;
    let (fwd, bwd) = evaluate(&ckpt, &manifest, Split::Test)?;
    run.write_json("finetuned_audio_to_visual.json", &fwd)?;
    run.write_json("finetuned_visual_to_audio.json", &bwd)?;
    run.finish()
}

fn cmd_eval(
    init: &Path,
    corpus: &Path,
    split: Split,
    tag: &str,
    out: &Path,
    argv: &[String],
) -> Result<()> {
    let mut run = Run::new(out, argv, None, None)?;
    run.input(init)?;
    run.input(corpus)?;
    let ckpt = load_checkpoint(init)?;
    let manifest = load_manifest(corpus)?;
    let (fwd, bwd) = evaluate(&ckpt, &manifest, split)?;
    run.write_json(&format!("{tag}_audio_to_visual.json"), &fwd)?;
    run.write_json(&format!("{tag}_visual_to_audio.json"), &bwd)?;
    run.finish()
}

fn cascade_configs(config: &Config, seed: Option<u64>) -> Result<CascadeConfigs> {
    let model = model_from(config, seed)?;
    let pretrain = stage_from(config, "pretrain", StageConfig::pretrain_defaults(), seed)?;
    let finetune = stage_from(config, "finetune", StageConfig::finetune_defaults(), seed)?;
    // Scratch defaults to the fine-tune budget; scratch.* keys override.
    let scratch = stage_from(config, "scratch", finetune.clone(), seed)?;
    Ok(CascadeConfigs {
        model,
        pretrain,
        finetune,
        scratch,
    })
}

fn cmd_cascade(source: &Path, target: &Path, cfg: &ConfigArgs, out: &Path, argv: &[String]) -> Result<()> {
    let config = load_config(cfg)?;
    let cfgs = cascade_configs(&config, cfg.seed)?;
    let mut run = Run::new(out, argv, Some(cfgs.pretrain.seed), Some(&config))?;
    run.input(source)?;
    run.input(target)?;
    let source = load_manifest(source)?;
    let target = load_manifest(target)?;
    let outcome = run_cascade(&source, &target, &cfgs)?;
    for (tag, ckpt) in [
        ("scratch", &outcome.scratch),
        ("zero_shot", &outcome.zero_shot),
        ("finetuned", &outcome.finetuned),
    ] {
        save_checkpoint(ckpt, &out.join(format!("{tag}.avck")))?;
        run.output(&format!("{tag}.avck"))?;
        let (fwd, bwd) = &outcome.reports[tag];
        run.write_json(&format!("{tag}_audio_to_visual.json"), fwd)?;
        run.write_json(&format!("{tag}_visual_to_audio.json"), bwd)?;
    }
    run.finish()
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} value {v:?}")))
        })
        .collect()
}

fn cmd_curve(
    source: &Path,
    target: &Path,
    percents: &str,
    seeds: &str,
    cfg: &ConfigArgs,
    out: &Path,
    argv: &[String],
) -> Result<()> {
    let config = load_config(cfg)?;
    let cfgs = cascade_configs(&config, cfg.seed)?;
    let percents: Vec<f64> = parse_list(percents, "percent")?;
    let seeds: Vec<u64> = parse_list(seeds, "seed")?;
    let mut run = Run::new(out, argv, Some(cfgs.pretrain.seed), Some(&config))?;
    run.input(source)?;
    run.input(target)?;
    let source = load_manifest(source)?;
    let target = load_manifest(target)?;
    let points = transfer_curve(&source, &target, &cfgs, &percents, &seeds)?;
    let csv = curve_to_csv(&points);
    run.write_bytes("curve.csv", csv.as_bytes())?;
    run.write_bytes("curve.svg", render_curve_svg(&csv)?.as_bytes())?;
    run.finish()
}

fn cmd_plot(csv: &Path, out: &Path, argv: &[String]) -> Result<()> {
    let mut run = Run::new(out, argv, None, None)?;
    run.input(csv)?;
    let text = std::fs::read_to_string(csv).map_err(|e| Error::file(csv, e))?;
    run.write_bytes("curve.svg", render_curve_svg(&text)?.as_bytes())?;
    run.finish()
}

// ---- SVG chart ----

const CURVE_HEADER: &str = "percent,direction,model,r1,r5,r10,med_rank";
const PALETTE: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];

/// R@10 against pretraining percentage, one line per model, averaged over
/// directions and seeds. Purely a view of the CSV: the data flows through
/// untouched and the source checksum rides along in `data-csv-sha256`.
pub fn render_curve_svg(csv: &str) -> Result<String> {
    let mut lines = csv.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(Error::Config(format!("csv header must be {CURVE_HEADER:?}")));
    }
    // model -> percent -> r10 samples, models in first-seen order.
    let mut series: Vec<(String, BTreeMap<u64, Vec<f64>>)> = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Config(format!("csv row has {} columns", cols.len())));
        }
        let percent: f64 = cols[0]
            .parse()
            .map_err(|_| Error::Config(format!("bad percent {:?}", cols[0])))?;
        let r10: f64 = cols[5]
            .parse()
            .map_err(|_| Error::Config(format!("bad r10 {:?}", cols[5])))?;
        if !r10.is_finite() {
            continue;
        }
        let model = cols[2];
        let entry = match series.iter_mut().find(|(m, _)| m == model) {
            Some((_, points)) => points,
            None => {
                series.push((model.to_string(), BTreeMap::new()));
                &mut series.last_mut().unwrap().1
            }
        };
        entry.entry(percent.to_bits()).or_default().push(r10);
    }
    if series.is_empty() {
        return Err(Error::Config("csv has no plottable rows".into()));
    }

    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 20.0, 20.0, 45.0);
    let percents: Vec<f64> = {
        let mut all: Vec<f64> = series
            .iter()
            .flat_map(|(_, pts)| pts.keys().map(|&b| f64::from_bits(b)))
            .collect();
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        all.dedup();
        all
    };
    let (x_min, x_max) = (percents[0], *percents.last().unwrap());
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let x = |p: f64| left + (p - x_min) / x_span * (w - left - right);
    let y = |r: f64| h - bottom - r * (h - top - bottom);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" \
         font-family=\"sans-serif\" font-size=\"12\" data-csv-sha256=\"{}\">",
        sha256_hex(csv.as_bytes())
    );
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    for tick in 0..=4 {
        let r = tick as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{left}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"#ddd\"/>\
             <text x=\"{2:.1}\" y=\"{3:.1}\" text-anchor=\"end\">{r:.2}</text>",
            y(r),
            w - right,
            left - 6.0,
            y(r) + 4.0
        );
    }
    for &p in &percents {
        let _ = writeln!(
            svg,
            "<text x=\"{0:.1}\" y=\"{1:.1}\" text-anchor=\"middle\">{p}</text>",
            x(p),
            h - bottom + 16.0
        );
    }
    let _ = writeln!(
        svg,
        "<line x1=\"{left}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"black\"/>\
         <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{0:.1}\" stroke=\"black\"/>",
        h - bottom,
        w - right
    );
    let _ = writeln!(
        svg,
        "<text x=\"{0:.1}\" y=\"{1:.1}\" text-anchor=\"middle\">pretraining videos (%)</text>\
         <text x=\"14\" y=\"{2:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {2:.1})\">R@10</text>",
        left + (w - left - right) / 2.0,
        h - 8.0,
        top + (h - top - bottom) / 2.0
    );
    for (i, (model, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .map(|(&bits, rs)| {
                let mean = rs.iter().sum::<f64>() / rs.len() as f64;
                format!("{:.1},{:.1}", x(f64::from_bits(bits)), y(mean))
            })
            .collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            path.join(" ")
        );
        let ly = top + 16.0 + i as f64 * 16.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{0:.1}\" y1=\"{ly:.1}\" x2=\"{1:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{2:.1}\" y=\"{3:.1}\">{model}</text>",
            left + 10.0,
            left + 34.0,
            left + 40.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn usage_errors_exit_1_and_help_exits_0() {
        assert_eq!(run(&args(&["avcascade", "no-such-command"])), 1);
        assert_eq!(run(&args(&["avcascade", "synth", "--bogus-flag"])), 1);
        assert_eq!(run(&args(&["avcascade", "--help"])), 0);
        assert_eq!(run(&args(&["avcascade", "synth", "--help"])), 0);
    }

    #[test]
    fn missing_input_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = run(&args(&[
            "avcascade",
            "eval",
            "--init",
            "/nonexistent/model.avck",
            "--corpus",
            "/nonexistent/manifest.jsonl",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, 2);
    }

    #[test]
    fn config_keys_must_be_namespaced() {
        assert!(parse_kv_line("lr=3").is_err());
        assert!(parse_kv_line("bogus.lr=3").is_err());
        assert!(parse_kv_line("pretrain.lr").is_err());
        assert_eq!(
            parse_kv_line("pretrain.lr = 3 # comment").unwrap(),
            Some(("pretrain.lr".into(), "3".into()))
        );
        assert_eq!(parse_kv_line("  # whole-line comment").unwrap(), None);
    }

    #[test]
    fn seed_override_beats_config() {
        let cfg = ConfigArgs {
            config: None,
            set: vec!["pretrain.seed=5".into(), "pretrain.lr=2e-3".into()],
            seed: Some(9),
        };
        let config = load_config(&cfg).unwrap();
        let stage = stage_from(&config, "pretrain", StageConfig::pretrain_defaults(), cfg.seed).unwrap();
        assert_eq!(stage.seed, 9);
        assert_eq!(stage.lr, 2e-3);
    }

    #[test]
    fn fractions_parse() {
        assert_eq!(parse_fractions("0.8, 0.1, 0.1").unwrap(), (0.8, 0.1, 0.1));
        assert!(parse_fractions("0.8,0.2").is_err());
        assert!(parse_fractions("a,b,c").is_err());
    }

    #[test]
    fn row_range_is_total_and_nonempty() {
        // Whole video in three clips: every row lands somewhere.
        assert_eq!(row_range(10, 0.0, 2.0, 6.0), (0, 4));
        assert_eq!(row_range(10, 2.0, 4.0, 6.0), (3, 7));
        assert_eq!(row_range(10, 4.0, 6.0, 6.0), (6, 10));
        // Sub-row clip still gets one row.
        let (lo, hi) = row_range(2, 2.9, 3.0, 6.0);
        assert!(hi > lo && hi <= 2);
    }

    #[test]
    fn svg_embeds_checksum_and_leaves_csv_alone() {
        let csv = "percent,direction,model,r1,r5,r10,med_rank\n\
                   10,audio_to_visual,zero_shot,0.1,0.2,0.3,5.0\n\
                   10,visual_to_audio,zero_shot,0.1,0.2,0.5,5.0\n\
                   100,audio_to_visual,zero_shot,0.2,0.4,0.6,3.0\n\
                   100,visual_to_audio,zero_shot,0.2,0.4,0.8,3.0\n\
                   10,audio_to_visual,finetuned,0.2,0.5,0.7,2.0\n\
                   10,visual_to_audio,finetuned,0.2,0.5,0.7,2.0\n\
                   100,audio_to_visual,finetuned,0.3,0.6,0.9,1.5\n\
                   100,visual_to_audio,finetuned,0.3,0.6,0.9,1.5\n";
        let before = csv.to_string();
        let svg = render_curve_svg(csv).unwrap();
        assert_eq!(csv, before);
        assert!(svg.contains(&format!("data-csv-sha256=\"{}\"", sha256_hex(csv.as_bytes()))));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">zero_shot<") && svg.contains(">finetuned<"));
        // Mean of the two directions at 10%: (0.3 + 0.5) / 2 = 0.4.
        let y_of_04 = 400.0 - 45.0 - 0.4 * (400.0 - 20.0 - 45.0);
        assert!(svg.contains(&format!("60.0,{y_of_04:.1}")));
    }

    #[test]
    fn svg_rejects_foreign_csv() {
        assert!(render_curve_svg("nope\n1,2,3\n").is_err());
        assert!(render_curve_svg("percent,direction,model,r1,r5,r10,med_rank\nbad row\n").is_err());
    }

    #[test]
    fn curve_csv_round_trips_through_render() {
        // The exact bytes written by `curve` parse back for `plot`.
        use crate::eval::TransferPoint;
        let rep = |r10: f64, d: crate::eval::Direction| crate::eval::RetrievalReport {
            direction: d,
            n: 20,
            r_at: [(1, 0.1), (5, 0.3), (10, r10)].into_iter().collect(),
            median_rank: 4.0,
            corpus_id: "b/test".into(),
            checkpoint_id: "abc".into(),
        };
        let point = TransferPoint {
            percent: 50.0,
            seed: 0,
            zero_shot: (
                rep(0.4, crate::eval::Direction::AudioToVisual),
                rep(0.5, crate::eval::Direction::VisualToAudio),
            ),
            finetuned: (
                rep(0.7, crate::eval::Direction::AudioToVisual),
                rep(0.8, crate::eval::Direction::VisualToAudio),
            ),
        };
        let csv = curve_to_csv(&[point]);
        render_curve_svg(&csv).unwrap();
    }
}
