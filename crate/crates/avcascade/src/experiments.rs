//! The canonical synthetic benchmark: a bilingual corpus pair small enough
//! to train on one CPU core in minutes, with stage configurations that
//! exercise the full cascade. One seed drives corpus generation, parameter
//! initialization, splits, batching, and subsampling, so a benchmark run is
//! a reproducible set of retrieval numbers.
//!
//! Five models come out of one run, all evaluated on the target test split:
//! `scratch` (target only), `zero_shot` (source pretraining only),
//! `finetuned` (the cascade), `source_finetuned` (pretrained, then
//! fine-tuned on held-out source-language videos instead of the target),
//! and `low_data_finetuned` (the cascade with a fraction of the
//! pretraining videos).

use crate::corpus::{build_splits, subsample, Split};
use crate::encoders::ModelConfig;
use crate::error::Result;
use crate::eval::RetrievalReport;
use crate::synth::{generate_corpus, SynthParams};
use crate::trainer::{run_cascade, train_stage, CascadeConfigs, Init, StageConfig};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Train/val/test fractions for the pretraining corpus; val and test stay
/// small because source-side retrieval is not what the benchmark measures.
const SOURCE_FRACTIONS: (f64, f64, f64) = (0.9, 0.05, 0.05);
/// Fractions for the target and held-out-source corpora: a large test
/// gallery makes recall differences visible at this scale.
const TARGET_FRACTIONS: (f64, f64, f64) = (0.5, 0.125, 0.375);

#[derive(Clone, Debug)]
pub struct BenchmarkSpec {
    pub seed: u64,
    /// Source-language videos used for pretraining.
    pub source_videos: usize,
    /// Additional source-language videos held out as a fine-tuning corpus.
    pub extra_source_videos: usize,
    pub target_videos: usize,
    pub clips_per_video: usize,
    pub clip_duration_s: f64,
    pub num_concepts: usize,
    pub shared_concept_fraction: f64,
    pub noise_sigma: f64,
    /// Percentage of pretraining videos for the low-data variant.
    pub low_data_percent: f64,
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
}

/// The default benchmark: 400 pretraining videos in language "a", 40
/// target videos in language "b", 8 clips each, 30% shared concepts. The
/// target test gallery is 40 x 0.375 x 8 = 120 clips.
pub fn default_benchmark(seed: u64) -> BenchmarkSpec {
    let model = ModelConfig {
        conv_channels: vec![16, 16],
        embedding_dim: 16,
        ..ModelConfig::default()
    };
    let pretrain = StageConfig {
        videos_per_batch: 16,
        clips_per_video: 4,
        clip_len_s: 1.0,
        lr: 2e-3,
        epochs: 8,
        seed,
        ..StageConfig::pretrain_defaults()
    };
    let finetune = StageConfig {
        flat_batch_clips: 128,
        lr: 5e-4,
        epochs: 25,
        seed,
        ..StageConfig::finetune_defaults()
    };
    BenchmarkSpec {
        seed,
        source_videos: 400,
        extra_source_videos: 40,
        target_videos: 40,
        clips_per_video: 8,
        clip_duration_s: 1.0,
        num_concepts: 12,
        shared_concept_fraction: 0.3,
        noise_sigma: 0.45,
        low_data_percent: 10.0,
        model,
        pretrain,
        finetune,
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkResult {
    pub seed: u64,
    /// Mean of the two directions' R@10 on the target test split, keyed by
    /// model tag.
    pub r10: BTreeMap<&'static str, f64>,
    pub reports: BTreeMap<&'static str, (RetrievalReport, RetrievalReport)>,
}

fn mean_r10(pair: &(RetrievalReport, RetrievalReport)) -> f64 {
    (pair.0.r_at[&10] + pair.1.r_at[&10]) / 2.0
}

fn synth_params(spec: &BenchmarkSpec, language: &str, videos: usize) -> SynthParams {
    SynthParams {
        num_videos: videos,
        clips_per_video: spec.clips_per_video,
        clip_duration_s: spec.clip_duration_s,
        num_concepts: spec.num_concepts,
        shared_concept_fraction: spec.shared_concept_fraction,
        noise_sigma: spec.noise_sigma,
        language: language.to_string(),
        feature_dim_2d: spec.model.feature_dim_2d,
        feature_dim_3d: spec.model.feature_dim_3d,
        // One synth seed for both languages: concept centroids are keyed
        // on it, so the corpora share a visual world.
        seed: spec.seed,
    }
}

/// Generate the corpora under `work_dir` and run all five models.
pub fn run_benchmark(spec: &BenchmarkSpec, work_dir: &Path) -> Result<BenchmarkResult> {
    let source_all = generate_corpus(
        &synth_params(spec, "a", spec.source_videos + spec.extra_source_videos),
        &work_dir.join("source"),
    )?;
    let target = generate_corpus(
        &synth_params(spec, "b", spec.target_videos),
        &work_dir.join("target"),
    )?;

    // Video ids follow generation order, so an index slice is a stable
    // partition into pretraining and held-out videos.
    let ids = source_all.video_ids();
    let pre_ids: BTreeSet<String> = ids[..spec.source_videos].iter().cloned().collect();
    let extra_ids: BTreeSet<String> = ids[spec.source_videos..].iter().cloned().collect();
    let source = build_splits(&source_all.retain_videos(&pre_ids), SOURCE_FRACTIONS, spec.seed)?;
    let extra = build_splits(
        &source_all.retain_videos(&extra_ids),
        TARGET_FRACTIONS,
        spec.seed,
    )?;
    let target = build_splits(&target, TARGET_FRACTIONS, spec.seed)?;
    if target.clips_in_split(Split::Test).len() < 10 {
        return Err(crate::error::Error::Config(
            "benchmark needs a target test gallery of at least 10 clips for R@10".into(),
        ));
    }

    let cfgs = CascadeConfigs {
        model: spec.model.clone(),
        pretrain: spec.pretrain.clone(),
        finetune: spec.finetune.clone(),
        scratch: spec.finetune.clone(),
    };
    let outcome = run_cascade(&source, &target, &cfgs)?;

    let mut reports = outcome.reports;

    // Language sensitivity control: fine-tune the same pretrained model on
    // more source-language data and evaluate on the target anyway.
    let source_ft = train_stage(&spec.finetune, &extra, Init::Warm(outcome.zero_shot.clone()))?;
    reports.insert(
        "source_finetuned",
        crate::eval::evaluate(&source_ft, &target, Split::Test)?,
    );

    // Transfer-curve endpoint: the same cascade from a fraction of the
    // pretraining videos. The fine-tune stage sees identical batches, so
    // the comparison isolates pretraining volume.
    let low = subsample(&source, spec.low_data_percent, spec.seed)?;
    let low_pre = train_stage(&spec.pretrain, &low, Init::Fresh(spec.model.clone()))?;
    let low_ft = train_stage(&spec.finetune, &target, Init::Warm(low_pre))?;
    reports.insert(
        "low_data_finetuned",
        crate::eval::evaluate(&low_ft, &target, Split::Test)?,
    );

    let r10 = reports.iter().map(|(&tag, pair)| (tag, mean_r10(pair))).collect();
    Ok(BenchmarkResult {
        seed: spec.seed,
        r10,
        reports,
    })
}
