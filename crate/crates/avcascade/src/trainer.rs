//! Batch geometry, the training loop, checkpoint files, and the cascade
//! driver. Batches are planned first (cheap index-level decisions, fully
//! determined by seed and epoch) and materialized entry by entry, so the
//! large nominal batch sizes never force the whole batch's spectrograms
//! into memory at once.

use crate::corpus::{ClipRecord, CorpusManifest, Split};
use crate::dsp::{self, DspParams, MelSpectrogram};
use crate::encoders::{
    self, similarity_matrix, ModelConfig, VisualFeatures, VisualMode,
};
use crate::error::{Error, Result};
use crate::eval::{recall_at_k, Direction};
use crate::graph::{adam_step, AdamState, Graph, ParamSet, Tensor};
use crate::rng;
use crate::synth::read_vfea;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// One training stage. Pretraining batches group `clips_per_video` clips
/// from each of `videos_per_batch` videos and crop fixed windows of
/// `clip_len_s`; fine-tuning shuffles clips flat into batches of
/// `flat_batch_clips` and uses whole clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub videos_per_batch: usize,
    pub clips_per_video: usize,
    pub clip_len_s: f64,
    pub flat_batch_clips: usize,
    pub lr: f64,
    pub epochs: usize,
    pub freeze_visual: bool,
    pub mode: VisualMode,
    pub seed: u64,
    pub margin: f64,
    /// Keep the epoch with the best validation retrieval score instead of
    /// the last one.
    pub select_best_on_val: bool,
}

impl StageConfig {
    pub fn pretrain_defaults() -> Self {
        StageConfig {
            stage: Stage::Pretrain,
            videos_per_batch: 128,
            clips_per_video: 32,
            clip_len_s: 10.0,
            flat_batch_clips: 256,
            lr: 1e-4,
            epochs: 15,
            freeze_visual: false,
            mode: VisualMode::Video,
            seed: 0,
            margin: 1e-3,
            select_best_on_val: false,
        }
    }

    pub fn finetune_defaults() -> Self {
        StageConfig {
            stage: Stage::Finetune,
            epochs: 30,
            select_best_on_val: true,
            ..StageConfig::pretrain_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.margin < 0.0 {
            return Err(Error::Config("margin must be non-negative".into()));
        }
        let geometry_ok = match self.stage {
            Stage::Pretrain => {
                self.videos_per_batch >= 1 && self.clips_per_video >= 1 && self.clip_len_s > 0.0
            }
            Stage::Finetune => self.flat_batch_clips >= 1,
        };
        if !geometry_ok {
            return Err(Error::Config("batch geometry fields must be positive".into()));
        }
        Ok(())
    }

    /// Apply one `key=value` pair from a config file or command line.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad {what} value {value:?}"));
        match key {
            "stage" => {
                self.stage = match value {
                    "pretrain" => Stage::Pretrain,
                    "finetune" => Stage::Finetune,
                    _ => return Err(bad("stage")),
                }
            }
            "videos_per_batch" => self.videos_per_batch = value.parse().map_err(|_| bad(key))?,
            "clips_per_video" => self.clips_per_video = value.parse().map_err(|_| bad(key))?,
            "clip_len_s" => self.clip_len_s = value.parse().map_err(|_| bad(key))?,
            "flat_batch_clips" => self.flat_batch_clips = value.parse().map_err(|_| bad(key))?,
            "lr" => self.lr = value.parse().map_err(|_| bad(key))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key))?,
            "freeze_visual" => self.freeze_visual = value.parse().map_err(|_| bad(key))?,
            "mode" => {
                self.mode = match value {
                    "video" => VisualMode::Video,
                    "image" => VisualMode::Image,
                    _ => return Err(bad("mode")),
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "margin" => self.margin = value.parse().map_err(|_| bad(key))?,
            "select_best_on_val" => {
                self.select_best_on_val = value.parse().map_err(|_| bad(key))?
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

/// One training example: which clip, and which spectrogram window of it.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEntry {
    pub clip_id: String,
    pub video_id: String,
    pub start_frame: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub entries: Vec<BatchEntry>,
}

fn clip_frames(rec: &ClipRecord, dsp: &DspParams) -> usize {
    let samples = ((rec.end_s - rec.start_s) * dsp.sample_rate_hz as f64).round() as usize;
    if samples < dsp.window_len() {
        0
    } else {
        dsp.frames_for_samples(samples)
    }
}

/// Plan one epoch of batches over a split. Pretraining samples
/// `videos_per_batch` videos per batch and `clips_per_video` clips from
/// each (with replacement only when a video is under-populated), cropping
/// a uniform-random window of `clip_len_s`; fine-tuning shuffles all clips
/// flat and takes whole clips. Partial trailing batches are dropped in
/// both stages. Deterministic in (seed, epoch).
pub fn make_batches(
    manifest: &CorpusManifest,
    split: Split,
    cfg: &StageConfig,
    dsp: &DspParams,
    min_frames: usize,
    epoch: u64,
) -> Result<Vec<BatchPlan>> {
    cfg.validate()?;
    let clips = manifest.clips_in_split(split);
    if clips.is_empty() {
        return Err(Error::EmptySplit(format!("{split}")));
    }
    let mut r = rng::stream(cfg.seed, "batches", &[epoch]);
    let mut plans = Vec::new();
    match cfg.stage {
        Stage::Pretrain => {
            let frames_t = dsp.frames_for_duration(cfg.clip_len_s).max(min_frames);
            let mut by_video: Vec<(&str, Vec<&ClipRecord>)> = Vec::new();
            let mut index: HashMap<&str, usize> = HashMap::new();
            for rec in &clips {
                match index.get(rec.video_id.as_str()) {
                    Some(&i) => by_video[i].1.push(rec),
                    None => {
                        index.insert(&rec.video_id, by_video.len());
                        by_video.push((&rec.video_id, vec![rec]));
                    }
                }
            }
            if by_video.len() < cfg.videos_per_batch {
                return Err(Error::Config(format!(
                    "split {split} has {} videos, batches need {}",
                    by_video.len(),
                    cfg.videos_per_batch
                )));
            }
            let mut order: Vec<usize> = (0..by_video.len()).collect();
            order.shuffle(&mut r);
            for chunk in order.chunks_exact(cfg.videos_per_batch) {
                let mut entries = Vec::with_capacity(cfg.videos_per_batch * cfg.clips_per_video);
                for &vi in chunk {
                    let (video_id, recs) = &by_video[vi];
                    let chosen: Vec<&ClipRecord> = if recs.len() >= cfg.clips_per_video {
                        let mut idx: Vec<usize> = (0..recs.len()).collect();
                        idx.shuffle(&mut r);
                        idx[..cfg.clips_per_video].iter().map(|&i| recs[i]).collect()
                    } else {
                        (0..cfg.clips_per_video)
                            .map(|_| recs[r.gen_range(0..recs.len())])
                            .collect()
                    };
                    for rec in chosen {
                        let have = clip_frames(rec, dsp);
                        let start_frame = if have > frames_t {
                            r.gen_range(0..=have - frames_t)
                        } else {
                            0
                        };
                        entries.push(BatchEntry {
                            clip_id: rec.clip_id.clone(),
                            video_id: video_id.to_string(),
                            start_frame,
                            frames: frames_t,
                        });
                    }
                }
                plans.push(BatchPlan { entries });
            }
        }
        Stage::Finetune => {
            if clips.len() < cfg.flat_batch_clips {
                return Err(Error::Config(format!(
                    "split {split} has {} clips, batches need {}",
                    clips.len(),
                    cfg.flat_batch_clips
                )));
            }
            let mut order: Vec<usize> = (0..clips.len()).collect();
            order.shuffle(&mut r);
            for chunk in order.chunks_exact(cfg.flat_batch_clips) {
                let entries = chunk
                    .iter()
                    .map(|&i| {
                        let rec = clips[i];
                        BatchEntry {
                            clip_id: rec.clip_id.clone(),
                            video_id: rec.video_id.clone(),
                            start_frame: 0,
                            frames: clip_frames(rec, dsp).clamp(min_frames, dsp.max_frames()),
                        }
                    })
                    .collect();
                plans.push(BatchPlan { entries });
            }
        }
    }
    Ok(plans)
}

/// Lazy, cached access to a corpus's spectrograms and visual features.
pub struct ClipStore {
    records: HashMap<String, ClipRecord>,
    root: std::path::PathBuf,
    dsp: DspParams,
    specs: HashMap<String, MelSpectrogram>,
    feats: HashMap<String, VisualFeatures>,
}

impl ClipStore {
    pub fn new(manifest: &CorpusManifest, dsp: DspParams) -> Self {
        ClipStore {
            records: manifest
                .records
                .iter()
                .map(|r| (r.clip_id.clone(), r.clone()))
                .collect(),
            root: manifest.root.clone(),
            dsp,
            specs: HashMap::new(),
            feats: HashMap::new(),
        }
    }

    pub fn dsp(&self) -> &DspParams {
        &self.dsp
    }

    fn record(&self, clip_id: &str) -> Result<&ClipRecord> {
        self.records
            .get(clip_id)
            .ok_or_else(|| Error::Contract(format!("unknown clip {clip_id}")))
    }

    pub fn spectrogram(&mut self, clip_id: &str) -> Result<&MelSpectrogram> {
        if !self.specs.contains_key(clip_id) {
            let rec = self.record(clip_id)?.clone();
            let wave = dsp::read_wav(&self.root.join(&rec.audio_path))?;
            let wave = dsp::normalize_audio(&wave, self.dsp.sample_rate_hz)?;
            let spec = dsp::log_mel(&wave, &self.dsp)?;
            self.specs.insert(clip_id.to_string(), spec);
        }
        Ok(&self.specs[clip_id])
    }

    pub fn features(&mut self, clip_id: &str) -> Result<&VisualFeatures> {
        if !self.feats.contains_key(clip_id) {
            let rec = self.record(clip_id)?.clone();
            let feat = read_vfea(&self.root.join(&rec.visual_feature_path))?;
            self.feats.insert(clip_id.to_string(), feat);
        }
        Ok(&self.feats[clip_id])
    }
}

/// Load one planned entry: the requested spectrogram window (padded with
/// the log floor where the clip runs out) plus the clip's visual features.
pub fn materialize(entry: &BatchEntry, store: &mut ClipStore) -> Result<(MelSpectrogram, VisualFeatures)> {
    let feat = store.features(&entry.clip_id)?.clone();
    let floor = store.dsp.floor_value();
    let spec = store.spectrogram(&entry.clip_id)?;
    let bins = spec.bins;
    let mut values = Vec::with_capacity(entry.frames * bins);
    for f in entry.start_frame..entry.start_frame + entry.frames {
        if f < spec.frames {
            values.extend_from_slice(&spec.values[f * bins..(f + 1) * bins]);
        } else {
            values.extend(std::iter::repeat(floor).take(bins));
        }
    }
    Ok((
        MelSpectrogram {
            frames: entry.frames,
            bins,
            values,
            frame_hop_s: spec.frame_hop_s,
        },
        feat,
    ))
}

/// What one training stage did, kept inside the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageProvenance {
    pub config: StageConfig,
    pub language: String,
    pub train_videos: usize,
    pub epoch_losses: Vec<f64>,
    /// Epoch whose parameters the checkpoint carries (last, or best on val).
    pub selected_epoch: usize,
    pub val_scores: Vec<f64>,
}

/// Batch-stream position, stored so a later stage with the same seed
/// continues the epoch sequence instead of replaying it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: u64,
    pub next_epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub params: ParamSet,
    pub provenance: Vec<StageProvenance>,
    pub rng: RngCursor,
}

impl Checkpoint {
    /// Short content id: hash of the serialized parameter bytes.
    pub fn id(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor, _) in self.params.iter() {
            hasher.update(name.as_bytes());
            for v in tensor.data() {
                hasher.update((*v as f32).to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub enum Init {
    Fresh(ModelConfig),
    Warm(Checkpoint),
}

/// Embeddings of every clip in a split, aligned by position.
pub struct SplitEmbeddings {
    pub audio: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
    pub video_ids: Vec<String>,
    pub clip_ids: Vec<String>,
}

/// Embed every clip of a split with whole-clip audio (capped at the dsp
/// maximum). Clip order follows the manifest.
pub fn embed_split(
    params: &ParamSet,
    model: &ModelConfig,
    mode: VisualMode,
    manifest: &CorpusManifest,
    split: Split,
    store: &mut ClipStore,
) -> Result<SplitEmbeddings> {
    let clips = manifest.clips_in_split(split);
    if clips.is_empty() {
        return Err(Error::EmptySplit(format!("{split}")));
    }
    let min_frames = model.min_frames();
    let mut out = SplitEmbeddings {
        audio: Vec::with_capacity(clips.len()),
        visual: Vec::with_capacity(clips.len()),
        video_ids: Vec::with_capacity(clips.len()),
        clip_ids: Vec::with_capacity(clips.len()),
    };
    for rec in clips {
        let entry = BatchEntry {
            clip_id: rec.clip_id.clone(),
            video_id: rec.video_id.clone(),
            start_frame: 0,
            frames: clip_frames(rec, store.dsp()).clamp(min_frames, store.dsp().max_frames()),
        };
        let (spec, feat) = materialize(&entry, store)?;
        out.audio.push(encoders::embed_audio(&spec, params, model)?);
        out.visual.push(encoders::embed_visual(&feat, params, model, mode)?);
        out.video_ids.push(entry.video_id);
        out.clip_ids.push(entry.clip_id);
    }
    Ok(out)
}

fn check_feature_dims(manifest: &CorpusManifest, model: &ModelConfig, store: &mut ClipStore) -> Result<()> {
    if let Some(rec) = manifest.records.first() {
        let feat = store.features(&rec.clip_id)?;
        if feat.d2 != model.feature_dim_2d || feat.d3 != model.feature_dim_3d {
            return Err(Error::Shape(format!(
                "corpus features are {}d/{}d, model expects {}d/{}d",
                feat.d2, feat.d3, model.feature_dim_2d, model.feature_dim_3d
            )));
        }
    }
    Ok(())
}

fn train_batch(
    params: &mut ParamSet,
    model: &ModelConfig,
    cfg: &StageConfig,
    plan: &BatchPlan,
    store: &mut ClipStore,
    adam: &mut AdamState,
) -> Result<f64> {
    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let mut audio_rows = Vec::with_capacity(plan.entries.len());
    let mut visual_rows = Vec::with_capacity(plan.entries.len());
    let mut video_ids = Vec::with_capacity(plan.entries.len());
    for entry in &plan.entries {
        let (spec, feat) = materialize(entry, store)?;
        audio_rows.push(encoders::audio_branch(&mut g, &binding, model, &spec)?);
        visual_rows.push(encoders::visual_branch(&mut g, &binding, model, &feat, cfg.mode)?);
        video_ids.push(entry.video_id.clone());
    }
    let audio = g.stack_rows(&audio_rows)?;
    let visual = g.stack_rows(&visual_rows)?;
    let sim = g.matmul_nt(audio, visual)?;
    let loss_node = g.mms(sim, cfg.margin)?;
    let loss = g.value(loss_node).item();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    let grads = g.backward(loss_node)?;
    adam_step(params, &grads, adam, cfg.lr)?;
    Ok(loss)
}

fn val_score(
    params: &ParamSet,
    model: &ModelConfig,
    mode: VisualMode,
    manifest: &CorpusManifest,
    store: &mut ClipStore,
) -> Result<f64> {
    let emb = embed_split(params, model, mode, manifest, Split::Val, store)?;
    let sim = similarity_matrix(&emb.audio, &emb.visual, &emb.video_ids)?;
    let k = 10.min(sim.n);
    let fwd = recall_at_k(&sim, k, Direction::AudioToVisual)?;
    let bwd = recall_at_k(&sim, k, Direction::VisualToAudio)?;
    Ok((fwd + bwd) / 2.0)
}

/// Run one stage over the manifest's train split. Returns a checkpoint
/// whose provenance extends the initial checkpoint's. Deterministic in
/// (corpus bytes, config, seed).
pub fn train_stage(cfg: &StageConfig, manifest: &CorpusManifest, init: Init) -> Result<Checkpoint> {
    cfg.validate()?;
    let (mut params, model, mut provenance, epoch_base) = match init {
        Init::Fresh(model) => {
            let params = encoders::init_params(&model, cfg.seed)?;
            (params, model, Vec::new(), 0)
        }
        Init::Warm(ckpt) => {
            if !encoders::params_match_config(&ckpt.params, &ckpt.model) {
                return Err(Error::Shape("checkpoint parameters do not match its model config".into()));
            }
            // Same seed means "continue the batch stream", not replay it.
            let base = if ckpt.rng.seed == cfg.seed { ckpt.rng.next_epoch } else { 0 };
            (ckpt.params, ckpt.model, ckpt.provenance, base)
        }
    };

    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        params.set_frozen(name, false)?;
    }
    if cfg.freeze_visual {
        params.freeze_prefix("visual.");
    }

    let dsp = DspParams::default();
    let mut store = ClipStore::new(manifest, dsp.clone());
    check_feature_dims(manifest, &model, &mut store)?;
    if cfg.stage == Stage::Pretrain && dsp.frames_for_duration(cfg.clip_len_s) < model.min_frames() {
        return Err(Error::Config(format!(
            "clip_len_s {} yields fewer than the {} frames the conv stack needs",
            cfg.clip_len_s,
            model.min_frames()
        )));
    }

    let mut adam = AdamState::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut val_scores = Vec::new();
    let mut best: Option<(f64, ParamSet, usize)> = None;
    for epoch in 0..cfg.epochs {
        let plans = make_batches(
            manifest,
            Split::Train,
            cfg,
            &dsp,
            model.min_frames(),
            epoch_base + epoch as u64,
        )?;
        if plans.is_empty() {
            return Err(Error::Config("train split yields zero full batches".into()));
        }
        let mut sum = 0.0;
        for (b, plan) in plans.iter().enumerate() {
            let loss = train_batch(&mut params, &model, cfg, plan, &mut store, &mut adam)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch} batch {b}: {msg}")),
                    other => other,
                })?;
            sum += loss;
        }
        let mean = sum / plans.len() as f64;
        epoch_losses.push(mean);
        if cfg.select_best_on_val {
            let score = val_score(&params, &model, cfg.mode, manifest, &mut store)?;
            val_scores.push(score);
            if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
                best = Some((score, params.clone(), epoch));
            }
            log::info!("epoch {epoch}: mean loss {mean:.4}, val score {score:.4}");
        } else {
            log::info!("epoch {epoch}: mean loss {mean:.4}");
        }
    }

    let (params, selected_epoch) = match best {
        Some((_, p, e)) => (p, e),
        None => (params, cfg.epochs - 1),
    };
    provenance.push(StageProvenance {
        config: cfg.clone(),
        language: manifest.language.clone(),
        train_videos: {
            let mut seen = std::collections::HashSet::new();
            manifest
                .clips_in_split(Split::Train)
                .iter()
                .filter(|r| seen.insert(r.video_id.as_str()))
                .count()
        },
        epoch_losses,
        selected_epoch,
        val_scores,
    });
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        model,
        params,
        provenance,
        rng: RngCursor {
            seed: cfg.seed,
            next_epoch: epoch_base + cfg.epochs as u64,
        },
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"AVCK";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    provenance: Vec<StageProvenance>,
    rng: RngCursor,
    frozen: Vec<String>,
}

/// Layout: magic, version u32, metadata JSON (u32 length prefix), then per
/// parameter: name (u32 length + bytes), rank u32, dims u32 each, f32
/// little-endian data. All integers little-endian.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        model: ckpt.model.clone(),
        provenance: ckpt.provenance.clone(),
        rng: ckpt.rng,
        frozen: ckpt
            .params
            .iter()
            .filter(|(_, _, frozen)| *frozen)
            .map(|(name, _, _)| name.to_string())
            .collect(),
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&ckpt.version.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, tensor, _) in ckpt.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for d in tensor.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptCheckpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).map_err(|_| Error::NotACheckpoint)? != CHECKPOINT_MAGIC {
        return Err(Error::NotACheckpoint);
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let meta_len = c.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    let count = c.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("parameter name is not utf-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let raw = c.take(numel * 4)?;
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        params.insert(&name, Tensor::from_vec(&shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    for name in &meta.frozen {
        params
            .set_frozen(name, true)
            .map_err(|_| Error::CorruptCheckpoint(format!("frozen name {name} not present")))?;
    }
    if !encoders::params_match_config(&params, &meta.model) {
        return Err(Error::CorruptCheckpoint("parameters do not match model config".into()));
    }
    Ok(Checkpoint {
        version,
        model: meta.model,
        params,
        provenance: meta.provenance,
        rng: meta.rng,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::file(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::file(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[derive(Clone, Debug)]
pub struct CascadeConfigs {
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub scratch: StageConfig,
}

pub struct CascadeOutcome {
    pub scratch: Checkpoint,
    pub zero_shot: Checkpoint,
    pub finetuned: Checkpoint,
    /// Target-test retrieval reports per model, both directions.
    pub reports: BTreeMap<&'static str, (crate::eval::RetrievalReport, crate::eval::RetrievalReport)>,
}

/// The transfer protocol: train a scratch model on the target corpus,
/// pretrain on the source corpus, evaluate that model on the target with
/// no target training (zero-shot), then fine-tune it on the target. All
/// three are evaluated on the target test split.
pub fn run_cascade(
    source: &CorpusManifest,
    target: &CorpusManifest,
    cfgs: &CascadeConfigs,
) -> Result<CascadeOutcome> {
    let scratch = train_stage(&cfgs.scratch, target, Init::Fresh(cfgs.model.clone()))?;
    let pretrained = train_stage(&cfgs.pretrain, source, Init::Fresh(cfgs.model.clone()))?;
    let zero_shot = pretrained.clone();
    let finetuned = train_stage(&cfgs.finetune, target, Init::Warm(pretrained))?;

    let mut reports = BTreeMap::new();
    for (tag, ckpt) in [
        ("scratch", &scratch),
        ("zero_shot", &zero_shot),
        ("finetuned", &finetuned),
    ] {
        reports.insert(tag, crate::eval::evaluate(ckpt, target, Split::Test)?);
    }
    Ok(CascadeOutcome {
        scratch,
        zero_shot,
        finetuned,
        reports,
    })
}
