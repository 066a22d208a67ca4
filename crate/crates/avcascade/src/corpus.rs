//! Dataset construction: energy-based speech segmentation, clip-length
//! filtering, video-disjoint train/val/test splits, nested percentage
//! subsampling, and line-delimited JSON manifest I/O. Manifests are
//! immutable values; every operation returns a new one.

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipInterval {
    pub start_s: f64,
    pub end_s: f64,
}

impl ClipInterval {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

/// One clip of one video. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub video_id: String,
    pub clip_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub split: Split,
    pub language: String,
    pub audio_path: String,
    pub visual_feature_path: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VadParams {
    pub frame_ms: u32,
    /// Activity threshold in dB relative to whole-track RMS (negative).
    pub energy_threshold_db: f64,
    /// Regions closer than this are merged.
    pub min_gap_s: f64,
    pub min_clip_s: f64,
    pub max_clip_s: f64,
}

impl Default for VadParams {
    fn default() -> Self {
        VadParams {
            frame_ms: 30,
            energy_threshold_db: -30.0,
            min_gap_s: 0.3,
            min_clip_s: 5.0,
            max_clip_s: 50.0,
        }
    }
}

/// A corpus: clip records plus a language tag and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<ClipRecord>,
    pub language: String,
    pub metadata: BTreeMap<String, Value>,
    /// Directory clip paths resolve against; set on load/save, not serialized.
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn new(language: &str) -> Self {
        CorpusManifest {
            records: Vec::new(),
            language: language.to_string(),
            metadata: BTreeMap::new(),
            root: PathBuf::new(),
        }
    }

    /// Unique video ids in first-appearance order.
    pub fn video_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.video_id.as_str()) {
                out.push(r.video_id.clone());
            }
        }
        out
    }

    pub fn clips_in_split(&self, split: Split) -> Vec<&ClipRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn audio_path_abs(&self, rec: &ClipRecord) -> PathBuf {
        self.root.join(&rec.audio_path)
    }

    pub fn visual_path_abs(&self, rec: &ClipRecord) -> PathBuf {
        self.root.join(&rec.visual_feature_path)
    }

    /// Keep only the named videos (order of records preserved).
    pub fn retain_videos(&self, keep: &BTreeSet<String>) -> CorpusManifest {
        CorpusManifest {
            records: self
                .records
                .iter()
                .filter(|r| keep.contains(&r.video_id))
                .cloned()
                .collect(),
            language: self.language.clone(),
            metadata: self.metadata.clone(),
            root: self.root.clone(),
        }
    }
}

/// Frames whose RMS clears the threshold (relative to track RMS) form
/// active regions; regions separated by less than `min_gap_s` merge. A
/// silent track yields no intervals.
pub fn segment_speech(wave: &Waveform, vad: &VadParams) -> Vec<ClipInterval> {
    let frame_len = (wave.sample_rate as usize * vad.frame_ms as usize) / 1000;
    if frame_len == 0 || wave.samples.len() < frame_len {
        return Vec::new();
    }
    let track_ms: f64 = wave
        .samples
        .iter()
        .map(|s| (*s as f64) * (*s as f64))
        .sum::<f64>()
        / wave.samples.len() as f64;
    if track_ms <= 0.0 {
        return Vec::new();
    }
    let threshold_ms = track_ms * 10f64.powf(vad.energy_threshold_db / 10.0);
    let frame_s = frame_len as f64 / wave.sample_rate as f64;

    // Active runs over whole frames; the partial tail frame is ignored.
    let mut regions: Vec<ClipInterval> = Vec::new();
    let mut run_start: Option<usize> = None;
    let n_frames = wave.samples.len() / frame_len;
    for f in 0..=n_frames {
        let active = if f < n_frames {
            let fr = &wave.samples[f * frame_len..(f + 1) * frame_len];
            let ms: f64 =
                fr.iter().map(|s| (*s as f64) * (*s as f64)).sum::<f64>() / frame_len as f64;
            ms > threshold_ms
        } else {
            false
        };
        match (active, run_start) {
            (true, None) => run_start = Some(f),
            (false, Some(s)) => {
                regions.push(ClipInterval {
                    start_s: s as f64 * frame_s,
                    end_s: f as f64 * frame_s,
                });
                run_start = None;
            }
            _ => {}
        }
    }

    // Merge regions separated by less than the minimum gap.
    let mut merged: Vec<ClipInterval> = Vec::new();
    for r in regions {
        match merged.last_mut() {
            Some(prev) if r.start_s - prev.end_s < vad.min_gap_s => prev.end_s = r.end_s,
            _ => merged.push(r),
        }
    }
    merged
}

/// Keep intervals with `min_clip_s <= duration <= max_clip_s` (inclusive);
/// order preserved, long intervals dropped rather than cropped.
pub fn filter_clips(intervals: &[ClipInterval], vad: &VadParams) -> Vec<ClipInterval> {
    intervals
        .iter()
        .filter(|iv| {
            let d = iv.duration_s();
            d >= vad.min_clip_s && d <= vad.max_clip_s
        })
        .copied()
        .collect()
}

/// Largest-remainder apportionment of `n` items to `fractions`; ties break
/// toward earlier positions.
fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Shuffle videos with a seeded generator and partition them by fractions;
/// every clip inherits its video's split, so no video straddles two splits.
pub fn build_splits(
    manifest: &CorpusManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<CorpusManifest> {
    if manifest.records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    if manifest.records.iter().any(|r| r.split != Split::Unassigned) {
        return Err(Error::Config("manifest already has split assignments".into()));
    }
    let mut videos = manifest.video_ids();
    videos.shuffle(&mut rng::stream(seed, "build-splits", &[]));
    let counts = largest_remainder(videos.len(), &[ft, fv, fe]);
    let mut assign: HashMap<&str, Split> = HashMap::new();
    let mut cursor = 0;
    for (count, split) in counts.iter().zip([Split::Train, Split::Val, Split::Test]) {
        for v in &videos[cursor..cursor + count] {
            assign.insert(v.as_str(), split);
        }
        cursor += count;
    }
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = assign[r.video_id.as_str()];
    }
    Ok(out)
}

/// Keep `round(percent% of videos)` chosen as a seeded permutation prefix,
/// so selections with the same seed nest: videos(p1) is a subset of
/// videos(p2) whenever p1 <= p2.
pub fn subsample(manifest: &CorpusManifest, percent: f64, seed: u64) -> Result<CorpusManifest> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Config(format!("percent must be in (0, 100], got {percent}")));
    }
    let videos = manifest.video_ids();
    if videos.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let k = (percent / 100.0 * videos.len() as f64).round() as usize;
    if k == 0 {
        return Err(Error::SubsampleTooSmall {
            percent,
            videos: videos.len(),
        });
    }
    let mut permuted = videos;
    permuted.shuffle(&mut rng::stream(seed, "subsample", &[]));
    let keep: BTreeSet<String> = permuted.into_iter().take(k).collect();
    Ok(manifest.retain_videos(&keep))
}

const MANIFEST_VERSION: u64 = 1;

/// Line-delimited JSON: one header line, then one ClipRecord object per
/// line.
pub fn save_manifest(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let header = serde_json::json!({
        "manifest_version": MANIFEST_VERSION,
        "language": manifest.language,
        "metadata": manifest.metadata,
    });
    writeln!(f, "{}", serde_json::to_string(&header)?)?;
    for r in &manifest.records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::CorruptManifest("empty file".into()))?
        .map_err(|e| Error::file(path, e))?;
    let header: Value = serde_json::from_str(&header_line)
        .map_err(|e| Error::CorruptManifest(format!("header: {e}")))?;
    match header.get("manifest_version").and_then(Value::as_u64) {
        Some(MANIFEST_VERSION) => {}
        Some(v) => {
            return Err(Error::CorruptManifest(format!("unsupported manifest version {v}")))
        }
        None => return Err(Error::CorruptManifest("missing manifest_version".into())),
    }
    let language = header
        .get("language")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::CorruptManifest("missing language".into()))?
        .to_string();
    let metadata = match header.get("metadata") {
        Some(Value::Object(m)) => m.clone().into_iter().collect(),
        _ => BTreeMap::new(),
    };
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClipRecord = serde_json::from_str(&line)
            .map_err(|e| Error::CorruptManifest(format!("record {}: {e}", i + 1)))?;
        if !seen.insert(rec.clip_id.clone()) {
            return Err(Error::CorruptManifest(format!("duplicate clip_id {}", rec.clip_id)));
        }
        records.push(rec);
    }
    Ok(CorpusManifest {
        records,
        language,
        metadata,
        root: path.parent().unwrap_or(Path::new("")).to_path_buf(),
    })
}
