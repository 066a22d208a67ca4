//! Synthetic bilingual corpus generator. Each clip depicts one concept: its
//! visual features are a concept centroid plus noise (the visual world is
//! language-independent), and its audio is the language's tone for that
//! concept plus noise. A configurable fraction of concepts share their tone
//! across languages, standing in for natural sounds that carry meaning
//! regardless of the narration language; the rest are placed in
//! language-offset positions, standing in for speech. Tone placement works
//! in mel space so that "different" always means separated by at least a
//! full filterbank bin, which is what the downstream encoder can actually
//! distinguish.

use crate::corpus::{ClipRecord, CorpusManifest, Split};
use crate::dsp::{hz_to_mel, mel_to_hz, write_wav, DspParams, Waveform, SAMPLE_RATE};
use crate::encoders::VisualFeatures;
use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

const TONE_AMPLITUDE: f64 = 0.35;
/// Private concepts occupy cells of this many mel bins; the language
/// offset stays strictly inside the cell.
const PRIVATE_CELL_BINS: usize = 3;
/// 2D features per second of video, 3D features per second.
const FRAMES_2D_PER_S: f64 = 4.0;
const SEGMENTS_3D_PER_S: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub num_videos: usize,
    pub clips_per_video: usize,
    pub clip_duration_s: f64,
    pub num_concepts: usize,
    /// Fraction of concepts whose audio is identical across languages.
    pub shared_concept_fraction: f64,
    pub noise_sigma: f64,
    pub language: String,
    pub feature_dim_2d: usize,
    pub feature_dim_3d: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            num_videos: 40,
            clips_per_video: 8,
            clip_duration_s: 10.0,
            num_concepts: 12,
            shared_concept_fraction: 0.3,
            noise_sigma: 0.05,
            language: "a".to_string(),
            feature_dim_2d: 12,
            feature_dim_3d: 8,
            seed: 0,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if self.num_videos == 0 || self.clips_per_video == 0 {
            return Err(Error::Config("need at least one video and one clip per video".into()));
        }
        if self.clip_duration_s <= 0.0 {
            return Err(Error::Config("clip_duration_s must be positive".into()));
        }
        if self.num_concepts < 2 {
            return Err(Error::Config("need at least two concepts".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_concept_fraction) {
            return Err(Error::Config("shared_concept_fraction must be in [0, 1]".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if self.feature_dim_2d == 0 || self.feature_dim_3d == 0 {
            return Err(Error::Config("feature dims must be positive".into()));
        }
        Ok(())
    }
}

/// Per-concept tone frequencies for one language. Placement happens on the
/// default analysis filterbank's mel grid: shared concepts sit on every
/// other bin center from the bottom (identical in every language), and
/// each private concept owns a cell of `PRIVATE_CELL_BINS` bins whose
/// in-cell slot is picked by the language tag's hash. Different cells
/// guarantee within-language separation of at least one bin; different
/// slots keep the same private concept at least one bin apart across
/// languages.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptCodebook {
    pub language: String,
    pub shared_count: usize,
    /// `frequencies[c]` is concept c's tone in Hz.
    pub frequencies: Vec<f64>,
}

/// In-cell placement of a language's private tones: one of the
/// `PRIVATE_CELL_BINS` whole-bin slots, picked by the language tag's hash.
/// Whole bins keep every tone on a filterbank bin center, so two distinct
/// slots always differ by at least one full bin. Language pairs whose
/// hashes land on the same slot would share private tones; compare this
/// value across tags when choosing corpus languages.
pub fn language_offset_bins(language: &str) -> f64 {
    let frac = rng::hash_str(language) as f64 / (u64::MAX as f64 + 1.0);
    (frac * PRIVATE_CELL_BINS as f64).floor()
}

impl ConceptCodebook {
    pub fn build(params: &SynthParams) -> Result<ConceptCodebook> {
        params.validate()?;
        let dsp = DspParams::default();
        let bins = dsp.mel_bins;
        let lo = hz_to_mel(dsp.fmin_hz);
        let step = (hz_to_mel(dsp.fmax_hz) - lo) / (bins + 1) as f64;
        let mel_at = |slot: f64| lo + (slot + 1.0) * step;

        let c_total = params.num_concepts;
        let shared_count = (params.shared_concept_fraction * c_total as f64).round() as usize;
        let private_count = c_total - shared_count;
        // Shared tones on bins 1, 3, 5, ...; private cells start two bins
        // above the last shared tone.
        let private_base = 2 * shared_count + 2;
        let last_slot = private_base + PRIVATE_CELL_BINS * private_count.saturating_sub(1)
            + (PRIVATE_CELL_BINS - 1);
        if private_count > 0 && last_slot > bins - 1 {
            return Err(Error::Config(format!(
                "{c_total} concepts need {last_slot} mel bins but the filterbank has {bins}; reduce num_concepts"
            )));
        }
        let offset = language_offset_bins(&params.language);
        let frequencies = (0..c_total)
            .map(|c| {
                let slot = if c < shared_count {
                    (2 * c + 1) as f64
                } else {
                    (private_base + PRIVATE_CELL_BINS * (c - shared_count)) as f64 + offset
                };
                mel_to_hz(mel_at(slot))
            })
            .collect();
        Ok(ConceptCodebook {
            language: params.language.clone(),
            shared_count,
            frequencies,
        })
    }

    pub fn is_shared(&self, concept: usize) -> bool {
        concept < self.shared_count
    }
}

fn centroid(seed: u64, purpose: &str, concept: usize, dim: usize) -> Vec<f32> {
    // Keyed by concept only: the visual world is the same in every language.
    let mut r = rng::stream(seed, purpose, &[concept as u64]);
    (0..dim).map(|_| r.sample::<f64, _>(StandardNormal) as f32).collect()
}

fn render_audio(freq: f64, duration_s: f64, noise_sigma: f64, rng: &mut impl Rng) -> Waveform {
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / SAMPLE_RATE as f64;
        let mut v = TONE_AMPLITUDE * (2.0 * std::f64::consts::PI * freq * t).sin();
        v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
        samples.push(v.clamp(-1.0, 1.0) as f32);
    }
    Waveform::mono(samples, SAMPLE_RATE)
}

fn render_visual(
    seed: u64,
    concept: usize,
    params: &SynthParams,
    rng: &mut impl Rng,
) -> VisualFeatures {
    let t = ((params.clip_duration_s * FRAMES_2D_PER_S).round() as usize).max(1);
    let s = ((params.clip_duration_s * SEGMENTS_3D_PER_S).round() as usize).max(1);
    let c2 = centroid(seed, "centroid2d", concept, params.feature_dim_2d);
    let c3 = centroid(seed, "centroid3d", concept, params.feature_dim_3d);
    let noisy = |base: &[f32], rows: usize, rng: &mut dyn rand::RngCore| -> Vec<f32> {
        let mut out = Vec::with_capacity(rows * base.len());
        for _ in 0..rows {
            for &b in base {
                let eps: f64 = rng.sample(StandardNormal);
                out.push(b + (params.noise_sigma * eps) as f32);
            }
        }
        out
    };
    VisualFeatures {
        t,
        d2: params.feature_dim_2d,
        frames_2d: noisy(&c2, t, rng),
        s,
        d3: params.feature_dim_3d,
        segments_3d: noisy(&c3, s, rng),
    }
}

/// Generate the corpus under `out_dir` (audio/ and visual/ subdirectories
/// plus manifest.jsonl) and return the manifest. Fully deterministic given
/// the params; per-video randomness is keyed on (seed, language, video
/// index), so growing num_videos extends a corpus without disturbing
/// earlier videos.
pub fn generate_corpus(params: &SynthParams, out_dir: &Path) -> Result<CorpusManifest> {
    let codebook = ConceptCodebook::build(params)?;
    let audio_dir = out_dir.join("audio");
    let visual_dir = out_dir.join("visual");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::file(&audio_dir, e))?;
    std::fs::create_dir_all(&visual_dir).map_err(|e| Error::file(&visual_dir, e))?;

    let lang_hash = rng::hash_str(&params.language);
    let mut manifest = CorpusManifest::new(&params.language);
    manifest.root = out_dir.to_path_buf();
    let mut concepts = serde_json::Map::new();

    for v in 0..params.num_videos {
        let video_id = format!("{}_v{v:05}", params.language);
        let mut r = rng::stream(params.seed, "video", &[lang_hash, v as u64]);
        for k in 0..params.clips_per_video {
            let concept = r.gen_range(0..params.num_concepts);
            let clip_id = format!("{video_id}_c{k:02}");
            let audio_rel = format!("audio/{clip_id}.wav");
            let visual_rel = format!("visual/{clip_id}.vfea");

            let wave = render_audio(
                codebook.frequencies[concept],
                params.clip_duration_s,
                params.noise_sigma,
                &mut r,
            );
            write_wav(&out_dir.join(&audio_rel), &wave)?;
            let feat = render_visual(params.seed, concept, params, &mut r);
            write_vfea(&feat, &out_dir.join(&visual_rel))?;

            concepts.insert(clip_id.clone(), Value::from(concept));
            manifest.records.push(ClipRecord {
                video_id: video_id.clone(),
                clip_id,
                start_s: k as f64 * params.clip_duration_s,
                end_s: (k + 1) as f64 * params.clip_duration_s,
                split: Split::Unassigned,
                language: params.language.clone(),
                audio_path: audio_rel,
                visual_feature_path: visual_rel,
            });
        }
    }

    manifest.metadata.insert("concepts".into(), Value::Object(concepts));
    manifest
        .metadata
        .insert("num_concepts".into(), Value::from(params.num_concepts));
    manifest
        .metadata
        .insert("shared_concepts".into(), Value::from(codebook.shared_count));
    crate::corpus::save_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

const VFEA_MAGIC: &[u8; 4] = b"VFEA";
const VFEA_VERSION: u32 = 1;

/// Header: magic, version, d2, d3, t, s as little-endian u32; then t*d2
/// then s*d3 f32 values.
pub fn write_vfea(feat: &VisualFeatures, path: &Path) -> Result<()> {
    debug_assert_eq!(feat.frames_2d.len(), feat.t * feat.d2);
    debug_assert_eq!(feat.segments_3d.len(), feat.s * feat.d3);
    let mut buf = Vec::with_capacity(24 + 4 * (feat.frames_2d.len() + feat.segments_3d.len()));
    buf.extend_from_slice(VFEA_MAGIC);
    for v in [VFEA_VERSION, feat.d2 as u32, feat.d3 as u32, feat.t as u32, feat.s as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for x in feat.frames_2d.iter().chain(feat.segments_3d.iter()) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::file(path, e))
}

pub fn read_vfea(path: &Path) -> Result<VisualFeatures> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut header = [0u8; 24];
    f.read_exact(&mut header)
        .map_err(|_| Error::corrupt_file(path, "truncated header"))?;
    if &header[0..4] != VFEA_MAGIC {
        return Err(Error::corrupt_file(path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap());
    if word(1) != VFEA_VERSION {
        return Err(Error::corrupt_file(path, format!("unsupported version {}", word(1))));
    }
    let (d2, d3, t, s) = (word(2) as usize, word(3) as usize, word(4) as usize, word(5) as usize);
    let mut body = Vec::new();
    f.read_to_end(&mut body).map_err(|e| Error::file(path, e))?;
    let want = 4 * (t * d2 + s * d3);
    if body.len() != want {
        return Err(Error::corrupt_file(
            path,
            format!("expected {want} payload bytes, found {}", body.len()),
        ));
    }
    let floats: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (frames_2d, segments_3d) = floats.split_at(t * d2);
    Ok(VisualFeatures {
        t,
        d2,
        frames_2d: frames_2d.to_vec(),
        s,
        d3,
        segments_3d: segments_3d.to_vec(),
    })
}

/// Ground-truth concept for each clip, parsed back out of manifest metadata.
pub fn concept_map(manifest: &CorpusManifest) -> Result<BTreeMap<String, usize>> {
    let Some(Value::Object(m)) = manifest.metadata.get("concepts") else {
        return Err(Error::CorruptManifest("missing concepts metadata".into()));
    };
    m.iter()
        .map(|(k, v)| {
            v.as_u64()
                .map(|c| (k.clone(), c as usize))
                .ok_or_else(|| Error::CorruptManifest(format!("bad concept for {k}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::read_wav;

    fn tiny_params(language: &str, noise: f64) -> SynthParams {
        SynthParams {
            num_videos: 4,
            clips_per_video: 3,
            clip_duration_s: 0.5,
            num_concepts: 6,
            shared_concept_fraction: 0.5,
            noise_sigma: noise,
            language: language.to_string(),
            feature_dim_2d: 5,
            feature_dim_3d: 4,
            seed: 11,
        }
    }

    #[test]
    fn codebook_shape_and_sharing() {
        let a = ConceptCodebook::build(&tiny_params("a", 0.0)).unwrap();
        let b = ConceptCodebook::build(&tiny_params("b", 0.0)).unwrap();
        assert_eq!(a.shared_count, 3);
        for c in 0..3 {
            assert_eq!(a.frequencies[c], b.frequencies[c]);
        }
        for c in 3..6 {
            assert_ne!(a.frequencies[c], b.frequencies[c]);
        }
    }

    #[test]
    fn codebook_tones_are_separated_within_language() {
        // Separation must hold in mel space, where the encoder's
        // filterbank actually resolves tones: at least one full bin apart.
        let mut p = tiny_params("a", 0.0);
        p.num_concepts = 12;
        p.shared_concept_fraction = 0.3;
        let cb = ConceptCodebook::build(&p).unwrap();
        let dsp = DspParams::default();
        let step = (hz_to_mel(dsp.fmax_hz) - hz_to_mel(dsp.fmin_hz)) / (dsp.mel_bins + 1) as f64;
        let mut mels: Vec<f64> = cb.frequencies.iter().map(|&f| hz_to_mel(f)).collect();
        mels.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for w in mels.windows(2) {
            assert!(w[1] - w[0] >= 0.99 * step, "tones {} and {} mel too close", w[0], w[1]);
        }
        assert!(mels.last().unwrap() < &hz_to_mel(dsp.fmax_hz));
    }

    #[test]
    fn default_language_pair_separates_by_a_full_bin() {
        // The benchmark corpora use tags "a" and "b"; their private tones
        // must land at least one mel bin apart or the encoder cannot tell
        // the languages apart.
        let gap = (language_offset_bins("a") - language_offset_bins("b")).abs();
        assert!(gap >= 1.0, "offset gap {gap} bins");
        let a = ConceptCodebook::build(&tiny_params("a", 0.0)).unwrap();
        let b = ConceptCodebook::build(&tiny_params("b", 0.0)).unwrap();
        let dsp = DspParams::default();
        let step = (hz_to_mel(dsp.fmax_hz) - hz_to_mel(dsp.fmin_hz)) / (dsp.mel_bins + 1) as f64;
        for c in a.shared_count..a.frequencies.len() {
            let d = (hz_to_mel(a.frequencies[c]) - hz_to_mel(b.frequencies[c])).abs();
            assert!(d >= 0.99 * step, "private concept {c} only {d} mel apart");
        }
    }

    #[test]
    fn codebook_rejects_out_of_band() {
        // 14 private concepts need cells past the 40-bin filterbank.
        let mut p = tiny_params("a", 0.0);
        p.num_concepts = 20;
        p.shared_concept_fraction = 0.3;
        assert!(matches!(ConceptCodebook::build(&p), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_byte_identical() {
        let p = tiny_params("a", 0.1);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_corpus(&p, d1.path()).unwrap();
        generate_corpus(&p, d2.path()).unwrap();
        for entry in walk(d1.path()) {
            let rel = entry.strip_prefix(d1.path()).unwrap();
            let x = std::fs::read(&entry).unwrap();
            let y = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(x, y, "mismatch at {rel:?}");
        }
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn growing_the_corpus_preserves_earlier_videos() {
        let mut small = tiny_params("a", 0.1);
        let mut large = small.clone();
        small.num_videos = 3;
        large.num_videos = 5;
        let ds = tempfile::tempdir().unwrap();
        let dl = tempfile::tempdir().unwrap();
        let ms = generate_corpus(&small, ds.path()).unwrap();
        let ml = generate_corpus(&large, dl.path()).unwrap();
        assert_eq!(ms.records, ml.records[..ms.records.len()]);
        for r in &ms.records {
            let a = std::fs::read(ms.audio_path_abs(r)).unwrap();
            let b = std::fs::read(ml.audio_path_abs(r)).unwrap();
            assert_eq!(a, b, "audio differs for {}", r.clip_id);
        }
    }

    #[test]
    fn zero_noise_visuals_classify_perfectly() {
        let p = tiny_params("a", 0.0);
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(&p, dir.path()).unwrap();
        let truth = concept_map(&m).unwrap();
        let centroids: Vec<Vec<f32>> = (0..p.num_concepts)
            .map(|c| centroid(p.seed, "centroid2d", c, p.feature_dim_2d))
            .collect();
        for r in &m.records {
            let feat = read_vfea(&m.visual_path_abs(r)).unwrap();
            let frame = &feat.frames_2d[..feat.d2];
            let best = (0..p.num_concepts)
                .min_by(|&x, &y| {
                    let dx: f32 = frame.iter().zip(&centroids[x]).map(|(a, b)| (a - b).powi(2)).sum();
                    let dy: f32 = frame.iter().zip(&centroids[y]).map(|(a, b)| (a - b).powi(2)).sum();
                    dx.partial_cmp(&dy).unwrap()
                })
                .unwrap();
            assert_eq!(best, truth[&r.clip_id]);
        }
    }

    /// The dominant spectral component of generated audio must match the
    /// codebook: identical across languages for shared concepts, different
    /// for non-shared ones. The oracle projects the raw waveform directly
    /// onto each candidate frequency (no shared code with the dsp module).
    #[test]
    fn spectral_peaks_follow_the_codebook() {
        let pa = tiny_params("a", 0.0);
        let pb = tiny_params("b", 0.0);
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        let ma = generate_corpus(&pa, da.path()).unwrap();
        let mb = generate_corpus(&pb, db.path()).unwrap();
        let ta = concept_map(&ma).unwrap();
        let tb = concept_map(&mb).unwrap();
        let cba = ConceptCodebook::build(&pa).unwrap();
        let cbb = ConceptCodebook::build(&pb).unwrap();

        let candidates: Vec<f64> = cba
            .frequencies
            .iter()
            .chain(cbb.frequencies.iter())
            .copied()
            .collect();
        let dominant = |w: &Waveform| -> f64 {
            let mut best = (0.0, 0.0);
            for &f in &candidates {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for (i, s) in w.samples.iter().enumerate() {
                    let ph = 2.0 * std::f64::consts::PI * f * i as f64 / SAMPLE_RATE as f64;
                    re += *s as f64 * ph.cos();
                    im -= *s as f64 * ph.sin();
                }
                let mag = re * re + im * im;
                if mag > best.0 {
                    best = (mag, f);
                }
            }
            best.1
        };
        let pick = |m: &CorpusManifest, t: &BTreeMap<String, usize>, c: usize| {
            m.records
                .iter()
                .find(|r| t[&r.clip_id] == c)
                .map(|r| read_wav(&m.audio_path_abs(r)).unwrap())
        };

        let mut checked_shared = false;
        let mut checked_private = false;
        for c in 0..pa.num_concepts {
            let (Some(wa), Some(wb)) = (pick(&ma, &ta, c), pick(&mb, &tb, c)) else {
                continue;
            };
            let (fa, fb) = (dominant(&wa), dominant(&wb));
            assert_eq!(fa, cba.frequencies[c], "language a concept {c}");
            assert_eq!(fb, cbb.frequencies[c], "language b concept {c}");
            if cba.is_shared(c) {
                assert_eq!(fa, fb, "shared concept {c} should have the same peak");
                checked_shared = true;
            } else {
                assert_ne!(fa, fb, "private concept {c} should differ across languages");
                checked_private = true;
            }
        }
        assert!(checked_shared && checked_private);
    }

    #[test]
    fn vfea_round_trip_and_corruption() {
        let feat = VisualFeatures {
            t: 3,
            d2: 2,
            frames_2d: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            s: 1,
            d3: 4,
            segments_3d: vec![9.0, 8.0, 7.0, 6.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.vfea");
        write_vfea(&feat, &path).unwrap();
        assert_eq!(read_vfea(&path).unwrap(), feat);

        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_vfea(&path), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn vfea_rejects_truncation() {
        let feat = VisualFeatures {
            t: 2,
            d2: 3,
            frames_2d: vec![0.0; 6],
            s: 1,
            d3: 2,
            segments_3d: vec![0.0; 2],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.vfea");
        write_vfea(&feat, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_vfea(&path), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn manifest_passes_corpus_pipeline() {
        let p = tiny_params("a", 0.05);
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(&p, dir.path()).unwrap();
        let split = crate::corpus::build_splits(&m, (0.5, 0.25, 0.25), 9).unwrap();
        assert_eq!(split.clips_in_split(Split::Train).len(), 6);
        let loaded = crate::corpus::load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.records, m.records);
        assert_eq!(loaded.root, dir.path());
    }
}
