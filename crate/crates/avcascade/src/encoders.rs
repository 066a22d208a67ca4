//! The two embedding branches and their shared space. Audio: a small conv
//! stack over log-mel frames, mean-pooled over time, projected to d.
//! Visual: max-pooled per-frame 2D features (plus per-segment 3D features
//! in video mode), each projected to d and summed. Similarity is a raw dot
//! product; embeddings are not length-normalized.

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamSet, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualMode {
    /// 2D and 3D feature paths, summed.
    Video,
    /// 2D path only; 3D features are ignored entirely.
    Image,
}

/// Pooled backbone features for one clip. `frames_2d` is row-major T x D2,
/// `segments_3d` is S x D3. In image mode S may be 0.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub t: usize,
    pub d2: usize,
    pub frames_2d: Vec<f32>,
    pub s: usize,
    pub d3: usize,
    pub segments_3d: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mel_bins: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub embedding_dim: usize,
    pub feature_dim_2d: usize,
    pub feature_dim_3d: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mel_bins: 40,
            conv_channels: vec![32, 64, 64],
            kernel: 5,
            stride: 2,
            embedding_dim: 64,
            feature_dim_2d: 12,
            feature_dim_3d: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::Config("need at least one conv block".into()));
        }
        if self.kernel == 0 || self.stride == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("kernel, stride, embedding_dim must be positive".into()));
        }
        if self.mel_bins == 0 || self.feature_dim_2d == 0 || self.feature_dim_3d == 0 {
            return Err(Error::Config("feature dims must be positive".into()));
        }
        Ok(())
    }

    /// Smallest frame count the conv stack accepts.
    pub fn min_frames(&self) -> usize {
        let mut need = self.kernel;
        for _ in 1..self.conv_channels.len() {
            need = (need - 1) * self.stride + self.kernel;
        }
        need
    }
}

/// Fresh parameters, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) per tensor.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = crate::rng::stream(seed, "init", &[]);
    let mut p = ParamSet::new();
    let mut uniform = |shape: &[usize], fan_in: usize| -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::from_vec(shape, data).expect("count matches shape")
    };
    let mut c_in = cfg.mel_bins;
    for (i, &c_out) in cfg.conv_channels.iter().enumerate() {
        let fan = c_in * cfg.kernel;
        p.insert(&format!("audio.conv{i}.w"), uniform(&[c_out, c_in, cfg.kernel], fan))?;
        p.insert(&format!("audio.conv{i}.b"), uniform(&[c_out], fan))?;
        c_in = c_out;
    }
    let d = cfg.embedding_dim;
    p.insert("audio.proj.w", uniform(&[c_in, d], c_in))?;
    p.insert("audio.proj.b", uniform(&[d], c_in))?;
    p.insert(
        "visual.proj2d.w",
        uniform(&[cfg.feature_dim_2d, d], cfg.feature_dim_2d),
    )?;
    p.insert("visual.proj2d.b", uniform(&[d], cfg.feature_dim_2d))?;
    p.insert(
        "visual.proj3d.w",
        uniform(&[cfg.feature_dim_3d, d], cfg.feature_dim_3d),
    )?;
    p.insert("visual.proj3d.b", uniform(&[d], cfg.feature_dim_3d))?;
    Ok(p)
}

/// True when `params` was built for `cfg` (names and shapes both match).
pub fn params_match_config(params: &ParamSet, cfg: &ModelConfig) -> bool {
    match init_params(cfg, 0) {
        Ok(reference) => {
            params.len() == reference.len()
                && reference
                    .iter()
                    .all(|(name, t, _)| params.get(name).map(Tensor::shape) == Some(t.shape()))
        }
        Err(_) => false,
    }
}

fn spec_to_input(spec: &MelSpectrogram, cfg: &ModelConfig) -> Result<Tensor> {
    if spec.bins != cfg.mel_bins {
        return Err(Error::Config(format!(
            "spectrogram has {} bins, model expects {}",
            spec.bins, cfg.mel_bins
        )));
    }
    if spec.frames < cfg.min_frames() {
        return Err(Error::Shape(format!(
            "spectrogram has {} frames, conv stack needs at least {}",
            spec.frames,
            cfg.min_frames()
        )));
    }
    // Channel-major (bins x frames) for the conv stack.
    let mut data = vec![0.0f64; spec.bins * spec.frames];
    for t in 0..spec.frames {
        for b in 0..spec.bins {
            data[b * spec.frames + t] = spec.values[t * spec.bins + b] as f64;
        }
    }
    Tensor::from_vec(&[spec.bins, spec.frames], data)
}

/// Audio branch forward onto an existing graph; returns the 1 x d embedding
/// node. `binding` maps parameter names to graph nodes (see ParamSet::bind).
pub fn audio_branch(
    g: &mut Graph,
    binding: &BTreeMap<String, NodeId>,
    cfg: &ModelConfig,
    spec: &MelSpectrogram,
) -> Result<NodeId> {
    let mut x = g.input(spec_to_input(spec, cfg)?);
    for i in 0..cfg.conv_channels.len() {
        let w = binding[&format!("audio.conv{i}.w")];
        let b = binding[&format!("audio.conv{i}.b")];
        x = g.conv1d(x, w, b, cfg.stride)?;
        x = g.relu(x);
    }
    let pooled = g.mean_over_time(x)?;
    g.affine(pooled, binding["audio.proj.w"], binding["audio.proj.b"])
}

/// Visual branch forward; image mode never touches the 3D path.
pub fn visual_branch(
    g: &mut Graph,
    binding: &BTreeMap<String, NodeId>,
    cfg: &ModelConfig,
    feat: &VisualFeatures,
    mode: VisualMode,
) -> Result<NodeId> {
    if feat.t == 0 {
        return Err(Error::EmptyClip);
    }
    if feat.d2 != cfg.feature_dim_2d {
        return Err(Error::Config(format!(
            "2d features have dim {}, model expects {}",
            feat.d2, cfg.feature_dim_2d
        )));
    }
    let f2 = Tensor::from_vec(
        &[feat.t, feat.d2],
        feat.frames_2d.iter().map(|v| *v as f64).collect(),
    )?;
    let x2 = g.input(f2);
    let p2 = g.max_over_rows(x2)?;
    let e2 = g.affine(p2, binding["visual.proj2d.w"], binding["visual.proj2d.b"])?;
    match mode {
        VisualMode::Image => Ok(e2),
        VisualMode::Video => {
            if feat.s == 0 {
                return Err(Error::EmptyClip);
            }
            if feat.d3 != cfg.feature_dim_3d {
                return Err(Error::Config(format!(
                    "3d features have dim {}, model expects {}",
                    feat.d3, cfg.feature_dim_3d
                )));
            }
            let f3 = Tensor::from_vec(
                &[feat.s, feat.d3],
                feat.segments_3d.iter().map(|v| *v as f64).collect(),
            )?;
            let x3 = g.input(f3);
            let p3 = g.max_over_rows(x3)?;
            let e3 = g.affine(p3, binding["visual.proj3d.w"], binding["visual.proj3d.b"])?;
            g.add(e2, e3)
        }
    }
}

/// One-off audio embedding (inference).
pub fn embed_audio(spec: &MelSpectrogram, params: &ParamSet, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let out = audio_branch(&mut g, &binding, cfg, spec)?;
    Ok(g.value(out).data().to_vec())
}

/// One-off visual embedding (inference).
pub fn embed_visual(
    feat: &VisualFeatures,
    params: &ParamSet,
    cfg: &ModelConfig,
    mode: VisualMode,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let out = visual_branch(&mut g, &binding, cfg, feat, mode)?;
    Ok(g.value(out).data().to_vec())
}

/// B x B audio-visual dot products; entry (i, j) = dot(audio_i, visual_j).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    /// Row-major, row = audio index, column = visual index.
    pub values: Vec<f64>,
    /// Video id per batch position, for within-video negative accounting.
    pub pair_video_ids: Vec<String>,
}

pub fn similarity_matrix(
    audio: &[Vec<f64>],
    visual: &[Vec<f64>],
    pair_video_ids: &[String],
) -> Result<SimilarityMatrix> {
    let n = audio.len();
    if visual.len() != n || pair_video_ids.len() != n {
        return Err(Error::Shape(format!(
            "similarity needs aligned inputs, got {} audio / {} visual / {} ids",
            n,
            visual.len(),
            pair_video_ids.len()
        )));
    }
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let d = audio[0].len();
    if audio.iter().any(|a| a.len() != d) || visual.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("embedding dims differ".into()));
    }
    let mut values = vec![0.0f64; n * n];
    for (i, a) in audio.iter().enumerate() {
        for (j, v) in visual.iter().enumerate() {
            values[i * n + j] = a.iter().zip(v).map(|(x, y)| x * y).sum();
        }
    }
    Ok(SimilarityMatrix {
        n,
        values,
        pair_video_ids: pair_video_ids.to_vec(),
    })
}
