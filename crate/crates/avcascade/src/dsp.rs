//! Audio front end: waveform normalization, log mel filterbank
//! spectrograms, and the fixed-length pad/crop rule the audio encoder
//! expects. Spectrograms are computed in f64 and stored as f32.

use crate::error::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// PCM audio. Interleaved when `channels > 1`; normalization reduces to
/// mono.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub channels: u16,
}

impl Waveform {
    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
            channels: 1,
        }
    }

    /// Frames per channel.
    pub fn len(&self) -> usize {
        self.samples.len() / self.channels.max(1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

/// Canonical processing rate; inputs at other rates are resampled to it.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DspParams {
    pub sample_rate_hz: u32,
    pub window_ms: u32,
    pub hop_ms: u32,
    pub fft_size: usize,
    pub mel_bins: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
    pub max_duration_s: f64,
}

impl Default for DspParams {
    fn default() -> Self {
        DspParams {
            sample_rate_hz: SAMPLE_RATE,
            window_ms: 25,
            hop_ms: 10,
            fft_size: 512,
            mel_bins: 40,
            fmin_hz: 20.0,
            fmax_hz: 8_000.0,
            log_floor: 1e-10,
            max_duration_s: 50.0,
        }
    }
}

impl DspParams {
    pub fn window_len(&self) -> usize {
        (self.sample_rate_hz as usize * self.window_ms as usize) / 1000
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate_hz as usize * self.hop_ms as usize) / 1000
    }

    pub fn frame_hop_s(&self) -> f64 {
        self.hop_ms as f64 / 1000.0
    }

    /// Spectrogram cell for silence; also the pad value.
    pub fn floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }

    /// Frames produced by `num_samples` of audio (>= one window).
    pub fn frames_for_samples(&self, num_samples: usize) -> usize {
        (num_samples - self.window_len()) / self.hop_len() + 1
    }

    /// Frames produced by `seconds` of audio.
    pub fn frames_for_duration(&self, seconds: f64) -> usize {
        let samples = (seconds * self.sample_rate_hz as f64).round() as usize;
        self.frames_for_samples(samples)
    }

    /// Frame count of a length-fitted spectrogram (4998 with defaults).
    pub fn max_frames(&self) -> usize {
        self.frames_for_duration(self.max_duration_s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_ms < self.hop_ms {
            return Err(Error::Config("window must be at least one hop".into()));
        }
        if self.fmax_hz > self.sample_rate_hz as f64 / 2.0 {
            return Err(Error::Config("fmax above Nyquist".into()));
        }
        if self.fmin_hz < 0.0 || self.fmin_hz >= self.fmax_hz {
            return Err(Error::Config("bad mel frequency range".into()));
        }
        if self.mel_bins == 0 {
            return Err(Error::Config("need at least one mel bin".into()));
        }
        if self.fft_size < self.window_len() {
            return Err(Error::Config("fft smaller than the window".into()));
        }
        if self.log_floor <= 0.0 || self.max_duration_s <= 0.0 {
            return Err(Error::Config("log floor and max duration must be positive".into()));
        }
        Ok(())
    }
}

/// Log mel filterbank energies, row-major `frames x bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<f32>,
    pub frame_hop_s: f64,
}

impl MelSpectrogram {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }
}

/// Mono, resampled, clamped copy of the input.
///
/// Channel-average for multi-channel input, then linear-interpolation
/// resampling when rates differ. Equal-rate mono input comes back
/// bit-identical.
pub fn normalize_audio(wave: &Waveform, target_rate: u32) -> Result<Waveform> {
    if wave.is_empty() {
        return Err(Error::EmptyAudio);
    }
    if target_rate == 0 || wave.sample_rate == 0 {
        return Err(Error::Config("sample rates must be positive".into()));
    }
    if wave.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::CorruptAudio("non-finite sample".into()));
    }
    let ch = wave.channels.max(1) as usize;
    let mono: Vec<f32> = if ch == 1 {
        wave.samples.clone()
    } else {
        wave.samples
            .chunks(ch)
            .map(|frame| frame.iter().sum::<f32>() / ch as f32)
            .collect()
    };
    let resampled = if wave.sample_rate == target_rate {
        mono
    } else {
        let n_src = mono.len();
        let n_out =
            ((n_src as u64 * target_rate as u64) / wave.sample_rate as u64) as usize;
        let ratio = wave.sample_rate as f64 / target_rate as f64;
        (0..n_out)
            .map(|i| {
                let pos = i as f64 * ratio;
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n_src - 1);
                let frac = (pos - i0 as f64) as f32;
                mono[i0] * (1.0 - frac) + mono[i1] * frac
            })
            .collect()
    };
    let clamped = resampled.iter().map(|s| s.clamp(-1.0, 1.0)).collect();
    Ok(Waveform::mono(clamped, target_rate))
}

/// Hann-windowed power STFT pooled through a triangular mel filterbank,
/// then the natural log of `max(power, log_floor)`.
pub fn log_mel(wave: &Waveform, params: &DspParams) -> Result<MelSpectrogram> {
    params.validate()?;
    if wave.sample_rate != params.sample_rate_hz {
        return Err(Error::Config(format!(
            "waveform at {} Hz, dsp expects {} Hz",
            wave.sample_rate, params.sample_rate_hz
        )));
    }
    if wave.channels != 1 {
        return Err(Error::Config("log_mel expects mono audio".into()));
    }
    let window = params.window_len();
    let hop = params.hop_len();
    if wave.samples.len() < window {
        return Err(Error::AudioTooShort {
            got: wave.samples.len(),
            need: window,
        });
    }
    let frames = params.frames_for_samples(wave.samples.len());
    let n_freq = params.fft_size / 2 + 1;
    let hann: Vec<f64> = (0..window)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / window as f64).cos())
        .collect();
    let bank = mel_filterbank(params);

    let fft = FftPlanner::<f64>::new().plan_fft_forward(params.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); params.fft_size];
    let mut power = vec![0.0f64; n_freq];
    let mut values = Vec::with_capacity(frames * params.mel_bins);
    for t in 0..frames {
        let start = t * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            let s = if i < window {
                wave.samples[start + i] as f64 * hann[i]
            } else {
                0.0
            };
            *c = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(buf.iter().take(n_freq)) {
            *p = c.re * c.re + c.im * c.im;
        }
        for weights in &bank {
            let e: f64 = weights
                .iter()
                .zip(&power)
                .map(|(w, p)| w * p)
                .sum();
            values.push(e.max(params.log_floor).ln() as f32);
        }
    }
    Ok(MelSpectrogram {
        frames,
        bins: params.mel_bins,
        values,
        frame_hop_s: params.frame_hop_s(),
    })
}

/// Exactly `max_frames` frames: shorter inputs are right-padded with the
/// floor value, longer inputs keep their first frames.
pub fn fit_length(spec: &MelSpectrogram, params: &DspParams) -> MelSpectrogram {
    let target = params.max_frames();
    let mut values = Vec::with_capacity(target * spec.bins);
    let keep = spec.frames.min(target);
    values.extend_from_slice(&spec.values[..keep * spec.bins]);
    values.resize(target * spec.bins, params.floor_value());
    MelSpectrogram {
        frames: target,
        bins: spec.bins,
        values,
        frame_hop_s: spec.frame_hop_s,
    }
}

pub(crate) fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub(crate) fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Dense triangular filterbank, one weight row per mel bin over the
/// non-negative FFT bins.
fn mel_filterbank(params: &DspParams) -> Vec<Vec<f64>> {
    let n_freq = params.fft_size / 2 + 1;
    let lo = hz_to_mel(params.fmin_hz);
    let hi = hz_to_mel(params.fmax_hz);
    let centers: Vec<f64> = (0..params.mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (params.mel_bins + 1) as f64))
        .collect();
    let mut bank = Vec::with_capacity(params.mel_bins);
    for m in 0..params.mel_bins {
        let (lower, center, upper) = (centers[m], centers[m + 1], centers[m + 2]);
        let mut row = vec![0.0f64; n_freq];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * params.sample_rate_hz as f64 / params.fft_size as f64;
            let rising = (f - lower) / (center - lower);
            let falling = (upper - f) / (upper - center);
            *w = rising.min(falling).max(0.0);
        }
        bank.push(row);
    }
    bank
}

/// Center frequencies of the mel bins, in Hz.
pub fn mel_bin_centers(params: &DspParams) -> Vec<f64> {
    let lo = hz_to_mel(params.fmin_hz);
    let hi = hz_to_mel(params.fmax_hz);
    (1..=params.mel_bins)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (params.mel_bins + 1) as f64))
        .collect()
}

// --- WAV I/O ---

/// 16-bit integer or 32-bit float PCM WAV, mono or stereo.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::corrupt_file(path, format!("wav open: {e}")))?;
    let spec = reader.spec();
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::corrupt_file(path, format!("wav data: {e}")))?,
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::corrupt_file(path, format!("wav data: {e}")))?,
        (fmt, bits) => {
            return Err(Error::corrupt_file(
                path,
                format!("unsupported wav format {fmt:?}/{bits}"),
            ))
        }
    };
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
        channels: spec.channels,
    })
}

/// 16-bit PCM; samples are clamped then quantized.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: wave.channels,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::corrupt_file(path, e.to_string()))?;
    for &s in &wave.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(q)
            .map_err(|e| Error::corrupt_file(path, e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::corrupt_file(path, e.to_string()))?;
    Ok(())
}

// --- MELS file format ---

const MELS_MAGIC: &[u8; 4] = b"MELS";
const MELS_VERSION: u32 = 1;

/// 16-byte header (magic, version, frames, bins) then row-major
/// little-endian f32 values.
pub fn write_mels(path: &Path, spec: &MelSpectrogram) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(MELS_MAGIC)?;
    f.write_all(&MELS_VERSION.to_le_bytes())?;
    f.write_all(&(spec.frames as u32).to_le_bytes())?;
    f.write_all(&(spec.bins as u32).to_le_bytes())?;
    let mut bytes = Vec::with_capacity(spec.values.len() * 4);
    for v in &spec.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// The header carries no hop field; `frame_hop_s` is restored from the
/// default DSP hop.
pub fn read_mels(path: &Path) -> Result<MelSpectrogram> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header)
        .map_err(|_| Error::corrupt_file(path, "truncated header"))?;
    if &header[0..4] != MELS_MAGIC {
        return Err(Error::corrupt_file(path, "bad magic"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != MELS_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let frames = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let bins = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut bytes = vec![0u8; frames * bins * 4];
    f.read_exact(&mut bytes)
        .map_err(|_| Error::corrupt_file(path, "truncated values"))?;
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(MelSpectrogram {
        frames,
        bins,
        values,
        frame_hop_s: DspParams::default().frame_hop_s(),
    })
}
