//! Audio ingest: WAV decoding, resampling, log mel-spectrograms and the
//! fixed-length windows the model consumes.

mod mel;
mod wav;

pub use mel::{hz_to_mel, log_mel, mel_center_frequencies, mel_filterbank, mel_to_hz, MelSpectrogram};
pub use wav::{encode_wav, load_wav, parse_wav, write_wav};

/// Frames per model input. With the default hop this spans
/// `256 * 256 + 512 - 256 = 65792` samples, about 4.112 s at 16 kHz.
pub const MODEL_FRAMES: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported audio: {0}")]
    Unsupported(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("invalid dsp config: {0}")]
    Config(String),
    #[error("input too short: {samples} samples, need at least one {window}-sample window")]
    InputTooShort { samples: usize, window: usize },
    #[error("index error: {0}")]
    Index(String),
    #[error("shape error: {0}")]
    Shape(String),
}

/// Mono PCM samples in `[-1, 1]` at a positive sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl PcmClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, DspError> {
        if sample_rate == 0 {
            return Err(DspError::InvalidClip("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(DspError::InvalidClip("clip has no samples".into()));
        }
        if let Some(i) = samples.iter().position(|s| !(-1.0..=1.0).contains(s)) {
            return Err(DspError::InvalidClip(format!(
                "sample {i} = {} lies outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f32) -> Result<Self, DspError> {
        Self::new(self.samples.iter().map(|s| s * gain).collect(), self.sample_rate)
    }
}

/// Linear-interpolation resampler with edge hold at the final sample.
///
/// Output length is `floor(n * target / source)`. Lossy: there is no
/// anti-aliasing filter.
pub fn resample_linear(clip: &PcmClip, target_rate: u32) -> Result<PcmClip, DspError> {
    if target_rate == 0 {
        return Err(DspError::InvalidClip("target rate must be positive".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src = clip.samples();
    let n_out = (src.len() as u64 * target_rate as u64 / clip.sample_rate as u64) as usize;
    if n_out == 0 {
        return Err(DspError::InvalidClip("resampled clip would be empty".into()));
    }
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let last = src.len() - 1;
    let out = (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = (pos - i0 as f64) as f32;
            let v = src[i0] + (src[i1] - src[i0]) * frac.min(1.0);
            v.clamp(-1.0, 1.0)
        })
        .collect();
    PcmClip::new(out, target_rate)
}

/// STFT and mel parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            window_size: 512,
            hop_size: 256,
            n_mels: 96,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: String| Err(DspError::Config(m));
        if self.sample_rate == 0 || self.window_size == 0 || self.hop_size == 0 || self.n_mels == 0 {
            return bad("rates, sizes and mel count must be positive".into());
        }
        if self.window_size < self.hop_size {
            return bad(format!("window {} shorter than hop {}", self.window_size, self.hop_size));
        }
        if self.n_mels >= self.window_size / 2 + 1 {
            return bad(format!(
                "{} mel bins need more than {} FFT bins",
                self.n_mels,
                self.window_size / 2 + 1
            ));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad(format!("need 0 <= fmin < fmax <= sample_rate/2, got {}..{}", self.fmin, self.fmax));
        }
        if !(self.log_floor > 0.0) {
            return bad("log floor must be positive".into());
        }
        Ok(())
    }

    /// Frames produced from `n_samples` without centre padding.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.window_size {
            0
        } else {
            (n_samples - self.window_size) / self.hop_size + 1
        }
    }

    /// Samples needed for exactly `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        frames * self.hop_size + self.window_size - self.hop_size
    }
}

/// Fixed-size model input, `n_mels x frames` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    values: Vec<f32>,
    n_mels: usize,
    frames: usize,
}

impl ModelInput {
    pub fn new(values: Vec<f32>, n_mels: usize, frames: usize) -> Result<Self, DspError> {
        if n_mels == 0 || frames == 0 || values.len() != n_mels * frames {
            return Err(DspError::Shape(format!(
                "{} values do not form a {n_mels} x {frames} input",
                values.len()
            )));
        }
        Ok(Self {
            values,
            n_mels,
            frames,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// [`MODEL_FRAMES`]-frame window starting at `start_frame`.
///
/// Spectrograms shorter than the window are tiled cyclically.
pub fn extract_window(spec: &MelSpectrogram, start_frame: i64) -> Result<ModelInput, DspError> {
    extract_window_len(spec, start_frame, MODEL_FRAMES)
}

pub fn extract_window_len(spec: &MelSpectrogram, start_frame: i64, len: usize) -> Result<ModelInput, DspError> {
    if start_frame < 0 {
        return Err(DspError::Index(format!("start frame {start_frame} is negative")));
    }
    let start = start_frame as usize;
    let n = spec.n_frames();
    if n >= len {
        if start + len > n {
            return Err(DspError::Index(format!(
                "window {start}..{} exceeds {n} frames",
                start + len
            )));
        }
        return ModelInput::new(spec.crop(start, len)?.values().to_vec(), spec.n_mels(), len);
    }
    if start >= n {
        return Err(DspError::Index(format!("start frame {start} beyond {n} frames")));
    }
    let mut values = Vec::with_capacity(spec.n_mels() * len);
    for m in 0..spec.n_mels() {
        values.extend((0..len).map(|j| spec.get(m, (start + j) % n)));
    }
    ModelInput::new(values, spec.n_mels(), len)
}

/// Time-axis concatenation `a ⊕ b`.
pub fn concat_spectrograms(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<MelSpectrogram, DspError> {
    if a.n_mels() != b.n_mels() || a.config() != b.config() {
        return Err(DspError::Shape(format!(
            "cannot concatenate {} and {} mel bins with differing configs",
            a.n_mels(),
            b.n_mels()
        )));
    }
    let n = a.n_frames() + b.n_frames();
    let mut values = Vec::with_capacity(a.n_mels() * n);
    for m in 0..a.n_mels() {
        values.extend_from_slice(&a.values()[m * a.n_frames()..(m + 1) * a.n_frames()]);
        values.extend_from_slice(&b.values()[m * b.n_frames()..(m + 1) * b.n_frames()]);
    }
    MelSpectrogram::from_values(values, a.n_mels(), n, a.config().clone())
}
