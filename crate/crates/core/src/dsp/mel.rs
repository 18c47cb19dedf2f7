use std::f64::consts::PI;
use std::io::{self, Write};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{DspConfig, DspError, PcmClip};
use crate::autodiff::{gemm, MatRef};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequency in Hz of every mel filter, low to high.
pub fn mel_center_frequencies(cfg: &DspConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

/// `n_mels + 2` filter edge frequencies uniformly spaced in mel.
fn mel_edges(cfg: &DspConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect()
}

/// Triangular filterbank as a row-major `n_mels x (window/2 + 1)` matrix.
pub fn mel_filterbank(cfg: &DspConfig) -> Vec<f32> {
    let n_bins = cfg.window_size / 2 + 1;
    let edges = mel_edges(cfg);
    let bin_hz = cfg.sample_rate as f64 / cfg.window_size as f64;
    let mut fb = vec![0.0f32; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[m * n_bins + k] = w as f32;
        }
    }
    fb
}

fn hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()) as f32)
        .collect()
}

/// Log-compressed mel-frequency power matrix, `n_mels x n_frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f32>,
    n_mels: usize,
    n_frames: usize,
    config: DspConfig,
}

impl MelSpectrogram {
    pub fn from_values(
        values: Vec<f32>,
        n_mels: usize,
        n_frames: usize,
        config: DspConfig,
    ) -> Result<Self, DspError> {
        if n_mels == 0 || n_frames == 0 || values.len() != n_mels * n_frames {
            return Err(DspError::Shape(format!(
                "{} values do not form a {n_mels} x {n_frames} spectrogram",
                values.len()
            )));
        }
        Ok(Self {
            values,
            n_mels,
            n_frames,
            config,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn config(&self) -> &DspConfig {
        &self.config
    }

    /// Row-major values, one row per mel bin.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }

    /// Frames `[start, start + len)`.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self, DspError> {
        if len == 0 || start + len > self.n_frames {
            return Err(DspError::Index(format!(
                "frames {start}..{} outside a {}-frame spectrogram",
                start + len,
                self.n_frames
            )));
        }
        let values = (0..self.n_mels)
            .flat_map(|m| self.values[m * self.n_frames + start..][..len].iter().copied())
            .collect();
        Self::from_values(values, self.n_mels, len, self.config.clone())
    }

    /// Writes rows = mel bins (low to high), columns = frames, six decimals.
    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        for m in 0..self.n_mels {
            let row = &self.values[m * self.n_frames..(m + 1) * self.n_frames];
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Hann-windowed power STFT (no centre padding) projected onto the mel
/// filterbank and compressed with `log10(max(power, floor))`.
pub fn log_mel(clip: &PcmClip, cfg: &DspConfig) -> Result<MelSpectrogram, DspError> {
    cfg.validate()?;
    if clip.sample_rate() != cfg.sample_rate {
        return Err(DspError::Config(format!(
            "clip is {} Hz but the config expects {} Hz",
            clip.sample_rate(),
            cfg.sample_rate
        )));
    }
    let n = clip.samples().len();
    if n < cfg.window_size {
        return Err(DspError::InputTooShort {
            samples: n,
            window: cfg.window_size,
        });
    }
    let n_frames = cfg.frame_count(n);
    let n_bins = cfg.window_size / 2 + 1;
    let window = hann(cfg.window_size);
    let fft = FftPlanner::<f32>::new().plan_fft_forward(cfg.window_size);
    let mut buf = vec![Complex::new(0.0f32, 0.0); cfg.window_size];
    let mut scratch = vec![Complex::new(0.0f32, 0.0); fft.get_inplace_scratch_len()];

    // Power spectra laid out bins x frames so the mel projection is one GEMM.
    let mut power = vec![0.0f32; n_bins * n_frames];
    for t in 0..n_frames {
        let frame = &clip.samples()[t * cfg.hop_size..t * cfg.hop_size + cfg.window_size];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..n_bins {
            power[k * n_frames + t] = buf[k].norm_sqr();
        }
    }

    let fb = mel_filterbank(cfg);
    let mut mel = vec![0.0f32; cfg.n_mels * n_frames];
    gemm(
        1.0,
        MatRef::new(&fb, cfg.n_mels, n_bins),
        MatRef::new(&power, n_bins, n_frames),
        0.0,
        &mut mel,
    );
    let floor = cfg.log_floor as f32;
    for v in mel.iter_mut() {
        *v = v.max(floor).log10();
    }
    MelSpectrogram::from_values(mel, cfg.n_mels, n_frames, cfg.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trip() {
        for f in [0.0, 100.0, 440.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-6);
        }
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.5);
    }

    #[test]
    fn filterbank_triangles_peak_near_centers() {
        let cfg = DspConfig::default();
        let fb = mel_filterbank(&cfg);
        let n_bins = cfg.window_size / 2 + 1;
        assert!(fb.iter().all(|&w| (0.0..=1.0).contains(&w)));
        // every filter covers at least one FFT bin
        for m in 0..cfg.n_mels {
            assert!(fb[m * n_bins..(m + 1) * n_bins].iter().any(|&w| w > 0.0), "filter {m} empty");
        }
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = DspConfig::default();
        let clip = PcmClip::new(vec![0.0; 4096], cfg.sample_rate).unwrap();
        let spec = log_mel(&clip, &cfg).unwrap();
        assert!(spec.values().iter().all(|&v| v == -10.0));
    }

    #[test]
    fn frame_count_for_model_length() {
        let cfg = DspConfig::default();
        let clip = PcmClip::new(vec![0.0; 65792], cfg.sample_rate).unwrap();
        assert_eq!(log_mel(&clip, &cfg).unwrap().n_frames(), 256);
    }

    #[test]
    fn short_clip_is_rejected() {
        let cfg = DspConfig::default();
        let clip = PcmClip::new(vec![0.0; 511], cfg.sample_rate).unwrap();
        assert!(matches!(log_mel(&clip, &cfg), Err(DspError::InputTooShort { .. })));
    }

    #[test]
    fn sine_peaks_at_nearest_center() {
        let cfg = DspConfig::default();
        let sr = cfg.sample_rate as f64;
        let samples = (0..16000)
            .map(|i| (2.0 * PI * 440.0 * i as f64 / sr).sin() as f32)
            .collect();
        let spec = log_mel(&PcmClip::new(samples, cfg.sample_rate).unwrap(), &cfg).unwrap();
        let means: Vec<f64> = (0..cfg.n_mels)
            .map(|m| (0..spec.n_frames()).map(|t| spec.get(m, t) as f64).sum::<f64>())
            .collect();
        let argmax = (0..cfg.n_mels).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();

        // Independent centres straight from the mel formula.
        let lo = 0.0f64;
        let hi = 2595.0 * (1.0 + 8000.0 / 700.0f64).log10();
        let centre = |m: usize| {
            let mel = lo + (hi - lo) * (m + 1) as f64 / (cfg.n_mels + 1) as f64;
            700.0 * (10f64.powf(mel / 2595.0) - 1.0)
        };
        let nearest = (0..cfg.n_mels)
            .min_by(|&a, &b| (centre(a) - 440.0).abs().total_cmp(&(centre(b) - 440.0).abs()))
            .unwrap();
        assert_eq!(argmax, nearest);
    }
}
