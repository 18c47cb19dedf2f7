//! Procedural clips whose tags each have a known physical signature.

use std::f64::consts::TAU;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Label, TrainingError};
use crate::dsp::{DspConfig, PcmClip};

/// Clip length in seconds; at 16 kHz this is exactly one 256-frame window.
pub const CLIP_SECONDS: f64 = 4.112;
pub const SYNTH_RATE: u32 = 16_000;
/// Length of the silent gap cut into every quiet clip.
pub const GAP_SECONDS: f64 = 0.4;

const LOUD_RMS: f64 = 0.5;
const LOUD_PEAK: f64 = 0.9;
const QUIET_RMS: f64 = 0.08;
/// Background noise RMS relative to digital full scale (-40 dBFS). A fixed
/// absolute floor gives loud and quiet frames different signal-to-noise
/// ratios, so loudness stays visible frame by frame.
const NOISE_RMS: f64 = 0.01;
const VIBRATO_HZ: f64 = 5.5;
const VIBRATO_DEPTH: f64 = 0.03;
const FORMANT_HZ: f64 = 2500.0;
const FORMANT_Q: f64 = 4.0;
/// Formant band RMS relative to the tonal part.
const FORMANT_REL: f64 = 0.6;
const HARMONICS: [f64; 3] = [1.0, 0.5, 0.33];
const ENV_FLOOR: f64 = 0.25;
const ENV_DECAY_SECS: f64 = 0.03;

/// A synthesized clip and, for quiet clips, the sample range of its gap.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub clip: PcmClip,
    pub gap: Option<Range<usize>>,
}

impl SynthClip {
    /// Frames of `cfg` whose whole analysis window lies inside the gap, as
    /// an inclusive-exclusive range.
    pub fn gap_frames(&self, cfg: &DspConfig) -> Option<Range<usize>> {
        let gap = self.gap.as_ref()?;
        let first = gap.start.div_ceil(cfg.hop_size);
        let end = (gap.end.checked_sub(cfg.window_size)? / cfg.hop_size) + 1;
        (end > first).then_some(first..end)
    }
}

pub fn clip_samples() -> usize {
    (CLIP_SECONDS * SYNTH_RATE as f64).round() as usize
}

fn rms(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Band-pass biquad (constant 0 dB peak gain).
fn bandpass(x: &[f64], fc: f64, q: f64, sr: f64) -> Vec<f64> {
    let w0 = TAU * fc / sr;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&x0| {
            let y0 = b0 * x0 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            y0
        })
        .collect()
}

/// Renders a clip for a validated label. Every random draw happens in the
/// same order whatever the label, so two labels rendered with one seed
/// share pitch, tempo, phases and noise.
pub fn synth_labeled(label: Label, seed: u64) -> SynthClip {
    let sr = SYNTH_RATE as f64;
    let n = clip_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u_f0: f64 = rng.gen();
    let u_rate: f64 = rng.gen();
    let onset_phase: f64 = rng.gen();
    let vib_phase: f64 = rng.gen::<f64>() * TAU;
    let u_gap: f64 = rng.gen();
    let mut formant_src: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let background: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * 3f64.sqrt()).collect();

    let f0 = if label.low {
        80.0 + 120.0 * u_f0
    } else {
        600.0 + 900.0 * u_f0
    };
    let rate = if label.fast {
        6.0 + 2.0 * u_rate
    } else {
        0.5 + u_rate
    };

    let mut phase = 0.0f64;
    let mut tone = Vec::with_capacity(n);
    let mut env = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let vib = if label.vocal {
            VIBRATO_DEPTH * (TAU * VIBRATO_HZ * t + vib_phase).sin()
        } else {
            0.0
        };
        phase += TAU * f0 * (1.0 + vib) / sr;
        tone.push(
            HARMONICS
                .iter()
                .enumerate()
                .map(|(k, a)| a * ((k + 1) as f64 * phase).sin())
                .sum::<f64>(),
        );
        let since = (t * rate - onset_phase).rem_euclid(1.0) / rate;
        env.push(ENV_FLOOR + (1.0 - ENV_FLOOR) * (-since / ENV_DECAY_SECS).exp());
    }
    let mut mix: Vec<f64> = tone.iter().zip(&env).map(|(s, e)| s * e).collect();
    if label.vocal {
        formant_src = bandpass(&formant_src, FORMANT_HZ, FORMANT_Q, sr);
        for (f, e) in formant_src.iter_mut().zip(&env) {
            *f *= e;
        }
        let k = FORMANT_REL * rms(&mix) / rms(&formant_src);
        for (m, f) in mix.iter_mut().zip(&formant_src) {
            *m += k * f;
        }
    }

    let r = rms(&mix);
    let gap = if label.loud {
        for m in mix.iter_mut() {
            *m = LOUD_PEAK * (*m * LOUD_RMS / r / LOUD_PEAK).tanh();
        }
        None
    } else {
        for m in mix.iter_mut() {
            *m *= QUIET_RMS / r;
        }
        let len = (GAP_SECONDS * sr).round() as usize;
        let start = (u_gap * (n - len) as f64) as usize;
        mix[start..start + len].fill(0.0);
        Some(start..start + len)
    };

    let samples = mix
        .iter()
        .zip(&background)
        .map(|(m, w)| (m + NOISE_RMS * w).clamp(-1.0, 1.0) as f32)
        .collect();
    SynthClip {
        clip: PcmClip::new(samples, SYNTH_RATE).expect("synthesized samples are in range"),
        gap,
    }
}

/// Renders the clip for an 8-dim multi-hot label.
pub fn synth_clip(label: &[f32], seed: u64) -> Result<PcmClip, TrainingError> {
    Ok(synth_labeled(Label::from_multi_hot(label)?, seed).clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(tags: &[&str]) -> Label {
        Label::from_tags(tags).unwrap()
    }

    fn clip_rms(c: &PcmClip) -> f64 {
        rms(&c.samples().iter().map(|&s| s as f64).collect::<Vec<_>>())
    }

    /// Counts upward crossings of the mid level of a short-time RMS envelope.
    fn onset_count(c: &PcmClip) -> usize {
        let (win, hop) = (320, 80);
        let env: Vec<f64> = c
            .samples()
            .windows(win)
            .step_by(hop)
            .map(|w| (w.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / win as f64).sqrt())
            .collect();
        let lo = env.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = env.iter().cloned().fold(0.0, f64::max);
        let thr = 0.5 * (lo + hi);
        env.windows(2).filter(|p| p[0] < thr && p[1] >= thr).count()
    }

    #[test]
    fn same_seed_same_samples() {
        let l = label(&["loud", "no_vocal", "slow", "low"]);
        assert_eq!(synth_labeled(l, 5).clip, synth_labeled(l, 5).clip);
        assert_ne!(synth_labeled(l, 5).clip, synth_labeled(l, 6).clip);
        assert_eq!(synth_labeled(l, 5).clip.samples().len(), 65_792);
    }

    #[test]
    fn loud_is_more_than_four_times_quiet_rms() {
        for seed in 0..16u64 {
            for base in 0..8usize {
                let mut l = Label::from_index(base * 2);
                l.loud = true;
                let loud = synth_labeled(l, seed).clip;
                l.loud = false;
                let quiet = synth_labeled(l, seed).clip;
                let (a, b) = (clip_rms(&loud), clip_rms(&quiet));
                assert!(a > 4.0 * b, "seed {seed} label {l:?}: {a} vs {b}");
                // The tonal part peaks at LOUD_PEAK; the background noise rides on top.
                let bound = (LOUD_PEAK + NOISE_RMS * 3f64.sqrt()) as f32;
                assert!(loud.samples().iter().all(|s| s.abs() <= bound));
            }
        }
    }

    #[test]
    fn fast_has_at_least_three_times_the_onsets_of_slow() {
        for seed in 0..16u64 {
            for low in [true, false] {
                for vocal in [true, false] {
                    let fast = Label { loud: true, vocal, fast: true, low };
                    let slow = Label { fast: false, ..fast };
                    let nf = onset_count(&synth_labeled(fast, seed).clip);
                    let ns = onset_count(&synth_labeled(slow, seed).clip);
                    assert!(nf >= 3 * ns.max(1), "seed {seed} {fast:?}: {nf} vs {ns}");
                }
            }
        }
    }

    #[test]
    fn quiet_gap_is_silent_up_to_background_noise() {
        let s = synth_labeled(label(&["quiet", "vocal", "fast", "high"]), 3);
        let gap = s.gap.clone().unwrap();
        assert_eq!(gap.len(), 6400);
        let in_gap: Vec<f64> = s.clip.samples()[gap].iter().map(|&v| v as f64).collect();
        let peak = in_gap.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak <= NOISE_RMS * 3f64.sqrt() + 1e-6, "{peak}");
        assert!((rms(&in_gap) / NOISE_RMS - 1.0).abs() < 0.05, "{}", rms(&in_gap));
        let frames = s.gap_frames(&DspConfig::default()).unwrap();
        assert!((23..=24).contains(&frames.len()), "{frames:?}");
        assert!(synth_labeled(label(&["loud", "vocal", "fast", "high"]), 3).gap.is_none());
    }

    #[test]
    fn invalid_labels_are_rejected() {
        assert!(synth_clip(&[1., 1., 1., 0., 1., 0., 1., 0.], 0).is_err());
        assert!(synth_clip(&[1., 0., 1., 0.], 0).is_err());
        assert!(synth_clip(&[1., 0., 0., 1., 0., 1., 1., 0.], 0).is_ok());
    }
}
