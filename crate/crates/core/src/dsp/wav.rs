//! Minimal RIFF/WAVE reader and writer for 16-bit integer PCM.

use std::fs;
use std::path::Path;

use super::{DspError, PcmClip};

const PCM_FORMAT: u16 = 1;
const EXTENSIBLE_FORMAT: u16 = 0xFFFE;

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<PcmClip, DspError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DspError::Io(format!("{}: {e}", path.display())))?;
    parse_wav(&bytes)
}

/// Decodes a WAV byte buffer. Stereo input is averaged to mono and
/// integer samples are scaled by `1/32768`.
pub fn parse_wav(bytes: &[u8]) -> Result<PcmClip, DspError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(DspError::Format("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(DspError::Format(format!(
                "chunk {:?} claims {size} bytes past end of file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(DspError::Format("fmt chunk shorter than 16 bytes".into()));
                }
                let mut format = u16_at(bytes, body);
                if format == EXTENSIBLE_FORMAT && size >= 26 {
                    format = u16_at(bytes, body + 24);
                }
                fmt = Some((
                    format,
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {}
        }
        // Chunks are padded to even length.
        pos = body + size + (size & 1);
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| DspError::Format("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| DspError::Format("no data chunk".into()))?;
    if format != PCM_FORMAT {
        return Err(DspError::Unsupported(format!("codec tag {format}, only PCM (1) is read")));
    }
    if bits != 16 {
        return Err(DspError::Unsupported(format!("{bits}-bit samples, only 16-bit is read")));
    }
    if !(1..=2).contains(&channels) {
        return Err(DspError::Unsupported(format!("{channels} channels, only mono or stereo")));
    }
    if rate == 0 {
        return Err(DspError::Format("sample rate is zero".into()));
    }
    let frame = 2 * channels as usize;
    let samples: Vec<f32> = data
        .chunks_exact(frame)
        .map(|f| {
            let sum: i32 = f
                .chunks_exact(2)
                .map(|s| i16::from_le_bytes([s[0], s[1]]) as i32)
                .sum();
            sum as f32 / (32768.0 * channels as f32)
        })
        .collect();
    PcmClip::new(samples, rate)
}

/// Encodes a mono clip as 16-bit PCM.
pub fn encode_wav(clip: &PcmClip) -> Vec<u8> {
    let n = clip.samples().len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate().to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in clip.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, clip: &PcmClip) -> Result<(), DspError> {
    let path = path.as_ref();
    fs::write(path, encode_wav(clip)).map_err(|e| DspError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled WAV with the given channel count and raw i16 frames.
    fn fixture(channels: u16, rate: u32, bits: u16, format: u16, samples: &[i16]) -> Vec<u8> {
        let data: Vec<u8> = samples.iter().flat_map(|s| s.to_le_bytes()).collect();
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&format.to_le_bytes());
        b.extend_from_slice(&channels.to_le_bytes());
        b.extend_from_slice(&rate.to_le_bytes());
        b.extend_from_slice(&(rate * channels as u32 * 2).to_le_bytes());
        b.extend_from_slice(&(channels * 2).to_le_bytes());
        b.extend_from_slice(&bits.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&(data.len() as u32).to_le_bytes());
        b.extend_from_slice(&data);
        b
    }

    #[test]
    fn silent_mono_second() {
        let clip = parse_wav(&fixture(1, 16000, 16, 1, &[0; 16000])).unwrap();
        assert_eq!(clip.samples().len(), 16000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
        assert_eq!(clip.sample_rate(), 16000);
    }

    #[test]
    fn opposite_stereo_channels_cancel() {
        let frames: Vec<i16> = (0..100).flat_map(|_| [16384i16, -16384]).collect();
        let clip = parse_wav(&fixture(2, 8000, 16, 1, &frames)).unwrap();
        assert_eq!(clip.samples().len(), 100);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn three_sample_scale_fixture() {
        let clip = parse_wav(&fixture(1, 16000, 16, 1, &[32767, -32768, 16384])).unwrap();
        assert_eq!(clip.samples(), &[32767.0 / 32768.0, -1.0, 0.5]);
        assert!((clip.samples()[0] - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn malformed_and_unsupported_inputs() {
        assert!(matches!(parse_wav(b"RIFX0000WAVE"), Err(DspError::Format(_))));
        assert!(matches!(
            parse_wav(&fixture(1, 16000, 24, 1, &[0; 6])),
            Err(DspError::Unsupported(_))
        ));
        assert!(matches!(
            parse_wav(&fixture(1, 16000, 16, 3, &[0; 4])),
            Err(DspError::Unsupported(_))
        ));
        let mut truncated = fixture(1, 16000, 16, 1, &[1, 2, 3, 4]);
        truncated.truncate(truncated.len() - 3);
        assert!(matches!(parse_wav(&truncated), Err(DspError::Format(_))));
    }

    #[test]
    fn encode_then_parse_recovers_quantized_samples() {
        let clip = PcmClip::new(vec![0.0, 0.5, -0.25, 0.999], 16000).unwrap();
        let back = parse_wav(&encode_wav(&clip)).unwrap();
        for (a, b) in clip.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }
}
