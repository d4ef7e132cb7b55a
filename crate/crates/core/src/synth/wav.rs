use super::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

/// 16-bit PCM mono RIFF/WAVE with the canonical 44-byte header.
pub fn write_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = (clip.samples.len() * 2) as u32;
    let mut b = Vec::with_capacity(44 + data_len as usize);
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&(36 + data_len).to_le_bytes());
    b.extend_from_slice(b"WAVE");
    b.extend_from_slice(b"fmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes()); // PCM
    b.extend_from_slice(&1u16.to_le_bytes()); // mono
    b.extend_from_slice(&clip.sample_rate.to_le_bytes());
    b.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    b.extend_from_slice(&2u16.to_le_bytes());
    b.extend_from_slice(&16u16.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&data_len.to_le_bytes());
    for &s in &clip.samples {
        let q = (s.clamp(-1.0, 1.0) as f64 * 32767.0).round() as i16;
        b.extend_from_slice(&q.to_le_bytes());
    }
    b
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

pub fn read_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Wav("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut format_seen = false;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Wav(format!("chunk {:?} truncated", String::from_utf8_lossy(id))))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Wav("fmt chunk too short".into()));
                }
                let code = u16_at(body, 0);
                let channels = u16_at(body, 2);
                let rate = u32_at(body, 4);
                let bits = u16_at(body, 14);
                if code != 1 {
                    return Err(Error::Wav(format!("unsupported format code {code}")));
                }
                if channels != 1 || bits != 16 {
                    return Err(Error::Wav(format!(
                        "expected 16-bit mono, got {bits}-bit {channels}-channel"
                    )));
                }
                if rate != SAMPLE_RATE {
                    return Err(Error::Wav(format!("sample rate {rate} Hz, expected {SAMPLE_RATE}")));
                }
                format_seen = true;
            }
            b"data" => {
                if !format_seen {
                    return Err(Error::Wav("data chunk before fmt chunk".into()));
                }
                let samples = body
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32767.0)
                    .map(|s| s.max(-1.0))
                    .collect();
                return Ok(AudioClip::new(samples));
            }
            _ => {}
        }
        pos = body_end + (len & 1);
    }
    Err(Error::Wav("no data chunk".into()))
}
