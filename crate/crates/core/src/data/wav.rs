//! RIFF/WAVE PCM16 mono 16 kHz reader and writer. Samples map to floats by
//! s = v / 32768, which round-trips the 16-bit values exactly.

use std::fs;
use std::path::Path;

use super::{WavClip, SAMPLE_RATE};
use crate::error::{Error, Result};

const SCALE: f64 = 32_768.0;

/// Decode WAV bytes, enforcing PCM16 / mono / 16 kHz.
pub fn decode_wav(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(Error::format("not a RIFF file"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::format("not a WAVE file"));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(Error::format("truncated chunk"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format("fmt chunk too short"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {} // skip LIST, fact, ...
        }
        // RIFF chunks are word-aligned.
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| Error::format("missing fmt chunk"))?;
    if format != 1 {
        return Err(Error::format(format!("expected PCM format 1, got {format}")));
    }
    if channels != 1 {
        return Err(Error::format(format!("expected mono, got {channels} channels")));
    }
    if rate != SAMPLE_RATE {
        return Err(Error::format(format!("expected {SAMPLE_RATE} Hz, got {rate}")));
    }
    if bits != 16 {
        return Err(Error::format(format!("expected 16-bit samples, got {bits}")));
    }
    let data = data.ok_or_else(|| Error::format("missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(Error::format("odd data chunk length for 16-bit samples"));
    }
    Ok(data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / SCALE)
        .collect())
}

/// Encode samples as PCM16 mono 16 kHz WAV bytes.
pub fn encode_wav(samples: &[f64]) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let v = (s * SCALE).round().clamp(-32_768.0, 32_767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_wav(path: &Path) -> Result<WavClip> {
    let bytes = fs::read(path)?;
    let samples = decode_wav(&bytes)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    Ok(WavClip::new(samples, path.to_string_lossy()))
}

pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    fs::write(path, encode_wav(samples))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_round_trip() {
        let bytes = encode_wav(&[0.0; 100]);
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back, vec![0.0; 100]);
    }

    #[test]
    fn pcm_scaling_definition() {
        // PCM value 16384 -> 0.5
        let bytes = encode_wav(&[0.5]);
        let v = i16::from_le_bytes([bytes[44], bytes[45]]);
        assert_eq!(v, 16_384);
        assert_eq!(decode_wav(&bytes).unwrap(), vec![0.5]);
    }

    #[test]
    fn write_read_reproduces_pcm_bytes_exactly() {
        let mut rng = crate::rng::SplitRng::seed_from(3);
        let samples: Vec<f64> = (0..500).map(|_| rng.range(-1.0, 1.0)).collect();
        let bytes1 = encode_wav(&samples);
        let decoded = decode_wav(&bytes1).unwrap();
        let bytes2 = encode_wav(&decoded);
        assert_eq!(bytes1, bytes2, "PCM bytes must round-trip bit-exactly");
    }

    #[test]
    fn rejects_wrong_formats() {
        assert!(decode_wav(b"nope").is_err());
        // stereo file
        let mut bytes = encode_wav(&[0.0; 4]);
        bytes[22] = 2;
        let err = decode_wav(&bytes).unwrap_err().to_string();
        assert!(err.contains("mono"), "{err}");
        // wrong rate
        let mut bytes = encode_wav(&[0.0; 4]);
        bytes[24..28].copy_from_slice(&44_100u32.to_le_bytes());
        let err = decode_wav(&bytes).unwrap_err().to_string();
        assert!(err.contains("16000"), "{err}");
    }

    #[test]
    fn skips_unknown_chunks() {
        let mut bytes = encode_wav(&[0.25, -0.25]);
        // splice a LIST chunk between fmt and data
        let mut spliced = bytes[..36].to_vec();
        spliced.extend_from_slice(b"LIST");
        spliced.extend_from_slice(&4u32.to_le_bytes());
        spliced.extend_from_slice(b"INFO");
        spliced.extend_from_slice(&bytes[36..]);
        let riff_len = (spliced.len() - 8) as u32;
        spliced[4..8].copy_from_slice(&riff_len.to_le_bytes());
        bytes = spliced;
        assert_eq!(decode_wav(&bytes).unwrap(), vec![0.25, -0.25]);
    }
}
