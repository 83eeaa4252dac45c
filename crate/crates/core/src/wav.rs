//! Minimal WAV reader/writer: 16/24-bit PCM and 32-bit float, interleaved
//! channels. Enough for stem files; no resampling, no compressed formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Pcm24,
    Float32,
}

impl WavFormat {
    fn bits(self) -> u16 {
        match self {
            WavFormat::Pcm16 => 16,
            WavFormat::Pcm24 => 24,
            WavFormat::Float32 => 32,
        }
    }

    fn format_tag(self) -> u16 {
        match self {
            WavFormat::Pcm16 | WavFormat::Pcm24 => 1,
            WavFormat::Float32 => 3,
        }
    }
}

impl std::str::FromStr for WavFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcm16" => Ok(WavFormat::Pcm16),
            "pcm24" => Ok(WavFormat::Pcm24),
            "f32" | "float32" => Ok(WavFormat::Float32),
            other => Err(Error::Config(format!("unknown wav format '{other}'"))),
        }
    }
}

/// Deinterleaved multi-channel audio.
#[derive(Clone, Debug)]
pub struct Audio<T> {
    pub sample_rate: u32,
    pub channels: Vec<Vec<T>>,
}

impl<T: Scalar> Audio<T> {
    pub fn stereo(sample_rate: u32, left: Vec<T>, right: Vec<T>) -> Self {
        Audio {
            sample_rate,
            channels: vec![left, right],
        }
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn require_stereo(&self) -> Result<[&Vec<T>; 2]> {
        if self.channels.len() != 2 {
            return Err(Error::Audio(format!(
                "stereo input required, got {} channel(s)",
                self.channels.len()
            )));
        }
        Ok([&self.channels[0], &self.channels[1]])
    }

    pub fn stereo_arrays(&self) -> Result<[Vec<T>; 2]> {
        let [l, r] = self.require_stereo()?;
        Ok([l.clone(), r.clone()])
    }
}

fn read_exact_or(reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|_| Error::Wav(format!("truncated file while reading {what}")))
}

fn u16_le(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn u32_le(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Reads a WAV file. Supported encodings: PCM 16/24-bit and IEEE float 32-bit
/// (plus the WAVE_FORMAT_EXTENSIBLE wrappers around them).
pub fn read_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<Audio<T>> {
    let mut reader = BufReader::new(File::open(path.as_ref())?);
    let mut header = [0u8; 12];
    read_exact_or(&mut reader, &mut header, "RIFF header")?;
    if &header[0..4] != b"RIFF" || &header[8..12] != b"WAVE" {
        return Err(Error::Wav("not a RIFF/WAVE file".into()));
    }

    let mut format_tag = 0u16;
    let mut channels = 0u16;
    let mut sample_rate = 0u32;
    let mut bits = 0u16;
    let mut data: Option<Vec<u8>> = None;

    loop {
        let mut chunk_header = [0u8; 8];
        match reader.read_exact(&mut chunk_header) {
            Ok(()) => {}
            Err(_) => break,
        }
        let id = &chunk_header[0..4];
        let size = u32_le(&chunk_header[4..8]) as usize;
        match id {
            b"fmt " => {
                let mut body = vec![0u8; size];
                read_exact_or(&mut reader, &mut body, "fmt chunk")?;
                format_tag = u16_le(&body[0..2]);
                channels = u16_le(&body[2..4]);
                sample_rate = u32_le(&body[4..8]);
                bits = u16_le(&body[14..16]);
                if format_tag == 0xFFFE && body.len() >= 26 {
                    // WAVE_FORMAT_EXTENSIBLE: the real tag leads the GUID.
                    format_tag = u16_le(&body[24..26]);
                }
            }
            b"data" => {
                let mut body = vec![0u8; size];
                read_exact_or(&mut reader, &mut body, "data chunk")?;
                data = Some(body);
                if size % 2 == 1 {
                    let mut pad = [0u8; 1];
                    let _ = reader.read_exact(&mut pad);
                }
            }
            _ => {
                let skip = size + (size % 2);
                let mut sink = vec![0u8; skip];
                if reader.read_exact(&mut sink).is_err() {
                    break;
                }
            }
        }
    }

    let data = data.ok_or_else(|| Error::Wav("missing data chunk".into()))?;
    if channels == 0 {
        return Err(Error::Wav("missing fmt chunk".into()));
    }
    let bytes_per_sample = match (format_tag, bits) {
        (1, 16) => 2,
        (1, 24) => 3,
        (3, 32) => 4,
        _ => {
            return Err(Error::Wav(format!(
                "unsupported encoding: format tag {format_tag}, {bits} bits"
            )))
        }
    };
    let frame_bytes = bytes_per_sample * channels as usize;
    let n_frames = data.len() / frame_bytes;
    let mut out: Vec<Vec<T>> = (0..channels).map(|_| Vec::with_capacity(n_frames)).collect();
    for frame in 0..n_frames {
        for (c, chan) in out.iter_mut().enumerate() {
            let off = frame * frame_bytes + c * bytes_per_sample;
            let v = match (format_tag, bits) {
                (1, 16) => {
                    let raw = i16::from_le_bytes([data[off], data[off + 1]]);
                    raw as f64 / 32768.0
                }
                (1, 24) => {
                    let raw = i32::from_le_bytes([0, data[off], data[off + 1], data[off + 2]]) >> 8;
                    raw as f64 / 8388608.0
                }
                (3, 32) => {
                    f32::from_le_bytes([data[off], data[off + 1], data[off + 2], data[off + 3]])
                        as f64
                }
                _ => unreachable!(),
            };
            chan.push(T::of(v));
        }
    }
    Ok(Audio {
        sample_rate,
        channels: out,
    })
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Writes interleaved audio in the requested encoding.
pub fn write_wav<T: Scalar>(path: impl AsRef<Path>, audio: &Audio<T>, format: WavFormat) -> Result<()> {
    let channels = audio.channels.len();
    if channels == 0 {
        return Err(Error::Audio("cannot write zero-channel audio".into()));
    }
    let len = audio.len();
    if audio.channels.iter().any(|c| c.len() != len) {
        return Err(Error::Audio("channel lengths differ".into()));
    }

    let bytes_per_sample = (format.bits() / 8) as usize;
    let data_len = len * channels * bytes_per_sample;
    let mut writer = BufWriter::new(File::create(path.as_ref())?);

    writer.write_all(b"RIFF")?;
    writer.write_all(&((36 + data_len) as u32).to_le_bytes())?;
    writer.write_all(b"WAVE")?;
    writer.write_all(b"fmt ")?;
    writer.write_all(&16u32.to_le_bytes())?;
    writer.write_all(&format.format_tag().to_le_bytes())?;
    writer.write_all(&(channels as u16).to_le_bytes())?;
    writer.write_all(&audio.sample_rate.to_le_bytes())?;
    let byte_rate = audio.sample_rate * (channels * bytes_per_sample) as u32;
    writer.write_all(&byte_rate.to_le_bytes())?;
    writer.write_all(&((channels * bytes_per_sample) as u16).to_le_bytes())?;
    writer.write_all(&format.bits().to_le_bytes())?;
    writer.write_all(b"data")?;
    writer.write_all(&(data_len as u32).to_le_bytes())?;

    for frame in 0..len {
        for chan in &audio.channels {
            let x = chan[frame].as_f64();
            match format {
                WavFormat::Pcm16 => {
                    let v = (clamp_unit(x) * 32767.0).round() as i16;
                    writer.write_all(&v.to_le_bytes())?;
                }
                WavFormat::Pcm24 => {
                    let v = (clamp_unit(x) * 8388607.0).round() as i32;
                    let b = v.to_le_bytes();
                    writer.write_all(&b[0..3])?;
                }
                WavFormat::Float32 => {
                    writer.write_all(&(x as f32).to_le_bytes())?;
                }
            }
        }
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("bsmamba2-wav-{name}-{}", std::process::id()));
        p
    }

    fn ramp(len: usize, gain: f64) -> Vec<f64> {
        (0..len).map(|i| gain * (i as f64 / len as f64 - 0.5)).collect()
    }

    #[test]
    fn float32_round_trip_is_exact_at_f32() {
        let path = tmp("f32.wav");
        let audio = Audio::stereo(44100, ramp(100, 1.0), ramp(100, -0.5));
        write_wav(&path, &audio, WavFormat::Float32).unwrap();
        let back = read_wav::<f64>(&path).unwrap();
        assert_eq!(back.sample_rate, 44100);
        assert_eq!(back.channels.len(), 2);
        for c in 0..2 {
            for (a, b) in audio.channels[c].iter().zip(&back.channels[c]) {
                assert!((a - b).abs() < 1e-7);
            }
        }
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn pcm16_and_pcm24_round_trip_within_quantization() {
        for (fmt, tol, name) in [
            (WavFormat::Pcm16, 1.0 / 32000.0, "p16.wav"),
            (WavFormat::Pcm24, 1.0 / 8000000.0, "p24.wav"),
        ] {
            let path = tmp(name);
            let audio = Audio::stereo(16000, ramp(64, 0.9), ramp(64, 0.9));
            write_wav(&path, &audio, fmt).unwrap();
            let back = read_wav::<f64>(&path).unwrap();
            for c in 0..2 {
                for (a, b) in audio.channels[c].iter().zip(&back.channels[c]) {
                    assert!((a - b).abs() < tol, "{name}: {a} vs {b}");
                }
            }
            std::fs::remove_file(path).ok();
        }
    }

    #[test]
    fn rejects_non_wav_content() {
        let path = tmp("bad.wav");
        std::fs::write(&path, b"hello world, definitely not audio").unwrap();
        assert!(read_wav::<f64>(&path).is_err());
        std::fs::remove_file(path).ok();
    }
}
