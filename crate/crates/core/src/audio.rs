//! PCM WAVE decoding, resampling and sliding-window framing.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum AudioError {
    #[error("failed to read {path:?}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a RIFF/WAVE file: bad {field} (found {found:?})")]
    BadContainer { field: &'static str, found: String },
    #[error("unsupported WAVE header field `{field}` = {value}")]
    Unsupported { field: &'static str, value: u32 },
    #[error("WAVE file is missing the `{0}` chunk")]
    MissingChunk(&'static str),
    #[error("truncated WAVE data while reading {0}")]
    Truncated(&'static str),
    #[error("audio clip contains no samples")]
    Empty,
    #[error("sample rate must be positive")]
    ZeroRate,
    #[error("clip of {len} samples is shorter than one window of {window} samples")]
    TooShort { len: usize, window: usize },
    #[error("window and step must both span at least one sample (window {window}, step {step})")]
    BadWindow { window: usize, step: usize },
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono audio normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroRate);
        }
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// A contiguous window of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub samples: Vec<f64>,
    pub start_index: usize,
}

pub fn read_audio(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_wav(&bytes)
}

fn u16_at(b: &[u8], at: usize, what: &'static str) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or(AudioError::Truncated(what))
}

fn u32_at(b: &[u8], at: usize, what: &'static str) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or(AudioError::Truncated(what))
}

struct Format {
    channels: u16,
    sample_rate: u32,
}

/// Decodes a RIFF/WAVE byte buffer holding 16-bit PCM, downmixing stereo.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    let tag = |at: usize, what: &'static str| -> Result<&[u8]> {
        bytes.get(at..at + 4).ok_or(AudioError::Truncated(what))
    };
    if tag(0, "RIFF id")? != b"RIFF" {
        return Err(AudioError::BadContainer {
            field: "RIFF id",
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    if tag(8, "WAVE id")? != b"WAVE" {
        return Err(AudioError::BadContainer {
            field: "WAVE id",
            found: String::from_utf8_lossy(&bytes[8..12]).into_owned(),
        });
    }

    let mut format: Option<Format> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4, "chunk size")? as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                let audio_format = u16_at(bytes, body, "audio_format")?;
                if audio_format != 1 {
                    return Err(AudioError::Unsupported {
                        field: "audio_format",
                        value: audio_format as u32,
                    });
                }
                let channels = u16_at(bytes, body + 2, "num_channels")?;
                if channels != 1 && channels != 2 {
                    return Err(AudioError::Unsupported {
                        field: "num_channels",
                        value: channels as u32,
                    });
                }
                let sample_rate = u32_at(bytes, body + 4, "sample_rate")?;
                if sample_rate == 0 {
                    return Err(AudioError::Unsupported {
                        field: "sample_rate",
                        value: 0,
                    });
                }
                let bits = u16_at(bytes, body + 14, "bits_per_sample")?;
                if bits != 16 {
                    return Err(AudioError::Unsupported {
                        field: "bits_per_sample",
                        value: bits as u32,
                    });
                }
                format = Some(Format {
                    channels,
                    sample_rate,
                });
            }
            b"data" => {
                let fmt = format.ok_or(AudioError::MissingChunk("fmt "))?;
                let end = body.saturating_add(size);
                let data = bytes.get(body..end).ok_or(AudioError::Truncated("data chunk"))?;
                let frame_bytes = 2 * fmt.channels as usize;
                let samples: Vec<f64> = data
                    .chunks_exact(frame_bytes)
                    .map(|frame| {
                        let sum: f64 = frame
                            .chunks_exact(2)
                            .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                            .sum();
                        sum / fmt.channels as f64
                    })
                    .collect();
                return AudioClip::new(samples, fmt.sample_rate);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body.saturating_add(size).saturating_add(size & 1);
    }
    Err(AudioError::MissingChunk(if format.is_some() {
        "data"
    } else {
        "fmt "
    }))
}

/// Encodes samples (interleaved when `channels == 2`) as 16-bit PCM WAVE.
pub fn encode_wav(samples: &[f64], channels: u16, sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * channels as u32 * 2).to_le_bytes());
    out.extend_from_slice(&(channels * 2).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Linear-interpolation resampling; output length is `round(len * target / source)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(AudioError::ZeroRate);
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let out_len = (clip.len() as f64 * target_rate as f64 / clip.sample_rate as f64).round() as usize;
    let last = clip.len() - 1;
    let samples = (0..out_len.max(1))
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let t = pos - lo as f64;
            let (a, b) = (clip.samples[lo], clip.samples[hi]);
            if a == b {
                a
            } else {
                a + (b - a) * t.min(1.0)
            }
        })
        .collect();
    AudioClip::new(samples, target_rate)
}

/// Drops leading and trailing samples whose magnitude is below `threshold`;
/// quiet stretches between loud samples are kept.
pub fn trim_silence(clip: &AudioClip, threshold: f64) -> Result<AudioClip> {
    let loud = |x: &f64| x.abs() >= threshold;
    let start = clip.samples.iter().position(loud).ok_or(AudioError::Empty)?;
    let end = clip.samples.iter().rposition(loud).map_or(start, |i| i + 1);
    AudioClip::new(clip.samples[start..end].to_vec(), clip.sample_rate)
}

/// Analysis window length in seconds.
pub const WINDOW_SECS: f64 = 0.025;
/// Hop between consecutive windows in seconds.
pub const STEP_SECS: f64 = 0.010;

/// Window and step lengths in samples for the given durations.
pub fn window_geometry(sample_rate: u32, win_s: f64, step_s: f64) -> (usize, usize) {
    let sr = sample_rate as f64;
    ((win_s * sr).round() as usize, (step_s * sr).round() as usize)
}

/// Cuts the clip into overlapping windows; a partial trailing window is dropped.
pub fn frame_signal(clip: &AudioClip, win_s: f64, step_s: f64) -> Result<Vec<Frame>> {
    let (window, step) = window_geometry(clip.sample_rate, win_s, step_s);
    if window == 0 || step == 0 {
        return Err(AudioError::BadWindow { window, step });
    }
    if clip.len() < window {
        return Err(AudioError::TooShort {
            len: clip.len(),
            window,
        });
    }
    let count = 1 + (clip.len() - window) / step;
    Ok((0..count)
        .map(|i| {
            let start = i * step;
            Frame {
                samples: clip.samples[start..start + window].to_vec(),
                start_index: start,
            }
        })
        .collect())
}
