//! Image and audio payload encoding for the backend wire protocol.

use std::io::Cursor;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::audio::SAMPLE_RATE;

#[derive(Debug, thiserror::Error)]
pub enum MediaError {
    #[error("base64: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("audio must be 16 kHz mono 16-bit PCM, got {rate} Hz, {channels} channel(s), {bits} bit")]
    WavFormat { rate: u32, channels: u16, bits: u16 },
    #[error("payload declared as {declared} but used as {expected}")]
    Encoding { declared: String, expected: String },
}

/// Declared payload encoding on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PayloadFormat {
    #[default]
    #[serde(rename = "png")]
    Png,
    #[serde(rename = "jpeg")]
    Jpeg,
    #[serde(rename = "wav-pcm16-16k")]
    WavPcm16k,
}

impl PayloadFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadFormat::Png => "png",
            PayloadFormat::Jpeg => "jpeg",
            PayloadFormat::WavPcm16k => "wav-pcm16-16k",
        }
    }
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, MediaError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn image_to_b64(img: &RgbImage) -> Result<String, MediaError> {
    Ok(STANDARD.encode(encode_png(img)?))
}

pub fn image_from_b64(b64: &str, format: PayloadFormat) -> Result<RgbImage, MediaError> {
    let bytes = STANDARD.decode(b64)?;
    let fmt = match format {
        PayloadFormat::Png => ImageFormat::Png,
        PayloadFormat::Jpeg => ImageFormat::Jpeg,
        PayloadFormat::WavPcm16k => {
            return Err(MediaError::Encoding {
                declared: format.as_str().into(),
                expected: "image".into(),
            })
        }
    };
    Ok(image::load_from_memory_with_format(&bytes, fmt)?.to_rgb8())
}

/// 16 kHz mono PCM track.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AudioTrack {
    pub samples: Vec<i16>,
}

impl AudioTrack {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Samples in `[start_s, end_s)`, clamped to the track.
    pub fn slice(&self, start_s: f64, end_s: f64) -> &[i16] {
        let idx = |t: f64| ((t * SAMPLE_RATE as f64).round().max(0.0) as usize).min(self.samples.len());
        let (a, b) = (idx(start_s), idx(end_s));
        &self.samples[a..b.max(a)]
    }

    pub fn read(path: &Path) -> Result<Self, MediaError> {
        let reader = hound::WavReader::open(path)?;
        Self::from_reader(reader)
    }

    pub fn from_wav_bytes(bytes: &[u8]) -> Result<Self, MediaError> {
        Self::from_reader(hound::WavReader::new(Cursor::new(bytes))?)
    }

    fn from_reader<R: std::io::Read>(reader: hound::WavReader<R>) -> Result<Self, MediaError> {
        let spec = reader.spec();
        if spec.sample_rate != SAMPLE_RATE
            || spec.channels != 1
            || spec.bits_per_sample != 16
            || spec.sample_format != hound::SampleFormat::Int
        {
            return Err(MediaError::WavFormat {
                rate: spec.sample_rate,
                channels: spec.channels,
                bits: spec.bits_per_sample,
            });
        }
        let samples = reader.into_samples::<i16>().collect::<Result<Vec<_>, _>>()?;
        Ok(Self { samples })
    }

    pub fn to_wav_bytes(&self) -> Result<Vec<u8>, MediaError> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut buf = Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut buf, spec)?;
            for &s in &self.samples {
                w.write_sample(s)?;
            }
            w.finalize()?;
        }
        Ok(buf.into_inner())
    }

    pub fn to_b64(&self) -> Result<String, MediaError> {
        Ok(STANDARD.encode(self.to_wav_bytes()?))
    }

    pub fn from_b64(b64: &str) -> Result<Self, MediaError> {
        Self::from_wav_bytes(&STANDARD.decode(b64)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn png_b64_round_trip() {
        let mut img = RgbImage::from_pixel(5, 3, Rgb([1, 2, 3]));
        img.put_pixel(4, 2, Rgb([250, 0, 9]));
        let b64 = image_to_b64(&img).unwrap();
        assert_eq!(image_from_b64(&b64, PayloadFormat::Png).unwrap(), img);
        assert!(image_from_b64(&b64, PayloadFormat::WavPcm16k).is_err());
    }

    #[test]
    fn wav_round_trip_and_slice() {
        let track = AudioTrack { samples: (0..32_000).map(|i| (i % 100) as i16).collect() };
        let back = AudioTrack::from_b64(&track.to_b64().unwrap()).unwrap();
        assert_eq!(back, track);
        assert_eq!(back.duration_s(), 2.0);
        assert_eq!(back.slice(0.5, 1.0).len(), 8_000);
        assert!(back.slice(3.0, 4.0).is_empty());
    }

    #[test]
    fn wrong_rate_rejected() {
        let spec = hound::WavSpec { channels: 1, sample_rate: 8_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut buf = Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
            w.write_sample(0i16).unwrap();
            w.finalize().unwrap();
        }
        assert!(matches!(
            AudioTrack::from_wav_bytes(&buf.into_inner()),
            Err(MediaError::WavFormat { rate: 8_000, .. })
        ));
    }
}
