//! Loading a video from disk.
//!
//! The built-in layout is a directory holding `meta.json`, numbered frame
//! images (PNG or JPEG, ordered by file name) and an optional `audio.wav`
//! (16 kHz mono PCM16). Container formats plug in through [`VideoDecoder`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::media::{AudioTrack, MediaError};
use crate::scenes::{FrameSequence, SceneError};

pub const META_FILE: &str = "meta.json";
pub const AUDIO_FILE: &str = "audio.wav";

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: missing {META_FILE}")]
    MissingMeta(String),
    #[error("{path}: bad metadata: {message}")]
    BadMeta { path: String, message: String },
    #[error("{path}: unreadable frame: {message}")]
    BadFrame { path: String, message: String },
    #[error("{0}: no frames")]
    NoFrames(String),
    #[error("{path}: {source}")]
    Frames {
        path: String,
        #[source]
        source: SceneError,
    },
    #[error("{path}: {source}")]
    Audio {
        path: String,
        #[source]
        source: MediaError,
    },
    #[error("{0}: no decoder accepts this file")]
    NoDecoder(String),
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaFile {
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub path: PathBuf,
    pub fps: f64,
    pub frame_count: usize,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
}

#[derive(Debug, Clone)]
pub struct Video {
    pub meta: VideoMeta,
    pub frames: FrameSequence,
    /// Empty when the source has no audio.
    pub audio: AudioTrack,
}

/// Decodes a container file into frames, fps and optional audio.
pub trait VideoDecoder: Send + Sync {
    fn accepts(&self, path: &Path) -> bool;
    fn decode(&self, path: &Path) -> Result<(FrameSequence, Option<AudioTrack>), IngestError>;
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn is_frame_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn default_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into())
}

/// Ingest a frame directory, or a file through the first decoder that
/// accepts it.
pub fn ingest(path: &Path, decoders: &[&dyn VideoDecoder]) -> Result<Video, IngestError> {
    if path.is_dir() {
        return ingest_dir(path);
    }
    let decoder = decoders
        .iter()
        .find(|d| d.accepts(path))
        .ok_or_else(|| IngestError::NoDecoder(path.display().to_string()))?;
    let (frames, audio) = decoder.decode(path)?;
    if frames.is_empty() {
        return Err(IngestError::NoFrames(path.display().to_string()));
    }
    Ok(assemble(default_id(path), path, frames, audio.unwrap_or_default()))
}

fn assemble(video_id: String, path: &Path, frames: FrameSequence, audio: AudioTrack) -> Video {
    let (width, height) = frames.dimensions().expect("non-empty frame sequence");
    Video {
        meta: VideoMeta {
            video_id,
            path: path.to_path_buf(),
            fps: frames.fps(),
            frame_count: frames.len(),
            width,
            height,
            channels: 3,
        },
        frames,
        audio,
    }
}

pub fn ingest_dir(dir: &Path) -> Result<Video, IngestError> {
    let meta_path = dir.join(META_FILE);
    if !meta_path.is_file() {
        return Err(IngestError::MissingMeta(dir.display().to_string()));
    }
    let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: MetaFile = serde_json::from_str(&text).map_err(|e| IngestError::BadMeta {
        path: meta_path.display().to_string(),
        message: e.to_string(),
    })?;

    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io_err(dir))?;
    files.retain(|p| p.is_file() && is_frame_file(p));
    files.sort();
    if files.is_empty() {
        return Err(IngestError::NoFrames(dir.display().to_string()));
    }
    let frames = files
        .iter()
        .map(|p| {
            image::open(p).map(|i| i.to_rgb8()).map_err(|e| IngestError::BadFrame {
                path: p.display().to_string(),
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let frames = FrameSequence::new(frames, meta.fps).map_err(|source| IngestError::Frames {
        path: dir.display().to_string(),
        source,
    })?;

    let audio_path = dir.join(AUDIO_FILE);
    let audio = if audio_path.is_file() {
        AudioTrack::read(&audio_path).map_err(|source| IngestError::Audio {
            path: audio_path.display().to_string(),
            source,
        })?
    } else {
        log::info!("{}: no audio; visual-only", dir.display());
        AudioTrack::default()
    };
    let id = meta.video_id.clone().unwrap_or_else(|| default_id(dir));
    Ok(assemble(id, dir, frames, audio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_frames(dir: &Path, n: usize, w: u32) {
        for i in 0..n {
            RgbImage::from_pixel(w, 8, Rgb([i as u8, 0, 0]))
                .save(dir.join(format!("{i:04}.png")))
                .unwrap();
        }
    }

    #[test]
    fn frame_directory() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), 60, 12);
        std::fs::write(dir.path().join(META_FILE), r#"{"fps": 30}"#).unwrap();
        let v = ingest(dir.path(), &[]).unwrap();
        assert_eq!((v.meta.frame_count, v.meta.fps), (60, 30.0));
        assert_eq!((v.meta.width, v.meta.height, v.meta.channels), (12, 8, 3));
        assert!(v.audio.is_empty());
        assert_eq!(v.frames.frames()[7].get_pixel(0, 0)[0], 7);
    }

    #[test]
    fn missing_meta() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), 2, 4);
        assert!(matches!(ingest(dir.path(), &[]), Err(IngestError::MissingMeta(_))));
    }

    #[test]
    fn inconsistent_sizes() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), 2, 4);
        RgbImage::new(5, 8).save(dir.path().join("0009.png")).unwrap();
        std::fs::write(dir.path().join(META_FILE), r#"{"fps": 30}"#).unwrap();
        assert!(matches!(ingest(dir.path(), &[]), Err(IngestError::Frames { .. })));
    }

    #[test]
    fn audio_loaded() {
        let dir = tempfile::tempdir().unwrap();
        write_frames(dir.path(), 1, 4);
        std::fs::write(dir.path().join(META_FILE), r#"{"fps": 10, "video_id": "clip"}"#).unwrap();
        let track = AudioTrack { samples: vec![1, 2, 3] };
        std::fs::write(dir.path().join(AUDIO_FILE), track.to_wav_bytes().unwrap()).unwrap();
        let v = ingest(dir.path(), &[]).unwrap();
        assert_eq!(v.audio, track);
        assert_eq!(v.meta.video_id, "clip");
    }

    struct Fake;
    impl VideoDecoder for Fake {
        fn accepts(&self, path: &Path) -> bool {
            path.extension().is_some_and(|e| e == "fake")
        }
        fn decode(&self, _: &Path) -> Result<(FrameSequence, Option<AudioTrack>), IngestError> {
            Ok((FrameSequence::new(vec![RgbImage::new(2, 2)], 5.0).unwrap(), None))
        }
    }

    #[test]
    fn pluggable_decoder() {
        let v = ingest(Path::new("x/clip.fake"), &[&Fake]).unwrap();
        assert_eq!(v.meta.video_id, "clip");
        assert!(matches!(ingest(Path::new("x/clip.mp4"), &[&Fake]), Err(IngestError::NoDecoder(_))));
    }
}
