//! Content-change shot segmentation.
//!
//! Each frame is converted to HSV (hue rescaled to `0..=255`, so all three
//! channels share one scale) after downscaling so the longer side is at most
//! 256 pixels. The change score between consecutive frames is the mean over
//! pixels of the average absolute channel difference. A cut opens a new
//! segment when the score exceeds the threshold and the running segment is
//! already `min_len` frames long.

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

pub const DEFAULT_THRESHOLD: f64 = 27.0;
pub const DEFAULT_MIN_LEN: usize = 15;
const MAX_SIDE: u32 = 256;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SceneError {
    #[error("frame size mismatch: {0}x{1} vs {2}x{3}")]
    Shape(u32, u32, u32, u32),
    #[error("invalid frame sequence: {0}")]
    Invalid(String),
}

/// Decoded 8-bit RGB frames of one video.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Vec<RgbImage>,
    fps: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<RgbImage>, fps: f64) -> Result<Self, SceneError> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(SceneError::Invalid(format!("fps must be positive, got {fps}")));
        }
        if let Some(first) = frames.first() {
            let (w, h) = first.dimensions();
            if let Some(bad) = frames.iter().find(|f| f.dimensions() != (w, h)) {
                let (bw, bh) = bad.dimensions();
                return Err(SceneError::Shape(w, h, bw, bh));
            }
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` of every frame, or `None` for an empty sequence.
    pub fn dimensions(&self) -> Option<(u32, u32)> {
        self.frames.first().map(RgbImage::dimensions)
    }
}

/// Half-open frame span `[start_frame, end_frame)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSegment {
    pub start_frame: usize,
    pub end_frame: usize,
}

impl SceneSegment {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame == self.start_frame
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start_frame..self.end_frame).contains(&frame)
    }
}

/// One line of a scene JSONL artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub video_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub start_s: f64,
    pub end_s: f64,
}

impl SceneRecord {
    pub fn new(video_id: &str, seg: SceneSegment, fps: f64) -> Self {
        Self {
            video_id: video_id.to_string(),
            start_frame: seg.start_frame,
            end_frame: seg.end_frame,
            start_s: seg.start_frame as f64 / fps,
            end_s: seg.end_frame as f64 / fps,
        }
    }

    pub fn segment(&self) -> SceneSegment {
        SceneSegment {
            start_frame: self.start_frame,
            end_frame: self.end_frame,
        }
    }
}

/// 8-bit RGB to HSV with all channels on `[0, 255]`.
pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> [f64; 3] {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max == 0.0 { 0.0 } else { 255.0 * delta / max };
    let h_deg = if delta == 0.0 {
        0.0
    } else if max == r {
        (60.0 * (g - b) / delta).rem_euclid(360.0)
    } else if max == g {
        60.0 * (b - r) / delta + 120.0
    } else {
        60.0 * (r - g) / delta + 240.0
    };
    [h_deg * 255.0 / 360.0, s, max]
}

fn downscaled(img: &RgbImage) -> std::borrow::Cow<'_, RgbImage> {
    let (w, h) = img.dimensions();
    let longest = w.max(h);
    if longest <= MAX_SIDE {
        return std::borrow::Cow::Borrowed(img);
    }
    let scale = MAX_SIDE as f64 / longest as f64;
    let nw = ((w as f64 * scale).round() as u32).max(1);
    let nh = ((h as f64 * scale).round() as u32).max(1);
    std::borrow::Cow::Owned(image::imageops::resize(img, nw, nh, FilterType::Triangle))
}

fn hsv_planes(img: &RgbImage) -> Vec<[f64; 3]> {
    downscaled(img).pixels().map(|p| rgb_to_hsv(p[0], p[1], p[2])).collect()
}

fn hsv_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((x[0] - y[0]).abs() + (x[1] - y[1]).abs() + (x[2] - y[2]).abs()) / 3.0)
        .sum();
    total / a.len() as f64
}

pub fn frame_content_score(a: &RgbImage, b: &RgbImage) -> Result<f64, SceneError> {
    if a.dimensions() != b.dimensions() {
        let ((aw, ah), (bw, bh)) = (a.dimensions(), b.dimensions());
        return Err(SceneError::Shape(aw, ah, bw, bh));
    }
    if a.width() == 0 || a.height() == 0 {
        return Ok(0.0);
    }
    Ok(hsv_distance(&hsv_planes(a), &hsv_planes(b)))
}

/// Consecutive-frame change scores; entry `i` compares frames `i` and `i + 1`.
pub fn content_scores(v: &FrameSequence) -> Vec<f64> {
    let planes: Vec<_> = v.frames.iter().map(hsv_planes).collect();
    planes.windows(2).map(|w| hsv_distance(&w[0], &w[1])).collect()
}

pub fn detect_scenes(v: &FrameSequence, threshold: f64, min_len: usize) -> Result<Vec<SceneSegment>, SceneError> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(SceneError::Invalid(format!("threshold must be positive, got {threshold}")));
    }
    if min_len == 0 {
        return Err(SceneError::Invalid("min_len must be at least 1".into()));
    }
    if v.is_empty() {
        return Ok(Vec::new());
    }
    Ok(segments_from_scores(&content_scores(v), threshold, min_len))
}

/// Cut placement over precomputed scores (`scores.len() + 1` frames).
pub fn segments_from_scores(scores: &[f64], threshold: f64, min_len: usize) -> Vec<SceneSegment> {
    let total = scores.len() + 1;
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &score) in scores.iter().enumerate() {
        let frame = i + 1;
        if score > threshold && frame - start >= min_len {
            out.push(SceneSegment { start_frame: start, end_frame: frame });
            start = frame;
        }
    }
    out.push(SceneSegment { start_frame: start, end_frame: total });
    out
}
