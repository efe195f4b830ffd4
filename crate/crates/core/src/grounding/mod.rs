//! Phrase-to-object grounding: noun phrases from a model response are
//! matched against objects that are tagged, detected and tracked inside each
//! shot.

mod matching;
mod phrases;
mod pipeline;
mod tracker;

pub use matching::{assign_phrases, match_phrases_embedding, match_phrases_llm, representative_crop, track_embeddings};
pub use phrases::{extract_noun_phrases, normalize_phrase, parse_phrase_list, select_key_phrase};
pub use pipeline::{ground_video, GroundingOutput, GroundingTemplates, SegmentFailure, TrackRecord};
pub use tracker::{associate_tracks, FrameDetections};

pub use crate::geometry::{iou, mask_to_box, BBox, MaskRle};

use serde::{Deserialize, Serialize};

use crate::backends::BackendError;
use crate::geometry::GeometryError;

pub const DEFAULT_IOU_GATE: f64 = 0.3;
pub const DEFAULT_MAX_MISSED: usize = 5;
pub const DEFAULT_SIM_FLOOR: f64 = 0.25;
pub const DEFAULT_CROP_PADDING: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum GroundingError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("empty response text")]
    EmptyResponse,
    #[error("no response text and no frame tags to choose a key phrase from")]
    NothingToSelect,
    #[error("embedding width {0} != {1}")]
    EmbeddingWidth(usize, usize),
    #[error("track {0} has no observations")]
    EmptyTrack(u64),
    #[error("frame {0} is outside the video")]
    FrameOutOfRange(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseSource {
    Llm,
    TagFallback,
}

/// Lowercased, whitespace-normalized, non-empty phrase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounPhrase {
    text: String,
    pub source: PhraseSource,
}

impl NounPhrase {
    pub fn new(text: &str, source: PhraseSource) -> Option<Self> {
        let text = normalize_phrase(text);
        (!text.is_empty()).then_some(Self { text, source })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_idx: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame_idx: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<MaskRle>,
    /// Filled between sampled frames rather than observed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub interpolated: bool,
}

impl Observation {
    /// Box used for evaluation: the mask's tight box when a mask is present.
    pub fn effective_box(&self) -> BBox {
        self.mask_rle
            .as_ref()
            .and_then(|m| m.to_box().ok())
            .unwrap_or(self.bbox)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u64,
    pub tag: String,
    pub observations: Vec<Observation>,
}

impl Track {
    pub fn first_frame(&self) -> usize {
        self.observations[0].frame_idx
    }

    pub fn last_frame(&self) -> usize {
        self.observations[self.observations.len() - 1].frame_idx
    }

    pub fn observation_at(&self, frame: usize) -> Option<&Observation> {
        self.observations
            .binary_search_by_key(&frame, |o| o.frame_idx)
            .ok()
            .map(|i| &self.observations[i])
    }

    /// Box at `frame`: the observation's effective box, or a linear blend of
    /// the neighbouring observations. `None` outside the track's span.
    pub fn box_at(&self, frame: usize) -> Option<BBox> {
        match self.observations.binary_search_by_key(&frame, |o| o.frame_idx) {
            Ok(i) => Some(self.observations[i].effective_box()),
            Err(0) => None,
            Err(i) if i == self.observations.len() => None,
            Err(i) => {
                let (a, b) = (&self.observations[i - 1], &self.observations[i]);
                let t = (frame - a.frame_idx) as f64 / (b.frame_idx - a.frame_idx) as f64;
                Some(a.effective_box().lerp(&b.effective_box(), t))
            }
        }
    }

    /// Insert interpolated observations on every frame between sampled ones.
    pub fn densify(&mut self) {
        let mut dense = Vec::with_capacity(self.observations.len());
        for w in self.observations.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            dense.push(a.clone());
            let gap = (b.frame_idx - a.frame_idx) as f64;
            for f in a.frame_idx + 1..b.frame_idx {
                let t = (f - a.frame_idx) as f64 / gap;
                dense.push(Observation {
                    frame_idx: f,
                    bbox: a.effective_box().lerp(&b.effective_box(), t),
                    score: a.score + (b.score - a.score) * t,
                    mask_rle: None,
                    interpolated: true,
                });
            }
        }
        if let Some(last) = self.observations.last() {
            dense.push(last.clone());
        }
        self.observations = dense;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseMatch {
    pub phrase: NounPhrase,
    pub track_id: u64,
    /// Cosine similarity for embedding matches; `None` for LLM matches.
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    #[default]
    Embedding,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundingOptions {
    pub iou_gate: f64,
    pub max_missed: usize,
    pub sim_floor: f64,
    pub crop_padding: f64,
    pub matcher: Matcher,
    /// Request a segmentation mask for every sampled observation.
    pub masks: bool,
    pub samples_per_second: f64,
}

impl Default for GroundingOptions {
    fn default() -> Self {
        Self {
            iou_gate: DEFAULT_IOU_GATE,
            max_missed: DEFAULT_MAX_MISSED,
            sim_floor: DEFAULT_SIM_FLOOR,
            crop_padding: DEFAULT_CROP_PADDING,
            matcher: Matcher::Embedding,
            masks: false,
            samples_per_second: 1.0,
        }
    }
}

impl GroundingOptions {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.iou_gate) {
            return Err(format!("grounding.iou_gate must be in [0, 1], got {}", self.iou_gate));
        }
        if !(-1.0..=1.0).contains(&self.sim_floor) {
            return Err(format!("grounding.sim_floor must be in [-1, 1], got {}", self.sim_floor));
        }
        if !(0.0..=1.0).contains(&self.crop_padding) {
            return Err(format!("grounding.crop_padding must be in [0, 1], got {}", self.crop_padding));
        }
        if !(self.samples_per_second > 0.0 && self.samples_per_second.is_finite()) {
            return Err("grounding.samples_per_second must be positive".into());
        }
        Ok(())
    }
}
