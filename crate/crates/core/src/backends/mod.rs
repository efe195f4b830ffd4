//! Uniform request/response protocol for every external neural model.
//!
//! Each model role is an [`EndpointKind`] served at `POST /v1/{kind}` with a
//! JSON body. [`Backend`] is the transport-agnostic interface; [`HttpBackend`]
//! speaks the wire protocol and [`MockBackend`] answers deterministically
//! from a seed. Every response passes [`Response::validate`] before pipeline
//! code sees it.

mod http;
mod mock;

pub use http::{BackendEndpoint, HttpBackend, RetryPolicy};
pub use mock::{MockBackend, MockReply, MOCK_EMBED_DIM, MOCK_VOCABULARY};

use std::fmt;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioTag, SpeechSpan, WordSpan};
use crate::geometry::{BBox, MaskRle};
use crate::media::{self, AudioTrack, MediaError, PayloadFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    EmbedText,
    EmbedImage,
    TagImage,
    Detect,
    SegmentMask,
    Vad,
    Asr,
    AudioTag,
    Chat,
}

impl EndpointKind {
    pub const ALL: [EndpointKind; 9] = [
        EndpointKind::EmbedText,
        EndpointKind::EmbedImage,
        EndpointKind::TagImage,
        EndpointKind::Detect,
        EndpointKind::SegmentMask,
        EndpointKind::Vad,
        EndpointKind::Asr,
        EndpointKind::AudioTag,
        EndpointKind::Chat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EndpointKind::EmbedText => "embed_text",
            EndpointKind::EmbedImage => "embed_image",
            EndpointKind::TagImage => "tag_image",
            EndpointKind::Detect => "detect",
            EndpointKind::SegmentMask => "segment_mask",
            EndpointKind::Vad => "vad",
            EndpointKind::Asr => "asr",
            EndpointKind::AudioTag => "audio_tag",
            EndpointKind::Chat => "chat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Route path on a model server.
    pub fn path(self) -> String {
        format!("/v1/{}", self.as_str())
    }
}

impl fmt::Display for EndpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("{kind}: timed out after {attempts} attempt(s)")]
    Timeout { kind: EndpointKind, attempts: u32 },
    #[error("{kind}: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        kind: EndpointKind,
        attempts: u32,
        message: String,
    },
    #[error("{kind}: HTTP status {status}: {body}")]
    Status {
        kind: EndpointKind,
        status: u16,
        body: String,
    },
    #[error("{kind}: malformed response: {message}")]
    Malformed { kind: EndpointKind, message: String },
    #[error("{kind}: no endpoint configured")]
    NotConfigured { kind: EndpointKind },
    #[error("{kind}: backend refused request: {message}")]
    Failed { kind: EndpointKind, message: String },
    #[error("{kind}: payload: {source}")]
    Payload {
        kind: EndpointKind,
        #[source]
        source: MediaError,
    },
}

impl BackendError {
    pub fn kind(&self) -> EndpointKind {
        match self {
            BackendError::Timeout { kind, .. }
            | BackendError::Transport { kind, .. }
            | BackendError::Status { kind, .. }
            | BackendError::Malformed { kind, .. }
            | BackendError::NotConfigured { kind }
            | BackendError::Failed { kind, .. }
            | BackendError::Payload { kind, .. } => *kind,
        }
    }

    /// Failures that a retry may fix: timeouts, connection errors, 5xx and 429.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout { .. } | BackendError::Transport { .. } => true,
            BackendError::Status { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }

    /// The backend could not be reached or kept failing server-side, as
    /// opposed to answering with something unusable.
    pub fn is_transport(&self) -> bool {
        match self {
            BackendError::Timeout { .. } | BackendError::Transport { .. } | BackendError::NotConfigured { .. } => true,
            BackendError::Status { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

// ---- request schemas ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedTextRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedImageRequest {
    pub image_b64: String,
    #[serde(default)]
    pub format: PayloadFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagImageRequest {
    pub image_b64: String,
    #[serde(default)]
    pub format: PayloadFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectRequest {
    pub image_b64: String,
    #[serde(default)]
    pub format: PayloadFormat,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentMaskRequest {
    pub image_b64: String,
    #[serde(default)]
    pub format: PayloadFormat,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VadRequest {
    pub audio_b64: String,
    #[serde(default = "wav_format")]
    pub format: PayloadFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsrRequest {
    pub audio_b64: String,
    #[serde(default = "wav_format")]
    pub format: PayloadFormat,
    pub window: SpeechSpan,
    /// The client pads windows shorter than the model's input to full length
    /// with silence; recorded here rather than changing the span.
    #[serde(default)]
    pub padded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioTagRequest {
    pub audio_b64: String,
    #[serde(default = "wav_format")]
    pub format: PayloadFormat,
    pub span: SpeechSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

fn wav_format() -> PayloadFormat {
    PayloadFormat::WavPcm16k
}

/// A request to any endpoint kind.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Request {
    EmbedText(EmbedTextRequest),
    EmbedImage(EmbedImageRequest),
    TagImage(TagImageRequest),
    Detect(DetectRequest),
    SegmentMask(SegmentMaskRequest),
    Vad(VadRequest),
    Asr(AsrRequest),
    AudioTag(AudioTagRequest),
    Chat(ChatRequest),
}

impl Request {
    pub fn kind(&self) -> EndpointKind {
        match self {
            Request::EmbedText(_) => EndpointKind::EmbedText,
            Request::EmbedImage(_) => EndpointKind::EmbedImage,
            Request::TagImage(_) => EndpointKind::TagImage,
            Request::Detect(_) => EndpointKind::Detect,
            Request::SegmentMask(_) => EndpointKind::SegmentMask,
            Request::Vad(_) => EndpointKind::Vad,
            Request::Asr(_) => EndpointKind::Asr,
            Request::AudioTag(_) => EndpointKind::AudioTag,
            Request::Chat(_) => EndpointKind::Chat,
        }
    }

    /// Parse a JSON body against the schema of `kind`.
    pub fn from_json(kind: EndpointKind, body: &[u8]) -> Result<Self, serde_json::Error> {
        Ok(match kind {
            EndpointKind::EmbedText => Request::EmbedText(serde_json::from_slice(body)?),
            EndpointKind::EmbedImage => Request::EmbedImage(serde_json::from_slice(body)?),
            EndpointKind::TagImage => Request::TagImage(serde_json::from_slice(body)?),
            EndpointKind::Detect => Request::Detect(serde_json::from_slice(body)?),
            EndpointKind::SegmentMask => Request::SegmentMask(serde_json::from_slice(body)?),
            EndpointKind::Vad => Request::Vad(serde_json::from_slice(body)?),
            EndpointKind::Asr => Request::Asr(serde_json::from_slice(body)?),
            EndpointKind::AudioTag => Request::AudioTag(serde_json::from_slice(body)?),
            EndpointKind::Chat => Request::Chat(serde_json::from_slice(body)?),
        })
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("request serializes")
    }

    /// Stable digest of `(kind, body)`, used to key mock scripts and caches.
    pub fn digest(&self) -> String {
        let mut bytes = self.kind().as_str().as_bytes().to_vec();
        bytes.push(0);
        bytes.extend(self.to_json());
        crate::digest::sha256_hex(&bytes)
    }
}

// ---- response schemas ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub dim: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTag {
    pub label: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagImageResponse {
    pub tags: Vec<ImageTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMaskResponse {
    pub mask_rle: MaskRle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VadResponse {
    pub spans: Vec<SpeechSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrResponse {
    pub text: String,
    pub language: String,
    pub language_prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<WordSpan>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioTagResponse {
    pub tags: Vec<AudioTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Response {
    Embedding(EmbeddingResponse),
    TagImage(TagImageResponse),
    Detect(DetectResponse),
    SegmentMask(SegmentMaskResponse),
    Vad(VadResponse),
    Asr(AsrResponse),
    AudioTag(AudioTagResponse),
    Chat(ChatResponse),
}

impl Response {
    pub fn from_json(kind: EndpointKind, body: &[u8]) -> Result<Self, serde_json::Error> {
        Ok(match kind {
            EndpointKind::EmbedText | EndpointKind::EmbedImage => Response::Embedding(serde_json::from_slice(body)?),
            EndpointKind::TagImage => Response::TagImage(serde_json::from_slice(body)?),
            EndpointKind::Detect => Response::Detect(serde_json::from_slice(body)?),
            EndpointKind::SegmentMask => Response::SegmentMask(serde_json::from_slice(body)?),
            EndpointKind::Vad => Response::Vad(serde_json::from_slice(body)?),
            EndpointKind::Asr => Response::Asr(serde_json::from_slice(body)?),
            EndpointKind::AudioTag => Response::AudioTag(serde_json::from_slice(body)?),
            EndpointKind::Chat => Response::Chat(serde_json::from_slice(body)?),
        })
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("response serializes")
    }

    fn matches(&self, kind: EndpointKind) -> bool {
        matches!(
            (self, kind),
            (Response::Embedding(_), EndpointKind::EmbedText | EndpointKind::EmbedImage)
                | (Response::TagImage(_), EndpointKind::TagImage)
                | (Response::Detect(_), EndpointKind::Detect)
                | (Response::SegmentMask(_), EndpointKind::SegmentMask)
                | (Response::Vad(_), EndpointKind::Vad)
                | (Response::Asr(_), EndpointKind::Asr)
                | (Response::AudioTag(_), EndpointKind::AudioTag)
                | (Response::Chat(_), EndpointKind::Chat)
        )
    }

    /// Schema-level checks beyond what deserialization enforces.
    pub fn validate(&self, kind: EndpointKind) -> Result<(), BackendError> {
        let bad = |message: String| Err(BackendError::Malformed { kind, message });
        if !self.matches(kind) {
            return bad("response variant does not match endpoint kind".into());
        }
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        match self {
            Response::Embedding(e) => {
                if e.dim == 0 || e.vector.len() != e.dim {
                    return bad(format!("dim {} but vector has {} entries", e.dim, e.vector.len()));
                }
                if e.vector.iter().any(|v| !v.is_finite()) {
                    return bad("non-finite embedding entry".into());
                }
                if e.vector.iter().all(|&v| v == 0.0) {
                    return bad("zero embedding vector".into());
                }
            }
            Response::TagImage(t) => {
                if let Some(tag) = t.tags.iter().find(|t| !prob_ok(t.prob) || t.label.trim().is_empty()) {
                    return bad(format!("bad image tag {tag:?}"));
                }
            }
            Response::Detect(d) => {
                if let Some(det) = d.detections.iter().find(|d| !prob_ok(d.score)) {
                    return bad(format!("detection score {} outside [0, 1]", det.score));
                }
            }
            Response::SegmentMask(m) => {
                if let Err(e) = m.mask_rle.validate() {
                    return bad(e.to_string());
                }
            }
            Response::Vad(v) => {
                if let Some(s) = v.spans.iter().find(|s| SpeechSpan::new(s.start_s, s.end_s).is_err()) {
                    return bad(format!("invalid VAD span {s:?}"));
                }
            }
            Response::Asr(a) => {
                if !prob_ok(a.language_prob) {
                    return bad(format!("language_prob {} outside [0, 1]", a.language_prob));
                }
                if let Some(words) = &a.words {
                    let ordered = words.windows(2).all(|w| w[0].end_s <= w[1].start_s);
                    let spans_ok = words.iter().all(|w| w.start_s <= w.end_s);
                    if !ordered || !spans_ok {
                        return bad("word spans out of order".into());
                    }
                }
            }
            Response::AudioTag(t) => {
                let sorted = t.tags.windows(2).all(|w| w[0].prob >= w[1].prob);
                if t.tags.len() != 3 || !sorted || !t.tags.iter().all(|t| prob_ok(t.prob)) {
                    return bad("audio tags must be exactly 3, descending, in [0, 1]".into());
                }
            }
            Response::Chat(_) => {}
        }
        Ok(())
    }
}

/// Anything that can answer backend requests.
pub trait Backend: Send + Sync {
    /// Identifier recorded in reports (model name or `mock:<seed>`).
    fn name(&self, kind: EndpointKind) -> String;

    fn call(&self, request: &Request) -> Result<Response, BackendError>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn name(&self, kind: EndpointKind) -> String {
        (**self).name(kind)
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        (**self).call(request)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn name(&self, kind: EndpointKind) -> String {
        (**self).name(kind)
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        (**self).call(request)
    }
}

fn l2_normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

macro_rules! expect_variant {
    ($resp:expr, $variant:ident, $kind:expr) => {
        match $resp {
            Response::$variant(r) => r,
            _ => {
                return Err(BackendError::Malformed {
                    kind: $kind,
                    message: "unexpected response variant".into(),
                })
            }
        }
    };
}

/// Typed calls over any [`Backend`]. Responses are validated and embeddings
/// are L2-normalized client-side.
pub trait BackendExt: Backend {
    fn validated_call(&self, request: &Request) -> Result<Response, BackendError> {
        let kind = request.kind();
        let resp = self.call(request)?;
        resp.validate(kind)?;
        Ok(resp)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let req = Request::EmbedText(EmbedTextRequest { text: text.to_string() });
        let r = expect_variant!(self.validated_call(&req)?, Embedding, EndpointKind::EmbedText);
        Ok(l2_normalized(r.vector))
    }

    fn embed_image(&self, img: &RgbImage) -> Result<Vec<f64>, BackendError> {
        let kind = EndpointKind::EmbedImage;
        let req = Request::EmbedImage(EmbedImageRequest {
            image_b64: image_payload(kind, img)?,
            format: PayloadFormat::Png,
        });
        let r = expect_variant!(self.validated_call(&req)?, Embedding, kind);
        Ok(l2_normalized(r.vector))
    }

    fn tag_image(&self, img: &RgbImage) -> Result<Vec<ImageTag>, BackendError> {
        let kind = EndpointKind::TagImage;
        let req = Request::TagImage(TagImageRequest {
            image_b64: image_payload(kind, img)?,
            format: PayloadFormat::Png,
        });
        Ok(expect_variant!(self.validated_call(&req)?, TagImage, kind).tags)
    }

    fn detect(&self, img: &RgbImage, tags: &[String]) -> Result<Vec<WireDetection>, BackendError> {
        let kind = EndpointKind::Detect;
        let req = Request::Detect(DetectRequest {
            image_b64: image_payload(kind, img)?,
            format: PayloadFormat::Png,
            tags: tags.to_vec(),
        });
        Ok(expect_variant!(self.validated_call(&req)?, Detect, kind).detections)
    }

    fn segment_mask(&self, img: &RgbImage, bbox: BBox) -> Result<MaskRle, BackendError> {
        let kind = EndpointKind::SegmentMask;
        let req = Request::SegmentMask(SegmentMaskRequest {
            image_b64: image_payload(kind, img)?,
            format: PayloadFormat::Png,
            bbox,
        });
        let mask = expect_variant!(self.validated_call(&req)?, SegmentMask, kind).mask_rle;
        if (mask.width, mask.height) != img.dimensions() {
            return Err(BackendError::Malformed {
                kind,
                message: format!("mask is {}x{}, frame is {}x{}", mask.width, mask.height, img.width(), img.height()),
            });
        }
        Ok(mask)
    }

    fn vad(&self, audio_b64: &str) -> Result<Vec<SpeechSpan>, BackendError> {
        let req = Request::Vad(VadRequest {
            audio_b64: audio_b64.to_string(),
            format: PayloadFormat::WavPcm16k,
        });
        Ok(expect_variant!(self.validated_call(&req)?, Vad, EndpointKind::Vad).spans)
    }

    fn asr(&self, audio_b64: &str, window: SpeechSpan, padded: bool) -> Result<AsrResponse, BackendError> {
        let req = Request::Asr(AsrRequest {
            audio_b64: audio_b64.to_string(),
            format: PayloadFormat::WavPcm16k,
            window,
            padded,
        });
        Ok(expect_variant!(self.validated_call(&req)?, Asr, EndpointKind::Asr))
    }

    fn audio_tag(&self, audio_b64: &str, span: SpeechSpan) -> Result<Vec<AudioTag>, BackendError> {
        let req = Request::AudioTag(AudioTagRequest {
            audio_b64: audio_b64.to_string(),
            format: PayloadFormat::WavPcm16k,
            span,
        });
        Ok(expect_variant!(self.validated_call(&req)?, AudioTag, EndpointKind::AudioTag).tags)
    }

    /// Chat completion at temperature 0.
    fn chat(&self, prompt: &str, max_tokens: u32) -> Result<String, BackendError> {
        let req = Request::Chat(ChatRequest {
            prompt: prompt.to_string(),
            temperature: 0.0,
            max_tokens,
        });
        Ok(expect_variant!(self.validated_call(&req)?, Chat, EndpointKind::Chat).text)
    }
}

impl<B: Backend + ?Sized> BackendExt for B {}

fn image_payload(kind: EndpointKind, img: &RgbImage) -> Result<String, BackendError> {
    media::image_to_b64(img).map_err(|source| BackendError::Payload { kind, source })
}

/// Base64 WAV payload for a whole track.
pub fn audio_payload(track: &AudioTrack) -> Result<String, BackendError> {
    track.to_b64().map_err(|source| BackendError::Payload {
        kind: EndpointKind::Vad,
        source,
    })
}
