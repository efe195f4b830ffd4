//! Deterministic in-process backend.
//!
//! Unscripted requests are answered by a small synthetic world so the whole
//! pipeline can run without model servers:
//!
//! * images: the top-left pixel is background; other pixels are snapped to a
//!   fixed color palette, one object label per color (red is `ball`, green
//!   is `tree`, ...). Tagging, detection, masks and image embeddings are all
//!   derived from that labelling.
//! * text embeddings: a seeded pseudo-random unit vector per normalized text.
//! * audio: speech spans are energy gated; a window's dominant frequency
//!   (from its zero-crossing rate) picks language and audio tags.
//! * chat: the `### task:` line of the prompt selects a canned behavior; the
//!   judge tasks return a score derived from a digest of the prompt.
//!
//! Every reply is a pure function of `(seed, request)`.

use std::collections::BTreeMap;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    AsrResponse, AudioTagResponse, Backend, BackendError, ChatResponse, DetectResponse, EmbeddingResponse,
    EndpointKind, ImageTag, Request, Response, SegmentMaskResponse, TagImageResponse, VadResponse, WireDetection,
};
use crate::audio::{AudioTag, SpeechSpan};
use crate::digest::seed_from;
use crate::geometry::{BBox, MaskRle};
use crate::media::{image_from_b64, AudioTrack};
use crate::templates::task_of;

pub const MOCK_EMBED_DIM: usize = 64;

/// Object labels of the synthetic world, with their palette colors.
pub const MOCK_VOCABULARY: [(&str, [u8; 3]); 6] = [
    ("ball", [220, 40, 40]),
    ("tree", [40, 170, 60]),
    ("car", [40, 80, 220]),
    ("dog", [230, 200, 40]),
    ("person", [200, 60, 200]),
    ("boat", [40, 200, 210]),
];

const BACKGROUND_TOLERANCE: i32 = 40;
const PALETTE_TOLERANCE_SQ: i32 = 3 * 70 * 70;
const MIN_OBJECT_PIXELS: u32 = 4;

const SENTENCES: [&str; 5] = [
    "the ball rolls across the floor",
    "look at the red ball over there",
    "someone is talking near the car",
    "the dog runs past the tree",
    "we are watching the boat on the water",
];

#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    Reply(Response),
    /// The backend answers with an error.
    Fail(String),
    /// The endpoint is unreachable; surfaces as a transport error.
    Down,
}

#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    seed: u64,
    by_digest: BTreeMap<String, MockReply>,
    by_kind: BTreeMap<EndpointKind, MockReply>,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Default::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Canned reply for one exact request.
    pub fn script(mut self, request: &Request, reply: MockReply) -> Self {
        self.by_digest.insert(request.digest(), reply);
        self
    }

    /// Canned reply for every request of a kind not scripted exactly.
    pub fn script_kind(mut self, kind: EndpointKind, reply: MockReply) -> Self {
        self.by_kind.insert(kind, reply);
        self
    }

    /// Shorthand: every chat request gets `text`.
    pub fn with_chat_reply(self, text: &str) -> Self {
        self.script_kind(EndpointKind::Chat, MockReply::Reply(Response::Chat(ChatResponse { text: text.into() })))
    }

    fn scripted(&self, request: &Request) -> Option<&MockReply> {
        self.by_digest
            .get(&request.digest())
            .or_else(|| self.by_kind.get(&request.kind()))
    }

    fn rng(&self, domain: &str, key: &[u8]) -> ChaCha8Rng {
        let mut bytes = Vec::with_capacity(domain.len() + key.len() + 9);
        bytes.extend_from_slice(domain.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        bytes.extend_from_slice(key);
        ChaCha8Rng::seed_from_u64(seed_from(&bytes))
    }

    fn unit_vector(&self, domain: &str, key: &[u8]) -> Vec<f64> {
        let mut rng = self.rng(domain, key);
        let v: Vec<f64> = (0..MOCK_EMBED_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize(v)
    }

    pub fn text_vector(&self, text: &str) -> Vec<f64> {
        let norm = normalize_text(text);
        self.unit_vector("embed_text", norm.as_bytes())
    }

    fn generate(&self, request: &Request) -> Result<Response, BackendError> {
        let kind = request.kind();
        let payload = |e| BackendError::Payload { kind, source: e };
        Ok(match request {
            Request::EmbedText(r) => embedding(self.text_vector(&r.text)),
            Request::EmbedImage(r) => {
                let img = image_from_b64(&r.image_b64, r.format).map_err(payload)?;
                let scene = label_image(&img);
                let noise = self.unit_vector("embed_image", r.image_b64.as_bytes());
                let v = match scene.dominant() {
                    Some(label) => {
                        let t = self.text_vector(label);
                        t.iter().zip(&noise).map(|(a, b)| 0.9 * a + 0.1 * b).collect()
                    }
                    None => noise,
                };
                embedding(normalize(v))
            }
            Request::TagImage(r) => {
                let img = image_from_b64(&r.image_b64, r.format).map_err(payload)?;
                let scene = label_image(&img);
                let total = (img.width() * img.height()).max(1) as f64;
                let mut tags: Vec<ImageTag> = scene
                    .objects
                    .iter()
                    .map(|(label, o)| ImageTag {
                        label: label.to_string(),
                        prob: round4(0.55 + 0.45 * (o.count as f64 / (0.05 * total)).min(1.0)),
                    })
                    .collect();
                tags.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.label.cmp(&b.label)));
                Response::TagImage(TagImageResponse { tags })
            }
            Request::Detect(r) => {
                let img = image_from_b64(&r.image_b64, r.format).map_err(payload)?;
                let scene = label_image(&img);
                let mut detections = Vec::new();
                for tag in &r.tags {
                    let tag = normalize_text(tag);
                    if let Some(o) = scene.objects.get(tag.as_str()) {
                        if detections.iter().any(|d: &WireDetection| d.tag == tag) {
                            continue;
                        }
                        detections.push(WireDetection {
                            bbox: o.bbox(),
                            score: 0.9,
                            tag,
                        });
                    }
                }
                detections.sort_by(|a, b| a.bbox.x1.total_cmp(&b.bbox.x1).then(a.tag.cmp(&b.tag)));
                Response::Detect(DetectResponse { detections })
            }
            Request::SegmentMask(r) => {
                let img = image_from_b64(&r.image_b64, r.format).map_err(payload)?;
                let (w, h) = img.dimensions();
                let bg = *img.get_pixel(0, 0);
                let b = r.bbox;
                let mut px = vec![false; (w * h) as usize];
                for (x, y, p) in img.enumerate_pixels() {
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let inside = cx >= b.x1 && cx < b.x2 && cy >= b.y1 && cy < b.y2;
                    if inside && palette_label(p.0, bg.0).is_some() {
                        px[(y * w + x) as usize] = true;
                    }
                }
                let mask_rle = MaskRle::encode(&px, h, w).expect("buffer sized from image");
                Response::SegmentMask(SegmentMaskResponse { mask_rle })
            }
            Request::Vad(r) => {
                let track = AudioTrack::from_b64(&r.audio_b64).map_err(payload)?;
                Response::Vad(VadResponse { spans: energy_spans(&track) })
            }
            Request::Asr(r) => {
                let track = AudioTrack::from_b64(&r.audio_b64).map_err(payload)?;
                let freq = dominant_frequency(track.slice(r.window.start_s, r.window.end_s));
                let (language, language_prob) = if freq < 600.0 {
                    ("en", 0.93)
                } else if freq < 1200.0 {
                    ("fr", 0.88)
                } else {
                    ("en", 0.71)
                };
                let key = format!("{:.3}-{:.3}", r.window.start_s, r.window.end_s);
                let pick = self.rng("asr", key.as_bytes()).random_range(0..SENTENCES.len());
                Response::Asr(AsrResponse {
                    text: SENTENCES[pick].to_string(),
                    language: language.to_string(),
                    language_prob,
                    words: None,
                })
            }
            Request::AudioTag(r) => {
                let track = AudioTrack::from_b64(&r.audio_b64).map_err(payload)?;
                let window = track.slice(r.span.start_s, r.span.end_s);
                let tags = if rms(window) < 0.01 {
                    [("silence", 0.90), ("noise", 0.06), ("wind", 0.02)]
                } else if dominant_frequency(window) < 1200.0 {
                    [("speech", 0.86), ("music", 0.07), ("noise", 0.04)]
                } else {
                    [("music", 0.72), ("speech", 0.20), ("noise", 0.05)]
                };
                Response::AudioTag(AudioTagResponse {
                    tags: tags
                        .iter()
                        .map(|(l, p)| AudioTag { label: l.to_string(), prob: *p })
                        .collect(),
                })
            }
            Request::Chat(r) => Response::Chat(ChatResponse {
                text: self.chat_reply(&r.prompt),
            }),
        })
    }

    fn chat_reply(&self, prompt: &str) -> String {
        let task = task_of(prompt).unwrap_or("");
        match task {
            "noun_phrases" => {
                let answer = field_after(prompt, "Answer: ").unwrap_or_default();
                labels_in(&answer).join(", ")
            }
            "entity_match" => entity_pairs(prompt).join("\n"),
            "mine_questions" => {
                let caption = field_after(prompt, "Caption: ").unwrap_or_default();
                let labels = labels_in(&caption);
                if labels.is_empty() {
                    "What is happening in the video?".into()
                } else {
                    labels
                        .iter()
                        .enumerate()
                        .map(|(i, l)| format!("{}. Where is the {l}?", i + 1))
                        .collect::<Vec<_>>()
                        .join("\n")
                }
            }
            "answer" => {
                let question = field_after(prompt, "Question: ").unwrap_or_default();
                match labels_in(&question).first() {
                    Some(l) => format!("The {l} is visible in the video."),
                    None => "The video shows an everyday scene.".into(),
                }
            }
            t if t.starts_with("judge_") => {
                let mut key = self.seed.to_le_bytes().to_vec();
                key.extend_from_slice(prompt.as_bytes());
                let score = 1 + seed_from(&key) % 5;
                let pred = if score >= 3 { "yes" } else { "no" };
                format!("{{\"pred\": \"{pred}\", \"score\": {score}}}")
            }
            "conversation" => "The video shows a short scene with a few moving objects.".into(),
            _ => "OK".into(),
        }
    }
}

impl Backend for MockBackend {
    fn name(&self, kind: EndpointKind) -> String {
        format!("mock-{kind}:{}", self.seed)
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        let kind = request.kind();
        match self.scripted(request) {
            Some(MockReply::Reply(r)) => Ok(r.clone()),
            Some(MockReply::Fail(message)) => Err(BackendError::Failed {
                kind,
                message: message.clone(),
            }),
            Some(MockReply::Down) => Err(BackendError::Transport {
                kind,
                attempts: 3,
                message: "connection refused".into(),
            }),
            None => self.generate(request),
        }
    }
}

fn embedding(vector: Vec<f64>) -> Response {
    Response::Embedding(EmbeddingResponse {
        dim: vector.len(),
        vector,
    })
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Vocabulary labels occurring as whole words, in order of first occurrence.
fn labels_in(text: &str) -> Vec<&'static str> {
    let words: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let mut found: Vec<(usize, &'static str)> = MOCK_VOCABULARY
        .iter()
        .filter_map(|(l, _)| words.iter().position(|w| w == l).map(|i| (i, *l)))
        .collect();
    found.sort();
    found.into_iter().map(|(_, l)| l).collect()
}

fn field_after(prompt: &str, prefix: &str) -> Option<String> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(prefix))
        .map(str::to_string)
}

fn entity_pairs(prompt: &str) -> Vec<String> {
    let mut section = "";
    let mut phrases = Vec::new();
    let mut tracks: Vec<(String, String)> = Vec::new();
    for line in prompt.lines() {
        match line.trim() {
            "Phrases:" | "Tracked objects:" | "Pairs:" => section = line.trim(),
            "" => {}
            l if section == "Phrases:" => phrases.push(l.to_string()),
            l if section == "Tracked objects:" => {
                if let Some((id, tag)) = l.split_once(':') {
                    tracks.push((id.trim().to_string(), tag.trim().to_lowercase()));
                }
            }
            _ => {}
        }
    }
    phrases
        .iter()
        .filter_map(|p| {
            let pl = p.to_lowercase();
            tracks
                .iter()
                .find(|(_, tag)| *tag == pl || pl.contains(tag.as_str()))
                .map(|(id, _)| format!("{p}->{id}"))
        })
        .collect()
}

fn palette_label(p: [u8; 3], bg: [u8; 3]) -> Option<&'static str> {
    let diff = (0..3).map(|i| (p[i] as i32 - bg[i] as i32).abs()).max().unwrap_or(0);
    if diff <= BACKGROUND_TOLERANCE {
        return None;
    }
    MOCK_VOCABULARY
        .iter()
        .map(|(l, c)| {
            let d: i32 = (0..3).map(|i| (p[i] as i32 - c[i] as i32).pow(2)).sum();
            (d, *l)
        })
        .min()
        .filter(|(d, _)| *d <= PALETTE_TOLERANCE_SQ)
        .map(|(_, l)| l)
}

struct ObjectStats {
    count: u32,
    x1: u32,
    y1: u32,
    x2: u32,
    y2: u32,
}

impl ObjectStats {
    fn bbox(&self) -> BBox {
        BBox::new(self.x1 as f64, self.y1 as f64, self.x2 as f64, self.y2 as f64).expect("non-empty pixel set")
    }
}

struct LabelledImage {
    objects: BTreeMap<&'static str, ObjectStats>,
}

impl LabelledImage {
    fn dominant(&self) -> Option<&'static str> {
        self.objects
            .iter()
            .max_by(|a, b| a.1.count.cmp(&b.1.count).then(b.0.cmp(a.0)))
            .map(|(l, _)| *l)
    }
}

fn label_image(img: &RgbImage) -> LabelledImage {
    let mut objects: BTreeMap<&'static str, ObjectStats> = BTreeMap::new();
    if img.width() == 0 || img.height() == 0 {
        return LabelledImage { objects };
    }
    let bg = img.get_pixel(0, 0).0;
    for (x, y, p) in img.enumerate_pixels() {
        if let Some(label) = palette_label(p.0, bg) {
            let o = objects.entry(label).or_insert(ObjectStats {
                count: 0,
                x1: x,
                y1: y,
                x2: x + 1,
                y2: y + 1,
            });
            o.count += 1;
            o.x1 = o.x1.min(x);
            o.y1 = o.y1.min(y);
            o.x2 = o.x2.max(x + 1);
            o.y2 = o.y2.max(y + 1);
        }
    }
    objects.retain(|_, o| o.count >= MIN_OBJECT_PIXELS);
    LabelledImage { objects }
}

fn rms(samples: &[i16]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let s: f64 = samples.iter().map(|&v| (v as f64 / 32768.0).powi(2)).sum();
    (s / samples.len() as f64).sqrt()
}

/// Frequency estimate from the zero-crossing rate.
fn dominant_frequency(samples: &[i16]) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    let crossings = samples
        .windows(2)
        .filter(|w| (w[0] < 0) != (w[1] < 0))
        .count();
    crossings as f64 / 2.0 / (samples.len() as f64 / crate::audio::SAMPLE_RATE as f64)
}

/// 20 ms frames with RMS above 0.01 are voiced; voiced runs separated by at
/// most 200 ms are joined.
fn energy_spans(track: &AudioTrack) -> Vec<SpeechSpan> {
    const FRAME: usize = 320;
    const MAX_GAP: usize = 10;
    let frame_s = FRAME as f64 / crate::audio::SAMPLE_RATE as f64;
    let voiced: Vec<bool> = track.samples.chunks(FRAME).map(|c| rms(c) > 0.01).collect();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (i, &v) in voiced.iter().enumerate() {
        if !v {
            continue;
        }
        match runs.last_mut() {
            Some(last) if i - last.1 <= MAX_GAP => last.1 = i + 1,
            _ => runs.push((i, i + 1)),
        }
    }
    let dur = track.duration_s();
    runs.into_iter()
        .filter_map(|(a, b)| SpeechSpan::new(a as f64 * frame_s, (b as f64 * frame_s).min(dur)).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendExt, EmbedTextRequest};
    use image::Rgb;

    fn scene() -> RgbImage {
        let mut img = RgbImage::from_pixel(40, 30, Rgb([128, 128, 128]));
        for y in 5..10 {
            for x in 3..8 {
                img.put_pixel(x, y, Rgb(MOCK_VOCABULARY[0].1));
            }
        }
        for y in 20..28 {
            for x in 30..36 {
                img.put_pixel(x, y, Rgb(MOCK_VOCABULARY[2].1));
            }
        }
        img
    }

    fn tone(freq: f64, secs: f64) -> Vec<i16> {
        let n = (secs * 16_000.0) as usize;
        (0..n)
            .map(|i| ((i as f64 / 16_000.0 * freq * std::f64::consts::TAU).sin() * 8000.0) as i16)
            .collect()
    }

    #[test]
    fn text_embedding_is_deterministic_unit() {
        let a = MockBackend::new(7).embed_text("ball").unwrap();
        let b = MockBackend::new(7).embed_text("ball").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), MOCK_EMBED_DIM);
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(a, MockBackend::new(8).embed_text("ball").unwrap());
    }

    #[test]
    fn detection_finds_palette_objects() {
        let m = MockBackend::new(1);
        let det = m.detect(&scene(), &["car".into(), "ball".into(), "dog".into()]).unwrap();
        assert_eq!(det.len(), 2);
        assert_eq!(det[0].tag, "ball");
        assert_eq!(det[0].bbox, BBox::new(3., 5., 8., 10.).unwrap());
        assert_eq!(det[1].bbox, BBox::new(30., 20., 36., 28.).unwrap());
        let tags = m.tag_image(&scene()).unwrap();
        assert_eq!(tags.iter().map(|t| t.label.as_str()).collect::<Vec<_>>(), vec!["car", "ball"]);
    }

    #[test]
    fn mask_covers_object_pixels_in_box() {
        let m = MockBackend::new(1);
        let mask = m.segment_mask(&scene(), BBox::new(0., 0., 20., 20.).unwrap()).unwrap();
        assert_eq!(mask.area(), 25);
        assert_eq!(mask.to_box().unwrap(), BBox::new(3., 5., 8., 10.).unwrap());
    }

    #[test]
    fn image_embedding_aligns_with_label_text() {
        let m = MockBackend::new(3);
        let mut img = RgbImage::from_pixel(10, 10, Rgb([0, 0, 0]));
        for y in 2..8 {
            for x in 2..8 {
                img.put_pixel(x, y, Rgb(MOCK_VOCABULARY[0].1));
            }
        }
        let v = m.embed_image(&img).unwrap();
        let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!(cos(&v, &m.embed_text("ball").unwrap()) > 0.8);
        assert!(cos(&v, &m.embed_text("car").unwrap()).abs() < 0.5);
    }

    #[test]
    fn audio_world() {
        let mut samples = vec![0i16; 8_000];
        samples.extend(tone(300.0, 1.0));
        samples.extend(vec![0i16; 16_000]);
        samples.extend(tone(2000.0, 1.0));
        let track = AudioTrack { samples };
        let b64 = track.to_b64().unwrap();
        let m = MockBackend::new(7);
        let spans = m.vad(&b64).unwrap();
        assert_eq!(spans.len(), 2);
        assert!((spans[0].start_s - 0.5).abs() < 0.03 && (spans[0].end_s - 1.5).abs() < 0.03);
        let asr = m.asr(&b64, spans[0], false).unwrap();
        assert_eq!(asr.language, "en");
        let tags = m.audio_tag(&b64, spans[1]).unwrap();
        assert_eq!(tags[0].label, "music");
        let tags = m.audio_tag(&b64, spans[0]).unwrap();
        assert_eq!(tags[0].label, "speech");
    }

    #[test]
    fn scripted_replies_take_precedence() {
        let req = Request::EmbedText(EmbedTextRequest { text: "x".into() });
        let m = MockBackend::new(0)
            .script(&req, MockReply::Fail("nope".into()))
            .with_chat_reply("man, tennis racket");
        assert!(matches!(m.call(&req), Err(BackendError::Failed { .. })));
        assert_eq!(m.chat("anything", 16).unwrap(), "man, tennis racket");
        let down = MockBackend::new(0).script_kind(EndpointKind::Vad, MockReply::Down);
        let err = down.vad("AA==").unwrap_err();
        assert!(err.is_transport() && err.is_retryable());
    }

    #[test]
    fn chat_tasks() {
        let m = MockBackend::new(7);
        let p = "### task: noun_phrases v1\nAnswer: A dog chases the red ball near a tree.\nPhrases:";
        assert_eq!(m.chat(p, 64).unwrap(), "dog, ball, tree");
        let p = "### task: entity_match v1\nPhrases:\nball\nkite\nTracked objects:\n0: car\n3: ball\nPairs:\n";
        assert_eq!(m.chat(p, 64).unwrap(), "ball->3");
        let j = m.chat("### task: judge_qa v1\nQuestion: q", 64).unwrap();
        assert_eq!(j, m.chat("### task: judge_qa v1\nQuestion: q", 64).unwrap());
        assert!(j.starts_with("{\"pred\""));
    }
}
