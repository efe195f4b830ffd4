//! Speech transcript conditioning: VAD span windowing, word-timing fallback,
//! language and audio-tag filtering, and the transcript-bearing prompt.

use serde::{Deserialize, Serialize};

use crate::backends::{audio_payload, Backend, BackendError, BackendExt, EndpointKind};
use crate::media::AudioTrack;
use crate::par::parallel_map;
use crate::templates::{Template, TemplateError};

pub const DEFAULT_WINDOW_S: f64 = 30.0;
pub const DEFAULT_MERGE_GAP_S: f64 = 0.5;
pub const DEFAULT_MIN_LANGUAGE_PROB: f64 = 0.5;
pub const DEFAULT_MUSIC_RATIO: f64 = 2.0;
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("invalid span [{0}, {1})")]
    InvalidSpan(f64, f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("segment [{0}, {1}) has no text to align")]
    EmptyText(f64, f64),
    #[error("{0} decisions for {1} segments")]
    DecisionCount(usize, usize),
    #[error("expected exactly 3 tags sorted by descending probability in [0, 1]")]
    BadTags,
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeechSpan {
    pub start_s: f64,
    pub end_s: f64,
}

impl SpeechSpan {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self, AudioError> {
        if !(start_s.is_finite() && end_s.is_finite() && 0.0 <= start_s && start_s < end_s) {
            return Err(AudioError::InvalidSpan(start_s, end_s));
        }
        Ok(Self { start_s, end_s })
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageGuess {
    pub code: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
    pub language: Option<LanguageGuess>,
    pub words: Option<Vec<WordSpan>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioTag {
    pub label: String,
    pub prob: f64,
}

/// An ASR segment with the tagger's three most probable classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedSegment {
    pub segment: AsrSegment,
    top_tags: [AudioTag; 3],
}

impl TaggedSegment {
    pub fn new(segment: AsrSegment, tags: Vec<AudioTag>) -> Result<Self, AudioError> {
        let top_tags: [AudioTag; 3] = tags.try_into().map_err(|_| AudioError::BadTags)?;
        let in_range = top_tags.iter().all(|t| (0.0..=1.0).contains(&t.prob));
        let sorted = top_tags.windows(2).all(|w| w[0].prob >= w[1].prob);
        if !in_range || !sorted {
            return Err(AudioError::BadTags);
        }
        Ok(Self { segment, top_tags })
    }

    pub fn top_tags(&self) -> &[AudioTag; 3] {
        &self.top_tags
    }

    fn prob(&self, label: &str) -> Option<f64> {
        self.top_tags.iter().find(|t| t.label == label).map(|t| t.prob)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NonEnglish,
    NoSpeech,
    MusicDominant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Drop(DropReason),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilteredTranscript {
    pub kept: Vec<AsrSegment>,
    pub dropped: Vec<(AsrSegment, DropReason)>,
}

/// Filter thresholds, echoed into every transcript manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub min_language_prob: f64,
    pub music_ratio: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            min_language_prob: DEFAULT_MIN_LANGUAGE_PROB,
            music_ratio: DEFAULT_MUSIC_RATIO,
        }
    }
}

/// Union overlapping spans, merge gaps of at most `merge_gap_s`, then cut
/// anything longer than `window_s` into consecutive window-sized pieces.
pub fn prepare_windows(spans: &[SpeechSpan], merge_gap_s: f64, window_s: f64) -> Result<Vec<SpeechSpan>, AudioError> {
    if !(window_s > 0.0 && window_s.is_finite()) {
        return Err(AudioError::InvalidParameter(format!("window_s must be positive, got {window_s}")));
    }
    if !(merge_gap_s >= 0.0 && merge_gap_s.is_finite()) {
        return Err(AudioError::InvalidParameter(format!("merge_gap_s must be >= 0, got {merge_gap_s}")));
    }
    for s in spans {
        SpeechSpan::new(s.start_s, s.end_s)?;
    }
    let mut sorted = spans.to_vec();
    sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.end_s.total_cmp(&b.end_s)));

    let mut merged: Vec<SpeechSpan> = Vec::new();
    for s in sorted {
        match merged.last_mut() {
            Some(last) if s.start_s - last.end_s <= merge_gap_s => last.end_s = last.end_s.max(s.end_s),
            _ => merged.push(s),
        }
    }

    let mut out = Vec::new();
    for m in merged {
        let mut start = m.start_s;
        while m.end_s - start > window_s {
            out.push(SpeechSpan { start_s: start, end_s: start + window_s });
            start += window_s;
        }
        out.push(SpeechSpan { start_s: start, end_s: m.end_s });
    }
    Ok(out)
}

/// Word timings by proportional character count over the segment, with the
/// single separating spaces counted in the budget.
pub fn align_words_fallback(seg: &AsrSegment) -> Result<AsrSegment, AudioError> {
    let words: Vec<&str> = seg.text.split_whitespace().collect();
    if words.is_empty() {
        return Err(AudioError::EmptyText(seg.start_s, seg.end_s));
    }
    let lens: Vec<usize> = words.iter().map(|w| w.chars().count()).collect();
    let budget = lens.iter().sum::<usize>() + words.len() - 1;
    let per_char = (seg.end_s - seg.start_s) / budget as f64;

    let mut cursor = 0usize;
    let mut spans = Vec::with_capacity(words.len());
    for (i, (word, len)) in words.iter().zip(&lens).enumerate() {
        let start_s = seg.start_s + cursor as f64 * per_char;
        let end_s = if i + 1 == words.len() {
            seg.end_s
        } else {
            seg.start_s + (cursor + len) as f64 * per_char
        };
        spans.push(WordSpan { word: word.to_string(), start_s, end_s });
        cursor += len + 1;
    }
    Ok(AsrSegment {
        words: Some(spans),
        ..seg.clone()
    })
}

pub fn filter_language(seg: &AsrSegment, min_prob: f64) -> Decision {
    match &seg.language {
        Some(l) if l.code == "en" && l.prob >= min_prob => Decision::Keep,
        _ => Decision::Drop(DropReason::NonEnglish),
    }
}

pub fn filter_by_tags(t: &TaggedSegment, music_ratio: f64) -> Decision {
    let Some(speech) = t.prob("speech") else {
        return Decision::Drop(DropReason::NoSpeech);
    };
    let music = t.prob("music").unwrap_or(0.0);
    let dominant = if speech > 0.0 { music / speech >= music_ratio } else { music > 0.0 };
    if dominant {
        Decision::Drop(DropReason::MusicDominant)
    } else {
        Decision::Keep
    }
}

/// Language filter first, then the tag rules.
pub fn decide(t: &TaggedSegment, thresholds: &FilterThresholds) -> Decision {
    match filter_language(&t.segment, thresholds.min_language_prob) {
        Decision::Keep => filter_by_tags(t, thresholds.music_ratio),
        drop => drop,
    }
}

pub fn assemble_transcript(segments: &[AsrSegment], decisions: &[Decision]) -> Result<FilteredTranscript, AudioError> {
    if segments.len() != decisions.len() {
        return Err(AudioError::DecisionCount(decisions.len(), segments.len()));
    }
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| {
        segments[a]
            .start_s
            .total_cmp(&segments[b].start_s)
            .then(segments[a].end_s.total_cmp(&segments[b].end_s))
    });
    let mut out = FilteredTranscript::default();
    for i in order {
        match decisions[i] {
            Decision::Keep => out.kept.push(segments[i].clone()),
            Decision::Drop(r) => out.dropped.push((segments[i].clone(), r)),
        }
    }
    Ok(out)
}

/// `[start–end] text`, two decimals, en dash.
pub fn transcript_line(seg: &AsrSegment) -> String {
    format!("[{:.2}\u{2013}{:.2}] {}", seg.start_s, seg.end_s, seg.text.trim())
}

pub fn build_prompt(
    template: &Template,
    transcript: &FilteredTranscript,
    user_instruction: &str,
    video_token_placeholder: &str,
) -> Result<String, AudioError> {
    let audio_block = if transcript.kept.is_empty() {
        String::new()
    } else {
        let mut block = String::from("\nAudio transcript:\n");
        for seg in &transcript.kept {
            block.push_str(&transcript_line(seg));
            block.push('\n');
        }
        block
    };
    Ok(template.render(&[
        ("video", video_token_placeholder),
        ("audio_block", &audio_block),
        ("instruction", user_instruction),
    ])?)
}

/// One line of a transcript JSONL artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
    pub language: Option<String>,
    pub language_prob: Option<f64>,
    pub top_tags: Vec<AudioTag>,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_reason: Option<DropReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<WordSpan>>,
}

impl TranscriptRecord {
    pub fn new(video_id: &str, t: &TaggedSegment, decision: Decision) -> Self {
        let seg = &t.segment;
        Self {
            video_id: video_id.to_string(),
            start_s: seg.start_s,
            end_s: seg.end_s,
            text: seg.text.clone(),
            language: seg.language.as_ref().map(|l| l.code.clone()),
            language_prob: seg.language.as_ref().map(|l| l.prob),
            top_tags: t.top_tags.to_vec(),
            kept: decision == Decision::Keep,
            drop_reason: match decision {
                Decision::Keep => None,
                Decision::Drop(r) => Some(r),
            },
            words: seg.words.clone(),
        }
    }
}

/// Window and filter settings of a transcription run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranscribeOptions {
    pub window_s: f64,
    pub merge_gap_s: f64,
    pub min_language_prob: f64,
    pub music_ratio: f64,
}

impl Default for TranscribeOptions {
    fn default() -> Self {
        Self {
            window_s: DEFAULT_WINDOW_S,
            merge_gap_s: DEFAULT_MERGE_GAP_S,
            min_language_prob: DEFAULT_MIN_LANGUAGE_PROB,
            music_ratio: DEFAULT_MUSIC_RATIO,
        }
    }
}

impl TranscribeOptions {
    pub fn thresholds(&self) -> FilterThresholds {
        FilterThresholds {
            min_language_prob: self.min_language_prob,
            music_ratio: self.music_ratio,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.window_s > 0.0 && self.window_s.is_finite()) {
            return Err("audio.window_s must be positive".into());
        }
        if !(self.merge_gap_s >= 0.0 && self.merge_gap_s.is_finite()) {
            return Err("audio.merge_gap_s must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.min_language_prob) {
            return Err("audio.min_language_prob must be in [0, 1]".into());
        }
        if !(self.music_ratio > 0.0 && self.music_ratio.is_finite()) {
            return Err("audio.music_ratio must be positive".into());
        }
        Ok(())
    }
}

/// VAD, windowing, ASR and tagging of one audio track, with every window's
/// keep/drop decision. Windows are transcribed concurrently on up to
/// `workers` threads; records come back in time order. An empty track
/// yields no records and makes no backend call.
pub fn transcribe(
    video_id: &str,
    track: &AudioTrack,
    backend: &dyn Backend,
    options: &TranscribeOptions,
    workers: usize,
) -> Result<Vec<TranscriptRecord>, BackendError> {
    if track.is_empty() {
        return Ok(Vec::new());
    }
    let payload = audio_payload(track)?;
    let spans = backend.vad(&payload)?;
    let windows = prepare_windows(&spans, options.merge_gap_s, options.window_s).map_err(|e| BackendError::Malformed {
        kind: EndpointKind::Vad,
        message: e.to_string(),
    })?;
    let thresholds = options.thresholds();
    parallel_map(&windows, workers, |_, &w| {
        let asr = backend.asr(&payload, w, w.duration() < options.window_s)?;
        let mut segment = AsrSegment {
            start_s: w.start_s,
            end_s: w.end_s,
            text: asr.text,
            language: Some(LanguageGuess {
                code: asr.language,
                prob: asr.language_prob,
            }),
            words: asr.words,
        };
        if segment.words.is_none() && !segment.text.trim().is_empty() {
            segment = align_words_fallback(&segment).expect("non-empty text aligns");
        }
        let tags = backend.audio_tag(&payload, w)?;
        let tagged = TaggedSegment::new(segment, tags).map_err(|e| BackendError::Malformed {
            kind: EndpointKind::AudioTag,
            message: e.to_string(),
        })?;
        let decision = decide(&tagged, &thresholds);
        Ok(TranscriptRecord::new(video_id, &tagged, decision))
    })
    .into_iter()
    .collect()
}

/// Kept and dropped segments of a record list.
pub fn transcript_from_records(records: &[TranscriptRecord]) -> FilteredTranscript {
    let mut out = FilteredTranscript::default();
    for r in records {
        let seg = AsrSegment {
            start_s: r.start_s,
            end_s: r.end_s,
            text: r.text.clone(),
            language: r.language.clone().zip(r.language_prob).map(|(code, prob)| LanguageGuess { code, prob }),
            words: r.words.clone(),
        };
        match r.drop_reason {
            None if r.kept => out.kept.push(seg),
            Some(reason) => out.dropped.push((seg, reason)),
            None => out.dropped.push((seg, DropReason::NoSpeech)),
        }
    }
    out
}
